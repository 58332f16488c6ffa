#!/usr/bin/env python3
"""End-to-end benchmark for one task: generate data, train all three models,
then compare the learned refiner against the gradient-based baselines.

Example:
    python scripts/run_task_benchmark.py --task reach --root runs/reach
"""

import argparse
import sys
from pathlib import Path

from ebmdmo.cli import main as cli


def run(args: list[str]) -> None:
    code = cli(args)
    if code != 0:
        sys.exit(code)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--task", default="reach",
                        choices=["reach", "push_button", "pick_place"])
    parser.add_argument("--root", default="runs/benchmark")
    parser.add_argument("--train", type=int, default=200)
    parser.add_argument("--test", type=int, default=50)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--skip-training", action="store_true",
                        help="reuse checkpoints already under --root")
    args = parser.parse_args()

    root = Path(args.root)
    data = root / "data"
    if not (data / "manifest.json").exists():
        run(["gen-data", "--task", args.task, "--train", str(args.train),
             "--test", str(args.test), "--seed", str(args.seed),
             "--out", str(data)])
    if not args.skip_training:
        run(["train-vae", "--data", str(data), "--out", str(root / "vae")])
        run(["train-ebm", "--data", str(data),
             "--vae", str(root / "vae" / "vae.ckpt"),
             "--out", str(root / "ebm")])
        run(["train-dmo", "--data", str(data),
             "--vae", str(root / "vae" / "vae.ckpt"),
             "--out", str(root / "dmo")])

    ebm = str(root / "ebm" / "ebm.ckpt")
    base = ["evaluate", "--data", str(data), "--ebm", ebm,
            "--n", "8", "--R", "1", "--out", str(root / "eval")]
    run(base + ["--dmo", str(root / "dmo" / "dmo.ckpt"), "--label", "refiner"])
    run(base + ["--optimizer", "langevin", "--label", "langevin"])
    run(base + ["--optimizer", "gd", "--label", "gd"])
    run(base + ["--optimizer", "latent_langevin", "--step-size", "0.01",
                "--vae", str(root / "vae" / "vae.ckpt"), "--label", "vaebm_l"])
    run(base + ["--optimizer", "latent_langevin", "--step-size", "0.001",
                "--vae", str(root / "vae" / "vae.ckpt"), "--label", "vaebm_s"])
    run(["cost", "--checkpoints", ebm, str(root / "dmo" / "dmo.ckpt"),
         "--out", str(root / "cost")])
    print(f"reports written under {root}/eval and {root}/cost")


if __name__ == "__main__":
    main()
