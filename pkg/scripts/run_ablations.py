#!/usr/bin/env python3
"""Encoder-variant and negative-sampling ablations on one task.

Trains an energy model + refiner per encoder variant under identical
budgets, evaluates them, and contrasts the default negative sampling with
the perturbation-only variant.

Example:
    python scripts/run_ablations.py --task reach --root runs/ablations
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
    parser.add_argument("--task", default="reach")
    parser.add_argument("--root", default="runs/ablations")
    parser.add_argument("--variants", default="trajectory_aligned,no_concat,gap,vit_patch")
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()

    root = Path(args.root)
    data = root / "data"
    if not (data / "manifest.json").exists():
        run(["gen-data", "--task", args.task, "--train", "200", "--test", "50",
             "--seed", str(args.seed), "--out", str(data)])
    vae = root / "vae" / "vae.ckpt"
    if not vae.exists():
        run(["train-vae", "--data", str(data), "--out", str(root / "vae")])

    variants = [v.strip() for v in args.variants.split(",")]
    for variant in variants:
        vdir = root / "models" / variant
        if not (vdir / "ebm.ckpt").exists():
            run(["train-ebm", "--data", str(data), "--vae", str(vae),
                 "--variant", variant, "--out", str(vdir)])
        if not (vdir / "dmo.ckpt").exists():
            run(["train-dmo", "--data", str(data), "--vae", str(vae),
                 "--variant", variant, "--out", str(vdir)])
    run(["ablate", "--data", str(data), "--models", str(root / "models"),
         "--variants", ",".join(variants), "--n", "8", "--R", "1",
         "--out", str(root / "ablate")])
    run(["cost", "--checkpoints"]
        + [str(root / "models" / v / "ebm.ckpt") for v in variants]
        + ["--out", str(root / "cost")])

    # negative-sampling ablation: perturbation-only negatives
    onlyvae = root / "models" / "only_vae"
    if not (onlyvae / "ebm.ckpt").exists():
        run(["train-ebm", "--data", str(data), "--vae", str(vae),
             "--k-data", "0", "--k-vae", "8", "--out", str(onlyvae)])
    run(["evaluate", "--data", str(data), "--ebm", str(onlyvae / "ebm.ckpt"),
         "--dmo", str(root / "models" / "trajectory_aligned" / "dmo.ckpt"),
         "--n", "8", "--R", "1", "--label", "only_vae_negatives",
         "--out", str(root / "eval")])
    print(f"reports written under {root}/ablate, {root}/cost and {root}/eval")


if __name__ == "__main__":
    main()
