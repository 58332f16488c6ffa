"""Operator surface: dataset generation, the three training jobs, prediction,
evaluation, sweeps, ablations, cost accounting, and PNG rendering.

Exit codes are a stable scripting contract:
  0 success, 2 usage / invalid arguments, 3 missing or invalid inputs,
  4 numerical failure (non-finite training loss).

`EBMDMO_THREADS` caps worker parallelism.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import checkpoint_hash
from .config import ConfigError, RunConfig
from .ebm import EbmTrainConfig, EnergyModel, rank_metric, train_ebm
from .encoder import EncoderConfig, VARIANTS
from .errors import EbmDmoError, EmptyDataset, IoError, NonFiniteLoss
from .evalharness import ablate_encoders, cost_report, evaluate, sweep
from .motion import Camera, distance
from .optimizers import OPTIMIZER_KINDS, OptimizerSpec
from .pipeline import PredictionConfig, predict
from .refiner import DmoTrainConfig, MotionRefiner, train_refiner
from .scenes import TaskId, check_success, gen_dataset, load_manifest, load_motions, load_split
from .vae import MotionVae, VaeTrainConfig, train_vae
from .viz import draw_prediction

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_NUMERICAL = 4


def _write_log_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    keys: list[str] = []
    for row in rows:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg


def _apply(section, args, names: dict[str, str]) -> None:
    """Copy CLI overrides (when given) onto a config section."""
    for arg_name, field_name in names.items():
        value = getattr(args, arg_name, None)
        if value is not None:
            setattr(section, field_name, value)


def _encoder_cfg(manifest: dict, variant: str) -> EncoderConfig:
    return EncoderConfig(
        image_size=manifest["image_size"][0],
        horizon=manifest["horizon"],
        max_depth=manifest["max_depth"],
        variant=variant,
    )


def _require(path: str | None, what: str) -> Path:
    if path is None:
        raise IoError(f"missing required {what}")
    p = Path(path)
    if not p.exists():
        raise IoError(f"{what} not found: {p}")
    return p


def _optimizer_spec(cfg: RunConfig, args) -> OptimizerSpec:
    _apply(cfg.optimizer, args, {
        "optimizer": "kind", "step_size": "step_size", "iterations": "iterations",
        "noise_scale": "noise_scale", "prior_weight": "prior_weight",
    })
    o = cfg.optimizer
    return OptimizerSpec(
        kind=o.kind, step_size=o.step_size, iterations=o.iterations,
        noise_scale=o.noise_scale, prior_weight=o.prior_weight,
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    _apply(cfg.dataset, args, {
        "task": "task", "train": "train", "test": "test", "seed": "seed",
        "image_size": "image_size", "horizon": "horizon",
    })
    d = cfg.dataset
    if d.train <= 0 or d.test <= 0:
        print("usage error: --train and --test must be positive", file=sys.stderr)
        return EXIT_USAGE
    try:
        task = TaskId(d.task)
    except ValueError:
        print(f"usage error: unknown task {d.task!r}", file=sys.stderr)
        return EXIT_USAGE
    half = d.image_size / 2.0
    cam = Camera(
        fx=1.25 * d.image_size, fy=1.25 * d.image_size,
        cx=half, cy=half, width=d.image_size, height=d.image_size,
    )
    manifest = gen_dataset(
        task, d.train, d.test, d.seed, args.out, horizon=d.horizon, cam=cam
    )
    cfg.echo(args.out, "gen-data")
    print(
        f"wrote {manifest['train_count']} train / {manifest['test_count']} test "
        f"episodes for task {manifest['task']} to {args.out}"
    )
    return EXIT_OK


def cmd_train_vae(args) -> int:
    cfg = _load_config(args)
    _apply(cfg.vae, args, {
        "steps": "steps", "lr": "lr", "batch": "batch", "seed": "seed",
        "beta": "beta", "latent_dim": "latent_dim",
    })
    data_dir = _require(args.data, "dataset directory")
    load_manifest(data_dir)
    motions = load_motions(data_dir, "train")
    v = cfg.vae
    train_cfg = VaeTrainConfig(
        latent_dim=v.latent_dim, beta=v.beta, d_model=v.d_model, layers=v.layers,
        heads=v.heads, ffn=v.ffn, lr=v.lr, steps=v.steps, batch=v.batch, seed=v.seed,
    )
    model, log = train_vae(motions, train_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "vae.ckpt")
    _write_log_csv(out / "vae_train_log.csv", log)
    cfg.echo(out, "train-vae")
    recon = np.mean(
        [distance(m, model.decode(model.encode(m).mu)) for m in motions]
    )
    print(f"vae trained: final loss {log[-1]['loss']:.6f}, "
          f"mean reconstruction position error {recon:.4f} m")
    return EXIT_OK


def cmd_train_ebm(args) -> int:
    cfg = _load_config(args)
    _apply(cfg.ebm, args, {
        "variant": "variant", "k_data": "k_data", "k_vae": "k_vae",
        "loss_mode": "loss_mode", "steps": "steps", "lr": "lr",
        "batch": "batch", "seed": "seed",
    })
    if getattr(args, "include_self_vae_negative", False):
        cfg.ebm.include_self_vae_negative = True
    data_dir = _require(args.data, "dataset directory")
    vae_path = _require(args.vae, "vae checkpoint")
    manifest = load_manifest(data_dir)
    episodes = load_split(data_dir, "train")
    eval_eps = load_split(data_dir, "test")
    vae_model = MotionVae.load(vae_path)
    e = cfg.ebm
    train_cfg = EbmTrainConfig(
        k_data=e.k_data, k_vae=e.k_vae,
        include_self_vae_negative=e.include_self_vae_negative,
        loss_mode=e.loss_mode, reg_weight=e.reg_weight, lr=e.lr,
        steps=e.steps, batch=e.batch, seed=e.seed, eval_every=e.eval_every,
    )
    model, log = train_ebm(
        episodes, vae_model, train_cfg, _encoder_cfg(manifest, e.variant),
        eval_episodes=eval_eps,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "ebm.ckpt")
    _write_log_csv(out / "ebm_train_log.csv", log)
    cfg.echo(out, "train-ebm")
    final_rank = rank_metric(
        model, eval_eps, [ep.expert for ep in episodes], episodes[0].camera,
        np.random.default_rng(e.seed + 100),
    )
    print(f"ebm trained: final loss {log[-1]['loss']:.4f}, "
          f"held-out rank metric {final_rank:.3f}")
    return EXIT_OK


def cmd_train_dmo(args) -> int:
    cfg = _load_config(args)
    _apply(cfg.dmo, args, {
        "variant": "variant", "r_train": "r_train", "steps": "steps",
        "lr": "lr", "batch": "batch", "seed": "seed",
        "pose_dropout": "pose_dropout",
    })
    if getattr(args, "direct", False):
        cfg.dmo.residual = False
    data_dir = _require(args.data, "dataset directory")
    vae_path = _require(args.vae, "vae checkpoint")
    manifest = load_manifest(data_dir)
    episodes = load_split(data_dir, "train")
    vae_model = MotionVae.load(vae_path)
    d = cfg.dmo
    train_cfg = DmoTrainConfig(
        r_train=d.r_train, detach_between_steps=d.detach_between_steps,
        pose_dropout=d.pose_dropout, lr=d.lr, steps=d.steps,
        batch=d.batch, seed=d.seed,
    )
    model, log = train_refiner(
        episodes, vae_model, train_cfg, _encoder_cfg(manifest, d.variant),
        residual=d.residual,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "dmo.ckpt")
    _write_log_csv(out / "dmo_train_log.csv", log)
    cfg.echo(out, "train-dmo")
    print(f"dmo trained: final loss {log[-1]['loss']:.5f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _load_config(args)
    _apply(cfg.prediction, args, {"n": "n", "rounds": "rounds"})
    spec = _optimizer_spec(cfg, args)
    data_dir = _require(args.data, "dataset directory")
    ebm_path = _require(args.ebm, "ebm checkpoint")
    model = EnergyModel.load(ebm_path)
    refiner = MotionRefiner.load(_require(args.dmo, "dmo checkpoint")) \
        if spec.kind == "dmo" and cfg.prediction.rounds > 0 else None
    vae_model = MotionVae.load(_require(args.vae, "vae checkpoint")) \
        if spec.kind == "latent_langevin" and cfg.prediction.rounds > 0 else None
    pool = load_motions(data_dir, "train")
    if cfg.prediction.n > len(pool):
        print(f"usage error: --n {cfg.prediction.n} exceeds pool size {len(pool)}",
              file=sys.stderr)
        return EXIT_USAGE
    from .scenes import load_episode

    ep = load_episode(data_dir, "test", args.episode)
    pred_cfg = PredictionConfig(n=cfg.prediction.n, rounds=cfg.prediction.rounds,
                                optimizer=spec)
    rng = np.random.default_rng(cfg.eval.seed if args.seed is None else args.seed)
    result = predict(model, ep.image, pool, pred_cfg, ep.camera, rng,
                     refiner=refiner, vae=vae_model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"prediction_{args.episode:04d}.json").write_text(result.to_json())
    if args.render:
        img = draw_prediction(ep.image, result.best, ep.camera, result.best_energy)
        img.save(out / f"prediction_{args.episode:04d}.png")
    cfg.echo(out, "predict")
    report = check_success(ep.scene, result.best)
    print(f"episode {args.episode}: best energy {result.best_energy:.4f}, "
          f"success={report.success} ({report.failure_reason.value})")
    return EXIT_OK


def _load_eval_inputs(args, cfg: RunConfig):
    data_dir = _require(args.data, "dataset directory")
    ebm_path = _require(args.ebm, "ebm checkpoint")
    model = EnergyModel.load(ebm_path)
    episodes = load_split(data_dir, "test")
    cap = cfg.eval.episodes
    if args.episodes is not None:
        cap = args.episodes
    if cap and cap > 0:
        episodes = episodes[:cap]
    pool = load_motions(data_dir, "train")
    meta = {
        "dataset_manifest_hash": checkpoint_hash(Path(data_dir) / "manifest.json"),
        "checkpoint_hashes": {"ebm": checkpoint_hash(ebm_path)},
    }
    return data_dir, model, episodes, pool, meta


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    _apply(cfg.prediction, args, {"n": "n", "rounds": "rounds"})
    _apply(cfg.eval, args, {"seed": "seed"})
    spec = _optimizer_spec(cfg, args)
    data_dir, model, episodes, pool, meta = _load_eval_inputs(args, cfg)
    if cfg.prediction.n > len(pool):
        print(f"usage error: --n {cfg.prediction.n} exceeds pool size {len(pool)}",
              file=sys.stderr)
        return EXIT_USAGE
    refiner = None
    vae_model = None
    if spec.kind == "dmo" and cfg.prediction.rounds > 0:
        dmo_path = _require(args.dmo, "dmo checkpoint")
        refiner = MotionRefiner.load(dmo_path)
        meta["checkpoint_hashes"]["dmo"] = checkpoint_hash(dmo_path)
    if spec.kind == "latent_langevin" and cfg.prediction.rounds > 0:
        vae_path = _require(args.vae, "vae checkpoint")
        vae_model = MotionVae.load(vae_path)
        meta["checkpoint_hashes"]["vae"] = checkpoint_hash(vae_path)
    label = args.label or spec.kind
    pred_cfg = PredictionConfig(n=cfg.prediction.n, rounds=cfg.prediction.rounds,
                                optimizer=spec)
    report = evaluate(episodes, pool, model, pred_cfg, label, cfg.eval.seed,
                      refiner=refiner, vae=vae_model, metadata=meta)
    task = episodes[0].scene.task_id.value
    name = f"eval_{task}_{label}_s{cfg.eval.seed}"
    report.write(args.out, name)
    cfg.echo(args.out, "evaluate")
    for row in report.rows:
        print(f"{row.label}: task={row.task} success={row.success_rate:.3f} "
              f"episodes={row.episodes} mean_energy={row.mean_final_energy:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    _apply(cfg.eval, args, {"seed": "seed"})
    data_dir, model, episodes, pool, meta = _load_eval_inputs(args, cfg)
    dmo_path = _require(args.dmo, "dmo checkpoint")
    refiner = MotionRefiner.load(dmo_path)
    meta["checkpoint_hashes"]["dmo"] = checkpoint_hash(dmo_path)
    try:
        n_values = [int(v) for v in args.n.split(",")]
        r_values = [int(v) for v in args.R.split(",")]
    except ValueError:
        print("usage error: --n/--R must be comma-separated integers", file=sys.stderr)
        return EXIT_USAGE
    if any(n < 1 or n > len(pool) for n in n_values) or any(r < 0 for r in r_values):
        print("usage error: n values must be in [1, pool size], R values >= 0",
              file=sys.stderr)
        return EXIT_USAGE
    report = sweep(episodes, pool, model, refiner, n_values, r_values,
                   cfg.eval.seed, metadata=meta)
    task = episodes[0].scene.task_id.value
    report.write(args.out, f"sweep_{task}_s{cfg.eval.seed}")
    cfg.echo(args.out, "sweep")
    for row in report.rows:
        print(f"{row.label}: success={row.success_rate:.3f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    _apply(cfg.prediction, args, {"n": "n", "rounds": "rounds"})
    _apply(cfg.eval, args, {"seed": "seed"})
    data_dir = _require(args.data, "dataset directory")
    models_dir = _require(args.models, "models directory")
    episodes = load_split(data_dir, "test")
    cap = args.episodes if args.episodes is not None else cfg.eval.episodes
    if cap and cap > 0:
        episodes = episodes[:cap]
    pool = load_motions(data_dir, "train")
    variants = [v.strip() for v in args.variants.split(",")]
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        print(f"usage error: unknown variants {bad}", file=sys.stderr)
        return EXIT_USAGE
    models = {}
    meta = {"checkpoint_hashes": {}}
    for variant in variants:
        ebm_path = _require(models_dir / variant / "ebm.ckpt", f"{variant} ebm checkpoint")
        ebm_model = EnergyModel.load(ebm_path)
        meta["checkpoint_hashes"][f"{variant}/ebm"] = checkpoint_hash(ebm_path)
        refiner = None
        if cfg.prediction.rounds > 0:
            dmo_path = _require(models_dir / variant / "dmo.ckpt",
                                f"{variant} dmo checkpoint")
            refiner = MotionRefiner.load(dmo_path)
            meta["checkpoint_hashes"][f"{variant}/dmo"] = checkpoint_hash(dmo_path)
        models[variant] = (ebm_model, refiner)
    pred_cfg = PredictionConfig(n=cfg.prediction.n, rounds=cfg.prediction.rounds,
                                optimizer=OptimizerSpec(kind="dmo"))
    report = ablate_encoders(episodes, pool, models, pred_cfg, cfg.eval.seed,
                             metadata=meta)
    task = episodes[0].scene.task_id.value
    report.write(args.out, f"ablate_{task}_s{cfg.eval.seed}")
    cfg.echo(args.out, "ablate")
    for row in report.rows:
        print(f"{row.label}: success={row.success_rate:.3f}")
    return EXIT_OK


def cmd_cost(args) -> int:
    paths = [(_require(p, "checkpoint")) for p in args.checkpoints]
    meta = {"checkpoint_hashes": {str(p): checkpoint_hash(p) for p in paths}}
    report = cost_report(paths, metadata=meta)
    report.write(args.out)
    RunConfig().echo(args.out, "cost")
    for row in report.rows:
        print(f"{row.label}: params={row.params} shared_macs={row.shared_macs} "
              f"per_candidate_macs={row.per_candidate_macs}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ebmdmo",
        description="Image-conditioned motion prediction benchmark tool",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, out=True):
        p.add_argument("--config", help="run-config JSON file")
        if data:
            p.add_argument("--data", help="dataset directory")
        if out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="generate a synthetic task dataset")
    common(p, data=False)
    p.add_argument("--task", choices=[t.value for t in TaskId])
    p.add_argument("--train", type=int)
    p.add_argument("--test", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--horizon", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-vae", help="train the motion VAE")
    common(p)
    for flag, typ in (("--steps", int), ("--lr", float), ("--batch", int),
                      ("--seed", int), ("--beta", float)):
        p.add_argument(flag, type=typ)
    p.add_argument("--latent-dim", dest="latent_dim", type=int)
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("train-ebm", help="train the energy model")
    common(p)
    p.add_argument("--vae", help="vae checkpoint path")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--k-data", dest="k_data", type=int)
    p.add_argument("--k-vae", dest="k_vae", type=int)
    p.add_argument("--include-self-vae-negative", action="store_true", default=False)
    p.add_argument("--loss-mode", dest="loss_mode",
                   choices=("softmax_contrastive", "raw_contrastive"))
    for flag, typ in (("--steps", int), ("--lr", float), ("--batch", int),
                      ("--seed", int)):
        p.add_argument(flag, type=typ)
    p.set_defaults(func=cmd_train_ebm)

    p = sub.add_parser("train-dmo", help="train the motion refiner")
    common(p)
    p.add_argument("--vae", help="vae checkpoint path")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--r-train", dest="r_train", type=int)
    p.add_argument("--pose-dropout", dest="pose_dropout", type=float)
    p.add_argument("--direct", action="store_true", default=False,
                   help="predict absolute poses instead of residuals")
    for flag, typ in (("--steps", int), ("--lr", float), ("--batch", int),
                      ("--seed", int)):
        p.add_argument(flag, type=typ)
    p.set_defaults(func=cmd_train_dmo)

    p = sub.add_parser("predict", help="predict a motion for one test episode")
    common(p)
    p.add_argument("--ebm", help="ebm checkpoint path")
    p.add_argument("--dmo", help="dmo checkpoint path")
    p.add_argument("--vae", help="vae checkpoint path (latent_langevin)")
    p.add_argument("--episode", type=int, required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--R", dest="rounds", type=int)
    p.add_argument("--optimizer", choices=OPTIMIZER_KINDS)
    p.add_argument("--step-size", dest="step_size", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--noise-scale", dest="noise_scale", type=float)
    p.add_argument("--prior-weight", dest="prior_weight", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--render", action="store_true", default=False)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="success rate over the test split")
    common(p)
    p.add_argument("--ebm")
    p.add_argument("--dmo")
    p.add_argument("--vae")
    p.add_argument("--n", type=int)
    p.add_argument("--R", dest="rounds", type=int)
    p.add_argument("--optimizer", choices=OPTIMIZER_KINDS)
    p.add_argument("--step-size", dest="step_size", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--noise-scale", dest="noise_scale", type=float)
    p.add_argument("--prior-weight", dest="prior_weight", type=float)
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--label")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="candidate-count / round sweeps")
    common(p)
    p.add_argument("--ebm")
    p.add_argument("--dmo")
    p.add_argument("--n", required=True, help="comma-separated candidate counts")
    p.add_argument("--R", required=True, help="comma-separated round counts")
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="encoder-variant ablation")
    common(p)
    p.add_argument("--models", type=Path,
                   help="directory with {variant}/ebm.ckpt and {variant}/dmo.ckpt")
    p.add_argument("--variants", required=True, help="comma-separated variant names")
    p.add_argument("--n", type=int)
    p.add_argument("--R", dest="rounds", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("cost", help="parameter and MAC accounting")
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cost)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
    threads = os.environ.get("EBMDMO_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except NonFiniteLoss as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (IoError, EmptyDataset, FileNotFoundError) as exc:
        print(f"missing or invalid input: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except (ConfigError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EbmDmoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT


if __name__ == "__main__":
    sys.exit(main())
