"""Experiment harness: success-rate evaluation, encoder ablations,
candidate/round sweeps, and parameter/cost accounting with feature-map reuse.

Success rates are exact fractions over the evaluated episodes; every row
records the seed it was produced from so reruns reproduce the metrics
bit-identically (wall time is measurement, not metric).
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .ebm import EnergyModel
from .encoder import EncoderConfig, candidate_side_macs, image_side_macs
from .motion import Trajectory
from .pipeline import PredictionConfig, predict
from .refiner import MotionRefiner
from .scenes import Episode, check_success, derive_seed
from .vae import MotionVae

import numpy as np


@dataclass(frozen=True)
class EvalRow:
    label: str
    task: str
    success_rate: float
    episodes: int
    mean_final_energy: float
    wall_time_s: float


@dataclass
class EvalReport:
    rows: list[EvalRow]
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"rows": [asdict(r) for r in self.rows], "metadata": self.metadata},
            indent=2,
            sort_keys=True,
        )

    def write(self, out_dir: str | Path, name: str) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.json").write_text(self.to_json())
        with open(out / f"{name}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["label", "task", "success_rate", "episodes",
                 "mean_final_energy", "wall_time_s"]
            )
            for r in self.rows:
                writer.writerow(
                    [r.label, r.task, r.success_rate, r.episodes,
                     r.mean_final_energy, r.wall_time_s]
                )

    def metrics_only(self) -> list[tuple]:
        """Row tuples without wall time, for bit-identical rerun comparison."""
        return [
            (r.label, r.task, r.success_rate, r.episodes, r.mean_final_energy)
            for r in self.rows
        ]


def evaluate(
    episodes: list[Episode],
    pool: list[Trajectory],
    ebm_model: EnergyModel,
    config: PredictionConfig,
    label: str,
    seed: int,
    refiner: MotionRefiner | None = None,
    vae: MotionVae | None = None,
    predictor=None,
    metadata: dict | None = None,
) -> EvalReport:
    """Run the pipeline over episodes and score with the success oracle.

    `predictor`, when given, replaces the pipeline with a callable
    episode -> Trajectory (used for oracle-injection and degenerate
    baselines); the energy column is then reported as nan.
    """
    episode_log: list[dict] = []
    energies: list[float] = []
    t0 = time.perf_counter()
    for idx, ep in enumerate(episodes):
        entry: dict = {"index": idx}
        if predictor is not None:
            best = predictor(ep)
        else:
            rng = np.random.default_rng(derive_seed(seed, f"eval:{label}", idx))
            result = predict(
                ebm_model, ep.image, pool, config, ep.camera, rng,
                refiner=refiner, vae=vae,
            )
            best = result.best
            energies.append(result.best_energy)
            entry["final_energy"] = result.best_energy
        outcome = check_success(ep.scene, best)
        entry["success"] = outcome.success
        entry["failure_reason"] = outcome.failure_reason.value
        episode_log.append(entry)
    wall = time.perf_counter() - t0
    successes = sum(e["success"] for e in episode_log)
    task = episodes[0].scene.task_id.value if episodes else "?"
    row = EvalRow(
        label=label,
        task=task,
        success_rate=successes / len(episodes),
        episodes=len(episodes),
        mean_final_energy=float(np.mean(energies)) if energies else float("nan"),
        wall_time_s=wall,
    )
    meta = {"seed": seed, "episode_log": {label: episode_log}, **(metadata or {})}
    return EvalReport(rows=[row], metadata=meta)


def ablate_encoders(
    episodes: list[Episode],
    pool: list[Trajectory],
    models: dict[str, tuple[EnergyModel, MotionRefiner | None]],
    config: PredictionConfig,
    seed: int,
    metadata: dict | None = None,
) -> EvalReport:
    """One evaluation row per encoder variant under the same budget/config."""
    rows: list[EvalRow] = []
    logs: dict = {}
    for variant, (ebm_model, refiner) in models.items():
        rep = evaluate(
            episodes, pool, ebm_model, config,
            label=f"variant={variant}", seed=seed, refiner=refiner,
        )
        rows.extend(rep.rows)
        logs.update(rep.metadata["episode_log"])
    return EvalReport(
        rows=rows,
        metadata={"seed": seed, "episode_log": logs, **(metadata or {})},
    )


def sweep(
    episodes: list[Episode],
    pool: list[Trajectory],
    ebm_model: EnergyModel,
    refiner: MotionRefiner,
    n_values: list[int],
    r_values: list[int],
    seed: int,
    optimizer=None,
    metadata: dict | None = None,
) -> EvalReport:
    """Full (n, R) grid, one row per pair."""
    from .optimizers import OptimizerSpec

    rows: list[EvalRow] = []
    logs: dict = {}
    for n in n_values:
        for r in r_values:
            config = PredictionConfig(
                n=n, rounds=r, optimizer=optimizer or OptimizerSpec(kind="dmo")
            )
            rep = evaluate(
                episodes, pool, ebm_model, config,
                label=f"n={n},R={r}", seed=seed, refiner=refiner,
            )
            rows.extend(rep.rows)
            logs.update(rep.metadata["episode_log"])
    return EvalReport(
        rows=rows,
        metadata={"seed": seed, "episode_log": logs, **(metadata or {})},
    )


# ---------------------------------------------------------------------------
# parameter / cost accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostRow:
    label: str
    params: int
    shared_macs: int          # once per image ("Reuse" excludes this per candidate)
    per_candidate_macs: int   # repeated for every candidate motion

    def total_macs(self, candidates: int) -> int:
        return self.shared_macs + self.per_candidate_macs * candidates


@dataclass
class CostReport:
    rows: list[CostRow]
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"rows": [asdict(r) for r in self.rows], "metadata": self.metadata},
            indent=2,
            sort_keys=True,
        )

    def write(self, out_dir: str | Path, name: str = "cost_report") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.json").write_text(self.to_json())
        with open(out / f"{name}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["label", "params", "shared_macs", "per_candidate_macs"])
            for r in self.rows:
                writer.writerow([r.label, r.params, r.shared_macs, r.per_candidate_macs])


def model_cost(label: str, kind: str, encoder_cfg: EncoderConfig, params: int) -> CostRow:
    """Analytic MAC split for one checkpointed model.

    The energy head pools tokens to one vector (head_out=1); the refiner head
    runs at every timestep (head_out=10).
    """
    head_out = 1 if kind == "ebm" else 10
    return CostRow(
        label=label,
        params=params,
        shared_macs=image_side_macs(encoder_cfg),
        per_candidate_macs=candidate_side_macs(encoder_cfg, head_out),
    )


def cost_report(checkpoints: list[str | Path], metadata: dict | None = None) -> CostReport:
    """Cost rows for a set of checkpoints (ebm or dmo kinds)."""
    from .checkpoint import load_checkpoint, param_count

    rows = []
    for path in checkpoints:
        kind, hparams, params = load_checkpoint(path)
        if kind not in ("ebm", "dmo"):
            raise ValueError(f"cost accounting expects ebm/dmo checkpoints, got {kind!r}")
        cfg = EncoderConfig.from_dict(hparams["encoder"])
        label = f"{Path(path).stem}[{cfg.variant}]"
        rows.append(model_cost(label, kind, cfg, param_count(params)))
    return CostReport(rows=rows, metadata=metadata or {})
