"""End-to-end motion prediction.

Score every training motion against the test image, keep the n lowest
energies, refine each candidate with the configured motion optimizer, then
re-score the refined motions and return the one with the lowest energy.
The energy model's feature map is computed exactly once per call and shared
by retrieval, gradient-based refinement, and final re-scoring.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .ebm import EnergyModel
from .encoder import image_to_tensor, motions_to_tensor
from .errors import EmptyDataset
from .motion import Camera, Trajectory
from .optimizers import OptimizerSpec, descend_latent, descend_motion, _torch_generator
from .refiner import MotionRefiner
from .vae import MotionVae


@dataclass(frozen=True)
class PredictionConfig:
    n: int = 8                 # candidates kept after retrieval
    rounds: int = 1            # refinement rounds (R); 0 = retrieval only
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")


@dataclass(frozen=True)
class CandidateOutcome:
    source_id: int
    initial_energy: float
    final_energy: float
    trajectory: Trajectory


@dataclass(frozen=True)
class PredictionResult:
    best: Trajectory
    best_energy: float
    candidates: list[CandidateOutcome]

    def to_json(self) -> str:
        return json.dumps(
            {
                "best_energy": self.best_energy,
                "best": json.loads(self.best.to_json()),
                "candidates": [
                    {
                        "source_id": c.source_id,
                        "initial_energy": c.initial_energy,
                        "final_energy": c.final_energy,
                        "trajectory": json.loads(c.trajectory.to_json()),
                    }
                    for c in self.candidates
                ],
            }
        )


def _top_n(energies: np.ndarray, n: int) -> np.ndarray:
    """Indices of the n lowest energies, ties broken by lower index."""
    order = np.lexsort((np.arange(len(energies)), energies))
    return order[:n]


def retrieve_candidates(
    model: EnergyModel,
    image: np.ndarray,
    motions: list[Trajectory],
    n: int,
    cam: Camera,
) -> list[tuple[int, float]]:
    """The n best-scoring training motions for this image, lowest energy first."""
    if not motions:
        raise EmptyDataset("no motions to retrieve from")
    if n > len(motions):
        raise ValueError(f"n={n} exceeds pool size {len(motions)}")
    energies = np.array(model.energy_batch(image, motions, cam))
    return [(int(i), float(energies[i])) for i in _top_n(energies, n)]


def predict(
    ebm_model: EnergyModel,
    image: np.ndarray,
    motions: list[Trajectory],
    config: PredictionConfig,
    cam: Camera,
    rng: np.random.Generator,
    refiner: MotionRefiner | None = None,
    vae: MotionVae | None = None,
) -> PredictionResult:
    """Retrieve top-n seeds, refine, re-score, return the energy argmin.

    The refiner handles optimizer kind "dmo" (rounds applications); the
    gradient baselines run once with their own configured iteration budget.
    Ties on the final energy resolve to the lowest candidate index.
    """
    if not motions:
        raise EmptyDataset("no motions to retrieve from")
    if config.n > len(motions):
        raise ValueError(f"n={config.n} exceeds pool size {len(motions)}")
    kind = config.optimizer.kind
    if kind == "dmo" and config.rounds > 0 and refiner is None:
        raise ValueError("dmo optimizer requires a refiner")
    if kind == "latent_langevin" and config.rounds > 0 and vae is None:
        raise ValueError("latent_langevin requires a vae")

    image_t = image_to_tensor(image)
    with torch.no_grad():
        feat = ebm_model.features(image_t)
        pool = motions_to_tensor(motions).unsqueeze(0)
        energies = ebm_model.energies_from_features(feat, pool, cam)[0].numpy()
    picked = _top_n(energies, config.n)

    refined: list[Trajectory] = []
    if config.rounds == 0:
        refined = [motions[int(i)] for i in picked]
        final = energies[picked]
    else:
        if kind == "dmo":
            with torch.no_grad():
                rfeat = refiner.features(image_t)
                current = pool[:, picked]
                for _ in range(config.rounds):
                    current = refiner.refined_from_features(rfeat, current, cam)
            refined = [Trajectory(current[0, j].numpy()) for j in range(len(picked))]
        else:
            for j, i in enumerate(picked):
                seed_rng = np.random.default_rng(rng.integers(0, 2**63 - 1))
                gen = _torch_generator(seed_rng)
                if kind == "latent_langevin":
                    out = descend_latent(
                        ebm_model, vae, feat, motions[int(i)],
                        config.optimizer, cam, gen,
                    )
                    refined.append(Trajectory(out.numpy()))
                else:
                    spec = config.optimizer
                    if kind == "gd":
                        spec = OptimizerSpec(
                            kind="gd",
                            step_size=spec.step_size,
                            iterations=spec.iterations,
                            noise_scale=0.0,
                        )
                    motion = motions_to_tensor([motions[int(i)]]).unsqueeze(0)
                    out = descend_motion(
                        ebm_model, feat, motion, spec, cam,
                        gen if spec.noise_scale > 0 else None,
                    )
                    refined.append(Trajectory(out[0, 0].numpy()))
        with torch.no_grad():
            stack = motions_to_tensor(refined).unsqueeze(0)
            final = ebm_model.energies_from_features(feat, stack, cam)[0].numpy()

    best_j = int(np.argmin(final))
    candidates = [
        CandidateOutcome(
            source_id=int(picked[j]),
            initial_energy=float(energies[picked[j]]),
            final_energy=float(final[j]),
            trajectory=refined[j],
        )
        for j in range(len(picked))
    ]
    return PredictionResult(
        best=refined[best_j],
        best_energy=float(final[best_j]),
        candidates=candidates,
    )
