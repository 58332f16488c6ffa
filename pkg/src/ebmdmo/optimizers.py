"""Gradient-based motion optimization baselines.

All baselines iterate on the energy landscape of a trained energy model:
plain gradient descent, Langevin dynamics (gradient plus sqrt(2*step)
Gaussian noise), and Langevin dynamics in the VAE latent space. They share
the motion-optimizer slot with the learned refiner in the prediction
pipeline.

A "model" here is anything exposing `features(images) -> F` and
`energies_from_features(F, motions, cam) -> (B, M)`; tests exercise the
loop with synthetic quadratic energies through the same interface.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .encoder import image_to_tensor, motions_to_tensor
from .motion import Camera, Trajectory
from .vae import MotionVae

logger = logging.getLogger(__name__)

OPTIMIZER_KINDS = ("langevin", "gd", "latent_langevin", "dmo")


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "dmo"
    step_size: float = 0.001
    iterations: int = 100
    noise_scale: float = 1.0     # multiplies the sqrt(2*step) Langevin noise
    prior_weight: float = 1.0    # latent-space standard-normal prior term

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.noise_scale < 0 or self.prior_weight < 0:
            raise ValueError("noise_scale and prior_weight must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "OptimizerSpec":
        return OptimizerSpec(**d)


def _torch_generator(rng: np.random.Generator | None) -> torch.Generator | None:
    if rng is None:
        return None
    gen = torch.Generator()
    gen.manual_seed(int(rng.integers(0, 2**63 - 1)))
    return gen


def descend_motion(
    model,
    feat: torch.Tensor,
    motion: torch.Tensor,
    spec: OptimizerSpec,
    cam: Camera,
    gen: torch.Generator | None,
) -> torch.Tensor:
    """Iterate motion <- motion - step * dE/dmotion (+ optional noise).

    Updates touch only the 10 learnable channels; timestamps stay frozen and
    the gripper channel is clamped each step. On a non-finite energy or
    gradient the last finite iterate is returned with a logged diagnostic.
    """
    current = motion.detach().clone()
    sigma = spec.noise_scale * (2.0 * spec.step_size) ** 0.5
    for it in range(spec.iterations):
        leaf = current.detach().requires_grad_(True)
        energy = model.energies_from_features(feat, leaf, cam).sum()
        if not torch.isfinite(energy):
            logger.warning("non-finite energy at iteration %d; stopping", it)
            return current
        (grad,) = torch.autograd.grad(energy, leaf)
        if not torch.isfinite(grad).all():
            logger.warning("non-finite gradient at iteration %d; stopping", it)
            return current
        with torch.no_grad():
            nxt = leaf.detach().clone()
            nxt[..., :10] -= spec.step_size * grad[..., :10]
            if sigma > 0:
                noise = torch.randn(
                    nxt[..., :10].shape, generator=gen, dtype=nxt.dtype
                )
                nxt[..., :10] += sigma * noise
            nxt[..., 9].clamp_(0.0, 1.0)
        if not torch.isfinite(nxt).all():
            logger.warning("non-finite iterate at iteration %d; stopping", it)
            return current
        current = nxt
    return current


def langevin_optimize(
    model,
    image: np.ndarray,
    traj: Trajectory,
    spec: OptimizerSpec,
    cam: Camera,
    rng: np.random.Generator,
) -> Trajectory:
    """Noisy gradient descent on the energy of (image, motion)."""
    if spec.kind != "langevin":
        raise ValueError(f"spec.kind must be 'langevin', got {spec.kind!r}")
    with torch.no_grad():
        feat = model.features(image_to_tensor(image))
    gen = _torch_generator(rng) if spec.noise_scale > 0 else None
    motion = motions_to_tensor([traj]).unsqueeze(0)
    out = descend_motion(model, feat, motion, spec, cam, gen)
    return Trajectory(out[0, 0].numpy())


def gd_optimize(
    model,
    image: np.ndarray,
    traj: Trajectory,
    spec: OptimizerSpec,
    cam: Camera,
) -> Trajectory:
    """Deterministic gradient descent; equals Langevin with zero noise."""
    if spec.kind != "gd":
        raise ValueError(f"spec.kind must be 'gd', got {spec.kind!r}")
    with torch.no_grad():
        feat = model.features(image_to_tensor(image))
    quiet = OptimizerSpec(
        kind="gd",
        step_size=spec.step_size,
        iterations=spec.iterations,
        noise_scale=0.0,
    )
    motion = motions_to_tensor([traj]).unsqueeze(0)
    out = descend_motion(model, feat, motion, quiet, cam, None)
    return Trajectory(out[0, 0].numpy())


def descend_latent(
    model,
    vae: MotionVae,
    feat: torch.Tensor,
    traj: Trajectory,
    spec: OptimizerSpec,
    cam: Camera,
    gen: torch.Generator | None,
) -> torch.Tensor:
    """Langevin iteration on the VAE latent code; returns the decoded motion."""
    with torch.no_grad():
        mu, _ = vae.encode_t(motions_to_tensor([traj]))
    z = mu.detach().clone()
    sigma = spec.noise_scale * (2.0 * spec.step_size) ** 0.5
    for it in range(spec.iterations):
        leaf = z.detach().requires_grad_(True)
        decoded = vae.decode_t(leaf).unsqueeze(0)
        energy = model.energies_from_features(feat, decoded, cam).sum()
        energy = energy + spec.prior_weight * 0.5 * leaf.square().sum()
        if not torch.isfinite(energy):
            logger.warning("non-finite latent energy at iteration %d; stopping", it)
            break
        (grad,) = torch.autograd.grad(energy, leaf)
        if not torch.isfinite(grad).all():
            logger.warning("non-finite latent gradient at iteration %d; stopping", it)
            break
        with torch.no_grad():
            nxt = leaf.detach() - spec.step_size * grad
            if sigma > 0:
                nxt = nxt + sigma * torch.randn(
                    nxt.shape, generator=gen, dtype=nxt.dtype
                )
        if not torch.isfinite(nxt).all():
            logger.warning("non-finite latent iterate at iteration %d; stopping", it)
            break
        z = nxt
    with torch.no_grad():
        return vae.decode_t(z)[0]


def latent_langevin_optimize(
    model,
    vae: MotionVae,
    image: np.ndarray,
    traj: Trajectory,
    spec: OptimizerSpec,
    cam: Camera,
    rng: np.random.Generator,
) -> Trajectory:
    """Langevin dynamics in the VAE embedding, decoding for each evaluation."""
    if spec.kind != "latent_langevin":
        raise ValueError(f"spec.kind must be 'latent_langevin', got {spec.kind!r}")
    with torch.no_grad():
        feat = model.features(image_to_tensor(image))
    gen = _torch_generator(rng) if spec.noise_scale > 0 else None
    out = descend_latent(model, vae, feat, traj, spec, cam, gen)
    return Trajectory(out.numpy())
