"""Learned motion refiner: per-timestep pose updates over the shared encoder.

Trained self-supervised: corrupt an expert motion through the VAE, unroll
several refinement applications, and penalize the distance of every
intermediate motion to the expert. At inference one or a few applications
snap a retrieved candidate onto the scene shown in the image.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import (
    EncoderConfig,
    MotionImageEncoder,
    eval_mode,
    image_to_tensor,
    motions_to_tensor,
)
from .errors import NonFiniteLoss, ShapeMismatch
from .motion import Camera, Trajectory
from .vae import MotionVae

logger = logging.getLogger(__name__)


@dataclass
class DmoTrainConfig:
    r_train: int = 5          # unrolled applications during training is r_train + 1
    detach_between_steps: bool = True
    pose_dropout: float = 0.0  # train-time pose-token masking (regularizer)
    lr: float = 3e-4
    steps: int = 2500
    batch: int = 16
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.r_train < 1:
            raise ValueError("r_train must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class MotionRefiner(nn.Module):
    """Encoder plus a per-timestep head emitting a 10-channel pose update.

    The head is applied identically and independently at every timestep;
    the timestamp channel is never predicted. In residual mode (default)
    the head output is added to the input pose, so a zeroed head is the
    exact identity.
    """

    def __init__(self, cfg: EncoderConfig, residual: bool = True, r_train: int = 5):
        super().__init__()
        self.cfg = cfg
        self.residual = residual
        self.r_train = r_train
        self.encoder = MotionImageEncoder(cfg)
        d = cfg.d_model
        self.head = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, 10))
        nn.init.zeros_(self.head[-1].weight)
        nn.init.zeros_(self.head[-1].bias)

    @property
    def feature_calls(self) -> int:
        return self.encoder.feature_calls

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder.features(images)

    def refined_from_features(
        self, feat: torch.Tensor, motions: torch.Tensor, cam: Camera
    ) -> torch.Tensor:
        """(B, C, H, W) x (B, M, T+1, 11) -> refined motions, same shape.

        Gripper is clamped to [0,1]; timestamps are copied from the input.
        """
        v = self.encoder.pose_token_features(feat, motions, cam)
        delta = self.head(v)
        out10 = motions[..., :10] + delta if self.residual else delta
        out10 = torch.cat(
            [out10[..., :9], out10[..., 9:10].clamp(0.0, 1.0)], dim=-1
        )
        return torch.cat([out10, motions[..., 10:11]], dim=-1)

    # ---- numpy-facing ----

    def refine(self, image: np.ndarray, traj: Trajectory, cam: Camera) -> Trajectory:
        with torch.no_grad(), eval_mode(self):
            feat = self.features(image_to_tensor(image))
            motions = motions_to_tensor([traj]).unsqueeze(0)
            out = self.refined_from_features(feat, motions, cam)
        return Trajectory(out[0, 0].numpy())

    def refine_recurrent(
        self, image: np.ndarray, traj: Trajectory, rounds: int, cam: Camera
    ) -> list[Trajectory]:
        """Repeated refinement; the feature map is computed once and reused."""
        if rounds < 1:
            raise ValueError("rounds must be >= 1")
        outputs: list[Trajectory] = []
        with torch.no_grad(), eval_mode(self):
            feat = self.features(image_to_tensor(image))
            current = motions_to_tensor([traj]).unsqueeze(0)
            for _ in range(rounds):
                current = self.refined_from_features(feat, current, cam)
                outputs.append(Trajectory(current[0, 0].numpy()))
        return outputs

    # ---- persistence ----

    def save(self, path) -> None:
        hparams = {
            "encoder": self.cfg.to_dict(),
            "residual": self.residual,
            "r_train": self.r_train,
        }
        params = {k: v.detach().numpy() for k, v in self.state_dict().items()}
        save_checkpoint(path, "dmo", hparams, params)

    @staticmethod
    def load(path) -> "MotionRefiner":
        kind, hparams, params = load_checkpoint(path)
        if kind != "dmo":
            raise ShapeMismatch(f"checkpoint kind {kind!r} is not a refiner")
        model = MotionRefiner(
            EncoderConfig.from_dict(hparams["encoder"]),
            residual=hparams["residual"],
            r_train=hparams["r_train"],
        )
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in params.items()})
        model.eval()
        return model


def refiner_loss(
    refiner: MotionRefiner,
    feat: torch.Tensor,
    corrupted: torch.Tensor,
    targets: torch.Tensor,
    cam: Camera,
    r_train: int,
    detach_between_steps: bool = True,
) -> torch.Tensor:
    """Mean over r_train+1 unrolled applications of the flattened L2 distance
    to the target motion, averaged over the batch.

    With detach_between_steps each application is supervised by its own term
    and gradients do not flow across refinement iterations.
    """
    current = corrupted.unsqueeze(1)
    goal = targets.unsqueeze(1)
    terms = []
    for _ in range(r_train + 1):
        current = refiner.refined_from_features(feat, current, cam)
        diff = (goal - current).reshape(current.shape[0], -1)
        terms.append(torch.sqrt(diff.square().sum(dim=-1) + 1e-12))
        if detach_between_steps:
            current = current.detach()
    return torch.stack(terms, dim=0).mean()


def train_refiner(
    episodes,
    vae: MotionVae,
    config: DmoTrainConfig,
    encoder_cfg: EncoderConfig,
    residual: bool = True,
) -> tuple[MotionRefiner, list[dict]]:
    """Self-supervised training on VAE-corrupted expert motions."""
    if len(episodes) < 1:
        raise ValueError("need at least one episode")
    cam = episodes[0].camera
    torch.manual_seed(config.seed)
    if config.pose_dropout > 0:
        encoder_cfg = dataclasses.replace(encoder_cfg, pose_dropout=config.pose_dropout)
    model = MotionRefiner(encoder_cfg, residual=residual, r_train=config.r_train)
    images = torch.from_numpy(
        np.stack([ep.image.transpose(2, 0, 1) for ep in episodes])
    )
    motions = torch.from_numpy(np.stack([ep.expert.values for ep in episodes]))
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=config.steps, eta_min=config.lr * 0.02
    )
    rng = np.random.default_rng(config.seed + 1)
    gen = torch.Generator().manual_seed(config.seed + 2)
    log: list[dict] = []
    batch = min(config.batch, len(episodes))
    for step in range(config.steps):
        idx = np.sort(rng.choice(len(episodes), size=batch, replace=False))
        targets = motions[idx]
        corrupted = vae.perturb_batch(targets, gen)
        feat = model.features(images[idx])
        loss = refiner_loss(
            model, feat, corrupted, targets, cam,
            config.r_train, config.detach_between_steps,
        )
        if not torch.isfinite(loss):
            raise NonFiniteLoss(f"refiner loss became {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % config.log_every == 0 or step == config.steps - 1:
            row = {"step": step, "loss": float(loss.item())}
            log.append(row)
            logger.info("dmo step %d loss %.5f", step, row["loss"])
    model.eval()
    return model, log
