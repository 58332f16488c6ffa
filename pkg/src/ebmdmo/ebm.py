"""Energy model over image/motion pairs and its contrastive training.

The scalar energy is an MLP over the mean of the temporal features at the
trajectory tokens; lower energy means higher consistency between the image
and the motion. Training pushes the matched motion below two kinds of
negatives: real motions borrowed from other episodes, and VAE perturbations
of other episodes' motions.
"""

from __future__ import annotations

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
from .errors import NonFinite, NonFiniteLoss, ShapeMismatch
from .motion import Camera, Trajectory
from .vae import MotionVae

logger = logging.getLogger(__name__)

LOSS_MODES = ("softmax_contrastive", "raw_contrastive")


@dataclass
class EbmTrainConfig:
    k_data: int = 4
    k_vae: int = 4
    include_self_vae_negative: bool = False
    # softmax_contrastive: stable softmax cross-entropy over {positive, negatives}.
    # raw_contrastive: unnormalized positive-minus-mean-negative objective with
    # an L2 energy regularizer (reg_weight) to keep it bounded.
    loss_mode: str = "softmax_contrastive"
    reg_weight: float = 1e-3
    lr: float = 2e-4
    steps: int = 2500
    batch: int = 16
    seed: int = 0
    eval_every: int = 250

    def __post_init__(self):
        if self.k_data < 0 or self.k_vae < 0 or self.k_data + self.k_vae < 1:
            raise ValueError("need k_data >= 0, k_vae >= 0 and at least one negative")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class EnergyModel(nn.Module):
    """Encoder plus a mean-pool MLP head producing one scalar per motion."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = MotionImageEncoder(cfg)
        d = cfg.d_model
        self.head = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, 1))

    @property
    def feature_calls(self) -> int:
        return self.encoder.feature_calls

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder.features(images)

    def energies_from_features(
        self, feat: torch.Tensor, motions: torch.Tensor, cam: Camera
    ) -> torch.Tensor:
        """(B, C, H, W) x (B, M, T+1, 11) -> (B, M) energies."""
        v = self.encoder.pose_token_features(feat, motions, cam)
        pooled = v.mean(dim=2)
        return self.head(pooled).squeeze(-1)

    # ---- numpy-facing ----

    def energy(self, image: np.ndarray, traj: Trajectory, cam: Camera) -> float:
        with torch.no_grad(), eval_mode(self):
            feat = self.features(image_to_tensor(image))
            motions = motions_to_tensor([traj]).unsqueeze(0)
            e = self.energies_from_features(feat, motions, cam)
        value = float(e[0, 0].item())
        if not np.isfinite(value):
            raise NonFinite("energy is not finite")
        return value

    def energy_batch(
        self, image: np.ndarray, trajectories: list[Trajectory], cam: Camera
    ) -> list[float]:
        """Energies for many motions against one image; the feature map is
        computed exactly once and shared. Output order equals input order."""
        if not trajectories:
            raise ShapeMismatch("energy_batch needs at least one motion")
        with torch.no_grad(), eval_mode(self):
            feat = self.features(image_to_tensor(image))
            motions = motions_to_tensor(trajectories).unsqueeze(0)
            e = self.energies_from_features(feat, motions, cam)[0]
        return [float(v) for v in e.tolist()]

    # ---- persistence ----

    def save(self, path) -> None:
        hparams = {"encoder": self.cfg.to_dict()}
        params = {k: v.detach().numpy() for k, v in self.state_dict().items()}
        save_checkpoint(path, "ebm", hparams, params)

    @staticmethod
    def load(path) -> "EnergyModel":
        kind, hparams, params = load_checkpoint(path)
        if kind != "ebm":
            raise ShapeMismatch(f"checkpoint kind {kind!r} is not an energy model")
        model = EnergyModel(EncoderConfig.from_dict(hparams["encoder"]))
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in params.items()})
        model.eval()
        return model


def contrastive_loss(
    energies: torch.Tensor, mode: str, reg_weight: float
) -> torch.Tensor:
    """Per-positive loss over (B, 1+K) energies; slot 0 is the matched motion."""
    if mode == "softmax_contrastive":
        logits = -energies
        return torch.nn.functional.cross_entropy(
            logits, torch.zeros(energies.shape[0], dtype=torch.long)
        )
    pos = energies[:, 0]
    neg = energies[:, 1:]
    loss = pos - neg.mean(dim=1)
    reg = pos.square() + neg.square().mean(dim=1)
    return (loss + reg_weight * reg).mean()


def build_training_motions(
    pos_motions: torch.Tensor,
    vae: MotionVae,
    config: EbmTrainConfig,
    rng: np.random.Generator,
    gen: torch.Generator,
) -> torch.Tensor:
    """Assemble (B, 1+k_data+k_vae, T+1, 11) motion sets for one batch.

    Slot 0 holds the positive; data negatives are other in-batch motions;
    VAE negatives are perturbations of (by default) other in-batch motions.
    """
    b = pos_motions.shape[0]
    if config.k_data > 0 and b < 2:
        raise ValueError("batch must hold >= 2 episodes when k_data > 0")
    if config.k_data > b - 1:
        raise ValueError("k_data cannot exceed batch size - 1")
    groups = [pos_motions.unsqueeze(1)]
    if config.k_data > 0:
        picks = np.stack(
            [
                rng.choice(np.delete(np.arange(b), i), size=config.k_data, replace=False)
                for i in range(b)
            ]
        )
        groups.append(pos_motions[torch.from_numpy(picks)])
    if config.k_vae > 0:
        if config.include_self_vae_negative:
            picks = np.stack(
                [rng.choice(b, size=config.k_vae, replace=True) for _ in range(b)]
            )
        else:
            picks = np.stack(
                [
                    rng.choice(
                        np.delete(np.arange(b), i),
                        size=config.k_vae,
                        replace=config.k_vae > b - 1,
                    )
                    for i in range(b)
                ]
            )
        flat = torch.from_numpy(picks.reshape(-1))
        perturbed = vae.perturb_batch(pos_motions[flat], gen)
        groups.append(
            perturbed.reshape(b, config.k_vae, *pos_motions.shape[1:])
        )
    return torch.cat(groups, dim=1)


def ebm_training_step(
    model: EnergyModel,
    opt: torch.optim.Optimizer,
    images: torch.Tensor,
    pos_motions: torch.Tensor,
    vae: MotionVae,
    config: EbmTrainConfig,
    cam: Camera,
    rng: np.random.Generator,
    gen: torch.Generator,
) -> float:
    """One stochastic update; returns the scalar loss."""
    motions = build_training_motions(pos_motions, vae, config, rng, gen)
    feat = model.features(images)
    energies = model.energies_from_features(feat, motions, cam)
    loss = contrastive_loss(energies, config.loss_mode, config.reg_weight)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"ebm loss became {loss.item()}")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.item())


def rank_metric(
    model: EnergyModel,
    episodes,
    pool: list[Trajectory],
    cam: Camera,
    rng: np.random.Generator,
    n_mismatched: int = 100,
    beat_fraction: float = 0.95,
) -> float:
    """Fraction of episodes whose matched motion out-scores >= beat_fraction
    of n_mismatched motions sampled from the pool."""
    wins = 0
    for ep in episodes:
        picks = rng.choice(len(pool), size=min(n_mismatched, len(pool)), replace=False)
        motions = [ep.expert] + [pool[int(j)] for j in picks]
        energies = model.energy_batch(ep.image, motions, cam)
        matched = energies[0]
        beaten = sum(1 for e in energies[1:] if matched < e)
        if beaten >= beat_fraction * (len(energies) - 1):
            wins += 1
    return wins / len(episodes)


def train_ebm(
    episodes,
    vae: MotionVae,
    config: EbmTrainConfig,
    encoder_cfg: EncoderConfig,
    eval_episodes=None,
) -> tuple[EnergyModel, list[dict]]:
    """Contrastive training over (image, motion) episodes.

    Logs loss every eval_every steps along with a quick rank metric on a
    held-out slice when one is provided.
    """
    if len(episodes) < 2:
        raise ValueError("need at least two episodes")
    cam = episodes[0].camera
    torch.manual_seed(config.seed)
    model = EnergyModel(encoder_cfg)
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
        loss = ebm_training_step(
            model, opt, images[idx], motions[idx], vae, config, cam, rng, gen
        )
        sched.step()
        if step % config.eval_every == 0 or step == config.steps - 1:
            row = {"step": step, "loss": loss}
            if eval_episodes:
                model.eval()
                row["rank_metric"] = rank_metric(
                    model,
                    eval_episodes[:12],
                    [Trajectory(m) for m in motions.numpy()],
                    cam,
                    np.random.default_rng(config.seed + 3),
                    n_mismatched=50,
                )
                model.train()
            log.append(row)
            logger.info("ebm step %d loss %.4f %s", step, loss, row.get("rank_metric", ""))
    model.eval()
    return model, log
