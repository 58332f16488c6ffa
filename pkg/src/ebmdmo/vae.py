"""Sequence VAE over trajectories.

Supplies realistic motion perturbations: encode a motion to a Gaussian
posterior over a low-dimensional latent, sample with reparameterization,
decode back to a full-length trajectory. Perturbed motions serve as
close negatives for energy-model training and as corrupted inputs for
refiner training.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import NonFiniteLoss, ShapeMismatch
from .motion import POSE_DIM, Trajectory
from .encoder import SelfAttentionBlock

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LatentDist:
    """Diagonal Gaussian posterior."""

    mu: np.ndarray     # (d,)
    sigma: np.ndarray  # (d,), strictly positive

    def __post_init__(self):
        assert self.mu.shape == self.sigma.shape
        assert np.all(self.sigma > 0)


@dataclass
class VaeTrainConfig:
    latent_dim: int = 16
    beta: float = 1e-6
    d_model: int = 96
    layers: int = 2
    heads: int = 4
    ffn: int = 192
    lr: float = 1e-3
    steps: int = 9000
    batch: int = 32
    seed: int = 0
    log_every: int = 100

    def to_dict(self) -> dict:
        return asdict(self)


class MotionVae(nn.Module):
    """Transformer encoder with a learned aggregation token; query-token decoder."""

    def __init__(self, horizon: int, cfg: VaeTrainConfig):
        super().__init__()
        self.horizon = horizon
        self.latent_dim = cfg.latent_dim
        self.beta = cfg.beta
        self.cfg = cfg
        d = cfg.d_model
        self.embed = nn.Linear(POSE_DIM, d)
        self.agg_token = nn.Parameter(torch.randn(1, 1, d) * 0.02)
        self.enc_blocks = nn.ModuleList(
            SelfAttentionBlock(d, cfg.heads, cfg.ffn) for _ in range(cfg.layers)
        )
        self.mu_head = nn.Linear(d, cfg.latent_dim)
        self.logvar_head = nn.Linear(d, cfg.latent_dim)
        self.dec_in = nn.Linear(cfg.latent_dim, d)
        self.queries = nn.Parameter(torch.randn(1, horizon + 1, d) * 0.02)
        self.dec_blocks = nn.ModuleList(
            SelfAttentionBlock(d, cfg.heads, cfg.ffn) for _ in range(cfg.layers)
        )
        self.out = nn.Linear(d, POSE_DIM - 1)  # x, r, s; timestamp is rewritten
        t_grid = torch.arange(horizon + 1, dtype=torch.float32) / horizon
        self.register_buffer("t_grid", t_grid, persistent=False)

    # ---- torch-level ----

    def encode_t(self, motions: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, T+1, 11) -> (mu, sigma), each (B, d). Sigma via exp(half-logvar)."""
        if motions.shape[-2:] != (self.horizon + 1, POSE_DIM):
            raise ShapeMismatch(
                f"expected (B,{self.horizon + 1},{POSE_DIM}), got {tuple(motions.shape)}"
            )
        h = self.embed(motions)
        agg = self.agg_token.to(h.dtype).expand(h.shape[0], 1, -1)
        h = torch.cat([agg, h], dim=1)
        for block in self.enc_blocks:
            h = block(h)
        pooled = h[:, 0]
        mu = self.mu_head(pooled)
        sigma = torch.exp(0.5 * self.logvar_head(pooled))
        return mu, sigma

    def decode_t(self, z: torch.Tensor) -> torch.Tensor:
        """(B, d) -> (B, T+1, 11); gripper squashed to [0,1], timestamps k/T."""
        b = z.shape[0]
        h = self.queries.to(z.dtype).expand(b, -1, -1) + self.dec_in(z).unsqueeze(1)
        for block in self.dec_blocks:
            h = block(h)
        raw = self.out(h)
        s = torch.sigmoid(raw[..., 9:10])
        t = self.t_grid.to(z.dtype).reshape(1, -1, 1).expand(b, -1, 1)
        return torch.cat([raw[..., :9], s, t], dim=-1)

    # ---- numpy-facing ----

    def encode(self, traj: Trajectory) -> LatentDist:
        with torch.no_grad():
            motions = torch.from_numpy(traj.values.copy()).unsqueeze(0)
            mu, sigma = self.encode_t(motions)
        return LatentDist(mu=mu[0].numpy().copy(), sigma=sigma[0].numpy().copy())

    def decode(self, z: np.ndarray) -> Trajectory:
        with torch.no_grad():
            zt = torch.from_numpy(np.asarray(z, dtype=np.float32)).unsqueeze(0)
            out = self.decode_t(zt)[0].numpy()
        return Trajectory(out)

    def perturb(self, traj: Trajectory, rng: np.random.Generator) -> Trajectory:
        dist = self.encode(traj)
        return self.decode(sample(dist, rng))

    def perturb_batch(
        self, motions: torch.Tensor, gen: torch.Generator
    ) -> torch.Tensor:
        """Vectorized encode/sample/decode for training loops."""
        with torch.no_grad():
            mu, sigma = self.encode_t(motions)
            eps = torch.randn(mu.shape, generator=gen, dtype=mu.dtype)
            return self.decode_t(mu + sigma * eps)

    # ---- persistence ----

    def save(self, path) -> None:
        hparams = {"horizon": self.horizon, "config": self.cfg.to_dict()}
        params = {k: v.detach().numpy() for k, v in self.state_dict().items()}
        save_checkpoint(path, "vae", hparams, params)

    @staticmethod
    def load(path) -> "MotionVae":
        kind, hparams, params = load_checkpoint(path)
        if kind != "vae":
            raise ShapeMismatch(f"checkpoint kind {kind!r} is not a VAE")
        model = MotionVae(hparams["horizon"], VaeTrainConfig(**hparams["config"]))
        model.load_state_dict(
            {k: torch.from_numpy(v.copy()) for k, v in params.items()}
        )
        model.eval()
        return model


def sample(dist: LatentDist, rng: np.random.Generator) -> np.ndarray:
    """Reparameterized draw z = mu + sigma * eps."""
    eps = rng.standard_normal(dist.mu.shape[0]).astype(np.float32)
    return dist.mu + dist.sigma * eps


def kl_to_standard_normal(mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, diag sigma^2) || N(0, I)) per sample, summed over dims."""
    var = sigma.square()
    return 0.5 * (mu.square() + var - 1.0 - torch.log(var)).sum(dim=-1)


def elbo_loss(
    model: MotionVae, motions: torch.Tensor, eps: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Reconstruction MSE + beta * KL with an externally fixed noise draw.

    Keeping eps explicit makes the loss a pure function of the parameters,
    which the finite-difference gradient check relies on.
    """
    mu, sigma = model.encode_t(motions)
    z = mu + sigma * eps
    recon = model.decode_t(z)
    rec_err = (recon - motions).square().mean(dim=(-2, -1))
    kl = kl_to_standard_normal(mu, sigma)
    loss = rec_err.mean() + model.beta * kl.mean()
    return loss, rec_err.mean(), kl.mean()


def train_vae(
    motions: list[Trajectory], config: VaeTrainConfig
) -> tuple[MotionVae, list[dict]]:
    """Fit the VAE on a motion set; returns the model and the training log."""
    if len(motions) < 2:
        raise ValueError("need at least two training motions")
    horizon = motions[0].horizon
    torch.manual_seed(config.seed)
    model = MotionVae(horizon, config)
    data = torch.from_numpy(np.stack([m.values for m in motions]))
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=config.steps, eta_min=config.lr * 0.02
    )
    gen = torch.Generator().manual_seed(config.seed + 1)
    rng = np.random.default_rng(config.seed + 2)
    log: list[dict] = []
    for step in range(config.steps):
        idx = rng.choice(len(motions), size=min(config.batch, len(motions)), replace=False)
        batch = data[np.sort(idx)]
        eps = torch.randn(
            (batch.shape[0], config.latent_dim), generator=gen, dtype=batch.dtype
        )
        loss, rec, kl = elbo_loss(model, batch, eps)
        if not torch.isfinite(loss):
            raise NonFiniteLoss(f"vae loss became {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % config.log_every == 0 or step == config.steps - 1:
            row = {
                "step": step,
                "loss": float(loss.item()),
                "recon_mse": float(rec.item()),
                "kl": float(kl.item()),
            }
            log.append(row)
            logger.info(
                "vae step %d loss %.6f recon %.6f kl %.3f",
                step, row["loss"], row["recon_mse"], row["kl"],
            )
    model.eval()
    return model, log
