"""Shared feature extractor for the energy model and the motion refiner.

A UNet produces a full-resolution feature map from the RGB-D image; an MLP
embeds each pose; per-timestep image features are read from the map by
bilinear interpolation at the projected trajectory points; the fused tokens
run through a small transformer encoder. Four fusion variants are supported
for the architecture ablation:

  trajectory_aligned  concat(f_t, g_t) per timestep (the default)
  no_concat           f_t tokens followed by g_t tokens, no concatenation
  gap                 one global-average-pooled image token plus g_t tokens
  vit_patch           positionally-encoded patch tokens plus g_t tokens

The transformer is written out explicitly (no fused fastpaths) so forward
passes are bit-deterministic and the analytic cost model below matches the
code exactly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import NonFinite, ShapeMismatch
from .motion import Camera, POSE_DIM

VARIANTS = ("trajectory_aligned", "no_concat", "gap", "vit_patch")


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    in_channels: int = 4
    base_channels: int = 16
    feat_channels: int = 32     # C, feature-map depth
    pose_hidden: int = 64
    pose_feat: int = 32         # D_g
    d_model: int = 64           # D, transformer width
    layers: int = 2
    heads: int = 4
    ffn: int = 128
    variant: str = "trajectory_aligned"
    patch: int = 8              # vit_patch patch edge
    horizon: int = 15           # T
    max_depth: float = 0.8      # depth-channel normalizer
    # Training-time pose-token masking probability. Zeroing g_t occasionally
    # keeps the image pathway load-bearing instead of letting the trajectory
    # tokens memorize the training motions. Inactive in eval mode.
    pose_dropout: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "trajectory_aligned":
            if self.feat_channels + self.pose_feat != self.d_model:
                raise ValueError(
                    "trajectory_aligned requires feat_channels + pose_feat == d_model"
                )
        if self.image_size % self.patch != 0:
            raise ValueError("patch must divide image_size")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    def token_count(self) -> int:
        t1 = self.horizon + 1
        return {
            "trajectory_aligned": t1,
            "no_concat": 2 * t1,
            "gap": t1 + 1,
            "vit_patch": t1 + self.n_patches,
        }[self.variant]

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "EncoderConfig":
        return EncoderConfig(**d)


def project_points(xyz: torch.Tensor, cam: Camera) -> torch.Tensor:
    """Differentiable pinhole projection, (..., 3) -> (..., 2) pixel coords.

    Depth is clamped away from zero so refinement iterates that wander
    stay finite; out-of-image coordinates are handled by clamped sampling.
    """
    z = xyz[..., 2].clamp(min=0.05)
    u = cam.fx * xyz[..., 0] / z + cam.cx
    v = cam.fy * xyz[..., 1] / z + cam.cy
    return torch.stack([u, v], dim=-1)


def sample_bilinear(feat: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Bilinear read of a feature map at continuous pixel coordinates.

    feat: (B, C, H, W); uv: (B, N, 2) with x in [0, W-1], y in [0, H-1]
    (clamped to the border outside). Returns (B, N, C). Exact at grid
    points; differentiable w.r.t. feat everywhere and w.r.t. uv in the
    interior.
    """
    b, c, h, w = feat.shape
    x = uv[..., 0].clamp(0.0, w - 1.0)
    y = uv[..., 1].clamp(0.0, h - 1.0)
    x0 = x.floor().clamp(0, w - 2)
    y0 = y.floor().clamp(0, h - 2)
    wx = (x - x0).unsqueeze(-1)
    wy = (y - y0).unsqueeze(-1)
    x0l = x0.long()
    y0l = y0.long()
    bidx = torch.arange(b, device=feat.device).unsqueeze(1).expand_as(x0l)
    f00 = feat[bidx, :, y0l, x0l]
    f01 = feat[bidx, :, y0l, x0l + 1]
    f10 = feat[bidx, :, y0l + 1, x0l]
    f11 = feat[bidx, :, y0l + 1, x0l + 1]
    top = f00 * (1 - wx) + f01 * wx
    bot = f10 * (1 - wx) + f11 * wx
    return top * (1 - wy) + bot * wy


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(4, channels)


class UNet(nn.Module):
    """3-down/3-up UNet keeping the output at input resolution."""

    def __init__(self, cin: int, base: int, cout: int):
        super().__init__()
        b = base
        self.enc0 = nn.Sequential(nn.Conv2d(cin, b, 3, padding=1), _gn(b), nn.SiLU())
        self.down1 = nn.Sequential(
            nn.Conv2d(b, 2 * b, 3, stride=2, padding=1), _gn(2 * b), nn.SiLU()
        )
        self.down2 = nn.Sequential(
            nn.Conv2d(2 * b, 4 * b, 3, stride=2, padding=1), _gn(4 * b), nn.SiLU()
        )
        self.down3 = nn.Sequential(
            nn.Conv2d(4 * b, 4 * b, 3, stride=2, padding=1), _gn(4 * b), nn.SiLU()
        )
        self.mid = nn.Sequential(
            nn.Conv2d(4 * b, 4 * b, 3, padding=1), _gn(4 * b), nn.SiLU()
        )
        self.up3 = nn.Sequential(
            nn.Conv2d(8 * b, 4 * b, 3, padding=1), _gn(4 * b), nn.SiLU()
        )
        self.up2 = nn.Sequential(
            nn.Conv2d(6 * b, 2 * b, 3, padding=1), _gn(2 * b), nn.SiLU()
        )
        self.up1 = nn.Sequential(
            nn.Conv2d(3 * b, 2 * b, 3, padding=1), _gn(2 * b), nn.SiLU()
        )
        self.out = nn.Conv2d(2 * b, cout, 1)
        self.upsample = nn.Upsample(scale_factor=2, mode="nearest")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s0 = self.enc0(x)
        s1 = self.down1(s0)
        s2 = self.down2(s1)
        h = self.mid(self.down3(s2))
        h = self.up3(torch.cat([self.upsample(h), s2], dim=1))
        h = self.up2(torch.cat([self.upsample(h), s1], dim=1))
        h = self.up1(torch.cat([self.upsample(h), s0], dim=1))
        return self.out(h)


class SelfAttentionBlock(nn.Module):
    """Pre-norm multi-head self-attention + feedforward."""

    def __init__(self, d: int, heads: int, ffn: int):
        super().__init__()
        if d % heads != 0:
            raise ValueError("d_model must be divisible by heads")
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, ffn), nn.SiLU(), nn.Linear(ffn, d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, length, d = x.shape
        dh = d // self.heads
        qkv = self.qkv(self.norm1(x)).reshape(b, length, 3, self.heads, dh)
        q, k, v = qkv.unbind(dim=2)  # (B, L, heads, dh)
        q = q.transpose(1, 2)
        k = k.transpose(1, 2)
        v = v.transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)
        mixed = (attn @ v).transpose(1, 2).reshape(b, length, d)
        x = x + self.proj(mixed)
        return x + self.ff(self.norm2(x))


def sincos_positions(length: int, dim: int) -> torch.Tensor:
    """Classic sinusoidal position table, (length, dim)."""
    pos = torch.arange(length, dtype=torch.float32).unsqueeze(1)
    idx = torch.arange(0, dim, 2, dtype=torch.float32)
    div = torch.exp(-math.log(10000.0) * idx / dim)
    table = torch.zeros(length, dim)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div)
    return table


class MotionImageEncoder(nn.Module):
    """Full feature pipeline: image -> F, poses -> g_t, fuse, temporal encode.

    `feature_calls` counts UNet invocations so callers can assert the
    feature map is shared across candidate motions.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.feature_calls = 0
        self.unet = UNet(cfg.in_channels, cfg.base_channels, cfg.feat_channels)
        self.pose_mlp = nn.Sequential(
            nn.Linear(POSE_DIM, cfg.pose_hidden),
            nn.SiLU(),
            nn.Linear(cfg.pose_hidden, cfg.pose_feat),
        )
        if cfg.variant != "trajectory_aligned":
            self.pose_proj = nn.Linear(cfg.pose_feat, cfg.d_model)
        if cfg.variant in ("no_concat", "gap"):
            self.img_proj = nn.Linear(cfg.feat_channels, cfg.d_model)
        if cfg.variant == "vit_patch":
            self.patch_proj = nn.Linear(
                cfg.feat_channels * cfg.patch * cfg.patch, cfg.d_model
            )
            self.register_buffer(
                "patch_pe",
                sincos_positions(cfg.n_patches, cfg.d_model),
                persistent=False,
            )
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(cfg.d_model, cfg.heads, cfg.ffn)
            for _ in range(cfg.layers)
        )

    # ---- image side ----

    def features(self, images: torch.Tensor) -> torch.Tensor:
        """UNet feature map, same spatial size as the image. (B,4,H,W)->(B,C,H,W)."""
        hw = self.cfg.image_size
        if images.ndim != 4 or images.shape[1:] != (self.cfg.in_channels, hw, hw):
            raise ShapeMismatch(f"expected (B,{self.cfg.in_channels},{hw},{hw}), got {tuple(images.shape)}")
        self.feature_calls += 1
        scaled = torch.cat(
            [images[:, :3], images[:, 3:] / self.cfg.max_depth], dim=1
        )
        return self.unet(scaled)

    # ---- trajectory side ----

    def pose_feats(self, poses: torch.Tensor) -> torch.Tensor:
        """Per-timestep pose embedding; independent across timesteps."""
        if poses.shape[-1] != POSE_DIM:
            raise ShapeMismatch(f"pose vectors must have {POSE_DIM} channels")
        if not torch.isfinite(poses).all():
            raise NonFinite("pose input contains non-finite values")
        return self.pose_mlp(poses)

    def _patch_tokens(self, feat: torch.Tensor) -> torch.Tensor:
        p = self.cfg.patch
        b, c, h, w = feat.shape
        tiles = feat.reshape(b, c, h // p, p, w // p, p)
        tiles = tiles.permute(0, 2, 4, 1, 3, 5).reshape(b, (h // p) * (w // p), c * p * p)
        return self.patch_proj(tiles) + self.patch_pe.to(tiles.dtype)

    def fuse(
        self, feat: torch.Tensor, motions: torch.Tensor, cam: Camera
    ) -> torch.Tensor:
        """Build the token sequence per variant.

        feat: (B, C, H, W); motions: (B, M, T+1, 11). Returns
        (B*M, L, D); the last T+1 positions always carry the
        trajectory-aligned tokens (see pose_token_features).
        """
        cfg = self.cfg
        b, m, t1, _ = motions.shape
        if feat.shape[0] != b:
            raise ShapeMismatch("feature map batch differs from motion batch")
        if t1 != cfg.horizon + 1:
            raise ShapeMismatch(
                f"expected {cfg.horizon + 1} poses per motion, got {t1}"
            )
        g = self.pose_feats(motions)  # (B, M, T+1, Dg)
        if self.training and cfg.pose_dropout > 0:
            keep = (
                torch.rand(b, m, t1, 1, device=g.device) >= cfg.pose_dropout
            ).to(g.dtype)
            g = g * keep
        if cfg.variant == "trajectory_aligned":
            uv = project_points(motions[..., 0:3], cam).reshape(b, m * t1, 2)
            f = sample_bilinear(feat, uv).reshape(b, m, t1, cfg.feat_channels)
            tokens = torch.cat([f, g], dim=-1)
            return tokens.reshape(b * m, t1, cfg.d_model)
        g_tok = self.pose_proj(g).reshape(b * m, t1, cfg.d_model)
        if cfg.variant == "no_concat":
            uv = project_points(motions[..., 0:3], cam).reshape(b, m * t1, 2)
            f = sample_bilinear(feat, uv).reshape(b, m, t1, cfg.feat_channels)
            f_tok = self.img_proj(f).reshape(b * m, t1, cfg.d_model)
            return torch.cat([f_tok, g_tok], dim=1)
        if cfg.variant == "gap":
            pooled = feat.mean(dim=(2, 3))  # (B, C)
            img_tok = self.img_proj(pooled).unsqueeze(1)  # (B, 1, D)
            img_tok = img_tok.unsqueeze(1).expand(b, m, 1, cfg.d_model)
            img_tok = img_tok.reshape(b * m, 1, cfg.d_model)
            return torch.cat([img_tok, g_tok], dim=1)
        # vit_patch
        patches = self._patch_tokens(feat)  # (B, l, D)
        patches = patches.unsqueeze(1).expand(b, m, cfg.n_patches, cfg.d_model)
        patches = patches.reshape(b * m, cfg.n_patches, cfg.d_model)
        return torch.cat([patches, g_tok], dim=1)

    def temporal_encode(self, tokens: torch.Tensor) -> torch.Tensor:
        """Transformer over the fused tokens; same length out as in."""
        if tokens.ndim != 3 or tokens.shape[-1] != self.cfg.d_model:
            raise ShapeMismatch(
                f"tokens must be (B, L, {self.cfg.d_model}), got {tuple(tokens.shape)}"
            )
        for block in self.blocks:
            tokens = block(tokens)
        return tokens

    def pose_token_features(
        self, feat: torch.Tensor, motions: torch.Tensor, cam: Camera
    ) -> torch.Tensor:
        """Temporal features v_t at the trajectory positions: (B, M, T+1, D)."""
        b, m, t1, _ = motions.shape
        encoded = self.temporal_encode(self.fuse(feat, motions, cam))
        return encoded[:, -t1:, :].reshape(b, m, t1, self.cfg.d_model)


import contextlib


@contextlib.contextmanager
def eval_mode(module: nn.Module):
    """Temporarily switch to eval mode (disables train-only masking)."""
    was_training = module.training
    module.eval()
    try:
        yield
    finally:
        module.train(was_training)


# ---------------------------------------------------------------------------
# numpy <-> torch bridging
# ---------------------------------------------------------------------------


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 4) float image -> (1, 4, H, W) tensor."""
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).unsqueeze(0)


def motions_to_tensor(trajectories) -> torch.Tensor:
    """List of trajectories -> (M, T+1, 11) tensor."""
    return torch.from_numpy(np.stack([t.values for t in trajectories]))


# ---------------------------------------------------------------------------
# analytic cost model (multiply-accumulates per forward pass)
# ---------------------------------------------------------------------------


def _conv_macs(h: int, w: int, cin: int, cout: int, k: int) -> int:
    return h * w * cout * cin * k * k


def unet_macs(cfg: EncoderConfig) -> int:
    s, b, c = cfg.image_size, cfg.base_channels, cfg.feat_channels
    total = _conv_macs(s, s, cfg.in_channels, b, 3)
    total += _conv_macs(s // 2, s // 2, b, 2 * b, 3)
    total += _conv_macs(s // 4, s // 4, 2 * b, 4 * b, 3)
    total += _conv_macs(s // 8, s // 8, 4 * b, 4 * b, 3)
    total += _conv_macs(s // 8, s // 8, 4 * b, 4 * b, 3)   # mid
    total += _conv_macs(s // 4, s // 4, 8 * b, 4 * b, 3)   # up3
    total += _conv_macs(s // 2, s // 2, 6 * b, 2 * b, 3)   # up2
    total += _conv_macs(s, s, 3 * b, 2 * b, 3)             # up1
    total += _conv_macs(s, s, 2 * b, c, 1)
    return total


def transformer_macs(length: int, cfg: EncoderConfig) -> int:
    d, f = cfg.d_model, cfg.ffn
    per_layer = (
        length * d * 3 * d      # qkv
        + 2 * length * length * d  # scores + weighted sum
        + length * d * d        # output projection
        + 2 * length * d * f    # feedforward
    )
    return cfg.layers * per_layer


def image_side_macs(cfg: EncoderConfig) -> int:
    """Work done once per image and reused across candidate motions."""
    total = unet_macs(cfg)
    if cfg.variant == "gap":
        total += cfg.feat_channels * cfg.d_model
    if cfg.variant == "vit_patch":
        total += cfg.n_patches * cfg.feat_channels * cfg.patch**2 * cfg.d_model
    return total


def candidate_side_macs(cfg: EncoderConfig, head_out: int) -> int:
    """Work repeated per candidate motion, including a d->d->head_out MLP head."""
    t1 = cfg.horizon + 1
    total = t1 * (POSE_DIM * cfg.pose_hidden + cfg.pose_hidden * cfg.pose_feat)
    if cfg.variant != "trajectory_aligned":
        total += t1 * cfg.pose_feat * cfg.d_model
    if cfg.variant == "no_concat":
        total += t1 * cfg.feat_channels * cfg.d_model
    total += transformer_macs(cfg.token_count(), cfg)
    head_positions = t1 if head_out > 1 else 1  # refiner applies per timestep
    total += head_positions * (cfg.d_model * cfg.d_model + cfg.d_model * head_out)
    return total
