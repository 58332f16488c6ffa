"""Shared test utilities: independent oracles and finite-difference checks."""

from __future__ import annotations

import numpy as np
import torch


def gram_schmidt_oracle(r6: np.ndarray) -> np.ndarray:
    """Loop-based Gram-Schmidt, independent of the library implementation."""
    a = np.array(r6[:3], dtype=np.float64)
    b = np.array(r6[3:], dtype=np.float64)
    c0 = a / np.sqrt(sum(v * v for v in a))
    proj = sum(c0[i] * b[i] for i in range(3))
    b2 = b - proj * c0
    c1 = b2 / np.sqrt(sum(v * v for v in b2))
    c2 = np.array([
        c0[1] * c1[2] - c0[2] * c1[1],
        c0[2] * c1[0] - c0[0] * c1[2],
        c0[0] * c1[1] - c0[1] * c1[0],
    ])
    m = np.zeros((3, 3))
    m[:, 0], m[:, 1], m[:, 2] = c0, c1, c2
    return m


def rotation_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues formula, used as an independent rotation generator."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([
        [0, -axis[2], axis[1]],
        [axis[2], 0, -axis[0]],
        [-axis[1], axis[0], 0],
    ])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def bilinear_oracle(grid: np.ndarray, x: float, y: float) -> np.ndarray:
    """Four-corner weighted sum on a (H, W, C) array with border clamping."""
    h, w = grid.shape[:2]
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0 = int(min(np.floor(x), w - 2))
    y0 = int(min(np.floor(y), h - 2))
    wx, wy = x - x0, y - y0
    return (
        grid[y0, x0] * (1 - wx) * (1 - wy)
        + grid[y0, x0 + 1] * wx * (1 - wy)
        + grid[y0 + 1, x0] * (1 - wx) * wy
        + grid[y0 + 1, x0 + 1] * wx * wy
    )


def fd_param_grad(loss_fn, param: torch.Tensor, flat_index: int, h: float = 1e-5) -> float:
    """Central finite difference of loss_fn() w.r.t. one parameter entry."""
    with torch.no_grad():
        flat = param.view(-1)
        orig = flat[flat_index].item()
        flat[flat_index] = orig + h
        plus = loss_fn().item()
        flat[flat_index] = orig - h
        minus = loss_fn().item()
        flat[flat_index] = orig
    return (plus - minus) / (2 * h)


def check_param_grads(loss_fn, params: list[torch.Tensor], per_tensor: int = 3,
                      h: float = 1e-5, rel_tol: float = 1e-2, seed: int = 0) -> None:
    """Compare autograd gradients against central differences on a sample of
    entries from every parameter tensor. Models should be in double precision."""
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    for param, grad in zip(params, grads):
        if grad is None:
            continue
        n = param.numel()
        for flat_index in rng.choice(n, size=min(per_tensor, n), replace=False):
            analytic = grad.view(-1)[int(flat_index)].item()
            numeric = fd_param_grad(loss_fn, param, int(flat_index), h)
            scale = max(abs(analytic), abs(numeric), 1e-6)
            assert abs(analytic - numeric) / scale < rel_tol, (
                f"grad mismatch at {tuple(param.shape)}[{flat_index}]: "
                f"analytic={analytic:.3e} fd={numeric:.3e}"
            )
