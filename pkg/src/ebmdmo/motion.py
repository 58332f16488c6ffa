"""Pose and trajectory primitives shared by every other module.

A pose is an 11-D vector: 3D position (camera frame, meters), a 6D rotation
representation (first two columns of the rotation matrix, column-major),
gripper openness in [0, 1], and a normalized timestamp in [0, 1].
All geometry is float32; tolerance constants live next to the op they guard.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import (
    BehindCamera,
    DegenerateRotation,
    LengthMismatch,
    NotARotation,
    TooShort,
)

POSE_DIM = 11
# flatten layout: [x(3), r(6), s(1), t(1)]
X_SLICE = slice(0, 3)
R_SLICE = slice(3, 9)
S_INDEX = 9
T_INDEX = 10

IDENTITY_SIXD = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0], dtype=np.float32)

_DEGENERATE_EPS = 1e-8
_ROTATION_TOL = 1e-5
_BEHIND_EPS = 1e-6


@dataclass(frozen=True)
class Pose:
    """One timestep of robot state."""

    x: np.ndarray  # (3,) float32 position, meters, camera frame
    r: np.ndarray  # (6,) float32 rotation (two matrix columns)
    s: float       # gripper openness, 1 = open / 0 = closed
    t: float       # normalized timestamp in [0, 1]

    def flatten(self) -> np.ndarray:
        out = np.empty(POSE_DIM, dtype=np.float32)
        out[X_SLICE] = self.x
        out[R_SLICE] = self.r
        out[S_INDEX] = self.s
        out[T_INDEX] = self.t
        return out

    @staticmethod
    def from_flat(values: np.ndarray) -> "Pose":
        v = np.asarray(values, dtype=np.float32).reshape(POSE_DIM)
        return Pose(
            x=v[X_SLICE].copy(),
            r=v[R_SLICE].copy(),
            s=float(v[S_INDEX]),
            t=float(v[T_INDEX]),
        )


class Trajectory:
    """A fixed-length sequence of T+1 poses, stored as a (T+1, 11) array.

    Values are immutable after construction; timestamps must be strictly
    increasing.
    """

    __slots__ = ("values",)

    def __init__(self, values: np.ndarray):
        arr = np.array(values, dtype=np.float32, copy=True)
        if arr.ndim != 2 or arr.shape[1] != POSE_DIM:
            raise LengthMismatch(
                f"trajectory array must be (T+1, {POSE_DIM}), got {arr.shape}"
            )
        if arr.shape[0] < 1:
            raise TooShort("trajectory needs at least one pose")
        ts = arr[:, T_INDEX]
        if arr.shape[0] > 1 and not np.all(np.diff(ts) > 0):
            raise LengthMismatch("timestamps must be strictly increasing")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    def __setattr__(self, name, value):  # immutability guard
        raise AttributeError("Trajectory is immutable")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def horizon(self) -> int:
        """T, i.e. pose count minus one."""
        return self.values.shape[0] - 1

    @property
    def xs(self) -> np.ndarray:
        return self.values[:, X_SLICE]

    @property
    def rs(self) -> np.ndarray:
        return self.values[:, R_SLICE]

    @property
    def ss(self) -> np.ndarray:
        return self.values[:, S_INDEX]

    @property
    def ts(self) -> np.ndarray:
        return self.values[:, T_INDEX]

    def pose(self, k: int) -> Pose:
        return Pose.from_flat(self.values[k])

    def __eq__(self, other) -> bool:
        return isinstance(other, Trajectory) and np.array_equal(
            self.values, other.values
        )

    def __repr__(self) -> str:
        return f"Trajectory(T={self.horizon})"

    def to_json(self) -> str:
        """One JSON array of T+1 arrays of 11 numbers (flatten order)."""
        return json.dumps([[float(v) for v in row] for row in self.values])

    @staticmethod
    def from_json(text: str) -> "Trajectory":
        return Trajectory(np.array(json.loads(text), dtype=np.float32))


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics. Identity extrinsics: points live in the camera frame."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @staticmethod
    def from_dict(d: dict) -> "Camera":
        return Camera(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )


def sixd_to_matrix(r: np.ndarray) -> np.ndarray:
    """Recover a rotation matrix from its first two columns via Gram-Schmidt.

    The third column is the cross product of the first two, which forces
    det = +1.
    """
    r = np.asarray(r, dtype=np.float32).reshape(6)
    a = r[:3].astype(np.float64)
    b = r[3:].astype(np.float64)
    na = np.linalg.norm(a)
    if na < _DEGENERATE_EPS:
        raise DegenerateRotation("first 6D vector has near-zero norm")
    c0 = a / na
    b_perp = b - np.dot(c0, b) * c0
    nb = np.linalg.norm(b_perp)
    if nb < _DEGENERATE_EPS:
        raise DegenerateRotation("6D vectors are parallel")
    c1 = b_perp / nb
    c2 = np.cross(c0, c1)
    return np.stack([c0, c1, c2], axis=1).astype(np.float32)


def matrix_to_sixd(m: np.ndarray) -> np.ndarray:
    """First two columns of a rotation matrix, column-major concatenation."""
    m = np.asarray(m, dtype=np.float32).reshape(3, 3)
    m64 = m.astype(np.float64)
    if np.max(np.abs(m64.T @ m64 - np.eye(3))) > _ROTATION_TOL:
        raise NotARotation("matrix is not orthonormal within tolerance")
    if np.linalg.det(m64) < 0:
        raise NotARotation("matrix has negative determinant")
    return np.concatenate([m[:, 0], m[:, 1]]).astype(np.float32)


def project(x: np.ndarray, cam: Camera) -> np.ndarray:
    """Pinhole projection of a camera-frame point to pixel coordinates.

    The result may lie outside the image; downstream sampling clamps.
    """
    x = np.asarray(x, dtype=np.float32).reshape(3)
    z = float(x[2])
    if z <= _BEHIND_EPS:
        raise BehindCamera(f"point z={z} is not in front of the camera")
    u = cam.fx * float(x[0]) / z + cam.cx
    v = cam.fy * float(x[1]) / z + cam.cy
    return np.array([u, v], dtype=np.float32)


def orthonormalize_sixd(r: np.ndarray) -> np.ndarray:
    """Canonical 6D form: Gram-Schmidt the two vectors, keep two columns."""
    return matrix_to_sixd(sixd_to_matrix(r))


def resample(traj: Trajectory, t_out: int) -> Trajectory:
    """Resample to t_out+1 poses at uniform timestamps.

    Position and gripper channels interpolate linearly; rotation interpolates
    linearly in 6D and is re-orthonormalized (adequate for the small
    inter-step rotations at this scale). Output timestamps are k/t_out.
    """
    if len(traj) < 2:
        raise TooShort("resample needs at least two input poses")
    if t_out < 1:
        raise TooShort("t_out must be >= 1")
    src_t = traj.ts.astype(np.float64)
    span0, span1 = float(src_t[0]), float(src_t[-1])
    query = span0 + (span1 - span0) * np.arange(t_out + 1) / t_out
    out = np.empty((t_out + 1, POSE_DIM), dtype=np.float32)
    for c in range(POSE_DIM - 1):  # all channels except the timestamp
        out[:, c] = np.interp(query, src_t, traj.values[:, c].astype(np.float64))
    for k in range(t_out + 1):
        out[k, R_SLICE] = orthonormalize_sixd(out[k, R_SLICE])
    out[:, T_INDEX] = (np.arange(t_out + 1) / t_out).astype(np.float32)
    return Trajectory(out)


def distance(p: Trajectory, q: Trajectory) -> float:
    """Mean over timesteps of the Euclidean distance between positions."""
    if len(p) != len(q):
        raise LengthMismatch(f"length mismatch: {len(p)} vs {len(q)}")
    d = np.linalg.norm(
        p.xs.astype(np.float64) - q.xs.astype(np.float64), axis=1
    )
    return float(d.mean())
