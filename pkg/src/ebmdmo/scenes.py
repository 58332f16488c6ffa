"""Synthetic planar manipulation benchmark.

Three tabletop tasks (reach, push_button, pick_place) observed by a fixed
overhead pinhole camera. Scenes are sampled with rejection sampling,
rendered to flat-shaded RGB + depth, paired with spline-synthesized expert
motions, and judged by geometric success oracles. Everything is a pure
function of the seed so datasets are bit-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.interpolate import PchipInterpolator

from . import __version__
from .errors import EmptyDataset, IoError, PlacementFailure
from .motion import (
    Camera,
    IDENTITY_SIXD,
    Pose,
    Trajectory,
    matrix_to_sixd,
    project,
    resample,
)

# Table geometry, camera frame: x right, y down in the image, z toward the table.
TABLE_Z = 0.8            # tabletop depth from the camera, meters
OBJECT_HEIGHT = 0.02     # disc height above the table
HOVER_Z = 0.65           # transit height of the gripper
ACT_CLEARANCE = 0.005    # gap between gripper and object top at contact
ACT_Z = TABLE_Z - OBJECT_HEIGHT - ACT_CLEARANCE
WORKSPACE_HALF = 0.3     # object centers stay within [-0.3, 0.3]^2
PLACEMENT_HALF = 0.22    # sampling keeps objects in this denser inner region
ZONE_HALF = 0.08         # pick_place zones stay near the table center
MIN_SEPARATION = 0.02    # extra gap beyond summed radii
APPROACH_SLANT = 0.05    # horizontal offset of the pre-contact waypoint
MAX_DEPTH = TABLE_Z      # manifest-recorded depth normalizer

DEFAULT_CAMERA = Camera(fx=80.0, fy=80.0, cx=32.0, cy=32.0, width=64, height=64)
DEFAULT_HORIZON = 15
DATASET_FORMAT_VERSION = 1

TABLE_COLOR = (191, 184, 173)
PALETTE = (
    (204, 41, 41),    # 0: red, reach / pick target
    (41, 163, 82),    # 1: green, place zone
    (48, 98, 204),    # 2: blue, button
    (214, 197, 46),   # 3: yellow distractor
    (186, 59, 186),   # 4: magenta distractor
    (64, 196, 196),   # 5: cyan distractor
)
_DISTRACTOR_COLORS = (3, 4, 5)


class TaskId(str, Enum):
    REACH = "reach"
    PUSH_BUTTON = "push_button"
    PICK_PLACE = "pick_place"


@dataclass(frozen=True)
class OracleConstants:
    """Success tolerances; recorded in the dataset manifest."""

    pos_tol_frac: float = 0.1    # fraction of object radius
    pos_tol_abs: float = 0.005   # additive slack, meters
    bounds_xy: float = 0.36      # |x|,|y| limit for any gripper pose
    z_min: float = 0.5           # gripper never retreats closer to the camera
    z_table_clearance: float = 0.003  # gripper never comes within this of the table

    def tolerance(self, radius: float) -> float:
        return self.pos_tol_frac * radius + self.pos_tol_abs

    def to_dict(self) -> dict:
        return {
            "pos_tol_frac": self.pos_tol_frac,
            "pos_tol_abs": self.pos_tol_abs,
            "bounds_xy": self.bounds_xy,
            "z_min": self.z_min,
            "z_table_clearance": self.z_table_clearance,
        }

    @staticmethod
    def from_dict(d: dict) -> "OracleConstants":
        return OracleConstants(**d)


DEFAULT_ORACLE = OracleConstants()


class FailureReason(str, Enum):
    NONE = "none"
    MISSED_TARGET = "missed_target"
    WRONG_GRIPPER_STATE = "wrong_gripper_state"
    OUT_OF_BOUNDS = "out_of_bounds"
    DROPPED_EARLY = "dropped_early"


@dataclass(frozen=True)
class SuccessReport:
    success: bool
    failure_reason: FailureReason

    def __post_init__(self):
        assert self.success == (self.failure_reason == FailureReason.NONE)


@dataclass(frozen=True)
class SceneObject:
    position: tuple[float, float]  # table-plane center, meters
    radius: float
    color: int                     # PALETTE index

    def center3d(self) -> np.ndarray:
        """Center of the object's top face, camera frame."""
        return np.array(
            [self.position[0], self.position[1], TABLE_Z - OBJECT_HEIGHT],
            dtype=np.float32,
        )


@dataclass(frozen=True)
class SceneSpec:
    task_id: TaskId
    objects: tuple[SceneObject, ...]
    home_pose: Pose
    seed: int

    @property
    def target(self) -> SceneObject:
        """The object the task acts on (first listed)."""
        return self.objects[0]

    @property
    def zone(self) -> SceneObject:
        if self.task_id is not TaskId.PICK_PLACE:
            raise ValueError("only pick_place scenes have a place zone")
        return self.objects[1]


@dataclass(frozen=True)
class Episode:
    scene: SceneSpec
    image: np.ndarray     # (H, W, 4) float32: RGB in [0,1] + depth in meters
    expert: Trajectory
    camera: Camera


def _act_point(obj: SceneObject) -> np.ndarray:
    return np.array([obj.position[0], obj.position[1], ACT_Z], dtype=np.float32)


def sample_scene(task_id: TaskId, rng: np.random.Generator) -> SceneSpec:
    """Draw a scene satisfying workspace bounds and pairwise separation."""
    task_id = TaskId(task_id)
    if task_id is TaskId.PICK_PLACE:
        # The place zone is a wide plate drawn from a compact central region,
        # sampled before the object so the remaining ring is never empty.
        radii = [rng.uniform(0.075, 0.09), rng.uniform(0.035, 0.05)]
        colors = [1, 0]
        halves = [ZONE_HALF, 0.18]
    else:
        radii = [rng.uniform(0.04, 0.055) for _ in range(3)]
        target_color = 0 if task_id is TaskId.REACH else 2
        colors = [target_color] + list(rng.choice(_DISTRACTOR_COLORS, size=2))
        halves = [PLACEMENT_HALF] * 3
    positions: list[np.ndarray] = []
    for i, radius in enumerate(radii):
        lo, hi = -halves[i], halves[i]
        for _ in range(1000):
            cand = rng.uniform(lo, hi, size=2)
            ok = all(
                np.linalg.norm(cand - p) >= radius + radii[j] + MIN_SEPARATION
                for j, p in enumerate(positions)
            )
            if ok:
                positions.append(cand)
                break
        else:
            raise PlacementFailure(f"could not place object {i} after 1000 tries")
    entries = list(zip(positions, radii, colors))
    if task_id is TaskId.PICK_PLACE:
        entries.reverse()  # role order: pick target first, zone second
    objects = tuple(
        SceneObject(position=(float(p[0]), float(p[1])), radius=float(r), color=int(c))
        for p, r, c in entries
    )
    home_xy = rng.uniform(-0.065, 0.065, size=2) + np.array([0.0, -0.24])
    home = Pose(
        x=np.array([home_xy[0], home_xy[1], HOVER_Z], dtype=np.float32),
        r=IDENTITY_SIXD.copy(),
        s=1.0,
        t=0.0,
    )
    return SceneSpec(task_id=task_id, objects=objects, home_pose=home, seed=0)


def render(scene: SceneSpec, cam: Camera = DEFAULT_CAMERA) -> np.ndarray:
    """Flat-shaded discs over a uniform table; depth = table minus object height.

    Colors are multiples of 1/255 so the 8-bit PNG round trip is exact.
    """
    h, w = cam.height, cam.width
    rgb = np.empty((h, w, 3), dtype=np.float32)
    rgb[:] = np.array(TABLE_COLOR, dtype=np.float32) / 255.0
    depth = np.full((h, w), TABLE_Z, dtype=np.float32)
    ui, vi = np.meshgrid(np.arange(w, dtype=np.float32), np.arange(h, dtype=np.float32))
    for obj in scene.objects:
        center = obj.center3d()
        u = project(center, cam)
        r_px = obj.radius * cam.fx / float(center[2])
        mask = (ui - u[0]) ** 2 + (vi - u[1]) ** 2 <= r_px**2
        rgb[mask] = np.array(PALETTE[obj.color], dtype=np.float32) / 255.0
        depth[mask] = TABLE_Z - OBJECT_HEIGHT
    return np.concatenate([rgb, depth[..., None]], axis=2)


def _rz_sixd(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    m = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], dtype=np.float32)
    return matrix_to_sixd(m)


def _spline_trajectory(
    times: np.ndarray,
    points: np.ndarray,
    s_knots: tuple[np.ndarray, np.ndarray],
    angle_knots: tuple[np.ndarray, np.ndarray] | None,
    horizon: int,
    dense: int = 241,
) -> Trajectory:
    """Monotone cubic spline through waypoints, then resampled to horizon+1."""
    spline = PchipInterpolator(times, points, axis=0)
    tau = np.linspace(0.0, 1.0, dense)
    xs = spline(tau)
    ss = np.interp(tau, s_knots[0], s_knots[1])
    values = np.zeros((dense, 11), dtype=np.float32)
    values[:, 0:3] = xs
    if angle_knots is None:
        values[:, 3:9] = IDENTITY_SIXD
    else:
        angles = np.interp(tau, angle_knots[0], angle_knots[1])
        for k in range(dense):
            values[k, 3:9] = _rz_sixd(float(angles[k]))
    values[:, 9] = ss
    values[:, 10] = tau
    return resample(Trajectory(values), horizon)


def _slanted_above(act: np.ndarray, toward_xy: np.ndarray) -> np.ndarray:
    """Pre-contact waypoint: hover height, offset horizontally toward the
    approach direction so the descent sweeps the image region around the
    target instead of dropping straight down."""
    d = toward_xy - act[:2]
    norm = np.linalg.norm(d)
    unit = d / norm if norm > 1e-9 else np.array([0.0, -1.0])
    return np.array(
        [act[0] + APPROACH_SLANT * unit[0], act[1] + APPROACH_SLANT * unit[1], HOVER_Z]
    )


def expert_motion(scene: SceneSpec, horizon: int = DEFAULT_HORIZON) -> Trajectory:
    """Deterministic expert: approach, act, and (task-dependent) retract.

    Dwell segments around contact guarantee the resampled grid contains
    poses that satisfy the success oracle.
    """
    home = scene.home_pose.x.astype(np.float64)
    target = scene.target
    act = _act_point(target).astype(np.float64)
    above = _slanted_above(act, home[:2])
    task = scene.task_id
    if task is TaskId.REACH:
        times = np.array([0.0, 0.35, 0.75, 1.0])
        points = np.stack([home, above, act, act])
        s_knots = (np.array([0.0, 0.45, 0.75, 1.0]), np.array([1.0, 1.0, 0.0, 0.0]))
        angle_knots = None
    elif task is TaskId.PUSH_BUTTON:
        times = np.array([0.0, 0.3, 0.55, 0.7, 1.0])
        points = np.stack([home, above, act, act, above])
        s_knots = (
            np.array([0.0, 0.3, 0.55, 0.7, 0.9, 1.0]),
            np.array([1.0, 1.0, 0.0, 0.0, 1.0, 1.0]),
        )
        angle_knots = None
    else:  # PICK_PLACE
        zone = scene.zone
        place = _act_point(zone).astype(np.float64)
        above_zone = _slanted_above(place, act[:2])
        times = np.array([0.0, 0.22, 0.36, 0.46, 0.58, 0.72, 0.80, 0.94, 1.0])
        points = np.stack(
            [home, above, act, act, above, above_zone, place, place, above_zone]
        )
        s_knots = (
            np.array([0.0, 0.22, 0.36, 0.80, 0.86, 1.0]),
            np.array([1.0, 1.0, 0.0, 0.0, 1.0, 1.0]),
        )
        # Slow in-plane wrist rotation during transport, seeded by placement.
        theta = float(
            np.sin(target.position[0] * 37.0 + zone.position[1] * 53.0) * 0.35
        )
        angle_knots = (np.array([0.0, 0.36, 0.80, 1.0]), np.array([0.0, 0.0, theta, theta]))
    return _spline_trajectory(times, points, s_knots, angle_knots, horizon)


def check_success(
    scene: SceneSpec,
    traj: Trajectory,
    oracle: OracleConstants = DEFAULT_ORACLE,
) -> SuccessReport:
    """Pure geometric predicate deciding task completion."""
    xs = traj.xs.astype(np.float64)
    ss = traj.ss.astype(np.float64)
    out_of_bounds = (
        (np.abs(xs[:, 0]) > oracle.bounds_xy)
        | (np.abs(xs[:, 1]) > oracle.bounds_xy)
        | (xs[:, 2] < oracle.z_min)
        | (xs[:, 2] > TABLE_Z - oracle.z_table_clearance)
    )
    if out_of_bounds.any():
        return SuccessReport(False, FailureReason.OUT_OF_BOUNDS)

    target = scene.target
    tol = oracle.tolerance(target.radius)
    act = _act_point(target).astype(np.float64)
    hits = np.linalg.norm(xs - act, axis=1) <= tol
    if not hits.any():
        return SuccessReport(False, FailureReason.MISSED_TARGET)
    contact = hits & (ss < 0.5)
    if not contact.any():
        return SuccessReport(False, FailureReason.WRONG_GRIPPER_STATE)
    if scene.task_id in (TaskId.REACH, TaskId.PUSH_BUTTON):
        return SuccessReport(True, FailureReason.NONE)

    # pick_place: after the first grasp contact, the first re-open must
    # happen over the place zone.
    k_grasp = int(np.argmax(contact))
    later = np.nonzero(ss[k_grasp + 1 :] > 0.5)[0]
    if later.size == 0:
        return SuccessReport(False, FailureReason.WRONG_GRIPPER_STATE)
    k_rel = k_grasp + 1 + int(later[0])
    zone = scene.zone
    zone_xy = np.array(zone.position, dtype=np.float64)
    over_zone = np.linalg.norm(xs[k_rel, :2] - zone_xy) <= zone.radius
    if over_zone:
        return SuccessReport(True, FailureReason.NONE)
    return SuccessReport(False, FailureReason.DROPPED_EARLY)


# ---------------------------------------------------------------------------
# dataset persistence
# ---------------------------------------------------------------------------


def derive_seed(root_seed: int, split: str, index: int) -> int:
    """Stable per-episode seed; scenes are regenerable from the manifest."""
    payload = struct.pack("<q", root_seed) + split.encode() + struct.pack("<q", index)
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return int.from_bytes(digest, "little")


def make_episode(
    task_id: TaskId,
    seed: int,
    horizon: int = DEFAULT_HORIZON,
    cam: Camera = DEFAULT_CAMERA,
) -> Episode:
    rng = np.random.default_rng(seed)
    scene = sample_scene(task_id, rng)
    scene = SceneSpec(scene.task_id, scene.objects, scene.home_pose, seed)
    expert = expert_motion(scene, horizon)
    report = check_success(scene, expert)
    if not report.success:
        raise PlacementFailure(
            f"expert motion failed its own oracle: {report.failure_reason}"
        )
    return Episode(scene=scene, image=render(scene, cam), expert=expert, camera=cam)


def _write_image(path: Path, image: np.ndarray) -> None:
    rgb8 = np.round(image[..., :3] * 255.0).astype(np.uint8)
    Image.fromarray(rgb8, mode="RGB").save(path, format="PNG")


def _write_depth(path: Path, image: np.ndarray) -> None:
    path.write_bytes(image[..., 3].astype("<f4").tobytes())


def gen_dataset(
    task_id: TaskId,
    n_train: int,
    n_test: int,
    seed: int,
    out_dir: str | Path,
    horizon: int = DEFAULT_HORIZON,
    cam: Camera = DEFAULT_CAMERA,
    oracle: OracleConstants = DEFAULT_ORACLE,
) -> dict:
    """Generate and persist a dataset; returns the manifest dict."""
    if n_train <= 0 or n_test <= 0:
        raise ValueError("n_train and n_test must be positive")
    task_id = TaskId(task_id)
    out = Path(out_dir)
    try:
        for split in ("train", "test"):
            (out / "images" / split).mkdir(parents=True, exist_ok=True)
            (out / "depth" / split).mkdir(parents=True, exist_ok=True)
        (out / "motions").mkdir(parents=True, exist_ok=True)
        for split, count in (("train", n_train), ("test", n_test)):
            lines = []
            for idx in range(count):
                ep = make_episode(task_id, derive_seed(seed, split, idx), horizon, cam)
                _write_image(out / "images" / split / f"{idx:04d}.png", ep.image)
                _write_depth(out / "depth" / split / f"{idx:04d}.f32", ep.image)
                lines.append(ep.expert.to_json())
            (out / "motions" / f"{split}.jsonl").write_text("\n".join(lines) + "\n")
        manifest = {
            "format_version": DATASET_FORMAT_VERSION,
            "tool_version": __version__,
            "task": task_id.value,
            "train_count": n_train,
            "test_count": n_test,
            "horizon": horizon,
            "image_size": [cam.height, cam.width],
            "camera": cam.to_dict(),
            "max_depth": MAX_DEPTH,
            "seed": seed,
            "oracle": oracle.to_dict(),
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    except OSError as exc:
        raise IoError(f"dataset write failed: {exc}") from exc
    return manifest


def load_manifest(data_dir: str | Path) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise IoError(f"missing manifest: {path}")
    return json.loads(path.read_text())


def load_motions(data_dir: str | Path, split: str) -> list[Trajectory]:
    path = Path(data_dir) / "motions" / f"{split}.jsonl"
    if not path.exists():
        raise IoError(f"missing motions file: {path}")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise EmptyDataset(f"{path} holds no motions")
    return [Trajectory.from_json(ln) for ln in lines]


def load_image(data_dir: str | Path, split: str, index: int, cam: Camera) -> np.ndarray:
    img_path = Path(data_dir) / "images" / split / f"{index:04d}.png"
    depth_path = Path(data_dir) / "depth" / split / f"{index:04d}.f32"
    if not img_path.exists() or not depth_path.exists():
        raise IoError(f"missing episode files for {split}/{index:04d}")
    rgb = np.asarray(Image.open(img_path), dtype=np.float32) / 255.0
    depth = np.frombuffer(depth_path.read_bytes(), dtype="<f4").reshape(
        cam.height, cam.width
    )
    return np.concatenate([rgb, depth[..., None]], axis=2)


def load_episode(data_dir: str | Path, split: str, index: int) -> Episode:
    """Rebuild a persisted episode; the scene is regenerated from its seed."""
    manifest = load_manifest(data_dir)
    cam = Camera.from_dict(manifest["camera"])
    task = TaskId(manifest["task"])
    seed = derive_seed(manifest["seed"], split, index)
    rng = np.random.default_rng(seed)
    scene = sample_scene(task, rng)
    scene = SceneSpec(scene.task_id, scene.objects, scene.home_pose, seed)
    image = load_image(data_dir, split, index, cam)
    motions = load_motions(data_dir, split)
    return Episode(scene=scene, image=image, expert=motions[index], camera=cam)


def load_split(data_dir: str | Path, split: str) -> list[Episode]:
    manifest = load_manifest(data_dir)
    count = manifest["train_count"] if split == "train" else manifest["test_count"]
    cam = Camera.from_dict(manifest["camera"])
    task = TaskId(manifest["task"])
    motions = load_motions(data_dir, split)
    episodes = []
    for idx in range(count):
        seed = derive_seed(manifest["seed"], split, idx)
        scene = sample_scene(task, np.random.default_rng(seed))
        scene = SceneSpec(scene.task_id, scene.objects, scene.home_pose, seed)
        episodes.append(
            Episode(
                scene=scene,
                image=load_image(data_dir, split, idx, cam),
                expert=motions[idx],
                camera=cam,
            )
        )
    return episodes
