"""Static PNG rendering of predicted trajectories over scene images."""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

from .motion import Camera, Trajectory, project

OPEN_COLOR = (255, 255, 255)
CLOSED_COLOR = (20, 20, 20)
LINE_COLOR = (255, 140, 0)


def overlay_point(u: np.ndarray, scale: int) -> tuple[float, float]:
    """Map original-pixel coordinates to the center of the upscaled block."""
    return (u[0] * scale + (scale - 1) / 2.0, u[1] * scale + (scale - 1) / 2.0)


def draw_prediction(
    image: np.ndarray,
    traj: Trajectory,
    cam: Camera,
    energy: float,
    scale: int = 8,
) -> Image.Image:
    """RGB overlay: trajectory polyline, waypoint dots colored by gripper
    state (white = open, dark = closed), and the energy annotated."""
    rgb8 = np.round(image[..., :3] * 255.0).astype(np.uint8)
    img = Image.fromarray(rgb8, mode="RGB").resize(
        (cam.width * scale, cam.height * scale), Image.NEAREST
    )
    draw = ImageDraw.Draw(img)
    points = [overlay_point(project(x, cam), scale) for x in traj.xs]
    if len(points) > 1:
        draw.line(points, fill=LINE_COLOR, width=max(1, scale // 4))
    radius = max(2, int(scale * 0.45))
    for (px, py), s in zip(points, traj.ss):
        color = OPEN_COLOR if s >= 0.5 else CLOSED_COLOR
        draw.ellipse((px - radius, py - radius, px + radius, py + radius), fill=color)
    draw.text((4, 4), f"E={energy:.4f}", fill=(0, 0, 0))
    return img
