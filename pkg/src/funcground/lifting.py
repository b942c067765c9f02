"""Lifting verified 2D masks onto the point cloud and vote consensus.

Every set pixel of every verified mask is back-projected through its frame's
depth and camera-to-world pose, snapped to the nearest cloud point within
epsilon, and counted as one integer vote for that point. Votes are normalized
by the global maximum and thresholded strictly above tau to form the final
3D mask.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import rle, scene_io
from .errors import InvariantViolation, MissingFile, PixelOutOfBounds

_SINGLE_POINT_EPSILON = 0.1  # nearest-neighbor spacing is undefined for one point

NORMALIZE_MODES = ("max", "views")


class PointIndex:
    """Nearest-neighbor index over the cloud with a snap radius epsilon.

    By default epsilon is twice the median nearest-neighbor spacing of the
    cloud, so the snap radius adapts to point density.
    """

    def __init__(self, points: np.ndarray, epsilon: float):
        self.points = np.asarray(points, dtype=np.float64)
        self.tree = cKDTree(self.points)
        self.epsilon = float(epsilon)

    @classmethod
    def build(cls, cloud, epsilon: Optional[float] = None) -> "PointIndex":
        points = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
        if epsilon is None:
            if points.shape[0] < 2:
                epsilon = _SINGLE_POINT_EPSILON
            else:
                dists, _ = cKDTree(points).query(points, k=2)
                epsilon = 2.0 * float(np.median(dists[:, 1]))
        return cls(points, epsilon)


def camera_rays(camera, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
    """Unit-depth camera-frame directions for integer pixel coordinates."""
    x = (np.asarray(us, dtype=np.float64) - camera.cx) / camera.fx
    y = (np.asarray(vs, dtype=np.float64) - camera.cy) / camera.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def backproject_pixels(frame, us, vs) -> tuple[np.ndarray, np.ndarray]:
    """World points for pixel arrays; the boolean mask flags valid depth."""
    us = np.asarray(us, dtype=np.int64)
    vs = np.asarray(vs, dtype=np.int64)
    depth = np.asarray(frame.depth, dtype=np.float64)[vs, us]
    valid = depth > 0
    rays = camera_rays(frame.camera, us, vs)
    cam_points = rays * depth[:, None]
    rot = frame.pose[:3, :3]
    trans = frame.pose[:3, 3]
    world = cam_points @ rot.T + trans
    return world, valid


def backproject(frame, pixel: tuple[int, int]) -> Optional[np.ndarray]:
    """World point for one pixel, or None where depth is invalid (0)."""
    u, v = int(pixel[0]), int(pixel[1])
    cam = frame.camera
    if not (0 <= u < cam.width and 0 <= v < cam.height):
        raise PixelOutOfBounds(f"pixel ({u}, {v}) outside {cam.width}x{cam.height}")
    world, valid = backproject_pixels(frame, [u], [v])
    return world[0] if valid[0] else None


def project(frame, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Continuous pixel coordinates (u, v), camera depth z, and an in-front flag.

    Integer rasterization elsewhere uses floor(coord + 0.5), matching the
    pixel-center convention of backproject.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rot = frame.pose[:3, :3]
    trans = frame.pose[:3, 3]
    cam_points = (pts - trans) @ rot
    z = cam_points[:, 2]
    in_front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = frame.camera.fx * cam_points[:, 0] / z + frame.camera.cx
        v = frame.camera.fy * cam_points[:, 1] / z + frame.camera.cy
    return u, v, z, in_front


def associate(point: np.ndarray, index: PointIndex, epsilon: Optional[float] = None) -> Optional[int]:
    """Nearest cloud id within epsilon, or None."""
    eps = index.epsilon if epsilon is None else float(epsilon)
    dist, idx = index.tree.query(np.asarray(point, dtype=np.float64))
    return int(idx) if dist <= eps else None


@dataclass
class VoteHeatmap:
    """Per-point vote counts plus the number of masks that produced them."""

    votes: np.ndarray
    source_count: int

    @property
    def normalized(self) -> np.ndarray:
        """Votes divided by the global maximum; all zeros when no votes."""
        return self.scores("max")

    def scores(self, mode: str = "max") -> np.ndarray:
        if mode not in NORMALIZE_MODES:
            raise InvariantViolation(f"normalize mode must be one of {NORMALIZE_MODES}")
        votes = np.asarray(self.votes, dtype=np.float64)
        divisor = votes.max() if mode == "max" else float(self.source_count)
        if divisor <= 0:
            return np.zeros_like(votes)
        return votes / divisor


@dataclass(frozen=True, eq=False)
class Mask3D:
    """Final 3D mask: sorted cloud ids plus the peak normalized vote inside."""

    point_ids: np.ndarray
    confidence: float

    def __len__(self) -> int:
        return int(self.point_ids.shape[0])

    def id_set(self) -> set[int]:
        return set(int(i) for i in self.point_ids)

    @classmethod
    def empty(cls) -> "Mask3D":
        return cls(point_ids=np.empty(0, dtype=np.int64), confidence=0.0)


def accumulate_votes(
    scene,
    masks: Sequence,
    epsilon: Optional[float] = None,
    index: Optional[PointIndex] = None,
    weight_by_score: bool = False,
) -> VoteHeatmap:
    """Count, per cloud point, how many mask pixels land on it.

    Every set pixel of every mask contributes one vote (or its mask's score
    when ``weight_by_score``); pixels with invalid depth or farther than
    epsilon from every cloud point are dropped. Integer accumulation makes
    the result independent of mask order.
    """
    if index is None:
        index = PointIndex.build(scene.cloud, epsilon=epsilon)
    eps = index.epsilon if epsilon is None else float(epsilon)
    dtype = np.float64 if weight_by_score else np.int64
    votes = np.zeros(len(scene.cloud), dtype=dtype)
    for item in masks:
        mask2d = getattr(item, "mask", item)  # VerifiedMask2D or bare Mask2D
        frame = scene.frames[mask2d.frame_index]
        xs, ys = rle.pixel_coords(mask2d.rle)
        if xs.size == 0:
            continue
        world, valid = backproject_pixels(frame, xs, ys)
        if not valid.any():
            continue
        dists, ids = index.tree.query(world[valid])
        hit = ids[dists <= eps]
        weight = mask2d.score if weight_by_score else 1
        np.add.at(votes, hit, weight)
    return VoteHeatmap(votes=votes, source_count=len(masks))


def consensus(heatmap: VoteHeatmap, tau: float, mode: str = "max") -> Mask3D:
    """Threshold normalized votes strictly above tau."""
    scores = heatmap.scores(mode)
    ids = np.flatnonzero(scores > tau).astype(np.int64)
    confidence = float(scores[ids].max()) if ids.size else 0.0
    return Mask3D(point_ids=ids, confidence=confidence)


# ---------------------------------------------------------------------------
# Mask exports


def write_point_ids(path, mask) -> None:
    """One point id per line, ascending."""
    ids = mask.point_ids if isinstance(mask, Mask3D) else np.asarray(mask, dtype=np.int64)
    Path(path).write_text("".join(f"{int(i)}\n" for i in np.sort(ids)), encoding="ascii")


def read_point_ids(path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise MissingFile(str(p))
    return np.asarray([int(line) for line in p.read_text().split()], dtype=np.int64)


def export_colored_ply(cloud, point_ids, path) -> None:
    """Cloud PLY with mask points red and the rest gray, for visual checks."""
    points = np.asarray(getattr(cloud, "points", cloud), dtype=np.float32)
    ids = np.asarray(point_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= points.shape[0]):
        bad = ids[(ids < 0) | (ids >= points.shape[0])][0]
        raise InvariantViolation(f"point id {int(bad)} outside the cloud")
    colors = np.full((points.shape[0], 3), 128, dtype=np.uint8)
    colors[ids] = (255, 0, 0)
    scene_io.write_ply(Path(path), points, colors)
