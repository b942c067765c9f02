"""Synthetic RGB-D scenes with known functional parts, plus oracle backends.

The generator builds a rectangular room with furniture boxes along the back
wall, each carrying small protruding interaction parts (knobs, handles, and
the like). Room shell, furniture faces, and part clusters together form the
point cloud; every frame is rendered from that same cloud by splatting each
point into a z-buffer, so rendered depth, ground-truth pixel masks, and the
lifting module's projection model agree by construction.

The oracle backends answer chat and segmentation requests straight from the
generated ground truth, which makes full pipeline runs deterministic and
fully offline.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace
from typing import Mapping, Optional, Sequence

import numpy as np

from . import rle
from .errors import InvariantViolation, InvisibleTarget, MissingFile
from .lifting import project
from .mllm import ChatRequest, format_affordance_block
from .scene_io import CameraModel, Frame, PointCloud, Scene, TaskQuery, depth_from_millimeters

PART_LABELS = (
    "knob", "handle", "switch", "button", "dial", "lever", "latch",
    "valve", "slider", "toggle", "crank", "pedal", "hook", "key",
)

_TASK_TEMPLATES = {
    "knob": "open the top drawer of the {furniture}",
    "handle": "open the door of the {furniture}",
    "switch": "turn on the light above the {furniture}",
    "button": "start the appliance on the {furniture}",
    "dial": "set the temperature on the {furniture}",
    "lever": "unlock the {furniture}",
    "latch": "open the lid of the {furniture}",
    "valve": "shut off the water behind the {furniture}",
    "slider": "dim the lamp on the {furniture}",
    "toggle": "switch the fan next to the {furniture}",
    "crank": "raise the blind behind the {furniture}",
    "pedal": "open the bin beside the {furniture}",
    "hook": "hang the coat on the {furniture}",
    "key": "lock the {furniture}",
}

_ADJECTIVES = ("oak", "walnut", "white", "gray", "black", "pine", "maple", "steel", "birch", "teal")
_NOUNS = ("cabinet", "dresser", "sideboard", "console", "locker", "chest", "credenza", "wardrobe")

_SHELL_PALETTE = np.array(
    [(96, 110, 124), (120, 144, 156), (141, 110, 99), (109, 135, 100),
     (84, 110, 122), (150, 136, 103), (99, 125, 138), (130, 119, 142)],
    dtype=np.uint8,
)
_PART_PALETTE = np.array(
    [(230, 200, 60), (60, 200, 230), (200, 230, 60), (230, 140, 200),
     (140, 230, 170), (200, 170, 240), (240, 210, 120), (120, 220, 220)],
    dtype=np.uint8,
)
_BACKGROUND = np.array((40, 40, 46), dtype=np.uint8)

_NEAR_PLANE = 0.05
_FINGERPRINT_STRIDE = 8
_IDENTIFY_CANDIDATES = 8

VERIFY_IOU_THRESHOLD = 0.5
PARENT_FRACTION_LIMIT = 0.3
_OVERSEGMENT_CONCENTRATION = 0.8


# ---------------------------------------------------------------------------
# Specs


@dataclass(frozen=True)
class PartSpec:
    """A small protruding patch on a furniture front face.

    Spacing is kept above the pixel footprint of the default cameras so each
    cluster point wins its own pixel, and the protrusion exceeds the
    half-pixel back-projection error, keeping votes per 3D point uniform
    across views.
    """

    label: str
    anchor: tuple[float, float]  # (horizontal, vertical) fractions of the face
    extent_m: float = 0.12
    spacing_m: float = 0.04
    protrusion_m: float = 0.025


@dataclass(frozen=True)
class FurnitureSpec:
    name: str
    position_m: float  # center along the back wall
    size: tuple[float, float, float]  # width, depth, height
    parts: tuple[PartSpec, ...] = ()


@dataclass(frozen=True)
class TrajectorySpec:
    """Camera path: an arc in front of the back wall or a straight strafe."""

    kind: str = "arc"
    n_frames: int = 120
    fps: float = 30.0
    distance_m: float = 2.2
    height_m: float = 1.4
    span: float = 1.0  # arc: radians swept; line: meters strafed

    def __post_init__(self):
        if self.kind not in ("arc", "line"):
            raise ValueError("trajectory kind must be 'arc' or 'line'")
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")


@dataclass(frozen=True)
class VisibilityRule:
    """Fraction of a part's points rendered per frame (1.0 = fully visible)."""

    default: float = 1.0
    overrides: tuple[tuple[int, float], ...] = ()

    def fraction_for(self, frame_index: int) -> float:
        for idx, fraction in self.overrides:
            if idx == frame_index:
                return fraction
        return self.default


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    scene_id: str = ""
    room_size: tuple[float, float, float] = (6.0, 4.0, 2.8)
    furniture: tuple[FurnitureSpec, ...] = ()
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    image_size: tuple[int, int] = (192, 144)  # (width, height)
    surface_spacing_m: float = 0.05
    visibility: tuple[tuple[str, VisibilityRule], ...] = ()

    def visibility_rule(self, label: str) -> VisibilityRule:
        for key, rule in self.visibility:
            if key == label:
                return rule
        return VisibilityRule()


def random_spec(
    seed: int,
    n_parts: int = 6,
    n_frames: int = 120,
    image_size: tuple[int, int] = (192, 144),
    fps: float = 30.0,
    trajectory_kind: str = "arc",
    visibility: tuple[tuple[str, VisibilityRule], ...] = (),
) -> SynthSpec:
    """Deterministic room layout with ``n_parts`` distinct labeled parts."""
    if not 1 <= n_parts <= len(PART_LABELS):
        raise ValueError(f"n_parts must be within 1..{len(PART_LABELS)}")
    rng = np.random.default_rng(seed)
    room_w = 6.0
    n_boxes = math.ceil(n_parts / 4)
    slot_w = (room_w - 1.0) / n_boxes
    part_slots = ((0.3, 0.45), (0.7, 0.45), (0.3, 0.75), (0.7, 0.75))
    labels = list(PART_LABELS[:n_parts])
    boxes = []
    for b in range(n_boxes):
        name = f"{_ADJECTIVES[rng.integers(len(_ADJECTIVES))]} {_NOUNS[rng.integers(len(_NOUNS))]}"
        if any(name == existing.name for existing in boxes):
            name = f"{name} {b + 1}"
        width = float(rng.uniform(0.9, min(1.4, slot_w - 0.1)))
        height = float(rng.uniform(0.9, 1.3))
        center = 0.5 + slot_w * b + slot_w / 2.0
        parts = []
        for slot in part_slots:
            if not labels:
                break
            parts.append(PartSpec(label=labels.pop(0), anchor=slot))
        boxes.append(
            FurnitureSpec(
                name=name,
                position_m=center,
                size=(width, 0.45, height),
                parts=tuple(parts),
            )
        )
    return SynthSpec(
        seed=seed,
        scene_id=f"synth-{seed:05d}",
        furniture=tuple(boxes),
        trajectory=TrajectorySpec(kind=trajectory_kind, n_frames=n_frames, fps=fps),
        image_size=image_size,
        visibility=visibility,
    )


# ---------------------------------------------------------------------------
# Spec serialization (written next to generated scenes so `run --oracle` can
# rebuild the ground-truth script deterministically)

SPEC_FILENAME = "synth_spec.json"


def spec_to_dict(spec: SynthSpec) -> dict:
    return {
        "seed": spec.seed,
        "scene_id": spec.scene_id,
        "room_size": list(spec.room_size),
        "furniture": [
            {
                "name": box.name,
                "position_m": box.position_m,
                "size": list(box.size),
                "parts": [
                    {
                        "label": p.label,
                        "anchor": list(p.anchor),
                        "extent_m": p.extent_m,
                        "spacing_m": p.spacing_m,
                        "protrusion_m": p.protrusion_m,
                    }
                    for p in box.parts
                ],
            }
            for box in spec.furniture
        ],
        "trajectory": {
            "kind": spec.trajectory.kind,
            "n_frames": spec.trajectory.n_frames,
            "fps": spec.trajectory.fps,
            "distance_m": spec.trajectory.distance_m,
            "height_m": spec.trajectory.height_m,
            "span": spec.trajectory.span,
        },
        "image_size": list(spec.image_size),
        "surface_spacing_m": spec.surface_spacing_m,
        "visibility": [
            {
                "label": label,
                "default": rule.default,
                "overrides": [[idx, fraction] for idx, fraction in rule.overrides],
            }
            for label, rule in spec.visibility
        ],
    }


def spec_from_dict(data: dict) -> SynthSpec:
    return SynthSpec(
        seed=int(data["seed"]),
        scene_id=str(data.get("scene_id", "")),
        room_size=tuple(data["room_size"]),
        furniture=tuple(
            FurnitureSpec(
                name=box["name"],
                position_m=float(box["position_m"]),
                size=tuple(box["size"]),
                parts=tuple(
                    PartSpec(
                        label=p["label"],
                        anchor=tuple(p["anchor"]),
                        extent_m=float(p["extent_m"]),
                        spacing_m=float(p["spacing_m"]),
                        protrusion_m=float(p["protrusion_m"]),
                    )
                    for p in box["parts"]
                ),
            )
            for box in data["furniture"]
        ),
        trajectory=TrajectorySpec(**data["trajectory"]),
        image_size=tuple(data["image_size"]),
        surface_spacing_m=float(data["surface_spacing_m"]),
        visibility=tuple(
            (
                entry["label"],
                VisibilityRule(
                    default=float(entry["default"]),
                    overrides=tuple((int(i), float(f)) for i, f in entry["overrides"]),
                ),
            )
            for entry in data.get("visibility", [])
        ),
    )


def save_spec(spec: SynthSpec, path) -> None:
    Path(path).write_text(json.dumps(spec_to_dict(spec), indent=2) + "\n", encoding="utf-8")


def load_spec(path) -> SynthSpec:
    p = Path(path)
    if not p.is_file():
        raise MissingFile(str(p))
    return spec_from_dict(json.loads(p.read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# Geometry sampling


def _plane_grid(extent_a: float, extent_b: float, spacing: float, rng, jitter: float = 0.3):
    """Jittered 2D grid covering [0, extent_a] x [0, extent_b]."""
    a = np.arange(0.0, extent_a + 1e-9, spacing)
    b = np.arange(0.0, extent_b + 1e-9, spacing)
    aa, bb = np.meshgrid(a, b, indexing="ij")
    aa = aa.ravel() + rng.uniform(-jitter, jitter, aa.size) * spacing
    bb = bb.ravel() + rng.uniform(-jitter, jitter, bb.size) * spacing
    return np.clip(aa, 0.0, extent_a), np.clip(bb, 0.0, extent_b)


def _part_grid(extent: float, spacing: float):
    """Exact (unjittered) grid for a part patch, centered on zero."""
    n = max(2, int(round(extent / spacing)) + 1)
    coords = (np.arange(n) - (n - 1) / 2.0) * spacing
    aa, bb = np.meshgrid(coords, coords, indexing="ij")
    return aa.ravel(), bb.ravel()


def _look_at_pose(position: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Camera-to-world pose for +z forward, +x right, +y down."""
    forward = target - position
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = down
    pose[:3, 2] = forward
    pose[:3, 3] = position
    return pose


def _camera_poses(spec: SynthSpec) -> list[np.ndarray]:
    """Scanning capture: the look target pans along the furniture row while
    the camera orbits ("arc") or strafes ("line") in front of it, so every
    box gets centered views somewhere in the timeline."""
    traj = spec.trajectory
    room_w = spec.room_size[0]
    pan_margin = 0.8
    poses = []
    for i in range(traj.n_frames):
        s = i / max(1, traj.n_frames - 1)
        target = np.array([pan_margin + s * (room_w - 2.0 * pan_margin), 0.35, 1.0])
        if traj.kind == "arc":
            theta = (s - 0.5) * traj.span
            position = target + np.array(
                [traj.distance_m * math.sin(theta), traj.distance_m * math.cos(theta), 0.0]
            )
        else:
            position = target + np.array([0.0, traj.distance_m, 0.0])
        position[2] = traj.height_m
        poses.append(_look_at_pose(position, target))
    return poses


# ---------------------------------------------------------------------------
# Ground-truth script


@dataclass
class OracleScript:
    """Everything the oracle backends need, derived from one generated scene."""

    scene: Scene
    image_size: tuple[int, int]
    labels: tuple[str, ...]
    part_ids: dict[str, np.ndarray]
    parent_ids: dict[str, np.ndarray]
    part_parent: dict[str, str]
    query_label: dict[str, str]
    text_label: dict[str, str]
    areas: dict[str, np.ndarray]
    part_pixels: dict[str, list[tuple[np.ndarray, np.ndarray]]]
    part_pixel_flat: dict[str, list[np.ndarray]]
    furniture_pixel_flat: dict[str, list[np.ndarray]]
    furniture_pixels: dict[str, list[tuple[np.ndarray, np.ndarray]]]
    fingerprints: np.ndarray
    fingerprint_stride: int = _FINGERPRINT_STRIDE

    @property
    def frame_count(self) -> int:
        return len(self.scene.frames)

    def area(self, label: str, frame_index: int) -> int:
        return int(self.areas[label][frame_index])

    def visible_frames(self, label: str) -> np.ndarray:
        return np.flatnonzero(self.areas[label] > 0)

    def best_frame(self, label: str, candidates: Sequence[int]) -> Optional[int]:
        """Candidate frame with the largest part-pixel area; None if unseen.

        Areas tie across many frames for small parts, so ties prefer the view
        where the part sits closest to the image center, then the lowest
        frame index.
        """
        center_x = (self.image_size[0] - 1) / 2.0
        center_y = (self.image_size[1] - 1) / 2.0
        best = None
        best_key = None
        for idx in candidates:
            idx = int(idx)
            area = self.area(label, idx)
            if area <= 0:
                continue
            xs, ys = self.part_pixels[label][idx]
            offset = (xs.mean() - center_x) ** 2 + (ys.mean() - center_y) ** 2
            key = (area, -float(offset), -idx)
            if best_key is None or key > best_key:
                best, best_key = idx, key
        return best

    def point_for(self, label: str, frame_index: int) -> Optional[tuple[int, int]]:
        """Ground-truth mask pixel closest to the mask centroid."""
        xs, ys = self.part_pixels[label][frame_index]
        if xs.size == 0:
            return None
        cx, cy = xs.mean(), ys.mean()
        offset = np.argmin((xs - cx) ** 2 + (ys - cy) ** 2)
        return int(xs[offset]), int(ys[offset])

    def grid_mismatch(self, image: np.ndarray) -> tuple[int, int]:
        """(best frame, mismatch count) on the fingerprint grid."""
        stride = self.fingerprint_stride
        grid = image[::stride, ::stride, :]
        if grid.shape != self.fingerprints.shape[1:]:
            return -1, np.iinfo(np.int64).max
        diffs = (self.fingerprints != grid[None]).any(axis=3).sum(axis=(1, 2))
        best = int(np.argmin(diffs))
        return best, int(diffs[best])

    def identify_frame(self, image: np.ndarray) -> int:
        """Which frame an (possibly overlay-modified) image was rendered from.

        Fingerprint mismatches rank candidates; an exact byte match wins
        immediately, otherwise the candidate with the fewest full-resolution
        differing pixels does. Overlays touch few pixels while neighboring
        frames differ along every object boundary, so the source frame
        minimizes both measures.
        """
        stride = self.fingerprint_stride
        grid = image[::stride, ::stride, :]
        if grid.shape != self.fingerprints.shape[1:]:
            raise ValueError("image resolution does not match this scene")
        diffs = (self.fingerprints != grid[None]).any(axis=3).sum(axis=(1, 2))
        order = np.argsort(diffs, kind="stable")[:_IDENTIFY_CANDIDATES]
        for idx in order:
            if np.array_equal(self.scene.frames[int(idx)].color, image):
                return int(idx)
        best, best_count = -1, None
        for idx in order:
            count = int(np.count_nonzero((self.scene.frames[int(idx)].color != image).any(axis=2)))
            if best_count is None or count < best_count or (count == best_count and idx < best):
                best, best_count = int(idx), count
        return best

    def changed_pixel_flat(self, frame_index: int, image: np.ndarray) -> np.ndarray:
        """Flat indices (row * width + column) of pixels differing from the frame."""
        diff = (self.scene.frames[frame_index].color != image).any(axis=2)
        ys, xs = np.nonzero(diff)
        return ys.astype(np.int64) * self.image_size[0] + xs

    def pixel_label(self, frame_index: int, x: int, y: int) -> Optional[str]:
        """Which part's ground-truth mask contains the pixel, if any."""
        flat = int(y) * self.image_size[0] + int(x)
        for label in self.labels:
            flats = self.part_pixel_flat[label][frame_index]
            pos = np.searchsorted(flats, flat)
            if pos < flats.size and flats[pos] == flat:
                return label
        return None


def generate(spec: SynthSpec) -> tuple[Scene, OracleScript]:
    """Render a scene from the spec and derive its ground-truth script.

    Deterministic: the same spec always yields bit-identical scenes.
    Raises InvisibleTarget when some part never wins a single pixel.
    """
    rng = np.random.default_rng(spec.seed)
    room_w, room_d, room_h = spec.room_size
    spacing = spec.surface_spacing_m
    width, height = spec.image_size

    labels = [p.label for box in spec.furniture for p in box.parts]
    if len(labels) != len(set(labels)):
        raise InvariantViolation("part labels must be unique within a scene")
    if not labels:
        raise InvariantViolation("spec declares no parts")

    chunks: list[np.ndarray] = []
    colors: list[np.ndarray] = []
    codes: list[np.ndarray] = []  # 0 = shell, 1 + box for furniture, 1000 + part index

    def add_chunk(points: np.ndarray, color: np.ndarray, code: int) -> tuple[int, int]:
        start = sum(c.shape[0] for c in chunks)
        chunks.append(points.astype(np.float64))
        colors.append(np.tile(color, (points.shape[0], 1)))
        codes.append(np.full(points.shape[0], code, dtype=np.int32))
        return start, start + points.shape[0]

    def shell_color() -> np.ndarray:
        return _SHELL_PALETTE[rng.integers(len(_SHELL_PALETTE))]

    # Room shell: floor, back wall, two side walls (ceiling and the wall
    # behind the camera contribute nothing to any view).
    fa, fb = _plane_grid(room_w, room_d, spacing, rng)
    add_chunk(np.column_stack([fa, fb, np.zeros_like(fa)]), shell_color(), 0)
    wa, wb = _plane_grid(room_w, room_h, spacing, rng)
    add_chunk(np.column_stack([wa, np.zeros_like(wa), wb]), shell_color(), 0)
    sa, sb = _plane_grid(room_d, room_h, spacing, rng)
    add_chunk(np.column_stack([np.zeros_like(sa), sa, sb]), shell_color(), 0)
    sa, sb = _plane_grid(room_d, room_h, spacing, rng)
    add_chunk(np.column_stack([np.full_like(sa, room_w), sa, sb]), shell_color(), 0)

    furniture_ranges: dict[str, tuple[int, int]] = {}
    part_ranges: dict[str, tuple[int, int]] = {}
    part_parent: dict[str, str] = {}
    part_specs: dict[str, PartSpec] = {}
    part_index = {}

    for box_number, box in enumerate(spec.furniture, start=1):
        bw, bd, bh = box.size
        x0, x1 = box.position_m - bw / 2.0, box.position_m + bw / 2.0
        color = shell_color()
        faces = []
        ga, gb = _plane_grid(bw, bh, spacing, rng)
        faces.append(np.column_stack([x0 + ga, np.full_like(ga, bd), gb]))  # front
        ga, gb = _plane_grid(bw, bd, spacing, rng)
        faces.append(np.column_stack([x0 + ga, gb, np.full_like(ga, bh)]))  # top
        ga, gb = _plane_grid(bd, bh, spacing, rng)
        faces.append(np.column_stack([np.full_like(ga, x0), ga, gb]))  # left
        ga, gb = _plane_grid(bd, bh, spacing, rng)
        faces.append(np.column_stack([np.full_like(ga, x1), ga, gb]))  # right
        furniture_ranges[box.name] = add_chunk(np.concatenate(faces), color, box_number)

        for part in box.parts:
            pa, pb = _part_grid(part.extent_m, part.spacing_m)
            cx = x0 + part.anchor[0] * bw
            cz = part.anchor[1] * bh
            points = np.column_stack(
                [cx + pa, np.full_like(pa, bd + part.protrusion_m), cz + pb]
            )
            code = 1000 + len(part_index)
            part_index[part.label] = code
            part_ranges[part.label] = add_chunk(
                points, _PART_PALETTE[len(part_index) % len(_PART_PALETTE)], code
            )
            part_parent[part.label] = box.name
            part_specs[part.label] = part

    points = np.concatenate(chunks)
    point_colors = np.concatenate(colors).astype(np.uint8)
    point_codes = np.concatenate(codes)
    total = points.shape[0]
    part_total = sum(b - a for a, b in part_ranges.values())
    if part_total / total >= 0.01:
        raise InvariantViolation(
            f"parts hold {part_total}/{total} points; must stay under 1 percent"
        )

    camera = CameraModel(
        fx=(width / 2.0) / math.tan(math.radians(30.0)),
        fy=(width / 2.0) / math.tan(math.radians(30.0)),
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        width=width,
        height=height,
    )
    poses = _camera_poses(spec)
    n_frames = len(poses)

    # Per-frame suppression of part points (scripted occlusion).
    keep_masks = np.ones((n_frames, total), dtype=bool)
    for label, (lo, hi) in part_ranges.items():
        rule = spec.visibility_rule(label)
        size = hi - lo
        for f in range(n_frames):
            fraction = rule.fraction_for(f)
            if fraction < 1.0:
                keep = math.ceil(max(0.0, min(1.0, fraction)) * size)
                keep_masks[f, lo + keep:hi] = False

    frames = []
    areas = {label: np.zeros(n_frames, dtype=np.int64) for label in part_ranges}
    part_pixels = {label: [] for label in part_ranges}
    part_pixel_flat = {label: [] for label in part_ranges}
    furniture_pixels = {name: [] for name in furniture_ranges}
    furniture_pixel_flat = {name: [] for name in furniture_ranges}
    empty = (np.empty(0, dtype=np.int32), np.empty(0, dtype=np.int32))

    for f, pose in enumerate(poses):
        view = SimpleNamespace(pose=pose, camera=camera)
        u, v, z, in_front = project(view, points)
        ui = np.floor(u + 0.5).astype(np.int64)
        vi = np.floor(v + 0.5).astype(np.int64)
        valid = (
            in_front
            & (z > _NEAR_PLANE)
            & (ui >= 0) & (ui < width) & (vi >= 0) & (vi < height)
            & keep_masks[f]
        )
        ids = np.flatnonzero(valid)
        zmm = np.round(z[ids] * 1000.0).astype(np.int64)
        flat = vi[ids] * width + ui[ids]
        order = np.lexsort((ids, zmm, flat))
        sorted_flat = flat[order]
        first = np.ones(order.size, dtype=bool)
        first[1:] = sorted_flat[1:] != sorted_flat[:-1]
        winners = ids[order[first]]
        win_flat = sorted_flat[first]
        win_zmm = zmm[order[first]]

        depth_mm = np.zeros(height * width, dtype=np.uint16)
        depth_mm[win_flat] = win_zmm.astype(np.uint16)
        color_img = np.tile(_BACKGROUND, (height * width, 1))
        color_img[win_flat] = point_colors[winners]

        win_codes = point_codes[winners]
        win_x = (win_flat % width).astype(np.int32)
        win_y = (win_flat // width).astype(np.int32)
        for label, code in part_index.items():
            sel = win_codes == code
            if sel.any():
                xs, ys = win_x[sel], win_y[sel]
                part_pixels[label].append((xs, ys))
                part_pixel_flat[label].append(np.sort(win_flat[sel]))
                areas[label][f] = int(sel.sum())
            else:
                part_pixels[label].append(empty)
                part_pixel_flat[label].append(np.empty(0, dtype=np.int64))
        for box_number, name in enumerate(furniture_ranges, start=1):
            sel = win_codes == box_number
            furniture_pixels[name].append((win_x[sel], win_y[sel]))
            furniture_pixel_flat[name].append(np.sort(win_flat[sel]))

        frames.append(
            Frame(
                index=f,
                timestamp=f / spec.trajectory.fps,
                color=color_img.reshape(height, width, 3).astype(np.uint8),
                depth=depth_from_millimeters(depth_mm.reshape(height, width)),
                camera=camera,
                pose=pose,
            )
        )

    for label in part_ranges:
        if areas[label].max(initial=0) == 0:
            raise InvisibleTarget(f"part {label!r} is never visible")

    part_ids = {
        label: np.arange(lo, hi, dtype=np.int64) for label, (lo, hi) in part_ranges.items()
    }
    queries = []
    query_label: dict[str, str] = {}
    text_label: dict[str, str] = {}
    for number, label in enumerate(part_index):
        text = _TASK_TEMPLATES[label].format(furniture=part_parent[label])
        qid = f"q{number:02d}"
        queries.append(TaskQuery(id=qid, text=text, gt_mask=part_ids[label]))
        query_label[qid] = label
        text_label[text] = label

    scene = Scene(
        id=spec.scene_id or f"synth-{spec.seed:05d}",
        cloud=PointCloud(points.astype(np.float32)),
        frames=tuple(frames),
        queries=tuple(queries),
    )
    script = OracleScript(
        scene=scene,
        image_size=(width, height),
        labels=tuple(part_index),
        part_ids=part_ids,
        parent_ids={
            label: np.arange(*furniture_ranges[part_parent[label]], dtype=np.int64)
            for label in part_index
        },
        part_parent=part_parent,
        query_label=query_label,
        text_label=text_label,
        areas=areas,
        part_pixels=part_pixels,
        part_pixel_flat=part_pixel_flat,
        furniture_pixel_flat=furniture_pixel_flat,
        furniture_pixels=furniture_pixels,
        fingerprints=np.stack(
            [frm.color[::_FINGERPRINT_STRIDE, ::_FINGERPRINT_STRIDE, :] for frm in frames]
        ),
    )
    return scene, script


# ---------------------------------------------------------------------------
# Oracle backends


def _sorted_intersection_size(a: np.ndarray, b: np.ndarray) -> int:
    return int(np.intersect1d(a, b, assume_unique=True).size)


class OracleChatBackend:
    """Scripted vision-chat backend answering from ground truth.

    Survey requests are answered with the attached frame of largest
    ground-truth part area (or a refusal when the part is invisible in all
    of them); refinement requests return the mask pixel nearest the mask
    centroid; verification recovers the overlay mask by differencing against
    the source frame and judges overlap with the ground truth.
    """

    def __init__(self, script: OracleScript):
        self.script = script

    # -- helpers

    def _task_label(self, text: str) -> Optional[str]:
        for task_text, label in self.script.text_label.items():
            if task_text in text:
                return label
        return None

    @staticmethod
    def _tag_index(tag: str) -> Optional[int]:
        match = re.search(r"<\s*frame\s+(\d+)\s*>", tag)
        return int(match.group(1)) if match else None

    def _scaled_point(self, label: str, frame_index: int, image: np.ndarray) -> Optional[tuple[int, int]]:
        point = self.script.point_for(label, frame_index)
        if point is None:
            return None
        nw, nh = self.script.image_size
        sh, sw = image.shape[:2]
        x = min(sw - 1, int(math.floor(point[0] * sw / nw + 0.5)))
        y = min(sh - 1, int(math.floor(point[1] * sh / nh + 0.5)))
        return x, y

    # -- request handlers

    def complete(self, request: ChatRequest) -> str:
        text = "\n".join(request.text_parts)
        if "Does the RED highlighted region" in text:
            return self._verify(text, request)
        if "complete three tasks" in text:
            return self._survey(text, request)
        if "Identify the affordance point on the [" in text:
            return self._refine(text, request)
        return "NO"

    def _survey(self, text: str, request: ChatRequest) -> str:
        label = self._task_label(text)
        if label is None:
            return "I do not recognize this task."
        tagged = {}
        for part in request.image_parts:
            idx = self._tag_index(part.tag)
            if idx is not None:
                tagged[idx] = part.image
        best = self.script.best_frame(label, sorted(tagged))
        if best is None:
            return "I could not find the functional object in these frames."
        point = self._scaled_point(label, best, tagged[best])
        return format_affordance_block([point], functional_object=label, frame_index=best)

    def _refine(self, text: str, request: ChatRequest) -> str:
        label = self._task_label(text)
        if label is None or not request.image_parts:
            return "I do not recognize this task."
        part = request.image_parts[0]
        frame_index = self._tag_index(part.tag)
        if frame_index is None or not 0 <= frame_index < self.script.frame_count:
            return "I cannot tell which frame this is."
        if self.script.area(label, frame_index) == 0:
            return f"I cannot see the {label} in this frame."
        point = self._scaled_point(label, frame_index, part.image)
        return format_affordance_block([point])

    def _verify(self, text: str, request: ChatRequest) -> str:
        match = re.search(r"ONLY \[(.*?)\]", text)
        if match is None or not request.image_parts:
            return "NO"
        label = match.group(1).strip().lower()
        if label not in self.script.part_pixel_flat:
            return "NO"
        overlay = request.image_parts[0].image
        width, height = self.script.image_size
        if overlay.shape[:2] != (height, width):
            return "NO"
        frame_index = self.script.identify_frame(overlay)
        changed = self.script.changed_pixel_flat(frame_index, overlay)
        truth = self.script.part_pixel_flat[label][frame_index]
        inter = _sorted_intersection_size(changed, truth)
        union = changed.size + truth.size - inter
        overlap = inter / union if union else 0.0
        if overlap < VERIFY_IOU_THRESHOLD:
            return "NO"
        parent = self.script.furniture_pixel_flat[self.script.part_parent[label]][frame_index]
        parent_hits = _sorted_intersection_size(changed, parent)
        if changed.size and parent_hits / changed.size > PARENT_FRACTION_LIMIT:
            return "NO"
        return "YES"


def mark_oversegment_cells(
    script: OracleScript, rate: float, seed: int
) -> frozenset[tuple[int, str]]:
    """Exactly round(rate x visible cells) (frame, label) cells, seeded.

    Cells are filled mostly part-by-part (80 percent of one part's visible
    frames before moving on), so the corruption is concentrated enough to
    survive multi-view consensus and remain observable end to end.
    """
    if rate <= 0.0:
        return frozenset()
    visible = {label: script.visible_frames(label) for label in script.labels}
    total = sum(v.size for v in visible.values())
    quota = int(round(min(1.0, rate) * total))
    rng = np.random.default_rng(seed)
    marked: set[tuple[int, str]] = set()
    remaining = quota
    for li in rng.permutation(len(script.labels)):
        if remaining <= 0:
            break
        label = script.labels[int(li)]
        frames_l = visible[label]
        take = min(math.ceil(_OVERSEGMENT_CONCENTRATION * frames_l.size), remaining)
        picked = rng.permutation(frames_l.size)[:take]
        marked.update((int(frames_l[j]), label) for j in picked)
        remaining -= take
    if remaining > 0:  # top up when concentration alone cannot meet the quota
        for label in script.labels:
            for f in visible[label]:
                cell = (int(f), label)
                if cell not in marked:
                    marked.add(cell)
                    remaining -= 1
                    if remaining == 0:
                        break
            if remaining == 0:
                break
    return frozenset(marked)


class OracleSegBackend:
    """Scripted point-prompted segmenter.

    A prompt inside a part's ground-truth mask returns that mask at score
    1.0; prompts elsewhere return nothing. Cells marked by
    ``oversegment_rate`` return the parent furniture's pixels unioned in,
    mimicking an over-segmenting model.
    """

    def __init__(self, script: OracleScript, oversegment_rate: float = 0.0, seed: int = 0):
        self.script = script
        self.oversegment_rate = oversegment_rate
        self.marked = mark_oversegment_cells(script, oversegment_rate, seed)

    def segment(self, image, points):
        image = np.asarray(image, dtype=np.uint8)
        width, height = self.script.image_size
        if image.shape[:2] != (height, width):  # not from this scene: nothing to segment
            return []
        frame_index = self.script.identify_frame(image)
        results = []
        for x, y in points:
            label = self.script.pixel_label(frame_index, int(x), int(y))
            if label is None:
                continue
            xs, ys = self.script.part_pixels[label][frame_index]
            if (frame_index, label) in self.marked:
                parent = self.script.part_parent[label]
                pxs, pys = self.script.furniture_pixels[parent][frame_index]
                xs = np.concatenate([xs, pxs])
                ys = np.concatenate([ys, pys])
            results.append((rle.from_pixels(width, height, xs, ys), 1.0))
        return results


def oracle_chat(script: OracleScript) -> OracleChatBackend:
    return OracleChatBackend(script)


def oracle_segmenter(
    script: OracleScript, oversegment_rate: float = 0.0, seed: int = 0
) -> OracleSegBackend:
    return OracleSegBackend(script, oversegment_rate=oversegment_rate, seed=seed)


# ---------------------------------------------------------------------------
# Multi-scene routing (used by `synth --serve` over several scene scripts)


class CompositeChatBackend:
    """Route chat requests to the script whose scene they concern."""

    def __init__(self, scripts: Sequence[OracleScript]):
        texts = [t for s in scripts for t in s.text_label]
        if len(texts) != len(set(texts)):
            raise ValueError("task texts collide across scenes; serve fewer scenes per port")
        self.backends = [OracleChatBackend(s) for s in scripts]

    def complete(self, request: ChatRequest) -> str:
        text = "\n".join(request.text_parts)
        if "Does the RED highlighted region" in text and request.image_parts:
            backend = _nearest_script_backend(self.backends, request.image_parts[0].image)
            return backend.complete(request)
        for backend in self.backends:
            if backend._task_label(text) is not None:
                return backend.complete(request)
        return self.backends[0].complete(request)


class CompositeSegBackend:
    def __init__(self, scripts: Sequence[OracleScript], oversegment_rate: float = 0.0, seed: int = 0):
        self.backends = [OracleSegBackend(s, oversegment_rate, seed) for s in scripts]

    def segment(self, image, points):
        backend = _nearest_script_backend(self.backends, np.asarray(image, dtype=np.uint8))
        return backend.segment(image, points)


def _nearest_script_backend(backends, image):
    best, best_diff = backends[0], None
    for backend in backends:
        _, diff = backend.script.grid_mismatch(image)
        if best_diff is None or diff < best_diff:
            best, best_diff = backend, diff
    return best
