"""Scene loading, validation, and the on-disk scene directory format.

A scene directory holds:

    manifest.json             scene id, frame records, query records
    cloud.ply                 binary little-endian PLY, float32 xyz
    frames/NNNNNN.color.png   8-bit RGB
    frames/NNNNNN.depth.png   16-bit grayscale, millimeters, 0 = invalid
    gt/<query_id>.ids         optional ground truth, one point id per line

Each manifest frame record carries {index, timestamp_s, color, depth,
intrinsics {fx, fy, cx, cy, width, height}, pose_c2w} where pose_c2w is the
4x4 camera-to-world transform as 16 floats, row-major. Query records carry
{id, text, gt_mask} with gt_mask either null or a path relative to the scene
root. Depth is stored quantized to millimeters, so a scene round-trips
bit-exactly through save_scene/load_scene as long as its in-memory depth is
already millimeter-quantized (load_scene always produces such scenes).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import InvariantViolation, IoFailure, MissingFile, SchemaViolation

_ROTATION_TOLERANCE = 1e-6


@dataclass(frozen=True)
class PointCloud:
    """Scene-frame point cloud; point ids are the dense indices 0..C-1."""

    points: np.ndarray  # (C, 3) float32

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise InvariantViolation("point cloud must be a non-empty (C, 3) array")
        if not np.all(np.isfinite(pts)):
            raise InvariantViolation("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def ids(self) -> np.ndarray:
        return np.arange(len(self), dtype=np.int64)


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvariantViolation("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvariantViolation("principal point outside the image")


@dataclass(frozen=True)
class Frame:
    """One posed RGB-D view.

    ``color`` is (H, W, 3) uint8, ``depth`` is (H, W) float32 meters with 0
    marking invalid pixels, and ``pose`` is the 4x4 camera-to-world transform.
    """

    index: int
    timestamp: float
    color: np.ndarray
    depth: np.ndarray
    camera: CameraModel
    pose: np.ndarray

    def __post_init__(self):
        color = np.asarray(self.color, dtype=np.uint8)
        depth = np.asarray(self.depth, dtype=np.float32)
        pose = np.asarray(self.pose, dtype=np.float64)
        cam = self.camera
        if color.shape != (cam.height, cam.width, 3):
            raise InvariantViolation(
                f"frame {self.index}: color shape {color.shape} does not match camera"
            )
        if depth.shape != (cam.height, cam.width):
            raise InvariantViolation(
                f"frame {self.index}: depth shape {depth.shape} does not match camera"
            )
        if pose.shape != (4, 4):
            raise InvariantViolation(f"frame {self.index}: pose must be 4x4")
        rot = pose[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=_ROTATION_TOLERANCE):
            raise InvariantViolation(f"frame {self.index}: rotation is not orthonormal")
        if not np.allclose(pose[3], [0.0, 0.0, 0.0, 1.0], atol=_ROTATION_TOLERANCE):
            raise InvariantViolation(f"frame {self.index}: last pose row must be [0 0 0 1]")
        object.__setattr__(self, "color", color)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "pose", pose)


@dataclass(frozen=True)
class TaskQuery:
    """A natural-language task plus optional ground truth for evaluation."""

    id: str
    text: str
    gt_mask: Optional[np.ndarray] = None  # sorted unique point ids

    def __post_init__(self):
        if not self.text:
            raise InvariantViolation(f"query {self.id}: text must be non-empty")
        if self.gt_mask is not None:
            ids = np.unique(np.asarray(self.gt_mask, dtype=np.int64))
            object.__setattr__(self, "gt_mask", ids)


@dataclass(frozen=True)
class Scene:
    """Immutable input world: cloud, posed RGB-D frames, and task queries."""

    id: str
    cloud: PointCloud
    frames: tuple[Frame, ...]
    queries: tuple[TaskQuery, ...] = ()

    def __post_init__(self):
        frames = tuple(self.frames)
        queries = tuple(self.queries)
        if len(frames) < 1:
            raise InvariantViolation("scene needs at least one frame")
        times = [f.timestamp for f in frames]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise InvariantViolation("frame timestamps must be strictly increasing")
        for pos, frm in enumerate(frames):
            if frm.index != pos:
                raise InvariantViolation(
                    f"frame at position {pos} carries index {frm.index}"
                )
        n_points = len(self.cloud)
        for query in queries:
            if query.gt_mask is not None and len(query.gt_mask):
                if query.gt_mask[0] < 0 or query.gt_mask[-1] >= n_points:
                    raise InvariantViolation(
                        f"query {query.id}: ground-truth ids outside the cloud"
                    )
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "queries", queries)


def scenes_equal(a: Scene, b: Scene) -> bool:
    """Exact equality, including image bytes and coordinates."""
    if a.id != b.id or len(a.frames) != len(b.frames) or len(a.queries) != len(b.queries):
        return False
    if not np.array_equal(a.cloud.points, b.cloud.points):
        return False
    for fa, fb in zip(a.frames, b.frames):
        if fa.index != fb.index or fa.timestamp != fb.timestamp or fa.camera != fb.camera:
            return False
        if not (
            np.array_equal(fa.color, fb.color)
            and np.array_equal(fa.depth, fb.depth)
            and np.array_equal(fa.pose, fb.pose)
        ):
            return False
    for qa, qb in zip(a.queries, b.queries):
        if qa.id != qb.id or qa.text != qb.text:
            return False
        if (qa.gt_mask is None) != (qb.gt_mask is None):
            return False
        if qa.gt_mask is not None and not np.array_equal(qa.gt_mask, qb.gt_mask):
            return False
    return True


# ---------------------------------------------------------------------------
# PLY


def write_ply(path: Path, points: np.ndarray, colors: Optional[np.ndarray] = None) -> None:
    """Binary little-endian PLY with float32 xyz and optional uint8 rgb."""
    pts = np.asarray(points, dtype="<f4")
    header = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {pts.shape[0]}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            if colors is None:
                fh.write(np.ascontiguousarray(pts).tobytes())
            else:
                rec = np.empty(pts.shape[0], dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
                rec["xyz"] = pts
                rec["rgb"] = np.asarray(colors, dtype=np.uint8)
                fh.write(rec.tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_ply(path: Path) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Read the PLY layouts produced by write_ply."""
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise MissingFile(str(path)) from None
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise SchemaViolation(f"{path}: not a PLY file")
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    count = None
    props = []
    for line in lines:
        parts = line.split()
        if parts[:2] == ["format", "binary_little_endian"]:
            continue
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts and parts[0] == "property":
            props.append((parts[1], parts[2]))
    if count is None:
        raise SchemaViolation(f"{path}: missing vertex element")
    if props[:3] != [("float", "x"), ("float", "y"), ("float", "z")]:
        raise SchemaViolation(f"{path}: expected float x/y/z properties")
    has_rgb = props[3:6] == [("uchar", "red"), ("uchar", "green"), ("uchar", "blue")]
    if len(props) not in (3, 6) or (len(props) == 6 and not has_rgb):
        raise SchemaViolation(f"{path}: unsupported property layout")
    body = data[end + len(b"end_header\n"):]
    if has_rgb:
        rec = np.frombuffer(body, dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)], count=count)
        return rec["xyz"].astype(np.float32), rec["rgb"].copy()
    pts = np.frombuffer(body, dtype="<f4", count=count * 3).reshape(count, 3)
    return pts.astype(np.float32), None


# ---------------------------------------------------------------------------
# Depth and color images


def _write_color(path: Path, color: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(color)).save(path, format="PNG")


def _read_color(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode != "RGB":
            raise SchemaViolation(f"{path}: color PNG must be 8-bit RGB")
        return np.asarray(img, dtype=np.uint8)


def depth_from_millimeters(mm: np.ndarray) -> np.ndarray:
    """Millimeter-integer depth to float32 meters; shared with the synthesizer
    so rendered and reloaded depths are bit-identical."""
    return (np.asarray(mm).astype(np.float32) / np.float32(1000.0)).astype(np.float32)


def _write_depth(path: Path, depth_m: np.ndarray) -> None:
    mm = np.round(np.asarray(depth_m, dtype=np.float64) * 1000.0)
    if mm.min() < 0 or mm.max() > np.iinfo(np.uint16).max:
        raise InvariantViolation(f"{path}: depth outside the 16-bit millimeter range")
    Image.fromarray(mm.astype(np.uint16)).save(path, format="PNG")


def _read_depth(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode not in ("I;16", "I"):
            raise SchemaViolation(f"{path}: depth PNG must be 16-bit grayscale")
        mm = np.asarray(img, dtype=np.uint32)
    if mm.max(initial=0) > np.iinfo(np.uint16).max:
        raise SchemaViolation(f"{path}: depth values exceed 16 bits")
    return depth_from_millimeters(mm)


# ---------------------------------------------------------------------------
# Manifest


def _require(record: dict, key: str, context: str):
    if key not in record:
        raise SchemaViolation(f"{context}.{key} missing")
    return record[key]


def _frame_paths(index: int) -> tuple[str, str]:
    return f"frames/{index:06d}.color.png", f"frames/{index:06d}.depth.png"


def save_scene(scene: Scene, root_path) -> None:
    """Write a scene directory; load_scene(root) reproduces it exactly."""
    root = Path(root_path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        (root / "frames").mkdir(exist_ok=True)
        frame_records = []
        for frm in scene.frames:
            color_rel, depth_rel = _frame_paths(frm.index)
            _write_color(root / color_rel, frm.color)
            _write_depth(root / depth_rel, frm.depth)
            cam = frm.camera
            frame_records.append(
                {
                    "index": frm.index,
                    "timestamp_s": frm.timestamp,
                    "color": color_rel,
                    "depth": depth_rel,
                    "intrinsics": {
                        "fx": cam.fx,
                        "fy": cam.fy,
                        "cx": cam.cx,
                        "cy": cam.cy,
                        "width": cam.width,
                        "height": cam.height,
                    },
                    "pose_c2w": [float(v) for v in np.asarray(frm.pose).ravel()],
                }
            )
        query_records = []
        for query in scene.queries:
            gt_rel = None
            if query.gt_mask is not None:
                gt_rel = f"gt/{query.id}.ids"
                (root / "gt").mkdir(exist_ok=True)
                (root / gt_rel).write_text(
                    "".join(f"{int(i)}\n" for i in query.gt_mask), encoding="ascii"
                )
            query_records.append({"id": query.id, "text": query.text, "gt_mask": gt_rel})
        write_ply(root / "cloud.ply", scene.cloud.points)
        manifest = {
            "scene_id": scene.id,
            "frames": frame_records,
            "queries": query_records,
        }
        (root / "manifest.json").write_text(
            json.dumps(manifest, indent=2) + "\n", encoding="utf-8"
        )
    except OSError as exc:
        raise IoFailure(f"cannot write scene to {root}: {exc}") from exc


def load_scene(root_path) -> Scene:
    """Load and validate a scene directory.

    Frames are ordered by timestamp; any manifest schema problem raises
    SchemaViolation naming the offending field, a listed-but-absent file
    raises MissingFile with its scene-relative path, and structural problems
    (poses, timestamps, ground-truth ids) raise InvariantViolation.
    """
    root = Path(root_path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise MissingFile("manifest.json")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"manifest.json: {exc}") from exc

    scene_id = _require(manifest, "scene_id", "manifest")
    frame_records = _require(manifest, "frames", "manifest")
    query_records = manifest.get("queries", [])
    if not isinstance(frame_records, list) or not frame_records:
        raise SchemaViolation("manifest.frames must be a non-empty list")

    if not (root / "cloud.ply").is_file():
        raise MissingFile("cloud.ply")
    points, _ = read_ply(root / "cloud.ply")
    cloud = PointCloud(points)

    frames = []
    for pos, record in enumerate(frame_records):
        ctx = f"frames[{pos}]"
        index = int(_require(record, "index", ctx))
        timestamp = float(_require(record, "timestamp_s", ctx))
        color_rel = _require(record, "color", ctx)
        depth_rel = _require(record, "depth", ctx)
        intr = _require(record, "intrinsics", ctx)
        pose_values = _require(record, "pose_c2w", ctx)
        for key in ("fx", "fy", "cx", "cy", "width", "height"):
            _require(intr, key, f"{ctx}.intrinsics")
        if len(pose_values) != 16:
            raise SchemaViolation(f"{ctx}.pose_c2w must hold 16 floats")
        for rel in (color_rel, depth_rel):
            if not (root / rel).is_file():
                raise MissingFile(rel)
        camera = CameraModel(
            fx=float(intr["fx"]),
            fy=float(intr["fy"]),
            cx=float(intr["cx"]),
            cy=float(intr["cy"]),
            width=int(intr["width"]),
            height=int(intr["height"]),
        )
        frames.append(
            Frame(
                index=index,
                timestamp=timestamp,
                color=_read_color(root / color_rel),
                depth=_read_depth(root / depth_rel),
                camera=camera,
                pose=np.asarray(pose_values, dtype=np.float64).reshape(4, 4),
            )
        )
    frames.sort(key=lambda f: f.timestamp)

    queries = []
    for pos, record in enumerate(query_records):
        ctx = f"queries[{pos}]"
        qid = _require(record, "id", ctx)
        text = _require(record, "text", ctx)
        gt_rel = record.get("gt_mask")
        gt_ids = None
        if gt_rel is not None:
            gt_path = root / gt_rel
            if not gt_path.is_file():
                raise MissingFile(str(gt_rel))
            try:
                gt_ids = np.asarray(
                    [int(line) for line in gt_path.read_text().split()], dtype=np.int64
                )
            except ValueError as exc:
                raise SchemaViolation(f"{gt_rel}: {exc}") from exc
        queries.append(TaskQuery(id=str(qid), text=str(text), gt_mask=gt_ids))

    return Scene(id=str(scene_id), cloud=cloud, frames=tuple(frames), queries=tuple(queries))


def discover_scene_dirs(root_path) -> list[Path]:
    """A directory is a scene if it holds manifest.json; otherwise scan children."""
    root = Path(root_path)
    if (root / "manifest.json").is_file():
        return [root]
    if not root.is_dir():
        raise MissingFile(str(root))
    found = sorted(p for p in root.iterdir() if (p / "manifest.json").is_file())
    if not found:
        raise MissingFile(f"{root}: no scene directories found")
    return found
