"""Two-stage grounding orchestration.

Stage 1 surveys the video in K shifted low-resolution passes, pools the
candidate frames that returned a valid frame index, and re-localizes at
native resolution across a dense temporal window around each candidate.
Stage 2 turns every collected point into a point-prompted mask, verifies
each mask visually, and hands the survivors to the lifting module.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    AllIterationsInvalid,
    BackendError,
    BackendUnavailable,
    EmptyResult,
    FineStageEmpty,
    FuncGroundError,
    MissingFrameIndex,
    NoValidCandidates,
    ParseFailure,
    PixelOutOfBounds,
)
from .images import resize
from .lifting import Mask3D, PointIndex, accumulate_votes, consensus
from .mllm import (
    ChatBackend,
    RetryPolicy,
    VerificationVerdict,
    build_round1_prompt,
    build_round2_prompt,
    chat,
    parse_affordance,
)
from .sampling import SamplingConfig, coarse_schedule, temporal_window
from .scene_io import Scene, TaskQuery
from .segmentation import SegBackend, VerifiedMask2D, segment, verify_mask


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of the grounding pipeline; defaults mirror the method's
    standard operating point (N=64, K=4, 512x384 survey, tau=0.7,
    verification on)."""

    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    seg_confidence: float = 0.5
    tau: float = 0.7
    enable_multisampling: bool = True
    enable_temporal_window: bool = True
    enable_verification: bool = True
    max_concurrency: int = 4
    overlay_alpha: float = 0.5
    max_fine_frames: int = 256
    max_response_tokens: int = 256
    temperature: float = 0.0
    normalize: str = "max"
    weight_by_score: bool = False
    epsilon: Optional[float] = None
    retry_attempts: int = 3
    retry_backoff_seconds: tuple[float, ...] = (1.0, 2.0, 4.0)

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau {self.tau} outside (0, 1]")
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        if self.max_fine_frames < 1:
            raise ValueError("max_fine_frames must be >= 1")

    @property
    def effective_iterations(self) -> int:
        return self.sampling.iterations if self.enable_multisampling else 1

    def retry_policy(self) -> RetryPolicy:
        return RetryPolicy(self.retry_attempts, tuple(self.retry_backoff_seconds))

    def to_dict(self) -> dict:
        return {
            "sampling": {
                "frames_per_iteration": self.sampling.frames_per_iteration,
                "iterations": self.sampling.iterations,
                "coarse_resolution": list(self.sampling.coarse_resolution),
                "offset_base": self.sampling.offset_base,
            },
            "seg_confidence": self.seg_confidence,
            "tau": self.tau,
            "enable_multisampling": self.enable_multisampling,
            "enable_temporal_window": self.enable_temporal_window,
            "enable_verification": self.enable_verification,
            "max_concurrency": self.max_concurrency,
            "overlay_alpha": self.overlay_alpha,
            "max_fine_frames": self.max_fine_frames,
            "max_response_tokens": self.max_response_tokens,
            "temperature": self.temperature,
            "normalize": self.normalize,
            "weight_by_score": self.weight_by_score,
            "epsilon": self.epsilon,
        }

    def fingerprint(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


def config_label(cfg: PipelineConfig) -> str:
    """Row label in the ablation-table style, e.g. "K=4, verify"."""
    label = f"K={cfg.effective_iterations}"
    if not cfg.enable_temporal_window:
        label += ", no window"
    label += ", verify" if cfg.enable_verification else ", no verify"
    return label


@dataclass(frozen=True)
class Backends:
    chat: ChatBackend
    seg: SegBackend


@dataclass
class CoarseCandidate:
    """One survey iteration's answer; invalid ones carry why."""

    iteration: int
    functional_object: str
    frame_index: Optional[int]
    point: Optional[tuple[int, int]]
    valid: bool
    note: str = ""


@dataclass
class QueryTrace:
    """Wall-clock per stage plus raw model I/O, attached to every result."""

    query_id: str
    timings: dict = field(default_factory=dict)
    events: list = field(default_factory=list)
    failure: Optional[str] = None

    def add_event(self, kind: str, **payload) -> None:
        self.events.append({"kind": kind, **payload})

    def to_dict(self, include_events: bool = True) -> dict:
        out = {
            "query_id": self.query_id,
            "timings_s": {k: round(v, 6) for k, v in self.timings.items()},
            "failure": self.failure,
        }
        if include_events:
            out["events"] = self.events
        return out


@dataclass
class GroundingResult:
    query_id: str
    resolved_object: Optional[str]
    per_frame_points: dict
    verified_masks: list
    trace: QueryTrace


class SceneRuntime:
    """Per-scene caches shared across queries: the spatial index and the
    downscaled survey frames. Safe for concurrent queries."""

    def __init__(self, scene: Scene, epsilon: Optional[float] = None):
        self.scene = scene
        self.index = PointIndex.build(scene.cloud, epsilon=epsilon)
        self._coarse: dict = {}
        self._lock = threading.Lock()

    def coarse_frame(self, frame_index: int, size: tuple[int, int]) -> np.ndarray:
        key = (frame_index, tuple(size))
        with self._lock:
            cached = self._coarse.get(key)
        if cached is not None:
            return cached
        image = resize(self.scene.frames[frame_index].color, size)
        with self._lock:
            self._coarse.setdefault(key, image)
        return image


def _ordered_unique(values: Sequence[int]) -> list[int]:
    seen = set()
    out = []
    for v in values:
        if v not in seen:
            seen.add(v)
            out.append(v)
    return out


def run_coarse(
    scene: Scene,
    query: TaskQuery,
    cfg: PipelineConfig,
    chat_backend: ChatBackend,
    runtime: Optional[SceneRuntime] = None,
    trace: Optional[QueryTrace] = None,
    sleep=time.sleep,
) -> list[CoarseCandidate]:
    """Survey round: one candidate per iteration, invalid ones flagged.

    A candidate is valid exactly when the response named a frame index that
    was among the attached frames. Raises AllIterationsInvalid when no
    iteration produced a valid candidate.
    """
    runtime = runtime or SceneRuntime(scene, epsilon=cfg.epsilon)
    sampling = cfg.sampling if cfg.enable_multisampling else replace(cfg.sampling, iterations=1)
    retry = cfg.retry_policy()
    frame_count = len(scene.frames)
    candidates = []
    for k in range(1, sampling.iterations + 1):
        schedule = coarse_schedule(frame_count, sampling, k)
        unique_indices = _ordered_unique(schedule.indices)
        tagged = [
            (i, runtime.coarse_frame(i, sampling.coarse_resolution)) for i in unique_indices
        ]
        request = build_round1_prompt(
            query.text,
            tagged,
            max_response_tokens=cfg.max_response_tokens,
            temperature=cfg.temperature,
        )
        try:
            text = chat(chat_backend, request, retry=retry, sleep=sleep)
        except (BackendUnavailable, BackendError) as exc:
            candidates.append(CoarseCandidate(k, "", None, None, False, type(exc).__name__))
            if trace:
                trace.add_event("coarse_error", iteration=k, error=f"{type(exc).__name__}: {exc}")
            continue
        if trace:
            trace.add_event(
                "coarse_response", iteration=k, prompt=request.text_parts[0],
                frames=unique_indices, response=text,
            )
        try:
            parsed = parse_affordance(text, expect_frame=True, image_dims=sampling.coarse_resolution)
        except (ParseFailure, MissingFrameIndex) as exc:
            candidates.append(CoarseCandidate(k, "", None, None, False, type(exc).__name__))
            continue
        in_range = parsed.frame_index in set(unique_indices)
        point = parsed.points[0] if parsed.points else None
        candidates.append(
            CoarseCandidate(
                iteration=k,
                functional_object=parsed.functional_object,
                frame_index=parsed.frame_index,
                point=point,
                valid=in_range,
                note="" if in_range else "frame index not among attached frames",
            )
        )
    if not any(c.valid for c in candidates):
        raise AllIterationsInvalid(
            f"query {query.id}: no valid candidate across {sampling.iterations} iterations",
            candidates,
        )
    return candidates


def resolve_object_name(candidates: Sequence[CoarseCandidate]) -> str:
    """Mode of the (already case-normalized) names over valid candidates;
    ties break toward the name seen at the lowest iteration."""
    valid = [c for c in candidates if c.valid]
    if not valid:
        raise NoValidCandidates("no valid coarse candidates to resolve")
    counts: dict[str, int] = {}
    first_seen: dict[str, int] = {}
    for cand in valid:
        counts[cand.functional_object] = counts.get(cand.functional_object, 0) + 1
        first_seen.setdefault(cand.functional_object, cand.iteration)
    best = max(counts, key=lambda name: (counts[name], -first_seen[name]))
    return best


def rescale_point(point: tuple[int, int], src: tuple[int, int], dst: tuple[int, int]) -> tuple[int, int]:
    """Map a pixel between resolutions, preserving relative position."""
    x = min(dst[0] - 1, int(point[0] * dst[0] / src[0]))
    y = min(dst[1] - 1, int(point[1] * dst[1] / src[1]))
    return x, y


def run_fine(
    scene: Scene,
    query: TaskQuery,
    candidates: Sequence[CoarseCandidate],
    cfg: PipelineConfig,
    chat_backend: ChatBackend,
    trace: Optional[QueryTrace] = None,
    sleep=time.sleep,
) -> dict[int, list[tuple[int, int]]]:
    """Refinement round over the temporal windows of all valid candidates.

    Frames shared by overlapping windows are queried once, owned by the
    lowest-iteration window; each frame is asked with that window's own
    object name. Raises FineStageEmpty when no frame yields a point.
    """
    valid = [c for c in candidates if c.valid]
    if not valid:
        raise NoValidCandidates("fine stage needs at least one valid candidate")
    owners: dict[int, str] = {}
    for cand in sorted(valid, key=lambda c: c.iteration):
        if cfg.enable_temporal_window:
            window = temporal_window(scene.frames, cand.frame_index, cfg.sampling, cand.iteration)
            indices = list(window.frame_indices)
        else:
            indices = [cand.frame_index]
        for j in indices:
            owners.setdefault(j, cand.functional_object)
    frames = sorted(owners)
    if len(frames) > cfg.max_fine_frames:
        step_count = cfg.max_fine_frames
        frames = [frames[(i * len(frames)) // step_count] for i in range(step_count)]
    retry = cfg.retry_policy()

    def ask(frame_index: int) -> list[tuple[int, int]]:
        frame = scene.frames[frame_index]
        request = build_round2_prompt(
            query.text,
            owners[frame_index],
            (frame_index, frame.color),
            temperature=cfg.temperature,
        )
        try:
            text = chat(chat_backend, request, retry=retry, sleep=sleep)
            parsed = parse_affordance(
                text, expect_frame=False, image_dims=(frame.camera.width, frame.camera.height)
            )
        except (BackendUnavailable, BackendError, ParseFailure) as exc:
            if trace:
                trace.add_event("fine_skip", frame=frame_index, error=f"{type(exc).__name__}: {exc}")
            return []
        if trace:
            trace.add_event(
                "fine_response", frame=frame_index, prompt=request.text_parts[0],
                response=text,
            )
        return list(parsed.points)

    per_frame: dict[int, list[tuple[int, int]]] = {}
    with ThreadPoolExecutor(max_workers=cfg.max_concurrency) as pool:
        for frame_index, points in zip(frames, pool.map(ask, frames)):
            if points:
                per_frame[frame_index] = points
    if not per_frame:
        raise FineStageEmpty(f"query {query.id}: no frame yielded an affordance point")
    return per_frame


def run_stage2(
    scene: Scene,
    per_frame_points: dict[int, list[tuple[int, int]]],
    resolved_object: str,
    cfg: PipelineConfig,
    backends: Backends,
    trace: Optional[QueryTrace] = None,
    sleep=time.sleep,
) -> list[VerifiedMask2D]:
    """Segment every point and keep masks that pass verification.

    With verification disabled every above-threshold mask survives. Soft
    failures (no mask, backend errors) skip the point; the result may be
    empty.
    """
    items = [(j, p) for j in sorted(per_frame_points) for p in per_frame_points[j]]
    retry = cfg.retry_policy()

    def work(item) -> Optional[VerifiedMask2D]:
        frame_index, point = item
        image = scene.frames[frame_index].color
        try:
            masks = segment(
                backends.seg,
                image,
                point,
                frame_index=frame_index,
                confidence_threshold=cfg.seg_confidence,
                retry=retry,
                sleep=sleep,
            )
        except (EmptyResult, BackendUnavailable, BackendError, PixelOutOfBounds) as exc:
            if trace:
                trace.add_event(
                    "segment_skip", frame=frame_index, point=list(point),
                    error=f"{type(exc).__name__}: {exc}",
                )
            return None
        best = masks[0]
        if not cfg.enable_verification:
            verdict = VerificationVerdict("YES", "(verification disabled)")
            return VerifiedMask2D(best, verdict, resolved_object)
        return verify_mask(
            backends.chat, image, best, resolved_object,
            alpha=cfg.overlay_alpha, retry=retry, sleep=sleep,
        )

    with ThreadPoolExecutor(max_workers=cfg.max_concurrency) as pool:
        outcomes = list(pool.map(work, items))
    kept = []
    for outcome in outcomes:
        if outcome is None:
            continue
        if outcome.verdict.is_yes:
            kept.append(outcome)
        elif trace:
            trace.add_event(
                "mask_rejected", frame=outcome.mask.frame_index,
                point=list(outcome.mask.prompt_point),
            )
    return kept


def run_query(
    scene: Scene,
    query: TaskQuery,
    cfg: PipelineConfig,
    backends: Backends,
    runtime: Optional[SceneRuntime] = None,
    sleep=time.sleep,
) -> tuple[GroundingResult, Mask3D]:
    """Full pipeline for one query; soft-fails to an empty 3D mask.

    Any stage that cannot proceed (no valid survey candidate, no fine-stage
    points) downgrades to an empty mask with the reason recorded in the
    trace, so one query can never abort a batch.
    """
    runtime = runtime or SceneRuntime(scene, epsilon=cfg.epsilon)
    trace = QueryTrace(query_id=query.id)
    resolved = None
    per_frame: dict = {}
    verified: list = []
    mask = Mask3D.empty()
    t_start = time.perf_counter()
    try:
        t0 = time.perf_counter()
        candidates = run_coarse(scene, query, cfg, backends.chat, runtime, trace, sleep)
        resolved = resolve_object_name(candidates)
        trace.timings["coarse_s"] = time.perf_counter() - t0
        trace.add_event(
            "candidates",
            resolved_object=resolved,
            candidates=[
                {
                    "iteration": c.iteration,
                    "object": c.functional_object,
                    "frame": c.frame_index,
                    "point": list(c.point) if c.point else None,
                    "point_native": list(
                        rescale_point(
                            c.point,
                            cfg.sampling.coarse_resolution,
                            (scene.frames[0].camera.width, scene.frames[0].camera.height),
                        )
                    )
                    if c.point
                    else None,
                    "valid": c.valid,
                    "note": c.note,
                }
                for c in candidates
            ],
        )

        t0 = time.perf_counter()
        per_frame = run_fine(scene, query, candidates, cfg, backends.chat, trace, sleep)
        trace.timings["fine_s"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        verified = run_stage2(scene, per_frame, resolved, cfg, backends, trace, sleep)
        trace.timings["stage2_s"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        heatmap = accumulate_votes(
            scene, verified, epsilon=cfg.epsilon, index=runtime.index,
            weight_by_score=cfg.weight_by_score,
        )
        mask = consensus(heatmap, cfg.tau, mode=cfg.normalize)
        trace.timings["lift_s"] = time.perf_counter() - t0
    except (AllIterationsInvalid, NoValidCandidates, FineStageEmpty) as exc:
        trace.failure = f"{type(exc).__name__}: {exc}"
    trace.timings["total_s"] = time.perf_counter() - t_start
    result = GroundingResult(
        query_id=query.id,
        resolved_object=resolved,
        per_frame_points=per_frame,
        verified_masks=verified,
        trace=trace,
    )
    return result, mask


def run_scene(
    scene: Scene,
    cfg: PipelineConfig,
    backends: Backends,
    runtime: Optional[SceneRuntime] = None,
    parallel_queries: int = 1,
    sleep=time.sleep,
) -> list[tuple[TaskQuery, GroundingResult, Mask3D]]:
    """Run every query of a scene against one shared runtime."""
    runtime = runtime or SceneRuntime(scene, epsilon=cfg.epsilon)

    def one(query: TaskQuery):
        result, mask = run_query(scene, query, cfg, backends, runtime, sleep)
        return query, result, mask

    if parallel_queries > 1:
        with ThreadPoolExecutor(max_workers=parallel_queries) as pool:
            return list(pool.map(one, scene.queries))
    return [one(q) for q in scene.queries]
