"""Coarse frame-sampling schedules and dense temporal windows.

The survey round samples N frames per iteration at a shifted offset so that
successive iterations cover complementary slices of the video. The refinement
round expands a candidate frame into the contiguous run of frames whose
timestamps fall within half a sampling interval of it.
"""

from __future__ import annotations

from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from typing import Sequence

from .errors import IndexOutOfRange, InvalidIteration

OFFSET_BASES = ("zero", "one")


@dataclass(frozen=True)
class SamplingConfig:
    """Frame-selection knobs shared by both rounds.

    ``frames_per_iteration`` is the number of survey samples N, ``iterations``
    the number of shifted passes K, and ``coarse_resolution`` the (width,
    height) survey images are downscaled to. ``offset_base`` selects whether
    iteration offsets start at one interval ("one") or at zero ("zero", which
    makes the first iteration plain uniform sampling).
    """

    frames_per_iteration: int = 64
    iterations: int = 4
    coarse_resolution: tuple[int, int] = (512, 384)
    offset_base: str = "one"

    def __post_init__(self):
        if self.frames_per_iteration < 1:
            raise ValueError("frames_per_iteration must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.coarse_resolution[0] < 1 or self.coarse_resolution[1] < 1:
            raise ValueError("coarse_resolution must be positive")
        if self.offset_base not in OFFSET_BASES:
            raise ValueError(f"offset_base must be one of {OFFSET_BASES}")


@dataclass(frozen=True)
class SamplingSchedule:
    """Frame indices picked by one survey iteration."""

    iteration: int
    indices: tuple[int, ...]


@dataclass(frozen=True)
class TemporalWindow:
    """Contiguous frame range around a candidate frame."""

    source_iteration: int
    center_frame: int
    frame_indices: range
    half_span_seconds: float


def coarse_schedule(frame_count: int, cfg: SamplingConfig, iteration: int) -> SamplingSchedule:
    """Schedule for one survey iteration.

    Sample i of iteration k lands at floor((i-1)*L/N + k*L/(K*N)); the two
    fractions share the denominator K*N, so the whole expression is evaluated
    in exact integer arithmetic and then clamped into [0, L-1]. Duplicates
    after clamping are kept so every schedule has exactly N entries.
    """
    if frame_count < 1:
        raise ValueError("frame_count must be >= 1")
    n = cfg.frames_per_iteration
    k_total = cfg.iterations
    if not 1 <= iteration <= k_total:
        raise InvalidIteration(f"iteration {iteration} outside 1..{k_total}")
    offset = iteration if cfg.offset_base == "one" else iteration - 1
    denom = k_total * n
    indices = tuple(
        min(max((i * k_total + offset) * frame_count // denom, 0), frame_count - 1)
        for i in range(n)
    )
    return SamplingSchedule(iteration=iteration, indices=indices)


def all_schedules(frame_count: int, cfg: SamplingConfig) -> list[SamplingSchedule]:
    """One schedule per iteration, in iteration order."""
    return [coarse_schedule(frame_count, cfg, k) for k in range(1, cfg.iterations + 1)]


def temporal_window(
    frames: Sequence,
    center: int,
    cfg: SamplingConfig,
    iteration: int = 0,
) -> TemporalWindow:
    """Frames whose timestamps lie within +-dt/2 seconds of the center frame.

    dt is the survey sampling interval t_total / (N - 1). Both endpoints are
    inclusive. With N = 1 or a single-frame video the interval is undefined
    and the window degenerates to the center frame alone. ``frames`` is any
    sequence whose items expose a ``timestamp`` attribute in seconds.
    """
    count = len(frames)
    if not 0 <= center < count:
        raise IndexOutOfRange(f"center {center} outside 0..{count - 1}")
    if cfg.frames_per_iteration == 1 or count == 1:
        return TemporalWindow(iteration, center, range(center, center + 1), 0.0)
    timestamps = [f.timestamp for f in frames]
    t_total = timestamps[-1] - timestamps[0]
    half_span = t_total / (cfg.frames_per_iteration - 1) / 2.0
    t_center = timestamps[center]
    lo = bisect_left(timestamps, t_center - half_span)
    hi = bisect_right(timestamps, t_center + half_span) - 1
    return TemporalWindow(iteration, center, range(lo, hi + 1), half_span)
