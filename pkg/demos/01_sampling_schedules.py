"""Survey schedules and temporal windows, step by step.

Shows how the K shifted sampling passes tile a video, and how a candidate
frame expands into its dense temporal window.
"""

from types import SimpleNamespace

from funcground import SamplingConfig, all_schedules, temporal_window

# A 10-second clip at 30 fps, surveyed with 16 samples per pass.
frame_count = 300
cfg = SamplingConfig(frames_per_iteration=16, iterations=4)

print(f"video: {frame_count} frames; N={cfg.frames_per_iteration}, K={cfg.iterations}\n")
for schedule in all_schedules(frame_count, cfg):
    head = ", ".join(str(i) for i in schedule.indices[:8])
    print(f"pass k={schedule.iteration}: [{head}, ...]")

union = sorted({i for s in all_schedules(frame_count, cfg) for i in s.indices})
print(f"\nunion of all passes: {len(union)} distinct frames "
      f"({len(union) / frame_count:.0%} of the video)")

# Expand a candidate frame into its window: every frame whose timestamp lies
# within half a sampling interval of the candidate.
frames = [SimpleNamespace(timestamp=i / 30.0) for i in range(frame_count)]
window = temporal_window(frames, center=150, cfg=cfg, iteration=2)
print(f"\nwindow around frame 150: frames {window.frame_indices.start}.."
      f"{window.frame_indices.stop - 1} (half span {window.half_span_seconds:.3f}s)")
