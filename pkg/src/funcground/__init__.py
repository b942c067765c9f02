"""funcground: grounding implicit natural-language tasks into 3D masks of
fine-grained functional parts, from posed RGB-D video.

The pipeline surveys a scene's video in several shifted low-resolution
passes, lets a vision-chat backend pick informative frames and affordance
points, refines them across dense temporal windows at native resolution,
segments each point prompt, verifies every mask as a red overlay, and lifts
the survivors onto the point cloud by multi-view vote consensus.

Model backends are pluggable; fully offline oracle backends derived from
synthetic ground truth live in :mod:`funcground.synth`.
"""

from .errors import FuncGroundError
from .lifting import Mask3D, PointIndex, accumulate_votes, backproject, consensus
from .pipeline import Backends, PipelineConfig, SceneRuntime, run_query, run_scene
from .sampling import SamplingConfig, all_schedules, coarse_schedule, temporal_window
from .scene_io import Scene, TaskQuery, load_scene, save_scene
from .evaluation import EvalReport, evaluate, iou

__version__ = "0.1.0"

__all__ = [
    "Backends",
    "EvalReport",
    "FuncGroundError",
    "Mask3D",
    "PipelineConfig",
    "PointIndex",
    "SamplingConfig",
    "Scene",
    "SceneRuntime",
    "TaskQuery",
    "accumulate_votes",
    "all_schedules",
    "backproject",
    "coarse_schedule",
    "consensus",
    "evaluate",
    "iou",
    "load_scene",
    "run_query",
    "run_scene",
    "save_scene",
    "temporal_window",
]
