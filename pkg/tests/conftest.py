from __future__ import annotations

import pytest

from funcground import PipelineConfig, SceneRuntime
from funcground.pipeline import Backends
from funcground.sampling import SamplingConfig
from funcground.synth import OracleChatBackend, OracleSegBackend, generate, random_spec


def fast_config(**overrides) -> PipelineConfig:
    """Small survey settings so unit tests stay quick; semantics unchanged."""
    sampling = overrides.pop(
        "sampling",
        SamplingConfig(frames_per_iteration=16, iterations=2, coarse_resolution=(96, 72)),
    )
    return PipelineConfig(sampling=sampling, **overrides)


@pytest.fixture(scope="session")
def small_world():
    """One compact scene with its ground-truth script and oracle backends."""
    spec = random_spec(seed=7, n_parts=4, n_frames=40, image_size=(96, 72))
    scene, script = generate(spec)
    backends = Backends(chat=OracleChatBackend(script), seg=OracleSegBackend(script))
    return scene, script, backends


@pytest.fixture(scope="session")
def small_runtime(small_world):
    scene, _, _ = small_world
    return SceneRuntime(scene)
