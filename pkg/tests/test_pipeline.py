from __future__ import annotations

import time
from dataclasses import replace

import numpy as np
import pytest

from funcground import iou
from funcground.errors import AllIterationsInvalid, BackendUnavailable, NoValidCandidates
from funcground.pipeline import (
    Backends,
    CoarseCandidate,
    PipelineConfig,
    SceneRuntime,
    config_label,
    rescale_point,
    resolve_object_name,
    run_coarse,
    run_fine,
    run_query,
    run_scene,
    run_stage2,
)
from funcground.sampling import SamplingConfig
from funcground.synth import (
    OracleChatBackend,
    OracleSegBackend,
    VisibilityRule,
    generate,
    random_spec,
)

from .conftest import fast_config


def candidate(iteration, name, frame, valid=True):
    return CoarseCandidate(iteration, name, frame, (0, 0), valid)


class CountingChat:
    def __init__(self, inner):
        self.inner = inner
        self.round2_frames = []

    def complete(self, request):
        text = request.text_parts[0]
        if "Identify the affordance point on the [" in text:
            tag = request.image_parts[0].tag
            self.round2_frames.append(int(tag.split()[1].rstrip(">:")))
        return self.inner.complete(request)


class BreakIteration:
    """Corrupts the survey response for chosen call ordinals."""

    def __init__(self, inner, broken_calls=(2,)):
        self.inner = inner
        self.broken = set(broken_calls)
        self.survey_calls = 0

    def complete(self, request):
        if "complete three tasks" in request.text_parts[0]:
            self.survey_calls += 1
            if self.survey_calls in self.broken:
                return "the scene is unclear to me"
        return self.inner.complete(request)


class TestRunCoarse:
    def test_all_iterations_valid_with_oracle(self, small_world, small_runtime):
        scene, script, backends = small_world
        cfg = fast_config()
        query = scene.queries[0]
        candidates = run_coarse(scene, query, cfg, backends.chat, small_runtime)
        assert len(candidates) == 2
        assert all(c.valid for c in candidates)
        assert all(c.functional_object == script.query_label[query.id] for c in candidates)

    def test_broken_iteration_flagged_others_retained(self, small_world, small_runtime):
        scene, script, backends = small_world
        cfg = fast_config()
        chat = BreakIteration(backends.chat, broken_calls=(2,))
        candidates = run_coarse(scene, scene.queries[0], cfg, chat, small_runtime)
        assert [c.valid for c in candidates] == [True, False]
        assert candidates[1].note == "ParseFailure"

    def test_all_invalid_raises(self, small_world, small_runtime):
        scene, _, backends = small_world
        cfg = fast_config()
        chat = BreakIteration(backends.chat, broken_calls=(1, 2))
        with pytest.raises(AllIterationsInvalid) as info:
            run_coarse(scene, scene.queries[0], cfg, chat, small_runtime)
        assert len(info.value.candidates) == 2

    def test_multisampling_disabled_single_candidate(self, small_world, small_runtime):
        scene, _, backends = small_world
        cfg = fast_config(enable_multisampling=False)
        candidates = run_coarse(scene, scene.queries[0], cfg, backends.chat, small_runtime)
        assert len(candidates) == 1


class TestResolveObjectName:
    def test_mode(self):
        names = ["knob", "knob", "handle", "knob"]
        cands = [candidate(i + 1, n, 0) for i, n in enumerate(names)]
        assert resolve_object_name(cands) == "knob"

    def test_single(self):
        assert resolve_object_name([candidate(1, "latch", 0)]) == "latch"

    def test_tie_breaks_to_lowest_iteration(self):
        cands = [candidate(1, "switch", 0), candidate(2, "button", 1)]
        assert resolve_object_name(cands) == "switch"

    def test_invalid_only_raises(self):
        with pytest.raises(NoValidCandidates):
            resolve_object_name([candidate(1, "x", None, valid=False)])


class TestRunFine:
    def test_overlapping_windows_queried_once(self, small_world):
        scene, script, backends = small_world
        cfg = fast_config()
        query = scene.queries[0]
        label = script.query_label[query.id]
        cands = [candidate(1, label, 10), candidate(2, label, 11)]
        chat = CountingChat(backends.chat)
        from funcground.sampling import temporal_window

        expected = set()
        for c in cands:
            expected.update(temporal_window(scene.frames, c.frame_index, cfg.sampling, c.iteration).frame_indices)
        run_fine(scene, query, cands, cfg, chat)
        assert sorted(chat.round2_frames) == sorted(expected)
        assert len(chat.round2_frames) == len(set(chat.round2_frames))

    def test_window_disabled_queries_exactly_candidates(self, small_world):
        scene, script, backends = small_world
        cfg = fast_config(enable_temporal_window=False)
        query = scene.queries[0]
        label = script.query_label[query.id]
        cands = [candidate(1, label, 8), candidate(2, label, 20)]
        chat = CountingChat(backends.chat)
        run_fine(scene, query, cands, cfg, chat)
        assert sorted(chat.round2_frames) == [8, 20]

    def test_max_fine_frames_subsamples(self, small_world):
        scene, script, backends = small_world
        cfg = fast_config(enable_temporal_window=False, max_fine_frames=3)
        query = scene.queries[0]
        label = script.query_label[query.id]
        cands = [candidate(k, label, 5 * k) for k in range(1, 7)]
        chat = CountingChat(backends.chat)
        run_fine(scene, query, cands, cfg, chat)
        assert len(chat.round2_frames) == 3

    def test_refusal_frames_skipped(self):
        rule = VisibilityRule(default=0.0, overrides=((10, 1.0), (11, 1.0)))
        spec = random_spec(seed=5, n_parts=1, n_frames=30, image_size=(64, 48),
                           visibility=(("knob", rule),))
        scene, script = generate(spec)
        backends = Backends(chat=OracleChatBackend(script), seg=OracleSegBackend(script))
        cfg = fast_config(enable_temporal_window=False)
        query = scene.queries[0]
        cands = [candidate(1, "knob", 10), candidate(2, "knob", 25)]  # 25 invisible
        per_frame = run_fine(scene, query, cands, cfg, backends.chat)
        assert sorted(per_frame) == [10]


class TestRescalePoint:
    def test_round_trip_within_one_pixel(self):
        rng = np.random.default_rng(0)
        native, coarse = (192, 144), (512, 384)
        for _ in range(200):
            x = int(rng.integers(0, native[0]))
            y = int(rng.integers(0, native[1]))
            down = rescale_point((x, y), native, coarse)
            back = rescale_point(down, coarse, native)
            assert abs(back[0] - x) <= 1 and abs(back[1] - y) <= 1

    def test_relative_position_preserved(self):
        coarse, native = (512, 384), (192, 144)
        for x in (0, 100, 317, 511):
            mapped, _ = rescale_point((x, 0), coarse, native)
            assert abs(x / 512 - mapped / 192) <= 1 / 192


class TestRunStage2:
    def test_oversegmented_masks_filtered(self, small_world, small_runtime):
        scene, script, _ = small_world
        chat = OracleChatBackend(script)
        seg = OracleSegBackend(script, oversegment_rate=0.4, seed=3)
        label = sorted({lab for _, lab in seg.marked})[0]  # a label with marked cells
        marked_frames = sorted(f for f, lab in seg.marked if lab == label)
        clean_frames = [
            int(f) for f in script.visible_frames(label) if (int(f), label) not in seg.marked
        ]
        assert marked_frames and clean_frames
        per_frame = {
            f: [script.point_for(label, f)] for f in marked_frames[:2] + clean_frames[:2]
        }
        cfg = fast_config()
        kept = run_stage2(scene, per_frame, label, cfg, Backends(chat=chat, seg=seg))
        kept_frames = sorted(m.mask.frame_index for m in kept)
        assert kept_frames == sorted(clean_frames[:2])

    def test_filter_is_identity_when_verification_off(self, small_world, small_runtime):
        scene, script, _ = small_world
        label = script.labels[0]
        chat = OracleChatBackend(script)
        seg = OracleSegBackend(script, oversegment_rate=0.4, seed=3)
        frames = [int(f) for f in script.visible_frames(label)[:4]]
        per_frame = {f: [script.point_for(label, f)] for f in frames}
        cfg = fast_config(enable_verification=False)
        kept = run_stage2(scene, per_frame, label, cfg, Backends(chat=chat, seg=seg))
        assert sorted(m.mask.frame_index for m in kept) == frames
        assert all(m.verdict.is_yes for m in kept)

    def test_empty_when_all_below_threshold(self, small_world):
        scene, script, backends = small_world

        class WeakSeg:
            def segment(self, image, points):
                return [(mask, 0.2) for mask, _ in backends.seg.segment(image, points)]

        label = script.labels[0]
        frame = int(script.visible_frames(label)[0])
        per_frame = {frame: [script.point_for(label, frame)]}
        cfg = fast_config()
        kept = run_stage2(scene, per_frame, label, cfg, Backends(chat=backends.chat, seg=WeakSeg()))
        assert kept == []


class TestRunQuery:
    def test_full_oracle_recovers_ground_truth(self, small_world, small_runtime):
        scene, script, backends = small_world
        cfg = fast_config()
        for query in scene.queries:
            result, mask = run_query(scene, query, cfg, backends, small_runtime)
            assert result.trace.failure is None
            assert iou(mask.point_ids, query.gt_mask) >= 0.9
            assert set(result.trace.timings) >= {"coarse_s", "fine_s", "stage2_s", "lift_s", "total_s"}

    def test_failing_backend_yields_empty_mask_with_reason(self, small_world, small_runtime):
        scene, _, backends = small_world

        class DownChat:
            def complete(self, request):
                raise BackendUnavailable("connection refused")

        cfg = fast_config(retry_backoff_seconds=())
        result, mask = run_query(
            scene, scene.queries[0], cfg, Backends(chat=DownChat(), seg=backends.seg), small_runtime
        )
        assert len(mask) == 0
        assert "AllIterationsInvalid" in result.trace.failure
        events = [e for e in result.trace.events if e["kind"] == "coarse_error"]
        assert events and all("BackendUnavailable" in e["error"] for e in events)

    def test_determinism_across_runs_and_concurrency(self, small_world):
        scene, script, _ = small_world
        outputs = []
        for concurrency in (1, 4):
            backends = Backends(
                chat=OracleChatBackend(script), seg=OracleSegBackend(script, 0.3, 5)
            )
            runtime = SceneRuntime(scene)
            cfg = fast_config(max_concurrency=concurrency)
            run = [
                run_query(scene, q, cfg, backends, runtime)[1].point_ids.tolist()
                for q in scene.queries
            ]
            outputs.append(run)
        assert outputs[0] == outputs[1]

    def test_determinism_under_scrambled_completion_order(self, small_world):
        scene, script, _ = small_world

        class JitterChat:
            """Delays responses pseudo-randomly to scramble completion order."""

            def __init__(self, inner, seed):
                self.inner = inner
                self.rng = np.random.default_rng(seed)
                import threading

                self.lock = threading.Lock()

            def complete(self, request):
                with self.lock:
                    pause = float(self.rng.uniform(0, 0.003))
                time.sleep(pause)
                return self.inner.complete(request)

        results = []
        for seed in (1, 2):
            backends = Backends(
                chat=JitterChat(OracleChatBackend(script), seed), seg=OracleSegBackend(script)
            )
            runtime = SceneRuntime(scene)
            cfg = fast_config(max_concurrency=4)
            results.append(
                [run_query(scene, q, cfg, backends, runtime)[1].point_ids.tolist() for q in scene.queries]
            )
        assert results[0] == results[1]

    def test_batch_isolation(self, small_world):
        scene, script, _ = small_world
        poisoned_query = scene.queries[0]

        class PoisonedChat:
            """Fails only for one query's task text."""

            def __init__(self, inner):
                self.inner = inner

            def complete(self, request):
                if poisoned_query.text in request.text_parts[0]:
                    raise BackendUnavailable("poisoned")
                return self.inner.complete(request)

        cfg = fast_config(retry_backoff_seconds=())
        clean = Backends(chat=OracleChatBackend(script), seg=OracleSegBackend(script))
        solo = {
            q.id: run_query(scene, q, cfg, clean, SceneRuntime(scene))[1].point_ids.tolist()
            for q in scene.queries[1:]
        }
        poisoned = Backends(chat=PoisonedChat(OracleChatBackend(script)), seg=OracleSegBackend(script))
        runtime = SceneRuntime(scene)
        batch = run_scene(scene, cfg, poisoned, runtime)
        by_id = {q.id: (res, mask) for q, res, mask in batch}
        assert by_id[poisoned_query.id][0].trace.failure is not None
        for qid, expected_ids in solo.items():
            assert by_id[qid][1].point_ids.tolist() == expected_ids


@pytest.fixture(scope="module")
def sliver_world():
    """Part nearly invisible in the survey's best frame, fully visible across
    the rest of the temporal window around it."""
    n_frames = 40
    n = 8  # survey samples; schedule k=1 of K=1 lands on i*40//8
    center = 15  # in the K=1 schedule
    rule = VisibilityRule(
        default=0.0,
        overrides=tuple(
            [(center, 0.15)] + [(center + d, 1.0) for d in (-2, -1, 1, 2)]
        ),
    )
    spec = random_spec(seed=9, n_parts=1, n_frames=n_frames, image_size=(144, 108),
                       visibility=(("knob", rule),))
    scene, script = generate(spec)
    assert center in [((i + 1) * n_frames) // n for i in range(n)]
    backends = Backends(chat=OracleChatBackend(script), seg=OracleSegBackend(script))
    sampling = SamplingConfig(frames_per_iteration=n, iterations=1, coarse_resolution=(96, 72))
    return scene, script, backends, sampling


class TestWindowAblationFixture:
    """The temporal window must strictly help on the constructed fixture."""

    def test_window_on_strictly_beats_window_off(self, sliver_world):
        scene, script, backends, sampling = sliver_world
        query = scene.queries[0]
        scores = {}
        for window in (True, False):
            cfg = fast_config(sampling=sampling, enable_temporal_window=window)
            _, mask = run_query(scene, query, cfg, backends)
            scores[window] = iou(mask.point_ids, query.gt_mask)
        assert scores[True] > scores[False]
        assert scores[True] >= 0.9

    def test_window_never_decreases_iou_on_fixture(self, sliver_world):
        scene, script, backends, sampling = sliver_world
        for tau in (0.5, 0.7):
            on = fast_config(sampling=sampling, enable_temporal_window=True, tau=tau)
            off = fast_config(sampling=sampling, enable_temporal_window=False, tau=tau)
            query = scene.queries[0]
            _, mask_on = run_query(scene, query, on, backends)
            _, mask_off = run_query(scene, query, off, backends)
            assert iou(mask_on.point_ids, query.gt_mask) >= iou(mask_off.point_ids, query.gt_mask)


def test_config_label_styles():
    assert config_label(PipelineConfig()) == "K=4, verify"
    cfg = fast_config(enable_verification=False)
    assert config_label(cfg) == "K=2, no verify"
    cfg = fast_config(enable_temporal_window=False, enable_multisampling=False)
    assert config_label(cfg) == "K=1, no window, verify"


def test_config_validation_and_fingerprint():
    with pytest.raises(ValueError):
        PipelineConfig(tau=0.0)
    a, b = PipelineConfig(), PipelineConfig()
    assert a.fingerprint() == b.fingerprint()
    assert PipelineConfig(tau=0.5).fingerprint() != a.fingerprint()
