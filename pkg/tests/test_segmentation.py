from __future__ import annotations

import numpy as np
import pytest

from funcground import rle, segmentation
from funcground.errors import (
    BackendUnavailable,
    DimensionMismatch,
    EmptyResult,
    PixelOutOfBounds,
)
from funcground.mllm import RetryPolicy
from funcground.segmentation import Mask2D, render_overlay, segment, verify_mask

NO_WAIT = RetryPolicy(attempts=3, backoff_seconds=())


def mask_with(pixels, width=8, height=6, frame=0, score=1.0, point=(0, 0)):
    xs = [p[0] for p in pixels]
    ys = [p[1] for p in pixels]
    return Mask2D(frame, rle.from_pixels(width, height, xs, ys), score, point)


class StaticSegBackend:
    def __init__(self, results):
        self.results = results
        self.calls = 0

    def segment(self, image, points):
        self.calls += 1
        return self.results


class TestRenderOverlay:
    def test_blend_arithmetic_half_alpha(self):
        image = np.full((6, 8, 3), 100, dtype=np.uint8)
        overlay = render_overlay(image, mask_with([(2, 3)]), alpha=0.5)
        assert tuple(overlay[3, 2]) == (178, 50, 50)

    def test_round_half_up(self):
        image = np.full((6, 8, 3), 101, dtype=np.uint8)
        overlay = render_overlay(image, mask_with([(0, 0)]), alpha=0.5)
        # 0.5*101 + 0.5*255 = 178.0 exactly; green 50.5 rounds up to 51
        assert tuple(overlay[0, 0]) == (178, 51, 51)

    def test_empty_mask_identity(self):
        image = np.random.default_rng(0).integers(0, 255, (6, 8, 3)).astype(np.uint8)
        overlay = render_overlay(image, mask_with([]), alpha=0.5)
        assert np.array_equal(overlay, image)

    def test_unmasked_pixels_untouched_and_shape_kept(self):
        image = np.random.default_rng(1).integers(0, 255, (6, 8, 3)).astype(np.uint8)
        overlay = render_overlay(image, mask_with([(1, 1), (4, 2)]), alpha=0.7)
        assert overlay.shape == image.shape
        touched = np.zeros((6, 8), dtype=bool)
        touched[1, 1] = touched[2, 4] = True
        assert np.array_equal(overlay[~touched], image[~touched])

    def test_default_alpha_is_half(self):
        image = np.full((6, 8, 3), 100, dtype=np.uint8)
        by_default = render_overlay(image, mask_with([(2, 3)]))
        explicit = render_overlay(image, mask_with([(2, 3)]), alpha=0.5)
        assert np.array_equal(by_default, explicit)

    def test_dimension_mismatch(self):
        image = np.zeros((5, 5, 3), dtype=np.uint8)
        with pytest.raises(DimensionMismatch):
            render_overlay(image, mask_with([(0, 0)]))

    def test_alpha_out_of_range(self):
        image = np.zeros((6, 8, 3), dtype=np.uint8)
        with pytest.raises(ValueError):
            render_overlay(image, mask_with([(0, 0)]), alpha=1.5)


class TestSegment:
    def image(self):
        return np.zeros((6, 8, 3), dtype=np.uint8)

    def test_threshold_drops_low_scores(self):
        low = rle.from_pixels(8, 6, [0], [0])
        high = rle.from_pixels(8, 6, [1], [1])
        backend = StaticSegBackend([(low, 0.3), (high, 0.7)])
        masks = segment(backend, self.image(), (1, 1), confidence_threshold=0.5)
        assert len(masks) == 1 and masks[0].score == 0.7

    def test_best_mask_first(self):
        a = rle.from_pixels(8, 6, [0], [0])
        b = rle.from_pixels(8, 6, [1], [0])
        backend = StaticSegBackend([(a, 0.6), (b, 0.9)])
        masks = segment(backend, self.image(), (1, 1))
        assert [m.score for m in masks] == [0.9, 0.6]

    def test_empty_result(self):
        backend = StaticSegBackend([(rle.from_pixels(8, 6, [0], [0]), 0.3)])
        with pytest.raises(EmptyResult):
            segment(backend, self.image(), (1, 1), confidence_threshold=0.5)

    def test_point_out_of_bounds(self):
        with pytest.raises(PixelOutOfBounds):
            segment(StaticSegBackend([]), self.image(), (8, 0))

    def test_dimension_mismatch_from_backend(self):
        backend = StaticSegBackend([(rle.from_pixels(4, 4, [0], [0]), 0.9)])
        with pytest.raises(DimensionMismatch):
            segment(backend, self.image(), (1, 1))

    def test_frame_index_recorded(self):
        backend = StaticSegBackend([(rle.from_pixels(8, 6, [2], [2]), 0.8)])
        masks = segment(backend, self.image(), (2, 2), frame_index=17)
        assert masks[0].frame_index == 17 and masks[0].prompt_point == (2, 2)


class AnswerBackend:
    def __init__(self, answer):
        self.answer = answer

    def complete(self, request):
        if isinstance(self.answer, Exception):
            raise self.answer
        return self.answer


class TestVerifyMask:
    def test_yes_verdict(self):
        image = np.full((6, 8, 3), 50, dtype=np.uint8)
        verified = verify_mask(AnswerBackend("YES"), image, mask_with([(1, 1)]), "knob")
        assert verified.verdict.is_yes and verified.object_name == "knob"

    def test_chat_failure_fails_closed(self):
        image = np.full((6, 8, 3), 50, dtype=np.uint8)
        backend = AnswerBackend(BackendUnavailable("down"))
        verified = verify_mask(backend, image, mask_with([(1, 1)]), "knob", retry=NO_WAIT)
        assert verified.verdict.verdict == "NO"
        assert "chat failed" in verified.verdict.raw_text

    def test_malformed_answer_fails_closed(self):
        image = np.full((6, 8, 3), 50, dtype=np.uint8)
        verified = verify_mask(AnswerBackend("hard to say!"), image, mask_with([(1, 1)]), "knob")
        assert verified.verdict.verdict == "NO"


def test_mask2d_score_bounds():
    with pytest.raises(ValueError):
        Mask2D(0, rle.from_pixels(4, 4, [0], [0]), 1.5, (0, 0))
