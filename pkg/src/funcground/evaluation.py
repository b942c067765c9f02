"""Instance-segmentation metrics over predicted versus ground-truth 3D masks.

Protocol: one prediction per query (possibly empty), ranked globally by the
prediction's confidence with ties broken by input order. A prediction is a
true positive at threshold theta when its IoU with the query's ground truth
is at least theta; average precision is the all-point-interpolated area
under the resulting precision-recall curve.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import MissingGroundTruth
from .lifting import Mask3D
from .pipeline import Backends, PipelineConfig, config_label, run_scene
from .scene_io import Scene

DEFAULT_THRESHOLDS = (0.25, 0.5)


def iou(pred_ids, gt_ids) -> float:
    """Set IoU over point ids; two empty sets count as a perfect match."""
    pred = set(int(i) for i in pred_ids)
    truth = set(int(i) for i in gt_ids)
    if not pred and not truth:
        return 1.0
    union = len(pred | truth)
    return len(pred & truth) / union


@dataclass(frozen=True)
class EvalRecord:
    query_id: str
    iou: float
    confidence: float
    tp_at: dict

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "iou": self.iou,
            "confidence": self.confidence,
            "tp_at": {str(k): bool(v) for k, v in self.tp_at.items()},
        }


@dataclass(frozen=True)
class EvalReport:
    ap25: float
    ap50: float
    ar25: float
    ar50: float
    miou: float
    per_query: tuple[EvalRecord, ...]
    config_fingerprint: str = ""

    def to_dict(self) -> dict:
        return {
            "ap25": self.ap25,
            "ap50": self.ap50,
            "ar25": self.ar25,
            "ar50": self.ar50,
            "miou": self.miou,
            "config_fingerprint": self.config_fingerprint,
            "per_query": [r.to_dict() for r in self.per_query],
        }


def average_precision(tp_ranked: Sequence[bool], positives: int) -> float:
    """All-point-interpolated AP over an already-ranked TP/FP sequence."""
    if positives <= 0:
        return 0.0
    flags = np.asarray(tp_ranked, dtype=bool)
    if flags.size == 0:
        return 0.0
    cumulative = np.cumsum(flags)
    precision = cumulative / np.arange(1, flags.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    for i in np.flatnonzero(flags):
        ap += envelope[i] / positives
    return float(ap)


def evaluate(
    results: Sequence[tuple[str, Mask3D, Optional[np.ndarray]]],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    config_fingerprint: str = "",
) -> EvalReport:
    """Score (query_id, prediction, ground-truth ids) triples.

    Every query must carry a ground-truth mask; MissingGroundTruth names the
    first query without one.
    """
    records = []
    for query_id, mask, gt in results:
        if gt is None:
            raise MissingGroundTruth(f"query {query_id} has no ground-truth mask")
        score = iou(mask.point_ids, gt)
        records.append(
            EvalRecord(
                query_id=query_id,
                iou=score,
                confidence=float(mask.confidence),
                tp_at={th: score >= th for th in thresholds},
            )
        )
    n = len(records)
    metrics: dict[float, tuple[float, float]] = {}
    order = sorted(range(n), key=lambda i: (-records[i].confidence, i))
    for th in thresholds:
        flags = [records[i].tp_at[th] for i in order]
        ap = average_precision(flags, n)
        ar = sum(flags) / n if n else 0.0
        metrics[th] = (ap, ar)
    miou = sum(r.iou for r in records) / n if n else 0.0
    return EvalReport(
        ap25=metrics.get(0.25, (0.0, 0.0))[0],
        ap50=metrics.get(0.5, (0.0, 0.0))[0],
        ar25=metrics.get(0.25, (0.0, 0.0))[1],
        ar50=metrics.get(0.5, (0.0, 0.0))[1],
        miou=miou,
        per_query=tuple(records),
        config_fingerprint=config_fingerprint,
    )


# ---------------------------------------------------------------------------
# Ablation grids and table formatting


def evaluate_runs(runs, config_fingerprint: str = "") -> EvalReport:
    """Score (query, result, mask) triples as produced by run_scene."""
    triples = [(q.id, mask, q.gt_mask) for q, _, mask in runs]
    return evaluate(triples, config_fingerprint=config_fingerprint)


def ablation_grid(
    scenes: Sequence[Scene],
    grid: Sequence[PipelineConfig],
    make_backends: Callable[[Scene], Backends],
    labels: Optional[Sequence[str]] = None,
) -> list[tuple[str, EvalReport]]:
    """One evaluation row per config over the whole scene set.

    ``make_backends`` builds the (chat, seg) pair for a scene, letting oracle
    backends bind to each scene's own ground truth.
    """
    per_config_runs: list[list] = [[] for _ in grid]
    for scene in scenes:
        backends = make_backends(scene)
        for pos, cfg in enumerate(grid):
            per_config_runs[pos].extend(run_scene(scene, cfg, backends))
    rows = []
    for pos, cfg in enumerate(grid):
        label = labels[pos] if labels else config_label(cfg)
        rows.append((label, evaluate_runs(per_config_runs[pos], cfg.fingerprint())))
    return rows


_COLUMNS = ("AP50", "AP25", "AR50", "AR25", "mIoU")


def _row_values(report: EvalReport) -> tuple[float, ...]:
    return (report.ap50, report.ap25, report.ar50, report.ar25, report.miou)


def format_report_table(rows: Sequence[tuple[str, EvalReport]]) -> str:
    """Aligned text table; metrics reported as percentages to 2 decimals."""
    label_width = max([len("Configuration")] + [len(label) for label, _ in rows])
    header = "Configuration".ljust(label_width) + "".join(f"{c:>9}" for c in _COLUMNS)
    lines = [header, "-" * len(header)]
    for label, report in rows:
        cells = "".join(f"{100.0 * v:>9.2f}" for v in _row_values(report))
        lines.append(label.ljust(label_width) + cells)
    return "\n".join(lines)


def report_csv_rows(rows: Sequence[tuple[str, EvalReport]]) -> list[str]:
    out = ["configuration,ap50,ap25,ar50,ar25,miou"]
    for label, report in rows:
        values = ",".join(f"{v:.6f}" for v in _row_values(report))
        out.append(f"\"{label}\",{values}")
    return out
