"""Center-distance detection scoring in the nuScenes style.

Detections are greedily matched, highest score first, to the nearest
unmatched ground truth of the same class within a distance threshold.
AP is the 101-point interpolated area under the precision envelope; mAP
averages AP over classes that have ground truth.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import CLASS_ORDER, Detection, ObjectAnnotation, ObjectClass, load_annotations, load_detections

RECALL_SAMPLES = np.linspace(0.0, 1.0, 101)


class EvaluationError(ValueError):
    pass


@dataclass
class ClassMatches:
    cls: ObjectClass
    detections: list[Detection] = field(default_factory=list)  # score-descending
    matched_gt: list[int | None] = field(default_factory=list)
    n_gt: int = 0

    @property
    def tp(self) -> int:
        return sum(m is not None for m in self.matched_gt)

    @property
    def unmatched_gt(self) -> int:
        return self.n_gt - self.tp


@dataclass
class MatchSet:
    per_class: dict[ObjectClass, ClassMatches]

    def merge(self, other: "MatchSet") -> "MatchSet":
        """Pool two match sets, re-sorting each class by the detection order."""
        out = {}
        for cls in CLASS_ORDER:
            a, b = self.per_class[cls], other.per_class[cls]
            pairs = list(zip(a.detections, a.matched_gt)) + [
                (d, None if m is None else m + a.n_gt) for d, m in zip(b.detections, b.matched_gt)
            ]
            pairs.sort(key=lambda p: detection_sort_key(p[0]))
            out[cls] = ClassMatches(cls, [p[0] for p in pairs], [p[1] for p in pairs], a.n_gt + b.n_gt)
        return MatchSet(out)

    @classmethod
    def empty(cls) -> "MatchSet":
        return cls({c: ClassMatches(c) for c in CLASS_ORDER})


def detection_sort_key(d: Detection):
    return (-d.score, d.center[0], d.center[1], d.center[2], d.cls.index)


def _distance(a: Sequence[float], b: Sequence[float], use_3d: bool) -> float:
    if use_3d:
        return math.dist(a, b)
    return math.hypot(a[0] - b[0], a[1] - b[1])


def match(
    detections: Sequence[Detection],
    annotations: Sequence[ObjectAnnotation],
    dist_threshold: float = 0.5,
    distance_3d: bool = False,
) -> MatchSet:
    out = {}
    for cls in CLASS_ORDER:
        dets = sorted((d for d in detections if d.cls is cls), key=detection_sort_key)
        gts = [g for g in annotations if g.cls is cls]
        taken = [False] * len(gts)
        matched: list[int | None] = []
        for d in dets:
            best, best_dist = None, math.inf
            for j, g in enumerate(gts):
                if taken[j]:
                    continue
                dist = _distance(d.center, g.center, distance_3d)
                if dist <= dist_threshold and dist < best_dist:
                    best, best_dist = j, dist
            if best is not None:
                taken[best] = True
            matched.append(best)
        out[cls] = ClassMatches(cls, dets, matched, len(gts))
    return MatchSet(out)


@dataclass
class PRCurve:
    cls: ObjectClass
    recall: np.ndarray
    precision: np.ndarray
    n_gt: int
    dist_threshold: float = 0.5


def pr_curve(matches: ClassMatches, dist_threshold: float = 0.5) -> PRCurve:
    tp_flags = np.array([m is not None for m in matches.matched_gt], dtype=np.float64)
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(1.0 - tp_flags)
    n_gt = matches.n_gt
    recall = tp / n_gt if n_gt > 0 else np.zeros_like(tp)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1.0), 0.0)
    return PRCurve(matches.cls, recall, precision, n_gt, dist_threshold)


def average_precision(pr: PRCurve) -> float:
    """101-point interpolated AP; NaN when the class has no ground truth."""
    if pr.n_gt == 0:
        return math.nan
    if len(pr.recall) == 0:
        return 0.0
    # precision envelope: best precision at any recall >= r
    env = np.maximum.accumulate(pr.precision[::-1])[::-1]
    idx = np.searchsorted(pr.recall, RECALL_SAMPLES, side="left")
    sampled = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(sampled.mean())


def mean_ap(aps: dict[ObjectClass, float]) -> float:
    vals = [v for v in aps.values() if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def class_aps(ms: MatchSet, dist_threshold: float = 0.5) -> dict[ObjectClass, float]:
    return {c: average_precision(pr_curve(ms.per_class[c], dist_threshold)) for c in CLASS_ORDER}


# ---------------------------------------------------------------------------
# Reports


@dataclass
class EvalReport:
    thresholds: list[float]
    class_ap: dict[float, dict[ObjectClass, float]]
    map: dict[float, float]
    predictions: int
    ground_truths: int
    scenes: int = 0
    multi_threshold: bool = False
    gt_per_class: dict[ObjectClass, int] = field(default_factory=dict)

    @property
    def primary_threshold(self) -> float:
        return self.thresholds[0]

    @property
    def mAP(self) -> float:
        """Headline number: the single-threshold mAP, or the threshold average in multi mode."""
        if self.multi_threshold:
            return float(np.mean([self.map[t] for t in self.thresholds]))
        return self.map[self.primary_threshold]

    def ap(self, cls: ObjectClass | str, threshold: float | None = None) -> float:
        return self.class_ap[self.primary_threshold if threshold is None else threshold][ObjectClass.parse(cls)]

    def to_dict(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v

        return {
            "mode": "multi_threshold" if self.multi_threshold else "single_threshold",
            "thresholds": self.thresholds,
            "mAP": clean(self.mAP),
            "predictions": self.predictions,
            "ground_truths": self.ground_truths,
            "scenes": self.scenes,
            "gt_per_class": {c.value: n for c, n in self.gt_per_class.items()},
            "per_threshold": {
                str(t): {
                    "mAP": clean(self.map[t]),
                    "AP": {c.value: clean(v) for c, v in self.class_ap[t].items()},
                }
                for t in self.thresholds
            },
        }

    def table(self) -> str:
        names = ["Reef_Ring", "Reef_Cone", "Tetrapod_B", "Tetrapod_S"]
        head = f"{'Threshold':<12}{'mAP':>6}{'Predictions':>13}" + "".join(f"{n:>12}" for n in names)
        lines = [head, "-" * len(head)]
        for t in self.thresholds:
            aps = self.class_ap[t]
            cells = "".join(
                f"{'n/a' if math.isnan(aps[c]) else format(aps[c], '.2f'):>12}" for c in CLASS_ORDER
            )
            m = self.map[t]
            lines.append(f"{t:<12g}{'n/a' if math.isnan(m) else format(m, '.2f'):>6}{self.predictions:>13}{cells}")
        if self.multi_threshold:
            lines.append(f"{'mean':<12}{self.mAP:>6.2f}")
        lines.append(f"ground truths: {self.ground_truths}  scenes: {self.scenes}")
        return "\n".join(lines)


def evaluate(
    detections_per_scene: Sequence[Sequence[Detection]],
    annotations_per_scene: Sequence[Sequence[ObjectAnnotation]],
    thresholds: Sequence[float] = (0.5,),
    distance_3d: bool = False,
    multi_threshold: bool = False,
) -> EvalReport:
    """Pool matches over scenes per class and threshold."""
    if len(detections_per_scene) != len(annotations_per_scene):
        raise EvaluationError("detections and annotations cover different scene counts")
    thresholds = [float(t) for t in thresholds]
    class_ap, maps = {}, {}
    for thr in thresholds:
        pooled = MatchSet.empty()
        for dets, gts in zip(detections_per_scene, annotations_per_scene):
            pooled = pooled.merge(match(dets, gts, thr, distance_3d))
        aps = class_aps(pooled, thr)
        class_ap[thr] = aps
        maps[thr] = mean_ap(aps)
    gt_per_class = {c: sum(1 for gts in annotations_per_scene for g in gts if g.cls is c) for c in CLASS_ORDER}
    return EvalReport(
        thresholds,
        class_ap,
        maps,
        predictions=sum(len(d) for d in detections_per_scene),
        ground_truths=sum(len(g) for g in annotations_per_scene),
        scenes=len(detections_per_scene),
        multi_threshold=multi_threshold,
        gt_per_class=gt_per_class,
    )


def _scene_files(d: Path) -> dict[str, Path]:
    return {p.name: p for p in sorted(d.glob("scene_*.json"))}


def evaluate_dataset(
    pred_dir: str | os.PathLike,
    gt_dir: str | os.PathLike,
    thresholds: Sequence[float] = (0.5,),
    distance_3d: bool = False,
    multi_threshold: bool = False,
    report_path: str | os.PathLike | None = None,
) -> EvalReport:
    """Score a directory of ``scene_####.json`` detections against ground truth."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds, gts = _scene_files(pred_dir), _scene_files(gt_dir)
    only_pred = sorted(set(preds) - set(gts))
    only_gt = sorted(set(gts) - set(preds))
    if only_pred or only_gt:
        parts = []
        if only_gt:
            parts.append(f"missing predictions for: {', '.join(only_gt)}")
        if only_pred:
            parts.append(f"no ground truth for: {', '.join(only_pred)}")
        raise EvaluationError("; ".join(parts))
    names = sorted(gts)
    dets = [_load_predictions(preds[n]) for n in names]
    anns = [load_annotations(gts[n]) for n in names]
    report = evaluate(dets, anns, thresholds, distance_3d, multi_threshold)
    if report_path is not None:
        write_report(report, report_path)
    return report


def _load_predictions(path: Path) -> list[Detection]:
    records = json.loads(path.read_text())
    # ground-truth files (no score) score as certain detections
    if records and all("score" not in r for r in records):
        return [Detection(a.cls, a.center, a.yaw, 1.0) for a in load_annotations(path)]
    return load_detections(path)


def write_report(report: EvalReport, path: str | os.PathLike) -> None:
    path = Path(path)
    path.write_text(json.dumps(report.to_dict(), indent=1) + "\n")
    path.with_suffix(".txt").write_text(report.table() + "\n")
