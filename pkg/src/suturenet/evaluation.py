"""Point matching under a radius gate, PPV/TPR, and threshold sweeps.

Undefined ratios (zero denominators) are represented by ``nan`` and are
skipped when averaging across folds.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import heatmap as hm

MATCH_RADIUS = 6.0
UNDEFINED = float("nan")
ORACLE_MAX_POINTS = 8


@dataclass
class MatchResult:
    tp_pairs: list = field(default_factory=list)  # (pred index, gt index, distance)
    fp: list = field(default_factory=list)
    fn: list = field(default_factory=list)

    @property
    def tp(self):
        return len(self.tp_pairs)

    @property
    def counts(self):
        return len(self.tp_pairs), len(self.fp), len(self.fn)


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def add(self, result):
        tp, fp, fn = result.counts if isinstance(result, MatchResult) else result
        self.tp += tp
        self.fp += fp
        self.fn += fn
        return self


@dataclass
class CurvePoint:
    threshold: float
    ppv_mean: float
    ppv_min: float
    ppv_max: float
    tpr_mean: float
    tpr_min: float
    tpr_max: float


def _distances(pred, gt):
    pred, gt = hm.as_points(pred), hm.as_points(gt)
    if len(pred) == 0 or len(gt) == 0:
        return pred, gt, np.zeros((len(pred), len(gt)))
    d = np.sqrt(((pred[:, None, :] - gt[None, :, :]) ** 2).sum(-1))
    return pred, gt, d


def match(pred, gt, radius=MATCH_RADIUS):
    """Greedy least-distance one-to-one matching of predictions to ground truth.

    Candidate pairs closer than ``radius`` (strictly) are accepted in order of
    increasing distance, ties broken by prediction index then gt index.
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    pred, gt, d = _distances(pred, gt)
    pi, gi = np.nonzero(d < radius)
    # lexsort: last key is primary
    order = np.lexsort((gi, pi, d[pi, gi]))
    used_p, used_g = set(), set()
    pairs = []
    for o in order:
        p, g = int(pi[o]), int(gi[o])
        if p in used_p or g in used_g:
            continue
        used_p.add(p)
        used_g.add(g)
        pairs.append((p, g, float(d[p, g])))
    return MatchResult(
        tp_pairs=pairs,
        fp=[i for i in range(len(pred)) if i not in used_p],
        fn=[j for j in range(len(gt)) if j not in used_g],
    )


def match_oracle(pred, gt, radius=MATCH_RADIUS):
    """Exhaustive reference matcher: maximum cardinality, then minimum total distance."""
    pred, gt, d = _distances(pred, gt)
    if len(pred) > ORACLE_MAX_POINTS or len(gt) > ORACLE_MAX_POINTS:
        raise ValueError(f"match_oracle handles at most {ORACLE_MAX_POINTS} points per side")
    best_key, best = None, []

    def search(i, used, chosen, total):
        nonlocal best_key, best
        if i == len(pred):
            key = (-len(chosen), total)
            if best_key is None or key < best_key:
                best_key, best = key, list(chosen)
            return
        search(i + 1, used, chosen, total)
        for j in range(len(gt)):
            if j not in used and d[i, j] < radius:
                used.add(j)
                chosen.append((i, j, float(d[i, j])))
                search(i + 1, used, chosen, total + d[i, j])
                chosen.pop()
                used.discard(j)

    search(0, set(), [], 0.0)
    mp = {p for p, _, _ in best}
    mg = {g for _, g, _ in best}
    return MatchResult(
        tp_pairs=best,
        fp=[i for i in range(len(pred)) if i not in mp],
        fn=[j for j in range(len(gt)) if j not in mg],
    )


def ppv_tpr(result):
    """Return ``(PPV, TPR)``; a metric with a zero denominator is ``nan``."""
    if isinstance(result, MatchResult):
        tp, fp, fn = result.counts
    elif isinstance(result, Counts):
        tp, fp, fn = result.tp, result.fp, result.fn
    else:
        tp, fp, fn = result
    ppv = tp / (tp + fp) if tp + fp else UNDEFINED
    tpr = tp / (tp + fn) if tp + fn else UNDEFINED
    return ppv, tpr


def default_thresholds():
    return threshold_range(0.05, 1.0, 0.05)


def threshold_range(start, end, step, tol=1e-9):
    """Inclusive arithmetic range; values are rounded to suppress float drift."""
    if step <= 0:
        raise ValueError(f"threshold step must be positive, got {step}")
    if end < start:
        raise ValueError(f"threshold range end {end} is below start {start}")
    if not (0.0 < start and end <= 1.0 + tol):
        raise ValueError(f"thresholds must lie in (0, 1], got {start}..{end}")
    n = int(math.floor((end - start) / step + tol)) + 1
    return [round(start + i * step, 10) for i in range(n)]


def parse_threshold_range(text):
    """Parse ``start:end:step``."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"threshold range must be start:end:step, got {text!r}")
    start, end, step = (float(p) for p in parts)
    return threshold_range(start, end, step)


def fold_counts(heatmaps, gt_sets, thresholds=None, radius=MATCH_RADIUS):
    """Summed TP/FP/FN over the frames of one fold, per threshold."""
    thresholds = default_thresholds() if thresholds is None else list(thresholds)
    heatmaps = list(heatmaps)
    gt_sets = list(gt_sets)
    if not heatmaps:
        raise ValueError("fold_counts needs at least one frame")
    if len(heatmaps) != len(gt_sets):
        raise ValueError(f"{len(heatmaps)} heatmaps but {len(gt_sets)} ground-truth sets")
    out = []
    for t in thresholds:
        c = Counts()
        for h, g in zip(heatmaps, gt_sets):
            c.add(match(hm.decode(h, t), g, radius))
        out.append(c)
    return out


def _stats(values):
    vals = [v for v in values if not math.isnan(v)]
    if not vals:
        return UNDEFINED, UNDEFINED, UNDEFINED
    return float(np.mean(vals)), float(min(vals)), float(max(vals))


def aggregate(per_fold_counts, thresholds):
    """Mean and min/max of per-fold PPV/TPR at each threshold."""
    curve = []
    for i, t in enumerate(thresholds):
        ratios = [ppv_tpr(fc[i]) for fc in per_fold_counts]
        pm, plo, phi = _stats([r[0] for r in ratios])
        tm, tlo, thi = _stats([r[1] for r in ratios])
        curve.append(CurvePoint(t, pm, plo, phi, tm, tlo, thi))
    return curve


def sweep(folds, thresholds=None, radius=MATCH_RADIUS):
    """Threshold sweep across folds.

    ``folds`` is a list of ``(heatmaps, gt_sets)`` pairs, one per fold.  Each
    fold's PPV/TPR comes from TP/FP/FN summed over its frames.
    """
    thresholds = default_thresholds() if thresholds is None else list(thresholds)
    folds = list(folds)
    if not folds:
        raise ValueError("sweep needs at least one fold")
    per_fold = [fold_counts(h, g, thresholds, radius) for h, g in folds]
    return aggregate(per_fold, thresholds)


CURVE_HEADER = ["threshold", "ppv_mean", "ppv_min", "ppv_max", "tpr_mean", "tpr_min", "tpr_max"]


def _fmt(v):
    return "NaN" if math.isnan(v) else f"{v:.6f}"


def write_curve_csv(curve, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for p in curve:
            w.writerow([_fmt(getattr(p, k)) for k in CURVE_HEADER])


def read_curve_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [CurvePoint(*(float(r[k]) for k in CURVE_HEADER)) for r in rows]


def point_at(curve, threshold, tol=1e-9):
    for p in curve:
        if abs(p.threshold - threshold) <= tol:
            return p
    raise KeyError(f"no curve point at threshold {threshold}")


__all__ = [
    "MATCH_RADIUS", "MatchResult", "Counts", "CurvePoint", "match", "match_oracle", "ppv_tpr",
    "default_thresholds", "threshold_range", "parse_threshold_range", "fold_counts", "aggregate",
    "sweep", "write_curve_csv", "read_curve_csv", "point_at",
]

