"""Detection matching, precision/recall, 101-point AP, mAP ranges, fold statistics.

Detections and ground truth are passed either as a flat list of
:class:`~dualstain.boxgeom.BBox` (one image) or as ``{image_id: [BBox, ...]}``.
Single class throughout.
"""
from __future__ import annotations

import csv
import io
import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .boxgeom import BBox, pairwise_iou

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_GRID = np.linspace(0.0, 1.0, 101)
FOLD_METRICS = ("P", "R", "mAP@0.5", "mAP@0.5:0.95")

# Reference five-fold rows (percent), baseline detector vs the improved model,
# with the summary rows exactly as reported.
REFERENCE_FOLDS = {
    "baseline": [[84.6, 80.5, 88.0, 61.2],
                 [85.0, 80.6, 88.6, 61.6],
                 [85.4, 80.4, 88.3, 62.1],
                 [84.8, 78.5, 84.7, 61.0],
                 [84.4, 79.7, 87.0, 60.6]],
    "improved": [[86.9, 84.6, 92.3, 69.2],
                 [86.9, 84.4, 92.4, 69.6],
                 [87.4, 85.3, 92.7, 70.2],
                 [87.0, 84.0, 92.0, 69.1],
                 [86.6, 83.9, 91.7, 69.2]],
    "printed_mean_baseline": [84.6, 80.5, 88.0, 61.2],
    "printed_mean_improved": [86.9, 84.6, 92.3, 69.2],
    "printed_var_baseline": [0.17, 0.90, 3.15, 0.44],
    "printed_var_improved": [0.11, 0.41, 0.19, 0.25],
    "printed_p_bounds": [0.001, 0.001, 0.006, 0.001],
    "headline_deltas": [2.3, 4.1, 4.3, 8.0],
}


class UnitError(ValueError):
    """Detections and ground truth use different box units."""


class ProtocolError(ValueError):
    """Inputs violate the evaluation protocol (e.g. wrong fold count)."""


@dataclass
class MatchCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: MatchCounts) -> MatchCounts:
        return MatchCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass
class PrCurve:
    recall: np.ndarray
    precision: np.ndarray
    confidence: np.ndarray

    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.recall.tolist(), self.precision.tolist(),
                        self.confidence.tolist()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["recall", "precision", "confidence"])
        for r, p, c in self.points():
            w.writerow([f"{r:.6f}", f"{p:.6f}", f"{c:.6f}"])
        return buf.getvalue()


@dataclass
class EvalReport:
    p: float
    r: float
    ap_per_threshold: dict[float, float]
    map50: float
    map5095: float
    counts: MatchCounts = field(default_factory=MatchCounts)

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "r": self.r,
            "ap_per_threshold": {f"{k:.2f}": v for k, v in sorted(self.ap_per_threshold.items())},
            "map50": self.map50,
            "map5095": self.map5095,
            "counts": asdict(self.counts),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerow(["p", f"{self.p:.6f}"])
        w.writerow(["r", f"{self.r:.6f}"])
        w.writerow(["map50", f"{self.map50:.6f}"])
        w.writerow(["map5095", f"{self.map5095:.6f}"])
        for k, v in sorted(self.ap_per_threshold.items()):
            w.writerow([f"ap@{k:.2f}", f"{v:.6f}"])
        return buf.getvalue()


def _as_images(x) -> dict:
    if isinstance(x, Mapping):
        return {k: list(v) for k, v in x.items()}
    return {"_": list(x)}


def _unit_check(dets: dict, gts: dict) -> None:
    units = {b.unit for v in dets.values() for b in v} | {b.unit for v in gts.values() for b in v}
    if len(units) > 1:
        raise UnitError(f"mixed box units {sorted(units)}")


def _arr(boxes: Sequence[BBox]) -> np.ndarray:
    return np.array([b.as_array() for b in boxes]).reshape(-1, 4)


def _sorted_by_conf(dets: Sequence[BBox]) -> list[int]:
    conf = np.array([d.confidence if d.confidence is not None else 1.0 for d in dets])
    return list(np.argsort(-conf, kind="stable"))


def _match_image(dets: Sequence[BBox], gts: Sequence[BBox], iou_thr: float
                 ) -> tuple[list[int], np.ndarray]:
    """Greedy matching for one image.

    Returns the detection order (descending confidence) and, for each
    detection in that order, the index of the matched GT or -1.
    """
    order = _sorted_by_conf(dets)
    assign = np.full(len(dets), -1, dtype=np.int64)
    if not gts or not dets:
        return order, assign
    ious = pairwise_iou(_arr([dets[i] for i in order]), _arr(gts))
    taken = np.zeros(len(gts), dtype=bool)
    for rank in range(len(order)):
        cand = np.where(taken, -1.0, ious[rank])
        j = int(np.argmax(cand))
        if cand[j] >= iou_thr:
            taken[j] = True
            assign[rank] = j
    return order, assign


def match_detections(dets, gts, iou_thr: float = 0.5) -> tuple[MatchCounts, dict]:
    """Greedy single assignment: each detection, by descending confidence,
    takes the highest-IoU unmatched GT with IoU >= ``iou_thr``."""
    dets, gts = _as_images(dets), _as_images(gts)
    _unit_check(dets, gts)
    counts = MatchCounts()
    assignment = {}
    for img in sorted(set(dets) | set(gts), key=str):
        d, g = dets.get(img, []), gts.get(img, [])
        order, assign = _match_image(d, g, iou_thr)
        tp = int((assign >= 0).sum())
        counts = counts + MatchCounts(tp, len(d) - tp, len(g) - tp)
        assignment[img] = {int(order[r]): int(assign[r]) for r in range(len(order))}
    return counts, assignment


def precision_recall(c: MatchCounts) -> tuple[float, float]:
    p = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    r = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    return p, r


def _scored_hits(dets: dict, gts: dict, iou_thr: float) -> tuple[np.ndarray, np.ndarray, int]:
    confs, hits = [], []
    for img in sorted(set(dets) | set(gts), key=str):
        d = dets.get(img, [])
        order, assign = _match_image(d, gts.get(img, []), iou_thr)
        for rank, i in enumerate(order):
            confs.append(d[i].confidence if d[i].confidence is not None else 1.0)
            hits.append(assign[rank] >= 0)
    n_gt = sum(len(v) for v in gts.values())
    conf = np.array(confs, dtype=np.float64)
    hit = np.array(hits, dtype=bool)
    order = np.argsort(-conf, kind="stable")
    return conf[order], hit[order], n_gt


def pr_curve(dets, gts, iou_thr: float = 0.5) -> PrCurve:
    dets, gts = _as_images(dets), _as_images(gts)
    _unit_check(dets, gts)
    conf, hit, n_gt = _scored_hits(dets, gts, iou_thr)
    tp = np.cumsum(hit)
    k = np.arange(1, len(hit) + 1)
    recall = tp / n_gt if n_gt else np.zeros(len(hit))
    precision = tp / k if len(k) else np.zeros(0)
    return PrCurve(recall.astype(np.float64), precision.astype(np.float64), conf)


def interpolated_precision(curve: PrCurve) -> np.ndarray:
    """Envelope precision sampled at recall 0.00, 0.01, ..., 1.00."""
    if curve.recall.size == 0:
        return np.zeros_like(RECALL_GRID)
    env = np.maximum.accumulate(curve.precision[::-1])[::-1]
    idx = np.searchsorted(curve.recall, RECALL_GRID, side="left")
    out = np.zeros_like(RECALL_GRID)
    ok = idx < len(env)
    out[ok] = env[idx[ok]]
    return out


def average_precision(dets, gts, iou_thr: float = 0.5) -> float:
    """101-point interpolated AP over the confidence-sorted detection list."""
    curve = pr_curve(dets, gts, iou_thr)
    if curve.recall.size == 0 or sum(len(v) for v in _as_images(gts).values()) == 0:
        return 0.0
    # correctly rounded sum, so the value does not depend on summation order
    return math.fsum(interpolated_precision(curve).tolist()) / len(RECALL_GRID)


def confusion_matrix(dets, gts, iou_thr: float = 0.5, conf_thr: float = 0.5) -> MatchCounts:
    """Match only detections with confidence >= ``conf_thr``."""
    dets = _as_images(dets)
    kept = {k: [d for d in v if (d.confidence if d.confidence is not None else 1.0) >= conf_thr]
            for k, v in dets.items()}
    return match_detections(kept, gts, iou_thr)[0]


def render_confusion(c: MatchCounts) -> str:
    """Two-by-two layout: rows are predictions, columns are ground truth."""
    rows = [
        ("", "GT positive", "GT negative"),
        ("Pred positive", f"TP={c.tp}", f"FP={c.fp}"),
        ("Pred negative", f"FN={c.fn}", "TN=n/a (open background)"),
    ]
    width = [max(len(r[i]) for r in rows) for i in range(3)]
    return "\n".join("  ".join(s.ljust(w) for s, w in zip(r, width)) for r in rows)


def map_range(dets, gts, conf_thr: float = 0.5) -> EvalReport:
    """AP at IoU 0.50:0.05:0.95; P and R from the confusion matrix at IoU 0.5
    with detections filtered at ``conf_thr``."""
    aps = {t: average_precision(dets, gts, t) for t in IOU_THRESHOLDS}
    counts = confusion_matrix(dets, gts, 0.5, conf_thr)
    p, r = precision_recall(counts)
    return EvalReport(p, r, aps, aps[0.5], float(np.mean([aps[t] for t in IOU_THRESHOLDS])),
                      counts)


# ---------------------------------------------------------------------------
# cross-validation aggregation
# ---------------------------------------------------------------------------

@dataclass
class FoldReport:
    metrics: tuple[str, ...]
    folds_a: np.ndarray
    folds_b: np.ndarray
    mean_a: dict[str, float]
    mean_b: dict[str, float]
    var_a: dict[str, float]
    var_b: dict[str, float]
    pop_var_a: dict[str, float]
    pop_var_b: dict[str, float]
    t_stat: dict[str, float]
    p_value: dict[str, float]
    diff_var: dict[str, float]
    notes: list[str] = field(default_factory=list)

    def delta(self) -> dict[str, float]:
        return {m: self.mean_b[m] - self.mean_a[m] for m in self.metrics}

    def to_dict(self) -> dict:
        return {
            "metrics": list(self.metrics),
            "folds_a": self.folds_a.tolist(),
            "folds_b": self.folds_b.tolist(),
            "mean_a": self.mean_a, "mean_b": self.mean_b,
            "var_a": self.var_a, "var_b": self.var_b,
            "pop_var_a": self.pop_var_a, "pop_var_b": self.pop_var_b,
            "t_stat": self.t_stat, "p_value": self.p_value,
            "diff_var": self.diff_var, "delta": self.delta(),
            "notes": self.notes,
        }


def aggregate_folds(folds_a, folds_b, metrics: Sequence[str] = FOLD_METRICS,
                    n_folds: int = 5, printed_mean_a=None, printed_var_a=None,
                    printed_mean_b=None, printed_var_b=None) -> FoldReport:
    """Mean, variance and two-tailed paired t-test per metric.

    ``folds_a``/``folds_b`` are (n_folds, n_metrics), paired row by row.
    If printed summary rows are supplied they are compared with the
    recomputed values and any disagreement is recorded in ``notes``.
    """
    a = np.asarray(folds_a, dtype=np.float64)
    b = np.asarray(folds_b, dtype=np.float64)
    if a.ndim != 2 or a.shape != b.shape or a.shape[0] != n_folds or a.shape[1] != len(metrics):
        raise ProtocolError(f"expected two ({n_folds}, {len(metrics)}) fold tables, "
                            f"got {a.shape} and {b.shape}")
    rep = {k: {} for k in ("mean_a", "mean_b", "var_a", "var_b", "pop_var_a", "pop_var_b",
                           "t_stat", "p_value", "diff_var")}
    for j, m in enumerate(metrics):
        d = b[:, j] - a[:, j]
        rep["mean_a"][m] = float(a[:, j].mean())
        rep["mean_b"][m] = float(b[:, j].mean())
        rep["var_a"][m] = float(a[:, j].var(ddof=1))
        rep["var_b"][m] = float(b[:, j].var(ddof=1))
        rep["pop_var_a"][m] = float(a[:, j].var(ddof=0))
        rep["pop_var_b"][m] = float(b[:, j].var(ddof=0))
        rep["diff_var"][m] = float(d.var(ddof=1))
        if np.allclose(d, d[0]) and d[0] == 0:
            t, p = 0.0, 1.0
        else:
            res = stats.ttest_rel(b[:, j], a[:, j])
            t, p = float(res.statistic), float(res.pvalue)
        rep["t_stat"][m] = t
        rep["p_value"][m] = p
    notes = []
    for label, printed, key in (("A mean", printed_mean_a, "mean_a"),
                                ("A var", printed_var_a, "var_a"),
                                ("B mean", printed_mean_b, "mean_b"),
                                ("B var", printed_var_b, "var_b")):
        if printed is None:
            continue
        for m, v in zip(metrics, printed):
            got = rep[key][m]
            alt = rep["pop_" + key][m] if "var" in key else None
            if abs(got - v) > 0.05 and (alt is None or abs(alt - v) > 0.05):
                notes.append(f"printed {label} {m}={v} disagrees with recomputed {got:.4f}"
                             + (f" (population {alt:.4f})" if alt is not None else ""))
    return FoldReport(tuple(metrics), a, b, notes=notes, **rep)
