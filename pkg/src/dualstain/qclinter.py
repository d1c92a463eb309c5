"""Stain-aware annotation linter.

Four rules, each reduced to geometry over color-segmented stain masks:

``LOOSE_BOX``
    slack between a box and the stained pixels it contains.
``SCALE_DISPARITY``
    a box many times larger than the corpus' median box.
``UNLABELED_CELL``
    a stained connected component that no box covers.
``DIAGONAL_CLUSTER``
    a sparse, elongated stained region inside an axis-aligned box.

Every finding carries a suggested replacement box list in pixel units.
"""
from __future__ import annotations

import itertools
import json
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .boxgeom import BBox

RULES = ("LOOSE_BOX", "SCALE_DISPARITY", "UNLABELED_CELL", "DIAGONAL_CLUSTER")
BACKGROUND, P16, KI67, NEGATIVE = 0, 1, 2, 3


class ProtocolError(ValueError):
    """Corpus too small or otherwise unusable for a rule."""


@dataclass(frozen=True)
class HsvRange:
    hue: tuple[float, float]       # degrees, lo <= hue <= hi
    sat: tuple[float, float] = (0.25, 1.0)
    val: tuple[float, float] = (0.15, 1.0)

    def contains(self, h, s, v):
        return ((h >= self.hue[0]) & (h <= self.hue[1]) & (s >= self.sat[0]) & (s <= self.sat[1])
                & (v >= self.val[0]) & (v <= self.val[1]))


@dataclass(frozen=True)
class StainColorConfig:
    p16: HsvRange = HsvRange((290.0, 350.0), (0.35, 1.0))
    ki67: HsvRange = HsvRange((15.0, 75.0), (0.35, 1.0))
    negative: HsvRange = HsvRange((215.0, 285.0), (0.25, 1.0))

    def __post_init__(self):
        rs = sorted((self.p16.hue, self.ki67.hue, self.negative.hue))
        for (lo, hi) in rs:
            if lo > hi:
                raise ValueError(f"empty hue range {(lo, hi)}")
        for (_, hi), (lo, _) in itertools.pairwise(rs):
            if lo <= hi:
                raise ValueError("stain hue ranges overlap")


@dataclass
class StainMasks:
    labels: np.ndarray  # H x W, values BACKGROUND / P16 / KI67 / NEGATIVE

    @property
    def p16_mask(self) -> np.ndarray:
        return self.labels == P16

    @property
    def ki67_mask(self) -> np.ndarray:
        return self.labels == KI67

    @property
    def negative_mask(self) -> np.ndarray:
        return self.labels == NEGATIVE

    @property
    def foreground(self) -> np.ndarray:
        return (self.labels == P16) | (self.labels == KI67)


@dataclass
class LintFinding:
    rule: str
    image_id: str
    boxes: list[tuple[int, int, int, int]]
    measurement: float
    suggested_fix: list[tuple[int, int, int, int]]
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"rule": self.rule, "image_id": self.image_id,
                "boxes": [list(b) for b in self.boxes], "measurement": self.measurement,
                "suggested_fix": [list(b) for b in self.suggested_fix], "flags": self.flags}


@dataclass
class LintConfig:
    colors: StainColorConfig = field(default_factory=StainColorConfig)
    margin_thr_px: int = 4
    ratio_thr: float = 20.0
    min_area_px: int = 100
    coverage_thr: float = 0.30
    fill_thr: float = 0.35
    elong_thr: float = 3.0
    min_component_px: int = 20


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------

def rgb_to_hsv(image: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hue in degrees [0, 360), saturation and value in [0, 1]."""
    rgb = image.astype(np.float64) / 255.0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    d = mx - mn
    safe = np.where(d > 0, d, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0,
                 np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(d > 0, h * 60.0, 0.0)
    s = np.where(mx > 0, d / np.where(mx > 0, mx, 1.0), 0.0)
    return h, s, mx


def stain_segment(image: np.ndarray, cfg: StainColorConfig = StainColorConfig(),  # noqa: B008
                  smooth: bool = True) -> StainMasks:
    """Classify pixels by HSV range, then apply a 3x3 majority filter."""
    h, s, v = rgb_to_hsv(np.asarray(image))
    labels = np.full(h.shape, BACKGROUND, dtype=np.uint8)
    labels[cfg.p16.contains(h, s, v)] = P16
    labels[cfg.ki67.contains(h, s, v)] = KI67
    labels[cfg.negative.contains(h, s, v)] = NEGATIVE
    if smooth:
        labels = majority_filter(labels)
    return StainMasks(labels)


def majority_filter(labels: np.ndarray, n_labels: int = 4) -> np.ndarray:
    """3x3 mode filter; a pixel keeps its label unless another one strictly wins."""
    kernel = np.ones((3, 3))
    counts = np.stack([ndimage.convolve((labels == k).astype(np.int16), kernel,
                                        mode="constant", cval=0) for k in range(n_labels)])
    own = np.take_along_axis(counts, labels[None].astype(np.int64), axis=0)[0]
    best = counts.argmax(axis=0).astype(np.uint8)
    return np.where(counts.max(axis=0) > own, best, labels)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def box_to_px(b: BBox, width: int, height: int) -> tuple[int, int, int, int]:
    """Normalized box -> integer pixel edges (x0, y0, x1, y1), clipped to the image."""
    p = b.to_px(width, height)
    x0, y0, x1, y1 = p.corners()
    x0, y0 = max(round(x0), 0), max(round(y0), 0)
    x1, y1 = min(round(x1), width), min(round(y1), height)
    return x0, y0, max(x1, x0 + 1), max(y1, y0 + 1)


def px_to_box(px: Sequence[int], width: int, height: int, class_id: int = 0) -> BBox:
    x0, y0, x1, y1 = px
    return BBox.from_corners(x0 / width, y0 / height, x1 / width, y1 / height,
                             class_id=class_id)


def _extent(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    ys = np.flatnonzero(mask.any(axis=1))
    xs = np.flatnonzero(mask.any(axis=0))
    if ys.size == 0:
        return None
    return int(xs[0]), int(ys[0]), int(xs[-1]) + 1, int(ys[-1]) + 1


def _components(mask: np.ndarray, min_px: int) -> list[tuple[tuple[int, int, int, int], int]]:
    lab, _n = ndimage.label(mask, structure=np.ones((3, 3)))
    out = []
    for i, sl in enumerate(ndimage.find_objects(lab), start=1):
        if sl is None:
            continue
        area = int((lab[sl] == i).sum())
        if area >= min_px:
            out.append(((sl[1].start, sl[0].start, sl[1].stop, sl[0].stop), area))
    return out


def box_area(px: Sequence[int]) -> int:
    return (px[2] - px[0]) * (px[3] - px[1])


# ---------------------------------------------------------------------------
# rules
# ---------------------------------------------------------------------------

def check_tightness(box: Sequence[int], masks: StainMasks, margin_thr_px: int = 4,
                    image_id: str = "") -> LintFinding | None:
    """Flag a box whose largest side gap to the stained pixels exceeds the threshold.

    The suggested box is the stained-pixel extent inside the box.
    """
    x0, y0, x1, y1 = box
    ext = _extent(masks.foreground[y0:y1, x0:x1])
    if ext is None:
        return LintFinding("LOOSE_BOX", image_id, [tuple(box)], float(max(x1 - x0, y1 - y0)),
                           [], ["degenerate_content"])
    ex0, ey0, ex1, ey1 = ext
    gaps = (ex0, ey0, (x1 - x0) - ex1, (y1 - y0) - ey1)
    worst = max(gaps)
    if worst <= margin_thr_px:
        return None
    return LintFinding("LOOSE_BOX", image_id, [tuple(box)], float(worst),
                       [(x0 + ex0, y0 + ey0, x0 + ex1, y0 + ey1)])


def check_scale_disparity(items: Sequence[tuple[str, Sequence[Sequence[int]], StainMasks]],
                          ratio_thr: float = 20.0, min_component_px: int = 20
                          ) -> tuple[list[LintFinding], float]:
    """Flag boxes larger than ``ratio_thr`` times the corpus median box area.

    ``items`` holds ``(image_id, pixel boxes, masks)`` per image.  The fix
    replaces the box with the bounds of each stained component inside it.
    A box holding a single connected object has nothing to subdivide and is
    left to :func:`check_diagonal_cluster`.  Returns the findings and the
    median area.
    """
    areas = [box_area(b) for _, boxes, _ in items for b in boxes]
    if len(areas) < 3:
        raise ProtocolError(f"need at least 3 boxes to estimate cell scale, got {len(areas)}")
    median = float(np.median(areas))
    findings = []
    for image_id, boxes, masks in items:
        for b in boxes:
            ratio = box_area(b) / median
            if ratio <= ratio_thr:
                continue
            x0, y0, x1, y1 = b
            comps = _components(masks.foreground[y0:y1, x0:x1], min_component_px)
            if len(comps) < 2:
                continue
            fix = [(x0 + c[0], y0 + c[1], x0 + c[2], y0 + c[3]) for c, _ in comps]
            findings.append(LintFinding("SCALE_DISPARITY", image_id, [tuple(b)], ratio, fix))
    return findings, median


def find_unlabeled(masks: StainMasks, boxes: Sequence[Sequence[int]], min_area_px: int = 100,
                   coverage_thr: float = 0.30, image_id: str = "") -> list[LintFinding]:
    """Stained components of at least ``min_area_px`` that boxes cover by less
    than ``coverage_thr`` of their area."""
    fg = masks.foreground
    covered = np.zeros_like(fg)
    for x0, y0, x1, y1 in boxes:
        covered[y0:y1, x0:x1] = True
    lab, _ = ndimage.label(fg, structure=np.ones((3, 3)))
    out = []
    for i, sl in enumerate(ndimage.find_objects(lab), start=1):
        if sl is None:
            continue
        comp = lab[sl] == i
        area = int(comp.sum())
        if area < min_area_px:
            continue
        frac = float((comp & covered[sl]).sum()) / area
        if frac < coverage_thr:
            bounds = (sl[1].start, sl[0].start, sl[1].stop, sl[0].stop)
            out.append(LintFinding("UNLABELED_CELL", image_id, [], frac, [bounds]))
    return out


def _principal_axes(ys: np.ndarray, xs: np.ndarray):
    pts = np.stack([xs + 0.5, ys + 0.5], axis=1).astype(np.float64)
    mu = pts.mean(axis=0)
    cov = np.cov((pts - mu).T, bias=True)
    evals, evecs = np.linalg.eigh(cov)
    return pts, mu, evals, evecs


def check_diagonal_cluster(box: Sequence[int], masks: StainMasks, fill_thr: float = 0.35,
                           elong_thr: float = 3.0, image_id: str = "",
                           max_aspect: float = 2.0) -> LintFinding | None:
    """Flag a sparsely filled box whose stained pixels form an elongated shape.

    The fix slices the stained pixels along their principal axis into pieces
    no longer than ``max_aspect`` times their width and boxes each piece.
    """
    x0, y0, x1, y1 = box
    fg = masks.foreground[y0:y1, x0:x1]
    ys, xs = np.nonzero(fg)
    if ys.size < 3:
        return None
    fill = ys.size / float(fg.size)
    pts, mu, evals, evecs = _principal_axes(ys, xs)
    lo = max(evals[0], 1e-12)
    elong = math.sqrt(evals[1] / lo)
    if not (fill < fill_thr and elong > elong_thr):
        return None
    major = evecs[:, 1]
    minor = evecs[:, 0]
    t = (pts - mu) @ major
    u = (pts - mu) @ minor
    length = t.max() - t.min() + 1.0
    width = u.max() - u.min() + 1.0
    n_pieces = max(1, math.ceil(length / (max_aspect * width)))
    edges = np.linspace(t.min(), t.max() + 1e-9, n_pieces + 1)
    piece = np.clip(np.searchsorted(edges, t, side="right") - 1, 0, n_pieces - 1)
    fix = []
    for k in range(n_pieces):
        sel = piece == k
        if not sel.any():
            continue
        px, py = xs[sel], ys[sel]
        fix.append((x0 + int(px.min()), y0 + int(py.min()),
                    x0 + int(px.max()) + 1, y0 + int(py.max()) + 1))
    return LintFinding("DIAGONAL_CLUSTER", image_id, [tuple(box)], elong, fix,
                       [f"fill={fill:.3f}"])


# ---------------------------------------------------------------------------
# corpus driver
# ---------------------------------------------------------------------------

@dataclass
class LintReport:
    findings: list[LintFinding]
    summary: dict
    fixed: dict[str, list[BBox]] | None = None

    def to_jsonl(self) -> str:
        return "".join(json.dumps(f.to_dict(), sort_keys=True) + "\n" for f in self.findings)

    def summary_text(self) -> str:
        lines = [(f"images: {self.summary['images']}  boxes: {self.summary['boxes']}  "
                 f"findings: {self.summary['total']}")]
        for r in RULES:
            lines.append(f"  {r:<18} {self.summary['per_rule'].get(r, 0)}")
        if self.summary.get("errors"):
            lines.append(f"  {'IMAGE_ERROR':<18} {self.summary['errors']}")
        return "\n".join(lines)


def _replace(boxes: list, old, new: list) -> list:
    i = boxes.index(tuple(old))
    return boxes[:i] + [tuple(b) for b in new] + boxes[i + 1:]


def lint_dataset(samples, cfg: LintConfig | None = None, autofix: bool = False
                 ) -> LintReport:
    """Run all four rules over a corpus.

    Rules run in the order tightness, scale disparity, diagonal cluster,
    unlabeled cell; each sees the boxes as repaired by the rules before it,
    so one defect is reported once.  ``samples`` are
    :class:`~dualstain.datasetkit.Sample` objects with rasters.
    """
    cfg = cfg or LintConfig()
    findings: list[LintFinding] = []
    state: dict[str, list[tuple[int, int, int, int]]] = {}
    masks: dict[str, StainMasks] = {}
    dims: dict[str, tuple[int, int]] = {}
    errors = 0
    n_boxes = 0
    for s in sorted(samples, key=lambda s: s.image_id):
        try:
            img = s.load()
            H, W = img.shape[:2]
            masks[s.image_id] = stain_segment(img, cfg.colors)
            dims[s.image_id] = (W, H)
            state[s.image_id] = [box_to_px(b, W, H) for b in s.boxes]
            n_boxes += len(s.boxes)
        except Exception as exc:  # noqa: BLE001 - reported, corpus continues
            errors += 1
            findings.append(LintFinding("IMAGE_ERROR", s.image_id, [], 0.0, [],
                                        [f"{type(exc).__name__}: {exc}"]))
    ids = sorted(state)

    for i in ids:
        for b in list(state[i]):
            f = check_tightness(b, masks[i], cfg.margin_thr_px, i)
            if f is not None:
                findings.append(f)
                state[i] = _replace(state[i], b, f.suggested_fix)

    try:
        scale, _ = check_scale_disparity([(i, state[i], masks[i]) for i in ids],
                                         cfg.ratio_thr, cfg.min_component_px)
    except ProtocolError as exc:
        scale = []
        findings.append(LintFinding("IMAGE_ERROR", "*", [], 0.0, [], [str(exc)]))
    for f in scale:
        findings.append(f)
        if f.suggested_fix:
            state[f.image_id] = _replace(state[f.image_id], f.boxes[0], f.suggested_fix)

    for i in ids:
        for b in list(state[i]):
            f = check_diagonal_cluster(b, masks[i], cfg.fill_thr, cfg.elong_thr, i)
            if f is not None:
                findings.append(f)
                state[i] = _replace(state[i], b, f.suggested_fix)

    for i in ids:
        for f in find_unlabeled(masks[i], state[i], cfg.min_area_px, cfg.coverage_thr, i):
            findings.append(f)
            state[i] = state[i] + [tuple(b) for b in f.suggested_fix]

    per_rule = {r: sum(f.rule == r for f in findings) for r in RULES}
    summary = {"images": len(ids) + errors, "boxes": n_boxes,
               "total": sum(per_rule.values()), "per_rule": per_rule, "errors": errors}
    fixed = None
    if autofix:
        fixed = {i: [px_to_box(b, *dims[i]) for b in state[i]] for i in ids}
    return LintReport(findings, summary, fixed)


def findings_for(findings: Iterable[LintFinding], rule: str) -> list[LintFinding]:
    return [f for f in findings if f.rule == rule]
