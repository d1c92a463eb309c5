"""Synthetic dual-stain slides with exact ground truth and controlled label defects.

Cells are filled ellipses on a white background:

* dual-positive: magenta cytoplasm holding a brownish-yellow nucleus
* negative: pale, near-grey cytoplasm with a blue-purple nucleus
* false-positive look-alike: a lone blue-purple nucleus

Positives come as isolated cells, compact clumps of separate cells, and
oriented strips of overlapping cells.  Ground-truth boxes are the tight
pixel bounds of each positive cell's drawn cytoplasm.

The palette below is the contract with :mod:`dualstain.qclinter`'s default
color ranges.
"""
from __future__ import annotations

import json
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from .boxgeom import BBox

MAGENTA = (200, 40, 140)
BROWN = (150, 110, 30)
BLUE_PURPLE = (90, 70, 160)
PALE = (222, 214, 230)
WHITE = (255, 255, 255)
NOISE = 10

# label values of the internal paint map
BG, CYTO, NUC_POS, NUC_NEG, CYTO_NEG = 0, 1, 2, 3, 4
_COLORS = {BG: WHITE, CYTO: MAGENTA, NUC_POS: BROWN, NUC_NEG: BLUE_PURPLE, CYTO_NEG: PALE}

MAX_ATTEMPTS = 1000


class PlacementError(RuntimeError):
    """The requested cells cannot be placed without crowding."""


@dataclass
class SlideSpec:
    width: int = 320
    height: int = 320
    positives: int = 6
    negatives: int = 10
    false_positives: int = 4
    clusters: int = 1
    cluster_size: tuple[int, int] = (5, 7)
    cluster_extent: int = 90
    strips: int = 1
    strip_size: tuple[int, int] = (8, 10)
    strip_angle: tuple[float, float] = (30.0, 60.0)
    radius: tuple[float, float] = (7.0, 10.0)
    clearance: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.width < 64 or self.height < 64:
            raise ValueError("slide extents must be >= 64")
        for name in ("positives", "negatives", "false_positives", "clusters", "strips"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class DefectSpec:
    loosen: float = 0.0
    merge: float = 0.0
    delete: float = 0.0
    diagonal: float = 0.0
    margin: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("loosen", "merge", "delete", "diagonal"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"defect rate {name}={v} outside [0, 1]")

    @classmethod
    def uniform(cls, rate: float, margin: int = 10, seed: int = 0) -> DefectSpec:
        return cls(rate, rate, rate, rate, margin, seed)


@dataclass
class Cell:
    cell_id: int
    kind: str                     # isolated | clump | strip | negative | false_positive
    group: int | None
    box: tuple[int, int, int, int]  # pixel edges x0, y0, x1, y1 (exclusive)
    center: tuple[float, float]


@dataclass
class Registry:
    width: int
    height: int
    cells: list[Cell] = field(default_factory=list)
    groups: dict[int, dict] = field(default_factory=dict)  # id -> {kind, members, angle}
    positive_ids: list[int] = field(default_factory=list)  # ann index -> cell id

    def positives(self) -> list[Cell]:
        return [self.cells[i] for i in self.positive_ids]

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height,
                "cells": [asdict(c) for c in self.cells],
                "groups": {str(k): v for k, v in self.groups.items()},
                "positive_ids": self.positive_ids}


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

def ellipse_mask(shape, cx: float, cy: float, a: float, b: float, theta: float) -> np.ndarray:
    """Pixels whose centers fall inside the rotated ellipse."""
    h, w = shape
    out = np.zeros((h, w), dtype=bool)
    r = max(a, b) + 1
    x0, x1 = max(int(cx - r), 0), min(int(cx + r) + 2, w)
    y0, y1 = max(int(cy - r), 0), min(int(cy + r) + 2, h)
    if x0 >= x1 or y0 >= y1:
        return out
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dx = xs + 0.5 - cx
    dy = ys + 0.5 - cy
    c, s = math.cos(theta), math.sin(theta)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    out[y0:y1, x0:x1] = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return out


def _bounds(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def _ellipse_extent(a: float, b: float, theta: float) -> tuple[float, float]:
    c, s = math.cos(theta), math.sin(theta)
    return math.sqrt((a * c) ** 2 + (b * s) ** 2), math.sqrt((a * s) ** 2 + (b * c) ** 2)


class _Canvas:
    def __init__(self, spec: SlideSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        self.paint = np.zeros((spec.height, spec.width), dtype=np.uint8)
        self.reserved: list[tuple[float, float, float, float, float]] = []  # box + clearance
        self.registry = Registry(spec.width, spec.height)

    def free(self, box, clearance: float, mutual: bool = True) -> bool:
        """True if ``box`` keeps its distance from everything reserved so far.

        With ``mutual`` the larger of the two clearances applies; otherwise
        only the candidate's own.
        """
        x0, y0, x1, y1 = box
        if x0 < 1 or y0 < 1 or x1 > self.spec.width - 1 or y1 > self.spec.height - 1:
            return False
        for rx0, ry0, rx1, ry1, rc in self.reserved:
            gap = max(clearance, rc) if mutual else clearance
            if x0 < rx1 + gap and rx0 < x1 + gap and y0 < ry1 + gap and ry0 < y1 + gap:
                return False
        return True

    def reserve(self, box, clearance: float) -> None:
        self.reserved.append((*box, clearance))

    def random_shape(self):
        a = self.rng.uniform(*self.spec.radius)
        b = self.rng.uniform(*self.spec.radius)
        return a, b, self.rng.uniform(0, math.pi)

    def draw_positive(self, cx, cy, a, b, theta, kind, group) -> Cell:
        shape = self.paint.shape
        cyto = ellipse_mask(shape, cx, cy, a, b, theta)
        self.paint[cyto] = CYTO
        na, nb = 0.45 * a, 0.45 * b
        ox, oy = self.rng.uniform(-0.15, 0.15, size=2) * np.array([a, b])
        nuc = ellipse_mask(shape, cx + ox, cy + oy, na, nb, theta) & cyto
        self.paint[nuc] = NUC_POS
        cell = Cell(len(self.registry.cells), kind, group, _bounds(cyto), (cx, cy))
        self.registry.cells.append(cell)
        self.registry.positive_ids.append(cell.cell_id)
        return cell

    def draw_negative(self, cx, cy, a, b, theta, with_cytoplasm: bool) -> Cell:
        shape = self.paint.shape
        if with_cytoplasm:
            cyto = ellipse_mask(shape, cx, cy, a, b, theta)
            self.paint[cyto & (self.paint == BG)] = CYTO_NEG
            nuc = ellipse_mask(shape, cx, cy, 0.45 * a, 0.45 * b, theta)
            box = _bounds(cyto)
        else:
            nuc = ellipse_mask(shape, cx, cy, 0.6 * a, 0.6 * b, theta)
            box = _bounds(nuc)
        self.paint[nuc & (self.paint == BG) | nuc & (self.paint == CYTO_NEG)] = NUC_NEG
        kind = "negative" if with_cytoplasm else "false_positive"
        cell = Cell(len(self.registry.cells), kind, None, box, (cx, cy))
        self.registry.cells.append(cell)
        return cell

    def try_place(self, ex: float, ey: float, clearance: float, margin: float = 2.0,
                  mutual: bool = True):
        W, H = self.spec.width, self.spec.height
        for _ in range(MAX_ATTEMPTS):
            cx = self.rng.uniform(ex + margin, W - ex - margin)
            cy = self.rng.uniform(ey + margin, H - ey - margin)
            box = (cx - ex - 1, cy - ey - 1, cx + ex + 1, cy + ey + 1)
            if self.free(box, clearance, mutual):
                return cx, cy, box
        return None


def _place_clump(cv: _Canvas, group: int, n_members: int) -> bool:
    spec, rng = cv.spec, cv.rng
    L = spec.cluster_extent
    for _ in range(MAX_ATTEMPTS):
        x0 = rng.uniform(2, spec.width - L - 2)
        y0 = rng.uniform(2, spec.height - L - 2)
        region = (x0, y0, x0 + L, y0 + L)
        if cv.free(region, spec.clearance):
            break
    else:
        return False
    # four corner anchors, then free interior placement with a small gap
    shapes, local = [], []
    for k in range(n_members):
        a, b, th = cv.random_shape()
        ex, ey = _ellipse_extent(a, b, th)
        if k < 4:
            cx = x0 + ex + 1 if k in (0, 2) else x0 + L - ex - 1
            cy = y0 + ey + 1 if k in (0, 1) else y0 + L - ey - 1
        else:
            for _ in range(MAX_ATTEMPTS):
                cx = rng.uniform(x0 + ex + 1, x0 + L - ex - 1)
                cy = rng.uniform(y0 + ey + 1, y0 + L - ey - 1)
                box = (cx - ex - 1, cy - ey - 1, cx + ex + 1, cy + ey + 1)
                if all(not (box[0] < q[2] + 3 and q[0] < box[2] + 3 and
                            box[1] < q[3] + 3 and q[1] < box[3] + 3) for q in local):
                    break
            else:
                continue
        box = (cx - ex - 1, cy - ey - 1, cx + ex + 1, cy + ey + 1)
        local.append(box)
        shapes.append((cx, cy, a, b, th))
    cv.reserve(region, spec.clearance)
    members = [cv.draw_positive(*s, kind="clump", group=group).cell_id for s in shapes]
    cv.registry.groups[group] = {"kind": "clump", "members": members}
    return True


def _place_strip(cv: _Canvas, group: int, n_members: int) -> bool:
    spec, rng = cv.spec, cv.rng
    r = float(np.mean(spec.radius))
    step = 1.4 * r
    lo, hi = spec.strip_angle
    ang = math.radians(rng.uniform(lo, hi))
    if rng.random() < 0.5:
        ang = math.pi - ang
    ux, uy = math.cos(ang), math.sin(ang)
    length = (n_members - 1) * step
    half_x = abs(ux) * length / 2 + r + 2
    half_y = abs(uy) * length / 2 + r + 2
    pos = cv.try_place(half_x, half_y, spec.clearance)
    if pos is None:
        return False
    cx, cy, box = pos
    cv.reserve(box, spec.clearance)
    members = []
    for k in range(n_members):
        t = -length / 2 + k * step
        a = r * rng.uniform(0.9, 1.1)
        b = r * rng.uniform(0.9, 1.1)
        cell = cv.draw_positive(cx + t * ux, cy + t * uy, a, b, ang, kind="strip", group=group)
        members.append(cell.cell_id)
    cv.registry.groups[group] = {"kind": "strip", "members": members,
                                 "angle": math.degrees(ang)}
    return True


def render(paint: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    img = np.zeros(paint.shape + (3,), dtype=np.int16)
    for label, color in _COLORS.items():
        img[paint == label] = color
    img += rng.integers(-NOISE, NOISE + 1, size=img.shape, dtype=np.int16)
    return np.clip(img, 0, 255).astype(np.uint8)


def generate_slide(spec: SlideSpec) -> tuple[np.ndarray, list[BBox], Registry]:
    """Draw a slide; returns (RGB image, normalized GT boxes, cell registry)."""
    rng = np.random.default_rng(spec.seed)
    cv = _Canvas(spec, rng)
    group = 0
    for _ in range(spec.clusters):
        n = int(rng.integers(spec.cluster_size[0], spec.cluster_size[1] + 1))
        if not _place_clump(cv, group, n):
            raise PlacementError(f"could not place cluster {group + 1} of {spec.clusters}")
        group += 1
    for _ in range(spec.strips):
        n = int(rng.integers(spec.strip_size[0], spec.strip_size[1] + 1))
        if not _place_strip(cv, group, n):
            raise PlacementError(f"could not place strip {group + 1 - spec.clusters} "
                                 f"of {spec.strips}")
        group += 1
    for i in range(spec.positives):
        a, b, th = cv.random_shape()
        ex, ey = _ellipse_extent(a, b, th)
        pos = cv.try_place(ex, ey, spec.clearance, margin=spec.clearance / 2)
        if pos is None:
            raise PlacementError(f"could not place positive cell {i + 1} of {spec.positives}")
        cx, cy, box = pos
        cv.reserve(box, spec.clearance)
        cv.draw_positive(cx, cy, a, b, th, kind="isolated", group=None)
    for i in range(spec.negatives + spec.false_positives):
        with_cyto = i < spec.negatives
        a, b, th = cv.random_shape()
        ex, ey = _ellipse_extent(a, b, th)
        pos = cv.try_place(ex, ey, 2.0, mutual=False)
        if pos is None:
            what = "negative" if with_cyto else "false-positive"
            raise PlacementError(f"could not place {what} cell {i + 1} "
                                 f"of {spec.negatives + spec.false_positives}")
        cx, cy, box = pos
        cv.reserve(box, 2.0)
        cv.draw_negative(cx, cy, a, b, th, with_cyto)
    image = render(cv.paint, rng)
    W, H = spec.width, spec.height
    boxes = [BBox.from_corners(c.box[0] / W, c.box[1] / H, c.box[2] / W, c.box[3] / H)
             for c in cv.registry.positives()]
    return image, boxes, cv.registry


# ---------------------------------------------------------------------------
# defect injection
# ---------------------------------------------------------------------------

def _px(c: Cell) -> list[int]:
    return list(c.box)


def _norm_box(box, W, H) -> BBox:
    x0, y0, x1, y1 = box
    return BBox.from_corners(x0 / W, y0 / H, x1 / W, y1 / H)


def inject_defects(boxes: Sequence[BBox], registry: Registry, d: DefectSpec,
                   image_id: str = "") -> tuple[list[BBox], list[dict]]:
    """Corrupt a slide's annotations the ways careless labeling does.

    Returns the corrupted normalized boxes and a log with one entry per
    change (``rule`` is one of loosen / merge / delete / diagonal).  The
    image is never touched.
    """
    W, H = registry.width, registry.height
    rng = np.random.default_rng([d.seed, *image_id.encode()])
    by_cell: dict[int, BBox] = {cid: b for cid, b in zip(registry.positive_ids, boxes)}
    out_boxes: list[tuple[float, BBox]] = []  # sort key keeps original order
    log: list[dict] = []
    consumed: set[int] = set()
    order = {cid: i for i, cid in enumerate(registry.positive_ids)}

    for gid in sorted(registry.groups):
        g = registry.groups[gid]
        rate = d.merge if g["kind"] == "clump" else d.diagonal
        if rng.random() < rate:
            members = [registry.cells[m] for m in g["members"]]
            x0 = min(c.box[0] for c in members)
            y0 = min(c.box[1] for c in members)
            x1 = max(c.box[2] for c in members)
            y1 = max(c.box[3] for c in members)
            consumed.update(g["members"])
            out_boxes.append((min(order[m] for m in g["members"]),
                              _norm_box((x0, y0, x1, y1), W, H)))
            log.append({"rule": "merge" if g["kind"] == "clump" else "diagonal",
                        "image_id": image_id, "group": gid, "cells": g["members"],
                        "box": [x0, y0, x1, y1],
                        "original": [_px(c) for c in members]})
    for cid in registry.positive_ids:
        if cid in consumed:
            continue
        cell = registry.cells[cid]
        if cell.kind == "isolated":
            u_del, u_loose = rng.random(), rng.random()
            if u_del < d.delete:
                log.append({"rule": "delete", "image_id": image_id, "cells": [cid],
                            "box": None, "original": [_px(cell)]})
                continue
            if u_loose < d.loosen:
                m = d.margin
                x0, y0, x1, y1 = cell.box
                grown = (max(x0 - m, 0), max(y0 - m, 0), min(x1 + m, W), min(y1 + m, H))
                out_boxes.append((order[cid], _norm_box(grown, W, H)))
                log.append({"rule": "loosen", "image_id": image_id, "cells": [cid],
                            "box": list(grown), "original": [_px(cell)]})
                continue
        out_boxes.append((order[cid], by_cell[cid]))
    out_boxes.sort(key=lambda t: t[0])
    return [b for _, b in out_boxes], log


def log_to_jsonl(log: Sequence[dict]) -> str:
    return "".join(json.dumps(e, sort_keys=True) + "\n" for e in log)


# ---------------------------------------------------------------------------
# corpus helpers
# ---------------------------------------------------------------------------

def lint_corpus_spec(seed: int) -> SlideSpec:
    """Slide layout with every structure the linter's rules target."""
    return SlideSpec(seed=seed)


def detector_spec(seed: int, size: int = 128) -> SlideSpec:
    """Small slides sized for the toy detector's default input."""
    return SlideSpec(width=size, height=size, positives=4, negatives=4, false_positives=2,
                     clusters=0, strips=0, clearance=12, seed=seed)


def generate_corpus(n: int, seed: int = 0, spec_fn=lint_corpus_spec, prefix: str = "slide"):
    """``n`` slides with per-slide seeds derived from ``seed``.

    Returns a list of ``(image_id, image, boxes, registry)``.
    """
    out = []
    ss = np.random.SeedSequence(seed)
    for i, child in enumerate(ss.spawn(n)):
        sub = int(child.generate_state(1)[0])
        image, boxes, reg = generate_slide(spec_fn(sub))
        out.append((f"{prefix}_{i:04d}", image, boxes, reg))
    return out
