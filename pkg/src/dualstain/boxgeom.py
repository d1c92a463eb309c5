"""Box algebra: IoU, EIoU / Focal-EIoU / CIoU losses with analytic gradients, NMS.

Boxes are parameterized by center and extent ``(cx, cy, w, h)``.  The
vectorized ``*_terms`` functions accept arrays of shape (..., 4) and are
what the detector uses; the scalar wrappers take :class:`BBox`.
"""
from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, replace

import numpy as np

CLAMP = 1e-9


class DomainError(ValueError):
    """A box with non-positive extent, or otherwise outside its domain."""


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float
    class_id: int = 0
    confidence: float | None = None
    unit: str = "norm"  # "norm" (fractions of the image) or "px"

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise DomainError(f"box extents must be positive, got w={self.w}, h={self.h}")
        if self.unit not in ("norm", "px"):
            raise DomainError(f"unknown box unit {self.unit!r}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_corners(cls, x1, y1, x2, y2, **kw) -> BBox:
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1, **kw)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    def with_confidence(self, conf: float) -> BBox:
        return replace(self, confidence=conf)

    def clipped(self) -> BBox:
        """Clip a normalized box to the unit square (extent kept positive)."""
        x1, y1, x2, y2 = self.corners()
        if x1 >= 0.0 and y1 >= 0.0 and x2 <= 1.0 and y2 <= 1.0:
            return self
        x1, y1 = max(x1, 0.0), max(y1, 0.0)
        x2, y2 = min(x2, 1.0), min(y2, 1.0)
        x2, y2 = max(x2, x1 + 1e-12), max(y2, y1 + 1e-12)
        return BBox.from_corners(x1, y1, x2, y2, class_id=self.class_id,
                                 confidence=self.confidence, unit=self.unit)

    def to_px(self, width: int, height: int) -> BBox:
        if self.unit == "px":
            return self
        return replace(self, cx=self.cx * width, cy=self.cy * height,
                       w=self.w * width, h=self.h * height, unit="px")

    def to_norm(self, width: int, height: int) -> BBox:
        if self.unit == "norm":
            return self
        return replace(self, cx=self.cx / width, cy=self.cy / height,
                       w=self.w / width, h=self.h / height, unit="norm")


@dataclass(frozen=True)
class EnclosureStats:
    iou: float
    center_dist_sq: float
    c2: float
    cw2: float
    ch2: float


def _arr(b) -> np.ndarray:
    if isinstance(b, BBox):
        return b.as_array()
    return np.asarray(b, dtype=np.float64)


def _check(b: np.ndarray) -> None:
    if np.any(b[..., 2] <= 0) or np.any(b[..., 3] <= 0):
        raise DomainError("box extents must be positive")


# ---------------------------------------------------------------------------
# vectorized core
# ---------------------------------------------------------------------------

def iou_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IoU of (..., 4) arrays in (cx, cy, w, h) form."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = np.minimum(a[..., 0] + a[..., 2] / 2, b[..., 0] + b[..., 2] / 2) - \
        np.maximum(a[..., 0] - a[..., 2] / 2, b[..., 0] - b[..., 2] / 2)
    ih = np.minimum(a[..., 1] + a[..., 3] / 2, b[..., 1] + b[..., 3] / 2) - \
        np.maximum(a[..., 1] - a[..., 3] / 2, b[..., 1] - b[..., 3] / 2)
    inter = np.maximum(iw, 0) * np.maximum(ih, 0)
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return inter / union


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between (n, 4) and (m, 4) arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return iou_array(a[:, None, :], b[None, :, :])


def _terms(pred: np.ndarray, gt: np.ndarray) -> dict[str, np.ndarray]:
    """Forward quantities and their partials w.r.t. pred (cx, cy, w, h)."""
    px, py, pw, ph = (pred[..., i] for i in range(4))
    gx, gy, gw, gh = (gt[..., i] for i in range(4))
    px1, px2, py1, py2 = px - pw / 2, px + pw / 2, py - ph / 2, py + ph / 2
    gx1, gx2, gy1, gy2 = gx - gw / 2, gx + gw / 2, gy - gh / 2, gy + gh / 2

    # intersection along x: min(px2, gx2) - max(px1, gx1), clamped at 0
    right_p = px2 < gx2
    left_p = px1 > gx1
    iw_raw = np.where(right_p, px2, gx2) - np.where(left_p, px1, gx1)
    ih_raw = np.where(py2 < gy2, py2, gy2) - np.where(py1 > gy1, py1, gy1)
    iw = np.maximum(iw_raw, 0.0)
    ih = np.maximum(ih_raw, 0.0)
    xon = iw_raw > 0
    yon = ih_raw > 0
    # d iw / d (px, pw); px2 = px + pw/2, px1 = px - pw/2
    diw_dpx = np.where(xon, right_p.astype(float) - left_p.astype(float), 0.0)
    diw_dpw = np.where(xon, 0.5 * right_p + 0.5 * left_p, 0.0)
    up = py2 < gy2
    lo = py1 > gy1
    dih_dpy = np.where(yon, up.astype(float) - lo.astype(float), 0.0)
    dih_dph = np.where(yon, 0.5 * up + 0.5 * lo, 0.0)

    inter = iw * ih
    union = pw * ph + gw * gh - inter
    iou = inter / union
    dI = np.stack([diw_dpx * ih, dih_dpy * iw, diw_dpw * ih, dih_dph * iw], -1)
    dU = np.stack([np.zeros_like(pw), np.zeros_like(pw), ph, pw], -1) - dI
    diou = (dI * union[..., None] - inter[..., None] * dU) / (union ** 2)[..., None]

    # enclosing box
    ex_hi_p = px2 > gx2
    ex_lo_p = px1 < gx1
    cw = np.where(ex_hi_p, px2, gx2) - np.where(ex_lo_p, px1, gx1)
    ey_hi_p = py2 > gy2
    ey_lo_p = py1 < gy1
    ch = np.where(ey_hi_p, py2, gy2) - np.where(ey_lo_p, py1, gy1)
    dcw = np.stack([ex_hi_p.astype(float) - ex_lo_p, np.zeros_like(pw),
                    0.5 * ex_hi_p + 0.5 * ex_lo_p, np.zeros_like(pw)], -1)
    dch = np.stack([np.zeros_like(pw), ey_hi_p.astype(float) - ey_lo_p,
                    np.zeros_like(pw), 0.5 * ey_hi_p + 0.5 * ey_lo_p], -1)
    cw2_raw = cw * cw
    ch2_raw = ch * ch
    c2_raw = cw2_raw + ch2_raw
    dcw2 = 2 * cw[..., None] * dcw
    dch2 = 2 * ch[..., None] * dch
    c2 = np.maximum(c2_raw, CLAMP)
    cw2 = np.maximum(cw2_raw, CLAMP)
    ch2 = np.maximum(ch2_raw, CLAMP)
    dc2 = np.where((c2_raw > CLAMP)[..., None], dcw2 + dch2, 0.0)
    dcw2 = np.where((cw2_raw > CLAMP)[..., None], dcw2, 0.0)
    dch2 = np.where((ch2_raw > CLAMP)[..., None], dch2, 0.0)

    rho2 = (px - gx) ** 2 + (py - gy) ** 2
    drho2 = np.stack([2 * (px - gx), 2 * (py - gy), np.zeros_like(pw), np.zeros_like(pw)], -1)
    return {"iou": iou, "diou": diou, "rho2": rho2, "drho2": drho2, "c2": c2, "dc2": dc2,
                "cw2": cw2, "dcw2": dcw2, "ch2": ch2, "dch2": dch2, "pw": pw, "ph": ph, "gw": gw, "gh": gh}


def _ratio(num, dnum, den, dden):
    return num / den, (dnum * den[..., None] - num[..., None] * dden) / (den ** 2)[..., None]


def eiou_terms(pred, gt) -> tuple[np.ndarray, np.ndarray, dict]:
    """EIoU loss and its gradient w.r.t. pred, vectorized over leading axes."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    t = _terms(pred, gt)
    zero = np.zeros_like(t["pw"])
    dist, ddist = _ratio(t["rho2"], t["drho2"], t["c2"], t["dc2"])
    dw = t["pw"] - t["gw"]
    dh = t["ph"] - t["gh"]
    asp_w, dasp_w = _ratio(dw * dw, np.stack([zero, zero, 2 * dw, zero], -1), t["cw2"], t["dcw2"])
    asp_h, dasp_h = _ratio(dh * dh, np.stack([zero, zero, zero, 2 * dh], -1), t["ch2"], t["dch2"])
    loss = 1.0 - t["iou"] + dist + asp_w + asp_h
    grad = -t["diou"] + ddist + dasp_w + dasp_h
    return loss, grad, t


def iou_loss_terms(pred, gt):
    t = _terms(np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64))
    return 1.0 - t["iou"], -t["diou"], t


def focal_eiou_terms(pred, gt, gamma: float = 0.5):
    """``IoU**gamma * EIoU``; the gradient is taken as 0 where IoU == 0."""
    if gamma < 0:
        raise DomainError("focal gamma must be >= 0")
    loss, grad, t = eiou_terms(pred, gt)
    iou = t["iou"]
    if gamma == 0:
        return loss, grad, t
    w = iou ** gamma
    with np.errstate(divide="ignore", invalid="ignore"):
        dw = np.where(iou > 0, gamma * iou ** (gamma - 1), 0.0)[..., None] * t["diou"]
    return w * loss, w[..., None] * grad + loss[..., None] * dw, t


def ciou_terms(pred, gt):
    """CIoU loss; the trade-off weight alpha is held constant in the gradient."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    t = _terms(pred, gt)
    dist, ddist = _ratio(t["rho2"], t["drho2"], t["c2"], t["dc2"])
    pw, ph = t["pw"], t["ph"]
    diff = np.arctan(t["gw"] / t["gh"]) - np.arctan(pw / ph)
    v = 4.0 / math.pi ** 2 * diff ** 2
    denom = (1.0 - t["iou"]) + v
    alpha = np.where(denom > 0, v / np.where(denom > 0, denom, 1.0), 0.0)
    # d atan(w/h) / dw = h / (w^2 + h^2), / dh = -w / (w^2 + h^2)
    r2 = pw * pw + ph * ph
    zero = np.zeros_like(pw)
    dv = (-8.0 / math.pi ** 2 * diff)[..., None] * np.stack([zero, zero, ph / r2, -pw / r2], -1)
    loss = 1.0 - t["iou"] + dist + alpha * v
    grad = -t["diou"] + ddist + alpha[..., None] * dv
    return loss, grad, t


BOX_LOSSES = {
    "eiou": eiou_terms,
    "focal_eiou": focal_eiou_terms,
    "ciou": ciou_terms,
    "iou": iou_loss_terms,
}


# ---------------------------------------------------------------------------
# scalar API
# ---------------------------------------------------------------------------

def _pair(a, b):
    a, b = _arr(a), _arr(b)
    _check(a)
    _check(b)
    return a, b


def iou(a, b) -> float:
    a, b = _pair(a, b)
    return float(iou_array(a, b))


def eiou_loss(pred, gt) -> tuple[float, EnclosureStats]:
    """``1 - IoU + rho^2/c^2 + (w - w_gt)^2/Cw^2 + (h - h_gt)^2/Ch^2``."""
    p, g = _pair(pred, gt)
    loss, _, t = eiou_terms(p, g)
    stats = EnclosureStats(float(t["iou"]), float(t["rho2"]), float(t["c2"]),
                           float(t["cw2"]), float(t["ch2"]))
    return float(loss), stats


def eiou_grad(pred, gt) -> np.ndarray:
    """d EIoU / d (cx, cy, w, h) of ``pred``."""
    p, g = _pair(pred, gt)
    return eiou_terms(p, g)[1]


def focal_eiou_loss(pred, gt, gamma: float = 0.5) -> float:
    p, g = _pair(pred, gt)
    return float(focal_eiou_terms(p, g, gamma)[0])


def ciou_loss(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return float(ciou_terms(p, g)[0])


# ---------------------------------------------------------------------------
# NMS
# ---------------------------------------------------------------------------

def nms(dets: Sequence[BBox], iou_thr: float = 0.60) -> list[BBox]:
    """Greedy suppression by descending confidence; ties keep input order.

    A box is dropped when its IoU with an already kept box exceeds ``iou_thr``.
    """
    if not dets:
        return []
    if any(d.confidence is None for d in dets):
        raise DomainError("nms needs confidences on every detection")
    conf = np.array([d.confidence for d in dets])
    order = np.argsort(-conf, kind="stable")
    boxes = np.stack([d.as_array() for d in dets])
    ious = pairwise_iou(boxes, boxes)
    alive = np.ones(len(dets), dtype=bool)
    keep = []
    for i in order:
        if not alive[i]:
            continue
        keep.append(i)
        alive &= ~(ious[i] > iou_thr)
    return [dets[i] for i in keep]
