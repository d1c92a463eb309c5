"""Independent reference implementations used only by the tests.

Each oracle is written the slow, obvious way (explicit loops, scalar
arithmetic) and shares no code with the package under test.
"""
from __future__ import annotations

import math
from itertools import product

import numpy as np


def conv2d_loop(x, k, bias=None, stride=1, pad=0):
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, ic, i * stride + u, j * stride + v] * k[oc, ic, u, v]
                    out[b, oc, i, j] = acc + (bias[oc] if bias is not None else 0.0)
    return out


def maxpool_loop(x, kernel, stride=1, pad=0):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kernel) // stride + 1
    wo = (w + 2 * pad - kernel) // stride + 1
    out = np.empty((n, c, ho, wo))
    for b, ch, i, j in product(range(n), range(c), range(ho), range(wo)):
        best = -math.inf
        for u in range(kernel):
            for v in range(kernel):
                y, z = i * stride + u - pad, j * stride + v - pad
                if 0 <= y < h and 0 <= z < w:
                    best = max(best, x[b, ch, y, z])
        out[b, ch, i, j] = best
    return out


def gelu_erf(x: float) -> float:
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def eiou_reference(p, g) -> float:
    """1 - IoU + rho^2/c^2 + (w - wg)^2/Cw^2 + (h - hg)^2/Ch^2, scalar arithmetic."""
    px1, py1, px2, py2 = p[0] - p[2] / 2, p[1] - p[3] / 2, p[0] + p[2] / 2, p[1] + p[3] / 2
    gx1, gy1, gx2, gy2 = g[0] - g[2] / 2, g[1] - g[3] / 2, g[0] + g[2] / 2, g[1] + g[3] / 2
    iw = max(0.0, min(px2, gx2) - max(px1, gx1))
    ih = max(0.0, min(py2, gy2) - max(py1, gy1))
    inter = iw * ih
    union = p[2] * p[3] + g[2] * g[3] - inter
    cw = max(px2, gx2) - min(px1, gx1)
    ch = max(py2, gy2) - min(py1, gy1)
    rho2 = (p[0] - g[0]) ** 2 + (p[1] - g[1]) ** 2
    return (1 - inter / union + rho2 / (cw ** 2 + ch ** 2)
            + (p[2] - g[2]) ** 2 / cw ** 2 + (p[3] - g[3]) ** 2 / ch ** 2)


def _iou_scalar(a, b) -> float:
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def ciou_scalar(p, g) -> float:
    """1 - IoU + rho^2/c^2 + alpha * v with the usual aspect term."""
    iou = _iou_scalar(p, g)
    px1, py1, px2, py2 = p[0] - p[2] / 2, p[1] - p[3] / 2, p[0] + p[2] / 2, p[1] + p[3] / 2
    gx1, gy1, gx2, gy2 = g[0] - g[2] / 2, g[1] - g[3] / 2, g[0] + g[2] / 2, g[1] + g[3] / 2
    cw = max(px2, gx2) - min(px1, gx1)
    ch = max(py2, gy2) - min(py1, gy1)
    rho2 = (p[0] - g[0]) ** 2 + (p[1] - g[1]) ** 2
    v = 4 / math.pi ** 2 * (math.atan(g[2] / g[3]) - math.atan(p[2] / p[3])) ** 2
    alpha = v / (1 - iou + v) if v > 0 else 0.0
    return 1 - iou + rho2 / (cw ** 2 + ch ** 2) + alpha * v


def brute_force_ap(dets, gts, iou_thr):
    """AP by enumerating every confidence cutoff.

    ``dets`` is a list of (image, box, conf), ``gts`` a list of (image, box).
    For each cutoff k the top-k detections are matched from scratch
    (greedy, highest IoU, one GT per detection) to get (recall_k, precision_k);
    interpolated precision at recall r is the best precision over cutoffs
    reaching r, and AP averages it over r = 0, 0.01, ..., 1.
    """
    n_gt = len(gts)
    if n_gt == 0 or not dets:
        return 0.0
    ranked = sorted(dets, key=lambda d: -d[2])
    points = []
    for k in range(1, len(ranked) + 1):
        top = ranked[:k]
        tp = 0
        for img in {d[0] for d in top}:
            g_here = [g[1] for g in gts if g[0] == img]
            taken = [False] * len(g_here)
            for _, box, _ in [d for d in top if d[0] == img]:
                best, best_j = -1.0, -1
                for j, gb in enumerate(g_here):
                    if taken[j]:
                        continue
                    v = _iou_scalar(box, gb)
                    if v > best:
                        best, best_j = v, j
                if best_j >= 0 and best >= iou_thr:
                    taken[best_j] = True
                    tp += 1
        points.append((tp / n_gt, tp / k))
    interp = []
    for i in range(101):
        r = i / 100
        reach = [p for rec, p in points if rec >= r]
        interp.append(max(reach) if reach else 0.0)
    return math.fsum(interp) / 101


def shifted_window_origins(h, w, window, shift):
    """Per shifted-grid token: (wrapped_y, wrapped_x, is_pad).

    Token (i, j) of the rolled grid holds original pixel ((i+s) % Hp, (j+s) % Wp).
    Two tokens share an origin region iff both wrap flags agree.
    """
    hp = -(-h // window) * window
    wp = -(-w // window) * window
    out = {}
    for i in range(hp):
        for j in range(wp):
            oi, oj = (i + shift) % hp, (j + shift) % wp
            out[i, j] = (i + shift >= hp, j + shift >= wp, oi >= h or oj >= w)
    return out, hp, wp


def forbidden_pairs(h, w, window, shift):
    """(window index, query, key) triples whose tokens come from different
    regions of the unshifted map, or pair a pad token with a real one."""
    origin, hp, wp = shifted_window_origins(h, w, window, shift)
    nwx = wp // window
    pairs = []
    for wi in range((hp // window) * nwx):
        wr, wc = divmod(wi, nwx)
        toks = [(wr * window + r, wc * window + c) for r in range(window) for c in range(window)]
        for a, ta in enumerate(toks):
            for b, tb in enumerate(toks):
                oa, ob = origin[ta], origin[tb]
                if oa[2] != ob[2] or (not oa[2] and oa[:2] != ob[:2]):
                    pairs.append((wi, a, b))
    return pairs
