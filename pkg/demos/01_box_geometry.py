"""Box losses and NMS on hand-sized examples.

Run: python demos/01_box_geometry.py
"""
import numpy as np

from dualstain import boxgeom
from dualstain.boxgeom import BBox

# %% Two 2x2 boxes side by side: they touch but do not overlap.
a, b = (0.0, 0.0, 2.0, 2.0), (2.0, 0.0, 2.0, 2.0)
loss, stats = boxgeom.eiou_loss(a, b)
print(f"IoU {stats.iou}, center distance^2 {stats.center_dist_sq}, enclosing diag^2 {stats.c2}")
print(f"EIoU = 1 - IoU + rho^2/c^2 + 0 + 0 = {loss}")
print(f"CIoU on the same pair = {boxgeom.ciou_loss(a, b)} (equal aspect ratios, no v term)")
print(f"Focal-EIoU = {boxgeom.focal_eiou_loss(a, b)} (IoU^gamma kills disjoint pairs)")

# %% The analytic gradient pulls the prediction towards the target.
g = boxgeom.eiou_grad(a, b)
print(f"dEIoU/d(cx, cy, w, h) = {np.round(g, 4)}")

# %% Greedy NMS at the default 0.60 IoU threshold.
dets = [BBox(0.50, 0.50, 0.2, 0.2, confidence=0.9),
        BBox(0.52, 0.50, 0.2, 0.2, confidence=0.8),   # IoU ~0.82 with the first
        BBox(0.62, 0.50, 0.2, 0.2, confidence=0.7)]   # IoU ~0.25 with the first
kept = boxgeom.nms(dets, 0.60)
print(f"NMS keeps {len(kept)} of {len(dets)}: confidences {[d.confidence for d in kept]}")
