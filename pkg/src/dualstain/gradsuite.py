"""Randomized finite-difference checks for every differentiable block.

Each ``check_*`` function draws one random configuration, builds a scalar
objective (a fixed random projection of the block output, so no coordinate
is trivially symmetric) and returns the worst relative error reported by
:func:`dualstain.tensorcore.grad_check`, in high precision.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import boxgeom
from . import neuralblocks as nbk
from . import tensorcore as tc
from .tensorcore import Param

BLOCK_TOL = 1e-4
EIOU_TOL = 1e-6


def _objective(out: tc.Tensor, rng: np.random.Generator):
    proj = rng.normal(size=out.shape)
    return lambda t: tc.sum(tc.mul(t, proj))


def check_swin(rng: np.random.Generator) -> float:
    window = int(rng.choice([2, 4]))
    heads = int(rng.choice([1, 2]))
    dim = heads * int(rng.choice([2, 4]))
    h, w = (int(v) for v in rng.integers(window, 2 * window + 2, size=2))
    shift = int(rng.choice([0, window // 2]))
    p = nbk.SwinParams.init(dim, heads, window, shift, mlp_ratio=2, precision="high", rng=rng)
    x = Param(rng.normal(size=(1, h, w, dim)), "high", "x")
    obj = _objective(nbk.swin_block(x, p), rng)
    return tc.grad_check(lambda: obj(nbk.swin_block(x, p)), [x, *p.params()])


def check_gam(rng: np.random.Generator) -> float:
    reduction = int(rng.choice([2, 4]))
    c = reduction * int(rng.choice([1, 2]))
    kernel = int(rng.choice([3, 5, 7]))
    h, w = (int(v) for v in rng.integers(2, 6, size=2))
    p = nbk.GamParams.init(c, reduction, kernel, precision="high",
                           seed=int(rng.integers(2**31)))
    x = Param(rng.normal(size=(1, c, h, w)), "high", "x")
    obj = _objective(nbk.gam(x, p), rng)
    return tc.grad_check(lambda: obj(nbk.gam(x, p)), [x, *p.params()])


def check_bifpn(rng: np.random.Generator) -> float:
    n = int(rng.integers(2, 4))
    shape = (1, int(rng.integers(1, 4)), int(rng.integers(2, 5)), int(rng.integers(2, 5)))
    xs = [Param(rng.normal(size=shape), "high", f"x{i}") for i in range(n)]
    fw = nbk.FusionWeights.init(n, precision="high")
    # keep the relu on the weights away from its kink
    fw.lam.data[...] = rng.uniform(0.2, 2.0, size=n)
    obj = _objective(nbk.bifpn_fuse(xs, fw), rng)
    return tc.grad_check(lambda: obj(nbk.bifpn_fuse(xs, fw)), [*xs, *fw.params()])


def check_spp(rng: np.random.Generator) -> float:
    kernels = tuple(sorted(rng.choice([3, 5, 7, 9], size=int(rng.integers(1, 4)),
                                      replace=False).tolist()))
    shape = (1, int(rng.integers(1, 3)), int(rng.integers(3, 8)), int(rng.integers(3, 8)))
    x = Param(rng.normal(size=shape), "high", "x")
    cfg = nbk.SppConfig(kernels)
    obj = _objective(nbk.spp(x, cfg), rng)
    return tc.grad_check(lambda: obj(nbk.spp(x, cfg)), [x])


def random_box_pair(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    p = np.concatenate([rng.uniform(-1, 1, 2), rng.uniform(0.2, 2.0, 2)])
    g = np.concatenate([p[:2] + rng.normal(0, 0.5, 2), rng.uniform(0.2, 2.0, 2)])
    return p, g


def check_eiou(rng: np.random.Generator, eps: float = 1e-6) -> float:
    """Analytic EIoU gradient against central differences of the loss."""
    p, g = random_box_pair(rng)
    analytic = boxgeom.eiou_grad(p, g)
    numeric = np.zeros(4)
    for i in range(4):
        d = np.zeros(4)
        d[i] = eps
        numeric[i] = (boxgeom.eiou_loss(p + d, g)[0] - boxgeom.eiou_loss(p - d, g)[0]) / (2 * eps)
    s = max(1e-3 * np.abs(analytic).max(), 1e-12)
    return float((np.abs(analytic - numeric)
                  / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), s)).max())


CHECKS = {
    "eiou": (check_eiou, EIOU_TOL),
    "swin": (check_swin, BLOCK_TOL),
    "gam": (check_gam, BLOCK_TOL),
    "bifpn": (check_bifpn, BLOCK_TOL),
    "spp": (check_spp, BLOCK_TOL),
}


@dataclass
class SuiteResult:
    block: str
    trials: int
    worst: float
    tol: float

    @property
    def ok(self) -> bool:
        return math.isfinite(self.worst) and self.worst < self.tol

    def to_dict(self) -> dict:
        return {"block": self.block, "trials": self.trials, "worst_rel_err": self.worst,
                "tol": self.tol, "ok": self.ok}


def run_suite(blocks=tuple(CHECKS), trials: int = 50, seed: int = 0) -> list[SuiteResult]:
    out = []
    for name in blocks:
        fn, tol = CHECKS[name]
        rng = np.random.default_rng([seed, sorted(CHECKS).index(name)])
        worst = max(fn(rng) for _ in range(trials))
        out.append(SuiteResult(name, trials, worst, tol))
    return out
