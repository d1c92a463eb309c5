"""A deliberately small single-scale, anchor-free detector.

This is not YOLOv5.  It is the smallest network that runs every block from
:mod:`dualstain.neuralblocks` end to end::

    image -> 3 strided 3x3 convs (stem, stride 8)
          -> Swin pair (shift 0, window/2)           [backbone tail]
          -> fast-normalized fusion of {stem, swin}
          -> SPP (identity + 5/9/13 max-pools)        [between concat and head]
          -> GAM                                      [pre-head]
          -> 3x3 conv, relu, 1x1 conv -> 5 channels per cell

Channel 0 is objectness; 1-2 are sigmoid center offsets inside the cell;
3-4 are log-scale width/height relative to a fixed prior.  The cell that
contains a ground-truth center is its only positive.
"""
from __future__ import annotations

import csv
import io
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from . import boxgeom
from . import neuralblocks as nbk
from . import tensorcore as tc
from .boxgeom import BBox
from .datasetkit import Sample
from .tensorcore import Param, Tensor

PLACEMENTS = {
    "swin": ("backbone_tail", None),
    "gam": ("pre_head", None),
    "spp": ("neck", None),
    "fusion": ("neck", None),
}


class ConfigError(ValueError):
    """Invalid detector or training configuration."""


class ProtocolError(ValueError):
    """Training inputs unusable (e.g. empty dataset)."""


class TrainingDiverged(RuntimeError):
    """A loss component became non-finite."""


@dataclass
class DetectorConfig:
    input_size: int = 128
    stem_channels: tuple[int, int, int] = (16, 16, 16)
    swin: str | None = "backbone_tail"
    swin_window: int = 4
    swin_heads: int = 2
    fusion: str | None = "neck"
    spp: str | None = "neck"
    spp_kernels: tuple[int, ...] = (5, 9, 13)
    gam: str | None = "pre_head"
    gam_reduction: int = 4
    head_channels: int = 32
    box_prior: float = 0.125
    seed: int = 0
    precision: str = "standard"

    def __post_init__(self):
        allowed = {"swin": "backbone_tail", "fusion": "neck", "spp": "neck", "gam": "pre_head"}
        for block, where in allowed.items():
            v = getattr(self, block)
            if v is not None and v != where:
                raise ConfigError(f"{block} placement {v!r} not supported (use {where!r} "
                                  "or None)")
        if self.fusion and not self.swin:
            raise ConfigError("fusion combines stem and swin features; it needs the swin block")
        if self.input_size % 8:
            raise ConfigError("input size must be a multiple of the stride (8)")

    @property
    def stride(self) -> int:
        return 8

    @property
    def grid(self) -> int:
        return self.input_size // self.stride

    @property
    def head_in(self) -> int:
        c = self.stem_channels[-1]
        return c * (1 + len(self.spp_kernels)) if self.spp else c


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    max_steps: int | None = None
    lr0: float = 0.01
    lrf: float = 0.0001
    momentum: float = 0.937
    weight_decay: float = 0.0005
    warmup_steps: int = 20
    box_loss: str = "eiou"
    box_gain: float = 5.0
    obj_gain: float = 3.0
    obj_pos_weight: float = 10.0
    grad_clip: float | None = 10.0
    hflip: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.lrf > self.lr0:
            raise ConfigError("final learning rate must not exceed the initial one")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be >= 0")
        if self.box_loss not in boxgeom.BOX_LOSSES:
            raise ConfigError(f"unknown box loss {self.box_loss!r}")


def cosine_lr(step: int, total: int, lr0: float, lrf: float, warmup: int = 0) -> float:
    """Cosine decay from ``lr0`` at step 0 to ``lrf`` at the last step."""
    if total <= 1:
        return lrf
    t = min(max(step, 0), total - 1) / (total - 1)
    lr = lrf + 0.5 * (lr0 - lrf) * (1.0 + math.cos(math.pi * t))
    if warmup and step < warmup:
        lr *= (step + 1) / warmup
    return lr


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class Detector:
    def __init__(self, cfg: DetectorConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        p = cfg.precision
        c1, c2, c3 = cfg.stem_channels
        self.stem = []
        cin = 3
        for i, c in enumerate((c1, c2, c3)):
            k = Param(rng.normal(0, math.sqrt(2.0 / (cin * 9)), (c, cin, 3, 3)), p, f"stem{i}.k")
            b = Param(np.zeros(c), p, f"stem{i}.b")
            self.stem.append((k, b))
            cin = c
        self.swin = (nbk.swin_pair(c3, cfg.swin_heads, cfg.swin_window,
                                   seed=int(rng.integers(2**31)), precision=p)
                     if cfg.swin else [])
        self.fusion = nbk.FusionWeights.init(2, precision=p) if cfg.fusion else None
        self.spp_cfg = nbk.SppConfig(tuple(cfg.spp_kernels)) if cfg.spp else None
        self.gam = (nbk.GamParams.init(cfg.head_in, cfg.gam_reduction,
                                       seed=int(rng.integers(2**31)), precision=p)
                    if cfg.gam else None)
        hc = cfg.head_channels
        self.head1_k = Param(rng.normal(0, math.sqrt(2.0 / (cfg.head_in * 9)),
                                        (hc, cfg.head_in, 3, 3)), p, "head1.k")
        self.head1_b = Param(np.zeros(hc), p, "head1.b")
        self.head2_k = Param(rng.normal(0, 0.01, (5, hc, 1, 1)), p, "head2.k")
        prior = 0.02
        self.head2_b = Param(np.array([math.log(prior / (1 - prior)), 0, 0, 0, 0]), p,
                             "head2.b")

    # -- parameters ----------------------------------------------------------
    def named_params(self) -> list[tuple[str, Param]]:
        out = []
        for i, (k, b) in enumerate(self.stem):
            out += [(f"stem{i}.k", k), (f"stem{i}.b", b)]
        for j, sp in enumerate(self.swin):
            out += sp.named_params(f"swin{j}.")
        if self.fusion is not None:
            out += self.fusion.named_params("fusion.")
        if self.gam is not None:
            out += self.gam.named_params("gam.")
        out += [("head1.k", self.head1_k), ("head1.b", self.head1_b),
                ("head2.k", self.head2_k), ("head2.b", self.head2_b)]
        return out

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params()))

    def save(self, path) -> None:
        nbk.save_params(path, self.named_params(), {"config": _cfg_json(self.cfg)})

    @classmethod
    def load(cls, path) -> Detector:
        arrays, meta = nbk.load_params(path)
        cfg = DetectorConfig(**_cfg_from_json(meta["config"]))
        model = cls(cfg)
        for name, prm in model.named_params():
            prm.data[...] = arrays[name]
        return model

    # -- forward ------------------------------------------------------------
    def head_input(self, x: Tensor) -> Tensor:
        for k, b in self.stem:
            x = tc.relu(tc.conv2d(x, k, b, stride=2, pad=1))
        feat = x
        if self.swin:
            t = tc.permute(x, (0, 2, 3, 1))
            for sp in self.swin:
                t = nbk.swin_block(t, sp)
            sw = tc.permute(t, (0, 3, 1, 2))
            feat = nbk.bifpn_fuse([x, sw], self.fusion) if self.fusion is not None else sw
        if self.spp_cfg is not None:
            feat = nbk.spp(feat, self.spp_cfg)
        if self.gam is not None:
            feat = nbk.gam(feat, self.gam)
        return feat

    def forward(self, images: np.ndarray | Tensor) -> Tensor:
        """(N, 3, S, S) in [0, 1] -> raw head output (N, 5, S/8, S/8)."""
        x = images if isinstance(images, Tensor) else Tensor(images, self.cfg.precision)
        feat = self.head_input(x)
        h = tc.relu(tc.conv2d(feat, self.head1_k, self.head1_b, pad=1))
        return tc.conv2d(h, self.head2_k, self.head2_b)

    __call__ = forward


def _cfg_json(cfg: DetectorConfig) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _cfg_from_json(d: dict) -> dict:
    d = dict(d)
    for k in ("stem_channels", "spp_kernels"):
        d[k] = tuple(d[k])
    return d


def build_model(cfg: DetectorConfig | None = None) -> Detector:
    return Detector(cfg or DetectorConfig())


# ---------------------------------------------------------------------------
# decoding and targets
# ---------------------------------------------------------------------------

def decode_cells(raw: Tensor, prior: float, cell_rows: np.ndarray | None = None) -> Tensor:
    """Map head channels 1-4 of selected cells to normalized (cx, cy, w, h).

    ``cell_rows`` indexes rows of the flattened (N * G * G) cell list.
    """
    n, _, g, _ = raw.shape
    flat = tc.reshape(tc.permute(raw, (0, 2, 3, 1)), (n * g * g, 5))
    if cell_rows is None:
        cell_rows = np.arange(n * g * g)
    sel = tc.take_rows(flat, cell_rows)
    gy, gx = np.divmod(cell_rows % (g * g), g)
    offs = tc.sigmoid(tc.crop(sel, (slice(None), slice(1, 3))))
    grid = np.stack([gx, gy], axis=1).astype(raw.data.dtype)
    centers = tc.mul(tc.add(offs, grid), 1.0 / g)
    sizes = tc.mul(tc.exp(tc.clip(tc.crop(sel, (slice(None), slice(3, 5))), -4.0, 4.0)), prior)
    return tc.concat([centers, sizes], axis=1)


def build_targets(boxes_per_image: Sequence[Sequence[BBox]], grid: int
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Objectness target map (N, G, G), positive cell rows, and their GT boxes.

    When two centers land in one cell the larger box wins.
    """
    n = len(boxes_per_image)
    obj = np.zeros((n, grid, grid))
    chosen: dict[int, BBox] = {}
    for i, boxes in enumerate(boxes_per_image):
        for b in boxes:
            gx = min(int(b.cx * grid), grid - 1)
            gy = min(int(b.cy * grid), grid - 1)
            row = i * grid * grid + gy * grid + gx
            if row not in chosen or b.area > chosen[row].area:
                chosen[row] = b
            obj[i, gy, gx] = 1.0
    rows = np.array(sorted(chosen), dtype=np.int64)
    gts = np.array([chosen[r].as_array() for r in rows]).reshape(-1, 4)
    return obj, rows, gts


def box_loss(pred: Tensor, gt: np.ndarray, kind: str = "eiou") -> Tensor:
    """Mean box-regression loss over positives, backed by boxgeom's analytic gradients."""
    if pred.shape[0] == 0:
        return tc.Tensor(np.zeros((), dtype=pred.data.dtype))
    loss, grad, _ = boxgeom.BOX_LOSSES[kind](pred.data.astype(np.float64), gt)
    n = pred.shape[0]
    val = np.asarray(loss.mean(), dtype=pred.data.dtype)
    g = (grad / n).astype(pred.data.dtype)
    return tc.function(val, (pred,), lambda up: (up * g,))


def loss_terms(model: Detector, images: np.ndarray, boxes: Sequence[Sequence[BBox]],
               tcfg: TrainConfig) -> tuple[Tensor, dict[str, float]]:
    raw = model(images)
    n, _, g, _ = raw.shape
    obj_t, rows, gts = build_targets(boxes, g)
    logits = tc.reshape(tc.crop(raw, (slice(None), slice(0, 1))), (n, g, g))
    weights = np.where(obj_t > 0, tcfg.obj_pos_weight, 1.0)
    obj = tc.mul(tc.bce_with_logits(logits, obj_t, weights), 1.0 / (n * g * g))
    pred = decode_cells(raw, model.cfg.box_prior, rows)
    bl = box_loss(pred, gts, tcfg.box_loss)
    total = tc.add(tc.mul(obj, tcfg.obj_gain), tc.mul(bl, tcfg.box_gain))
    return total, {"total": float(total.data), "obj": float(obj.data), "box": float(bl.data)}


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "epoch", "lr", "total", "obj", "box"])
        for r in self.rows:
            w.writerow([r["step"], r["epoch"], f"{r['lr']:.8f}", f"{r['total']:.8f}",
                        f"{r['obj']:.8f}", f"{r['box']:.8f}"])
        return buf.getvalue()

    def losses(self, key: str = "total") -> np.ndarray:
        return np.array([r[key] for r in self.rows])


def to_batch(samples: Sequence[Sample], size: int, flip: np.ndarray | None = None
             ) -> tuple[np.ndarray, list[list[BBox]]]:
    imgs, boxes = [], []
    for i, s in enumerate(samples):
        img = s.load()
        if img.shape[0] != size or img.shape[1] != size:
            from PIL import Image
            img = np.asarray(Image.fromarray(img).resize((size, size), Image.BILINEAR))
        bx = list(s.boxes)
        if flip is not None and flip[i]:
            img = img[:, ::-1]
            bx = [BBox(1.0 - b.cx, b.cy, b.w, b.h, b.class_id) for b in bx]
        imgs.append(img.transpose(2, 0, 1))
        boxes.append(bx)
    return np.stack(imgs).astype(np.float32) / 255.0, boxes


class SGD:
    """Momentum SGD; weight decay applies to conv/linear weights only.

    With ``clip`` set, the raw gradient is rescaled so its global L2 norm
    never exceeds ``clip`` (guards the tiny unnormalized net against a
    single large step killing its relus).
    """

    def __init__(self, named: list[tuple[str, Param]], momentum: float, weight_decay: float,
                 clip: float | None = None):
        self.named = named
        self.momentum = momentum
        self.wd = weight_decay
        self.clip = clip
        self.buf = {id(p): np.zeros_like(p.data) for _, p in named}

    def grad_norm(self) -> float:
        return float(math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                                   for _, p in self.named)))

    def step(self, lr: float) -> None:
        scale = 1.0
        if self.clip:
            norm = self.grad_norm()
            if norm > self.clip:
                scale = self.clip / norm
        for name, p in self.named:
            g = p.grad * scale
            if p.data.ndim >= 2 and self.wd:
                g = g + self.wd * p.data
            b = self.buf[id(p)]
            b *= self.momentum
            b += g
            p.data -= (lr * b).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.zero_grad()


def train(model: Detector, dataset: Sequence[Sample], tcfg: TrainConfig | None = None,
          progress=None) -> TrainingLog:
    """Minibatch SGD with a cosine schedule from ``lr0`` to ``lrf``."""
    tcfg = tcfg or TrainConfig()
    dataset = sorted(dataset, key=lambda s: s.image_id)
    if not dataset:
        raise ProtocolError("training needs at least one image")
    rng = np.random.default_rng(tcfg.seed)
    steps_per_epoch = max(1, math.ceil(len(dataset) / tcfg.batch_size))
    total = tcfg.max_steps or tcfg.epochs * steps_per_epoch
    opt = SGD(model.named_params(), tcfg.momentum, tcfg.weight_decay, tcfg.grad_clip)
    log = TrainingLog()
    step = 0
    epoch = 0
    while step < total:
        perm = rng.permutation(len(dataset))
        for start in range(0, len(dataset), tcfg.batch_size):
            if step >= total:
                break
            batch = [dataset[i] for i in perm[start:start + tcfg.batch_size]]
            flip = rng.random(len(batch)) < tcfg.hflip
            images, boxes = to_batch(batch, model.cfg.input_size, flip)
            opt.zero_grad()
            loss, parts = loss_terms(model, images, boxes, tcfg)
            for k, v in parts.items():
                if not math.isfinite(v):
                    raise TrainingDiverged(f"non-finite {k} loss at step {step}")
            loss.backward()
            lr = cosine_lr(step, total, tcfg.lr0, tcfg.lrf, tcfg.warmup_steps)
            opt.step(lr)
            log.rows.append({"step": step, "epoch": epoch, "lr": lr, **parts})
            if progress is not None:
                progress(log.rows[-1])
            step += 1
        epoch += 1
    return log


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def predict(model: Detector, image: np.ndarray, conf_thr: float = 0.001, nms_thr: float = 0.60
            ) -> list[BBox]:
    """Decode every cell, keep confidence >= ``conf_thr``, then greedy NMS.

    ``image`` is an H x W x 3 uint8 raster.  The probability threshold used
    for P/R reporting is applied downstream in :func:`dualstain.evalkit.map_range`.
    """
    return predict_batch(model, [image], conf_thr, nms_thr)[0]


def predict_batch(model: Detector, images: Sequence[np.ndarray], conf_thr: float = 0.001,
                  nms_thr: float = 0.60) -> list[list[BBox]]:
    s = model.cfg.input_size
    batch, _ = to_batch([Sample(str(i), [], image=np.asarray(im)) for i, im in enumerate(images)],
                        s)
    raw = model(batch)
    n, _, g, _ = raw.shape
    boxes = decode_cells(raw, model.cfg.box_prior).data.astype(np.float64)
    conf = 1.0 / (1.0 + np.exp(-raw.data[:, 0].astype(np.float64).reshape(-1)))
    out = []
    for i in range(n):
        rows = np.arange(i * g * g, (i + 1) * g * g)
        dets = []
        for r in rows:
            if conf[r] < conf_thr:
                continue
            b = BBox(*boxes[r]).clipped()
            dets.append(b.with_confidence(float(conf[r])))
        out.append(boxgeom.nms(dets, nms_thr))
    return out


# ---------------------------------------------------------------------------
# evaluation and the annotation-quality experiment
# ---------------------------------------------------------------------------

def evaluate(model: Detector, samples: Sequence[Sample], conf_thr: float = 0.001,
             nms_thr: float = 0.60, prob_thr: float = 0.5):
    """Predict on every sample and score against its boxes."""
    from .evalkit import map_range

    samples = sorted(samples, key=lambda s: s.image_id)
    dets: dict[str, list[BBox]] = {}
    for start in range(0, len(samples), 16):
        chunk = samples[start:start + 16]
        preds = predict_batch(model, [s.load() for s in chunk], conf_thr, nms_thr)
        dets.update({s.image_id: p for s, p in zip(chunk, preds)})
    return map_range(dets, {s.image_id: list(s.boxes) for s in samples}, conf_thr=prob_thr)


def synthetic_split(seed: int, n_train: int = 64, n_test: int = 16
                    ) -> tuple[list[Sample], list, list[Sample]]:
    """Train samples, their registries, and held-out samples on detector-sized slides."""
    from .synthgen import detector_spec, generate_corpus

    train_rows = generate_corpus(n_train, seed, detector_spec, f"s{seed}_train")
    test_rows = generate_corpus(n_test, seed + 1_000_003, detector_spec, f"s{seed}_test")
    train_set = [Sample(i, list(b), image=img) for i, img, b, _ in train_rows]
    regs = [r for *_, r in train_rows]
    test_set = [Sample(i, list(b), image=img) for i, img, b, _ in test_rows]
    return train_set, regs, test_set


@dataclass
class QualityResult:
    seed: int
    defective: object  # EvalReport
    fixed: object
    defect_counts: dict[str, int]
    lint_counts: dict[str, int]

    @property
    def improved(self) -> bool:
        return self.fixed.map5095 >= self.defective.map5095


def quality_experiment(seed: int, steps: int = 200, defects=0.5,
                       tcfg: TrainConfig | None = None, dcfg: DetectorConfig | None = None
                       ) -> QualityResult:
    """Train twice from one initialization: on defect-injected labels and on
    the linter's autofixed version of the same labels; score both on clean
    held-out slides.

    ``defects`` is a :class:`~dualstain.synthgen.DefectSpec` or one rate for
    all four rules.  Detector-sized slides hold isolated cells only, so the
    loosen and delete defects are the ones exercised here.  Images the linter
    has nothing to say about keep their boxes untouched.
    """
    from .qclinter import lint_dataset
    from .synthgen import DefectSpec, inject_defects

    train_set, regs, test_set = synthetic_split(seed)
    dspec = defects if isinstance(defects, DefectSpec) else DefectSpec.uniform(defects, seed=seed)
    defective, log = [], []
    for s, reg in zip(train_set, regs):
        boxes, entries = inject_defects(s.boxes, reg, dspec, s.image_id)
        defective.append(Sample(s.image_id, boxes, image=s.image))
        log += entries
    report = lint_dataset(defective, autofix=True)
    flagged = {f.image_id for f in report.findings}
    fixed = [Sample(s.image_id, report.fixed[s.image_id] if s.image_id in flagged else s.boxes,
                    image=s.image) for s in defective]

    base_t = tcfg or TrainConfig()
    base_d = dcfg or DetectorConfig()
    results = {}
    for name, data in (("defective", defective), ("fixed", fixed)):
        model = build_model(DetectorConfig(**{**asdict(base_d), "seed": seed}))
        tc_ = TrainConfig(**{**asdict(base_t), "max_steps": steps, "seed": seed})
        train(model, data, tc_)
        results[name] = evaluate(model, test_set)
    rules = ("loosen", "merge", "delete", "diagonal")
    return QualityResult(seed, results["defective"], results["fixed"],
                         {r: sum(e["rule"] == r for e in log) for r in rules},
                         dict(report.summary["per_rule"]))
