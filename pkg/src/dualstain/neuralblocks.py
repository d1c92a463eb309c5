"""Swin window attention, GAM gating, fast-normalized fusion and SPP.

All blocks are plain functions over :class:`~dualstain.tensorcore.Tensor`
with their parameters bundled in small dataclasses.  Swin blocks take
channels-last tensors (N, H, W, C); GAM and SPP take NCHW.
"""
from __future__ import annotations

import json
import struct
from collections.abc import Iterator
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .tensorcore import Param, Tensor


class ConfigError(ValueError):
    """Invalid block configuration."""


def _init(rng: np.random.Generator, shape, fan_in: int, precision: str, name: str,
          scale: float = 1.0) -> Param:
    std = scale * np.sqrt(2.0 / fan_in)
    return Param(rng.normal(0.0, std, size=shape), precision=precision, name=name)


def _zeros(shape, precision: str, name: str) -> Param:
    return Param(np.zeros(shape), precision=precision, name=name)


def _ones(shape, precision: str, name: str) -> Param:
    return Param(np.ones(shape), precision=precision, name=name)


class _ParamBundle:
    """Mixin giving dataclasses of Params a stable ``named_params`` walk."""

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Param):
                yield prefix + f.name, v
            elif isinstance(v, _ParamBundle):
                yield from v.named_params(prefix + f.name + ".")

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]


# ---------------------------------------------------------------------------
# window partitioning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WindowLayout:
    """Bookkeeping needed to undo :func:`window_partition`."""
    n: int
    h: int
    w: int
    hp: int
    wp: int
    window: int
    shift: int

    @property
    def windows_per_image(self) -> int:
        return (self.hp // self.window) * (self.wp // self.window)


def window_partition(x: Tensor, window: int, shift: int = 0) -> tuple[Tensor, WindowLayout]:
    """Zero-pad H, W up to multiples of ``window``, roll by ``-shift``, then tile.

    Returns windows of shape (N * nW, window**2, C) in row-major window order.
    """
    if window <= 0:
        raise ConfigError(f"window size must be positive, got {window}")
    if not 0 <= shift < window:
        raise ConfigError(f"shift must satisfy 0 <= shift < window, got {shift}")
    n, h, w, c = x.shape
    hp = -(-h // window) * window
    wp = -(-w // window) * window
    if hp != h or wp != w:
        x = tc.pad(x, ((0, 0), (0, hp - h), (0, wp - w), (0, 0)))
    if shift:
        x = tc.roll(x, (-shift, -shift), (1, 2))
    m = window
    x = tc.reshape(x, (n, hp // m, m, wp // m, m, c))
    x = tc.permute(x, (0, 1, 3, 2, 4, 5))
    x = tc.reshape(x, (n * (hp // m) * (wp // m), m * m, c))
    return x, WindowLayout(n, h, w, hp, wp, window, shift)


def window_unpartition(windows: Tensor, layout: WindowLayout) -> Tensor:
    """Inverse of :func:`window_partition`, cropped back to the unpadded grid."""
    n, m = layout.n, layout.window
    c = windows.shape[-1]
    x = tc.reshape(windows, (n, layout.hp // m, layout.wp // m, m, m, c))
    x = tc.permute(x, (0, 1, 3, 2, 4, 5))
    x = tc.reshape(x, (n, layout.hp, layout.wp, c))
    if layout.shift:
        x = tc.roll(x, (layout.shift, layout.shift), (1, 2))
    if layout.hp != layout.h or layout.wp != layout.w:
        x = tc.crop(x, (slice(None), slice(0, layout.h), slice(0, layout.w), slice(None)))
    return x


def region_labels(layout: WindowLayout) -> np.ndarray:
    """Per-token region ids inside each window, shape (nW, M*M).

    Tokens that were not contiguous before the cyclic shift carry different
    ids, and padding tokens get an id of their own.
    """
    hp, wp, m, s = layout.hp, layout.wp, layout.window, layout.shift
    img = np.zeros((hp, wp), dtype=np.int64)
    if s:
        bands = (slice(0, -m), slice(-m, -s), slice(-s, None))
    else:
        bands = (slice(None),)
    cnt = 0
    for hs in bands:
        for ws in bands:
            img[hs, ws] = cnt
            cnt += 1
    pad = np.zeros((hp, wp), dtype=bool)
    pad[layout.h:, :] = True
    pad[:, layout.w:] = True
    if s:
        pad = np.roll(pad, (-s, -s), (0, 1))
    img = np.where(pad, -1, img)
    win = img.reshape(hp // m, m, wp // m, m).transpose(0, 2, 1, 3).reshape(-1, m * m)
    return win


def attention_mask(layout: WindowLayout) -> np.ndarray | None:
    """Additive mask (nW, M*M, M*M): 0 where attention is allowed, -inf elsewhere."""
    labels = region_labels(layout)
    if not layout.shift and layout.hp == layout.h and layout.wp == layout.w:
        return None
    same = labels[:, :, None] == labels[:, None, :]
    mask = np.where(same, 0.0, -np.inf)
    # padding queries still need one finite logit; let them see themselves
    idx = np.arange(labels.shape[1])
    mask[:, idx, idx] = 0.0
    return mask


# ---------------------------------------------------------------------------
# Swin block
# ---------------------------------------------------------------------------

@dataclass
class SwinParams(_ParamBundle):
    window: int
    num_heads: int
    ln1_g: Param
    ln1_b: Param
    wq: Param
    wk: Param
    wv: Param
    bq: Param
    bk: Param
    bv: Param
    wo: Param
    bo: Param
    ln2_g: Param
    ln2_b: Param
    w1: Param
    b1: Param
    w2: Param
    b2: Param
    shift: int = 0

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def init(cls, dim: int, num_heads: int, window: int = 8, shift: int | None = 0,
             mlp_ratio: int = 4, seed: int = 0, precision: str = "standard",
             rng: np.random.Generator | None = None) -> SwinParams:
        if dim % num_heads:
            raise ConfigError(f"embed dim {dim} not divisible by num_heads {num_heads}")
        if window <= 0:
            raise ConfigError(f"window size must be positive, got {window}")
        rng = rng if rng is not None else np.random.default_rng(seed)
        hid = dim * mlp_ratio
        p = precision
        return cls(
            window=window, num_heads=num_heads,
            shift=window // 2 if shift is None else shift,
            ln1_g=_ones(dim, p, "ln1_g"), ln1_b=_zeros(dim, p, "ln1_b"),
            wq=_init(rng, (dim, dim), dim, p, "wq", 0.5),
            wk=_init(rng, (dim, dim), dim, p, "wk", 0.5),
            wv=_init(rng, (dim, dim), dim, p, "wv", 0.5),
            bq=_zeros(dim, p, "bq"), bk=_zeros(dim, p, "bk"), bv=_zeros(dim, p, "bv"),
            wo=_init(rng, (dim, dim), dim, p, "wo", 0.5), bo=_zeros(dim, p, "bo"),
            ln2_g=_ones(dim, p, "ln2_g"), ln2_b=_zeros(dim, p, "ln2_b"),
            w1=_init(rng, (dim, hid), dim, p, "w1", 0.5), b1=_zeros(hid, p, "b1"),
            w2=_init(rng, (hid, dim), hid, p, "w2", 0.5), b2=_zeros(dim, p, "b2"),
        )


def wmsa(x: Tensor, params: SwinParams, shift: int = 0, masked: bool = True,
         return_attention: bool = False):
    """(Shifted-)window multi-head self-attention on an (N, H, W, C) tensor.

    With ``shift > 0`` logits between tokens from different pre-shift regions
    are set to -inf, so their attention weight is exactly zero.  Padding
    tokens are excluded the same way.  No relative position bias is used.
    """
    m, heads = params.window, params.num_heads
    c = x.shape[-1]
    dh = c // heads
    win, layout = window_partition(x, m, shift)
    b, t, _ = win.shape
    q = tc.linear(win, params.wq, params.bq)
    k = tc.linear(win, params.wk, params.bk)
    v = tc.linear(win, params.wv, params.bv)

    def heads_first(z):
        return tc.permute(tc.reshape(z, (b, t, heads, dh)), (0, 2, 1, 3))

    q, k, v = heads_first(q), heads_first(k), heads_first(v)
    logits = tc.mul(tc.matmul(q, tc.permute(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    mask = attention_mask(layout) if masked else None
    if mask is not None:
        nw = layout.windows_per_image
        full = np.tile(mask, (layout.n, 1, 1))[:, None, :, :]
        assert full.shape[0] == b == layout.n * nw
        logits = tc.add(logits, full.astype(logits.data.dtype))
    attn = tc.softmax(logits, axis=-1)
    y = tc.matmul(attn, v)
    y = tc.reshape(tc.permute(y, (0, 2, 1, 3)), (b, t, c))
    y = tc.linear(y, params.wo, params.bo)
    out = window_unpartition(y, layout)
    if return_attention:
        return out, attn.data, region_labels(layout)
    return out


def swin_block(x: Tensor, params: SwinParams, eps: float = 1e-5) -> Tensor:
    """``y = x + WMSA(LN(x)); out = y + MLP(LN(y))`` with GELU in the MLP."""
    y = tc.add(x, wmsa(tc.layer_norm(x, params.ln1_g, params.ln1_b, eps), params, params.shift))
    hdn = tc.gelu(tc.linear(tc.layer_norm(y, params.ln2_g, params.ln2_b, eps),
                            params.w1, params.b1))
    return tc.add(y, tc.linear(hdn, params.w2, params.b2))


def swin_pair(dim: int, num_heads: int, window: int = 8, seed: int = 0,
              precision: str = "standard") -> list[SwinParams]:
    """Two blocks with alternating shift 0 and window/2."""
    rng = np.random.default_rng(seed)
    return [SwinParams.init(dim, num_heads, window, 0, precision=precision, rng=rng),
            SwinParams.init(dim, num_heads, window, window // 2, precision=precision, rng=rng)]


# ---------------------------------------------------------------------------
# GAM
# ---------------------------------------------------------------------------

@dataclass
class GamParams(_ParamBundle):
    reduction: int
    mlp_w1: Param
    mlp_b1: Param
    mlp_w2: Param
    mlp_b2: Param
    conv1_k: Param
    conv1_b: Param
    conv2_k: Param
    conv2_b: Param

    @classmethod
    def init(cls, channels: int, reduction: int = 4, kernel: int = 7, seed: int = 0,
             precision: str = "standard", rng: np.random.Generator | None = None
             ) -> GamParams:
        if reduction <= 0 or channels % reduction:
            raise ConfigError(f"channels {channels} not divisible by reduction {reduction}")
        rng = rng if rng is not None else np.random.default_rng(seed)
        hid = channels // reduction
        p = precision
        return cls(
            reduction=reduction,
            mlp_w1=_init(rng, (channels, hid), channels, p, "mlp_w1", 0.5),
            mlp_b1=_zeros(hid, p, "mlp_b1"),
            mlp_w2=_init(rng, (hid, channels), hid, p, "mlp_w2", 0.5),
            mlp_b2=_zeros(channels, p, "mlp_b2"),
            conv1_k=_init(rng, (hid, channels, kernel, kernel), channels * kernel * kernel,
                          p, "conv1_k", 0.5),
            conv1_b=_zeros(hid, p, "conv1_b"),
            conv2_k=_init(rng, (channels, hid, kernel, kernel), hid * kernel * kernel,
                          p, "conv2_k", 0.5),
            conv2_b=_zeros(channels, p, "conv2_b"),
        )


def gam_gates(x: Tensor, params: GamParams) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (output, channel gate, spatial gate)."""
    n, c, _h, _w = x.shape
    if c != params.mlp_w1.shape[0]:
        raise ConfigError(f"GAM built for {params.mlp_w1.shape[0]} channels, got {c}")
    pooled = tc.mean(x, axis=(2, 3))                                   # (N, C)
    hid = tc.relu(tc.linear(pooled, params.mlp_w1, params.mlp_b1))
    cgate = tc.sigmoid(tc.linear(hid, params.mlp_w2, params.mlp_b2))  # (N, C)
    x1 = tc.mul(x, tc.reshape(cgate, (n, c, 1, 1)))
    pad = params.conv1_k.shape[-1] // 2
    s = tc.conv2d(x1, params.conv1_k, params.conv1_b, pad=pad)
    s = tc.conv2d(s, params.conv2_k, params.conv2_b, pad=pad)
    sgate = tc.sigmoid(s)
    return tc.mul(x1, sgate), cgate, sgate


def gam(x: Tensor, params: GamParams) -> Tensor:
    """Channel gate from an MLP over pooled channels, then a 7x7-conv spatial gate."""
    return gam_gates(x, params)[0]


# ---------------------------------------------------------------------------
# fast-normalized fusion
# ---------------------------------------------------------------------------

@dataclass
class FusionWeights(_ParamBundle):
    lam: Param
    eps: float = 1e-4

    def __post_init__(self):
        if self.eps <= 0:
            raise ConfigError("fusion eps must be positive")

    @classmethod
    def init(cls, n_inputs: int, eps: float = 1e-4, precision: str = "standard"
             ) -> FusionWeights:
        return cls(Param(np.ones(n_inputs), precision=precision, name="lam"), eps)


def fusion_weights(fw: FusionWeights) -> Tensor:
    r = tc.relu(fw.lam)
    return tc.div(r, tc.add(tc.sum(r), fw.eps))


def bifpn_fuse(inputs: list[Tensor], fw: FusionWeights, return_weights: bool = False):
    """``sum_i w_i * x_i`` with ``w_i = relu(l_i) / (sum_j relu(l_j) + eps)``."""
    if len(inputs) < 2:
        raise ConfigError("bifpn_fuse needs at least two inputs")
    if len(inputs) != fw.lam.shape[0]:
        raise ConfigError(f"{len(inputs)} inputs but {fw.lam.shape[0]} fusion weights")
    shape = inputs[0].shape
    if any(t.shape != shape for t in inputs):
        raise ConfigError(f"fusion inputs differ in shape: {[t.shape for t in inputs]}")
    w = fusion_weights(fw)
    out = None
    for i, t in enumerate(inputs):
        wi = tc.reshape(tc.take_rows(w, np.array([i])), (1,) * len(shape))
        term = tc.mul(t, wi)
        out = term if out is None else tc.add(out, term)
    if return_weights:
        return out, w.data.copy()
    return out


# ---------------------------------------------------------------------------
# SPP
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SppConfig:
    kernels: tuple[int, ...] = (5, 9, 13)

    def __post_init__(self):
        for k in self.kernels:
            if k < 3 or k % 2 == 0:
                raise ConfigError(f"SPP kernels must be odd and >= 3, got {k}")


def spp(x: Tensor, cfg: SppConfig = SppConfig()) -> Tensor:  # noqa: B008 (frozen)
    """Concatenate the identity with stride-1 same-padded max-pools."""
    branches = [x] + [tc.maxpool2d(x, k, stride=1, pad=k // 2) for k in cfg.kernels]
    return tc.concat(branches, axis=1)


# ---------------------------------------------------------------------------
# parameter serialization
# ---------------------------------------------------------------------------

MAGIC = b"DSPARAM1"


def save_params(path, named: list[tuple[str, Param]], meta: dict | None = None) -> None:
    """Write ``MAGIC | u64 header length | JSON header | little-endian f32 data``."""
    named = list(named)
    entries = []
    offset = 0
    for name, p in named:
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += int(np.prod(p.shape))
    header = json.dumps({"params": entries, "meta": meta or {}}, sort_keys=True,
                        separators=(",", ":")).encode()
    blob = b"".join(np.ascontiguousarray(p.data, dtype="<f4").tobytes() for _, p in named)
    Path(path).write_bytes(MAGIC + struct.pack("<Q", len(header)) + header + blob)


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a parameter file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    data = np.frombuffer(raw[16 + hlen:], dtype="<f4")
    out = {}
    for e in header["params"]:
        n = int(np.prod(e["shape"]))
        out[e["name"]] = data[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float32)
    return out, header["meta"]
