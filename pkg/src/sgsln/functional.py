"""Differentiable operators used by the change-detection network.

Layouts are N x C x H x W for images and N x C x L for 1-D sequences.
Only two broadcast patterns are supported by :func:`add` / :func:`mul`:
an N x C vector against an N x C x H x W map (per-channel), and an
N x 1 x H x W map against an N x C x H x W map (per-pixel).
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from .autograd import Tensor, record

# ---------------------------------------------------------------------------
# operation counting


class FlopCounter:
    """Collects floating point operation counts while active.

    With ``dry=True`` the expensive kernels (convolutions, resampling) only
    produce correctly shaped zero outputs, which makes counting full-size
    models cheap.
    """

    def __init__(self, dry: bool = False):
        self.dry = dry
        self.total = 0
        self.by_kind: dict[str, int] = {}

    def add(self, kind: str, n: int) -> None:
        self.total += int(n)
        self.by_kind[kind] = self.by_kind.get(kind, 0) + int(n)


_flops = threading.local()


def _counter() -> FlopCounter | None:
    return getattr(_flops, "counter", None)


def _count(kind: str, n: int) -> None:
    c = _counter()
    if c is not None:
        c.add(kind, n)


def _dry() -> bool:
    c = _counter()
    return c is not None and c.dry


class KinkTrace:
    """Records the active branch of every piecewise op (ReLU masks, argmax picks).

    Two evaluations with equal traces lie in the same smooth piece of the
    computed function.
    """

    def __init__(self):
        self.marks: list[int] = []

    def add(self, pattern: np.ndarray) -> None:
        self.marks.append(hash(np.ascontiguousarray(pattern).tobytes()))


def _mark(pattern: np.ndarray) -> None:
    t = getattr(_flops, "kinks", None)
    if t is not None:
        t.add(pattern)


@contextmanager
def trace_kinks():
    prev = getattr(_flops, "kinks", None)
    t = KinkTrace()
    _flops.kinks = t
    try:
        yield t
    finally:
        _flops.kinks = prev


@contextmanager
def count_flops(dry: bool = False):
    prev = _counter()
    c = FlopCounter(dry=dry)
    _flops.counter = c
    try:
        yield c
    finally:
        _flops.counter = prev


# ---------------------------------------------------------------------------
# helpers


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _new(data: np.ndarray) -> Tensor:
    return Tensor(data, dtype=data.dtype)


def _broadcast_kind(a: tuple, b: tuple) -> str:
    """Classify how ``b`` broadcasts against ``a``."""
    if a == b:
        return "same"
    if len(a) == 4 and len(b) == 2 and b == a[:2]:
        return "channel"
    if len(a) == 4 and len(b) == 4 and b[1] == 1 and (b[0], b[2], b[3]) == (a[0], a[2], a[3]):
        return "spatial"
    return ""


def _expand(arr: np.ndarray, kind: str) -> np.ndarray:
    return arr[:, :, None, None] if kind == "channel" else arr


def _reduce(g: np.ndarray, kind: str) -> np.ndarray:
    if kind == "channel":
        return g.sum(axis=(2, 3))
    if kind == "spatial":
        return g.sum(axis=1, keepdims=True)
    return g


def _pair(a: Tensor, b: Tensor):
    """Order operands so the first one carries the full shape."""
    kind = _broadcast_kind(a.shape, b.shape)
    if kind:
        return a, b, kind, False
    kind = _broadcast_kind(b.shape, a.shape)
    if kind:
        return b, a, kind, True
    raise ValueError(f"shapes {a.shape} and {b.shape} are not broadcastable "
                     "(supported: equal, N x C vs N x C x H x W, N x 1 x H x W vs N x C x H x W)")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        out = _new(a.data + a.data.dtype.type(b))
        _count("elementwise", out.data.size)
        record([a], [out], lambda g: [g[0]])
        return out
    if not isinstance(a, Tensor):
        return add(b, a)
    big, small, kind, _ = _pair(a, b)
    out = _new(big.data + _expand(small.data, kind))
    _count("elementwise", out.data.size)
    record([big, small], [out], lambda g: [g[0], _reduce(g[0], kind)])
    return out


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    if not isinstance(a, Tensor):
        return scale(b, a)
    big, small, kind, _ = _pair(a, b)
    s = _expand(small.data, kind)
    out = _new(big.data * s)
    _count("elementwise", out.data.size)

    def bw(g):
        return [g[0] * s, _reduce(g[0] * big.data, kind)]

    record([big, small], [out], bw)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    c = x.data.dtype.type(c)
    out = _new(x.data * c)
    _count("elementwise", out.data.size)
    record([x], [out], lambda g: [g[0] * c])
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"div needs equal shapes, got {a.shape} and {b.shape}")
    out = _new(a.data / b.data)
    _count("elementwise", out.data.size)
    record([a, b], [out], lambda g: [g[0] / b.data, -g[0] * a.data / (b.data * b.data)])
    return out


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    pos = d >= 0
    e = np.exp(np.where(pos, -d, d))
    y = np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    out = _new(y)
    _count("elementwise", y.size)
    record([x], [out], lambda g: [g[0] * y * (1 - y)])
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _mark(mask)
    out = _new(np.where(mask, x.data, 0).astype(x.data.dtype))
    _count("elementwise", out.data.size)
    record([x], [out], lambda g: [g[0] * mask])
    return out


def log(x: Tensor) -> Tensor:
    out = _new(np.log(x.data))
    _count("elementwise", out.data.size)
    record([x], [out], lambda g: [g[0] / x.data])
    return out


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    _mark(inside)
    out = _new(np.clip(x.data, lo, hi))
    _count("elementwise", out.data.size)
    record([x], [out], lambda g: [g[0] * inside])
    return out


def softmax_pair(a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Two-way softmax: returns (e^a, e^b) / (e^a + e^b) elementwise."""
    if a.shape != b.shape:
        raise ValueError(f"softmax_pair needs equal shapes, got {a.shape} and {b.shape}")
    m = np.maximum(a.data, b.data)
    ea = np.exp(a.data - m)
    eb = np.exp(b.data - m)
    s = ea + eb
    pa, pb = ea / s, eb / s
    oa, ob = _new(pa), _new(pb)
    _count("elementwise", 4 * pa.size)

    def bw(g):
        # d pa/da = pa*pb, d pa/db = -pa*pb; pb mirrors
        t = (g[0] - g[1]) * pa * pb
        return [t, -t]

    record([a, b], [oa, ob], bw)
    return oa, ob


# ---------------------------------------------------------------------------
# reductions and reshapes


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = _new(np.asarray(x.data.sum(), dtype=x.data.dtype))
    record([x], [out], lambda g: [np.broadcast_to(g[0], x.shape).copy()])
    return out


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = _new(np.asarray(x.data.mean(), dtype=x.data.dtype))
    record([x], [out], lambda g: [np.full(x.shape, g[0] / n, dtype=x.data.dtype)])
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = _new(x.data.reshape(shape))
    record([x], [out], lambda g: [g[0].reshape(x.shape)])
    return out


def stack(xs: list[Tensor], axis: int = 1) -> Tensor:
    out = _new(np.stack([t.data for t in xs], axis=axis))
    record(xs, [out], lambda g: [np.take(g[0], i, axis=axis) for i in range(len(xs))])
    return out


# ---------------------------------------------------------------------------
# channel bookkeeping


def concat(xs: list[Tensor]) -> Tensor:
    """Concatenate along the channel axis."""
    out = _new(np.concatenate([t.data for t in xs], axis=1))
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def bw(g):
        return [g[0][:, bounds[i]:bounds[i + 1]] for i in range(len(xs))]

    record(xs, [out], bw)
    return out


def split_half(x: Tensor) -> tuple[Tensor, Tensor]:
    c = x.shape[1]
    if c % 2:
        raise ValueError(f"split_half needs an even channel count, got {c}")
    h = c // 2
    a, b = _new(x.data[:, :h].copy()), _new(x.data[:, h:].copy())
    record([x], [a, b], lambda g: [np.concatenate(g, axis=1)])
    return a, b


def interleave(a: Tensor, b: Tensor) -> Tensor:
    """Channel shuffle of two equal-width maps: a_i -> 2i, b_i -> 2i+1."""
    if a.shape != b.shape:
        raise ValueError(f"interleave needs equal shapes, got {a.shape} and {b.shape}")
    n, c = a.shape[:2]
    out = np.empty((n, 2 * c) + a.shape[2:], dtype=np.result_type(a.data, b.data))
    out[:, 0::2] = a.data
    out[:, 1::2] = b.data
    t = _new(out)
    record([a, b], [t], lambda g: [g[0][:, 0::2], g[0][:, 1::2]])
    return t


def select_channels(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Per-channel choice: channel c comes from ``a`` where mask[c] else ``b``."""
    if a.shape != b.shape:
        raise ValueError(f"select_channels needs equal shapes, got {a.shape} and {b.shape}")
    m = np.asarray(mask, dtype=bool).reshape((1, -1) + (1,) * (a.ndim - 2))
    out = _new(np.where(m, a.data, b.data))
    record([a, b], [out], lambda g: [np.where(m, g[0], 0), np.where(m, 0, g[0])])
    return out


# ---------------------------------------------------------------------------
# convolution


def conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, pad_mode: str = "zeros") -> Tensor:
    """2-D cross-correlation with a square odd kernel.

    The forward sum runs over input channel, kernel row, kernel column in that
    order, with bias added last, so results are independent of BLAS.
    ``pad_mode`` is ``"zeros"`` or ``"edge"`` (replicate the border pixels).
    """
    if pad_mode not in ("zeros", "edge"):
        raise ValueError(f"unknown pad_mode {pad_mode!r}")
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be N x C x H x W, got shape {x.shape}")
    cout, cin, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d kernel must be square and odd, got {kh}x{kw}")
    if x.shape[1] != cin:
        raise ValueError(f"conv2d channel mismatch: input has C={x.shape[1]}, weight expects Cin={cin}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d stride must be 1 or 2, got {stride}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    n, _, h, w = x.shape
    k = kh
    ho, wo = conv_out_size(h, k, stride, padding), conv_out_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output would be empty: H={h}, W={w}, k={k}, padding={padding}")
    _count("conv", 2 * cout * cin * k * k * ho * wo * n)
    dtype = np.result_type(x.data, weight.data)
    if _dry():
        return _new(np.zeros((n, cout, ho, wo), dtype=dtype))

    pads = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    if not padding:
        xp = x.data
    elif pad_mode == "edge":
        xp = np.pad(x.data, pads, mode="edge")
    else:
        xp = np.pad(x.data, pads)
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    wd = weight.data
    out = np.zeros((n, cout, ho, wo), dtype=dtype)
    for ci in range(cin):
        for i in range(k):
            for j in range(k):
                xs = xp[:, ci, i:i + span_h:stride, j:j + span_w:stride]
                out += wd[:, ci, i, j][None, :, None, None] * xs[:, None]
    if bias is not None:
        out += bias.data[None, :, None, None]
    res = _new(out)

    def bw(g):
        g = g[0]
        gw = np.empty_like(wd)
        gxp = np.zeros(xp.shape, dtype=g.dtype) if x.requires_grad else None
        for i in range(k):
            for j in range(k):
                xs = xp[:, :, i:i + span_h:stride, j:j + span_w:stride]
                gw[:, :, i, j] = np.einsum("nohw,nchw->oc", g, xs)
                if gxp is not None:
                    gxp[:, :, i:i + span_h:stride, j:j + span_w:stride] += np.einsum(
                        "oc,nohw->nchw", wd[:, :, i, j], g)
        gx = None
        if gxp is not None:
            gx = _fold_edge_pad(gxp, padding) if padding and pad_mode == "edge" else (
                gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return [gx, gw, gb]

    inputs = [x, weight] + ([bias] if bias is not None else [])
    record(inputs, [res], bw)
    return res


def _fold_edge_pad(g: np.ndarray, p: int) -> np.ndarray:
    """Adjoint of edge padding: border rows/columns collect the gradient of their copies."""
    g = g.copy()
    g[:, :, p, :] += g[:, :, :p, :].sum(axis=2)
    g[:, :, -p - 1, :] += g[:, :, -p:, :].sum(axis=2)
    g[:, :, :, p] += g[:, :, :, :p].sum(axis=3)
    g[:, :, :, -p - 1] += g[:, :, :, -p:].sum(axis=3)
    return g[:, :, p:-p, p:-p]


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """1-D cross-correlation over N x Cin x L with an odd kernel."""
    if x.ndim != 3:
        raise ValueError(f"conv1d input must be N x C x L, got shape {x.shape}")
    cout, cin, k = weight.shape
    if k % 2 == 0:
        raise ValueError(f"conv1d kernel must be odd, got {k}")
    if x.shape[1] != cin:
        raise ValueError(f"conv1d channel mismatch: input has C={x.shape[1]}, weight expects Cin={cin}")
    n, _, length = x.shape
    lo = length + 2 * padding - k + 1
    if lo < 1:
        raise ValueError(f"conv1d output would be empty: L={length}, k={k}, padding={padding}")
    _count("conv", 2 * cout * cin * k * lo * n)
    dtype = np.result_type(x.data, weight.data)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    wd = weight.data
    out = np.zeros((n, cout, lo), dtype=dtype)
    for ci in range(cin):
        for i in range(k):
            out += wd[:, ci, i][None, :, None] * xp[:, ci, i:i + lo][:, None]
    if bias is not None:
        out += bias.data[None, :, None]
    res = _new(out)

    def bw(g):
        g = g[0]
        gw = np.empty_like(wd)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            gw[:, :, i] = np.einsum("nol,ncl->oc", g, xp[:, :, i:i + lo])
            gxp[:, :, i:i + lo] += np.einsum("oc,nol->ncl", wd[:, :, i], g)
        gx = gxp[:, :, padding:padding + length] if padding else gxp
        gb = g.sum(axis=(0, 2)) if bias is not None else None
        return [gx, gw, gb]

    inputs = [x, weight] + ([bias] if bias is not None else [])
    record(inputs, [res], bw)
    return res


# ---------------------------------------------------------------------------
# pooling


def _first_argmax_onehot(a: np.ndarray, axis: int) -> np.ndarray:
    idx = np.expand_dims(np.argmax(a, axis=axis), axis)
    onehot = np.zeros(a.shape, dtype=bool)
    np.put_along_axis(onehot, idx, True, axis=axis)
    return onehot


def pool(x: Tensor, axis_set: str = "spatial", mode: str = "avg", window: str = "global") -> Tensor:
    """Average or max pooling.

    ``spatial``/``global`` maps N x C x H x W to N x C; ``channel``/``global``
    maps to N x 1 x H x W; ``spatial``/``2x2`` is the stride-2 window.
    Max gradients go to the first maximal element in row-major order.
    """
    if mode not in ("avg", "max"):
        raise ValueError(f"unknown pooling mode {mode!r}")
    if x.ndim != 4:
        raise ValueError(f"pool input must be N x C x H x W, got shape {x.shape}")
    n, c, h, w = x.shape
    d = x.data
    if window == "global" and axis_set == "spatial":
        flat = d.reshape(n, c, h * w)
        red_axis, out_shape = 2, (n, c)
    elif window == "global" and axis_set == "channel":
        flat = d.reshape(n, c, h * w)
        red_axis, out_shape = 1, (n, 1, h, w)
    elif window == "2x2" and axis_set == "spatial":
        if h % 2 or w % 2:
            raise ValueError(f"2x2 pooling needs even extents, got H={h}, W={w}")
        flat = d.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
            n, c, h // 2, w // 2, 4)
        red_axis, out_shape = 4, (n, c, h // 2, w // 2)
    else:
        raise ValueError(f"unsupported pooling combination axis_set={axis_set!r}, window={window!r}")

    size = flat.shape[red_axis]
    if mode == "avg":
        val = flat.mean(axis=red_axis)
        sel = None
    else:
        sel = _first_argmax_onehot(flat, red_axis)
        _mark(sel)
        val = flat.max(axis=red_axis)
    out = _new(val.reshape(out_shape).astype(d.dtype, copy=False))
    _count("pool", flat.size)

    def bw(g):
        ge = np.expand_dims(g[0].reshape(val.shape), red_axis)
        if sel is None:
            gf = np.broadcast_to(ge / size, flat.shape)
        else:
            gf = np.where(sel, ge, 0)
        if window == "2x2":
            gf = gf.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return [np.ascontiguousarray(gf).reshape(x.shape).astype(d.dtype, copy=False)]

    record([x], [out], bw)
    return out


# ---------------------------------------------------------------------------
# resampling


def bilinear_matrix(n: int, dtype=np.float64) -> np.ndarray:
    """(2n x n) interpolation matrix for x2 bilinear upsampling, half-pixel centres."""
    u = np.zeros((2 * n, n), dtype=dtype)
    for i in range(2 * n):
        src = max((i + 0.5) / 2 - 0.5, 0.0)
        lo = min(int(np.floor(src)), n - 1)
        hi = min(lo + 1, n - 1)
        frac = src - lo
        u[i, lo] += 1 - frac
        u[i, hi] += frac
    return u


def resample(x: Tensor, mode: str = "bilinear_up_2x") -> Tensor:
    if mode != "bilinear_up_2x":
        raise ValueError(f"unknown resample mode {mode!r}")
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ValueError(f"resample input must be N x C x H x W with H, W >= 1, got {x.shape}")
    n, c, h, w = x.shape
    _count("resample", n * c * 4 * h * w)
    if _dry():
        return _new(np.zeros((n, c, 2 * h, 2 * w), dtype=x.data.dtype))
    uh = bilinear_matrix(h, x.data.dtype)
    uw = bilinear_matrix(w, x.data.dtype)
    out = _new(np.matmul(np.matmul(uh, x.data), uw.T))
    record([x], [out], lambda g: [np.matmul(np.matmul(uh.T, g[0]), uw)])
    return out


# ---------------------------------------------------------------------------
# normalization


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, group_size: int, eps: float = 1e-5) -> Tensor:
    """Normalize each run of ``group_size`` consecutive channels per sample."""
    n, c, h, w = x.shape
    if c % group_size:
        raise ValueError(f"group_norm: C={c} not divisible by group size {group_size}")
    groups = c // group_size
    d = x.data
    xg = d.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(x.shape).astype(d.dtype, copy=False)
    gm = gamma.data[None, :, None, None]
    out = _new(xhat * gm + beta.data[None, :, None, None])
    _count("norm", out.data.size)

    def bw(g):
        g = g[0]
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxh = (g * gm).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        gx = inv * (dxh - dxh.mean(axis=2, keepdims=True)
                    - xh * (dxh * xh).mean(axis=2, keepdims=True))
        return [gx.reshape(x.shape).astype(d.dtype, copy=False), ggamma, gbeta]

    record([x, gamma, beta], [out], bw)
    return out
