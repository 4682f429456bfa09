"""Central-difference gradient checking and the operator/block test suite.

Piecewise-linear ops (ReLU, clipping, max selection) make the computed
function non-differentiable on a measure-zero set. A finite-difference probe
whose two points straddle such a kink measures a slope that is not the
derivative at the base point, so probes are made kink-aware: every
evaluation records the active branch pattern of each piecewise op, and a
probe whose +eps or -eps pattern differs from the base pattern is skipped.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .autograd import Tensor, backward, get_tape, no_grad

EPS = 1e-5
MAX_SKIP_FRACTION = 0.5


class GradCheckError(RuntimeError):
    pass


@dataclass
class GradCheckResult:
    error: float
    probed: int
    skipped: int


def _evaluate(f, inputs) -> tuple[float, list[int]]:
    with no_grad(), F.trace_kinks() as trace:
        out = f(*inputs)
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    return float(out.data), trace.marks


def grad_check_detail(f: Callable[..., Tensor], *inputs: Tensor, eps: float = EPS,
                      n_samples: int | None = None, seed: int = 0) -> GradCheckResult:
    """Like :func:`grad_check` but also reports how many probes were used and skipped."""
    for t in inputs:
        if t.data.dtype != np.float64:
            raise TypeError("grad_check runs in 64-bit precision; cast inputs to float64")
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    get_tape().reset()
    out = f(*inputs)
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    _, base_marks = _evaluate(f, inputs)

    coords = [(k, i) for k, t in enumerate(inputs) for i in range(t.data.size)]
    want = len(coords)
    if n_samples is not None and n_samples < len(coords):
        want = n_samples
        order = np.random.default_rng(seed).permutation(len(coords))
        coords = [coords[p] for p in order]

    a_vals, n_vals = [], []
    skipped = 0
    for k, i in coords:
        if len(a_vals) >= want:
            break
        flat = inputs[k].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        fp, mp = _evaluate(f, inputs)
        flat[i] = orig - eps
        fm, mm = _evaluate(f, inputs)
        flat[i] = orig
        if mp != base_marks or mm != base_marks:
            skipped += 1
            continue
        n_vals.append((fp - fm) / (2 * eps))
        a_vals.append(analytic[k].reshape(-1)[i])
    total = len(a_vals) + skipped
    if total and skipped > MAX_SKIP_FRACTION * total:
        raise GradCheckError(f"{skipped} of {total} probes straddle a non-differentiable point; "
                             "use a smaller eps or a different input")
    a_arr, n_arr = np.array(a_vals), np.array(n_vals)
    denom = max(np.abs(a_arr).max(initial=0.0), np.abs(n_arr).max(initial=0.0), 1e-8)
    err = float(np.abs(a_arr - n_arr).max(initial=0.0) / denom)
    return GradCheckResult(err, len(a_vals), skipped)


def grad_check(f: Callable[..., Tensor], *inputs: Tensor, eps: float = EPS,
               n_samples: int | None = None, seed: int = 0) -> float:
    """Max relative error between the tape gradient and central differences.

    Every input must be float64. The error is ``max|analytic - numeric|``
    divided by ``max(max|analytic|, max|numeric|, 1e-8)`` over the probed
    coordinates. With ``n_samples`` only that many randomly chosen coordinates
    (across all inputs) are probed; otherwise all of them are. Probes that
    cross a ReLU/max/clip switching point are skipped (see module docs).
    """
    return grad_check_detail(f, *inputs, eps=eps, n_samples=n_samples, seed=seed).error


def projected(fn: Callable[..., Tensor | Sequence[Tensor]], seed: int = 0) -> Callable[..., Tensor]:
    """Wrap a tensor-valued function into a scalar one via fixed random weights.

    Multiple outputs are each projected and summed.
    """
    cache: list[np.ndarray] = []

    def wrapped(*args):
        outs = fn(*args)
        if isinstance(outs, Tensor):
            outs = [outs]
        outs = [o for o in outs if o is not None]
        if not cache:
            rng = np.random.default_rng(seed)
            cache.extend(rng.standard_normal(o.shape) for o in outs)
        total = None
        for o, w in zip(outs, cache):
            term = F.sum(F.mul(o, Tensor(w.astype(o.dtype))))
            total = term if total is None else total + term
        return total

    return wrapped


# ---------------------------------------------------------------------------
# suite


def _cases(rng: np.random.Generator):
    """Yield (name, function, inputs, n_samples) for every differentiable op and block."""
    from . import blocks as B
    from .model import ModelConfig, build_model

    def t(*shape, lo=None):
        a = rng.standard_normal(shape)
        if lo is not None:
            a = np.abs(a) + lo
        return Tensor(a, dtype=np.float64)

    yield "add", F.add, [t(2, 3, 4, 4), t(2, 3, 4, 4)], None
    yield "add/channel", F.add, [t(2, 3, 4, 4), t(2, 3)], None
    yield "add/spatial", F.add, [t(2, 3, 4, 4), t(2, 1, 4, 4)], None
    yield "mul", F.mul, [t(2, 3, 4, 4), t(2, 3, 4, 4)], None
    yield "mul/channel", F.mul, [t(2, 3, 4, 4), t(2, 3)], None
    yield "mul/spatial", F.mul, [t(2, 3, 4, 4), t(2, 1, 4, 4)], None
    yield "scale", lambda x: F.scale(x, -1.7), [t(2, 3, 4)], None
    yield "div", F.div, [t(2, 5), t(2, 5, lo=0.5)], None
    yield "sigmoid", F.sigmoid, [t(2, 3, 4, 4)], None
    yield "relu", F.relu, [t(2, 3, 4, 4)], None
    yield "log", F.log, [t(3, 4, lo=0.2)], None
    yield "clip", lambda x: F.clip(x, -0.5, 0.5), [t(3, 4)], None
    yield "softmax_pair", F.softmax_pair, [t(2, 3, 4), t(2, 3, 4)], None
    yield "sum", F.sum, [t(3, 4)], None
    yield "mean", F.mean, [t(3, 4)], None
    yield "reshape", lambda x: F.reshape(x, (4, 3)), [t(3, 4)], None
    yield "stack", lambda a, b: F.stack([a, b], axis=1), [t(2, 5), t(2, 5)], None
    yield "concat", lambda a, b: F.concat([a, b]), [t(1, 2, 3, 3), t(1, 3, 3, 3)], None
    yield "split_half", F.split_half, [t(1, 4, 3, 3)], None
    yield "interleave", F.interleave, [t(1, 2, 3, 3), t(1, 2, 3, 3)], None
    yield "conv2d", lambda x, w, b: F.conv2d(x, w, b, padding=1), [t(2, 3, 5, 5), t(4, 3, 3, 3), t(4)], None
    yield "conv2d/stride2", lambda x, w: F.conv2d(x, w, stride=2, padding=1), [t(1, 2, 5, 5), t(3, 2, 3, 3)], None
    yield "conv2d/edge-pad", lambda x, w: F.conv2d(x, w, stride=2, padding=3, pad_mode="edge"), \
        [t(1, 2, 5, 5), t(2, 2, 7, 7)], None
    yield "conv1d", lambda x, w, b: F.conv1d(x, w, b, padding=1), [t(2, 4, 7), t(1, 4, 3), t(1)], None
    for axes in ("spatial", "channel"):
        for mode in ("avg", "max"):
            yield f"pool/{axes}-{mode}", (lambda a, m: lambda x: F.pool(x, a, m))(axes, mode), [t(2, 3, 4, 4)], None
    yield "pool/2x2-max", lambda x: F.pool(x, "spatial", "max", "2x2"), [t(2, 3, 4, 4)], None
    yield "resample", F.resample, [t(1, 2, 3, 4)], None
    yield "group_norm", lambda x, g, b: F.group_norm(x, g, b, 2), [t(2, 4, 3, 3), t(4), t(4)], None

    def block_case(name, make, *shapes, n=40):
        store = B.ParamStore(np.float64)
        block = make(store, np.random.default_rng(rng.integers(1 << 31)))
        xs = [t(*s) for s in shapes]
        params = [p for _, p in store.items()]
        k = len(xs)
        return name, (lambda *args: block(*args[:k])), xs + params, n

    yield block_case("channel_exchange", lambda s, r: B.channel_exchange, (1, 4, 3, 3), (1, 4, 3, 3))
    yield block_case("hcu", lambda s, r: B.HCU(s, "h", 8, 8, r), (2, 8, 6, 6))
    yield block_case("hcu/stride2", lambda s, r: B.HCU(s, "h", 4, 8, r, stride=2), (2, 4, 6, 6))
    yield block_case("cbam", lambda s, r: B.CBAM(s, "c", 8, r), (2, 8, 5, 5))
    yield block_case("tfam", lambda s, r: B.TFAM(s, "t", 8, r), (2, 8, 5, 5), (2, 8, 5, 5))
    yield block_case("encoder_block1", lambda s, r: B.EncoderBlock1(s, "e", 3, 4, r), (1, 3, 8, 8))
    yield block_case("encoder_block", lambda s, r: B.EncoderBlock(s, "e", 4, 8, r), (1, 4, 8, 8))
    yield block_case("change_block", lambda s, r: B.ChangeBlock(s, "c", 8, 4, r), (1, 8, 4, 4), (1, 4, 8, 8))

    for variant in ("EDED", "DED", "MESD"):
        model = build_model(ModelConfig(variant=variant, max_width=16, seed=int(rng.integers(1000))),
                            dtype=np.float64)
        x1, x2 = Tensor(rng.random((1, 3, 32, 32))), Tensor(rng.random((1, 3, 32, 32)))
        params = [p for _, p in model.params.items()]
        yield (f"model/{variant}-16", lambda *args, m=model: list(m(args[0], args[1])),
               [x1, x2] + params, 80)


def run_suite(seed: int = 0, eps: float = EPS, verbose: bool = False) -> dict[str, float]:
    """Gradient-check every differentiable op and block; returns name -> max relative error."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}
    for name, fn, inputs, n in _cases(rng):
        start = time.perf_counter()
        res = grad_check_detail(projected(fn, seed), *inputs, eps=eps, n_samples=n, seed=seed)
        results[name] = res.error
        if verbose:
            print(f"{name:<24} err {res.error:.2e}  probes {res.probed:4d}  skipped {res.skipped:3d}  "
                  f"{time.perf_counter() - start:.2f}s")
    return results
