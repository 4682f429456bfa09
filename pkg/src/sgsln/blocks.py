"""Network building blocks: parameter storage, HCU, CBAM, TFAM, encoder and change blocks.

Blocks keep only their hyper-parameters and parameter names; the tensors
themselves live in a shared :class:`ParamStore`, so two branches that call the
same block object share weights.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .autograd import Tensor

# border handling of every spatial conv in the network; replicating the edge
# keeps a constant field constant through the whole model
PAD_MODE = "edge"


class ParamStore:
    """Ordered mapping from hierarchical names to learnable tensors."""

    def __init__(self, dtype=np.float32):
        self.dtype = dtype
        self._params: dict[str, Tensor] = {}

    def create(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} registered twice")
        t = Tensor(np.asarray(array, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def num_params(self) -> int:
        return int(np.sum([t.data.size for t in self._params.values()], dtype=np.int64))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def astype(self, dtype) -> None:
        """Recast every parameter in place (used for 64-bit gradient checks)."""
        self.dtype = dtype
        for t in self._params.values():
            t.data = t.data.astype(dtype)
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = [k for k in self._params if k not in arrays]
        if missing:
            raise KeyError(f"missing parameter {missing[0]!r}")
        for k, t in self._params.items():
            a = arrays[k]
            if a.shape != t.shape:
                raise ValueError(f"parameter {k!r}: shape {a.shape} != expected {t.shape}")
        for k, t in self._params.items():
            t.data = np.array(arrays[k], dtype=t.data.dtype)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    # framework-default conv init: U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv:
    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, k: int,
                 rng: np.random.Generator, stride: int = 1, bias: bool = True):
        self.store, self.name = store, name
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.has_bias = bias
        fan_in = cin * k * k
        store.create(f"{name}.weight", _uniform(rng, (cout, cin, k, k), fan_in))
        if bias:
            store.create(f"{name}.bias", _uniform(rng, (cout,), fan_in))

    def __call__(self, x: Tensor) -> Tensor:
        b = self.store[f"{self.name}.bias"] if self.has_bias else None
        return F.conv2d(x, self.store[f"{self.name}.weight"], b,
                        stride=self.stride, padding=self.k // 2, pad_mode=PAD_MODE)


def norm_group_size(c: int) -> int:
    return min(8, c)


class Norm:
    """Group normalization over runs of ``min(8, C)`` channels."""

    def __init__(self, store: ParamStore, name: str, c: int):
        self.store, self.name, self.c = store, name, c
        store.create(f"{name}.gamma", np.ones(c))
        store.create(f"{name}.beta", np.zeros(c))

    def __call__(self, x: Tensor) -> Tensor:
        return F.group_norm(x, self.store[f"{self.name}.gamma"], self.store[f"{self.name}.beta"],
                            norm_group_size(self.c))


class ConvNormAct:
    """k x k conv (no bias) -> group norm -> ReLU."""

    def __init__(self, store, name, cin, cout, k, rng, stride=1):
        self.conv = Conv(store, f"{name}.conv", cin, cout, k, rng, stride=stride, bias=False)
        self.norm = Norm(store, f"{name}.norm", cout)

    def __call__(self, x: Tensor) -> Tensor:
        return F.relu(self.norm(self.conv(x)))


# ---------------------------------------------------------------------------


def exchange_mask(c: int) -> np.ndarray:
    """1 on even channels, 0 on odd ones."""
    return (np.arange(c) % 2 == 0)


def channel_exchange(t1: Tensor, t2: Tensor) -> tuple[Tensor, Tensor]:
    """Swap every odd channel between the two temporal feature maps.

    Parameter-free and its own inverse.
    """
    if t1.shape != t2.shape:
        raise ValueError(f"channel_exchange needs equal shapes, got {t1.shape} and {t2.shape}")
    if t1.ndim < 2 or t1.shape[1] < 2:
        raise ValueError(f"channel_exchange needs at least 2 channels, got shape {t1.shape}")
    m = exchange_mask(t1.shape[1])
    return F.select_channels(m, t1, t2), F.select_channels(m, t2, t1)


class HCU:
    """Half-convolution unit.

    One half of the channels goes through conv-norm-ReLU, the other half is
    kept (max-pooled at stride 2, widened/narrowed by a 1x1 conv when the
    channel count changes); the two halves are interleaved.
    """

    def __init__(self, store: ParamStore, name: str, cin: int, cout: int,
                 rng: np.random.Generator, stride: int = 1):
        if cin % 2 or cout % 2:
            raise ValueError(f"HCU needs even channel counts, got {cin} -> {cout}")
        if stride not in (1, 2):
            raise ValueError(f"HCU stride must be 1 or 2, got {stride}")
        self.cin, self.cout, self.stride = cin, cout, stride
        self.core = ConvNormAct(store, f"{name}.core", cin // 2, cout // 2, 3, rng, stride=stride)
        self.proj = Conv(store, f"{name}.proj", cin // 2, cout // 2, 1, rng) if cin != cout else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cin:
            raise ValueError(f"HCU expects {self.cin} input channels, got {x.shape[1]}")
        xa, xb = F.split_half(x)
        processed = self.core(xa)
        residual = F.pool(xb, "spatial", "max", "2x2") if self.stride == 2 else xb
        if self.proj is not None:
            residual = self.proj(residual)
        return F.interleave(processed, residual)


def cbam_hidden(c: int, reduction: int = 16) -> int:
    return max(c // reduction, 4)


class CBAM:
    """Channel attention (shared bottleneck on avg/max vectors) then 7x7 spatial attention."""

    def __init__(self, store: ParamStore, name: str, c: int, rng: np.random.Generator,
                 reduction: int = 16, spatial_kernel: int = 7):
        if c < 2:
            raise ValueError(f"CBAM needs at least 2 channels, got {c}")
        self.c = c
        hidden = cbam_hidden(c, reduction)
        self.fc1 = Conv(store, f"{name}.fc1", c, hidden, 1, rng, bias=False)
        self.fc2 = Conv(store, f"{name}.fc2", hidden, c, 1, rng, bias=False)
        self.spatial = Conv(store, f"{name}.spatial", 2, 1, spatial_kernel, rng, bias=False)

    def _mlp(self, v: Tensor) -> Tensor:
        n, c = v.shape
        h = self.fc2(F.relu(self.fc1(F.reshape(v, (n, c, 1, 1)))))
        return F.reshape(h, (n, c))

    def __call__(self, x: Tensor) -> Tensor:
        logits = self._mlp(F.pool(x, "spatial", "avg")) + self._mlp(F.pool(x, "spatial", "max"))
        x = F.mul(x, F.sigmoid(logits))
        maps = F.concat([F.pool(x, "channel", "avg"), F.pool(x, "channel", "max")])
        return F.mul(x, F.sigmoid(self.spatial(maps)))


def eca_kernel_size(c: int) -> int:
    t = int(abs(math.log2(c) / 2 + 0.5))
    k = t if t % 2 else t + 1
    return max(k, 3)


@dataclass
class TfamWeights:
    channel1: Tensor   # N x C
    channel2: Tensor
    spatial1: Tensor   # N x 1 x H x W
    spatial2: Tensor
    channel_stack: Tensor   # N x 4 x C
    spatial_stack: Tensor   # N x 4 x H x W


class TFAM:
    """Temporal fusion attention: pairwise-softmax channel and spatial weights."""

    def __init__(self, store: ParamStore, name: str, c: int, rng: np.random.Generator,
                 spatial_kernel: int = 7):
        self.store, self.name, self.c = store, name, c
        k = eca_kernel_size(c)
        self.k, self.sk = k, spatial_kernel
        for i in (1, 2):
            store.create(f"{name}.channel{i}.weight", _uniform(rng, (1, 4, k), 4 * k))
            store.create(f"{name}.spatial{i}.weight",
                         _uniform(rng, (1, 4, spatial_kernel, spatial_kernel), 4 * spatial_kernel ** 2))

    def weights(self, t1: Tensor, t2: Tensor) -> TfamWeights:
        if t1.shape != t2.shape:
            raise ValueError(f"TFAM needs equal shapes, got {t1.shape} and {t2.shape}")
        p = self.store
        n, c = t1.shape[:2]
        sc = F.stack([F.pool(t1, "spatial", "avg"), F.pool(t1, "spatial", "max"),
                      F.pool(t2, "spatial", "avg"), F.pool(t2, "spatial", "max")], axis=1)
        wc1 = F.reshape(F.conv1d(sc, p[f"{self.name}.channel1.weight"], padding=self.k // 2), (n, c))
        wc2 = F.reshape(F.conv1d(sc, p[f"{self.name}.channel2.weight"], padding=self.k // 2), (n, c))
        wc1, wc2 = F.softmax_pair(wc1, wc2)
        ss = F.concat([F.pool(t1, "channel", "avg"), F.pool(t1, "channel", "max"),
                       F.pool(t2, "channel", "avg"), F.pool(t2, "channel", "max")])
        ws1 = F.conv2d(ss, p[f"{self.name}.spatial1.weight"], padding=self.sk // 2, pad_mode=PAD_MODE)
        ws2 = F.conv2d(ss, p[f"{self.name}.spatial2.weight"], padding=self.sk // 2, pad_mode=PAD_MODE)
        ws1, ws2 = F.softmax_pair(ws1, ws2)
        return TfamWeights(wc1, wc2, ws1, ws2, sc, ss)

    def __call__(self, t1: Tensor, t2: Tensor, return_weights: bool = False):
        w = self.weights(t1, t2)
        # (Wc1 + Ws1) * t1 + (Wc2 + Ws2) * t2, distributed over the two broadcast kinds
        out = (F.mul(t1, w.channel1) + F.mul(t1, w.spatial1)
               + F.mul(t2, w.channel2) + F.mul(t2, w.spatial2))
        return (out, w) if return_weights else out


class EncoderBlock1:
    """Stem 3x3 conv lifting the RGB input to ``c`` channels, then two HCUs; no downsampling."""

    def __init__(self, store, name, cin, c, rng):
        self.cin, self.cout = cin, c
        self.stem = ConvNormAct(store, f"{name}.stem", cin, c, 3, rng)
        self.hcu1 = HCU(store, f"{name}.hcu1", c, c, rng)
        self.hcu2 = HCU(store, f"{name}.hcu2", c, c, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cin:
            raise ValueError(f"encoder block 1 expects {self.cin} input channels, got {x.shape[1]}")
        return self.hcu2(self.hcu1(self.stem(x)))


class EncoderBlock:
    """Downsampling HCU, two HCUs, 3x3 conv-norm-ReLU, optional CBAM."""

    def __init__(self, store, name, cin, cout, rng, cbam: bool = True):
        self.cin, self.cout = cin, cout
        self.down = HCU(store, f"{name}.hcu1", cin, cout, rng, stride=2)
        self.hcu2 = HCU(store, f"{name}.hcu2", cout, cout, rng)
        self.hcu3 = HCU(store, f"{name}.hcu3", cout, cout, rng)
        self.conv = ConvNormAct(store, f"{name}.conv", cout, cout, 3, rng)
        self.cbam = CBAM(store, f"{name}.cbam", cout, rng) if cbam else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cin:
            raise ValueError(f"encoder block expects {self.cin} input channels, got {x.shape[1]}")
        y = self.conv(self.hcu3(self.hcu2(self.down(x))))
        return self.cbam(y) if self.cbam is not None else y


class ChangeBlock:
    """Project the coarse map to the skip width, upsample, concat, two HCUs.

    The 1x1 projection commutes with bilinear upsampling, so it runs at the
    coarse resolution where it is four times cheaper.
    """

    def __init__(self, store, name, c_low, c_skip, rng):
        self.c_low, self.c_skip = c_low, c_skip
        self.proj = Conv(store, f"{name}.proj", c_low, c_skip, 1, rng)
        self.hcu1 = HCU(store, f"{name}.hcu1", 2 * c_skip, c_skip, rng)
        self.hcu2 = HCU(store, f"{name}.hcu2", c_skip, c_skip, rng)

    def __call__(self, low: Tensor, skip: Tensor) -> Tensor:
        if low.shape[2] * 2 != skip.shape[2] or low.shape[3] * 2 != skip.shape[3]:
            raise ValueError(f"change block: low extents {low.shape[2:]} must be half of "
                             f"skip extents {skip.shape[2:]}")
        if low.shape[1] != self.c_low or skip.shape[1] != self.c_skip:
            raise ValueError(f"change block expects ({self.c_low}, {self.c_skip}) channels, "
                             f"got ({low.shape[1]}, {skip.shape[1]})")
        up = F.resample(self.proj(low))
        return self.hcu2(self.hcu1(F.concat([up, skip])))
