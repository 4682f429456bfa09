"""Full change-detection models: EDED (with channel exchange), DED and MESD baselines."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import functional as F
from .autograd import Tensor, no_grad
from .blocks import (TFAM, ChangeBlock, Conv, EncoderBlock, EncoderBlock1, ParamStore,
                     channel_exchange)

VARIANTS = ("EDED", "DED", "MESD")
MIN_STAGE_WIDTH = 4
NUM_STAGES = 5


@dataclass
class ModelConfig:
    variant: str = "EDED"
    max_width: int = 16
    exchange_position: int = 3
    cbam_enabled: bool = True
    loss_weights: tuple[float, float, float] = (1.0, 0.5, 0.5)
    seed: int = 0

    def __post_init__(self):
        self.variant = self.variant.upper()
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.max_width <= 0 or self.max_width % 16:
            raise ValueError(f"max_width must be a positive multiple of 16, got {self.max_width}")
        if not 1 <= self.exchange_position <= NUM_STAGES:
            raise ValueError(f"exchange_position must be in [1, {NUM_STAGES}], got {self.exchange_position}")
        if len(self.loss_weights) != 3 or any(w < 0 for w in self.loss_weights):
            raise ValueError(f"loss_weights must be three non-negative numbers, got {self.loss_weights}")

    @property
    def supervision_weights(self) -> tuple[float, float, float]:
        """Loss weights actually applied; MESD has no branch heads to supervise."""
        if self.variant == "MESD":
            return (self.loss_weights[0], 0.0, 0.0)
        return self.loss_weights

    @property
    def widths(self) -> list[int]:
        return stage_widths(self.max_width)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def stage_widths(max_width: int) -> list[int]:
    """Encoder widths [B, 2B, 4B, 8B, 16B] with 16B = max_width, floored at 4 channels."""
    base = max_width // 16
    return [max(base * 2 ** s, MIN_STAGE_WIDTH) for s in range(NUM_STAGES)]


class ChangeOutputs(NamedTuple):
    fusion: Tensor
    t1: Tensor | None
    t2: Tensor | None


class Model:
    """Weights plus wiring for one backbone variant."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.params = ParamStore(dtype)
        rng = np.random.default_rng(config.seed)
        w = config.widths
        s = self.params
        self.encoder = [EncoderBlock1(s, "encoder.block1", 3, w[0], rng)]
        for i in range(1, NUM_STAGES):
            self.encoder.append(EncoderBlock(s, f"encoder.block{i + 1}", w[i - 1], w[i], rng,
                                             cbam=config.cbam_enabled))
        if config.variant == "MESD":
            self.fuse = [Conv(s, f"fuse.scale{i + 1}", 2 * w[i], w[i], 1, rng) for i in range(NUM_STAGES)]
            self.decoder = [(i, ChangeBlock(s, f"decoder.block{i + 1}", w[i + 1], w[i], rng))
                            for i in reversed(range(NUM_STAGES - 1))]
            self.head = Conv(s, "head.fusion", w[0], 1, 1, rng)
        else:
            # shared bitemporal decoder: 1/16 -> 1/8 -> 1/4 -> 1/2
            self.decoder = [(i, ChangeBlock(s, f"decoder.block{i + 1}", w[i + 1], w[i], rng))
                            for i in reversed(range(1, NUM_STAGES - 1))]
            self.branch_head = Conv(s, "head.branch", w[1], 1, 1, rng)
            self.tfam = {i: TFAM(s, f"tfam.scale{i + 1}", w[i], rng) for i in range(NUM_STAGES)}
            # fusion decoder continues to full resolution
            self.fusion_decoder = [(i, ChangeBlock(s, f"fusion_decoder.block{i + 1}", w[i + 1], w[i], rng))
                                   for i in reversed(range(NUM_STAGES - 1))]
            self.head = Conv(s, "head.fusion", w[0], 1, 1, rng)

    # -- wiring ------------------------------------------------------------

    def encode(self, t1: Tensor, t2: Tensor):
        """Run both encoder branches; returns per-stage skip features for each branch.

        With EDED the exchange happens on the output of the configured block:
        the pre-exchange map serves as that stage's skip feature and the
        exchanged maps feed the next stage.
        """
        exchange = self.config.variant == "EDED"
        pos = self.config.exchange_position
        a, b = t1, t2
        skips_a, skips_b = [], []
        for i, block in enumerate(self.encoder, start=1):
            a, b = block(a), block(b)
            if exchange and i == pos == NUM_STAGES:
                # nothing downstream in the encoder: the deepest map itself is exchanged
                a, b = channel_exchange(a, b)
            skips_a.append(a)
            skips_b.append(b)
            if exchange and i == pos < NUM_STAGES:
                a, b = channel_exchange(a, b)
        return skips_a, skips_b

    def forward(self, t1: Tensor, t2: Tensor) -> ChangeOutputs:
        check_input(t1, t2)
        ea, eb = self.encode(t1, t2)
        if self.config.variant == "MESD":
            fused = [conv(F.concat([ea[i], eb[i]])) for i, conv in enumerate(self.fuse)]
            d = fused[-1]
            for i, block in self.decoder:
                d = block(d, fused[i])
            return ChangeOutputs(F.sigmoid(self.head(d)), None, None)

        da, db = ea[-1], eb[-1]
        dec_a, dec_b = {}, {}
        for i, block in self.decoder:
            da, db = block(da, ea[i]), block(db, eb[i])
            dec_a[i], dec_b[i] = da, db
        mask_a = F.sigmoid(self.branch_head(da))
        mask_b = F.sigmoid(self.branch_head(db))

        last = NUM_STAGES - 1
        f = self.tfam[last](ea[last], eb[last])
        for i, block in self.fusion_decoder:
            if i in dec_a:
                skip = self.tfam[i](dec_a[i], dec_b[i])
            else:
                skip = self.tfam[i](ea[i], eb[i])
            f = block(f, skip)
        return ChangeOutputs(F.sigmoid(self.head(f)), mask_a, mask_b)

    __call__ = forward

    def predict(self, t1: Tensor, t2: Tensor) -> ChangeOutputs:
        with no_grad():
            return self.forward(t1, t2)


def check_input(t1: Tensor, t2: Tensor) -> None:
    if t1.shape != t2.shape:
        raise ValueError(f"bitemporal inputs must share a shape, got {t1.shape} and {t2.shape}")
    if t1.ndim != 4 or t1.shape[1] != 3:
        raise ValueError(f"inputs must be N x 3 x H x W, got {t1.shape}")
    h, w = t1.shape[2:]
    if h % 32 or w % 32:
        ph, pw = (-h) % 32, (-w) % 32
        raise ValueError(f"input extents {h}x{w} must be divisible by 32; "
                         f"pad by {ph} rows and {pw} columns")


def build_model(config: ModelConfig, dtype=np.float32) -> Model:
    config.validate()
    model = Model(config, dtype)
    return model


def count_params(model: Model, depth: int = 2) -> tuple[dict[str, int], int]:
    """Learnable scalar counts grouped by the first ``depth`` name components, plus the total."""
    table: dict[str, int] = {}
    for name, t in model.params.items():
        key = ".".join(name.split(".")[:depth])
        table[key] = table.get(key, 0) + int(t.data.size)
    return table, model.params.num_params()


def estimate_flops(model: Model, height: int = 256, width: int = 256) -> tuple[int, dict[str, int]]:
    """Operation count of one forward pass on a single image pair.

    Convolutions cost 2*Cout*Cin*k*k per output pixel; pooling, resampling,
    normalization and elementwise ops cost one per element. The kernels run
    in dry mode, so this is cheap even for wide models.
    """
    t = Tensor(np.zeros((1, 3, height, width), dtype=model.params.dtype))
    with F.count_flops(dry=True) as counter, no_grad():
        model.forward(t, t)
    return counter.total, dict(counter.by_kind)
