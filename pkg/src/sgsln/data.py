"""Synthetic bitemporal scenes, augmentation, tiling and the A/B/label dataset layout.

Three scenario generators mirror the change-detection settings the model is
meant for:

* ``ICCD``  multi-class objects that appear, vanish or change class, under a
  global colour tint that differs between the two dates (tint is not change);
* ``SVBCD`` buildings with drop shadows that are added or removed (shadows
  are not labelled);
* ``MVBCD`` buildings seen from two viewpoints: at date 2 every roof is
  displaced by ``round(kappa * height)`` pixels, which is parallax, not change.

Images are float32 H x W x 3 in [0, 1]; labels are uint8 H x W in {0, 1}.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image
from scipy import ndimage

GENERATOR_VERSION = 1
SCENARIOS = ("ICCD", "SVBCD", "MVBCD")


@dataclass
class SamplePair:
    t1: np.ndarray
    t2: np.ndarray
    label: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.t1.shape != self.t2.shape or self.t1.shape[:2] != self.label.shape:
            raise ValueError(f"extents disagree: t1 {self.t1.shape}, t2 {self.t2.shape}, "
                             f"label {self.label.shape}")


@dataclass
class SceneSpec:
    size: int = 64
    objects: tuple[int, int] = (2, 5)
    object_size: tuple[int, int] = (6, 12)
    change_prob: float = 0.5
    # ICCD
    n_classes: int = 4
    tint: float = 0.15
    # MVBCD
    height: tuple[int, int] = (2, 6)
    parallax: float = 1.0
    parallax_dir: tuple[int, int] = (1, 1)
    # SVBCD
    shadow_dir: tuple[int, int] = (1, 1)
    shadow_len: int = 3
    max_tries: int = 200

    def __post_init__(self):
        self.objects = tuple(self.objects)
        self.object_size = tuple(self.object_size)
        self.height = tuple(self.height)
        self.parallax_dir = tuple(self.parallax_dir)
        self.shadow_dir = tuple(self.shadow_dir)
        if self.size <= 0 or self.size % 32:
            raise ValueError(f"scene size must be a positive multiple of 32, got {self.size}")
        if self.parallax < 0:
            raise ValueError(f"parallax coefficient must be >= 0, got {self.parallax}")
        if not 0 <= self.change_prob <= 1:
            raise ValueError(f"change_prob must lie in [0, 1], got {self.change_prob}")

    @classmethod
    def for_size(cls, size: int, **overrides) -> "SceneSpec":
        """Defaults scaled to a ``size`` canvas.

        Extents, heights and shadow lengths scale linearly; object counts only shrink.
        """
        k = size / 64

        def sc(pair):
            return tuple(max(1, int(round(v * k))) for v in pair)

        counts = sc(cls.objects) if k < 1 else cls.objects
        base = dict(size=size, objects=counts, object_size=sc(cls.object_size), height=sc(cls.height),
                    shadow_len=max(1, int(round(cls.shadow_len * k))))
        base.update(overrides)
        return cls(**base)


class PlacementError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# rasterisation helpers


def _smooth_field(rng: np.random.Generator, size: int, scale: int = 8) -> np.ndarray:
    coarse = rng.random((size // scale + 2, size // scale + 2))
    up = ndimage.zoom(coarse, scale, order=1)
    return up[:size, :size]


def _background(rng, size: int, base: np.ndarray) -> np.ndarray:
    tex = _smooth_field(rng, size)[..., None]
    grain = rng.normal(0, 0.02, (size, size, 1))
    return np.clip(base[None, None, :] * (0.8 + 0.4 * tex) + grain, 0, 1)


def _place(rng, spec: SceneSpec, occupied: np.ndarray, h: int, w: int, margin: int) -> tuple[int, int]:
    size = spec.size
    for _ in range(spec.max_tries):
        y = int(rng.integers(margin, size - h - margin + 1))
        x = int(rng.integers(margin, size - w - margin + 1))
        if not occupied[y - margin:y + h + margin, x - margin:x + w + margin].any():
            occupied[y - margin:y + h + margin, x - margin:x + w + margin] = True
            return y, x
    raise PlacementError(f"could not place a {h}x{w} object on a {size}x{size} canvas "
                         f"after {spec.max_tries} tries; reduce the object count or size")


def _place_swept(rng, spec: SceneSpec, occupied: np.ndarray, h: int, w: int, direction,
                 shift: int) -> tuple[np.ndarray, np.ndarray]:
    """Place a footprint whose parallax sweep stays on the canvas and clear of others."""
    size = spec.size
    dy, dx = _offset(direction, shift)
    y_lo, y_hi = max(1, 1 - dy), size - h - 1 - max(0, dy)
    x_lo, x_hi = max(1, 1 - dx), size - w - 1 - max(0, dx)
    if y_hi >= y_lo and x_hi >= x_lo:
        for _ in range(spec.max_tries):
            y, x = int(rng.integers(y_lo, y_hi + 1)), int(rng.integers(x_lo, x_hi + 1))
            base = _shape_mask("rect", size, y, x, h, w)
            wall = np.zeros_like(base)
            for s in range(shift + 1):
                wall |= np.roll(base, _offset(direction, s), axis=(0, 1))
            halo = ndimage.binary_dilation(wall, iterations=1)
            if not (occupied & halo).any():
                occupied |= halo
                return base, wall
    raise PlacementError(f"could not place a {h}x{w} object on a {size}x{size} canvas "
                         f"after {spec.max_tries} tries; reduce the object count or size")


def _shape_mask(kind: str, size: int, y: int, x: int, h: int, w: int) -> np.ndarray:
    m = np.zeros((size, size), dtype=bool)
    if kind == "ellipse":
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = (h - 1) / 2, (w - 1) / 2
        m[y:y + h, x:x + w] = ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0
    else:
        m[y:y + h, x:x + w] = True
    return m


_CLASS_COLOURS = np.array([[0.85, 0.2, 0.2], [0.2, 0.3, 0.85], [0.95, 0.85, 0.2],
                           [0.6, 0.2, 0.7], [0.2, 0.75, 0.75], [0.9, 0.5, 0.1]])


def _class_fill(cls: int, size: int) -> np.ndarray:
    """Colour with a class-specific pattern (flat, stripes, checker, dots...)."""
    yy, xx = np.mgrid[0:size, 0:size]
    pattern = [np.ones((size, size)),
               0.75 + 0.25 * ((yy // 2) % 2),
               0.75 + 0.25 * (((yy // 2) + (xx // 2)) % 2),
               0.75 + 0.25 * ((xx // 2) % 2),
               0.75 + 0.25 * (((yy + xx) // 3) % 2),
               0.75 + 0.25 * ((yy % 3 == 0) & (xx % 3 == 0))][cls % 6]
    return _CLASS_COLOURS[cls % len(_CLASS_COLOURS)][None, None, :] * pattern[..., None]


def _change_state(rng, p: float) -> str:
    if rng.random() >= p:
        return "same"
    return "added" if rng.random() < 0.5 else "removed"


# ---------------------------------------------------------------------------
# generators


def _gen_iccd(spec: SceneSpec, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    size = spec.size
    bg = _background(rng, size, np.array([0.45, 0.55, 0.35]))
    t1, t2 = bg.copy(), bg.copy()
    label = np.zeros((size, size), dtype=np.uint8)
    occupied = np.zeros((size, size), dtype=bool)
    n = int(rng.integers(spec.objects[0], spec.objects[1] + 1))
    for _ in range(n):
        kind = ("rect", "ellipse", "band")[int(rng.integers(3))]
        if kind == "band":
            h = int(rng.integers(3, 6))
            w = int(rng.integers(spec.object_size[1], 2 * spec.object_size[1] + 1))
            if rng.random() < 0.5:
                h, w = w, h
        else:
            h = int(rng.integers(spec.object_size[0], spec.object_size[1] + 1))
            w = int(rng.integers(spec.object_size[0], spec.object_size[1] + 1))
        h, w = min(h, size - 2), min(w, size - 2)
        y, x = _place(rng, spec, occupied, h, w, 1)
        m = _shape_mask(kind, size, y, x, h, w)
        cls = int(rng.integers(spec.n_classes))
        state = _change_state(rng, spec.change_prob)
        if state == "same":
            fill = _class_fill(cls, size)
            t1[m] = fill[m]
            t2[m] = fill[m]
            continue
        if state == "added" and rng.random() < 0.5:
            # class change rather than a plain appearance
            other = (cls + 1 + int(rng.integers(spec.n_classes - 1))) % spec.n_classes
            t1[m] = _class_fill(cls, size)[m]
            t2[m] = _class_fill(other, size)[m]
        elif state == "added":
            t2[m] = _class_fill(cls, size)[m]
        else:
            t1[m] = _class_fill(cls, size)[m]
        label[m] = 1
    tint1 = 1 + rng.uniform(-spec.tint, spec.tint, 3)
    tint2 = 1 + rng.uniform(-spec.tint, spec.tint, 3)
    return np.clip(t1 * tint1, 0, 1), np.clip(t2 * tint2, 0, 1), label


def _offset(direction, length: int) -> tuple[int, int]:
    dy, dx = direction
    return int(np.sign(dy)) * length, int(np.sign(dx)) * length


def _gen_svbcd(spec: SceneSpec, rng):
    size = spec.size
    bg = _background(rng, size, np.array([0.5, 0.5, 0.45]))
    t1, t2 = bg.copy(), bg.copy()
    label = np.zeros((size, size), dtype=np.uint8)
    occupied = np.zeros((size, size), dtype=bool)
    sy, sx = _offset(spec.shadow_dir, spec.shadow_len)
    roofs1 = np.zeros((size, size), dtype=bool)
    roofs2 = np.zeros((size, size), dtype=bool)
    n = int(rng.integers(spec.objects[0], spec.objects[1] + 1))
    colours = []
    for _ in range(n):
        h = int(rng.integers(spec.object_size[0], spec.object_size[1] + 1))
        w = int(rng.integers(spec.object_size[0], spec.object_size[1] + 1))
        m, _ = _place_swept(rng, spec, occupied, h, w, spec.shadow_dir, spec.shadow_len)
        state = _change_state(rng, spec.change_prob)
        colour = rng.uniform(0.75, 0.95) * np.array([1.0, 0.92, 0.85]) if rng.random() < 0.5 else \
            rng.uniform(0.55, 0.75) * np.array([0.75, 0.8, 1.0])
        colours.append((m, colour, state))
        if state in ("same", "removed"):
            roofs1 |= m
        if state in ("same", "added"):
            roofs2 |= m
        if state != "same":
            label[m] = 1
    for img, roofs in ((t1, roofs1), (t2, roofs2)):
        shadow = np.roll(roofs, (sy, sx), axis=(0, 1)) & ~roofs
        img[shadow] *= 0.45
    for m, colour, state in colours:
        if state in ("same", "removed"):
            t1[m] = colour
        if state in ("same", "added"):
            t2[m] = colour
    return t1, t2, label


def _gen_mvbcd(spec: SceneSpec, rng):
    size = spec.size
    bg = _background(rng, size, np.array([0.5, 0.48, 0.42]))
    t1, t2 = bg.copy(), bg.copy()
    label = np.zeros((size, size), dtype=np.uint8)
    occupied = np.zeros((size, size), dtype=bool)
    n = int(rng.integers(spec.objects[0], spec.objects[1] + 1))
    for _ in range(n):
        hgt = int(rng.integers(spec.height[0], spec.height[1] + 1))
        shift = int(round(spec.parallax * hgt))
        oy, ox = _offset(spec.parallax_dir, shift)
        h = int(rng.integers(spec.object_size[0], spec.object_size[1] + 1))
        w = int(rng.integers(spec.object_size[0], spec.object_size[1] + 1))
        base, wall = _place_swept(rng, spec, occupied, h, w, spec.parallax_dir, shift)
        roof2 = np.roll(base, (oy, ox), axis=(0, 1))
        roof_colour = rng.uniform(0.7, 0.95) * np.array([0.95, 0.85, 0.8])
        wall_colour = roof_colour * 0.55
        state = _change_state(rng, spec.change_prob)
        if state in ("same", "removed"):
            t1[base] = roof_colour
        if state in ("same", "added"):
            t2[wall] = wall_colour
            t2[roof2] = roof_colour
        if state != "same":
            label[base] = 1
    return t1, t2, label


_GENERATORS = {"ICCD": _gen_iccd, "SVBCD": _gen_svbcd, "MVBCD": _gen_mvbcd}


def gen_scene(spec: SceneSpec, scenario: str, seed: int) -> SamplePair:
    scenario = scenario.upper()
    if scenario not in _GENERATORS:
        raise ValueError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    rng = np.random.default_rng([GENERATOR_VERSION, SCENARIOS.index(scenario), seed])
    t1, t2, label = _GENERATORS[scenario](spec, rng)
    meta = {"scenario": scenario, "seed": int(seed), "generator_version": GENERATOR_VERSION}
    return SamplePair(t1.astype(np.float32), t2.astype(np.float32), label.astype(np.uint8), meta)


def gen_dataset(spec: SceneSpec, scenario: str, n: int, seed: int) -> list[SamplePair]:
    """``n`` scenes with per-sample seeds derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(n) if n else []
    return [gen_scene(spec, scenario, int(s)) for s in seeds]


def add_building(spec: SceneSpec, y: int, x: int, h: int, w: int) -> SamplePair:
    """Empty SVBCD-style scene with exactly one added h x w building at (y, x)."""
    rng = np.random.default_rng(0)
    size = spec.size
    bg = _background(rng, size, np.array([0.5, 0.5, 0.45])).astype(np.float32)
    t2 = bg.copy()
    m = _shape_mask("rect", size, y, x, h, w)
    t2[m] = 0.9
    label = m.astype(np.uint8)
    return SamplePair(bg, t2, label, {"scenario": "SVBCD", "seed": 0, "generator_version": GENERATOR_VERSION})


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    flip: float = 0.5
    flip_axes: tuple[str, ...] = ("h", "v", "hv")
    transpose: float = 0.5
    shift: float = 0.3
    shift_limit: float = 0.0625
    scale: float = 0.3
    scale_limit: float = 0.1
    rotate: float = 0.3
    rotate_limit: float = 45.0
    photometric: float = 0.3
    swap: float = 0.5

    @classmethod
    def off(cls, **overrides) -> "AugmentConfig":
        base = cls(flip=0, transpose=0, shift=0, scale=0, rotate=0, photometric=0, swap=0)
        return replace(base, **overrides)


def _affine(img: np.ndarray, matrix: np.ndarray, offset: np.ndarray, order: int) -> np.ndarray:
    if img.ndim == 2:
        return ndimage.affine_transform(img, matrix, offset, order=order, mode="mirror")
    return np.stack([ndimage.affine_transform(img[..., c], matrix, offset, order=order, mode="mirror")
                     for c in range(img.shape[-1])], axis=-1)


def _photometric(img: np.ndarray, rng) -> np.ndarray:
    op = int(rng.integers(3))
    if op == 0:
        alpha = 1 + rng.uniform(-0.2, 0.2)
        beta = rng.uniform(-0.2, 0.2)
        out = img * alpha + beta
    elif op == 1:
        out = np.power(np.clip(img, 0, 1), rng.uniform(0.8, 1.2))
    else:
        out = img + rng.normal(0, rng.uniform(0.01, 0.05), img.shape)
    return np.clip(out, 0, 1).astype(img.dtype)


def augment_pair(s: SamplePair, seed: int, cfg: AugmentConfig | None = None) -> SamplePair:
    """Random geometric transforms shared by t1/t2/label, per-image photometric noise, date swap."""
    cfg = cfg or AugmentConfig()
    rng = np.random.default_rng(seed)
    t1, t2, label = s.t1, s.t2, s.label
    applied = []

    def geo(fn):
        nonlocal t1, t2, label
        t1, t2, label = fn(t1), fn(t2), fn(label)

    if rng.random() < cfg.flip:
        axis = cfg.flip_axes[int(rng.integers(len(cfg.flip_axes)))]
        if "h" in axis:
            geo(lambda a: a[:, ::-1])
        if "v" in axis:
            geo(lambda a: a[::-1])
        applied.append(f"flip_{axis}")
    if rng.random() < cfg.transpose:
        geo(lambda a: np.swapaxes(a, 0, 1))
        applied.append("transpose")

    do_shift = rng.random() < cfg.shift
    do_scale = rng.random() < cfg.scale
    do_rot = rng.random() < cfg.rotate
    if do_shift or do_scale or do_rot:
        h, w = label.shape
        dy = rng.uniform(-cfg.shift_limit, cfg.shift_limit) * h if do_shift else 0.0
        dx = rng.uniform(-cfg.shift_limit, cfg.shift_limit) * w if do_shift else 0.0
        zoom = 1 + rng.uniform(-cfg.scale_limit, cfg.scale_limit) if do_scale else 1.0
        ang = np.deg2rad(rng.uniform(-cfg.rotate_limit, cfg.rotate_limit)) if do_rot else 0.0
        c, si = np.cos(ang), np.sin(ang)
        # output -> input coordinate map about the image centre
        inv = np.array([[c, si], [-si, c]]) / zoom
        centre = np.array([(h - 1) / 2, (w - 1) / 2])
        offset = centre - inv @ (centre + np.array([dy, dx]))
        t1 = _affine(np.ascontiguousarray(t1), inv, offset, 1).astype(np.float32)
        t2 = _affine(np.ascontiguousarray(t2), inv, offset, 1).astype(np.float32)
        label = (_affine(np.ascontiguousarray(label), inv, offset, 0) > 0).astype(np.uint8)
        applied.append("affine")

    if rng.random() < cfg.photometric:
        t1 = _photometric(t1, rng)
        applied.append("photo_t1")
    if rng.random() < cfg.photometric:
        t2 = _photometric(t2, rng)
        applied.append("photo_t2")
    if rng.random() < cfg.swap:
        t1, t2 = t2, t1
        applied.append("swap")

    if not applied:
        return SamplePair(s.t1, s.t2, s.label, dict(s.meta))
    return SamplePair(np.ascontiguousarray(t1), np.ascontiguousarray(t2),
                      np.ascontiguousarray(label), {**s.meta, "augment": applied})


# ---------------------------------------------------------------------------
# labels, tiling, splits


def downsample_label(label: np.ndarray) -> np.ndarray:
    """2x2 max-pool of a binary mask (any changed pixel marks the cell)."""
    label = np.asarray(label)
    *lead, h, w = label.shape
    if h % 2 or w % 2:
        raise ValueError(f"downsample_label needs even extents, got {h}x{w}")
    return label.reshape(*lead, h // 2, 2, w // 2, 2).max(axis=(-3, -1))


def tile_origins(n: int, tile: int, stride: int) -> list[int]:
    starts = list(range(0, n - tile + 1, stride))
    if starts[-1] != n - tile:
        starts.append(n - tile)
    return starts


def tile(image: np.ndarray, tile: int = 256, overlap: int = 0) -> list[np.ndarray]:
    """Raster-order tiles of an H x W (x C) array."""
    h, w = image.shape[:2]
    if h < tile or w < tile:
        raise ValueError(f"image {h}x{w} is smaller than the tile size {tile}")
    if not 0 <= overlap < tile:
        raise ValueError(f"overlap must lie in [0, {tile}), got {overlap}")
    stride = tile - overlap
    return [image[y:y + tile, x:x + tile]
            for y in tile_origins(h, tile, stride) for x in tile_origins(w, tile, stride)]


def split(samples: list, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> tuple[list, ...]:
    """Seeded permutation partitioned by ``ratios`` (largest-remainder rounding)."""
    ratios = np.asarray(ratios, dtype=float)
    if (ratios < 0).any() or abs(ratios.sum() - 1) > 1e-9:
        raise ValueError(f"split ratios must be non-negative and sum to 1, got {ratios.tolist()}")
    n = len(samples)
    raw = ratios * n
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    order = np.random.default_rng(seed).permutation(n)
    bounds = np.concatenate([[0], np.cumsum(counts)])
    return tuple([samples[j] for j in order[bounds[i]:bounds[i + 1]]] for i in range(len(counts)))


# ---------------------------------------------------------------------------
# A/B/label directory layout


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def write_dataset(root, samples: list[SamplePair], ids: list[str] | None = None) -> list[str]:
    root = Path(root)
    for sub in ("A", "B", "label"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    ids = ids or [f"{i:05d}" for i in range(len(samples))]
    for sid, s in zip(ids, samples):
        if not np.isin(s.label, (0, 1)).all():
            raise ValueError(f"sample {sid}: label is not binary")
        Image.fromarray(_to_u8(s.t1), "RGB").save(root / "A" / f"{sid}.png")
        Image.fromarray(_to_u8(s.t2), "RGB").save(root / "B" / f"{sid}.png")
        Image.fromarray((s.label * 255).astype(np.uint8), "L").save(root / "label" / f"{sid}.png")
    return ids


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def read_label(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    bad = ~np.isin(arr, (0, 255))
    if bad.any():
        raise ValueError(f"{path}: label values must be 0 or 255, found {int(arr[bad][0])}")
    return (arr // 255).astype(np.uint8)


def read_dataset(root) -> Iterator[SamplePair]:
    """Yield samples in sorted id order; a missing or empty layout yields nothing."""
    root = Path(root)
    a_dir = root / "A"
    if not a_dir.is_dir():
        return
    for a_path in sorted(a_dir.glob("*.png")):
        sid = a_path.stem
        b_path, l_path = root / "B" / a_path.name, root / "label" / a_path.name
        for p in (b_path, l_path):
            if not p.exists():
                raise FileNotFoundError(f"{a_path} has no counterpart {p}")
        yield SamplePair(read_image(a_path), read_image(b_path), read_label(l_path), {"id": sid})


def write_manifest(root, spec: SceneSpec, scenario: str, seed: int, n: int) -> None:
    manifest = {"scenario": scenario.upper(), "seed": seed, "count": n,
                "generator_version": GENERATOR_VERSION, "spec": asdict(spec)}
    (Path(root) / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def to_batch(samples: list[SamplePair]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack samples into N x 3 x H x W image arrays and an N x 1 x H x W label array."""
    t1 = np.stack([s.t1 for s in samples]).transpose(0, 3, 1, 2)
    t2 = np.stack([s.t2 for s in samples]).transpose(0, 3, 1, 2)
    lab = np.stack([s.label for s in samples])[:, None]
    return (np.ascontiguousarray(t1, dtype=np.float32), np.ascontiguousarray(t2, dtype=np.float32),
            lab.astype(np.float32))
