import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from sgsln.data import (AugmentConfig, PlacementError, SamplePair, SceneSpec, add_building,
                        augment_pair, downsample_label, gen_dataset, gen_scene, read_dataset,
                        split, tile, write_dataset, write_manifest)


@pytest.mark.parametrize("scenario", ["ICCD", "SVBCD", "MVBCD"])
def test_generator_determinism_and_contract(scenario):
    spec = SceneSpec()
    a, b = gen_scene(spec, scenario, 11), gen_scene(spec, scenario, 11)
    for x, y in ((a.t1, b.t1), (a.t2, b.t2), (a.label, b.label)):
        assert x.tobytes() == y.tobytes()
    assert a.t1.shape == (64, 64, 3) and a.label.shape == (64, 64)
    assert set(np.unique(a.label)) <= {0, 1}
    assert a.t1.min() >= 0 and a.t1.max() <= 1
    assert a.meta["scenario"] == scenario and a.meta["seed"] == 11
    assert gen_scene(spec, scenario, 12).t1.tobytes() != a.t1.tobytes()


@pytest.mark.parametrize("scenario", ["ICCD", "SVBCD", "MVBCD"])
def test_no_change_probability_gives_empty_label(scenario):
    for seed in range(5):
        s = gen_scene(SceneSpec(change_prob=0.0), scenario, seed)
        assert s.label.sum() == 0


def test_mvbcd_pseudo_change_condition():
    for seed in range(10):
        s = gen_scene(SceneSpec(change_prob=0.0, parallax=1.0), "MVBCD", seed)
        assert s.label.sum() == 0
        assert not np.array_equal(s.t1, s.t2)


def test_mvbcd_zero_parallax_static_scene():
    for seed in range(10):
        s = gen_scene(SceneSpec(change_prob=0.0, parallax=0.0), "MVBCD", seed)
        np.testing.assert_array_equal(s.t1, s.t2)
    # with changes, unchanged pixels still agree exactly
    s = gen_scene(SceneSpec(change_prob=0.5, parallax=0.0), "MVBCD", 3)
    same = s.label == 0
    np.testing.assert_array_equal(s.t1[same], s.t2[same])


def test_iccd_tint_not_labelled():
    s = gen_scene(SceneSpec(change_prob=0.0), "ICCD", 2)
    assert s.label.sum() == 0 and not np.array_equal(s.t1, s.t2)


def test_svbcd_shadow_not_labelled():
    s = gen_scene(SceneSpec(change_prob=1.0), "SVBCD", 4)
    diff = np.abs(s.t1 - s.t2).sum(axis=2) > 0
    # shadows of added/removed buildings differ between epochs but stay unlabelled
    assert (diff & (s.label == 0)).any()


def test_added_building_label_count():
    s = add_building(SceneSpec(), 20, 30, 10, 10)
    assert int(s.label.sum()) == 100


def test_overcrowded_spec_rejected():
    with pytest.raises(PlacementError):
        gen_scene(SceneSpec(objects=(40, 40), object_size=(20, 20), max_tries=20), "SVBCD", 0)


def test_spec_validation():
    with pytest.raises(ValueError, match="multiple of 32"):
        SceneSpec(size=60)
    with pytest.raises(ValueError):
        SceneSpec(parallax=-1)


# -- augmentation ------------------------------------------------------------

@pytest.fixture(scope="module")
def sample():
    return gen_scene(SceneSpec(), "SVBCD", 5)


def test_augment_identity(sample):
    out = augment_pair(sample, 3, AugmentConfig.off())
    for x, y in ((out.t1, sample.t1), (out.t2, sample.t2), (out.label, sample.label)):
        assert x.tobytes() == y.tobytes()


def test_augment_swap(sample):
    out = augment_pair(sample, 3, AugmentConfig.off(swap=1.0))
    np.testing.assert_array_equal(out.t1, sample.t2)
    np.testing.assert_array_equal(out.t2, sample.t1)
    np.testing.assert_array_equal(out.label, sample.label)


def test_augment_hflip(sample):
    out = augment_pair(sample, 3, AugmentConfig.off(flip=1.0, flip_axes=("h",)))
    h, w = sample.label.shape
    for y in range(h):
        for x in range(w):
            assert out.label[y, x] == sample.label[y, w - 1 - x]
    np.testing.assert_array_equal(out.t1, sample.t1[:, ::-1])


@pytest.mark.parametrize("axes", [("v",), ("hv",)])
def test_flips_and_transpose_commute_with_rasterisation(sample, axes):
    cfg = AugmentConfig.off(flip=1.0, flip_axes=axes, transpose=1.0)
    out = augment_pair(sample, 0, cfg)
    ref = sample.label
    if "h" in axes[0]:
        ref = ref[:, ::-1]
    if "v" in axes[0]:
        ref = ref[::-1]
    np.testing.assert_array_equal(out.label, ref.T)
    assert out.label.sum() == sample.label.sum()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_augmented_labels_stay_binary(seed):
    s = gen_scene(SceneSpec(size=32, objects=(1, 2), object_size=(4, 8)), "SVBCD", seed % 7)
    out = augment_pair(s, seed, AugmentConfig(shift=1.0, scale=1.0, rotate=1.0, photometric=1.0))
    assert set(np.unique(out.label)) <= {0, 1}
    assert out.t1.shape == s.t1.shape and out.t1.dtype == np.float32
    assert out.t1.min() >= 0 and out.t1.max() <= 1


def test_augment_deterministic(sample):
    a, b = augment_pair(sample, 9), augment_pair(sample, 9)
    assert a.t1.tobytes() == b.t1.tobytes() and a.label.tobytes() == b.label.tobytes()


# -- labels, tiles, splits --------------------------------------------------

def test_downsample_label_cases():
    np.testing.assert_array_equal(downsample_label(np.ones((4, 4))), np.ones((2, 2)))
    single = np.zeros((6, 6), dtype=np.uint8)
    single[3, 4] = 1
    out = downsample_label(single)
    assert out.sum() == 1 and out[1, 2] == 1
    with pytest.raises(ValueError, match="even"):
        downsample_label(np.zeros((5, 4)))


def test_downsample_label_quadrant_or():
    r = np.random.default_rng(0)
    m = (r.random((16, 16)) > 0.8).astype(np.uint8)
    out = downsample_label(m)
    for i in range(8):
        for j in range(8):
            assert out[i, j] == int(m[2 * i, 2 * j] or m[2 * i + 1, 2 * j] or m[2 * i, 2 * j + 1]
                                    or m[2 * i + 1, 2 * j + 1])


def test_tile_counts():
    img = np.zeros((512, 512, 3))
    assert len(tile(img, 256, 0)) == 4
    tiles = tile(img, 256, 128)
    assert len(tiles) == 9 and all(t.shape == (256, 256, 3) for t in tiles)
    with pytest.raises(ValueError):
        tile(np.zeros((100, 100)), 256)


def test_tile_raster_order():
    img = np.arange(16).reshape(4, 4)
    tiles = tile(img, 2, 0)
    assert [t[0, 0] for t in tiles] == [0, 2, 8, 10]


def test_split_sizes():
    parts = split(list(range(10)), (0.7, 0.1, 0.2), seed=0)
    assert tuple(len(p) for p in parts) == (7, 1, 2)
    assert sorted(sum(parts, [])) == list(range(10))
    assert split(list(range(10)), seed=0) == parts
    with pytest.raises(ValueError, match="sum to 1"):
        split(list(range(10)), (0.5, 0.2, 0.2))


# -- IO ----------------------------------------------------------------------

def test_png_round_trip(tmp_path):
    samples = gen_dataset(SceneSpec(), "ICCD", 3, seed=1)
    write_dataset(tmp_path, samples)
    back = list(read_dataset(tmp_path))
    assert len(back) == 3
    for s, b in zip(samples, back):
        assert np.abs(s.t1 - b.t1).max() <= 0.5 / 255 + 1e-7
        np.testing.assert_array_equal(s.label, b.label)
    with Image.open(tmp_path / "label" / "00000.png") as im:
        assert im.mode == "L" and set(np.unique(np.asarray(im))) <= {0, 255}


def test_bad_label_value_rejected(tmp_path):
    write_dataset(tmp_path, gen_dataset(SceneSpec(), "SVBCD", 1, seed=0))
    bad = np.zeros((64, 64), dtype=np.uint8)
    bad[0, 0] = 128
    Image.fromarray(bad, "L").save(tmp_path / "label" / "00000.png")
    with pytest.raises(ValueError, match="00000.png"):
        list(read_dataset(tmp_path))


def test_missing_counterpart_rejected(tmp_path):
    write_dataset(tmp_path, gen_dataset(SceneSpec(), "SVBCD", 1, seed=0))
    (tmp_path / "B" / "00000.png").unlink()
    with pytest.raises(FileNotFoundError, match="counterpart"):
        list(read_dataset(tmp_path))


def test_empty_directory(tmp_path):
    assert list(read_dataset(tmp_path)) == []
    (tmp_path / "A").mkdir()
    assert list(read_dataset(tmp_path)) == []


def test_manifest(tmp_path):
    write_manifest(tmp_path, SceneSpec(), "mvbcd", 7, 4)
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["scenario"] == "MVBCD" and m["seed"] == 7 and m["spec"]["size"] == 64


def test_samplepair_extent_check():
    with pytest.raises(ValueError, match="extents"):
        SamplePair(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), np.zeros((2, 2)))


def test_for_size_scaling():
    assert SceneSpec.for_size(64) == SceneSpec()
    small = SceneSpec.for_size(32)
    assert small.object_size == (3, 6) and small.objects == (1, 2) and small.shadow_len == 2
    assert SceneSpec.for_size(32, change_prob=0.0).change_prob == 0.0
    for seed in range(50):
        for scenario in ("ICCD", "SVBCD", "MVBCD"):
            gen_scene(small, scenario, seed)
