import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdcnet.data import (
    DatasetError,
    DatasetManifest,
    ManifestRow,
    augment,
    block_mean,
    collate,
    generate_mask,
    hflip,
    load_dataset,
    synth_dataset,
    write_dataset,
)


# masks -------------------------------------------------------------------


def test_mask_all_positive_live():
    assert np.all(generate_mask(np.full((3, 16, 16), 0.2), "live", 2) == 1.0)


def test_mask_spoof_is_zero():
    img = np.random.default_rng(0).uniform(size=(3, 16, 16))
    assert not generate_mask(img, "spoof", 2).any()


def test_mask_half_face():
    img = np.zeros((3, 16, 16))
    img[:, :, 8:] = 0.7
    np.testing.assert_array_equal(generate_mask(img, "live", 4), np.repeat([[0, 0, 1, 1]], 4, axis=0))


def test_mask_single_pixel_marks_block():
    img = np.zeros((3, 16, 16))
    img[0, 5, 13] = 0.01
    expected = np.zeros((4, 4))
    expected[1, 3] = 1.0
    np.testing.assert_array_equal(generate_mask(img, "live", 4), expected)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([1, 2, 4, 8]))
def test_mask_matches_block_oracle(seed, out):
    rng = np.random.default_rng(seed)
    img = rng.uniform(size=(3, 16, 16)) * (rng.uniform(size=(1, 16, 16)) < 0.05)
    gray = img.mean(axis=0)
    b = 16 // out
    oracle = np.array(
        [[float(gray[i * b : (i + 1) * b, j * b : (j + 1) * b].any()) for j in range(out)] for i in range(out)]
    )
    mask = generate_mask(img, "live", out)
    assert set(np.unique(mask)) <= {0.0, 1.0}
    np.testing.assert_array_equal(mask, oracle)


def test_block_mean_rejects_uneven():
    with pytest.raises(ValueError, match="divisible"):
        block_mean(np.zeros((10, 10)), 4)


# synthetic generator -----------------------------------------------------


def test_synth_deterministic():
    a, b = synth_dataset(3, 3, 32, seed=5), synth_dataset(3, 3, 32, seed=5)
    for ra, rb in zip(a, b):
        assert (ra.id, ra.label, ra.sub_protocol) == (rb.id, rb.label, rb.sub_protocol)
        for m in ra.images:
            assert np.array_equal(ra.images[m], rb.images[m])
        assert np.array_equal(ra.mask_gt, rb.mask_gt)
    c = synth_dataset(3, 3, 32, seed=6)
    assert not np.array_equal(a[0].images["rgb"], c[0].images["rgb"])


def test_synth_layout():
    recs = synth_dataset(4, 5, 64, seed=0)
    assert [r.label for r in recs] == ["live"] * 4 + ["spoof"] * 5
    assert len({r.id for r in recs}) == 9
    assert {r.sub_protocol for r in recs} == {"4@1", "4@2", "4@3"}
    for r in recs:
        assert set(r.images) == {"rgb", "depth", "ir"}
        for img in r.images.values():
            assert img.shape == (3, 64, 64) and img.dtype == np.float32
            assert img.min() >= 0.0 and img.max() <= 1.0
        assert r.mask_gt.shape == (8, 8)
        assert r.mask_gt.any() == r.is_live


def _blob(rec):
    return rec.images["rgb"].mean(axis=0) > 0


def test_synth_depth_cues():
    for r in synth_dataset(5, 5, 64, seed=1):
        inside = r.images["depth"][0][_blob(r)]
        if r.is_live:
            assert inside.std() > 0.05
        else:
            assert np.ptp(inside) == 0.0
        for ch in (1, 2):
            assert np.array_equal(r.images["depth"][ch], r.images["depth"][0])


def test_depth_variance_separates_linearly():
    recs = synth_dataset(32, 32, 64, seed=2)
    var = np.array([r.images["depth"][0][_blob(r)].var() for r in recs])
    live = np.array([r.is_live for r in recs])
    # a single threshold (1-d linear classifier) between the classes
    assert var[~live].max() < var[live].min()


def test_synth_rejects_bad_args():
    with pytest.raises(ValueError):
        synth_dataset(-1, 2)
    with pytest.raises(ValueError, match="multiple of 8"):
        synth_dataset(1, 1, 30)


# disk layout -------------------------------------------------------------


def test_round_trip(tmp_path):
    recs = synth_dataset(3, 3, 32, seed=3)
    write_dataset(recs, tmp_path)
    manifest = DatasetManifest.read(tmp_path)
    assert len(manifest) == 6
    loaded = list(load_dataset(manifest, 32, modalities=("rgb", "depth", "ir")))
    for a, b in zip(recs, loaded):
        assert (a.id, a.label, a.sub_protocol) == (b.id, b.label, b.sub_protocol)
        for m in a.images:
            assert np.abs(a.images[m] - b.images[m]).max() <= 1 / 255 + 1e-7
        assert np.array_equal(a.mask_gt, b.mask_gt)


def test_load_resizes(tmp_path):
    write_dataset(synth_dataset(1, 1, 64, seed=4), tmp_path)
    recs = list(load_dataset(DatasetManifest.read(tmp_path), 32))
    assert recs[0].images["rgb"].shape == (3, 32, 32)
    assert recs[0].mask_gt.shape == (4, 4)


def test_empty_manifest(tmp_path):
    (tmp_path / "manifest.csv").write_text("id,label,sub_protocol\n")
    assert list(load_dataset(DatasetManifest.read(tmp_path), 64)) == []


def test_missing_file_named(tmp_path):
    write_dataset(synth_dataset(2, 0, 32, seed=0), tmp_path)
    victim = tmp_path / "rgb" / "live_0001.png"
    victim.unlink()
    with pytest.raises(DatasetError, match="live_0001.png"):
        list(load_dataset(DatasetManifest.read(tmp_path), 32))


def test_corrupt_file_named(tmp_path):
    write_dataset(synth_dataset(1, 0, 32, seed=0), tmp_path)
    (tmp_path / "rgb" / "live_0000.png").write_bytes(b"not a png")
    with pytest.raises(DatasetError, match="live_0000.png"):
        list(load_dataset(DatasetManifest.read(tmp_path), 32))


def test_missing_modality_names_sample(tmp_path):
    write_dataset(synth_dataset(1, 0, 32, seed=0), tmp_path)
    for f in (tmp_path / "ir").iterdir():
        f.unlink()
    (tmp_path / "ir").rmdir()
    with pytest.raises(DatasetError, match="live_0000"):
        list(load_dataset(DatasetManifest.read(tmp_path), 32, modalities=("rgb", "ir")))


@pytest.mark.parametrize(
    "rows, msg",
    [
        ([("a", "live", "4@1"), ("a", "spoof", "4@2")], "duplicate"),
        ([("a", "alive", "4@1")], "label"),
        ([("a", "live", "4@9")], "sub-protocol"),
    ],
)
def test_manifest_validation(rows, msg):
    with pytest.raises(DatasetError, match=msg):
        DatasetManifest(".", [ManifestRow(*r) for r in rows])


def test_manifest_missing_columns(tmp_path):
    with open(tmp_path / "manifest.csv", "w", newline="") as fh:
        csv.writer(fh).writerows([["id", "label"], ["a", "live"]])
    with pytest.raises(DatasetError, match="sub_protocol"):
        DatasetManifest.read(tmp_path)


def test_seeded_order_and_workers(tmp_path):
    write_dataset(synth_dataset(4, 4, 32, seed=1), tmp_path)
    manifest = DatasetManifest.read(tmp_path)
    ids = lambda **kw: [r.id for r in load_dataset(manifest, 32, **kw)]
    first = ids(seed=3)
    assert first == ids(seed=3) == ids(seed=3, workers=4)
    assert sorted(first) == sorted(ids())
    assert first != ids()
    serial = list(load_dataset(manifest, 32, seed=3))
    threaded = list(load_dataset(manifest, 32, seed=3, workers=3))
    for a, b in zip(serial, threaded):
        assert np.array_equal(a.images["rgb"], b.images["rgb"])


# augmentation ------------------------------------------------------------


def test_flip_involution():
    rec = synth_dataset(1, 0, 32, seed=0)[0]
    back = hflip(hflip(rec))
    for m in rec.images:
        assert np.array_equal(back.images[m], rec.images[m])
    assert np.array_equal(back.mask_gt, rec.mask_gt)


def test_flip_applies_to_every_modality():
    rec = synth_dataset(1, 0, 32, seed=0)[0]
    rng = np.random.default_rng(0)
    for _ in range(20):
        out = augment(rec, rng)
        flipped = {m: np.array_equal(out.images[m], rec.images[m][..., ::-1]) for m in rec.images}
        flipped["mask"] = np.array_equal(out.mask_gt, rec.mask_gt[:, ::-1])
        kept = {m: np.array_equal(out.images[m], rec.images[m]) for m in rec.images}
        assert all(flipped.values()) or all(kept.values())


def test_augment_disabled_is_identity():
    rec = synth_dataset(1, 0, 32, seed=0)[0]
    assert augment(rec, np.random.default_rng(0), enabled=False) is rec


def test_collate():
    recs = synth_dataset(2, 1, 32, seed=0)
    inputs, masks = collate(recs, ("rgb", "ir"))
    assert inputs["rgb"].shape == (3, 3, 32, 32) and masks.shape == (3, 4, 4)
    with pytest.raises(DatasetError, match="thermal"):
        collate(recs, ("thermal",))
