import json

import numpy as np
import pytest

from artifact.fanbeam import build_geometry, build_projector
from artifact.phantoms import (
    HU_MAX, HU_MIN, LABELS, ORGAN_HU, CorpusConfig, CorpusManifest, CorruptHeaderError,
    FingerprintMismatchError, LabelMask, TruncatedBlobError, Volume, generate_phantom, hu_denormalize,
    hu_normalize, load_split, make_corpus, read_array, read_mask, read_pgm, read_volume,
    simulate_projection_pair, write_array, write_mask, write_pgm, write_volume,
)


def test_same_seed_bit_identical():
    v1, m1 = generate_phantom(7, 32)
    v2, m2 = generate_phantom(7, 32)
    assert v1.data.tobytes() == v2.data.tobytes()
    assert m1.data.tobytes() == m2.data.tobytes()


def test_different_seeds_differ():
    assert not np.array_equal(generate_phantom(1, 32)[0].data, generate_phantom(2, 32)[0].data)


def test_labels_and_shape():
    v, m = generate_phantom(3, 32, 16)
    assert v.grid == m.grid == (32, 32, 16)
    assert set(np.unique(m.data)) == {0, 1, 2, 3}


@pytest.mark.parametrize("seed", range(5))
def test_label_hu_bands(seed):
    v, m = generate_phantom(seed, 32)
    lung = v.data[m.data == LABELS["lung"]]
    assert lung.size and lung.min() >= -820 and lung.max() <= -780
    for organ, hu in ORGAN_HU.items():
        vals = v.data[m.data == LABELS[organ]]
        assert np.all(np.abs(vals - hu) <= 20 + 1e-9), organ


def test_air_outside_body_untouched():
    v, m = generate_phantom(4, 32)
    outside = np.abs(v.data - (-1000.0)) < 1e-12
    assert outside.any()
    assert not m.data[outside].any()
    assert v.data.min() >= HU_MIN and v.data.max() <= HU_MAX


def test_lung_fraction_over_100_seeds():
    fractions = []
    for seed in range(100):
        v, m = generate_phantom(seed, 32)
        body = v.data > -990.0
        fractions.append(np.count_nonzero(m.data == LABELS["lung"]) / np.count_nonzero(body))
    fractions = np.array(fractions)
    assert fractions.min() >= 0.15 and fractions.max() <= 0.45


def test_liver_in_lower_right():
    v, m = generate_phantom(5, 32)
    idx = np.argwhere(m.data == LABELS["liver"])
    assert idx[:, 0].mean() > 16  # +x side
    assert idx[:, 2].mean() < 16  # lower half in z


def test_too_small_grid_rejected():
    with pytest.raises(ValueError, match="too small"):
        generate_phantom(0, 8)


# --- normalization ---------------------------------------------------------------------


def test_normalize_endpoints():
    assert hu_normalize(np.array([-1024.0]))[0] == 0.0
    assert hu_normalize(np.array([3071.0]))[0] == 1.0


def test_normalize_round_trip(rng):
    hu = rng.uniform(HU_MIN, HU_MAX, (8, 8, 8))
    np.testing.assert_allclose(hu_denormalize(hu_normalize(hu)).data, hu, rtol=0, atol=1e-12)


def test_normalize_clamps_and_reports():
    out, n = hu_normalize(np.array([-2000.0, 0.0, 5000.0]), report=True)
    assert n == 2
    assert out[0] == 0.0 and out[2] == 1.0


# --- projection simulation --------------------------------------------------------------


@pytest.fixture(scope="module")
def proj16():
    return build_projector(build_geometry({"grid_n": 16}))


def test_air_volume_zero_projections(proj16):
    xa, xl = simulate_projection_pair(Volume(np.full((16, 16, 8), -1024.0)), proj16)
    assert not xa.any() and not xl.any()


def test_z_constant_volume_rows_identical(proj16):
    v, _ = generate_phantom(1, 16, 8)
    flat = Volume(np.repeat(v.data[:, :, 4:5], 8, axis=2))
    xa, xl = simulate_projection_pair(flat, proj16)
    assert np.all(xa == xa[:, :1]) and np.all(xl == xl[:, :1])


def test_centered_disc_views_equal(proj16):
    c = np.arange(16) - 7.5
    x, y = np.meshgrid(c, c, indexing="ij")
    disc = np.where(x ** 2 + y ** 2 <= 36, 40.0, -1000.0)
    xa, xl = simulate_projection_pair(Volume(np.repeat(disc[..., None], 8, axis=2)), proj16)
    assert xa.max() > 0
    np.testing.assert_allclose(xa, xl, rtol=0, atol=1e-9)


def test_projection_grid_mismatch(proj16):
    with pytest.raises(ValueError, match="does not match"):
        simulate_projection_pair(Volume(np.zeros((32, 32, 8))), proj16)


def test_projections_in_unit_range(proj16):
    v, _ = generate_phantom(9, 16)
    xa, xl = simulate_projection_pair(v, proj16)
    for x in (xa, xl):
        assert x.min() >= 0 and x.max() <= 1 and np.isfinite(x).all()


# --- corpus -----------------------------------------------------------------------------


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_corpus_counts_and_disjoint_ids(tmp_path):
    g = build_geometry({"grid_n": 16})
    cfg = CorpusConfig(grid_n=16, n_slices=8, recon_train=2, recon_test=1, seg_train=2, seg_test=1)
    man = make_corpus(cfg, g, tmp_path)
    ids = [e["id"] for split in man.splits.values() for e in split]
    seeds = [e["seed"] for split in man.splits.values() for e in split]
    assert len(ids) == len(set(ids)) == 6 and len(set(seeds)) == 6
    assert len(list(tmp_path.rglob("*_volume.bin"))) == 6
    assert len(list(tmp_path.rglob("*_xap.bin"))) == 3
    back = CorpusManifest.load(tmp_path)
    assert (back.normalization["offset"], back.normalization["span"]) == (1024, 4095)
    for split in ("recon_train", "recon_test", "seg_train", "seg_test"):
        for s in load_split(back, split):
            assert 0 <= s.y.min() and s.y.max() <= 1
            if s.x_ap.size:
                assert 0 <= s.x_ap.min() and s.x_ap.max() <= 1 and s.x_ap.shape == (g.n_detector_bins, 8)


def test_corpus_byte_identical(tmp_path):
    g = build_geometry({"grid_n": 16})
    cfg = CorpusConfig(grid_n=16, n_slices=8, recon_train=1, recon_test=1, seg_train=1, seg_test=1)
    make_corpus(cfg, g, tmp_path / "a")
    make_corpus(cfg, g, tmp_path / "b")
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")


def test_corpus_overlapping_seed_ranges(tmp_path):
    cfg = CorpusConfig(grid_n=16, recon_train=200_000)
    with pytest.raises(ValueError, match="overlap"):
        make_corpus(cfg, build_geometry({"grid_n": 16}), tmp_path)


def test_corpus_zero_count_rejected(tmp_path):
    with pytest.raises(ValueError):
        make_corpus(CorpusConfig(grid_n=16, seg_test=0), build_geometry({"grid_n": 16}), tmp_path)


def test_corpus_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        make_corpus(CorpusConfig(grid_n=16), build_geometry({"grid_n": 16}), blocker / "sub")


# --- volume io --------------------------------------------------------------------------


def test_volume_round_trip(tmp_path, rng):
    v = Volume(rng.uniform(-1000, 1000, (5, 6, 7)), 1.25)
    write_volume(v, tmp_path / "v")
    back = read_volume(tmp_path / "v")
    assert back.data.tobytes() == v.data.tobytes() and back.voxel_pitch_mm == 1.25


def test_mask_round_trip(tmp_path):
    m = LabelMask(np.arange(24, dtype=np.uint8).reshape(2, 3, 4) % 4)
    write_mask(m, tmp_path / "m")
    np.testing.assert_array_equal(read_mask(tmp_path / "m").data, m.data)


def test_truncated_blob(tmp_path, rng):
    write_volume(Volume(rng.standard_normal((4, 4, 4))), tmp_path / "v")
    blob = tmp_path / "v.bin"
    blob.write_bytes(blob.read_bytes()[:-3])
    with pytest.raises(TruncatedBlobError):
        read_volume(tmp_path / "v")


def test_corrupt_header(tmp_path, rng):
    write_volume(Volume(rng.standard_normal((4, 4, 4))), tmp_path / "v")
    (tmp_path / "v.json").write_text("{not json")
    with pytest.raises(CorruptHeaderError):
        read_volume(tmp_path / "v")


def test_checksum_mismatch(tmp_path, rng):
    write_volume(Volume(rng.standard_normal((4, 4, 4))), tmp_path / "v")
    blob = tmp_path / "v.bin"
    raw = bytearray(blob.read_bytes())
    raw[0] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(FingerprintMismatchError):
        read_volume(tmp_path / "v")


def test_errors_are_distinct():
    assert len({TruncatedBlobError, CorruptHeaderError, FingerprintMismatchError}) == 3
    assert not issubclass(TruncatedBlobError, FingerprintMismatchError)


def test_little_endian_on_disk(tmp_path):
    write_array(tmp_path / "a", np.array([1.0, -2.5]), "volume")
    raw = (tmp_path / "a.bin").read_bytes()
    assert raw == np.array([1.0, -2.5], dtype="<f8").tobytes()
    header = json.loads((tmp_path / "a.json").read_text())
    assert header["byte_order"] == "LE"
    # a big-endian array is stored little-endian and reads back equal
    write_array(tmp_path / "b", np.array([1.0, -2.5], dtype=">f8"), "volume")
    assert (tmp_path / "b.bin").read_bytes() == raw
    np.testing.assert_array_equal(read_array(tmp_path / "b")[0], [1.0, -2.5])


def test_pgm_round_trip(tmp_path):
    img = np.linspace(0, 1, 12).reshape(3, 4)
    write_pgm(tmp_path / "s.pgm", img)
    assert (tmp_path / "s.pgm").read_bytes().startswith(b"P5")
    pix = read_pgm(tmp_path / "s.pgm")
    np.testing.assert_array_equal(pix, np.round(img.T[::-1] * 255).astype(np.uint8))
