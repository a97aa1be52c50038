import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, strategies as st

from evonet.data import (
    CubeFormatError, HsiCube, PatchSet, add_gaussian_noise, extract_patches, load_cube, patch_count,
    patch_positions, save_cube, split_patches, split_sizes, synth_cube,
)


def f32_cube(rng, shape=(5, 4, 3), value_range=(0.0, 1.0)):
    return HsiCube(rng.random(shape).astype(np.float32).astype(np.float64), value_range)


def test_roundtrip(tmp_path, rng):
    cube = f32_cube(rng, value_range=(-1.0, 2.0))
    save_cube(cube, tmp_path / "a.hsc")
    back = load_cube(tmp_path / "a.hsc")
    np.testing.assert_array_equal(back.data, cube.data)
    assert back.value_range == (-1.0, 2.0)


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_roundtrip_random_shapes(tmp_path_factory, h, w, c, seed):
    path = tmp_path_factory.mktemp("cubes") / "c.hsc"
    cube = f32_cube(np.random.default_rng(seed), (h, w, c))
    save_cube(cube, path)
    np.testing.assert_array_equal(load_cube(path).data, cube.data)


def test_file_layout(tmp_path):
    data = np.arange(12, dtype=np.float64).reshape(2, 3, 2) / 16
    save_cube(HsiCube(data), tmp_path / "a.hsc")
    raw = (tmp_path / "a.hsc").read_bytes()
    assert raw[:16] == b"HSC1" + struct.pack("<III", 2, 3, 2)
    payload = raw[16:16 + 48]
    assert payload == data.astype("<f4").tobytes()
    assert raw[64:] == struct.pack("<ffI", 0.0, 1.0, zlib.crc32(payload))


def write(tmp_path, raw):
    p = tmp_path / "bad.hsc"
    p.write_bytes(raw)
    return p


def good_bytes(tmp_path, rng):
    save_cube(f32_cube(rng), tmp_path / "good.hsc")
    return (tmp_path / "good.hsc").read_bytes()


def test_truncated_names_missing_bytes(tmp_path, rng):
    raw = good_bytes(tmp_path, rng)
    with pytest.raises(CubeFormatError, match="missing 7 bytes"):
        load_cube(write(tmp_path, raw[:-7]))
    with pytest.raises(CubeFormatError, match="truncated"):
        load_cube(write(tmp_path, raw[:10]))


def test_trailing_bytes_rejected(tmp_path, rng):
    with pytest.raises(CubeFormatError, match="payload length does not match header dims"):
        load_cube(write(tmp_path, good_bytes(tmp_path, rng) + b"\0" * 8))


def test_header_dims_mismatch(tmp_path, rng):
    raw = bytearray(good_bytes(tmp_path, rng))
    raw[4:8] = struct.pack("<I", 6)
    with pytest.raises(CubeFormatError, match="missing"):
        load_cube(write(tmp_path, bytes(raw)))


def test_bad_magic_and_crc(tmp_path, rng):
    raw = bytearray(good_bytes(tmp_path, rng))
    with pytest.raises(CubeFormatError, match="magic") as err:
        load_cube(write(tmp_path, b"XXXX" + bytes(raw[4:])))
    assert err.value.offset == 0
    raw[20] ^= 0xFF
    with pytest.raises(CubeFormatError, match="CRC"):
        load_cube(write(tmp_path, bytes(raw)))


def test_cube_validation():
    with pytest.raises(ValueError):
        HsiCube(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        HsiCube(np.full((2, 2, 1), np.nan))


def test_synth_range_and_determinism():
    a = synth_cube(16, 12, 6, np.random.default_rng(3))
    b = synth_cube(16, 12, 6, np.random.default_rng(3))
    np.testing.assert_array_equal(a.data, b.data)
    assert a.data.min() == 0.0 and a.data.max() == 1.0
    assert a.shape == (16, 12, 6)


def test_synth_bands_correlate():
    rs = []
    for seed in range(20):
        d = synth_cube(32, 32, 8, np.random.default_rng(seed)).data.reshape(-1, 8)
        rs.extend(np.corrcoef(d[:, b], d[:, b + 1])[0, 1] for b in range(7))
    assert np.mean(rs) > 0.5


def test_noise_statistics():
    clean = HsiCube(np.zeros((100, 100, 100)))
    noisy = add_gaussian_noise(clean, 0.1, np.random.default_rng(0))
    diff = noisy.data - clean.data
    assert abs(diff.std() - 0.1) < 0.001
    assert abs(np.mean(diff ** 2) - 0.01) < 0.0002
    assert noisy.data.min() < 0  # unclipped


def test_zero_noise_is_identity(rng):
    cube = f32_cube(rng)
    np.testing.assert_array_equal(add_gaussian_noise(cube, 0.0, rng).data, cube.data)
    with pytest.raises(ValueError):
        add_gaussian_noise(cube, -0.1, rng)


def test_patch_counts_full_scale_geometry():
    a = patch_count(614, 2678, 30, 10)
    b = patch_count(1848, 614, 30, 10)
    assert (a, b, a + b) == (15_635, 10_738, 26_373)
    assert 17_535 + 4_000 + 4_838 == a + b


def test_split_sizes_full_scale():
    assert split_sizes(26_373, (0.665, 0.152, 0.183)) == (17_538, 4_009, 4_826)
    with pytest.raises(ValueError):
        split_sizes(10, (0.5, 0.5, 0.1))
    with pytest.raises(ValueError):
        split_sizes(10, (1.0, 0.0, 0.0))


@given(st.integers(1, 20), st.integers(1, 20), st.integers(1, 8), st.integers(1, 5))
def test_patch_count_matches_enumeration(h, w, s, t):
    if s > min(h, w):
        with pytest.raises(ValueError):
            patch_positions(h, w, s, t)
        return
    brute = [(r, c) for r in range(h) for c in range(w) if r % t == 0 and c % t == 0 and r + s <= h and c + s <= w]
    assert patch_positions(h, w, s, t) == brute
    assert patch_count(h, w, s, t) == len(brute)


def test_patch_examples(rng):
    cube = f32_cube(rng, (4, 4, 2))
    assert len(extract_patches(cube, cube, 4, 3)) == 1
    ps = extract_patches(cube, cube, 3, 1, cube_id=7)
    assert len(ps) == 4
    np.testing.assert_array_equal(ps.clean[3], cube.data[1:4, 1:4])
    assert ps.provenance[3].tolist() == [7, 1, 1]
    with pytest.raises(ValueError):
        extract_patches(cube, cube, 5, 1)


def test_patch_alignment(rng):
    clean = f32_cube(rng, (8, 8, 3))
    noisy = add_gaussian_noise(clean, 0.1, rng)
    ps = extract_patches(clean, noisy, 4, 2)
    for (_, r, c), cp, npch in zip(ps.provenance, ps.clean, ps.noisy):
        np.testing.assert_array_equal(cp, clean.data[r:r + 4, c:c + 4])
        np.testing.assert_array_equal(npch, noisy.data[r:r + 4, c:c + 4])
    x, y = ps.nchw()
    assert x.shape == (len(ps), 3, 4, 4)
    np.testing.assert_array_equal(y[0], clean.data[:4, :4].transpose(2, 0, 1))


def test_split_partitions(rng):
    cube = f32_cube(rng, (20, 20, 1))
    ps = extract_patches(cube, cube, 4, 1)
    parts = split_patches(ps, (0.665, 0.152, 0.183), np.random.default_rng(5))
    again = split_patches(ps, (0.665, 0.152, 0.183), np.random.default_rng(5))
    keys = [set(map(tuple, p.provenance.tolist())) for p in parts]
    assert sum(len(k) for k in keys) == len(ps)
    assert set().union(*keys) == set(map(tuple, ps.provenance.tolist()))
    assert [len(p) for p in parts] == list(split_sizes(len(ps), (0.665, 0.152, 0.183)))
    for p, q in zip(parts, again):
        np.testing.assert_array_equal(p.provenance, q.provenance)


def test_patchset_concat_and_alignment_check(rng):
    cube = f32_cube(rng, (6, 6, 2))
    a = extract_patches(cube, cube, 3, 3, cube_id=0)
    b = extract_patches(cube, cube, 3, 3, cube_id=1)
    both = PatchSet.concat([a, b])
    assert len(both) == 8 and both.provenance[:, 0].tolist() == [0] * 4 + [1] * 4
    with pytest.raises(ValueError):
        PatchSet(a.clean, a.noisy[:2], a.provenance)
