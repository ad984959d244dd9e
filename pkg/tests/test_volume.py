import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from leqmod.errors import CoverageError, DimensionError, FormatError
from leqmod.volume import (
    Volume, build_patch_grid, extract_patch, read_volume, reassemble, write_volume,
)


def coverage_map(dims, origins, s):
    """Brute-force count of covering patches per voxel."""
    cover = np.zeros(dims, dtype=int)
    for x, y, z in origins:
        for i in range(x, x + s):
            for j in range(y, y + s):
                for k in range(z, z + s):
                    cover[i, j, k] += 1
    return cover


def enumerate_axis(length, s, t):
    """Every start p with p % t == 0 that fits, plus the last one needed to reach the end."""
    starts = [p for p in range(length - s + 1) if p % t == 0]
    if starts[-1] + s < length:
        starts.append(length - s)
    return starts


def test_grid_single_patch():
    grid = build_patch_grid((80, 80, 80), 80, 20)
    assert grid.origins == [(0, 0, 0)]


def test_grid_flush_coincides():
    grid = build_patch_grid((100, 100, 100), 80, 20)
    assert len(grid) == 8
    assert sorted({o[0] for o in grid.origins}) == [0, 20]


def test_grid_flush_appended():
    grid = build_patch_grid((90, 64, 64), 64, 20)
    assert [o[0] for o in grid.origins] == [0, 20, 26]
    assert len(grid) == 3
    assert coverage_map((90, 64, 64), grid.origins, 64).min() >= 1


def test_grid_rejects_large_patch():
    with pytest.raises(DimensionError):
        build_patch_grid((10, 40, 40), 16, 4)
    with pytest.raises(DimensionError):
        build_patch_grid((40, 40, 40), 8, 9)


@settings(max_examples=40, deadline=None)
@given(st.tuples(*[st.integers(4, 14)] * 3), st.integers(1, 4), st.integers(1, 6))
def test_grid_coverage_property(dims, s, t):
    s = min(s, min(dims))
    t = min(t, s)
    grid = build_patch_grid(dims, s, t)
    assert coverage_map(dims, grid.origins, s).min() >= 1
    assert grid.origins == sorted(set(grid.origins))
    for axis in range(3):
        assert sorted({o[axis] for o in grid.origins}) == enumerate_axis(dims[axis], s, t)


def test_extract_constant():
    vol = Volume(np.full((6, 6, 6), 2.0))
    assert np.all(extract_patch(vol, (1, 2, 0), 3).data == 2.0)


def test_extract_ramp():
    data = np.broadcast_to(np.arange(12.0)[:, None, None], (12, 4, 4))
    patch = extract_patch(Volume(data), (5, 0, 0), 4)
    assert sorted(set(patch.data[:, 0, 0])) == [5, 6, 7, 8]


def test_extract_out_of_bounds():
    with pytest.raises(DimensionError):
        extract_patch(Volume(np.zeros((5, 5, 5))), (3, 0, 0), 3)


def test_reassemble_identity_and_linearity():
    rng = np.random.default_rng(0)
    vol = Volume(rng.uniform(0.5, 3.0, size=(20, 18, 22)))
    grid = build_patch_grid(vol.dims, 8, 3)
    patches = [(o, extract_patch(vol, o, 8)) for o in grid.origins]
    out = reassemble(patches, vol.dims)
    np.testing.assert_allclose(out.data, vol.data, rtol=1e-6)
    scaled = reassemble([(o, 3.5 * p.data) for o, p in patches], vol.dims)
    np.testing.assert_allclose(scaled.data, 3.5 * out.data, rtol=1e-12)


def test_reassemble_overlap_mean():
    a = np.ones((2, 2, 2))
    b = np.full((2, 2, 2), 3.0)
    out = reassemble([((0, 0, 0), a), ((1, 0, 0), b)], (3, 2, 2))
    assert out.data[1, 0, 0] == 2.0
    assert out.data[0, 0, 0] == 1.0 and out.data[2, 0, 0] == 3.0


def test_reassemble_single_patch_exact():
    rng = np.random.default_rng(1)
    data = rng.normal(size=(5, 5, 5))
    out = reassemble([((0, 0, 0), data)], (5, 5, 5))
    assert np.array_equal(out.data, data)


def test_reassemble_uncovered():
    with pytest.raises(CoverageError, match=r"\(2, 0, 0\)"):
        reassemble([((0, 0, 0), np.ones((2, 2, 2)))], (3, 2, 2))


def test_volume_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(2)
    data = rng.normal(size=(8, 8, 8)).astype(np.float32).astype(np.float64)
    vol = Volume(data, (1.5, 2.0, 2.5))
    p1, p2 = tmp_path / "a.lqmv", tmp_path / "b.lqmv"
    write_volume(vol, p1)
    back = read_volume(p1)
    assert np.array_equal(back.data, data)
    assert back.voxel_size == (1.5, 2.0, 2.5)
    write_volume(back, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_volume_layout_is_x_fastest(tmp_path):
    data = np.arange(24, dtype=np.float64).reshape((2, 3, 4))
    path = tmp_path / "v.lqmv"
    write_volume(Volume(data), path)
    raw = path.read_bytes()
    assert raw[:4] == b"LQMV"
    assert struct.unpack_from("<I3I", raw, 4) == (1, 2, 3, 4)
    payload = np.frombuffer(raw, dtype="<f4", offset=32)
    assert payload[1] == data[1, 0, 0]
    assert payload[2] == data[0, 1, 0]


def _header(dims=(4, 4, 4)):
    return b"LQMV" + struct.pack("<I3I3f", 1, *dims, 1.0, 1.0, 1.0)


def test_volume_truncated(tmp_path):
    path = tmp_path / "t.lqmv"
    path.write_bytes(_header() + np.zeros(63, dtype="<f4").tobytes())
    with pytest.raises(FormatError, match="truncated"):
        read_volume(path)


def test_volume_nan_rejected(tmp_path):
    payload = np.zeros(64, dtype="<f4")
    payload[10] = np.nan
    path = tmp_path / "n.lqmv"
    path.write_bytes(_header() + payload.tobytes())
    with pytest.raises(FormatError) as info:
        read_volume(path)
    assert info.value.offset == 32 + 40


def test_volume_bad_magic_and_version(tmp_path):
    path = tmp_path / "m.lqmv"
    path.write_bytes(b"XXXX" + _header()[4:] + bytes(256))
    with pytest.raises(FormatError, match="magic"):
        read_volume(path)
    path.write_bytes(b"LQMV" + struct.pack("<I3I3f", 2, 4, 4, 4, 1, 1, 1) + bytes(256))
    with pytest.raises(FormatError, match="version"):
        read_volume(path)


def test_volume_invariants():
    with pytest.raises(DimensionError):
        Volume(np.array([[[np.inf]]]))
    with pytest.raises(DimensionError):
        Volume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))
