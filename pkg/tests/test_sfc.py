import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import hilbert_scalar, morton_scalar
from splatdyn.errors import OutOfRange
from splatdyn.sfc import (
    HILBERT, HILBERT_T, ZORDER, ZORDER_T, GridSpec, curve_decode, curve_encode, get_pattern,
    hilbert_decode, hilbert_encode, morton_decode, morton_encode, quantize, sfc_encode,
)

G = GridSpec(0.004, (0.0, 0.0, 0.0))
coord = st.integers(0, (1 << 16) - 1)


def test_quantize_examples():
    assert quantize((0, 0, 0), G).tolist() == [0, 0, 0]
    assert quantize((0.004, 0.008, 0.0), G).tolist() == [1, 2, 0]
    assert quantize((0.0059, 0.0059, 0.0059), G).tolist() == [1, 1, 1]


def test_quantize_rejects_points_outside_grid():
    with pytest.raises(OutOfRange):
        quantize((-0.001, 0, 0), G)
    with pytest.raises(OutOfRange):
        quantize((G.extent, 0, 0), G)


def test_grid_extent_is_cells_times_size():
    assert G.extent == pytest.approx(262.144)


def test_from_points_anchors_one_cell_below_minimum():
    spec = GridSpec.from_points([[1.0, 2.0, 3.0], [0.5, 4.0, 2.0]], 0.01)
    assert spec.origin == pytest.approx((0.49, 1.99, 1.99))


def test_morton_examples():
    assert int(morton_encode((1, 0, 0))) == 1
    assert int(morton_encode((0, 0, 1))) == 4
    assert int(morton_encode((3, 5, 7))) == morton_scalar(3, 5, 7) == 431
    assert morton_decode(0).tolist() == [0, 0, 0]
    assert morton_decode(431).tolist() == [3, 5, 7]
    assert morton_decode(4).tolist() == [0, 0, 1]


def test_hilbert_golden_value():
    from hilbertcurve.hilbertcurve import HilbertCurve
    expected = hilbert_scalar((1, 0, 0))
    assert expected == HilbertCurve(16, 3).distance_from_point([1, 0, 0])
    assert int(hilbert_encode((1, 0, 0))) == expected == 7
    assert int(hilbert_encode((0, 0, 0))) == 0


@settings(max_examples=200, deadline=None)
@given(coord, coord, coord)
def test_encoders_match_scalar_oracles(x, y, z):
    assert int(morton_encode((x, y, z))) == morton_scalar(x, y, z)
    assert int(hilbert_encode((x, y, z))) == hilbert_scalar((x, y, z))


def test_hilbert_matches_reference_package_exhaustively_at_4_bits():
    from hilbertcurve.hilbertcurve import HilbertCurve
    hc = HilbertCurve(4, 3)
    cells = np.array(list(np.ndindex(16, 16, 16)))
    expected = np.array(hc.distances_from_points(cells.tolist()))
    assert np.array_equal(hilbert_encode(cells, bits=4).astype(np.int64), expected)


def test_hilbert_first_order_visits_cube_corners_in_gray_order():
    pts = hilbert_decode(np.arange(8), bits=1)
    steps = np.abs(np.diff(pts, axis=0)).sum(axis=1)
    assert pts[0].tolist() == [0, 0, 0]
    assert steps.tolist() == [1] * 7


def test_hilbert_adjacency_at_4_bits():
    pts = hilbert_decode(np.arange(4096), bits=4).astype(np.int64)
    step = np.abs(np.diff(pts, axis=0))
    assert np.all(step.sum(axis=1) == 1)


@pytest.mark.parametrize("pattern", [ZORDER, ZORDER_T, HILBERT, HILBERT_T])
def test_exhaustive_bijection_at_4_bits(pattern):
    cells = np.array(list(np.ndindex(16, 16, 16)))
    if pattern.curve == "hilbert":
        codes = hilbert_encode(cells[:, list(pattern.axes)], bits=4)
        back = hilbert_decode(codes, bits=4)[:, np.argsort(pattern.axes)]
    else:
        codes = curve_encode(cells, pattern)
        back = curve_decode(codes, pattern)
        assert codes.max() < 4096
    assert len(np.unique(codes)) == 4096
    assert np.array_equal(back, cells)


def test_zorder_aligned_cube_is_contiguous():
    rng = np.random.default_rng(0)
    for _ in range(20):
        k = int(rng.integers(1, 5))
        corner = rng.integers(0, 1000, 3) << k
        cube = corner + np.array(list(np.ndindex(1 << k, 1 << k, 1 << k)))
        codes = np.sort(morton_encode(cube).astype(np.int64))
        assert codes[-1] - codes[0] == len(codes) - 1


def test_sfc_encode_examples():
    assert int(sfc_encode((0.004, 0, 0), G, ZORDER)) == 1
    assert int(sfc_encode((0.004, 0, 0), G, ZORDER_T)) == 4
    assert int(sfc_encode((0, 0, 0), G, HILBERT)) == 0


def test_pattern_names():
    assert [get_pattern(n) for n in ("z", "zt", "h", "ht")] == [ZORDER, ZORDER_T, HILBERT, HILBERT_T]
    with pytest.raises(ValueError):
        get_pattern("q")


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=3, max_size=3), st.lists(st.floats(0, 10), min_size=3, max_size=3))
def test_quantize_is_monotone(p, d):
    a = quantize(p, G)
    b = quantize(np.add(p, d), G)
    assert np.all(b >= a)
