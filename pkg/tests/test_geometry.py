import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fovit.geometry import (
    ActiveSet,
    Fixation,
    FoveaLayout,
    LayoutError,
    PoolingRegion,
    active_regions,
    build_canonical_layout,
    centers_for_confidence,
    foveation_tables,
    pad_sequence,
    pool_features,
    pooling_matrix,
)

from oracles import naive_active_count, naive_pool

ALL_FIXATIONS = [(x, y) for y in range(14) for x in range(14)]


@pytest.fixture(scope="module")
def layout():
    return build_canonical_layout()


def test_canonical_counts(layout):
    assert len(layout.regions) == 49
    by_rf = {rf: [r for r in layout.regions if r.rf == rf] for rf in (1, 3, 5, 7)}
    assert [len(by_rf[rf]) for rf in (1, 3, 5, 7)] == [9, 8, 12, 20]
    assert {(r.dx, r.dy) for r in by_rf[1]} == set(itertools.product((-1, 0, 1), repeat=2))


def test_area_fractions(layout):
    fractions = {r.rf: layout.area_fraction(r) for r in layout.regions}
    assert fractions == {1: 1 / 729, 3: 9 / 729, 5: 25 / 729, 7: 49 / 729}
    # reported percentages; 9/729 is 1.2346%, printed as 1.24
    reported = [0.14, 1.24, 3.43, 6.72]
    np.testing.assert_allclose([100 * fractions[rf] for rf in (1, 3, 5, 7)], reported, atol=0.0055)
    assert round(100 * layout.image_fraction, 2) == 26.89


def test_field_coverage(layout):
    covered = np.zeros((27, 27), dtype=bool)
    for r in layout.regions:
        for dx, dy in r.footprint():
            covered[dy + 13, dx + 13] = True
    assert covered.all()


def test_capacity_is_exhaustive_max(layout):
    counts = [naive_active_count(layout, x, y) for x, y in ALL_FIXATIONS]
    assert layout.capacity == max(counts)
    assert build_canonical_layout().capacity == layout.capacity


def test_broken_layout_rejected(layout):
    with pytest.raises(LayoutError):
        FoveaLayout(layout.regions[:-1])
    # drop the outermost ring's coverage by shrinking one region
    regions = list(layout.regions)
    last = regions[-1]
    regions[-1] = PoolingRegion(last.id, last.dx, last.dy, 1)
    with pytest.raises(LayoutError):
        FoveaLayout(tuple(regions))


def test_region_ids_ascending(layout):
    for f in [(0, 0), (7, 7), (13, 2)]:
        ids = active_regions(layout, f).region_ids
        assert list(ids) == sorted(ids)


def test_center_fixation_has_full_fovea(layout):
    active = active_regions(layout, (7, 7))
    assert set(range(9)) <= set(active.region_ids)


@pytest.mark.parametrize("f", [(0, 0), (13, 13), (0, 13), (5, 9)])
def test_active_count_matches_membership(layout, f):
    assert active_regions(layout, f).count == naive_active_count(layout, *f)


def test_active_out_of_range(layout):
    with pytest.raises(ValueError):
        active_regions(layout, (14, 0))
    with pytest.raises(ValueError):
        Fixation(-1, 3)


def test_identity_fovea(layout):
    rng = np.random.default_rng(0)
    grid = rng.normal(size=(14, 14, 5))
    pooled = pool_features(grid, layout, (4, 6))
    ids = active_regions(layout, (4, 6)).region_ids
    center_row = ids.index(4)  # region 4 is offset (0, 0)
    assert np.array_equal(pooled[center_row], grid[6, 4])


def test_constant_grid_inside_region(layout):
    c = np.arange(6, dtype=np.float64)
    grid = np.broadcast_to(c, (14, 14, 6)).copy()
    pooled = pool_features(grid, layout, (7, 7))
    ids = active_regions(layout, (7, 7)).region_ids
    for row, rid in enumerate(ids):
        if layout.regions[rid].rf == 3:
            np.testing.assert_allclose(pooled[row], c, rtol=1e-12)


def test_pool_matches_naive_oracle_at_3_10(layout):
    rng = np.random.default_rng(1)
    grid = rng.normal(size=(14, 14, 8))
    pooled = pool_features(grid, layout, (3, 10))
    active = active_regions(layout, (3, 10))
    for row, rid in enumerate(active.region_ids):
        np.testing.assert_allclose(pooled[row], naive_pool(grid, layout.regions[rid], 3, 10), rtol=1e-6)


def test_pooling_matrix_agrees_with_pool_features(layout):
    rng = np.random.default_rng(2)
    grid = rng.normal(size=(14, 14, 4))
    for f in [(0, 0), (3, 10), (13, 7)]:
        mat = pooling_matrix(layout, f)
        np.testing.assert_allclose(mat @ grid.reshape(196, 4), pool_features(grid, layout, f), rtol=1e-12)


def test_foveation_tables(layout):
    t = foveation_tables(layout)
    assert t.matrices.shape == (196, layout.capacity, 196)
    assert t.mask.sum(axis=1).tolist() == t.counts.tolist()
    k = 3 * 14 + 5
    assert (t.centers[k, : t.counts[k]] == np.array(active_regions(layout, (5, 3)).centers)).all()


def test_pad_sequence():
    pooled = np.ones((22, 3))
    tokens, mask = pad_sequence(pooled, 29)
    assert tokens.shape == (29, 3)
    assert mask.tolist() == [True] * 22 + [False] * 7
    assert (tokens[22:] == 0).all()
    full, full_mask = pad_sequence(np.ones((29, 3)), 29)
    assert np.array_equal(full, np.ones((29, 3))) and full_mask.all()
    with pytest.raises(RuntimeError):
        pad_sequence(np.zeros((0, 3)), 29)
    with pytest.raises(RuntimeError):
        pad_sequence(np.zeros((30, 3)), 29)


def test_centers_for_confidence(layout):
    active = active_regions(layout, (5, 5))
    centers = centers_for_confidence(active)
    assert len(centers) == active.count
    assert centers[active.region_ids.index(5)] == (6, 5)  # region 5 is offset (1, 0)
    assert all(0 <= x < 14 and 0 <= y < 14 for x, y in centers)


def test_pool_dimension_mismatch(layout):
    with pytest.raises(ValueError):
        pool_features(np.zeros((13, 14, 3)), layout, (0, 0))


def test_dump_roundtrip(layout):
    text = layout.dump()
    assert f"# capacity {layout.capacity}" in text
    again = FoveaLayout.parse(text)
    assert again.regions == layout.regions
    assert again.dump() == text


fixations = st.tuples(st.integers(0, 13), st.integers(0, 13))


@settings(max_examples=40, deadline=None)
@given(f=fixations, seed=st.integers(0, 2**31 - 1), a=st.floats(-3, 3))
def test_linearity(layout, f, seed, a):
    rng = np.random.default_rng(seed)
    g1, g2 = rng.normal(size=(2, 14, 14, 3))
    lhs = pool_features(a * g1 + g2, layout, f)
    rhs = a * pool_features(g1, layout, f) + pool_features(g2, layout, f)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-6, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(f=fixations, seed=st.integers(0, 2**31 - 1))
def test_permutation_inside_footprint(layout, f, seed):
    rng = np.random.default_rng(seed)
    grid = rng.normal(size=(14, 14, 3))
    active = active_regions(layout, f)
    rid = active.region_ids[-1]
    region = layout.regions[rid]
    cells = [
        (f[1] + dy, f[0] + dx)
        for dx, dy in region.footprint()
        if 0 <= f[0] + dx < 14 and 0 <= f[1] + dy < 14
    ]
    shuffled = grid.copy()
    perm = rng.permutation(len(cells))
    for (y, x), k in zip(cells, perm):
        shuffled[y, x] = grid[cells[k]]
    np.testing.assert_allclose(
        pool_features(shuffled, layout, f)[-1], pool_features(grid, layout, f)[-1], rtol=1e-12, atol=1e-12
    )


def test_fovea_fidelity_every_fixation(layout):
    rng = np.random.default_rng(3)
    grid = rng.normal(size=(14, 14, 4)).astype(np.float32)
    for f in ALL_FIXATIONS:
        active = active_regions(layout, f)
        pooled = pool_features(grid, layout, f)
        for row, (rid, (cx, cy)) in enumerate(zip(active.region_ids, active.centers)):
            if layout.regions[rid].rf == 1:
                assert np.array_equal(pooled[row], grid[cy, cx])


def test_determinism(layout):
    grid = np.random.default_rng(4).normal(size=(14, 14, 3))
    assert np.array_equal(pool_features(grid, layout, (2, 2)), pool_features(grid, layout, (2, 2)))
    assert isinstance(active_regions(layout, (2, 2)), ActiveSet)
