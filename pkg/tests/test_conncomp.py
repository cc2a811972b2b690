import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from helpers import mask
from lesionbench.conncomp import filter_min_size, label_components, to_mask
from lesionbench.errors import LesionBenchError
from lesionbench.phantom import PhantomSpec, generate_case
from oracles import flood_fill

bool_masks = hnp.arrays(np.uint8, hnp.array_shapes(min_dims=3, max_dims=3, max_side=7), elements=st.integers(0, 1))


def partition(ls):
    return {frozenset(map(tuple, les.voxels.tolist())) for les in ls}


def test_single_voxel():
    m = np.zeros((3, 3, 3))
    m[1, 2, 0] = 1
    ls = label_components(mask(m))
    assert len(ls) == 1 and ls.lesions[0].n_voxels == 1 and ls.lesions[0].volume_mm3 == 1.0


def test_empty_mask():
    ls = label_components(mask(np.zeros((4, 4, 4))))
    assert len(ls) == 0 and ls.total_volume_mm3 == 0
    assert not to_mask(ls).data.any()


def test_diagonal_pair_connectivity():
    m = np.zeros((2, 2, 2))
    m[0, 0, 0] = m[1, 1, 1] = 1
    assert len(label_components(mask(m), 26)) == 1
    assert len(label_components(mask(m), 18)) == 2
    assert len(label_components(mask(m), 6)) == 2


def test_edge_pair_connectivity():
    m = np.zeros((2, 2, 1))
    m[0, 0, 0] = m[1, 1, 0] = 1
    assert len(label_components(mask(m), 18)) == 1
    assert len(label_components(mask(m), 6)) == 2


def test_invalid_connectivity():
    with pytest.raises(LesionBenchError) as err:
        label_components(mask(np.zeros((2, 2, 2))), 8)
    assert err.value.code == "invalid-connectivity"


def test_labels_in_scan_order():
    m = np.zeros((5, 5, 5))
    m[4, 4, 4] = 1  # last in x-fastest order
    m[0, 0, 2] = 1
    m[3, 0, 0] = 1  # first
    ls = label_components(mask(m))
    assert [tuple(les.voxels[0]) for les in ls] == [(3, 0, 0), (0, 0, 2), (4, 4, 4)]
    assert [les.id for les in ls] == [1, 2, 3]


def test_twenty_phantom_lesions_under_all_connectivities():
    case = generate_case(PhantomSpec(dims=(48, 48, 48), n_lesions=20, min_separation=3, seed=7))
    manifest_counts = sorted(les["n_voxels"] for les in case.manifest["lesions"])
    for conn in (6, 18, 26):
        ls = label_components(case.gt, conn)
        assert len(ls) == 20
        assert sorted(ls.voxel_counts.tolist()) == manifest_counts


def test_filter_examples():
    m = np.zeros((10, 10, 10))
    m[0, 0, 0:4] = 1  # 4 voxels
    m[5, 5, 0:6] = 1  # 6 voxels
    ls = label_components(mask(m))
    kept = filter_min_size(ls, 5)
    assert [les.n_voxels for les in kept] == [6] and kept.lesions[0].id == 1
    assert partition(filter_min_size(ls, 0)) == partition(ls)

    five = np.zeros((6, 1, 1))
    five[:5] = 1
    ls = label_components(mask(five, (1, 1, 1.2)))
    assert ls.lesions[0].volume_mm3 == pytest.approx(6.0, abs=1e-12)
    assert len(filter_min_size(ls, 5)) == 1

    with pytest.raises(LesionBenchError) as err:
        filter_min_size(ls, -1)
    assert err.value.code == "invalid-size"


@settings(max_examples=80, deadline=None)
@given(bool_masks, st.sampled_from([6, 18, 26]))
def test_partition_matches_flood_fill(m, conn):
    ls = label_components(mask(m), conn)
    assert partition(ls) == set(flood_fill(m, conn))
    # union is the positive set, labels array agrees
    assert np.array_equal(to_mask(ls).data, m)
    assert np.array_equal(ls.labels > 0, m.astype(bool))


@settings(max_examples=60, deadline=None)
@given(bool_masks)
def test_connectivity_ordering(m):
    n6, n18, n26 = (len(label_components(mask(m), c)) for c in (6, 18, 26))
    assert n6 >= n18 >= n26


@settings(max_examples=60, deadline=None)
@given(bool_masks, st.floats(0, 20), st.floats(0, 20))
def test_filter_monotone(m, a, b):
    lo, hi = sorted((a, b))
    ls = label_components(mask(m))
    assert partition(filter_min_size(ls, hi)) <= partition(filter_min_size(ls, lo))
