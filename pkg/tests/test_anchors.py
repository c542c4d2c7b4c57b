import numpy as np
import pytest

from gca.anchors import (
    AnchorSet,
    VALID_ANCHOR_COUNTS,
    anchor_sets_batch,
    bin_indices,
    make_anchors,
    relation_rows,
    relation_tensors_batch,
    to_local,
)
from gca.geometry import rotation_z
from gca.lrf import DegenerateFrameError, Lrf


CUBE_CORNERS = np.array(
    [[sx, sy, sz] for sx in (1.0, -1.0) for sy in (1.0, -1.0) for sz in (1.0, -1.0)]
)

IDENTITY_FRAME = Lrf(origin=np.zeros(3), axes=np.eye(3))


def test_to_local_translates_then_rotates():
    frame = Lrf(origin=np.array([1.0, 0.0, 0.0]), axes=rotation_z(np.pi / 2))
    # x' = axes^T (x - origin)
    local = to_local(np.array([1.0, 2.0, 3.0]), frame)
    assert np.allclose(local, [2.0, 0.0, 3.0])


def test_to_local_rejects_degenerate_frame():
    frame = Lrf(origin=np.zeros(3), axes=np.eye(3), degenerate=True)
    with pytest.raises(DegenerateFrameError):
        to_local(np.ones(3), frame)


def test_bin_indices_octants_canonical_order():
    """Sign pattern (+++, ++-, +-+, +--, -++, -+-, --+, ---) maps to 0..7."""
    assert bin_indices(CUBE_CORNERS, 8).tolist() == [0, 1, 2, 3, 4, 5, 6, 7]


def test_bin_indices_zero_is_non_negative():
    pts = np.array([[0.0, 0, 0], [0.0, -1, 0], [-1.0, 0, 0], [0.0, 0, -2]])
    assert bin_indices(pts, 8).tolist() == [0, 2, 4, 1]


def test_bin_indices_collapsed_counts():
    # 4 bins drop the z sign, 2 bins keep only x, 1 bin keeps nothing
    assert bin_indices(CUBE_CORNERS, 4).tolist() == [0, 0, 1, 1, 2, 2, 3, 3]
    assert bin_indices(CUBE_CORNERS, 2).tolist() == [0, 0, 0, 0, 1, 1, 1, 1]
    assert bin_indices(CUBE_CORNERS, 1).tolist() == [0] * 8


def test_bin_indices_rejects_bad_count():
    with pytest.raises(ValueError):
        bin_indices(CUBE_CORNERS, 3)
    assert VALID_ANCHOR_COUNTS == (1, 2, 4, 8)


def test_make_anchors_cube_corners():
    """One corner per octant: each barycenter is the corner itself."""
    got = make_anchors(CUBE_CORNERS, IDENTITY_FRAME, 8)
    assert np.allclose(got.anchors_local, CUBE_CORNERS)
    assert got.occupancy.tolist() == [1] * 8


def test_make_anchors_empty_bin():
    pts = np.array([[1.0, 1, 1], [2.0, 2, 2], [-1.0, -1, -1]])
    got = make_anchors(pts, IDENTITY_FRAME, 8)
    assert np.allclose(got.anchors_local[0], [1.5, 1.5, 1.5])
    assert np.allclose(got.anchors_local[7], [-1.0, -1.0, -1.0])
    assert got.occupancy.tolist() == [2, 0, 0, 0, 0, 0, 0, 1]
    # empty bins hold the zero anchor
    assert np.array_equal(got.anchors_local[1:7], np.zeros((6, 3)))


def test_make_anchors_single_bin_is_mean():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(40, 3))
    got = make_anchors(pts, IDENTITY_FRAME, 1)
    assert got.anchors_local.shape == (1, 3)
    assert np.allclose(got.anchors_local[0], pts.mean(axis=0))
    assert got.occupancy.tolist() == [40]


def test_anchor_sets_batch_matches_single():
    rng = np.random.default_rng(6)
    batch = rng.normal(size=(9, 25, 3))
    for count in VALID_ANCHOR_COUNTS:
        anchors, occupancy = anchor_sets_batch(batch, count)
        assert anchors.shape == (9, count, 3)
        for i in range(9):
            single = make_anchors(batch[i], IDENTITY_FRAME, count)
            assert np.allclose(anchors[i], single.anchors_local, atol=1e-15)
            assert np.array_equal(occupancy[i], single.occupancy)


def test_relation_rows_hand_case():
    """Offsets and their norms against two anchors, checked by hand."""
    anchors = np.array([[0.0, 0, 0], [1.0, 1, 1]])
    rows = relation_rows(np.array([1.0, 2.0, 2.0]), anchors)
    assert np.allclose(rows[0], [1.0, 2.0, 2.0, 3.0])
    assert np.allclose(rows[1], [0.0, 1.0, 1.0, np.sqrt(2.0)])


def test_relation_rows_accepts_anchor_set():
    anchor_set = AnchorSet(
        anchors_local=np.zeros((1, 3)), occupancy=np.array([4])
    )
    rows = relation_rows(np.array([3.0, 4.0, 0.0]), anchor_set)
    assert rows.shape == (1, 4)
    assert np.allclose(rows[0], [3.0, 4.0, 0.0, 5.0])


def test_relation_tensors_batch_matches_rows():
    rng = np.random.default_rng(12)
    local_nbr = rng.normal(size=(5, 7, 3))
    anchors = rng.normal(size=(5, 8, 3))
    h = relation_tensors_batch(local_nbr, anchors)
    assert h.shape == (5, 7, 8, 4)
    for i in range(5):
        for j in range(7):
            expected = relation_rows(local_nbr[i, j], anchors[i])
            assert np.abs(h[i, j] - expected).max() < 1e-15


def test_relation_norm_column_non_negative():
    rng = np.random.default_rng(13)
    h = relation_tensors_batch(rng.normal(size=(4, 6, 3)), rng.normal(size=(4, 2, 3)))
    assert (h[..., 3] >= 0.0).all()
