"""Anchor points from octant binning in a local frame.

Points expressed in a keypoint's frame are binned by coordinate signs; each
bin's barycenter is an anchor. Anchor counts of 1, 2, 4, and 8 collapse the
sign dimensions in the fixed order z first, then y, so bin 0 always covers
the all-non-negative region and the canonical 8-bin order is
(+++, ++-, +-+, +--, -++, -+-, --+, ---).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import as_points
from .lrf import DegenerateFrameError, Lrf

VALID_ANCHOR_COUNTS = (1, 2, 4, 8)


@dataclass
class AnchorSet:
    """Per-bin barycenters in local coordinates plus the per-bin point count.

    Empty bins keep a (0, 0, 0) anchor and occupancy 0.
    """

    anchors_local: np.ndarray
    occupancy: np.ndarray


def to_local(x, frame: Lrf) -> np.ndarray:
    """Express a point (or (n, 3) array) in the frame: x' = axes^T (x - origin)."""
    if frame.degenerate:
        raise DegenerateFrameError("cannot project into a degenerate frame")
    return (np.asarray(x, dtype=np.float64) - frame.origin) @ frame.axes


def bin_indices(local_coords, anchor_count: int = 8) -> np.ndarray:
    """Octant bin index per local point; exact zeros count as non-negative."""
    if anchor_count not in VALID_ANCHOR_COUNTS:
        raise ValueError(f"anchor_count must be one of {VALID_ANCHOR_COUNTS}")
    lc = np.asarray(local_coords, dtype=np.float64)
    neg = lc < 0.0
    if anchor_count == 8:
        return 4 * neg[..., 0] + 2 * neg[..., 1] + neg[..., 2]
    if anchor_count == 4:
        return 2 * neg[..., 0] + neg[..., 1]
    if anchor_count == 2:
        return neg[..., 0].astype(np.intp)
    return np.zeros(lc.shape[:-1], dtype=np.intp)


def make_anchors(points, frame: Lrf, anchor_count: int = 8) -> AnchorSet:
    """Bin a point set in the frame and return the per-bin barycenters.

    Args:
        points: PointCloud or (n, 3) array in world coordinates.
        frame: the keypoint's frame.
        anchor_count: 1, 2, 4, or 8.
    """
    local = to_local(as_points(points), frame)
    anchors, occupancy = anchor_sets_batch(local[None], anchor_count)
    return AnchorSet(anchors[0], occupancy[0])


def anchor_sets_batch(local_coords: np.ndarray, anchor_count: int = 8):
    """Barycenter anchors for a (m, n, 3) batch of local point sets.

    Returns (anchors (m, A, 3), occupancy (m, A) int).
    """
    m, n, _ = local_coords.shape
    bins = bin_indices(local_coords, anchor_count)
    flat = (np.arange(m)[:, None] * anchor_count + bins).ravel()
    occupancy = np.bincount(flat, minlength=m * anchor_count).reshape(m, anchor_count)
    sums = np.empty((m * anchor_count, 3))
    for d in range(3):
        sums[:, d] = np.bincount(
            flat, weights=local_coords[:, :, d].ravel(), minlength=m * anchor_count
        )
    denom = np.maximum(occupancy.reshape(-1, 1), 1)
    anchors = (sums / denom).reshape(m, anchor_count, 3)
    return anchors, occupancy


def relation_rows(x_local, anchors) -> np.ndarray:
    """Relation of one local point to each anchor: rows (x' - a'_k, |x' - a'_k|).

    anchors may be an AnchorSet or a raw (A, 3) array; returns (A, 4).
    """
    a = anchors.anchors_local if isinstance(anchors, AnchorSet) else np.asarray(anchors)
    diff = np.asarray(x_local, dtype=np.float64)[None, :] - a
    return np.concatenate([diff, np.linalg.norm(diff, axis=1, keepdims=True)], axis=1)


def relation_tensors_batch(local_nbr: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Relation tensors for a batch: (m, k, 3) neighbors x (m, A, 3) anchors -> (m, k, A, 4)."""
    m, k = local_nbr.shape[:2]
    a = anchors.shape[1]
    out = np.empty((m, k, a, 4))
    diff = out[..., :3]
    np.subtract(local_nbr[:, :, None, :], anchors[:, None, :, :], out=diff)
    out[..., 3] = np.sqrt(np.einsum("mkab,mkab->mka", diff, diff))
    return out
