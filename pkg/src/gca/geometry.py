"""Deterministic spatial primitives: sampling, neighbor queries, rigid motion,
and a symmetric 3x3 eigensolver.

Everything here is pure and order-deterministic: identical inputs give
identical outputs, ties are broken by the lowest index, and no global state
is touched.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

# Relative eigenvalue gap below which a spectrum counts as degenerate.
DEGENERACY_RTOL = 1e-9

_JACOBI_RTOL = 1e-13
_JACOBI_MAX_SWEEPS = 50
# Fixed pivot order makes the sweep deterministic.
_JACOBI_PIVOTS = ((0, 1), (0, 2), (1, 2))


def as_points(cloud) -> np.ndarray:
    """Coordinate array of a PointCloud or a raw (n, 3) array-like."""
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an (n, 3) point array, got shape {pts.shape}")
    return pts


def rotation_z(angle: float) -> np.ndarray:
    """Rotation by `angle` radians about the +z axis."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_from_quaternion(quat) -> np.ndarray:
    """Rotation matrix for a quaternion (w, x, y, z); normalized internally."""
    q = np.asarray(quat, dtype=np.float64)
    norm = np.linalg.norm(q)
    if norm == 0.0:
        raise ValueError("zero quaternion has no rotation")
    w, x, y, z = q / norm
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def apply_rotation(cloud, rotation):
    """Rotate a cloud, x_i -> R x_i, preserving point order.

    Accepts a PointCloud (returns a new PointCloud with the same label and
    source) or a raw (n, 3) array (returns an array).
    """
    rot = np.asarray(rotation, dtype=np.float64)
    if rot.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {rot.shape}")
    rotated = as_points(cloud) @ rot.T
    if hasattr(cloud, "points"):
        return dataclasses.replace(cloud, points=rotated)
    return rotated


def farthest_point_sampling(cloud, m: int) -> np.ndarray:
    """Greedy farthest point sampling.

    Starts from index 0; each step adds the point maximizing the minimum
    distance to the chosen set, ties broken by the lower index.

    Args:
        cloud: PointCloud or (n, 3) array.
        m: number of indices to select, 1 <= m <= n.

    Returns:
        (m,) integer array of selected indices, in selection order.
    """
    pts = as_points(cloud)
    n = len(pts)
    if not 1 <= m <= n:
        raise ValueError(f"sample size must be in [1, {n}], got {m}")
    selected = np.empty(m, dtype=np.intp)
    selected[0] = 0
    sq = (pts * pts).sum(axis=1)
    min_d2 = np.maximum(sq + sq[0] - 2.0 * (pts @ pts[0]), 0.0)
    for i in range(1, m):
        # np.argmax returns the first maximum, i.e. the lowest index on ties.
        nxt = int(np.argmax(min_d2))
        selected[i] = nxt
        d2 = sq + (sq[nxt] - 2.0 * (pts @ pts[nxt]))
        np.minimum(min_d2, d2, out=min_d2)
    return selected


def knn(cloud, query, k: int) -> np.ndarray:
    """Indices of the k nearest points to `query`, sorted by (distance, index)."""
    pts = as_points(cloud)
    n = len(pts)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    d2 = ((pts - np.asarray(query, dtype=np.float64)) ** 2).sum(axis=1)
    # Stable sort keeps the lower index first among equal distances.
    return np.argsort(d2, kind="stable")[:k]


def knn_batch(cloud, queries, k: int) -> np.ndarray:
    """kNN indices for many queries at once; row i matches knn(cloud, queries[i], k)."""
    pts = as_points(cloud)
    qs = as_points(queries)
    n = len(pts)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    d2 = pairwise_sq_dists(qs, pts)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distance matrix (len(a), len(b)), clipped at zero."""
    d2 = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


def mean_nn_distance(cloud) -> float:
    """Mean distance from each point to its nearest other point."""
    pts = as_points(cloud)
    n = len(pts)
    if n < 2:
        raise ValueError("need at least 2 points")
    best = np.empty(n)
    step = max(1, int(2**22 // max(n, 1)))
    for lo in range(0, n, step):
        d2 = pairwise_sq_dists(pts[lo : lo + step], pts)
        for i in range(d2.shape[0]):
            d2[i, lo + i] = np.inf
        best[lo : lo + step] = d2.min(axis=1)
    return float(np.sqrt(best).mean())


@dataclass
class SymEig3:
    """Eigendecomposition of a symmetric 3x3 matrix.

    eigenvalues are sorted descending; eigenvectors[:, i] pairs with
    eigenvalues[i]; degenerate flags a near-repeated spectrum.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    degenerate: bool


def sym_eig3(matrix) -> SymEig3:
    """Eigendecompose one symmetric 3x3 matrix via cyclic Jacobi sweeps."""
    a = np.asarray(matrix, dtype=np.float64)
    if a.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got {a.shape}")
    scale = max(1.0, float(np.linalg.norm(a)))
    if float(np.abs(a - a.T).max()) > 1e-12 * scale:
        raise ValueError("matrix is not symmetric")
    vals, vecs, degen = jacobi_eig_batch(0.5 * (a + a.T)[None])
    return SymEig3(vals[0], vecs[0], bool(degen[0]))


def jacobi_eig_batch(mats: np.ndarray):
    """Cyclic Jacobi eigendecomposition of a (b, 3, 3) symmetric batch.

    Sweeps the fixed pivot sequence (0,1), (0,2), (1,2) until the off-diagonal
    Frobenius norm of every matrix falls below 1e-13 times its norm, capped at
    50 sweeps. Returns (eigenvalues (b, 3) descending, eigenvectors (b, 3, 3)
    as columns, degenerate (b,) bool).
    """
    a = np.array(mats, dtype=np.float64)
    b = a.shape[0]
    v = np.broadcast_to(np.eye(3), (b, 3, 3)).copy()
    tol = _JACOBI_RTOL * np.sqrt((a * a).sum(axis=(1, 2)))
    for _ in range(_JACOBI_MAX_SWEEPS):
        off = np.sqrt(2.0 * (a[:, 0, 1] ** 2 + a[:, 0, 2] ** 2 + a[:, 1, 2] ** 2))
        if np.all(off <= tol):
            break
        for p, q in _JACOBI_PIVOTS:
            r = 3 - p - q
            apq = a[:, p, q]
            active = apq != 0.0
            if not active.any():
                continue
            theta = np.zeros(b)
            # Overflow in the divide or in theta**2 gives t = sign/inf = 0:
            # the right limit (a pivot that tiny relative to the diagonal
            # needs no rotation).
            with np.errstate(over="ignore"):
                np.divide(
                    a[:, q, q] - a[:, p, p], 2.0 * apq, out=theta, where=active
                )
                t = np.where(theta >= 0.0, 1.0, -1.0) / (
                    np.abs(theta) + np.sqrt(theta * theta + 1.0)
                )
            t[~active] = 0.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            ta = t * apq
            a[:, p, p] -= ta
            a[:, q, q] += ta
            a[:, p, q] = 0.0
            a[:, q, p] = 0.0
            arp, arq = a[:, r, p], a[:, r, q]
            new_rp = c * arp - s * arq
            new_rq = s * arp + c * arq
            a[:, r, p] = new_rp
            a[:, p, r] = new_rp
            a[:, r, q] = new_rq
            a[:, q, r] = new_rq
            cn, sn = c[:, None], s[:, None]
            vp, vq = v[:, :, p], v[:, :, q]
            new_vp = cn * vp - sn * vq
            new_vq = sn * vp + cn * vq
            v[:, :, p] = new_vp
            v[:, :, q] = new_vq
    diag = a[:, (0, 1, 2), (0, 1, 2)]
    order = np.argsort(-diag, axis=1, kind="stable")
    vals = np.take_along_axis(diag, order, axis=1)
    vecs = np.take_along_axis(v, order[:, None, :], axis=2)
    gap = np.minimum(vals[:, 0] - vals[:, 1], vals[:, 1] - vals[:, 2])
    degenerate = gap <= DEGENERACY_RTOL * np.maximum(1.0, vals[:, 0])
    return vals, vecs, degenerate
