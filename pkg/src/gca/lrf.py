"""Local reference frames from globally weighted covariance.

A frame at point p is the eigenbasis of a covariance of offsets q_i - p over
a query point set, weighted so that near points dominate and the farthest
point gets weight zero. Eigenvector signs are disambiguated with the weighted
mean offset (the main orientation); the third axis is the cross product of
the first two, so frames are right-handed by construction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    as_points,
    jacobi_eig_batch,
    knn_batch,
    mean_nn_distance,
    pairwise_sq_dists,
    sym_eig3,
)

# Main-orientation projections smaller than this (relative to |O|) fall back
# to the largest-projection sign rule.
_PROJ_RTOL = 1e-9
_O_NORM_MIN = 1e-12

HISTOGRAM_BINS = 18
HISTOGRAM_BIN_WIDTH_DEG = 10.0


class DegenerateInputError(ValueError):
    """Query set cannot produce weights (all points at the same distance from p)."""


class DegenerateFrameError(ValueError):
    """Operation requires a frame whose covariance spectrum was not degenerate."""


@dataclass
class Lrf:
    """A local reference frame: origin plus orthonormal right-handed axes.

    axes columns are (e1, e2, e3) for descending eigenvalues. degenerate
    marks a near-repeated covariance spectrum (axes are then the identity);
    o_fallback_used marks that at least one sign came from the
    largest-projection rule instead of the main orientation.
    """

    origin: np.ndarray
    axes: np.ndarray
    degenerate: bool = False
    o_fallback_used: bool = False


def distance_weights(q_points, p) -> np.ndarray:
    """Normalized weights (m - |q_i - p|) / sum_j (m - |q_j - p|).

    m is the max distance over the query set, so the farthest point gets
    exactly zero weight and the weights sum to one.
    """
    q = as_points(q_points)
    if len(q) < 2:
        raise ValueError("need at least 2 query points")
    d = np.linalg.norm(q - np.asarray(p, dtype=np.float64), axis=1)
    m = d.max()
    if m <= 0.0:
        raise DegenerateInputError("all query points coincide with p")
    w = m - d
    denom = w.sum()
    if denom <= 0.0:
        raise DegenerateInputError("all query points are at the same distance from p")
    return w / denom


def weighted_covariance(q_points, p, weights) -> np.ndarray:
    """Weighted covariance sum_i w_i (q_i - p)(q_i - p)^T."""
    q = as_points(q_points)
    off = q - np.asarray(p, dtype=np.float64)
    return np.einsum("i,ia,ib->ab", np.asarray(weights, dtype=np.float64), off, off)


def local_covariance(points, p) -> np.ndarray:
    """Unweighted covariance of offsets over a local neighborhood."""
    pts = as_points(points)
    off = pts - np.asarray(p, dtype=np.float64)
    return off.T @ off


def main_orientation(q_points, p, weights) -> np.ndarray:
    """Weighted mean offset O = sum_i w_i (q_i - p); breaks sign ambiguity."""
    q = as_points(q_points)
    off = q - np.asarray(p, dtype=np.float64)
    return np.asarray(weights, dtype=np.float64) @ off


def build_lrf(q_points, p, weighted: bool = True, use_o_vector: bool = True) -> Lrf:
    """Build the frame at p from a query point set.

    Args:
        q_points: (n, 3) query set; the covariance context.
        p: the frame origin.
        weighted: distance weights if True, uniform 1/n otherwise.
        use_o_vector: disambiguate signs with the main orientation; if False
            a deliberately rotation-fragile rule is used instead (first
            nonzero component of each axis made non-negative).

    Returns:
        Lrf; axes are the identity and degenerate=True when the covariance
        spectrum has a near-repeated eigenvalue.
    """
    q = as_points(q_points)
    p = np.asarray(p, dtype=np.float64)
    if weighted:
        w = distance_weights(q, p)
    else:
        w = np.full(len(q), 1.0 / len(q))
    cov = weighted_covariance(q, p, w)
    eig = sym_eig3(cov)
    if eig.degenerate:
        return Lrf(origin=p, axes=np.eye(3), degenerate=True)
    axes = eig.eigenvectors.copy()
    fallback = False
    if use_o_vector:
        o = main_orientation(q, p, w)
        o_norm = np.linalg.norm(o)
        for i in (0, 1):
            proj = float(axes[:, i] @ o)
            if o_norm < _O_NORM_MIN or abs(proj) < _PROJ_RTOL * o_norm:
                projs = (q - p) @ axes[:, i]
                j = int(np.argmax(np.abs(projs)))
                if projs[j] < 0.0:
                    axes[:, i] = -axes[:, i]
                fallback = True
            elif proj < 0.0:
                axes[:, i] = -axes[:, i]
    else:
        _orient_first_nonzero(axes[None])
    axes[:, 2] = np.cross(axes[:, 0], axes[:, 1])
    return Lrf(origin=p, axes=axes, o_fallback_used=fallback)


def _orient_first_nonzero(axes: np.ndarray) -> None:
    """Flip columns e1, e2 so their first nonzero component is non-negative.

    In place, batched over axes (b, 3, 3). Rotation-fragile on purpose: this
    is the baseline sign rule used when the main orientation is disabled.
    """
    for i in (0, 1):
        cols = axes[:, :, i]
        first = np.argmax(cols != 0.0, axis=1)
        lead = np.take_along_axis(cols, first[:, None], axis=1)[:, 0]
        axes[:, :, i] = np.where((lead < 0.0)[:, None], -cols, cols)


def _finish_frames(covs, o_vecs, offsets_for, use_o_vector: bool):
    """Shared tail of the batched frame builders: eigen, signs, handedness.

    offsets_for(i) must return the (n_i, 3) offsets q - p_i for frame i; it is
    only called for frames that hit the projection fallback.
    """
    vals, vecs, degen = jacobi_eig_batch(covs)
    b = len(covs)
    axes = vecs.copy()
    fallback = np.zeros(b, dtype=bool)
    if use_o_vector:
        o_norm = np.linalg.norm(o_vecs, axis=1)
        for i in (0, 1):
            proj = np.einsum("ma,ma->m", axes[:, :, i], o_vecs)
            weak = (o_norm < _O_NORM_MIN) | (np.abs(proj) < _PROJ_RTOL * o_norm)
            flip = (proj < 0.0) & ~weak
            axes[:, :, i] = np.where(flip[:, None], -axes[:, :, i], axes[:, :, i])
            for m in np.nonzero(weak & ~degen)[0]:
                projs = offsets_for(int(m)) @ axes[m, :, i]
                j = int(np.argmax(np.abs(projs)))
                if projs[j] < 0.0:
                    axes[m, :, i] = -axes[m, :, i]
                fallback[m] = True
    else:
        _orient_first_nonzero(axes)
    axes[:, :, 2] = np.cross(axes[:, :, 0], axes[:, :, 1])
    axes[degen] = np.eye(3)
    return axes, degen, fallback


def build_lrfs(q_points, centers, weighted: bool = True, use_o_vector: bool = True):
    """Frames at many centers sharing one query context.

    Matches build_lrf(q_points, centers[i], ...) per row, batched. Degenerate
    frames get identity axes.

    Returns:
        (axes (m, 3, 3), degenerate (m,) bool, o_fallback_used (m,) bool)
    """
    q = as_points(q_points)
    c = as_points(centers)
    if weighted:
        d = np.sqrt(pairwise_sq_dists(c, q))
        mx = d.max(axis=1)
        if np.any(mx <= 0.0):
            raise DegenerateInputError("all query points coincide with a center")
        w = mx[:, None] - d
        denom = w.sum(axis=1)
        if np.any(denom <= 0.0):
            raise DegenerateInputError("all query points equidistant from a center")
        w /= denom[:, None]
    else:
        w = np.full((len(c), len(q)), 1.0 / len(q))
    # Moment form avoids the (m, n, 3) offset tensor: with weights summing to
    # one, cov = S2 - p mu^T - mu p^T + p p^T and O = mu - p.
    qq = (q[:, :, None] * q[:, None, :]).reshape(len(q), 9)
    s2 = (w @ qq).reshape(len(c), 3, 3)
    mu = w @ q
    covs = (
        s2
        - c[:, :, None] * mu[:, None, :]
        - mu[:, :, None] * c[:, None, :]
        + c[:, :, None] * c[:, None, :]
    )
    o_vecs = mu - c
    return _finish_frames(covs, o_vecs, lambda i: q - c[i], use_o_vector)


def build_local_lrfs(q_sets, centers, weighted: bool = False, use_o_vector: bool = True):
    """Frames at many centers, each with its own (k, 3) query set.

    q_sets has shape (m, k, 3); row i is the context for centers[i]. This is
    the local-neighborhood baseline (uniform weights by default).
    """
    qs = np.asarray(q_sets, dtype=np.float64)
    c = as_points(centers)
    offs = qs - c[:, None, :]
    if weighted:
        d = np.linalg.norm(offs, axis=2)
        mx = d.max(axis=1)
        if np.any(mx <= 0.0):
            raise DegenerateInputError("all query points coincide with a center")
        w = mx[:, None] - d
        denom = w.sum(axis=1)
        if np.any(denom <= 0.0):
            raise DegenerateInputError("all query points equidistant from a center")
        w /= denom[:, None]
    else:
        w = np.full(qs.shape[:2], 1.0 / qs.shape[1])
    m, k = qs.shape[:2]
    outer = (offs[:, :, :, None] * offs[:, :, None, :]).reshape(m, k, 9)
    covs = (w[:, None, :] @ outer).reshape(m, 3, 3)
    o_vecs = (w[:, None, :] @ offs)[:, 0, :]
    return _finish_frames(covs, o_vecs, lambda i: offs[i], use_o_vector)


def lrf_error(frame_a: Lrf, frame_b: Lrf) -> float:
    """Angle in degrees of the relative rotation between two frames.

    arccos(clamp((Tr(A^T B) - 1) / 2)) * 180 / pi; zero iff the frames agree.
    """
    if frame_a.degenerate or frame_b.degenerate:
        raise DegenerateFrameError("cannot compare degenerate frames")
    return float(_rotation_angles_deg(frame_a.axes[None], frame_b.axes[None])[0])


def _rotation_angles_deg(axes_a: np.ndarray, axes_b: np.ndarray) -> np.ndarray:
    trace = np.einsum("mab,mab->m", axes_a, axes_b)
    return np.degrees(np.arccos(np.clip((trace - 1.0) / 2.0, -1.0, 1.0)))


# ---------------------------------------------------------------------------
# Repeatability benchmark

REPEATABILITY_METHODS = ("weighted_global", "local_pca", "local_pca_no_o")


@dataclass
class RepeatabilityResult:
    """Frame agreement between a model cloud and its noisy subsampled scene."""

    method: str
    errors: np.ndarray
    counts: np.ndarray
    pairs: int
    degenerate_count: int
    mesh_resolution: float
    config: dict = field(default_factory=dict)

    @property
    def mean_error(self) -> float:
        return float(self.errors.mean()) if len(self.errors) else float("nan")


def repeatability_experiment(
    model,
    method: str = "weighted_global",
    subsample_ratio: float = 0.5,
    noise_sigma_factor: float = 0.1,
    n_pairs: int = 1000,
    k_local: int = 32,
    seed: int = 0,
) -> RepeatabilityResult:
    """Measure frame repeatability under subsampling and noise.

    The scene is a random subsample of the model with Gaussian noise whose
    sigma is noise_sigma_factor times the model's mean nearest-neighbor
    distance. Each sampled model point is paired with its nearest scene
    point; the angular error between the two frames is histogrammed into 18
    ten-degree bins. Pairs with a degenerate frame on either side are
    dropped and counted.

    Args:
        model: PointCloud or (n, 3) array.
        method: one of REPEATABILITY_METHODS. "weighted_global" builds
            distance-weighted frames over the full cloud; the local_pca
            variants build uniform-weight frames over k_local neighbors,
            with or without the main-orientation sign rule.
        subsample_ratio: fraction of model points kept in the scene.
        noise_sigma_factor: scene noise sigma in mesh-resolution units.
        n_pairs: sampled correspondences (capped at n // 2).
        k_local: neighborhood size for the local_pca methods.
        seed: RNG seed.
    """
    if method not in REPEATABILITY_METHODS:
        raise ValueError(f"unknown method {method!r}")
    if not 0.0 < subsample_ratio <= 1.0:
        raise ValueError("subsample_ratio must be in (0, 1]")
    pts = as_points(model)
    n = len(pts)
    rng = np.random.default_rng(seed)
    pairs = min(n_pairs, n // 2)
    mesh_res = mean_nn_distance(pts)

    n_scene = max(2, int(round(n * subsample_ratio)))
    scene_idx = np.sort(rng.choice(n, size=n_scene, replace=False))
    scene = pts[scene_idx]
    if noise_sigma_factor > 0.0:
        scene = scene + rng.normal(0.0, noise_sigma_factor * mesh_res, size=scene.shape)

    sel = np.sort(rng.choice(n, size=pairs, replace=False))
    corr = knn_batch(scene, pts[sel], 1)[:, 0]

    if method == "weighted_global":
        axes_m, deg_m, _ = build_lrfs(pts, pts[sel])
        axes_s, deg_s, _ = build_lrfs(scene, scene[corr])
    else:
        use_o = method == "local_pca"
        k_m = min(k_local, n)
        k_s = min(k_local, len(scene))
        nbr_m = knn_batch(pts, pts[sel], k_m)
        nbr_s = knn_batch(scene, scene[corr], k_s)
        axes_m, deg_m, _ = build_local_lrfs(pts[nbr_m], pts[sel], use_o_vector=use_o)
        axes_s, deg_s, _ = build_local_lrfs(scene[nbr_s], scene[corr], use_o_vector=use_o)

    valid = ~(deg_m | deg_s)
    errors = _rotation_angles_deg(axes_m[valid], axes_s[valid])
    bins = np.minimum((errors / HISTOGRAM_BIN_WIDTH_DEG).astype(int), HISTOGRAM_BINS - 1)
    counts = np.bincount(bins, minlength=HISTOGRAM_BINS)
    return RepeatabilityResult(
        method=method,
        errors=errors,
        counts=counts,
        pairs=pairs,
        degenerate_count=int((~valid).sum()),
        mesh_resolution=mesh_res,
        config={
            "method": method,
            "subsample_ratio": subsample_ratio,
            "noise_sigma_factor": noise_sigma_factor,
            "n_pairs": pairs,
            "k_local": k_local,
            "seed": seed,
        },
    )


def write_histogram_csv(result: RepeatabilityResult, path) -> None:
    """Write the 18-bin error histogram: bin_start_deg,bin_end_deg,count,fraction."""
    total = int(result.counts.sum())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_start_deg", "bin_end_deg", "count", "fraction"])
        for i, count in enumerate(result.counts):
            start = i * HISTOGRAM_BIN_WIDTH_DEG
            frac = int(count) / total if total else 0.0
            writer.writerow([start, start + HISTOGRAM_BIN_WIDTH_DEG, int(count), repr(frac)])


def write_repeatability_metadata(result: RepeatabilityResult, path) -> None:
    import json

    payload = dict(result.config)
    payload.update(
        {
            "degenerate_count": result.degenerate_count,
            "mesh_resolution": result.mesh_resolution,
            "mean_error_deg": result.mean_error,
        }
    )
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")
