"""Anchor-context convolution with hand-derived gradients.

Per keypoint: each neighbor's relation tensor h_j (anchor_count x 4 rows of
anchor offsets and their norms, all in the keypoint's frame) is contracted
with a kernel into a per-channel weight w_j, which modulates the neighbor
feature f_j; channels are max-pooled over the neighborhood, lifted to the
output width, and passed through ReLU. Because h and the first-layer
features live in local frames, the whole stack is rotation invariant by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import (
    VALID_ANCHOR_COUNTS,
    AnchorSet,
    anchor_sets_batch,
    relation_tensors_batch,
)
from .geometry import farthest_point_sampling, knn_batch
from .lrf import Lrf, build_local_lrfs, build_lrfs


@dataclass
class LayerConfig:
    """Shape and behavior of one convolution layer."""

    c_in: int
    c_out: int
    keypoints_out: int
    k_neighbors: int = 32
    anchor_count: int = 8
    weighted_lrf: bool = True
    use_o_vector: bool = True
    use_anchors: bool = True

    def __post_init__(self):
        if self.anchor_count not in VALID_ANCHOR_COUNTS:
            raise ValueError(f"anchor_count must be one of {VALID_ANCHOR_COUNTS}")
        for name in ("c_in", "c_out", "keypoints_out", "k_neighbors"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def effective_anchors(self) -> int:
        """Kernel anchor axis: collapses to 1 when anchors are disabled."""
        return self.anchor_count if self.use_anchors else 1


@dataclass
class LayerParams:
    kernel: np.ndarray  # (c_in, 4, A)
    kernel_bias: np.ndarray  # (c_in,)
    lift: np.ndarray  # (c_in, c_out)
    lift_bias: np.ndarray  # (c_out,)


@dataclass
class LayerGrads:
    kernel: np.ndarray
    kernel_bias: np.ndarray
    lift: np.ndarray
    lift_bias: np.ndarray


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_layer_params(config: LayerConfig, rng: np.random.Generator) -> LayerParams:
    """Glorot-uniform kernel and lift, zero biases; draws in a fixed order."""
    a = config.effective_anchors
    kernel = glorot_uniform(rng, (config.c_in, 4, a), fan_in=4 * a, fan_out=config.c_in)
    lift = glorot_uniform(rng, (config.c_in, config.c_out), config.c_in, config.c_out)
    return LayerParams(
        kernel=kernel,
        kernel_bias=np.zeros(config.c_in),
        lift=lift,
        lift_bias=np.zeros(config.c_out),
    )


def initial_features(local_coords: np.ndarray) -> np.ndarray:
    """First-layer neighbor features: (x', |x'|) per point, shape (..., 4)."""
    lc = np.asarray(local_coords, dtype=np.float64)
    norm = np.linalg.norm(lc, axis=-1, keepdims=True)
    return np.concatenate([lc, norm], axis=-1)


@dataclass
class KeypointContext:
    """Everything conv_forward needs for one keypoint."""

    frame: Lrf
    local_coords: np.ndarray  # (k, 3) neighbors in the frame
    features: np.ndarray  # (k, c_in)
    anchors: AnchorSet | None = None


@dataclass
class LayerActivation:
    """Cache of one conv_forward pass, consumed by conv_backward."""

    h: np.ndarray  # (k, A, 4)
    features: np.ndarray  # (k, c_in)
    weights: np.ndarray  # (k, c_in)
    argmax: np.ndarray  # (c_in,)
    pooled: np.ndarray  # (c_in,)
    pre_activation: np.ndarray  # (c_out,)


def conv_forward(params: LayerParams, config: LayerConfig, ctx: KeypointContext):
    """One keypoint's convolution.

    Returns (output (c_out,), LayerActivation). Ties in the max pool resolve
    to the lowest neighbor index, so the result is independent of neighbor
    order.
    """
    if config.use_anchors:
        if ctx.anchors is None:
            raise ValueError("config.use_anchors needs ctx.anchors")
        h = relation_tensors_batch(
            ctx.local_coords[None], ctx.anchors.anchors_local[None]
        )[0]
    else:
        h = initial_features(ctx.local_coords)[:, None, :]
    feats = np.asarray(ctx.features, dtype=np.float64)
    if feats.shape != (h.shape[0], config.c_in):
        raise ValueError(
            f"features shape {feats.shape} does not match "
            f"({h.shape[0]}, {config.c_in})"
        )
    w = np.einsum("crk,jkr->jc", params.kernel, h) + params.kernel_bias
    modulated = w * feats
    argmax = modulated.argmax(axis=0)
    pooled = np.take_along_axis(modulated, argmax[None, :], axis=0)[0]
    pre = pooled @ params.lift + params.lift_bias
    out = np.maximum(pre, 0.0)
    return out, LayerActivation(h, feats, w, argmax, pooled, pre)


def conv_backward(params: LayerParams, activation: LayerActivation, grad_out: np.ndarray):
    """Gradients of one keypoint's convolution.

    Args:
        params: the parameters used in the forward pass.
        activation: cache returned by conv_forward.
        grad_out: (c_out,) upstream gradient.

    Returns:
        (LayerGrads, dfeatures (k, c_in)). The max pool routes gradient only
        to the argmax neighbor per channel; ReLU passes gradient only where
        the pre-activation is strictly positive.
    """
    c_in, c_out = params.lift.shape
    if activation.weights.shape[1] != c_in or grad_out.shape != (c_out,):
        raise ValueError("activation does not match parameters")
    dpre = grad_out * (activation.pre_activation > 0.0)
    dlift = np.outer(activation.pooled, dpre)
    dpooled = params.lift @ dpre
    k = activation.features.shape[0]
    dmod = np.zeros((k, c_in))
    cols = np.arange(c_in)
    dmod[activation.argmax, cols] = dpooled
    dw = dmod * activation.features
    dfeatures = dmod * activation.weights
    dkernel = np.einsum("jc,jkr->crk", dw, activation.h)
    grads = LayerGrads(
        kernel=dkernel,
        kernel_bias=dw.sum(axis=0),
        lift=dlift,
        lift_bias=dpre.copy(),
    )
    return grads, dfeatures


def _contract_kernel(kernel: np.ndarray, h: np.ndarray) -> np.ndarray:
    """sum_{r,k} kernel[c,r,k] h[..., k, r] via one matmul."""
    c_in = kernel.shape[0]
    kflat = kernel.reshape(c_in, -1)  # (c, r*k)
    lead = h.shape[:-2]
    hflat = np.swapaxes(h, -1, -2).reshape(-1, kflat.shape[1])  # rows (r*k)
    return (hflat @ kflat.T).reshape(*lead, c_in)


# ---------------------------------------------------------------------------
# Batched layer pass over all keypoints (used by the network)


@dataclass
class LayerState:
    """Cache of one batched layer pass."""

    keypoint_indices: np.ndarray  # (m,)
    points: np.ndarray  # (m, 3) keypoint coordinates
    axes: np.ndarray  # (m, 3, 3)
    degenerate: np.ndarray  # (m,) bool
    o_fallback: np.ndarray  # (m,) bool
    neighbor_indices: np.ndarray  # (m, k)
    anchors: np.ndarray | None  # (m, A, 3)
    occupancy: np.ndarray | None  # (m, A)
    h: np.ndarray  # (m, k, A, 4)
    features: np.ndarray  # (m, k, c_in)
    weights: np.ndarray  # (m, k, c_in)
    argmax: np.ndarray  # (m, c_in)
    pooled: np.ndarray  # (m, c_in)
    pre_activation: np.ndarray  # (m, c_out)
    first_layer: bool = False
    n_points_in: int = 0


def layer_forward(
    params: LayerParams,
    config: LayerConfig,
    points: np.ndarray,
    features: np.ndarray | None,
    bin_points: np.ndarray | None = None,
):
    """Run one layer over a whole cloud.

    Args:
        points: (n, 3) incoming point set.
        features: (n, c_in) incoming features, or None for the first layer
            (features are then (x', |x'|) of the neighbors themselves).
        bin_points: optional reference set for anchor binning; defaults to
            the incoming points.

    Returns:
        (keypoints (m, 3), output features (m, c_out), LayerState).
    """
    n = len(points)
    kp_idx = farthest_point_sampling(points, config.keypoints_out)
    q = points[kp_idx]
    nbr = knn_batch(points, q, config.k_neighbors)
    if config.weighted_lrf:
        axes, degen, fb = build_lrfs(q, q, use_o_vector=config.use_o_vector)
    else:
        axes, degen, fb = build_local_lrfs(
            points[nbr], q, weighted=False, use_o_vector=config.use_o_vector
        )
    axes = axes.copy()
    axes[degen] = np.eye(3)

    anchors = occupancy = None
    local_nbr = None
    if config.use_anchors:
        ref = points if bin_points is None else bin_points
        local_ref = np.matmul(ref[None, :, :] - q[:, None, :], axes)
        anchors, occupancy = anchor_sets_batch(local_ref, config.anchor_count)
        if bin_points is None:
            local_nbr = np.take_along_axis(local_ref, nbr[:, :, None], axis=1)
    if local_nbr is None:
        local_nbr = np.matmul(points[nbr] - q[:, None, :], axes)

    if config.use_anchors:
        h = relation_tensors_batch(local_nbr, anchors)
    else:
        h = initial_features(local_nbr)[:, :, None, :]
    feats = initial_features(local_nbr) if features is None else features[nbr]
    w = _contract_kernel(params.kernel, h) + params.kernel_bias
    modulated = w * feats
    argmax = modulated.argmax(axis=1)
    m_rows = np.arange(modulated.shape[0])[:, None]
    c_cols = np.arange(modulated.shape[2])[None, :]
    pooled = modulated[m_rows, argmax, c_cols]
    pre = pooled @ params.lift + params.lift_bias
    out = np.maximum(pre, 0.0)
    state = LayerState(
        keypoint_indices=kp_idx,
        points=q,
        axes=axes,
        degenerate=degen,
        o_fallback=fb,
        neighbor_indices=nbr,
        anchors=anchors,
        occupancy=occupancy,
        h=h,
        features=feats,
        weights=w,
        argmax=argmax,
        pooled=pooled,
        pre_activation=pre,
        first_layer=features is None,
        n_points_in=n,
    )
    return q, out, state


def layer_backward(params: LayerParams, state: LayerState, grad_out: np.ndarray):
    """Gradients of a batched layer pass.

    Args:
        grad_out: (m, c_out) upstream gradient on the layer outputs.

    Returns:
        (LayerGrads, dfeatures (n, c_in) or None for the first layer). Input
        feature gradients accumulate through the neighbor gather.
    """
    m, c_in = state.pooled.shape
    dpre = grad_out * (state.pre_activation > 0.0)
    dlift = state.pooled.T @ dpre
    dlift_bias = dpre.sum(axis=0)
    dpooled = dpre @ params.lift.T
    rows = np.arange(m)[:, None]
    cols = np.arange(c_in)[None, :]
    f_at = state.features[rows, state.argmax, cols]
    w_at = state.weights[rows, state.argmax, cols]
    h_at = state.h[rows, state.argmax]  # (m, c_in, A, 4)
    dw_at = dpooled * f_at
    # dkernel[c, r, k] = sum_m dw_at[m, c] h_at[m, c, k, r], one matmul per channel
    ht = h_at.transpose(1, 0, 3, 2).reshape(c_in, m, -1)
    dkernel = (dw_at.T[:, None, :] @ ht).reshape(params.kernel.shape)
    dkernel_bias = dw_at.sum(axis=0)
    grads = LayerGrads(dkernel, dkernel_bias, dlift, dlift_bias)
    if state.first_layer:
        return grads, None
    df_at = dpooled * w_at  # (m, c_in)
    point_idx = np.take_along_axis(state.neighbor_indices, state.argmax, axis=1)
    flat = point_idx.ravel() * c_in + np.tile(np.arange(c_in), m)
    dfeatures = np.bincount(
        flat, weights=df_at.ravel(), minlength=state.n_points_in * c_in
    ).reshape(state.n_points_in, c_in)
    return grads, dfeatures
