import numpy as np
import pytest

from gca.anchors import AnchorSet
from gca.conv import (
    KeypointContext,
    LayerConfig,
    conv_backward,
    conv_forward,
    glorot_uniform,
    init_layer_params,
    initial_features,
    layer_backward,
    layer_forward,
)
from gca.conv import LayerParams, _contract_kernel
from gca.lrf import Lrf


IDENTITY_FRAME = Lrf(origin=np.zeros(3), axes=np.eye(3))


def hand_params():
    """c_in = c_out = 1, one anchor, every value chosen by hand."""
    return LayerParams(
        kernel=np.array([0.5, -1.0, 2.0, 0.25]).reshape(1, 4, 1),
        kernel_bias=np.array([0.1]),
        lift=np.array([[-2.0]]),
        lift_bias=np.array([0.5]),
    )


def hand_config(**overrides):
    base = dict(c_in=1, c_out=1, keypoints_out=1, k_neighbors=1, anchor_count=1)
    base.update(overrides)
    return LayerConfig(**base)


def origin_anchor():
    return AnchorSet(anchors_local=np.zeros((1, 3)), occupancy=np.array([1]))


# ---------------------------------------------------------------------------
# Configuration and initialization


def test_layer_config_validation():
    with pytest.raises(ValueError):
        LayerConfig(c_in=4, c_out=8, keypoints_out=16, anchor_count=3)
    with pytest.raises(ValueError):
        LayerConfig(c_in=0, c_out=8, keypoints_out=16)
    with pytest.raises(ValueError):
        LayerConfig(c_in=4, c_out=8, keypoints_out=0)


def test_effective_anchors():
    assert LayerConfig(c_in=4, c_out=8, keypoints_out=4).effective_anchors == 8
    no_anchor = LayerConfig(c_in=4, c_out=8, keypoints_out=4, use_anchors=False)
    assert no_anchor.effective_anchors == 1


def test_glorot_uniform_bounds():
    rng = np.random.default_rng(0)
    vals = glorot_uniform(rng, (1000,), fan_in=30, fan_out=20)
    limit = np.sqrt(6.0 / 50.0)
    assert np.abs(vals).max() <= limit
    # the draw actually spans the range instead of collapsing
    assert np.abs(vals).max() > 0.9 * limit
    assert abs(vals.mean()) < 0.02


def test_init_layer_params_shapes_and_determinism():
    config = LayerConfig(c_in=4, c_out=16, keypoints_out=8, anchor_count=8)
    a = init_layer_params(config, np.random.default_rng(5))
    b = init_layer_params(config, np.random.default_rng(5))
    assert a.kernel.shape == (4, 4, 8)
    assert a.lift.shape == (4, 16)
    assert np.array_equal(a.kernel_bias, np.zeros(4))
    assert np.array_equal(a.lift_bias, np.zeros(16))
    assert np.array_equal(a.kernel, b.kernel)
    assert np.array_equal(a.lift, b.lift)
    c = init_layer_params(config, np.random.default_rng(6))
    assert not np.array_equal(a.kernel, c.kernel)


def test_initial_features_appends_norm():
    feats = initial_features(np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 0.0]]))
    assert np.allclose(feats, [[3.0, 4.0, 0.0, 5.0], [0.0, 0.0, 0.0, 0.0]])


def test_contract_kernel_matches_einsum():
    rng = np.random.default_rng(21)
    kernel = rng.normal(size=(6, 4, 8))
    h = rng.normal(size=(9, 11, 8, 4))
    got = _contract_kernel(kernel, h)
    expected = np.einsum("crk,mjkr->mjc", kernel, h)
    assert np.abs(got - expected).max() < 1e-12


# ---------------------------------------------------------------------------
# Single-keypoint convolution


def test_conv_forward_hand_case():
    """One neighbor at (1,2,2) against the origin anchor, all values by hand.

    kernel row (0.5,-1,2,0.25) against h=(1,2,2,3) gives 3.25, plus bias 0.1;
    modulated by the feature -0.4 gives -1.34; lifted by -2 plus 0.5 is 3.18.
    """
    ctx = KeypointContext(
        frame=IDENTITY_FRAME,
        local_coords=np.array([[1.0, 2.0, 2.0]]),
        features=np.array([[-0.4]]),
        anchors=origin_anchor(),
    )
    out, act = conv_forward(hand_params(), hand_config(), ctx)
    assert out[0] == pytest.approx(3.18, abs=1e-15)
    assert act.weights[0, 0] == pytest.approx(3.35)
    assert act.pooled[0] == pytest.approx(-1.34)


def test_conv_forward_max_pool_picks_larger():
    ctx = KeypointContext(
        frame=IDENTITY_FRAME,
        local_coords=np.array([[1.0, 2.0, 2.0], [-1.0, 0.0, 0.0]]),
        features=np.array([[-0.4], [1.0]]),
        anchors=origin_anchor(),
    )
    out, act = conv_forward(hand_params(), hand_config(k_neighbors=2), ctx)
    # second neighbor: w = -0.5 + 0.25 + 0.1 = -0.15, modulated -0.15 > -1.34
    assert act.argmax[0] == 1
    assert act.pooled[0] == pytest.approx(-0.15)
    assert out[0] == pytest.approx(0.8)


def test_conv_forward_relu_clamps():
    params = hand_params()
    params.lift_bias[0] = -10.0
    ctx = KeypointContext(
        frame=IDENTITY_FRAME,
        local_coords=np.array([[1.0, 2.0, 2.0]]),
        features=np.array([[-0.4]]),
        anchors=origin_anchor(),
    )
    out, _ = conv_forward(params, hand_config(), ctx)
    assert out[0] == 0.0


def test_conv_forward_neighbor_order_irrelevant():
    """Max pooling over neighbors makes the output order-free, exactly."""
    rng = np.random.default_rng(31)
    coords = rng.normal(size=(10, 3))
    feats = rng.normal(size=(10, 3))
    anchors = AnchorSet(rng.normal(size=(8, 3)), np.ones(8, dtype=int))
    config = LayerConfig(c_in=3, c_out=5, keypoints_out=1, k_neighbors=10)
    params = init_layer_params(config, rng)
    base, _ = conv_forward(
        params,
        config,
        KeypointContext(IDENTITY_FRAME, coords, feats, anchors),
    )
    for seed in range(5):
        perm = np.random.default_rng(seed).permutation(10)
        shuffled, _ = conv_forward(
            params,
            config,
            KeypointContext(IDENTITY_FRAME, coords[perm], feats[perm], anchors),
        )
        assert np.array_equal(base, shuffled)


def test_conv_forward_tie_takes_lowest_neighbor():
    params = hand_params()
    ctx = KeypointContext(
        frame=IDENTITY_FRAME,
        local_coords=np.array([[1.0, 2.0, 2.0], [1.0, 2.0, 2.0]]),
        features=np.array([[-0.4], [-0.4]]),
        anchors=origin_anchor(),
    )
    _, act = conv_forward(params, hand_config(k_neighbors=2), ctx)
    assert act.argmax[0] == 0


def test_conv_forward_without_anchors():
    """use_anchors=False falls back to the (x', |x'|) self relation."""
    config = hand_config(use_anchors=False)
    ctx = KeypointContext(
        frame=IDENTITY_FRAME,
        local_coords=np.array([[1.0, 2.0, 2.0]]),
        features=np.array([[-0.4]]),
    )
    out, act = conv_forward(hand_params(), config, ctx)
    assert act.h.shape == (1, 1, 4)
    # h is again (1,2,2,3), so the result matches the anchored hand case
    assert out[0] == pytest.approx(3.18, abs=1e-15)


def test_conv_forward_feature_shape_mismatch():
    ctx = KeypointContext(
        frame=IDENTITY_FRAME,
        local_coords=np.array([[1.0, 2.0, 2.0]]),
        features=np.array([[1.0, 2.0]]),
        anchors=origin_anchor(),
    )
    with pytest.raises(ValueError):
        conv_forward(hand_params(), hand_config(), ctx)


def test_conv_backward_finite_difference():
    """Analytic gradients of a single keypoint match central differences."""
    rng = np.random.default_rng(40)
    k, c_in, c_out, a = 7, 3, 4, 8
    config = LayerConfig(c_in=c_in, c_out=c_out, keypoints_out=1, k_neighbors=k)
    params = init_layer_params(config, rng)
    ctx = KeypointContext(
        frame=IDENTITY_FRAME,
        local_coords=rng.normal(size=(k, 3)),
        features=rng.normal(size=(k, c_in)),
        anchors=AnchorSet(rng.normal(size=(a, 3)), np.ones(a, dtype=int)),
    )
    v = rng.normal(size=c_out)

    def loss():
        out, _ = conv_forward(params, config, ctx)
        return float(out @ v)

    out, act = conv_forward(params, config, ctx)
    assert np.abs(act.pre_activation).min() > 1e-4  # away from the ReLU kink
    grads, dfeatures = conv_backward(params, act, v)

    step = 1e-6
    for arr, grad in (
        (params.kernel, grads.kernel),
        (params.kernel_bias, grads.kernel_bias),
        (params.lift, grads.lift),
        (params.lift_bias, grads.lift_bias),
        (ctx.features, dfeatures),
    ):
        flat, gflat = arr.ravel(), grad.ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            hi = loss()
            flat[idx] = orig - step
            lo = loss()
            flat[idx] = orig
            fd = (hi - lo) / (2.0 * step)
            assert gflat[idx] == pytest.approx(fd, abs=1e-5, rel=1e-5)


def test_conv_backward_rejects_mismatched_shapes():
    ctx = KeypointContext(
        frame=IDENTITY_FRAME,
        local_coords=np.array([[1.0, 2.0, 2.0]]),
        features=np.array([[-0.4]]),
        anchors=origin_anchor(),
    )
    _, act = conv_forward(hand_params(), hand_config(), ctx)
    with pytest.raises(ValueError):
        conv_backward(hand_params(), act, np.zeros(3))


# ---------------------------------------------------------------------------
# Batched layer pass


def test_layer_forward_shapes_first_layer():
    rng = np.random.default_rng(50)
    points = rng.normal(size=(40, 3))
    config = LayerConfig(c_in=4, c_out=6, keypoints_out=8, k_neighbors=5)
    params = init_layer_params(config, rng)
    q, out, state = layer_forward(params, config, points, None)
    assert q.shape == (8, 3)
    assert out.shape == (8, 6)
    assert (out >= 0.0).all()
    assert state.h.shape == (8, 5, 8, 4)
    assert state.features.shape == (8, 5, 4)
    assert state.first_layer
    assert state.n_points_in == 40
    assert state.neighbor_indices.shape == (8, 5)
    # keypoints really are the FPS picks
    assert np.array_equal(q, points[state.keypoint_indices])


def test_layer_forward_matches_single_keypoint():
    """The batched pass agrees with conv_forward run frame by frame."""
    rng = np.random.default_rng(51)
    points = rng.normal(size=(30, 3))
    feats = rng.normal(size=(30, 5))
    config = LayerConfig(c_in=5, c_out=7, keypoints_out=6, k_neighbors=8)
    params = init_layer_params(config, rng)
    q, out, state = layer_forward(params, config, points, feats)
    for i in range(6):
        nbr = state.neighbor_indices[i]
        frame = Lrf(origin=q[i], axes=state.axes[i], degenerate=bool(state.degenerate[i]))
        local = (points[nbr] - q[i]) @ state.axes[i]
        anchors = AnchorSet(state.anchors[i], state.occupancy[i])
        ctx = KeypointContext(frame, local, feats[nbr], anchors)
        single, _ = conv_forward(params, config, ctx)
        assert np.abs(out[i] - single).max() < 1e-12


def test_layer_backward_finite_difference():
    rng = np.random.default_rng(52)
    points = rng.normal(size=(26, 3))
    feats = rng.normal(size=(26, 3))
    config = LayerConfig(c_in=3, c_out=4, keypoints_out=5, k_neighbors=6)
    params = init_layer_params(config, rng)
    v = rng.normal(size=(5, 4))

    def loss():
        _, out, _ = layer_forward(params, config, points, feats)
        return float((out * v).sum())

    _, out, state = layer_forward(params, config, points, feats)
    assert np.abs(state.pre_activation).min() > 1e-4
    grads, dfeatures = layer_backward(params, state, v)
    assert dfeatures.shape == (26, 3)

    step = 1e-6
    rng_pick = np.random.default_rng(0)
    for arr, grad in (
        (params.kernel, grads.kernel),
        (params.lift, grads.lift),
        (params.kernel_bias, grads.kernel_bias),
        (params.lift_bias, grads.lift_bias),
        (feats, dfeatures),
    ):
        flat, gflat = arr.ravel(), grad.ravel()
        picks = rng_pick.choice(flat.size, size=min(20, flat.size), replace=False)
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + step
            hi = loss()
            flat[idx] = orig - step
            lo = loss()
            flat[idx] = orig
            fd = (hi - lo) / (2.0 * step)
            assert gflat[idx] == pytest.approx(fd, abs=1e-5, rel=1e-5)
