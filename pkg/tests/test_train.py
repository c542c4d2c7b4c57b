import numpy as np
import pytest

from gca.network import GcaNetwork, NetworkConfig
from gca.pcio import RotationMode, ToyDataset, make_toy_dataset
from gca.train import (
    TrainConfig,
    _derived_seed,
    _has_loss_regression,
    _smoothed,
    adam_init,
    adam_step,
    cross_entropy,
    evaluate,
    loss_and_gradients,
    softmax,
    train,
)


def tiny_config(num_classes=5):
    return NetworkConfig(
        num_classes=num_classes,
        conv_channels=(8, 12),
        keypoints=(24, 12),
        k_neighbors=8,
        head_hidden=(16,),
    )


# ---------------------------------------------------------------------------
# Loss


def test_softmax_uniform():
    probs = softmax(np.zeros(5))
    assert np.allclose(probs, 0.2)
    assert softmax(np.array([1000.0, 1000.0])).tolist() == [0.5, 0.5]


def test_softmax_shift_invariant():
    rng = np.random.default_rng(1)
    z = rng.normal(size=7)
    assert np.allclose(softmax(z), softmax(z + 123.0), atol=1e-15)


def test_cross_entropy_uniform_logits():
    """Uniform logits over 5 classes cost exactly ln 5."""
    loss, grad = cross_entropy(np.zeros(5), 2)
    assert loss == pytest.approx(np.log(5.0), abs=1e-15)
    expected = np.full(5, 0.2)
    expected[2] -= 1.0
    assert np.allclose(grad, expected, atol=1e-15)


def test_cross_entropy_confident_correct():
    logits = np.array([50.0, 0.0, 0.0])
    loss, _ = cross_entropy(logits, 0)
    assert loss < 1e-20


def test_cross_entropy_gradient_sums_to_zero():
    rng = np.random.default_rng(2)
    for _ in range(10):
        z = rng.normal(size=6) * 5.0
        loss, grad = cross_entropy(z, int(rng.integers(6)))
        assert grad.sum() == pytest.approx(0.0, abs=1e-12)
        assert loss >= 0.0


def test_cross_entropy_matches_finite_difference():
    rng = np.random.default_rng(3)
    z = rng.normal(size=4)
    label = 1
    _, grad = cross_entropy(z, label)
    step = 1e-7
    for i in range(4):
        zp, zm = z.copy(), z.copy()
        zp[i] += step
        zm[i] -= step
        fd = (cross_entropy(zp, label)[0] - cross_entropy(zm, label)[0]) / (2 * step)
        assert grad[i] == pytest.approx(fd, abs=1e-6)


def test_cross_entropy_rejects_bad_input():
    with pytest.raises(ValueError):
        cross_entropy(np.array([1.0, np.inf]), 0)
    with pytest.raises(ValueError):
        cross_entropy(np.zeros(3), 3)
    with pytest.raises(ValueError):
        cross_entropy(np.zeros(3), -1)


# ---------------------------------------------------------------------------
# Adam


def test_adam_single_step_hand_value():
    """From zero state with unit gradient the first step is -lr, almost exactly."""
    p = np.zeros(3)
    state = adam_init([p])
    adam_step([p], [np.ones(3)], state)
    assert np.abs(p - (-0.001)).max() < 1e-10
    assert state.t == 1


def test_adam_constant_gradient_walks_linearly():
    # with g = 1 every bias-corrected step has unit moment ratio
    p = np.zeros(1)
    state = adam_init([p])
    for _ in range(5):
        adam_step([p], [np.ones(1)], state)
    assert p[0] == pytest.approx(-0.005, abs=1e-9)


def test_adam_updates_in_place():
    p = np.ones((2, 2))
    params = [p]
    state = adam_init(params)
    adam_step(params, [np.ones((2, 2))], state)
    assert params[0] is p
    assert (p != 1.0).all()


def test_adam_respects_learning_rate():
    p = np.zeros(1)
    state = adam_init([p])
    adam_step([p], [np.ones(1)], state, learning_rate=0.1)
    assert p[0] == pytest.approx(-0.1, abs=1e-8)


# ---------------------------------------------------------------------------
# Evaluation and training


def test_evaluate_confusion_arithmetic():
    ds = make_toy_dataset(train_per_class=0, test_per_class=2, n_points=64, seed=0)
    net = GcaNetwork(tiny_config(), seed=0)
    result = evaluate(net, ds.test, RotationMode.NONE, seed=1)
    assert result.confusion.shape == (5, 5)
    assert result.confusion.sum() == 10
    assert result.accuracy == pytest.approx(np.trace(result.confusion) / 10.0)
    assert result.predictions.shape == (10,)
    assert result.logits.shape == (10, 5)


def test_evaluate_deterministic_per_seed():
    ds = make_toy_dataset(train_per_class=0, test_per_class=2, n_points=64, seed=0)
    net = GcaNetwork(tiny_config(), seed=0)
    a = evaluate(net, ds.test, RotationMode.SO3, seed=9)
    b = evaluate(net, ds.test, RotationMode.SO3, seed=9)
    assert np.array_equal(a.logits, b.logits)


def test_loss_and_gradients_contract():
    net = GcaNetwork(tiny_config(), seed=1)
    cloud = make_toy_dataset(1, 0, n_points=64, seed=2).train[0]
    loss, grads = loss_and_gradients(net, cloud, cloud.label)
    assert loss > 0.0
    assert len(grads.arrays()) == len(net.parameter_arrays())


def test_train_loss_decreases_and_logs(tmp_path):
    """A short run on a small suite reduces the loss and writes the CSV log."""
    ds = make_toy_dataset(train_per_class=2, test_per_class=1, n_points=64, seed=3)
    net = GcaNetwork(tiny_config(), seed=2)
    config = TrainConfig(
        epochs=8,
        batch_size=4,
        seed=5,
        rotation_train=RotationMode.NONE,
        rotation_test=RotationMode.NONE,
    )
    log = tmp_path / "train.csv"
    metrics = train(net, ds, config, log_path=log)
    assert len(metrics.epoch_losses) == 8
    assert metrics.epoch_losses[-1] < metrics.epoch_losses[0]
    assert not metrics.loss_regression
    assert metrics.final_accuracy["none"] == metrics.epoch_test_accuracy[-1]

    lines = log.read_text().strip().splitlines()
    assert lines[0] == "epoch,loss,test_acc"
    assert len(lines) == 9
    first = lines[1].split(",")
    assert int(first[0]) == 0
    assert float(first[1]) == pytest.approx(metrics.epoch_losses[0])


def test_train_deterministic():
    ds = make_toy_dataset(train_per_class=1, test_per_class=1, n_points=64, seed=4)
    config = TrainConfig(epochs=2, batch_size=2, seed=7)
    net_a = GcaNetwork(tiny_config(), seed=3)
    net_b = GcaNetwork(tiny_config(), seed=3)
    metrics_a = train(net_a, ds, config)
    metrics_b = train(net_b, ds, config)
    assert metrics_a.epoch_losses == metrics_b.epoch_losses
    for x, y in zip(net_a.parameter_arrays(), net_b.parameter_arrays()):
        assert np.array_equal(x, y)


def test_train_memorizes_small_suite():
    """Enough epochs on a tiny fixed suite drive train accuracy to one."""
    ds = make_toy_dataset(train_per_class=2, test_per_class=0, n_points=96, seed=6)
    probe = ToyDataset(train=ds.train, test=ds.train)
    net = GcaNetwork(tiny_config(), seed=4)
    config = TrainConfig(
        epochs=60,
        batch_size=5,
        learning_rate=0.003,
        seed=8,
        rotation_train=RotationMode.NONE,
        rotation_test=RotationMode.NONE,
    )
    metrics = train(net, probe, config)
    assert metrics.epoch_test_accuracy[-1] == 1.0
    assert metrics.epoch_losses[-1] < 0.3


# ---------------------------------------------------------------------------
# Internals


def test_derived_seed_spreads():
    seeds = {_derived_seed(0, e) for e in range(100)}
    assert len(seeds) == 100
    assert _derived_seed(3, 5) == _derived_seed(3, 5)
    assert _derived_seed(3, 5) != _derived_seed(4, 5)


def test_smoothed_windows():
    assert _smoothed([4.0, 2.0]) == [4.0, 3.0]
    sm = _smoothed([1.0] * 10)
    assert sm == [1.0] * 10


def test_loss_regression_detector():
    falling = [1.0 / (i + 1) for i in range(20)]
    assert not _has_loss_regression(falling)
    rising = falling[:10] + [0.5, 0.9, 1.5, 2.0, 3.0, 4.0]
    assert _has_loss_regression(rising)
    # noise within the slack band is tolerated
    noisy = [1.0 - 0.01 * i + (0.001 if i % 2 else 0.0) for i in range(20)]
    assert not _has_loss_regression(noisy)
    # too short to judge
    assert not _has_loss_regression([1.0, 5.0])
