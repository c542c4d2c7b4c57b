"""Training and evaluation for the classifier.

Plain softmax cross-entropy, hand-rolled Adam with bias correction, and a
deterministic epoch loop: the sample order, the per-sample augmentation
rotations, and the evaluation rotations all come from seeded generators, so
two runs with the same config produce bit-identical parameters.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .geometry import apply_rotation
from .network import GcaNetwork, network_backward, network_forward, zero_grads_like
from .pcio import RotationMode, sample_rotation

_SMOOTH_WINDOW = 5
_SMOOTH_SLACK = 0.02  # relative uptick tolerated before flagging a regression


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def cross_entropy(logits, label: int):
    """Softmax cross-entropy loss and its gradient w.r.t. the logits.

    Uses the max-subtraction form; the gradient is softmax(logits) - onehot.

    Returns:
        (loss (float), grad (num_classes,))
    """
    z = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(z).all():
        raise ValueError("logits must be finite")
    if not 0 <= label < len(z):
        raise ValueError(f"label {label} outside [0, {len(z)})")
    shifted = z - z.max()
    log_norm = np.log(np.exp(shifted).sum())
    loss = float(log_norm - shifted[label])
    grad = np.exp(shifted - log_norm)
    grad[label] -= 1.0
    return loss, grad


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0


def adam_init(params: list) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
    )


def adam_step(
    params: list,
    grads: list,
    state: AdamState,
    learning_rate: float = 0.001,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, in place on the parameter arrays."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= learning_rate * (m / bc1) / (np.sqrt(v / bc2) + epsilon)
    return state


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    rotation_train: RotationMode = RotationMode.AROUND_Z
    rotation_test: RotationMode = RotationMode.SO3


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # (classes, classes), rows true, cols predicted
    predictions: np.ndarray  # (n,)
    logits: np.ndarray  # (n, classes)


@dataclass
class Metrics:
    epoch_losses: list = field(default_factory=list)
    epoch_test_accuracy: list = field(default_factory=list)
    final_accuracy: dict = field(default_factory=dict)
    confusion: np.ndarray | None = None
    loss_regression: bool = False


def loss_and_gradients(network: GcaNetwork, cloud, label: int):
    """Cross-entropy loss of one cloud and its full parameter gradient."""
    logits, activation = network_forward(network, cloud)
    loss, dlogits = cross_entropy(logits, label)
    grads = network_backward(network, activation, dlogits)
    return loss, grads


def evaluate(network: GcaNetwork, clouds, rotation_mode: RotationMode, seed: int = 0):
    """Accuracy over labeled clouds, each rotated per the protocol.

    Ties in the predicted class resolve to the lowest class index.
    """
    rng = np.random.default_rng(seed)
    c = network.config.num_classes
    confusion = np.zeros((c, c), dtype=np.intp)
    preds = np.empty(len(clouds), dtype=np.intp)
    all_logits = np.empty((len(clouds), c))
    for i, cloud in enumerate(clouds):
        rot = sample_rotation(rotation_mode, rng)
        logits, _ = network_forward(network, apply_rotation(cloud, rot))
        pred = int(np.argmax(logits))
        preds[i] = pred
        all_logits[i] = logits
        confusion[cloud.label, pred] += 1
    accuracy = float(np.trace(confusion)) / max(len(clouds), 1)
    return EvalResult(accuracy, confusion, preds, all_logits)


def train(network: GcaNetwork, dataset, config: TrainConfig, log_path=None) -> Metrics:
    """Train in place and return per-epoch metrics.

    Per epoch: shuffle, draw one augmentation rotation per sample, average
    gradients over each batch, and take one Adam step per batch. Test
    accuracy under config.rotation_test is recorded every epoch (and
    appended to log_path as CSV when given).

    Args:
        network: model to update in place.
        dataset: ToyDataset (train list consumed; test list for the log).
        config: optimizer and protocol settings.
        log_path: optional CSV path, rows "epoch,loss,test_acc".
    """
    rng = np.random.default_rng(config.seed)
    params = network.parameter_arrays()
    state = adam_init(params)
    metrics = Metrics()
    train_clouds = dataset.train
    n = len(train_clouds)
    log_rows = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total_loss = 0.0
        for lo in range(0, n, config.batch_size):
            batch = order[lo : lo + config.batch_size]
            acc = zero_grads_like(network)
            for idx in batch:
                cloud = train_clouds[int(idx)]
                rot = sample_rotation(config.rotation_train, rng)
                loss, grads = loss_and_gradients(
                    network, apply_rotation(cloud, rot), cloud.label
                )
                total_loss += loss
                for a, g in zip(acc, grads.arrays()):
                    a += g
            for a in acc:
                a /= len(batch)
            adam_step(
                params,
                acc,
                state,
                learning_rate=config.learning_rate,
                beta1=config.beta1,
                beta2=config.beta2,
                epsilon=config.epsilon,
            )
        epoch_loss = total_loss / n
        metrics.epoch_losses.append(epoch_loss)
        test_acc = float("nan")
        if dataset.test:
            result = evaluate(
                network,
                dataset.test,
                config.rotation_test,
                seed=_derived_seed(config.seed, epoch),
            )
            test_acc = result.accuracy
            metrics.epoch_test_accuracy.append(test_acc)
            metrics.confusion = result.confusion
        log_rows.append((epoch, epoch_loss, test_acc))
    metrics.loss_regression = _has_loss_regression(metrics.epoch_losses)
    if dataset.test:
        metrics.final_accuracy[config.rotation_test.value] = (
            metrics.epoch_test_accuracy[-1] if metrics.epoch_test_accuracy else None
        )
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "test_acc"])
            writer.writerows(log_rows)
    return metrics


def _derived_seed(seed: int, epoch: int) -> int:
    return (seed * 1_000_003 + 7919 * (epoch + 1)) % (2**62)


def _smoothed(losses, window: int = _SMOOTH_WINDOW):
    out = []
    for i in range(len(losses)):
        lo = max(0, i - window + 1)
        out.append(sum(losses[lo : i + 1]) / (i + 1 - lo))
    return out


def _has_loss_regression(losses) -> bool:
    """True when the smoothed loss rises after the warmup epochs."""
    if len(losses) <= _SMOOTH_WINDOW:
        return False
    sm = _smoothed(losses)
    for i in range(_SMOOTH_WINDOW, len(sm)):
        if sm[i] > sm[i - 1] * (1.0 + _SMOOTH_SLACK) + 1e-12:
            return True
    return False


# ---------------------------------------------------------------------------
# Numerical gradient verification


def finite_difference_gradients(network: GcaNetwork, cloud, label: int, step: float = 1e-6):
    """Central finite differences of the loss w.r.t. every parameter tensor.

    Slow; intended for small architectures. Returns a list aligned with
    network.parameter_arrays().
    """

    def loss_only():
        logits, _ = network_forward(network, cloud)
        return cross_entropy(logits, label)[0]

    fd = []
    for arr in network.parameter_arrays():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_only()
            flat[i] = orig - step
            lo = loss_only()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        fd.append(g)
    return fd


def gradient_relative_errors(network: GcaNetwork, cloud, label: int, step: float = 1e-6):
    """Per-tensor relative error between analytic and finite-difference grads."""
    _, grads = loss_and_gradients(network, cloud, label)
    analytic = grads.arrays()
    numeric = finite_difference_gradients(network, cloud, label, step=step)
    errors = []
    for a, n in zip(analytic, numeric):
        denom = max(float(np.linalg.norm(n)), 1e-12)
        errors.append(float(np.linalg.norm(a - n)) / denom)
    return errors
