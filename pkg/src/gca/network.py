"""The full classifier: stacked anchor-context convolutions, a global max
pool, and a small dense head.

Each layer downsamples with farthest point sampling, builds frames at the
surviving keypoints, and convolves neighbor features in those frames. All
parameters are plain float64 arrays; gradients come from network_backward,
no autograd involved.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .conv import (
    LayerConfig,
    glorot_uniform,
    init_layer_params,
    layer_backward,
    layer_forward,
)
from .geometry import as_points

INPUT_FEATURE_DIM = 4  # (x', |x'|) of each neighbor in its keypoint's frame


@dataclass
class NetworkConfig:
    """Architecture and ablation switches.

    conv_channels and keypoints run in parallel, one entry per layer.
    bin_original_cloud bins anchors over the full-resolution input cloud at
    every layer instead of the layer's own point set.
    """

    num_classes: int = 5
    conv_channels: tuple = (128, 256, 512)
    keypoints: tuple = (512, 128, 32)
    k_neighbors: int = 32
    anchor_count: int = 8
    head_hidden: tuple = (256, 128)
    weighted_lrf: bool = True
    use_o_vector: bool = True
    use_anchors: bool = True
    bin_original_cloud: bool = False

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.keypoints = tuple(int(k) for k in self.keypoints)
        self.head_hidden = tuple(int(h) for h in self.head_hidden)
        if len(self.conv_channels) != len(self.keypoints):
            raise ValueError("conv_channels and keypoints must have equal length")
        if not self.conv_channels:
            raise ValueError("need at least one convolution layer")
        if any(k2 > k1 for k1, k2 in zip(self.keypoints, self.keypoints[1:])):
            raise ValueError("keypoint counts must be non-increasing")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")

    def layer_configs(self) -> list:
        configs = []
        c_prev = INPUT_FEATURE_DIM
        for c_out, kp in zip(self.conv_channels, self.keypoints):
            configs.append(
                LayerConfig(
                    c_in=c_prev,
                    c_out=c_out,
                    keypoints_out=kp,
                    k_neighbors=self.k_neighbors,
                    anchor_count=self.anchor_count,
                    weighted_lrf=self.weighted_lrf,
                    use_o_vector=self.use_o_vector,
                    use_anchors=self.use_anchors,
                )
            )
            c_prev = c_out
        return configs

    def head_dims(self) -> list:
        return [self.conv_channels[-1], *self.head_hidden, self.num_classes]


def toy_network_config(num_classes: int = 5, **overrides) -> NetworkConfig:
    """Small architecture used by the fast experiments and checks."""
    base = dict(
        num_classes=num_classes,
        conv_channels=(16, 32, 64),
        keypoints=(64, 32, 16),
        head_hidden=(32,),
    )
    base.update(overrides)
    return NetworkConfig(**base)


def full_scale_config(num_classes: int = 5, **overrides) -> NetworkConfig:
    """Full-size architecture (the NetworkConfig defaults, spelled out for the CLI)."""
    base = dict(num_classes=num_classes)
    base.update(overrides)
    return NetworkConfig(**base)


@dataclass
class HeadLayer:
    weights: np.ndarray  # (d_in, d_out)
    bias: np.ndarray  # (d_out,)


@dataclass
class HeadGrads:
    weights: np.ndarray
    bias: np.ndarray


class GcaNetwork:
    """Parameters plus config; construction from a seed is deterministic."""

    def __init__(self, config: NetworkConfig, seed: int = 0):
        self.config = config
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        self.layers = [init_layer_params(lc, rng) for lc in config.layer_configs()]
        dims = config.head_dims()
        self.head = [
            HeadLayer(
                weights=glorot_uniform(rng, (d_in, d_out), d_in, d_out),
                bias=np.zeros(d_out),
            )
            for d_in, d_out in zip(dims, dims[1:])
        ]

    def parameter_arrays(self) -> list:
        """All parameter tensors in a fixed order (shared with gradients)."""
        arrays = []
        for lp in self.layers:
            arrays.extend([lp.kernel, lp.kernel_bias, lp.lift, lp.lift_bias])
        for hl in self.head:
            arrays.extend([hl.weights, hl.bias])
        return arrays

    def parameter_count(self) -> int:
        return sum(a.size for a in self.parameter_arrays())

    def to_dict(self) -> dict:
        cfg = {
            "num_classes": self.config.num_classes,
            "conv_channels": list(self.config.conv_channels),
            "keypoints": list(self.config.keypoints),
            "k_neighbors": self.config.k_neighbors,
            "anchor_count": self.config.anchor_count,
            "head_hidden": list(self.config.head_hidden),
            "weighted_lrf": self.config.weighted_lrf,
            "use_o_vector": self.config.use_o_vector,
            "use_anchors": self.config.use_anchors,
            "bin_original_cloud": self.config.bin_original_cloud,
        }
        return {
            "config": cfg,
            "layers": [
                {
                    "kernel": lp.kernel.tolist(),
                    "kernel_bias": lp.kernel_bias.tolist(),
                    "lift": lp.lift.tolist(),
                    "lift_bias": lp.lift_bias.tolist(),
                }
                for lp in self.layers
            ],
            "head": {
                "layers": [
                    {"weights": hl.weights.tolist(), "bias": hl.bias.tolist()}
                    for hl in self.head
                ]
            },
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "GcaNetwork":
        config = NetworkConfig(**payload["config"])
        net = cls(config, seed=int(payload["seed"]))
        if len(payload["layers"]) != len(net.layers):
            raise ValueError("layer count does not match config")
        for lp, saved in zip(net.layers, payload["layers"]):
            for name in ("kernel", "kernel_bias", "lift", "lift_bias"):
                arr = np.asarray(saved[name], dtype=np.float64)
                if arr.shape != getattr(lp, name).shape:
                    raise ValueError(f"{name} shape mismatch in saved weights")
                setattr(lp, name, arr)
        saved_head = payload["head"]["layers"]
        if len(saved_head) != len(net.head):
            raise ValueError("head layer count does not match config")
        for hl, saved in zip(net.head, saved_head):
            for name in ("weights", "bias"):
                arr = np.asarray(saved[name], dtype=np.float64)
                if arr.shape != getattr(hl, name).shape:
                    raise ValueError(f"head {name} shape mismatch in saved weights")
                setattr(hl, name, arr)
        return net

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "GcaNetwork":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class NetworkActivation:
    """Everything network_backward needs, plus per-layer diagnostics."""

    layer_states: list
    pool_argmax: np.ndarray  # (c_last,) keypoint index per channel
    pooled: np.ndarray  # (c_last,)
    head_inputs: list  # input vector of each head layer
    head_pres: list  # pre-activation of each head layer
    degenerate_count: int = 0
    o_fallback_count: int = 0

    @property
    def layer_points(self) -> list:
        return [st.points for st in self.layer_states]


def network_forward(network: GcaNetwork, cloud):
    """Logits for one cloud.

    Args:
        network: the model.
        cloud: PointCloud or (n, 3) array; n must be at least the first
            layer's keypoint count and neighbor count.

    Returns:
        (logits (num_classes,), NetworkActivation)
    """
    pts = as_points(cloud)
    cfg = network.config
    bin_pts = pts if cfg.bin_original_cloud else None
    feats = None
    states = []
    for params, lc in zip(network.layers, cfg.layer_configs()):
        pts, feats, st = layer_forward(params, lc, pts, feats, bin_points=bin_pts)
        states.append(st)
    pool_argmax = feats.argmax(axis=0)
    pooled = np.take_along_axis(feats, pool_argmax[None, :], axis=0)[0]
    x = pooled
    head_inputs, head_pres = [], []
    last = len(network.head) - 1
    for i, hl in enumerate(network.head):
        head_inputs.append(x)
        pre = x @ hl.weights + hl.bias
        head_pres.append(pre)
        x = pre if i == last else np.maximum(pre, 0.0)
    activation = NetworkActivation(
        layer_states=states,
        pool_argmax=pool_argmax,
        pooled=pooled,
        head_inputs=head_inputs,
        head_pres=head_pres,
        degenerate_count=int(sum(st.degenerate.sum() for st in states)),
        o_fallback_count=int(sum(st.o_fallback.sum() for st in states)),
    )
    return x, activation


@dataclass
class NetworkGrads:
    layers: list  # [LayerGrads]
    head: list  # [HeadGrads]

    def arrays(self) -> list:
        """Flat view aligned with GcaNetwork.parameter_arrays()."""
        arrays = []
        for lg in self.layers:
            arrays.extend([lg.kernel, lg.kernel_bias, lg.lift, lg.lift_bias])
        for hg in self.head:
            arrays.extend([hg.weights, hg.bias])
        return arrays


def network_backward(network: GcaNetwork, activation: NetworkActivation, grad_logits):
    """Gradient of a scalar loss w.r.t. every parameter tensor.

    Args:
        activation: cache from network_forward on the same cloud.
        grad_logits: (num_classes,) upstream gradient on the logits.

    Returns:
        NetworkGrads mirroring the network structure.
    """
    g = np.asarray(grad_logits, dtype=np.float64)
    head_grads = []
    last = len(network.head) - 1
    for i in range(last, -1, -1):
        g_pre = g if i == last else g * (activation.head_pres[i] > 0.0)
        head_grads.append(
            HeadGrads(
                weights=np.outer(activation.head_inputs[i], g_pre),
                bias=g_pre.copy(),
            )
        )
        g = network.head[i].weights @ g_pre
    head_grads.reverse()

    # Global max pool: each channel's gradient lands on its argmax keypoint.
    last_state = activation.layer_states[-1]
    m_last, c_last = last_state.pre_activation.shape
    dfeat = np.zeros((m_last, c_last))
    dfeat[activation.pool_argmax, np.arange(c_last)] = g

    layer_grads = [None] * len(network.layers)
    for i in range(len(network.layers) - 1, -1, -1):
        lg, dfeat = layer_backward(network.layers[i], activation.layer_states[i], dfeat)
        layer_grads[i] = lg
    return NetworkGrads(layers=layer_grads, head=head_grads)


def zero_grads_like(network: GcaNetwork) -> list:
    """Zero-filled accumulator aligned with parameter_arrays()."""
    return [np.zeros_like(a) for a in network.parameter_arrays()]
