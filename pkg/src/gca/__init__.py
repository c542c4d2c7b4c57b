"""Rotation-invariant point cloud features from globally weighted local
reference frames and anchor-context convolution."""

from .anchors import AnchorSet, bin_indices, make_anchors, relation_rows, to_local
from .conv import (
    KeypointContext,
    LayerConfig,
    LayerParams,
    conv_backward,
    conv_forward,
    initial_features,
)
from .geometry import (
    SymEig3,
    apply_rotation,
    farthest_point_sampling,
    knn,
    mean_nn_distance,
    sym_eig3,
)
from .lrf import (
    DegenerateFrameError,
    DegenerateInputError,
    Lrf,
    RepeatabilityResult,
    build_lrf,
    distance_weights,
    local_covariance,
    lrf_error,
    main_orientation,
    repeatability_experiment,
    weighted_covariance,
)
from .network import (
    GcaNetwork,
    NetworkConfig,
    network_backward,
    network_forward,
    full_scale_config,
    toy_network_config,
)
from .pcio import (
    CloudParseError,
    PointCloud,
    RotationMode,
    ShapeKind,
    ToyDataset,
    generate_bumpy_cloud,
    generate_shape,
    load_cloud,
    make_toy_dataset,
    sample_rotation,
    save_cloud,
)
from .train import (
    TrainConfig,
    adam_init,
    adam_step,
    cross_entropy,
    evaluate,
    train,
)

__version__ = "0.1.0"
