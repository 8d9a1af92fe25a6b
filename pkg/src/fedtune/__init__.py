"""Deterministic desk-scale simulator for federated low-rank fine-tuning
with differential privacy.

The package trains matrix-parameterized softmax models under four adapter
schemes (full, two-factor low-rank, frozen-A low-rank, and a frozen-projector
core), federates them with FedAvg over heterogeneous client splits, privatizes
client updates with DP-SGD, and ships the experiment procedures that verify
the schemes' analytic properties (aggregation exactness, noise amplification,
scaling limits, smoothness bounds) at desk scale.
"""

from .adapters import (
    AdapterConfig,
    AdapterGrads,
    AdapterKind,
    AdapterState,
    InitScheme,
    apply_update,
    backprop_to_adapter,
    effective_weight,
    flatten_trainable,
    init_adapter,
    trainable_param_count,
    unflatten_trainable,
)
from .analysis import (
    alpha_limit_trajectory,
    heterogeneity_sweep,
    init_scheme_comparison,
    noise_norm_scan,
    smoothness_bound_check_ffa,
    smoothness_probe_counterexample,
)
from .federation import (
    ClientState,
    FedConfig,
    TrainTrace,
    aggregation_gap,
    fedavg,
    local_update,
    run_federation,
)
from .linalg import (
    DimensionError,
    RngStream,
    frobenius_norm,
    gaussian_matrix,
    orthonormal_rows,
    top_r_right_singular_vectors,
)
from .privacy import (
    CalibrationError,
    DpConfig,
    RdpCurve,
    clip_grad,
    epsilon_from_sigma,
    privatize_batch,
    rdp_sampled_gaussian,
    sigma_for_budget,
)
from .tasks import (
    Dataset,
    PartitionSpec,
    SoftmaxModel,
    SyntheticTaskSpec,
    accuracy,
    gen_synthetic,
    loss_and_grad,
    partition,
)

__version__ = "0.1.0"
