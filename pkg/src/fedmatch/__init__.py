"""Federated semi-supervised learning simulator.

Implements the FedMatch protocol at desk scale: additive sigma/psi
parameter decomposition with disjoint supervised/unsupervised training,
agreement-based pseudo-labels with inter-client consistency against
KD-tree-selected helper models, thresholded sparse-delta synchronization
with cost accounting, and both labels-at-client and labels-at-server
scenarios, alongside FedAvg/FedProx supervised and FixMatch-style
baselines.
"""

from .comm import CostLedger, SparseDelta, apply, delta_from_bytes, diff
from .consistency import (
    AugmentConfig,
    HelperSet,
    PseudoBatch,
    agreement_pseudo_label,
    augment,
    inter_client_consistency,
    phi_loss,
)
from .data import (
    ClientDataHandle,
    Dataset,
    PartitionPlan,
    make_blobs,
    split_iid,
    split_noniid,
    split_streaming,
)
from .decomposition import (
    DecomposedModel,
    LossConfig,
    compose,
    supervised_step,
    unsupervised_step,
)
from .errors import (
    ConfigError,
    CorruptDeltaError,
    LabelAccessError,
    NoHelpersError,
    NotEmbeddedError,
)
from .federation import (
    METHODS,
    ExperimentResult,
    RoundConfig,
    aggregate_mean,
    aggregate_weighted,
    fedprox_gradient_term,
    run_experiment,
    select_clients,
)
from .helpers import (
    EmbeddingIndex,
    ModelEmbedding,
    ProbeInput,
    build_index,
    embed_model,
    helper_due,
    query_helpers,
)
from .nn import (
    ModelArch,
    OptimState,
    ParamVector,
    ProbDist,
    cross_entropy,
    forward,
    gradient,
    init_params,
    kl_divergence,
    lr_step,
    one_hot,
)

__version__ = "0.1.0"
