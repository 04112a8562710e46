"""Spike-and-slab sparse coding with exact and truncated EM inference."""

from .errors import (
    CapacityError,
    ConfigError,
    MissingInputError,
    NumericalError,
    SpikeSlabError,
)
from .model import (
    H_EXACT_MAX,
    PI_FLOOR,
    BinaryState,
    ConditionalGaussian,
    Dataset,
    ModelParams,
    all_states,
    binary_posterior,
    conditional_gaussian,
    log_joint_ys,
    log_marginal_likelihood,
    state_covariance,
)
from .exact_em import (
    EmTrace,
    SufficientStats,
    combine_stats,
    exact_estep,
    free_energy,
    mstep,
    run_exact_em,
    standard_init,
)
from .truncated_em import (
    ClusterPlan,
    StateSpace,
    TruncationConfig,
    average_q,
    build_state_space,
    cluster_partition,
    run_truncated_em,
    select_indices,
    selection_scores,
    truncated_estep,
)
from .datagen import (
    GeneratorSpec,
    bars_basis,
    bars_dataset,
    mix_sources,
    perturbed_orthogonal_basis,
    sample_sparse_coding,
    sample_spike_slab,
)
from .metrics import (
    MetricReport,
    amari_index,
    kl_from_q,
    psnr,
    report_from_values,
)
from .denoise import (
    GrayImage,
    add_gaussian_noise,
    extract_patches,
    read_pgm,
    reassemble,
    run_denoise,
    write_pgm,
)

__version__ = "0.1.0"
