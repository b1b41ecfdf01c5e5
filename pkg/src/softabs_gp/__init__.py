"""Riemannian-manifold HMC with a softabs Hessian metric for hierarchical
reduced-rank Gaussian-process models, plus thermodynamic-integration model
evidence."""

from .evidence import (
    EvidenceEstimate,
    GridSpec,
    TemperLadder,
    default_ladder,
    laplace_full,
    laplace_grid_oracle,
    thermo_integrate,
    ti_variance,
)
from .metric import (
    BetancourtCache,
    JacobiError,
    MetricState,
    build_cache,
    dynamic_eigendecompose,
    metric_apply,
    metric_apply_inverse,
    metric_from_hessian,
    sample_momentum,
    softabs,
    softabs_deriv,
    static_eigendecompose,
    t_matrix,
)
from .posterior import (
    DivergenceError,
    DomainError,
    ParamVector,
    PosteriorTarget,
    dense_oracle,
    gradient,
    hessian,
    neg_log_posterior,
    trace_contractions,
)
from .rrgp import (
    Dataset,
    KernelSpec,
    ModelSpec,
    SchemaError,
    TruthRecord,
    build_model,
    feature_value,
    potential_derivatives,
    read_csv,
    simulate_logistic,
    simulate_meanvar,
    spectral_variance,
    write_csv,
)
from .sampler import (
    ChainConfig,
    ChainError,
    ChainRecord,
    ChainResult,
    euclidean_hmc_run,
    grad_q_hamiltonian,
    hamiltonian,
    leapfrog_step,
    rank_sum_test,
    read_jsonl,
    rmhmc_run,
    run_chain,
    wilcoxon_split_half,
    write_jsonl,
)

__version__ = "0.1.0"

__all__ = [
    "BetancourtCache",
    "ChainConfig",
    "ChainError",
    "ChainRecord",
    "ChainResult",
    "Dataset",
    "DivergenceError",
    "DomainError",
    "EvidenceEstimate",
    "GridSpec",
    "JacobiError",
    "KernelSpec",
    "MetricState",
    "ModelSpec",
    "ParamVector",
    "PosteriorTarget",
    "SchemaError",
    "TemperLadder",
    "TruthRecord",
    "build_cache",
    "build_model",
    "default_ladder",
    "dense_oracle",
    "dynamic_eigendecompose",
    "euclidean_hmc_run",
    "feature_value",
    "grad_q_hamiltonian",
    "gradient",
    "hamiltonian",
    "hessian",
    "laplace_full",
    "laplace_grid_oracle",
    "leapfrog_step",
    "metric_apply",
    "metric_apply_inverse",
    "metric_from_hessian",
    "neg_log_posterior",
    "potential_derivatives",
    "rank_sum_test",
    "read_csv",
    "read_jsonl",
    "rmhmc_run",
    "run_chain",
    "sample_momentum",
    "simulate_logistic",
    "simulate_meanvar",
    "softabs",
    "softabs_deriv",
    "spectral_variance",
    "static_eigendecompose",
    "t_matrix",
    "thermo_integrate",
    "ti_variance",
    "trace_contractions",
    "write_csv",
    "write_jsonl",
]
