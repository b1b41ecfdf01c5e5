"""Hierarchical reduced-rank GP model definitions.

A model couples J latent functions f_j to a likelihood.  Each function is a
sum of reduced-rank GP expansions, one per covariate it uses, plus an
intercept:

    f_j(x) = sum_k sum_m a_{jkm} phi_{jkm}(x_k) + b_j

Gaussian (squared-exponential) kernels use the sinusoidal basis of the
Laplacian eigenproblem on [-L, L],

    phi_m(x) = sin(pi m (x + L) / (2 L)),

with prior coefficient variances c_g * V_m(sigma_g) where V_m is the kernel
spectral density evaluated at the square root of the m-th eigenvalue,

    V_m(sigma) = sqrt(pi sigma) * exp(-sigma pi^2 m^2 / (16 L^2)).

Linear kernels contribute the single feature phi(x) = x with unit spectral
variance and shared prior scale c_l.  Intercepts are N(0, Sigma).  The
hyperparameters theta = (c_g, sigma_g, c_l) carry inverse-gamma priors and
are shared across all expansions of the matching kernel kind.

This module owns the static structure: kernel/model specs, the coordinate
layout, datasets, design-matrix caches, likelihood potentials with
derivatives up to third order, and the synthetic-data generators used by the
experiments.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

GAUSSIAN = "gaussian_1d"
LINEAR = "linear"

LOGISTIC = "logistic"
GAUSSIAN_MEANVAR = "gaussian_meanvar"

# Fixed ordering of the shared hyperparameters in the coordinate vector.
HYPER_ORDER = ("c_g", "sigma_g", "c_l")

# Default inverse-gamma shapes/scales for the sampling experiments.
DEFAULT_PRIORS = {"c_g": (2.0, 2.0), "sigma_g": (2.0, 2.0), "c_l": (2.0, 2.0)}

MODEL_NAMES = ("logistic", "l-mean", "nl-mean", "l-meanvar", "nl-meanvar")


class SchemaError(ValueError):
    """Malformed external input (CSV, config, JSON lines)."""


def feature_value(m: int, x, half_width: float):
    """m-th sinusoidal basis function on [-half_width, half_width].

    The 1/sqrt(L) normalisation of the eigenfunctions is dropped; the prior
    variance absorbs any constant scale.
    """
    if m < 1:
        raise ValueError(f"feature index must be >= 1, got {m}")
    if half_width <= 0:
        raise ValueError(f"half_width must be positive, got {half_width}")
    x = np.asarray(x, dtype=float)
    return np.sin(np.pi * m * (x + half_width) / (2.0 * half_width))


def spectral_variance(m, sigma: float, half_width: float):
    """Prior variance profile V_m(sigma) of the Gaussian kernel.

    Composition of the spectral density S(w) = sqrt(pi sigma) exp(-sigma w^2/4)
    with the Laplacian eigenvalues lambda_m = (pi m / (2 L))^2.  Decreasing in
    m for every sigma > 0.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    m = np.asarray(m, dtype=float)
    w = (np.pi * m / (2.0 * half_width)) ** 2 / 4.0
    return math.sqrt(math.pi * sigma) * np.exp(-sigma * w)


@dataclass(frozen=True)
class KernelSpec:
    """One reduced-rank expansion: kernel kind, covariate, and basis size."""

    kind: str
    covariate: int
    features: int = 30
    half_width: float = 8.0

    def __post_init__(self):
        if self.kind not in (GAUSSIAN, LINEAR):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.covariate < 0:
            raise ValueError("covariate index must be >= 0")
        if self.kind == LINEAR:
            # linear kernels always have exactly one feature
            object.__setattr__(self, "features", 1)
        if self.kind == GAUSSIAN:
            if self.features < 1:
                raise ValueError("gaussian kernels need features >= 1")
            if self.half_width <= 0:
                raise ValueError("half_width must be positive")

    @property
    def hyper_names(self) -> tuple[str, ...]:
        return ("c_g", "sigma_g") if self.kind == GAUSSIAN else ("c_l",)


@dataclass(frozen=True)
class ModelSpec:
    """Full model: per-function kernel sets, likelihood, priors, transform.

    ``functions[j]`` may be empty, in which case f_j is its intercept alone
    (the mean-only heteroscedastic models use this for the variance
    function).  ``hyperparameters`` lists the sampled shared hyperparameters;
    by default all three are carried, matching the reported dimensions of the
    reference runs, and an unused one simply follows its prior.
    """

    functions: tuple[tuple[KernelSpec, ...], ...]
    likelihood: str
    priors: Mapping[str, tuple[float, float]] = field(
        default_factory=lambda: dict(DEFAULT_PRIORS)
    )
    intercept_variance: float = 1.0
    variance_floor: float = 1e-3
    hyper_transform: str = "log"
    hyperparameters: tuple[str, ...] = HYPER_ORDER
    fixed_hypers: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.likelihood not in (LOGISTIC, GAUSSIAN_MEANVAR):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")
        expected_j = 1 if self.likelihood == LOGISTIC else 2
        if len(self.functions) != expected_j:
            raise ValueError(
                f"{self.likelihood} needs {expected_j} function(s), "
                f"got {len(self.functions)}"
            )
        if self.hyper_transform not in ("log", "identity"):
            raise ValueError(f"unknown hyper_transform {self.hyper_transform!r}")
        if self.intercept_variance <= 0:
            raise ValueError("intercept_variance must be positive")
        if self.variance_floor <= 0:
            raise ValueError("variance_floor must be positive")
        bad = [h for h in self.hyperparameters if h not in HYPER_ORDER]
        if bad:
            raise ValueError(f"unknown hyperparameters {bad}")
        bad = [h for h in self.fixed_hypers if h not in HYPER_ORDER]
        if bad:
            raise ValueError(f"unknown fixed hyperparameters {bad}")
        overlap = set(self.hyperparameters).intersection(self.fixed_hypers)
        if overlap:
            raise ValueError(f"hyperparameters {sorted(overlap)} both sampled and fixed")
        for h, v in self.fixed_hypers.items():
            if v <= 0:
                raise ValueError(f"fixed hyperparameter {h!r} must be positive")
        needed = set()
        for kernels in self.functions:
            for k in kernels:
                needed.update(k.hyper_names)
        missing = needed.difference(self.hyperparameters).difference(self.fixed_hypers)
        if missing:
            raise ValueError(f"kernels require hyperparameters {sorted(missing)}")
        # a kernel kind's hyperparameters are fixed all-or-nothing, so each
        # coefficient group is either fully coupled or a pure constant
        if any(k.kind == GAUSSIAN for ks in self.functions for k in ks):
            if ("c_g" in self.fixed_hypers) != ("sigma_g" in self.fixed_hypers):
                raise ValueError("c_g and sigma_g must be fixed together")
        for h in self.hyperparameters:
            if h not in self.priors:
                raise ValueError(f"no prior for hyperparameter {h!r}")
            a, b = self.priors[h]
            if a <= 0 or b <= 0:
                raise ValueError(f"inverse-gamma prior for {h!r} needs a,b > 0")

    @property
    def n_functions(self) -> int:
        return len(self.functions)


@dataclass(frozen=True)
class BlockLayout:
    """Coordinate layout of the sampled vector q.

    Order: for each function j, its coefficient blocks in kernel order
    followed by the intercept b_j; then the hyperparameters in the fixed
    HYPER_ORDER.  Function blocks are contiguous so the likelihood acts on
    slices.
    """

    coef_slices: dict
    intercept_index: dict
    hyper_index: dict
    function_slices: dict
    dim: int

    @classmethod
    def from_model(cls, model: ModelSpec) -> "BlockLayout":
        coef = {}
        inter = {}
        fun = {}
        pos = 0
        for j, kernels in enumerate(model.functions):
            start = pos
            for k, kern in enumerate(kernels):
                coef[(j, k)] = slice(pos, pos + kern.features)
                pos += kern.features
            inter[j] = pos
            pos += 1
            fun[j] = slice(start, pos)
        hyper = {}
        for name in HYPER_ORDER:
            if name in model.hyperparameters:
                hyper[name] = pos
                pos += 1
        return cls(coef, inter, hyper, fun, pos)

    @property
    def n_hyper(self) -> int:
        return len(self.hyper_index)


@dataclass(frozen=True)
class Dataset:
    """Covariate matrix and target vector.

    Logistic targets must be exactly -1 or +1; heteroscedastic targets are
    unrestricted reals.
    """

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.ndim != 2:
            raise ValueError("x must be 2-d (n, dims)")
        if y.shape != (x.shape[0],):
            raise ValueError("y must be 1-d with one entry per row of x")
        if x.shape[0] < 1:
            raise ValueError("dataset must contain at least one row")
        if not (np.isfinite(x).all() and np.isfinite(y).all()):
            raise ValueError("dataset contains non-finite values")
        object.__setattr__(self, "x", np.ascontiguousarray(x))
        object.__setattr__(self, "y", np.ascontiguousarray(y))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dims(self) -> int:
        return self.x.shape[1]

    def require_binary_targets(self):
        if not np.all(np.isin(self.y, (-1.0, 1.0))):
            raise ValueError("logistic targets must be -1 or +1")


def write_csv(path, dataset: Dataset) -> None:
    """Write the canonical CSV form: header x1..xD,y then one row per sample."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i + 1}" for i in range(dataset.dims)] + ["y"])
        for row, target in zip(dataset.x, dataset.y):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(target))])


def read_csv(path) -> Dataset:
    """Read a dataset CSV, validating the x1..xD,y header exactly."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty CSV") from None
        header = [h.strip() for h in header]
        if len(header) < 2 or header[-1] != "y":
            raise SchemaError(f"{path}: header must be x1..xD,y, got {header}")
        dims = len(header) - 1
        expected = [f"x{i + 1}" for i in range(dims)]
        if header[:-1] != expected:
            raise SchemaError(f"{path}: header must be x1..xD,y, got {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dims + 1:
                raise SchemaError(
                    f"{path}:{lineno}: expected {dims + 1} fields, got {len(row)}"
                )
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=float)
    return Dataset(arr[:, :dims], arr[:, dims])


class FeatureCache:
    """Per-function design matrices, fixed for a (model, dataset) pair.

    ``phi[j]`` has one column per coefficient of f_j plus a trailing ones
    column for the intercept, so f_j = phi[j] @ q[function_slice(j)].  The
    cache depends only on covariates and kernel specs, never on
    hyperparameters.
    """

    def __init__(self, model: ModelSpec, dataset: Dataset, layout: BlockLayout):
        self.layout = layout
        self.phi = []
        n = dataset.n
        for j, kernels in enumerate(model.functions):
            cols = [np.empty((n, 0))]
            for kern in kernels:
                if kern.covariate >= dataset.dims:
                    raise ValueError(
                        f"kernel covariate {kern.covariate} out of range for "
                        f"{dataset.dims}-column data"
                    )
                xk = dataset.x[:, kern.covariate]
                if kern.kind == GAUSSIAN:
                    m = np.arange(1, kern.features + 1)
                    block = np.sin(
                        np.pi
                        * m[None, :]
                        * (xk[:, None] + kern.half_width)
                        / (2.0 * kern.half_width)
                    )
                else:
                    block = xk[:, None]
                cols.append(block)
            cols.append(np.ones((n, 1)))
            self.phi.append(np.ascontiguousarray(np.hstack(cols)))

    @classmethod
    def build(cls, model: ModelSpec, dataset: Dataset) -> "FeatureCache":
        return cls(model, dataset, BlockLayout.from_model(model))


def potential_derivatives(likelihood: str, f, y, *, variance_floor: float = 1e-3):
    """Per-sample negative log-likelihood U_i and derivatives in f.

    Parameters
    ----------
    f : array (n, J) or (J,)
        Latent function values per sample.
    y : array (n,) or scalar
        Targets.

    Returns
    -------
    (u, d1, d2, d3) with shapes (n,), (n, J), (n, J, J), (n, J, J, J); the
    leading axis is dropped when f is a single sample.
    """
    f = np.asarray(f, dtype=float)
    single = f.ndim == 1
    if single:
        f = f[None, :]
    y = np.atleast_1d(np.asarray(y, dtype=float))
    n = f.shape[0]
    if likelihood == LOGISTIC:
        if f.shape[1] != 1:
            raise ValueError("logistic likelihood has one latent function")
        z = y * f[:, 0]
        u = np.logaddexp(0.0, -z)
        # q = P(opposite label), p = P(observed label); exp kept in (0, 1]
        ez = np.exp(-np.abs(z))
        q = np.where(z >= 0.0, ez, 1.0) / (1.0 + ez)
        p = 1.0 - q
        d1 = (-y * q)[:, None]
        d2 = (p * q)[:, None, None]
        d3 = (y * p * q * (q - p))[:, None, None, None]
    elif likelihood == GAUSSIAN_MEANVAR:
        if f.shape[1] != 2:
            raise ValueError("gaussian_meanvar likelihood has two latent functions")
        with np.errstate(over="ignore"):
            w = np.exp(f[:, 1])
        v = variance_floor + w
        e = y - f[:, 0]
        u = 0.5 * e * e / v + 0.5 * np.log(2.0 * np.pi * v)
        wv = w / v
        d1 = np.empty((n, 2))
        d1[:, 0] = -e / v
        d1[:, 1] = 0.5 * wv * (1.0 - e * e / v)
        d2 = np.empty((n, 2, 2))
        d2[:, 0, 0] = 1.0 / v
        d2[:, 0, 1] = d2[:, 1, 0] = e * wv / v
        d2[:, 1, 1] = (
            -0.5 * e * e * wv / v
            + e * e * wv * wv / v
            + 0.5 * wv
            - 0.5 * wv * wv
        )
        d3 = np.zeros((n, 2, 2, 2))
        d112 = -wv / v
        d122 = e * (wv / v) * (1.0 - 2.0 * wv)
        d222 = (
            -0.5 * e * e * wv / v
            + 3.0 * e * e * wv * wv / v
            - 3.0 * e * e * wv * wv * wv / v
            + 0.5 * wv
            - 1.5 * wv * wv
            + wv * wv * wv
        )
        d3[:, 0, 0, 1] = d3[:, 0, 1, 0] = d3[:, 1, 0, 0] = d112
        d3[:, 0, 1, 1] = d3[:, 1, 0, 1] = d3[:, 1, 1, 0] = d122
        d3[:, 1, 1, 1] = d222
    else:
        raise ValueError(f"unknown likelihood {likelihood!r}")
    if single:
        return u[0], d1[0], d2[0], d3[0]
    return u, d1, d2, d3


@dataclass(frozen=True)
class TruthRecord:
    """Ground truth of a simulated logistic dataset."""

    c_star: float
    b_star: float
    a_star: np.ndarray
    seed: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "c_star": self.c_star,
                "b_star": self.b_star,
                "a_star": np.asarray(self.a_star).tolist(),
                "seed": self.seed,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "TruthRecord":
        obj = json.loads(text)
        return cls(
            c_star=float(obj["c_star"]),
            b_star=float(obj["b_star"]),
            a_star=np.asarray(obj["a_star"], dtype=float),
            seed=int(obj["seed"]),
        )


# Truth expansions use modes 4..16 only; the fitted basis (M=30) strictly
# contains them.
_TRUTH_MODES = np.arange(4, 17)


def simulate_logistic(
    dims: int,
    n: int = 500,
    seed: int = 0,
    *,
    half_width: float = 8.0,
    target_sd: float = 1.5,
    intercept: float = -0.5,
    null_truth: bool = False,
):
    """Simulate the synthetic logistic benchmark.

    Covariates are iid standard normal.  The true function is a reduced-rank
    draw with coefficient variances proportional to 1/m on modes 4..16,
    rescaled so the empirical (population, ddof=0) standard deviation of the
    latent values over the drawn sample equals ``target_sd`` exactly; labels
    are +1 with probability sigmoid(f*).

    ``null_truth`` zeroes the true function entirely, making labels fair coin
    flips; useful for A/B debugging of the pipeline.
    """
    if dims < 1 or n < 1:
        raise ValueError("dims and n must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, dims))
    a_star = np.zeros((dims, 16))
    b_star = 0.0 if null_truth else intercept
    c_star = 0.0
    f_star = np.zeros(n)
    if not null_truth:
        raw = rng.standard_normal((dims, _TRUTH_MODES.size)) / np.sqrt(_TRUTH_MODES)
        f_raw = np.zeros(n)
        for k in range(dims):
            phi = np.sin(
                np.pi
                * _TRUTH_MODES[None, :]
                * (x[:, [k]] + half_width)
                / (2.0 * half_width)
            )
            f_raw += phi @ raw[k]
        sd = float(f_raw.std())
        if sd == 0.0:
            raise RuntimeError("degenerate truth draw; change the seed")
        scale = target_sd / sd
        c_star = scale * scale
        a_star[:, _TRUTH_MODES - 1] = scale * raw
        f_star = scale * f_raw + b_star
    prob = 1.0 / (1.0 + np.exp(-f_star))
    y = np.where(rng.uniform(size=n) < prob, 1.0, -1.0)
    return Dataset(x, y), TruthRecord(c_star, b_star, a_star, seed)


def simulate_meanvar(
    continuous: int,
    binary: int,
    n: int = 200,
    seed: int = 0,
    *,
    half_width: float = 8.0,
    mean_sd: float = 1.5,
    logvar_sd: float = 1.0,
    variance_floor: float = 1e-3,
):
    """Synthetic heteroscedastic data following the applied-data schema.

    Continuous covariates are standard normal; binary covariates are 0/1 coin
    flips.  Both the conditional mean and the conditional log-variance are
    nonlinear reduced-rank draws in the continuous covariates plus linear
    effects of the binary ones, so mean-only and linear models are genuinely
    misspecified on this data.

    Returns a Dataset and a plain dict describing the truth.
    """
    dims = continuous + binary
    if dims < 1 or n < 1:
        raise ValueError("need at least one covariate and one sample")
    rng = np.random.default_rng(seed)
    x = np.empty((n, dims))
    for k in range(continuous):
        x[:, k] = rng.standard_normal(n)
    for k in range(continuous, dims):
        x[:, k] = rng.integers(0, 2, size=n).astype(float)

    def draw_surface(sd_target):
        f = np.zeros(n)
        for k in range(continuous):
            raw = rng.standard_normal(_TRUTH_MODES.size) / np.sqrt(_TRUTH_MODES)
            phi = np.sin(
                np.pi
                * _TRUTH_MODES[None, :]
                * (x[:, [k]] + half_width)
                / (2.0 * half_width)
            )
            f += phi @ raw
        for k in range(continuous, dims):
            f += rng.normal(0.0, 1.0) * x[:, k]
        sd = float(f.std())
        if sd == 0.0:
            return np.zeros(n)
        return f * (sd_target / sd)

    f_mean = draw_surface(mean_sd)
    f_logvar = draw_surface(logvar_sd) - 0.5
    noise_sd = np.sqrt(variance_floor + np.exp(f_logvar))
    y = f_mean + noise_sd * rng.standard_normal(n)
    truth = {
        "f_mean_sd": mean_sd,
        "f_logvar_sd": logvar_sd,
        "continuous": continuous,
        "binary": binary,
        "seed": seed,
    }
    return Dataset(x, y), truth


def is_binary_column(col) -> bool:
    """A covariate with at most two distinct values is treated as binary."""
    return np.unique(np.asarray(col)).size <= 2


def build_model(
    name: str,
    x,
    *,
    feature_count: int = 30,
    half_width: float = 8.0,
    priors: Mapping[str, tuple[float, float]] | None = None,
    intercept_variance: float = 1.0,
    variance_floor: float = 1e-3,
    hyper_transform: str = "log",
    fixed_hypers: Mapping[str, float] | None = None,
) -> ModelSpec:
    """Assemble one of the named model presets for a covariate matrix.

    ``logistic`` is the single-function classifier; the four heteroscedastic
    presets follow the naming of the applied study: ``l``/``nl`` pick linear
    or nonlinear (Gaussian-kernel) expansions for continuous covariates, and
    ``mean``/``meanvar`` choose whether the log-variance function gets its own
    expansion or is an intercept alone.  Binary covariates always enter
    linearly.
    """
    if name not in MODEL_NAMES:
        raise ValueError(f"unknown model {name!r}; choose from {MODEL_NAMES}")
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError("x must be 2-d")
    nonlinear = name == "logistic" or name.startswith("nl-")

    def kernels_for_covariates():
        specs = []
        for k in range(x.shape[1]):
            if nonlinear and not is_binary_column(x[:, k]):
                specs.append(
                    KernelSpec(GAUSSIAN, k, features=feature_count, half_width=half_width)
                )
            else:
                specs.append(KernelSpec(LINEAR, k, features=1))
        return tuple(specs)

    f1 = kernels_for_covariates()
    if name == "logistic":
        functions = (f1,)
        likelihood = LOGISTIC
    elif name.endswith("meanvar"):
        functions = (f1, kernels_for_covariates())
        likelihood = GAUSSIAN_MEANVAR
    else:
        functions = (f1, ())
        likelihood = GAUSSIAN_MEANVAR
    fixed = dict(fixed_hypers) if fixed_hypers else {}
    return ModelSpec(
        functions=functions,
        likelihood=likelihood,
        priors=dict(priors) if priors is not None else dict(DEFAULT_PRIORS),
        intercept_variance=intercept_variance,
        variance_floor=variance_floor,
        hyper_transform=hyper_transform,
        hyperparameters=tuple(h for h in HYPER_ORDER if h not in fixed),
        fixed_hypers=fixed,
    )
