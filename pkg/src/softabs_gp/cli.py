"""Command-line front end.

Subcommands: simulate (synthetic datasets), sample (one chain to JSONL plus
a summary JSON on stdout), evidence (thermodynamic integration to JSON),
bench (structured-vs-dense trace and warm-vs-cold solver timings as CSV),
diagnose (chain health JSON from a JSONL file).

Exit codes: 0 success, 1 runtime failures (diverged chains, failed
optimisations, I/O), 2 usage and validation errors.  Settings files are
plain ``key = value`` lines with ``#`` comments; command-line flags win
over file settings.  ``SOFTABS_THREADS`` overrides ``--threads``.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time

import numpy as np

from . import evidence as evidence_mod
from . import rrgp
from .metric import dynamic_eigendecompose, metric_from_hessian, w1_matrix, w2_matrix
from .posterior import PosteriorTarget, dense_oracle
from .rrgp import SchemaError
from .sampler import (
    ChainConfig,
    ChainError,
    read_jsonl,
    run_chain,
    wilcoxon_split_half,
    write_jsonl,
)

MODEL_CHOICES = sorted(rrgp.MODEL_NAMES)
METRIC_CHOICES = ["softabs-dynamic", "softabs-static", "euclidean"]
BENCH_METHODS = ["structured-trace", "dense-trace", "dynamic-decomp", "static-decomp"]

# settings-file keys: sampler tuning, hyperprior shapes/rates, and model sizes
_SETTING_TYPES = {
    "epsilon": float,
    "leapfrogs": int,
    "moves": int,
    "burnin": int,
    "kappa": float,
    "zeta": float,
    "alpha_cg": float,
    "beta_cg": float,
    "alpha_sg": float,
    "beta_sg": float,
    "alpha_cl": float,
    "beta_cl": float,
    "Sigma": float,
    "delta": float,
    "L": float,
    "M": int,
}


def read_settings(path):
    """Parse a ``key = value`` settings file; unknown keys are errors."""
    settings = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SchemaError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in _SETTING_TYPES:
                raise SchemaError(f"{path}:{lineno}: unknown setting {key!r}")
            try:
                settings[key] = _SETTING_TYPES[key](value)
            except ValueError:
                raise SchemaError(
                    f"{path}:{lineno}: invalid value {value!r} for {key}"
                ) from None
    return settings


def _model_kwargs(settings):
    priors = {
        "c_g": (settings.get("alpha_cg", 2.0), settings.get("beta_cg", 2.0)),
        "sigma_g": (settings.get("alpha_sg", 2.0), settings.get("beta_sg", 2.0)),
        "c_l": (settings.get("alpha_cl", 2.0), settings.get("beta_cl", 2.0)),
    }
    return {
        "priors": priors,
        "intercept_variance": settings.get("Sigma", 1.0),
        "variance_floor": settings.get("delta", 1e-3),
        "half_width": settings.get("L", 8.0),
        "feature_count": settings.get("M", 30),
    }


def _chain_config(settings, args):
    def pick(flag, key, default):
        if flag is not None:
            return flag
        return settings.get(key, default)

    moves = pick(getattr(args, "moves", None), "moves", 9600)
    return ChainConfig(
        epsilon=pick(getattr(args, "epsilon", None), "epsilon", 0.001),
        leapfrogs=pick(getattr(args, "leapfrogs", None), "leapfrogs", 100),
        moves=moves,
        # burnin tracks the default 9600/2400 split when only moves is given
        burnin=pick(getattr(args, "burnin", None), "burnin", moves // 4),
        kappa=settings.get("kappa", 1.0),
        zeta=settings.get("zeta", 1e-13),
        metric=getattr(args, "metric", "softabs-dynamic"),
        seed=getattr(args, "seed", 0),
        record_q=bool(getattr(args, "record_q", False)),
    )


def _resolve_threads(args):
    # The environment variable wins over the flag when both are present.
    raw = os.environ.get("SOFTABS_THREADS")
    if raw is not None and raw.strip():
        try:
            return max(1, int(raw))
        except ValueError:
            raise SchemaError(
                f"SOFTABS_THREADS must be an integer, got {raw!r}"
            ) from None
    return max(1, getattr(args, "threads", 1) or 1)


def _default_truth_path(out):
    stem, ext = os.path.splitext(out)
    return (stem if ext else out) + ".truth.json"


def cmd_simulate(args):
    if args.family == "logistic":
        data, truth = rrgp.simulate_logistic(
            args.dims, n=args.n, seed=args.seed, null_truth=args.null
        )
        truth_text = truth.to_json()
    else:
        data, truth = rrgp.simulate_meanvar(
            args.dims, args.binary_dims, n=args.n, seed=args.seed
        )
        truth_text = json.dumps(truth)
    rrgp.write_csv(args.out, data)
    truth_path = args.truth or _default_truth_path(args.out)
    with open(truth_path, "w", encoding="utf-8") as fh:
        fh.write(truth_text)
        fh.write("\n")
    print(
        f"wrote {data.n} rows x {data.dims} covariates to {args.out} "
        f"(truth in {truth_path})"
    )
    return 0


def _chain_summary(result, config, dim, out):
    kept = result.records[config.burnin :]
    logpost = np.array([r.logpost for r in kept])
    # one block = 100 leapfrogs, whatever the per-move trajectory length
    blocks_per_move = config.leapfrogs / 100.0
    wall = [r.wall_ms / blocks_per_move for r in kept] or [math.nan]
    if logpost.size >= 10:
        z, p = wilcoxon_split_half(logpost)
    else:
        z, p = None, None
    return {
        "d": dim,
        "moves": config.moves,
        "burnin": config.burnin,
        "metric": config.metric,
        "acceptance_rate": result.acceptance_rate,
        "divergences": result.divergence_count,
        "mean_sweeps": float(np.mean([r.sweeps_mean for r in kept]))
        if kept
        else math.nan,
        "wall_ms_per_block": float(np.mean(wall)),
        "wilcoxon_z": z,
        "wilcoxon_p": p,
        "chain": out,
    }


def cmd_sample(args):
    settings = read_settings(args.config) if args.config else {}
    data = rrgp.read_csv(args.data)
    model = rrgp.build_model(args.model, data.x, **_model_kwargs(settings))
    config = _chain_config(settings, args)
    target = PosteriorTarget(model, data)
    result = run_chain(target, config)
    write_jsonl(result.records, args.out)
    summary = _chain_summary(result, config, target.dim, args.out)
    text = json.dumps(summary, indent=2)
    if args.summary:
        with open(args.summary, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.write("\n")
    print(text)
    return 0


def _load_ladder(args, config):
    if args.ladder == "default":
        ladder = evidence_mod.default_ladder(
            moves_per_rung=args.rung_moves,
            leapfrogs=config.leapfrogs,
            chains=args.chains,
        )
    else:
        with open(args.ladder, "r", encoding="utf-8") as fh:
            taus = [float(line) for line in fh if line.strip()]
        ladder = evidence_mod.TemperLadder(
            np.asarray(taus),
            moves_per_rung=args.rung_moves,
            leapfrogs=config.leapfrogs,
            chains=args.chains,
        )
    if args.thin > 1:
        ladder = ladder.thin(args.thin)
    return ladder


def cmd_evidence(args):
    settings = read_settings(args.config) if args.config else {}
    data = rrgp.read_csv(args.data)
    model = rrgp.build_model(args.model, data.x, **_model_kwargs(settings))
    config = _chain_config(settings, args)
    ladder = _load_ladder(args, config)
    progress = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    estimate = evidence_mod.thermo_integrate(
        model,
        data,
        ladder,
        config,
        rung_average=args.rung_average,
        threads=_resolve_threads(args),
        progress=progress,
    )
    report = json.loads(estimate.to_json())
    if args.oracle == "laplace-grid":
        # the grid covers (c_g, sigma_g); any other hyperparameter is pinned
        # at 1.0, where its prior factor integrates out of the comparison
        extra = [h for h in model.hyperparameters if h not in ("c_g", "sigma_g")]
        grid = evidence_mod.GridSpec(
            c_mesh=0.01 * args.mesh_scale,
            sigma_mesh=0.02 * args.mesh_scale,
            pinned=tuple((h, 1.0) for h in extra),
        )
        oracle_value = evidence_mod.laplace_grid_oracle(model, data, grid)
        report["laplace_grid"] = oracle_value
        report["gap"] = estimate.bme_mean - oracle_value
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    for note in estimate.warnings:
        print(f"warning: {note}", file=sys.stderr)
    line = f"bme_mean {estimate.bme_mean:.4f}, bme_stderr {estimate.bme_stderr:.4f}"
    if "laplace_grid" in report:
        line += f", laplace_grid {report['laplace_grid']:.4f}, gap {report['gap']:.4f}"
    print(line + f", report written to {args.out}")
    return 0


def _bench_cell(dims, args, settings):
    """Time the four methods at one covariate count; one CSV row each."""
    data, _ = rrgp.simulate_logistic(dims, n=args.n, seed=args.seed)
    model = rrgp.build_model("logistic", data.x, **_model_kwargs(settings))
    target = PosteriorTarget(model, data)
    zeta = settings.get("zeta", 1e-13)
    kappa = settings.get("kappa", 1.0)
    rng = np.random.default_rng(args.seed)
    q = 0.05 * rng.standard_normal(target.dim)
    direction = rng.standard_normal(target.dim)
    direction /= float(np.linalg.norm(direction))

    static_ms, static_sweeps = [], []
    dynamic_ms, dynamic_sweeps = [], []
    structured_ms, dense_ms = [], []
    # step spacing mirrors consecutive decompositions inside an epsilon=0.001
    # leapfrog move, where the warm path does its one-to-two sweeps
    metric = metric_from_hessian(target.at(q).hessian(), kappa, zeta)
    for rep in range(max(1, args.repeats)):
        q_next = q + (rep + 1) * 2e-4 * direction
        state = target.at(q_next)
        hess = state.hessian()

        t0 = time.perf_counter()
        cold = metric_from_hessian(hess, kappa, zeta)
        static_ms.append((time.perf_counter() - t0) * 1e3)
        static_sweeps.append(cold.sweep_count)

        t0 = time.perf_counter()
        metric = dynamic_eigendecompose(hess, metric, zeta)
        dynamic_ms.append((time.perf_counter() - t0) * 1e3)
        dynamic_sweeps.append(metric.sweep_count)

        p = rng.standard_normal(target.dim)
        w = w2_matrix(metric) - w1_matrix(metric, p)
        t0 = time.perf_counter()
        structured = state.trace_single(w)
        structured_ms.append((time.perf_counter() - t0) * 1e3)

        t0 = time.perf_counter()
        dense = dense_oracle(w, q_next, model, data, dim_cap=target.dim)
        dense_ms.append((time.perf_counter() - t0) * 1e3)
        gap = float(np.max(np.abs(structured - dense)))
        scale = max(1.0, float(np.max(np.abs(dense))))
        if gap > 1e-4 * scale:
            raise ChainError(
                f"structured and dense traces disagree at D={dims}: {gap:.3e}"
            )

    def stats(values):
        arr = np.asarray(values, dtype=float)
        sd = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
        return float(np.mean(arr)), sd

    rows = []
    for method, ms, sweeps in [
        ("structured-trace", structured_ms, None),
        ("dense-trace", dense_ms, None),
        ("dynamic-decomp", dynamic_ms, dynamic_sweeps),
        ("static-decomp", static_ms, static_sweeps),
    ]:
        mean_ms, sd_ms = stats(ms)
        if sweeps is None:
            sweep_cols = ["", ""]
        else:
            mean_sw, sd_sw = stats(sweeps)
            sweep_cols = [f"{mean_sw:.2f}", f"{sd_sw:.2f}"]
        rows.append(
            [str(dims), str(target.dim), method, f"{mean_ms:.3f}", f"{sd_ms:.3f}"]
            + sweep_cols
        )
    return rows


def cmd_bench(args):
    settings = read_settings(args.config) if args.config else {}
    try:
        grid = [int(tok) for tok in args.dims_grid.split(",") if tok.strip()]
    except ValueError:
        raise SchemaError(f"--dims-grid must be comma-separated ints: {args.dims_grid!r}")
    if not grid or any(d < 1 for d in grid):
        raise SchemaError("--dims-grid needs at least one positive covariate count")
    lines = ["D,d,method,mean_ms,sd_ms,mean_sweeps,sd_sweeps"]
    for dims in grid:
        for row in _bench_cell(dims, args, settings):
            lines.append(",".join(row))
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"wrote {len(lines) - 1} rows to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_diagnose(args):
    records = read_jsonl(args.chain)
    if not records:
        raise SchemaError(f"{args.chain}: empty chain file")
    kept = records[args.burnin :]
    if not kept:
        raise SchemaError("burn-in removed every record")
    logpost = np.array([r.logpost for r in kept])
    if logpost.size >= 10:
        z, p = wilcoxon_split_half(logpost)
    else:
        z, p = None, None
    report = {
        "moves": len(records),
        "kept": len(kept),
        "acceptance_rate": sum(r.accept for r in kept) / len(kept),
        "divergences": sum(r.divergent for r in records),
        "mean_sweeps": float(np.mean([r.sweeps_mean for r in kept])),
        "wilcoxon_z": z,
        "wilcoxon_p": p,
    }
    print(json.dumps(report, indent=2))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="softabs-gp",
        description="Riemannian-manifold HMC for hierarchical reduced-rank GP models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="write a synthetic dataset to CSV")
    sim.add_argument("--out", required=True, help="output CSV path")
    sim.add_argument("--family", choices=["logistic", "meanvar"], default="logistic")
    sim.add_argument("--dims", type=int, default=1, help="continuous covariates")
    sim.add_argument(
        "--binary-dims", type=int, default=0, help="binary covariates (meanvar only)"
    )
    sim.add_argument("--n", type=int, default=500)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument(
        "--truth", help="truth JSON path (default: <out>.truth.json)"
    )
    sim.add_argument(
        "--null", action="store_true", help="zero the true function (logistic only)"
    )
    sim.set_defaults(func=cmd_simulate)

    def add_common(p, *, moves_default=None):
        p.add_argument("--data", required=True, help="input CSV")
        p.add_argument("--model", choices=MODEL_CHOICES, required=True)
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--epsilon", type=float, default=None)
        p.add_argument("--leapfrogs", type=int, default=None)
        p.add_argument("--moves", type=int, default=moves_default)
        p.add_argument("--burnin", type=int, default=None)

    smp = sub.add_parser("sample", help="run one chain and write JSONL records")
    add_common(smp)
    smp.add_argument("--metric", choices=METRIC_CHOICES, default="softabs-dynamic")
    smp.add_argument("--out", required=True, help="output JSONL path")
    smp.add_argument("--summary", help="also write the summary JSON here")
    smp.add_argument(
        "--record-q", action="store_true", help="store positions in the records"
    )
    smp.set_defaults(func=cmd_sample)

    evd = sub.add_parser("evidence", help="thermodynamic-integration evidence")
    add_common(evd, moves_default=50)
    evd.add_argument("--metric", choices=METRIC_CHOICES, default="softabs-dynamic")
    evd.add_argument("--out", required=True, help="output JSON path")
    evd.add_argument("--chains", type=int, default=10)
    evd.add_argument(
        "--ladder",
        default="default",
        help="'default' or a file with one temperature per line",
    )
    evd.add_argument("--rung-moves", type=int, default=50)
    evd.add_argument("--thin", type=int, default=1, help="keep every k-th rung")
    evd.add_argument("--rung-average", action="store_true")
    evd.add_argument("--threads", type=int, default=1)
    evd.add_argument(
        "--oracle",
        choices=["laplace-grid"],
        help="cross-check against the grid marginalisation",
    )
    evd.add_argument(
        "--mesh-scale",
        type=float,
        default=1.0,
        help="multiply the oracle grid meshes (coarser, faster cross-check)",
    )
    evd.add_argument("--verbose", action="store_true")
    evd.set_defaults(func=cmd_evidence)

    ben = sub.add_parser("bench", help="trace-contraction and solver timing CSV")
    ben.add_argument(
        "--dims-grid", default="1,2,4", help="comma-separated covariate counts"
    )
    ben.add_argument("--n", type=int, default=200)
    ben.add_argument("--seed", type=int, default=0)
    ben.add_argument("--repeats", type=int, default=3)
    ben.add_argument("--config", help="key = value settings file")
    ben.add_argument("--out", help="CSV path (default: stdout)")
    ben.set_defaults(func=cmd_bench)

    dia = sub.add_parser("diagnose", help="summarise a JSONL chain file as JSON")
    dia.add_argument("--chain", required=True, help="JSONL chain path")
    dia.add_argument("--burnin", type=int, default=0)
    dia.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ChainError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
