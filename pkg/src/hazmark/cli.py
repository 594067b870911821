"""Command-line surface: simulate, fit, predict, score, diagnose.

Every command takes ``--config`` plus optional ``--seed``, ``--threads`` and
``--out`` overrides.  Exit codes: 0 success, 2 ingestion error, 3
convergence-gate failure, 4 I/O error.  All outputs are byte-identical on
rerun with identical inputs and seeds.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import ContractError, ConvergenceGateError, IngestionError, ParameterError
from .graph import build_covariates, build_graph, lattice_edges, simulate_icar
from .hazard import hazard_surface, qq_points, score_models
from .io import (
    fmt,
    load_dataset,
    load_run_config,
    read_kv,
    read_samples,
    write_csv,
    write_kv,
    write_samples,
    _read_adjacency_file,
    _read_covariates_file,
)
from .mcmc import diagnostics, run_chain
from .model import LatentState, scalar_param_names, simulate_inventory, state_scalars
from .seeding import rng_stream


def _require(value, message):
    if value is None:
        raise IngestionError(message)
    return value


def _write_inventory(path, inventory, labels):
    rows = []
    for i, sizes in enumerate(inventory.sizes):
        for s in sizes:
            rows.append((labels[i], s))
    write_csv(path, ["unit_id", "size"], rows)


def _truth_state(rc, graph, covariates):
    """Assemble the simulation truth from [truth] keys and defaults."""
    cfg = rc.model
    p = covariates.p
    raw = rc.simulate.truth

    def vec(key, default):
        if key in raw:
            vals = [float(tok) for tok in raw[key].replace(",", " ").split()]
            if len(vals) != p:
                raise IngestionError(f"[truth] {key} needs {p} values (intercept first), got {len(vals)}")
            return np.array(vals)
        return np.full(p, default)

    def num(key, default):
        return float(raw[key]) if key in raw else default

    state = LatentState(beta_count=vec("beta_count", 0.5), beta_size=vec("beta_size", 0.5),
                        xi=num("xi", 0.1))
    if cfg.has_w1:
        state.tau1 = num("tau1", 2.0)
        state.w1 = simulate_icar(state.tau1, graph, rng_stream(rc.seed, "simulate", "w1"))
    if cfg.has_w2:
        state.tau2 = num("tau2", 4.0)
        state.w2 = simulate_icar(state.tau2, graph, rng_stream(rc.seed, "simulate", "w2"))
    if cfg.has_gamma:
        state.gamma = num("gamma", 0.5)
    if cfg.family == "egp":
        state.kappa = num("kappa", 1.5)
    if cfg.family == "split":
        state.bulk_shape = num("bulk_shape", 2.0)
        state.bulk_rate = num("bulk_rate", 1.0)
        state.tail_weight = num("tail_weight", 0.1)
    return state


def cmd_simulate(rc):
    """Write a complete synthetic dataset usable directly by cmd_fit."""
    out_dir = Path(rc.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if Path(rc.covariates).exists():
        labels, names, raw = _read_covariates_file(rc.covariates)
        n = len(labels)
    else:
        rows, cols = rc.simulate.lattice_rows, rc.simulate.lattice_cols
        if rows is None or cols is None:
            raise IngestionError(
                "covariates file missing: set [simulate] lattice_rows/lattice_cols to generate a dataset"
            )
        n = rows * cols
        labels = [f"su{i:04d}" for i in range(n)]
        names = tuple(f"cov{j + 1}" for j in range(rc.simulate.n_covariates))
        raw = rng_stream(rc.seed, "simulate", "covariates").standard_normal((n, len(names)))
        write_csv(rc.covariates, ["unit_id", *names],
                  [(labels[i], *raw[i]) for i in range(n)])

    if Path(rc.adjacency).exists():
        edges = _read_adjacency_file(rc.adjacency, n)
    else:
        rows, cols = rc.simulate.lattice_rows, rc.simulate.lattice_cols
        if rows is None or cols is None or rows * cols != n:
            raise IngestionError(
                "adjacency file missing: set [simulate] lattice_rows/lattice_cols matching the unit count"
            )
        edges = lattice_edges(rows, cols)
        Path(rc.adjacency).parent.mkdir(parents=True, exist_ok=True)
        with open(rc.adjacency, "w", newline="\n") as fh:
            fh.write("# i j (zero-based slope-unit adjacency)\n")
            for i, j in edges:
                fh.write(f"{i} {j}\n")

    graph = build_graph(edges, n, labels=labels)
    log_offset = None
    if rc.model.offset_column is not None and rc.model.offset_column in names:
        j = names.index(rc.model.offset_column)
        if np.any(raw[:, j] <= 0):
            raise IngestionError(f"offset column {rc.model.offset_column!r} must be positive")
        log_offset = np.log(raw[:, j])
        keep = [k for k in range(len(names)) if k != j]
        raw, names = raw[:, keep], tuple(nm for k, nm in enumerate(names) if k != j)
    covariates = build_covariates(raw, names, standardize=rc.standardize, log_offset=log_offset)

    cfg = rc.model
    if cfg.family == "split" and cfg.split_threshold is None:
        raise IngestionError("simulating from the split family requires an explicit [model] split_threshold")

    truth = _truth_state(rc, graph, covariates)
    inventory = simulate_inventory(truth, graph, covariates, cfg,
                                   rng_stream(rc.seed, "simulate", "inventory"))
    _write_inventory(rc.inventory, inventory, labels)

    if rc.simulate.heldout:
        held_path = rc.score_held_out or (out_dir / "heldout_inventory.csv")
        held = simulate_inventory(truth, graph, covariates, cfg,
                                  rng_stream(rc.seed, "simulate", "heldout"))
        _write_inventory(held_path, held, labels)

    sidecar = dict(zip(scalar_param_names(cfg, covariates.p), state_scalars(truth, cfg)))
    sidecar.update({"family": cfg.family, "structure": cfg.structure, "seed": rc.seed,
                    "n_units": n, "n_events": inventory.n_events})
    if cfg.split_threshold is not None:
        sidecar["split_threshold"] = cfg.split_threshold
    write_kv(out_dir / "truth.txt", sidecar)

    header = ["unit_id"]
    cols_out = [list(labels)]
    if truth.w1 is not None:
        header.append("w1")
        cols_out.append(list(truth.w1))
    if truth.w2 is not None:
        header.append("w2")
        cols_out.append(list(truth.w2))
    write_csv(out_dir / "truth_fields.csv", header, list(zip(*cols_out)))
    print(f"simulated {inventory.n_events} events over {n} units -> {rc.inventory}")


def cmd_fit(rc):
    """Run all chains, write samples, diagnostics, and metadata."""
    graph, covariates, inventory = load_dataset(
        rc.adjacency, rc.covariates, rc.inventory,
        standardize=rc.standardize, offset_column=rc.model.offset_column,
    )
    samples = run_chain(inventory, graph, covariates, rc.model, rc.sampler, threads=rc.threads)
    out_dir = Path(rc.output_dir)
    write_samples(samples, out_dir, covariates=covariates)

    diag = diagnostics(samples)
    rows = []
    for name in samples.column_names():
        r = diag.rhat.get(name)
        rhat_txt = "" if (samples.n_chains < 2 or r is None or np.isnan(r)) else repr(float(r))
        ess = diag.ess.get(name)
        ess_txt = "" if ess is None or np.isnan(ess) else repr(float(ess))
        rows.append((name, rhat_txt, ess_txt))
    write_csv(out_dir / "diagnostics.csv", ["parameter", "rhat", "ess"], rows)

    if samples.n_chains >= 2:
        finite = {k: v for k, v in diag.rhat.items() if np.isfinite(v)}
        worst = max(finite, key=finite.get)
        if finite[worst] > rc.rhat_gate:
            raise ConvergenceGateError(
                f"split R-hat gate failed: {worst} has R-hat {finite[worst]:.4f} > {rc.rhat_gate}"
            )
    print(f"fit complete: {samples.n_chains} chains x {samples.n_draws} draws -> {out_dir}")


_HAZARD_HEADER = ["unit_id", "susc_mean", "susc_q05", "susc_q95", "exc_mean", "exc_q05",
                  "exc_q95", "haz_mean", "haz_q05", "haz_q95", "threshold_s"]


def cmd_predict(rc):
    """Emit a hazard-surface CSV per configured size threshold."""
    samples_dir = _require(rc.predict_samples_dir, "config lacks [predict] samples_dir")
    samples = read_samples(samples_dir)
    meta = read_kv(Path(samples_dir) / "metadata.txt")
    means, scales = _stored_standardization(meta)
    graph, covariates, _ = load_dataset(
        rc.adjacency, rc.covariates, rc.inventory,
        standardize=meta.get("standardized", "true") == "true",
        offset_column=samples.config.offset_column, means=means, scales=scales,
    )
    if samples.labels and tuple(graph.labels) != tuple(samples.labels):
        raise IngestionError("dataset units do not match the fitted samples")
    out_dir = Path(rc.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for s in rc.thresholds:
        surf = hazard_surface(samples, covariates, s)
        rows = []
        for i in range(surf.n):
            rows.append((
                graph.labels[i],
                surf.susceptibility_mean[i], surf.susceptibility_q05[i], surf.susceptibility_q95[i],
                surf.exceedance_mean[i], surf.exceedance_q05[i], surf.exceedance_q95[i],
                surf.hazard_mean[i], surf.hazard_q05[i], surf.hazard_q95[i],
                surf.threshold,
            ))
        write_csv(out_dir / f"hazard_{fmt(float(s))}.csv", _HAZARD_HEADER, rows)
    print(f"wrote {len(rc.thresholds)} hazard surface(s) -> {out_dir}")


def _stored_standardization(meta):
    """Per-column means/scales recorded at fit time, keyed by covariate name."""
    means, scales = {}, {}
    for key, value in meta.items():
        if key.startswith("covariate_mean."):
            means[key.split(".", 1)[1]] = float(value)
        elif key.startswith("covariate_scale."):
            scales[key.split(".", 1)[1]] = float(value)
    if not means:
        return None, None
    return means, scales


def cmd_score(rc):
    """Compare >= 2 fitted models on shared held-out data."""
    dirs = rc.score_samples_dirs
    if len(dirs) < 2:
        raise IngestionError("config lacks [score] samples_dirs with at least two directories")
    held_path = _require(rc.score_held_out, "config lacks [score] held_out")

    first_meta = read_kv(Path(dirs[0]) / "metadata.txt")
    means, scales = _stored_standardization(first_meta)
    offset = first_meta.get("offset_column")
    graph, covariates, held_out = load_dataset(
        rc.adjacency, rc.covariates, held_path,
        standardize=first_meta.get("standardized", "true") == "true",
        offset_column=offset, means=means, scales=scales,
    )

    by_model = {}
    for d in dirs:
        name = Path(d).name
        if name in by_model:
            name = f"{name}_{len(by_model)}"
        by_model[name] = read_samples(d)

    report = score_models(held_out, by_model, covariates,
                          quantile_levels=rc.score_quantiles,
                          crps_draws=rc.crps_draws, seed=rc.seed)

    out_dir = Path(rc.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    txt = [f"{'model':<20} {'metric':<14} {'level':<8} value"]
    for name in sorted(report.models):
        ms = report.models[name]
        for level in report.quantile_levels:
            rows.append((name, "pinball", level, ms.pinball[level]))
            txt.append(f"{name:<20} {'pinball':<14} {level:<8} {fmt(ms.pinball[level])}")
        rows.append((name, "crps_size", "", ms.crps_size))
        txt.append(f"{name:<20} {'crps_size':<14} {'':<8} {fmt(ms.crps_size)}")
        rows.append((name, "crps_count", "", ms.crps_count))
        txt.append(f"{name:<20} {'crps_count':<14} {'':<8} {fmt(ms.crps_count)}")
        write_csv(out_dir / f"qq_{name}.csv", ["model_quantile", "observed"], ms.qq)
    write_csv(out_dir / "scores.csv", ["model", "metric", "level", "value"], rows)
    _write = txt  # plain-text table alongside the machine-readable CSV
    with open(out_dir / "scores.txt", "w", newline="\n") as fh:
        fh.write("\n".join(_write) + "\n")
    print(f"scored {len(by_model)} models on {held_out.n_events} held-out events -> {out_dir}")


def cmd_diagnose(rc):
    """Emit the diagnostics table plus trace and QQ plot data."""
    samples_dir = _require(rc.diagnose_samples_dir, "config lacks [diagnose] samples_dir")
    samples = read_samples(samples_dir)
    diag = diagnostics(samples)
    out_dir = Path(rc.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    single = samples.n_chains < 2
    rows = []
    for name in samples.column_names():
        r = diag.rhat.get(name)
        rhat_txt = "" if (single or r is None or np.isnan(r)) else repr(float(r))
        ess = diag.ess.get(name)
        ess_txt = "" if ess is None or np.isnan(ess) else repr(float(ess))
        rows.append((name, rhat_txt, ess_txt))
    write_csv(out_dir / "diagnostics.csv", ["parameter", "rhat", "ess"], rows)
    if single:
        print("notice: single chain, split R-hat omitted")

    trace_rows = []
    for c in range(samples.n_chains):
        for d in range(samples.n_draws):
            trace_rows.append((c, d, *samples.scalars[c, d]))
    write_csv(out_dir / "trace.csv", ["chain", "draw", *samples.scalar_names], trace_rows)

    meta = read_kv(Path(samples_dir) / "metadata.txt")
    means, scales = _stored_standardization(meta)
    _, covariates, inventory = load_dataset(
        rc.adjacency, rc.covariates, rc.inventory,
        standardize=meta.get("standardized", "true") == "true",
        offset_column=samples.config.offset_column, means=means, scales=scales,
    )
    if inventory.n_events:
        qq = qq_points(inventory, samples, covariates)
        write_csv(out_dir / "qq.csv", ["model_quantile", "observed"], qq)
    print(f"diagnostics written -> {out_dir}")


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "score": cmd_score,
    "diagnose": cmd_diagnose,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="hazmark",
        description="Joint areal modeling of hazard counts and sizes over a slope-unit graph.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func in _COMMANDS.items():
        p = sub.add_parser(name, help=func.__doc__)
        p.add_argument("--config", required=True, help="path to the run config file")
        p.add_argument("--seed", type=int, default=None, help="override [run] seed")
        p.add_argument("--threads", type=int, default=None,
                       help="override thread count (default: HAZMARK_THREADS or 1)")
        p.add_argument("--out", default=None, help="override [paths] output_dir")
    args = parser.parse_args(argv)

    try:
        rc = load_run_config(args.config, seed=args.seed, threads=args.threads, out=args.out)
        _COMMANDS[args.command](rc)
    except IngestionError as exc:
        print(f"ingestion error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, ParameterError) as exc:
        print(f"ingestion error: {exc}", file=sys.stderr)
        return 2
    except ConvergenceGateError as exc:
        print(f"convergence gate: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
