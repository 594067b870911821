"""Configuration, data ingestion/validation, and output writers.

File formats:

* config       -- INI-style ``key = value`` sections, versioned by a required
  ``spec_version`` key under ``[run]``.
* adjacency    -- plain text, one edge per line, ``i j`` zero-based unit
  indices; ``#`` comments and blank lines allowed.
* covariates   -- CSV with header; first column unit id, remaining columns
  numeric covariates.
* inventory    -- CSV with header ``unit_id,size``; one row per event; units
  with zero events are simply absent.

All numeric output is written with ``repr`` so reruns on identical inputs
are byte-identical.  Ingestion is all-or-nothing: the first violation raises
:class:`IngestionError` with file and line context.
"""

from __future__ import annotations

import configparser
import csv
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import IngestionError
from .graph import CovariateMatrix, build_covariates, build_graph
from .mcmc import PosteriorSamples, SamplerConfig
from .model import Inventory, ModelConfig, Priors, scalar_param_names

__all__ = [
    "RunConfig",
    "load_run_config",
    "load_dataset",
    "write_samples",
    "read_samples",
    "fmt",
]

SPEC_VERSION = 1


def fmt(x):
    """Stable text form for output files (shortest round-trip for floats)."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _write_lines(path, lines):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(v) for v in row))
    _write_lines(path, lines)


def write_kv(path, mapping):
    _write_lines(path, [f"{k} = {fmt(v)}" for k, v in sorted(mapping.items())])


def read_kv(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class SimulateOptions:
    lattice_rows: Optional[int] = None
    lattice_cols: Optional[int] = None
    n_covariates: int = 2
    heldout: bool = False
    truth: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    """Everything a command needs, parsed from one config file."""

    spec_version: int
    seed: int
    determinism: bool
    threads: int
    adjacency: Path
    covariates: Path
    inventory: Path
    output_dir: Path
    model: ModelConfig
    sampler: SamplerConfig
    standardize: bool = True
    thresholds: tuple = (1.0,)
    score_quantiles: tuple = (0.9, 0.95, 0.99)
    crps_draws: int = 200
    rhat_gate: float = 1.1
    simulate: SimulateOptions = field(default_factory=SimulateOptions)
    predict_samples_dir: Optional[Path] = None
    score_samples_dirs: tuple = ()
    score_held_out: Optional[Path] = None
    diagnose_samples_dir: Optional[Path] = None


class _Cfg:
    """configparser wrapper that raises located ingestion errors."""

    def __init__(self, parser, path):
        self.parser = parser
        self.path = str(path)

    def get(self, section, key, default=None, required=False):
        if self.parser.has_option(section, key):
            value = self.parser.get(section, key).strip()
            if value != "":
                return value
        if required:
            raise IngestionError(f"missing required config key [{section}] {key}", path=self.path)
        return default

    def get_int(self, section, key, default=None, required=False):
        raw = self.get(section, key, required=required)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError:
            raise IngestionError(f"config key [{section}] {key} must be an integer, got {raw!r}",
                                 path=self.path) from None

    def get_float(self, section, key, default=None, required=False):
        raw = self.get(section, key, required=required)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            raise IngestionError(f"config key [{section}] {key} must be a number, got {raw!r}",
                                 path=self.path) from None

    def get_bool(self, section, key, default=None):
        raw = self.get(section, key)
        if raw is None:
            return default
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise IngestionError(f"config key [{section}] {key} must be a boolean, got {raw!r}",
                             path=self.path)

    def get_floats(self, section, key, default=()):
        raw = self.get(section, key)
        if raw is None:
            return tuple(default)
        try:
            return tuple(float(tok) for tok in raw.replace(",", " ").split())
        except ValueError:
            raise IngestionError(f"config key [{section}] {key} must be a list of numbers, got {raw!r}",
                                 path=self.path) from None


def load_run_config(path, seed=None, threads=None, out=None):
    """Parse and validate a config file; CLI overrides applied last."""
    path = Path(path)
    if not path.exists():
        raise IngestionError("config file does not exist", path=str(path))
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise IngestionError(f"config parse failure: {exc}", path=str(path)) from None
    cfg = _Cfg(parser, path)

    version = cfg.get_int("run", "spec_version", required=True)
    if version != SPEC_VERSION:
        raise IngestionError(f"unsupported spec_version {version} (expected {SPEC_VERSION})",
                             path=str(path))

    base = path.parent

    def _path(section, key, required=False):
        raw = cfg.get(section, key, required=required)
        if raw is None:
            return None
        p = Path(raw)
        return p if p.is_absolute() else base / p

    priors_kwargs = {}
    for f in dc_fields(Priors):
        value = cfg.get_float("priors", f.name)
        if value is not None:
            priors_kwargs[f.name] = value

    fix_tau1 = cfg.get_float("model", "fix_tau1")
    fix_tau2 = cfg.get_float("model", "fix_tau2")
    model = ModelConfig(
        family=cfg.get("model", "family", default="gp"),
        structure=cfg.get("model", "structure", default="shared_plus"),
        priors=Priors(**priors_kwargs),
        threshold_quantile=cfg.get_float("model", "threshold_quantile", default=0.90),
        split_threshold=cfg.get_float("model", "split_threshold"),
        offset_column=cfg.get("model", "offset_column"),
        fix_tau1=fix_tau1,
        fix_tau2=fix_tau2,
    )

    run_seed = cfg.get_int("run", "seed", default=0)
    if seed is not None:
        run_seed = int(seed)

    sampler = SamplerConfig(
        n_iter=cfg.get_int("sampler", "n_iter", default=4000),
        burn_in=cfg.get_int("sampler", "burn_in", default=2000),
        thin=cfg.get_int("sampler", "thin", default=1),
        n_chains=cfg.get_int("sampler", "n_chains", default=2),
        seed=run_seed,
        adapt_window=cfg.get_int("sampler", "adapt_window", default=50),
        target_accept_single=cfg.get_float("sampler", "target_accept_single", default=0.44),
        target_accept_block=cfg.get_float("sampler", "target_accept_block", default=0.234),
        step_size_field=cfg.get_float("sampler", "step_size_field", default=0.5),
        step_size_beta=cfg.get_float("sampler", "step_size_beta", default=0.1),
        step_size_global=cfg.get_float("sampler", "step_size_global", default=0.1),
        init_jitter=cfg.get_float("sampler", "init_jitter", default=0.1),
    )

    import os

    env_threads = os.environ.get("HAZMARK_THREADS")
    run_threads = cfg.get_int("run", "threads", default=None)
    if run_threads is None:
        run_threads = int(env_threads) if env_threads else 1
    if threads is not None:
        run_threads = int(threads)

    output_dir = _path("paths", "output_dir", required=True)
    if out is not None:
        output_dir = Path(out)

    thresholds = cfg.get_floats("hazard", "thresholds", default=(1.0,))
    if any(t < 0 for t in thresholds):
        raise IngestionError("hazard thresholds must be nonnegative", path=str(path))

    truth = {}
    if parser.has_section("truth"):
        truth = {k: v for k, v in parser.items("truth")}
    sim = SimulateOptions(
        lattice_rows=cfg.get_int("simulate", "lattice_rows"),
        lattice_cols=cfg.get_int("simulate", "lattice_cols"),
        n_covariates=cfg.get_int("simulate", "n_covariates", default=2),
        heldout=cfg.get_bool("simulate", "heldout", default=False),
        truth=truth,
    )

    score_dirs_raw = cfg.get("score", "samples_dirs")
    score_dirs = ()
    if score_dirs_raw:
        score_dirs = tuple((base / tok.strip()) if not Path(tok.strip()).is_absolute() else Path(tok.strip())
                           for tok in score_dirs_raw.split(",") if tok.strip())

    return RunConfig(
        spec_version=version,
        seed=run_seed,
        determinism=cfg.get_bool("run", "determinism", default=True),
        threads=run_threads,
        adjacency=_path("paths", "adjacency", required=True),
        covariates=_path("paths", "covariates", required=True),
        inventory=_path("paths", "inventory", required=True),
        output_dir=output_dir,
        model=model,
        sampler=sampler,
        standardize=cfg.get_bool("model", "standardize", default=True),
        thresholds=thresholds,
        score_quantiles=cfg.get_floats("hazard", "score_quantiles", default=(0.9, 0.95, 0.99)),
        crps_draws=cfg.get_int("hazard", "crps_draws", default=200),
        rhat_gate=cfg.get_float("sampler", "rhat_gate", default=1.1),
        simulate=sim,
        predict_samples_dir=_path("predict", "samples_dir"),
        score_samples_dirs=score_dirs,
        score_held_out=_path("score", "held_out"),
        diagnose_samples_dir=_path("diagnose", "samples_dir"),
    )


# ---------------------------------------------------------------------------
# dataset ingestion


def _read_covariates_file(path):
    path = Path(path)
    if not path.exists():
        raise IngestionError("covariates file does not exist", path=str(path))
    labels = []
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError("covariates file is empty", path=str(path)) from None
        names = tuple(h.strip() for h in header[1:])
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise IngestionError(
                    f"expected {len(header)} fields, got {len(row)}", path=str(path), line=lineno
                )
            unit = row[0].strip()
            if "," in unit or not unit:
                raise IngestionError(f"bad unit id {unit!r}", path=str(path), line=lineno)
            if unit in seen:
                raise IngestionError(f"duplicate unit id {unit!r}", path=str(path), line=lineno)
            seen.add(unit)
            labels.append(unit)
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError:
                bad = next(v for v in row[1:] if not _is_float(v))
                raise IngestionError(
                    f"non-numeric covariate value {bad!r}", path=str(path), line=lineno
                ) from None
    return labels, names, np.array(rows, dtype=float).reshape(len(labels), len(names))


def _is_float(tok):
    try:
        float(tok)
        return True
    except ValueError:
        return False


def _read_adjacency_file(path, n):
    path = Path(path)
    if not path.exists():
        raise IngestionError("adjacency file does not exist", path=str(path))
    edges = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            toks = body.split()
            if len(toks) != 2:
                raise IngestionError(f"expected 'i j', got {body!r}", path=str(path), line=lineno)
            try:
                i, j = int(toks[0]), int(toks[1])
            except ValueError:
                raise IngestionError(f"non-integer unit index in {body!r}",
                                     path=str(path), line=lineno) from None
            if not (0 <= i < n and 0 <= j < n):
                raise IngestionError(f"edge ({i}, {j}) references a unit outside [0, {n})",
                                     path=str(path), line=lineno)
            if i == j:
                raise IngestionError(f"self-loop on unit {i}", path=str(path), line=lineno)
            edges.append((i, j))
    return edges


def _read_inventory_file(path, label_index):
    path = Path(path)
    if not path.exists():
        raise IngestionError("inventory file does not exist", path=str(path))
    units = []
    values = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError("inventory file is empty", path=str(path)) from None
        if [h.strip() for h in header[:2]] != ["unit_id", "size"]:
            raise IngestionError(
                f"inventory header must be 'unit_id,size', got {','.join(header)!r}", path=str(path), line=1
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 2:
                raise IngestionError(f"expected 2 fields, got {len(row)}", path=str(path), line=lineno)
            unit = row[0].strip()
            if unit not in label_index:
                raise IngestionError(f"unknown unit id {unit!r}", path=str(path), line=lineno)
            try:
                size = float(row[1])
            except ValueError:
                raise IngestionError(f"non-numeric size {row[1]!r}", path=str(path), line=lineno) from None
            if not np.isfinite(size) or size <= 0.0:
                raise IngestionError(f"size must be finite and > 0, got {row[1]!r}",
                                     path=str(path), line=lineno)
            units.append(label_index[unit])
            values.append(size)
    return np.array(units, dtype=np.int64), np.array(values, dtype=float)


def load_dataset(adjacency_path, covariates_path, inventory_path, standardize=True,
                 offset_column=None, means=None, scales=None):
    """Load and cross-validate the three dataset files.

    Returns (graph, covariates, inventory) with unit labels taken from the
    covariates file order.  ``means``/``scales`` (arrays in column order or
    dicts keyed by column name) reuse a stored standardization instead of
    recomputing one.
    """
    labels, names, raw = _read_covariates_file(covariates_path)
    n = len(labels)

    log_offset = None
    if offset_column is not None:
        if offset_column not in names:
            raise IngestionError(f"offset column {offset_column!r} not found in covariates",
                                 path=str(covariates_path))
        j = names.index(offset_column)
        col = raw[:, j]
        if np.any(col <= 0):
            bad = int(np.flatnonzero(col <= 0)[0])
            raise IngestionError(
                f"offset column {offset_column!r} must be positive (unit {labels[bad]!r})",
                path=str(covariates_path), line=bad + 2,
            )
        log_offset = np.log(col)
        keep = [k for k in range(len(names)) if k != j]
        raw = raw[:, keep]
        names = tuple(nm for k, nm in enumerate(names) if k != j)

    if isinstance(means, dict):
        missing = [nm for nm in names if nm not in means]
        if missing:
            raise IngestionError(f"stored standardization lacks column(s) {missing}",
                                 path=str(covariates_path))
        means = np.array([means[nm] for nm in names])
        scales = np.array([scales[nm] for nm in names])

    try:
        covariates = build_covariates(raw, names, standardize=standardize,
                                      means=means, scales=scales, log_offset=log_offset)
    except IngestionError as exc:
        raise IngestionError(str(exc), path=str(covariates_path)) from None

    edges = _read_adjacency_file(adjacency_path, n)
    try:
        graph = build_graph(edges, n, labels=labels)
    except IngestionError as exc:
        raise IngestionError(str(exc), path=str(adjacency_path)) from None

    label_index = {lab: i for i, lab in enumerate(labels)}
    units, values = _read_inventory_file(inventory_path, label_index)
    inventory = Inventory.from_events(units, values, n)
    return graph, covariates, inventory


# ---------------------------------------------------------------------------
# posterior sample persistence


def write_samples(samples: PosteriorSamples, out_dir, covariates: CovariateMatrix = None,
                  extra_metadata=None):
    """Write per-chain sample CSVs and the metadata sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    field_names = sorted(samples.fields)
    header = list(samples.scalar_names)
    for fname in field_names:
        header += [f"{fname}[{i}]" for i in range(samples.fields[fname].shape[2])]

    for c in range(samples.n_chains):
        blocks = [samples.scalars[c]]
        for fname in field_names:
            blocks.append(samples.fields[fname][c])
        mat = np.concatenate(blocks, axis=1)
        write_csv(out_dir / f"samples_chain{c}.csv", header, mat)

    meta = {
        "spec_version": SPEC_VERSION,
        "family": samples.config.family,
        "structure": samples.config.structure,
        "threshold_quantile": samples.config.threshold_quantile,
        "n_units": len(samples.labels),
        "labels": ",".join(samples.labels),
        "adjacency_weights": "binary",
        "shared_field_owner": "count",
        "hazard_period": "per-trigger",
        "n_scalars": len(samples.scalar_names),
    }
    if samples.config.family == "egp":
        meta["egp_variant"] = "egp-power"
    if samples.config.split_threshold is not None:
        meta["split_threshold"] = samples.config.split_threshold
    if samples.config.offset_column:
        meta["offset_column"] = samples.config.offset_column
    if samples.config.fix_tau1 is not None:
        meta["fix_tau1"] = samples.config.fix_tau1
    if samples.config.fix_tau2 is not None:
        meta["fix_tau2"] = samples.config.fix_tau2
    for f in dc_fields(Priors):
        meta[f"prior.{f.name}"] = getattr(samples.config.priors, f.name)
    for f in dc_fields(SamplerConfig):
        meta[f"sampler.{f.name}"] = getattr(samples.sampler, f.name)
    for block, rates in samples.acceptance.items():
        for c, rate in enumerate(np.atleast_1d(rates)):
            meta[f"accept.{block}.chain{c}"] = float(rate)
    if covariates is not None:
        meta["standardized"] = bool(np.any(covariates.scales != 1.0) or np.any(covariates.means != 0.0))
        for name, mean, scale in zip(covariates.names, covariates.means, covariates.scales):
            if name == "intercept":
                continue
            meta[f"covariate_mean.{name}"] = float(mean)
            meta[f"covariate_scale.{name}"] = float(scale)
    if extra_metadata:
        meta.update(extra_metadata)
    write_kv(out_dir / "metadata.txt", meta)


def read_samples(samples_dir):
    """Reconstruct :class:`PosteriorSamples` from a fitted output directory."""
    samples_dir = Path(samples_dir)
    meta_path = samples_dir / "metadata.txt"
    if not meta_path.exists():
        raise IngestionError("metadata.txt not found; not a samples directory", path=str(samples_dir))
    meta = read_kv(meta_path)

    priors_kwargs = {f.name: float(meta[f"prior.{f.name}"]) for f in dc_fields(Priors)
                     if f"prior.{f.name}" in meta}
    config = ModelConfig(
        family=meta["family"],
        structure=meta["structure"],
        priors=Priors(**priors_kwargs),
        threshold_quantile=float(meta.get("threshold_quantile", 0.9)),
        split_threshold=float(meta["split_threshold"]) if "split_threshold" in meta else None,
        offset_column=meta.get("offset_column"),
        fix_tau1=float(meta["fix_tau1"]) if "fix_tau1" in meta else None,
        fix_tau2=float(meta["fix_tau2"]) if "fix_tau2" in meta else None,
    )
    kwargs = {}
    for f in dc_fields(SamplerConfig):
        raw = meta.get(f"sampler.{f.name}")
        if raw is None:
            continue
        kwargs[f.name] = int(raw) if f.type == "int" or f.name in (
            "n_iter", "burn_in", "thin", "n_chains", "seed", "adapt_window") else float(raw)
    sampler = SamplerConfig(**kwargs)

    labels = tuple(meta.get("labels", "").split(",")) if meta.get("labels") else ()

    chain_files = sorted(samples_dir.glob("samples_chain*.csv"),
                         key=lambda p: int(p.stem.replace("samples_chain", "")))
    if not chain_files:
        raise IngestionError("no samples_chain*.csv files found", path=str(samples_dir))
    header = None
    mats = []
    for cf in chain_files:
        with open(cf) as fh:
            head = fh.readline().strip().split(",")
            mat = np.loadtxt(fh, delimiter=",", ndmin=2)
        if header is None:
            header = head
        elif head != header:
            raise IngestionError("chain files have inconsistent headers", path=str(cf))
        mats.append(mat)
    draws = min(m.shape[0] for m in mats)
    data = np.stack([m[:draws] for m in mats])  # (chains, draws, cols)

    n_scalars = int(meta["n_scalars"])
    scalar_names = header[:n_scalars]
    expect = scalar_param_names(config, sum(1 for s in scalar_names if s.startswith("beta_count[")))
    if scalar_names != expect:
        raise IngestionError("sample columns do not match the recorded configuration",
                             path=str(samples_dir))
    fields = {}
    col = n_scalars
    while col < len(header):
        fname = header[col].split("[")[0]
        width = 0
        while col + width < len(header) and header[col + width].startswith(f"{fname}["):
            width += 1
        fields[fname] = data[:, :, col:col + width]
        col += width

    acceptance = {}
    for key, value in meta.items():
        if key.startswith("accept."):
            _, block, chain = key.split(".")
            acceptance.setdefault(block, {})[int(chain.replace("chain", ""))] = float(value)
    acceptance = {b: np.array([v[c] for c in sorted(v)]) for b, v in acceptance.items()}

    return PosteriorSamples(
        scalar_names=scalar_names,
        scalars=data[:, :, :n_scalars],
        fields=fields,
        acceptance=acceptance,
        step_trace={},
        config=config,
        sampler=sampler,
        labels=labels,
    )
