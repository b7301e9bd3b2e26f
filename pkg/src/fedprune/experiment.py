"""Experiment grids: spec parsing, cell execution and report collection."""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import evaluation
from .datagen import Corpus, generate_corpus, partition, train_reference_model
from .errors import FormatError, InputDomainError, NumericalError
from .evaluation import PruneReport
from .federation import (CommLedger, PruneConfig, Strategy, make_clients, run_centralized,
                         run_fedprllm, run_local_only, _map)
from .masking import ComparisonGroup
from .metrics import Metric
from .model import PrunableModel

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)


class SpecError(FormatError):
    """The experiment spec is missing fields or holds invalid values."""


@dataclass
class CorpusParams:
    vocab: int = 32
    sample_len: int = 64
    train: int = 128
    calibration: int = 128
    heldout: int = 64
    concentration: float = 0.3
    communities: int = 16
    leak: float = 0.02


@dataclass
class ModelParams:
    dims: list[int] = field(default_factory=lambda: [32, 64, 64, 64])
    epochs: int = 2000
    lr: float = 0.5


@dataclass
class Grid:
    sparsity: list[float] = field(default_factory=lambda: [0.5])
    metric: list[str] = field(default_factory=lambda: ["wanda"])
    local_group: list[str] = field(default_factory=lambda: ["row"])
    server_group: list[str] = field(default_factory=lambda: ["layer", "row", "column"])
    strategy: list[str] = field(default_factory=lambda: ["oneshot", "iterative"])
    scaling: list[bool] = field(default_factory=lambda: [False, True])
    clients: list[int] = field(default_factory=lambda: [16])
    samples: list[int] = field(default_factory=lambda: [128])
    baselines: bool = True


@dataclass
class ExperimentSpec:
    seed: int = 0
    out: str | None = None
    corpus: CorpusParams = field(default_factory=CorpusParams)
    model: ModelParams = field(default_factory=ModelParams)
    grid: Grid = field(default_factory=Grid)
    ria_alpha: float = 0.5
    sparsegpt_lambda: str = "mean_diag"


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise SpecError(f"[{where}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise SpecError(f"[{where}] unknown keys: {sorted(unknown)}")
    return cls(**data)


def spec_from_dict(doc: dict) -> ExperimentSpec:
    doc = dict(doc)
    try:
        corpus = _build(CorpusParams, doc.pop("corpus", {}), "corpus")
        model = _build(ModelParams, doc.pop("model", {}), "model")
        grid = _build(Grid, doc.pop("grid", {}), "grid")
        spec = _build(ExperimentSpec, doc, "top level")
    except TypeError as exc:
        raise SpecError(str(exc)) from exc
    spec.corpus, spec.model, spec.grid = corpus, model, grid
    validate_spec(spec)
    return spec


def validate_spec(spec: ExperimentSpec) -> None:
    g = spec.grid
    for name in ("sparsity", "metric", "local_group", "server_group", "strategy", "scaling",
                 "clients", "samples"):
        if not isinstance(getattr(g, name), list):
            raise SpecError(f"grid.{name} must be a list")
    try:
        [Metric.parse(x) for x in g.metric]
        [ComparisonGroup.parse(x) for x in g.local_group + g.server_group]
        [Strategy.parse(x) for x in g.strategy]
    except InputDomainError as exc:
        raise SpecError(str(exc)) from exc
    if any(not 0 <= s <= 1 for s in g.sparsity):
        raise SpecError("grid.sparsity values must lie in [0, 1]")
    if any(not isinstance(b, bool) for b in g.scaling):
        raise SpecError("grid.scaling values must be booleans")
    if any(int(m) != m or m < 1 for m in g.clients):
        raise SpecError("grid.clients values must be positive integers")
    if any(int(n) != n or not 1 <= n <= spec.corpus.calibration for n in g.samples):
        raise SpecError(f"grid.samples values must lie in [1, {spec.corpus.calibration}]")
    c = spec.corpus
    if c.vocab < 2 or c.sample_len < 2 or min(c.train, c.calibration, c.heldout) < 1:
        raise SpecError("corpus needs vocab >= 2, sample_len >= 2 and non-empty splits")
    if len(spec.model.dims) < 2:
        raise SpecError("model.dims needs the embedding width plus at least one layer width")


def check_cells(spec: ExperimentSpec) -> None:
    """Every (clients, samples) pair of a plain grid run must be feasible."""
    for m in spec.grid.clients:
        for n in spec.grid.samples:
            if m > n:
                raise SpecError(f"grid pairs {m} clients with only {n} samples")


def load_spec(path: str | Path) -> ExperimentSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise SpecError(f"cannot read spec {path}: {exc}") from exc
    try:
        doc = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise SpecError(f"{path}: {exc}") from exc
    return spec_from_dict(doc)


def derive_seed(master: int, *parts) -> int:
    """Stable 63-bit seed from the master seed and the axes that feed the RNG."""
    key = json.dumps([master, *[str(p) for p in parts]]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


@dataclass
class Environment:
    corpus: Corpus
    dense: PrunableModel
    dense_perplexity: float


def build_environment(spec: ExperimentSpec) -> Environment:
    c = spec.corpus
    corpus = generate_corpus(
        c.vocab, c.train + c.calibration + c.heldout, c.sample_len, spec.seed,
        {"train": c.train, "calibration": c.calibration, "heldout": c.heldout},
        concentration=c.concentration, communities=c.communities, leak=c.leak,
    )
    dense = train_reference_model(corpus, spec.model.dims, spec.model.epochs, spec.seed, spec.model.lr)
    return Environment(corpus, dense, evaluation.perplexity(dense, corpus.split("heldout")))


def shards_for(env: Environment, spec: ExperimentSpec, samples: int, m: int) -> list[np.ndarray]:
    if m > samples:
        raise InputDomainError(f"{m} clients cannot share {samples} samples")
    pool = env.corpus.split("calibration")[:samples]
    return partition(pool, m, derive_seed(spec.seed, "partition", samples, m))


def _report(method: str, config: PruneConfig, model: PrunableModel, env: Environment,
            pooled: np.ndarray, samples: int, comm: CommLedger | None, t0: float) -> PruneReport:
    return PruneReport(
        method=method,
        config=config_dict(config),
        perplexity=evaluation.perplexity(model, env.corpus.split("heldout")),
        per_layer_recon_error=evaluation.layer_recon_errors(env.dense, model, pooled),
        realized_sparsity_per_layer=evaluation.realized_sparsity(model),
        comm=comm or CommLedger(),
        wall_time=time.perf_counter() - t0,
        samples=samples,
    )


def config_dict(config: PruneConfig) -> dict:
    d = asdict(config)
    for k in ("metric", "local_group", "server_group", "strategy"):
        d[k] = d[k].value
    return d


def run_baselines(env: Environment, spec: ExperimentSpec, config: PruneConfig,
                  samples: int) -> list[PruneReport]:
    shards = shards_for(env, spec, samples, config.clients)
    pooled = np.concatenate(shards)
    t0 = time.perf_counter()
    central = run_centralized(env.dense, pooled, config)
    reports = [_report("centralized", config, central.model, env, pooled, samples, None, t0)]

    t0 = time.perf_counter()
    local = run_local_only(env.dense, make_clients(shards), config)
    per_client = [_report("local_only", config, o.model, env, pooled, samples, None, t0) for o in local]
    ppl = np.array([r.perplexity for r in per_client])
    rec = np.array([r.per_layer_recon_error for r in per_client])
    summary = PruneReport(
        method="local_only",
        config=config_dict(config),
        perplexity=float(ppl.mean()),
        per_layer_recon_error=rec.mean(axis=0).tolist(),
        realized_sparsity_per_layer=per_client[0].realized_sparsity_per_layer,
        wall_time=time.perf_counter() - t0,
        samples=samples,
        extra={"perplexity_std": float(ppl.std()), "perplexity_min": float(ppl.min()),
               "perplexity_max": float(ppl.max()), "perplexity_per_client": ppl.tolist()},
    )
    reports.append(summary)
    return reports


def run_fed_cell(env: Environment, spec: ExperimentSpec, config: PruneConfig, samples: int) -> PruneReport:
    shards = shards_for(env, spec, samples, config.clients)
    pooled = np.concatenate(shards)
    t0 = time.perf_counter()
    out = run_fedprllm(env.dense, make_clients(shards), config, threads=1)
    return _report("fedprllm", config, out.model, env, pooled, samples, out.ledger, t0)


def grid_cells(spec: ExperimentSpec, overrides: dict[str, list] | None = None) -> list[tuple[str, PruneConfig, int]]:
    """Expand the grid into ``(method, config, samples)`` cells in report order."""
    g = spec.grid
    axes = {"sparsity": g.sparsity, "metric": g.metric, "local_group": g.local_group,
            "clients": g.clients, "samples": g.samples, **(overrides or {})}
    cells = []
    for s, metric, lg, m, n in itertools.product(axes["sparsity"], axes["metric"], axes["local_group"],
                                                  axes["clients"], axes["samples"]):
        def cfg(**kw):
            return PruneConfig(sparsity=s, metric=metric, local_group=lg, clients=m, seed=spec.seed,
                               ria_alpha=spec.ria_alpha, sparsegpt_lambda=spec.sparsegpt_lambda, **kw)
        if g.baselines:
            cells.append(("baselines", cfg(), n))
        for sg, strat, scal in itertools.product(g.server_group, g.strategy, g.scaling):
            cells.append(("fedprllm", cfg(server_group=sg, strategy=strat, scaling=scal), n))
    return cells


def describe_cell(cell) -> str:
    kind, c, samples = cell
    base = f"{kind} metric={c.metric.value} local={c.local_group.value} s={c.sparsity} m={c.clients} samples={samples}"
    if kind == "fedprllm":
        base += f" server={c.server_group.value} strategy={c.strategy.value} scaling={c.scaling}"
    return base


def run_cells(env: Environment, spec: ExperimentSpec, cells, threads: int | None = None) -> list[PruneReport]:
    def one(cell):
        kind, config, samples = cell
        try:
            if kind == "baselines":
                return run_baselines(env, spec, config, samples)
            return [run_fed_cell(env, spec, config, samples)]
        except NumericalError as exc:
            raise NumericalError(f"cell {describe_cell(cell)}: {exc}") from exc
    return [r for group in _map(one, cells, threads) for r in group]


def run_grid(spec: ExperimentSpec, env: Environment | None = None, threads: int | None = None) -> list[PruneReport]:
    env = env or build_environment(spec)
    return run_cells(env, spec, grid_cells(spec), threads)


def sweep_cells(spec: ExperimentSpec, axis: str, values: list[int]):
    """Cells for a sensitivity sweep plus warning rows for impossible values.

    ``clients``: fixed total samples (the first grid value), one value per m.
    ``samples``: total samples per value, with ``m = samples // 2``.
    """
    if axis not in ("clients", "samples"):
        raise SpecError(f"unknown sweep axis {axis!r}")
    cells, skipped = [], []
    for v in values:
        if axis == "clients":
            n, m = spec.grid.samples[0], v
        else:
            n, m = v, v // 2
        if m < 1 or m > n or n > spec.corpus.calibration:
            log.warning("sweep %s=%s skipped: %d clients, %d samples", axis, v, m, n)
            skipped.append({"method": "skipped", "m": m, "samples": n, "seed": spec.seed})
            continue
        cells.extend(grid_cells(spec, {"clients": [m], "samples": [n]}))
    return cells, skipped


def write_outputs(reports: list[PruneReport], out_dir: str | Path, stem: str = "results",
                  extra_rows: list[dict] | None = None, meta: dict | None = None) -> tuple[Path, Path]:
    out = Path(out_dir)
    if not out.is_dir():
        raise SpecError(f"output directory {out} does not exist")
    csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
    rows = [r.csv_row() for r in reports] + list(extra_rows or [])
    with open(csv_path, "w", newline="") as fh:
        evaluation.write_csv(rows, fh)
    archive = {"meta": meta or {}, "reports": [r.to_dict() for r in reports], "skipped": extra_rows or []}
    json_path.write_text(json.dumps(archive, indent=1, default=_jsonable))
    return csv_path, json_path


def _jsonable(obj: Any):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj)}")

