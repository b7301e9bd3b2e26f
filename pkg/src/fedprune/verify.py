"""Acceptance checks shared by ``fedprune verify`` and the test suite.

Each check returns a :class:`CheckResult`; none of them raise on failure.
The brute-force oracles here are written in plain Python (``sorted`` over
``(key, index)`` pairs, ``Fraction`` for group sizes) so they share no code
path with the numpy engine they check.
"""
from __future__ import annotations

import itertools
import math
import os
import time
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Callable

import numpy as np

from . import evaluation, masking
from .datagen import partition
from .experiment import (ExperimentSpec, build_environment, grid_cells, run_cells, shards_for,
                         spec_from_dict)
from .federation import (PruneConfig, THREADS_ENV, expected_ledger, make_clients, run_centralized,
                         run_iterative, run_local_only, run_oneshot)
from .masking import ComparisonGroup
from .metrics import score_magnitude, score_wanda
from .model import LinearLayer, PrunableModel, init_model

GROUPS = list(ComparisonGroup)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


# --- oracles ---------------------------------------------------------------

def oracle_k(sparsity: float, n: int) -> int:
    return math.floor(Fraction(str(sparsity)) * n)


def oracle_select(keys, sparsity: float, group, largest: bool) -> list[list[int]]:
    """Exhaustive sort of every comparison group; ties go to the lower row-major index."""
    rows, cols = len(keys), len(keys[0])
    group = ComparisonGroup.parse(group)
    if group is ComparisonGroup.LAYER:
        groups = [[(r, c) for r in range(rows) for c in range(cols)]]
    elif group is ComparisonGroup.ROW:
        groups = [[(r, c) for c in range(cols)] for r in range(rows)]
    else:
        groups = [[(r, c) for r in range(rows)] for c in range(cols)]
    out = [[0] * cols for _ in range(rows)]
    for members in groups:
        k = oracle_k(sparsity, len(members))
        sign = -1 if largest else 1
        ranked = sorted(members, key=lambda rc: (sign * keys[rc[0]][rc[1]], rc[0] * cols + rc[1]))
        for r, c in ranked[:k]:
            out[r][c] = 1
    return out


def oracle_fed_mask(client_scores, sparsity, local_group, server_group) -> list[list[int]]:
    local = [oracle_select(s, sparsity, local_group, largest=False) for s in client_scores]
    rows, cols = len(local[0]), len(local[0][0])
    votes = [[sum(mk[r][c] for mk in local) for c in range(cols)] for r in range(rows)]
    return oracle_select(votes, sparsity, server_group, largest=True)


def oracle_wanda(W: np.ndarray, X: np.ndarray) -> list[list[float]]:
    rows, cols = W.shape
    norms = [math.sqrt(math.fsum(float(X[t, j]) ** 2 for t in range(X.shape[0]))) for j in range(cols)]
    return [[abs(float(W[i, j])) * norms[j] for j in range(cols)] for i in range(rows)]


def group_counts(mask: np.ndarray, group) -> list[int]:
    group = ComparisonGroup.parse(group)
    if group is ComparisonGroup.LAYER:
        return [int(mask.sum())]
    if group is ComparisonGroup.ROW:
        return mask.sum(axis=1).astype(int).tolist()
    return mask.sum(axis=0).astype(int).tolist()


def expected_counts(shape, sparsity, group) -> list[int]:
    rows, cols = shape
    group = ComparisonGroup.parse(group)
    if group is ComparisonGroup.LAYER:
        return [oracle_k(sparsity, rows * cols)]
    if group is ComparisonGroup.ROW:
        return [oracle_k(sparsity, cols)] * rows
    return [oracle_k(sparsity, rows)] * cols


# --- fixtures --------------------------------------------------------------

def random_setup(seed: int, dims, vocab: int = 12, m: int = 3, n_samples: int = 6, sample_len: int = 8,
                 nonlinearity: str = "relu"):
    rng = np.random.default_rng([seed, 99])
    model = init_model(dims, vocab, seed, nonlinearity)
    samples = rng.integers(0, vocab, size=(n_samples, sample_len))
    shards = partition(samples, m, seed)
    return model, samples, shards


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crashing check is a failing check
        ok, detail = False, f"raised {type(exc).__name__}: {exc}"
    return CheckResult(name, bool(ok), detail, time.perf_counter() - t0)


# --- criteria --------------------------------------------------------------

def check_oracle_equivalence(n_cases: int = 200, budget: float = 30.0) -> CheckResult:
    combos = list(itertools.product([1, 2, 3, 5], [0.25, 0.5, 0.75], GROUPS, GROUPS))

    def run():
        t0 = time.perf_counter()
        bad = []
        for i in range(n_cases):
            m, s, lg, sg = combos[i % len(combos)]
            rng = np.random.default_rng([7, i])
            rows, cols = (int(x) for x in rng.integers(1, 17, size=2))
            if i % 2 == 0:
                # integer scores force ties through the tie-break rule
                scores = [rng.integers(0, 4, size=(rows, cols)).astype(float) for _ in range(m)]
                local = [masking.mask_from_scores(sc, s, lg) for sc in scores]
                engine = masking.select_final_mask(masking.aggregate_masks(local), s, sg)
                expect = oracle_fed_mask([sc.tolist() for sc in scores], s, lg, sg)
            else:
                vocab = 8
                model = PrunableModel(rng.standard_normal((vocab, cols)),
                                      [LinearLayer(rng.standard_normal((rows, cols)), 0)],
                                      rng.standard_normal((rows, vocab)))
                shards = [rng.integers(0, vocab, size=(1, 6)) for _ in range(m)]
                strategy = "oneshot" if i % 4 == 1 else "iterative"
                cfg = PruneConfig(sparsity=s, metric="wanda", local_group=lg, server_group=sg,
                                  strategy=strategy, clients=m, seed=i)
                runner = run_oneshot if strategy == "oneshot" else run_iterative
                engine = runner(model, make_clients(shards), cfg).masks[0]
                W = model.layers[0].weights
                scores = [oracle_wanda(W, model.embedding[sh.ravel()]) for sh in shards]
                expect = oracle_fed_mask(scores, s, lg, sg)
            if engine.tolist() != expect:
                bad.append(i)
        elapsed = time.perf_counter() - t0
        return (not bad and elapsed < budget,
                f"{n_cases - len(bad)}/{n_cases} cases match the sort oracle; {elapsed:.1f}s (budget {budget:.0f}s)"
                + (f"; first mismatches {bad[:5]}" if bad else ""))

    return _timed("oracle_equivalence", run)


def check_sparsity_exactness() -> CheckResult:
    def run():
        checked, bad = 0, []
        for seed, s in itertools.product(range(3), [0.25, 0.5, 0.7]):
            model, _, shards = random_setup(seed, [6, 10, 7, 9], m=3)
            pooled = np.concatenate(shards)
            for lg in GROUPS:
                central = run_centralized(model, pooled, PruneConfig(sparsity=s, local_group=lg))
                for layer in central.model.layers:
                    checked += 1
                    if group_counts(layer.weights == 0, lg) != expected_counts(layer.weights.shape, s, lg):
                        bad.append(("centralized", seed, s, lg.value, layer.layer_index))
                for sg, strat, scal in itertools.product(GROUPS, ["oneshot", "iterative"], [False, True]):
                    cfg = PruneConfig(sparsity=s, local_group=lg, server_group=sg, strategy=strat,
                                      scaling=scal, clients=3, seed=seed)
                    runner = run_oneshot if strat == "oneshot" else run_iterative
                    out = runner(model, make_clients(shards), cfg)
                    for layer, final in zip(out.model.layers, out.masks):
                        checked += 1
                        shape = layer.weights.shape
                        # scaling zeroes retained weights that every client voted to prune,
                        # so the exact count is asserted on the final mask there
                        pruned = final if scal else (layer.weights == 0)
                        if group_counts(pruned, sg) != expected_counts(shape, s, sg):
                            bad.append((strat, scal, seed, s, lg.value, sg.value, layer.layer_index))
                        if not np.all(layer.weights[final.astype(bool)] == 0):
                            bad.append(("mask not applied", strat, layer.layer_index))
        return not bad, f"{checked - len(bad)}/{checked} layer checks exact" + (f"; e.g. {bad[:3]}" if bad else "")

    return _timed("sparsity_exactness", run)


def check_degenerate_client() -> CheckResult:
    def run():
        checked, bad = 0, []
        for seed, metric, g, strat in itertools.product(
                range(3), ["wanda", "magnitude", "ria", "sparsegpt_diag"], GROUPS, ["oneshot", "iterative"]):
            model, _, shards = random_setup(seed, [5, 8, 8, 6], m=1)
            cfg = PruneConfig(sparsity=0.5, metric=metric, local_group=g, server_group=g, strategy=strat,
                              clients=1, seed=seed)
            runner = run_oneshot if strat == "oneshot" else run_iterative
            fed = runner(model, make_clients(shards), cfg)
            central = run_centralized(model, shards[0], cfg)
            checked += 1
            same = all(np.array_equal(a.weights, b.weights) for a, b in zip(fed.model.layers, central.model.layers))
            if not same:
                bad.append((seed, metric, g.value, strat))
        return not bad, f"{checked - len(bad)}/{checked} m=1 runs bit-identical to Centralized" + \
            (f"; e.g. {bad[:3]}" if bad else "")

    return _timed("degenerate_client", run)


def check_fedavg_identity(tol: float = 1e-12) -> CheckResult:
    def run():
        worst = 0.0
        for seed, lg, sg in itertools.product(range(4), GROUPS, GROUPS):
            model, _, shards = random_setup(seed, [6, 9, 7, 8], m=5, n_samples=10)
            cfg = PruneConfig(sparsity=0.5, local_group=lg, server_group=sg, scaling=True, clients=5, seed=seed)
            out = run_oneshot(model, make_clients(shards), cfg)
            for l, layer in enumerate(out.model.layers):
                W = model.layers[l].weights
                avg = sum(W * (1 - cm[l]) for cm in out.client_masks) / len(out.client_masks)
                expect = avg * (1 - out.masks[l])
                scale = max(np.abs(expect).max(), np.abs(W).max())
                worst = max(worst, float(np.abs(layer.weights - expect).max() / scale))
        return worst <= tol, f"max relative deviation from FedAvg of local models {worst:.2e} (tol {tol:.0e})"

    return _timed("fedavg_identity", run)


def check_wanda_column_degeneration() -> CheckResult:
    def run():
        checked, bad = 0, []
        for i in range(50):
            rng = np.random.default_rng([11, i])
            rows, cols = (int(x) for x in rng.integers(1, 17, size=2))
            W = rng.standard_normal((rows, cols))
            X = rng.standard_normal((int(rng.integers(1, 20)), cols))
            norms = np.sqrt((X ** 2).sum(axis=0))
            if not np.all(norms > 0):
                continue
            for s in (0.25, 0.5, 0.75):
                checked += 1
                a = masking.mask_from_scores(score_wanda(W, norms), s, "column")
                b = masking.mask_from_scores(score_magnitude(W), s, "column")
                if not np.array_equal(a, b):
                    bad.append(("direct", i, s))
        for seed in range(4):
            # identity activations keep every feature norm strictly positive
            model, _, shards = random_setup(seed, [6, 10, 8, 7], m=4, n_samples=8, nonlinearity="identity")
            pooled = np.concatenate(shards)
            for sg in GROUPS:
                runs = {}
                for metric in ("wanda", "magnitude"):
                    cfg = PruneConfig(sparsity=0.5, metric=metric, local_group="column", server_group=sg,
                                      clients=4, seed=seed)
                    runs[metric] = (run_oneshot(model, make_clients(shards), cfg).masks,
                                    run_centralized(model, pooled, cfg).masks,
                                    [o.masks for o in run_local_only(model, make_clients(shards), cfg)])
                checked += 1
                w, mg = runs["wanda"], runs["magnitude"]
                same = all(np.array_equal(a, b) for a, b in zip(w[0], mg[0])) and \
                    all(np.array_equal(a, b) for a, b in zip(w[1], mg[1])) and \
                    all(np.array_equal(a, b) for la, lb in zip(w[2], mg[2]) for a, b in zip(la, lb))
                if not same:
                    bad.append(("pipeline", seed, sg.value))
        return not bad, f"{checked - len(bad)}/{checked} Wanda-column masks equal magnitude-column masks" + \
            (f"; e.g. {bad[:3]}" if bad else "")

    return _timed("wanda_column_degeneration", run)


def check_oneshot_iterative_coincidence() -> CheckResult:
    def run():
        checked, bad = 0, []
        for seed, lg, sg, scal in itertools.product(range(2), GROUPS, GROUPS, [False, True]):
            model, _, shards = random_setup(seed, [7, 9], m=3)
            kw = dict(sparsity=0.5, local_group=lg, server_group=sg, scaling=scal, clients=3, seed=seed)
            a = run_oneshot(model, make_clients(shards), PruneConfig(**kw, strategy="oneshot"))
            b = run_iterative(model, make_clients(shards), PruneConfig(**kw, strategy="iterative"))
            checked += 1
            if not (np.array_equal(a.masks[0], b.masks[0])
                    and np.array_equal(a.model.layers[0].weights, b.model.layers[0].weights)):
                bad.append(("L=1", seed, lg.value, sg.value, scal))
        for seed, g, scal in itertools.product(range(3), GROUPS, [False, True]):
            model, samples, _ = random_setup(seed, [6, 10, 8, 7], m=1)
            shards = [samples.copy() for _ in range(4)]
            kw = dict(sparsity=0.5, local_group=g, server_group=g, scaling=scal, clients=4, seed=seed)
            a = run_oneshot(model, make_clients(shards), PruneConfig(**kw, strategy="oneshot"))
            b = run_iterative(model, make_clients(shards), PruneConfig(**kw, strategy="iterative"))
            c = run_centralized(model, samples, PruneConfig(**kw))
            checked += 1
            if not all(np.array_equal(x, y) and np.array_equal(x, z) for x, y, z in zip(a.masks, b.masks, c.masks)):
                bad.append(("identical shards", seed, g.value, scal))
        return not bad, f"{checked - len(bad)}/{checked} configurations give identical one-shot/iterative masks" + \
            (f"; e.g. {bad[:3]}" if bad else "")

    return _timed("oneshot_iterative_coincidence", run)


def check_comm_accounting() -> CheckResult:
    def run():
        checked, bad = 0, []
        hdr = masking.FRAME_HEADER.size
        for m, dims, strat, scal in itertools.product([1, 2, 3, 5, 16], [[4, 4, 4], [5, 7], [3, 9, 2, 6]],
                                                        ["oneshot", "iterative"], [False, True]):
            model, _, shards = random_setup(m, dims, m=m, n_samples=max(m, 4))
            cfg = PruneConfig(sparsity=0.5, strategy=strat, scaling=scal, clients=m)
            runner = run_oneshot if strat == "oneshot" else run_iterative
            led = runner(model, make_clients(shards), cfg).ledger
            shapes = [l.weights.shape for l in model.layers]
            exp = expected_ledger(shapes, m, strat, scal)
            up_bytes = m * sum(hdr + masking.packed_size(r, c) for r, c in shapes)
            down_bytes = 0
            if strat == "iterative":
                down_bytes = up_bytes
                if scal:
                    w = masking.vote_width(m)
                    down_bytes += m * sum(hdr + masking.packed_size(r, c, w) for r, c in shapes)
            checked += 1
            got = (led.uplink_bits, led.downlink_bits, led.rounds, led.uplink_bytes, led.downlink_bytes)
            want = (exp.uplink_bits, exp.downlink_bits, exp.rounds, up_bytes, down_bytes)
            if got != want:
                bad.append((m, dims, strat, scal, got, want))
        # closed-form example: L=2, m=3, 4x4 layers
        model, _, shards = random_setup(0, [4, 4, 4], m=3)
        led = run_iterative(model, make_clients(shards), PruneConfig(strategy="iterative", clients=3)).ledger
        checked += 1
        if (led.uplink_bits, led.downlink_bits, led.rounds) != (96, 96, 2):
            bad.append(("worked example", led))
        return not bad, f"{checked - len(bad)}/{checked} ledgers match the closed forms" + \
            (f"; e.g. {bad[:2]}" if bad else "")

    return _timed("comm_accounting", run)


TAKEAWAY_SEEDS = tuple(range(9))


@lru_cache(maxsize=1)
def takeaway_runs(seeds: tuple[int, ...] = TAKEAWAY_SEEDS) -> tuple[list[dict], float]:
    """Per-seed numbers behind the directional checks (computed once, then shared)."""
    t0 = time.perf_counter()
    rows = []
    for seed in seeds:
        spec = ExperimentSpec(seed=seed)
        env = build_environment(spec)
        shards = shards_for(env, spec, 128, 16)
        pooled = np.concatenate(shards)
        held = env.corpus.split("heldout")

        def fed(**kw):
            cfg = PruneConfig(**{**dict(sparsity=0.5, metric="wanda", local_group="row", server_group="layer",
                                        clients=16, seed=seed), **kw})
            runner = run_oneshot if cfg.strategy.value == "oneshot" else run_iterative
            return runner(env.dense, make_clients(shards), cfg).model

        base = PruneConfig(sparsity=0.5, metric="wanda", local_group="row", clients=16, seed=seed)
        oneshot = fed()
        rows.append({
            "seed": seed,
            "dense": env.dense_perplexity,
            "centralized": evaluation.perplexity(run_centralized(env.dense, pooled, base).model, held),
            "local_only": float(np.mean([evaluation.perplexity(o.model, held)
                                         for o in run_local_only(env.dense, make_clients(shards), base)])),
            "oneshot": evaluation.perplexity(oneshot, held),
            "scaling": evaluation.perplexity(fed(scaling=True), held),
            "iterative": evaluation.perplexity(fed(strategy="iterative"), held),
            "recon_layer": float(np.mean(evaluation.layer_recon_errors(env.dense, oneshot, pooled))),
            "recon_column": float(np.mean(evaluation.layer_recon_errors(env.dense, fed(server_group="column"),
                                                                        pooled))),
        })
    return rows, time.perf_counter() - t0


def _takeaway(name: str, pred: Callable[[dict], bool], what: str, need: int = 6, budget: float = 300.0):
    def run():
        rows, elapsed = takeaway_runs()
        hits = [r["seed"] for r in rows if pred(r)]
        ok = len(hits) >= need and elapsed < budget
        return ok, f"{what}: {len(hits)}/{len(rows)} seeds (need {need}); shared runtime {elapsed:.1f}s"
    return _timed(name, run)


def check_takeaway_ordering() -> CheckResult:
    res = _takeaway("takeaway_a_ordering",
                    lambda r: r["centralized"] <= r["oneshot"] <= r["local_only"],
                    "Centralized <= FedPrLLM(layer, one-shot) <= mean Local-only")
    rows, _ = takeaway_runs()
    med = {k: float(np.median([r[k] for r in rows])) for k in ("centralized", "oneshot", "local_only")}
    halves = (sum(r["centralized"] <= r["oneshot"] for r in rows), sum(r["oneshot"] <= r["local_only"] for r in rows))
    res.detail += (f" [Centralized<=FedPrLLM {halves[0]}/{len(rows)}, FedPrLLM<=Local-only {halves[1]}/{len(rows)};"
                   f" medians over seeds {med['centralized']:.4f} / {med['oneshot']:.4f} / {med['local_only']:.4f}]")
    return res


def check_takeaway_scaling() -> CheckResult:
    return _takeaway("takeaway_b_no_scaling", lambda r: r["oneshot"] <= r["scaling"],
                     "no-scaling perplexity <= scaling perplexity")


def check_takeaway_iterative() -> CheckResult:
    return _takeaway("takeaway_c_iterative",
                     lambda r: abs(r["oneshot"] - r["iterative"]) <= 0.05 * r["oneshot"],
                     "|one-shot - iterative| <= 5% relative")


def check_takeaway_conflict() -> CheckResult:
    return _takeaway("takeaway_d_group_conflict", lambda r: r["recon_column"] > r["recon_layer"],
                     "local row + server column recon error > server layer")


SMALL_SPEC = {
    "seed": 3,
    "corpus": {"vocab": 12, "sample_len": 10, "train": 16, "calibration": 12, "heldout": 6,
               "communities": 3},
    "model": {"dims": [6, 10, 8], "epochs": 50, "lr": 0.5},
    "grid": {"sparsity": [0.5], "metric": ["wanda", "ria"], "local_group": ["row"],
             "server_group": ["layer", "column"], "strategy": ["oneshot", "iterative"],
             "scaling": [False, True], "clients": [3], "samples": [12]},
}


def _strip_wall_time(csv: str) -> list[str]:
    lines = csv.splitlines()
    return [",".join(line.split(",")[:-1]) for line in lines]


def check_determinism() -> CheckResult:
    def run():
        spec = spec_from_dict(SMALL_SPEC)
        results = []
        old = os.environ.get(THREADS_ENV)
        try:
            for threads in (1, 1, 3):
                os.environ[THREADS_ENV] = str(threads)
                env = build_environment(spec)
                reports = run_cells(env, spec, grid_cells(spec), threads=threads)
                model_bytes = [l.weights.tobytes() for l in env.dense.layers]
                results.append((_strip_wall_time(evaluation.csv_text(r.csv_row() for r in reports)), model_bytes))
        finally:
            if old is None:
                os.environ.pop(THREADS_ENV, None)
            else:
                os.environ[THREADS_ENV] = old
        csv_same = all(r[0] == results[0][0] for r in results)
        models_same = all(r[1] == results[0][1] for r in results)
        masks = []
        model, _, shards = random_setup(5, [6, 10, 8, 7], m=4, n_samples=8)
        for threads in (1, 4):
            for runner, strat in ((run_oneshot, "oneshot"), (run_iterative, "iterative")):
                out = runner(model, make_clients(shards), PruneConfig(strategy=strat, scaling=True, clients=4),
                             threads=threads)
                masks.append((strat, [mk.tobytes() for mk in out.masks], [l.weights.tobytes() for l in out.model.layers]))
        masks_same = masks[:2] == masks[2:]
        ok = csv_same and models_same and masks_same
        return ok, (f"CSV rows identical across 3 runs (threads 1,1,3): {csv_same}; trained models: {models_same}; "
                    f"masks/models across thread counts: {masks_same}; {len(results[0][0]) - 1} rows")

    return _timed("determinism", run)


def check_wire_roundtrip(n_cases: int = 1000) -> CheckResult:
    def run():
        rng = np.random.default_rng(2024)
        bad = []
        for i in range(n_cases):
            rows, cols = (int(x) for x in rng.integers(1, 41, size=2))
            mask = (rng.random((rows, cols)) < rng.random()).astype(np.uint8)
            layer, cid = int(rng.integers(0, 2**32)), int(rng.integers(0, 2**32))
            frame = masking.encode_mask_frame(mask, layer, cid)
            got_layer, got_cid, back = masking.decode_mask_frame(frame)
            size_ok = len(frame) == math.ceil(rows * cols / 8) + 16
            if not (size_ok and got_layer == layer and got_cid == cid and np.array_equal(back, mask)):
                bad.append(i)
        return not bad, f"{n_cases - len(bad)}/{n_cases} frames round-trip with size ceil(rc/8)+16"

    return _timed("wire_roundtrip", run)


CHECKS: list[tuple[str, Callable[[], CheckResult]]] = [
    ("oracle_equivalence", check_oracle_equivalence),
    ("sparsity_exactness", check_sparsity_exactness),
    ("degenerate_client", check_degenerate_client),
    ("fedavg_identity", check_fedavg_identity),
    ("wanda_column_degeneration", check_wanda_column_degeneration),
    ("oneshot_iterative_coincidence", check_oneshot_iterative_coincidence),
    ("comm_accounting", check_comm_accounting),
    ("takeaway_a_ordering", check_takeaway_ordering),
    ("takeaway_b_no_scaling", check_takeaway_scaling),
    ("takeaway_c_iterative", check_takeaway_iterative),
    ("takeaway_d_group_conflict", check_takeaway_conflict),
    ("determinism", check_determinism),
    ("wire_roundtrip", check_wire_roundtrip),
]


def run_checks(name_filter: str | None = None, echo: Callable[[str], None] | None = print) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS:
        if name_filter and name_filter not in name:
            continue
        res = fn()
        results.append(res)
        if echo:
            echo(f"[{'PASS' if res.passed else 'FAIL'}] {res.name} ({res.seconds:.1f}s): {res.detail}")
    return results
