"""Federation engine: client partitioning, synchronous FedAvg rounds, and
the centralized baseline driver.

Every run derives all randomness from one root seed: split, init,
partition, and per-(round, client) training streams. The centralized
driver trains through the same code path and the same (round=1, client=0)
stream as a single federated client, so a 1-client 1-round federated run
is bit-identical to a centralized run with the same seed and epoch count.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import metrics, nn
from .errors import ValidationError
from .features import (FeatureConfig, SplitSpec, WindowDataset, featurize_traces,
                       fit_vocab, split_train_val)
from .traces import BENIGN, MALICIOUS, Trace

PARTITIONS = ("iid", "dirichlet", "fig1_iid", "fig1_noniid")

# Per-client class counts behind the 10-client preset partitions.
FIG1_IID_BENIGN = (65, 62, 66, 60, 61, 63, 59, 64, 67, 62)
FIG1_IID_MALICIOUS = (60, 63, 61, 65, 64, 62, 66, 61, 60, 64)
FIG1_NONIID_BENIGN = (40, 30, 122, 61, 45, 91, 153, 122, 34, 301)
FIG1_NONIID_MALICIOUS = (61, 71, 30, 40, 15, 112, 152, 81, 36, 158)

# Seed-derivation tags; every RNG in a run is default_rng(SeedSequence((root, tag, ...))).
_TAG_SPLIT = 1
_TAG_INIT = 2
_TAG_PARTITION = 3
_TAG_TRAIN = 4
_TAG_SELECT = 5


def derive_rng(root_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((root_seed,) + key))


def derive_int(root_seed: int, *key: int) -> int:
    return int(np.random.SeedSequence((root_seed,) + key).generate_state(1)[0])


@dataclass
class FedConfig:
    n_clients: int = 10
    rounds: int = 6
    local_epochs: int = 20
    partition: str = "iid"
    dirichlet_alpha: float = 0.5
    seed: int = 42
    early_stop_threshold: float = 0.90
    # Worker threads for local training; clients stay deterministic under
    # any value because aggregation order is fixed by client id. The
    # simulated budget of a couple of cores per client is documentation,
    # not an enforced limit.
    client_parallelism: int = 1
    # Fraction of clients the server selects each round; 1.0 = everyone.
    participation_fraction: float = 1.0

    def validate(self) -> list[str]:
        problems = []
        if self.n_clients < 1:
            problems.append(f"fed.n_clients: must be >= 1, got {self.n_clients}")
        if self.rounds < 1:
            problems.append(f"fed.rounds: must be >= 1, got {self.rounds}")
        if self.local_epochs < 1:
            problems.append(f"fed.local_epochs: must be >= 1, got {self.local_epochs}")
        if self.partition not in PARTITIONS:
            problems.append(
                f"fed.partition: must be one of {PARTITIONS}, got {self.partition!r}")
        if self.dirichlet_alpha <= 0:
            problems.append(f"fed.dirichlet_alpha: must be > 0, got {self.dirichlet_alpha}")
        if self.partition in ("fig1_iid", "fig1_noniid") and self.n_clients != 10:
            problems.append(
                f"fed.partition: {self.partition} requires n_clients == 10, got {self.n_clients}")
        if self.client_parallelism < 1:
            problems.append(
                f"fed.client_parallelism: must be >= 1, got {self.client_parallelism}")
        if not 0.0 < self.participation_fraction <= 1.0:
            problems.append(
                f"fed.participation_fraction: must be in (0, 1], got {self.participation_fraction}")
        return problems

    def check(self) -> None:
        problems = self.validate()
        if problems:
            raise ValidationError(problems)


@dataclass
class ClientUpdate:
    client_id: int
    weights: nn.ParamSet
    n_samples: int
    local_history: list[dict] = field(default_factory=list)


@dataclass
class RoundReport:
    round: int
    global_metrics: dict          # {"window": MetricSet, "trace": MetricSet} on validation
    per_client: list[tuple[int, int, float]]  # (client_id, n_samples, final local accuracy)
    wall_time: float
    train_accuracy_trace: float | None = None


# --- partitioners -------------------------------------------------------

def _split_by_label(traces: Sequence[Trace]) -> tuple[list[Trace], list[Trace]]:
    benign = [t for t in traces if t.label == BENIGN]
    malicious = [t for t in traces if t.label == MALICIOUS]
    return benign, malicious


def partition_iid(train_traces: Sequence[Trace], k: int, seed: int) -> list[list[Trace]]:
    """Stratified round-robin deal; per-class shard sizes differ by <= 1."""
    benign, malicious = _split_by_label(train_traces)
    for group, label in ((benign, BENIGN), (malicious, MALICIOUS)):
        if len(group) < k:
            raise ValidationError(
                f"partition_iid: class {label!r} has {len(group)} traces, need >= {k}")
    rng = np.random.default_rng(seed)
    shards: list[list[Trace]] = [[] for _ in range(k)]
    for group in (benign, malicious):
        order = rng.permutation(len(group))
        for pos, idx in enumerate(order):
            shards[pos % k].append(group[idx])
    return shards


def partition_noniid_dirichlet(train_traces: Sequence[Trace], k: int,
                               alpha: float, seed: int,
                               max_retries: int = 100) -> list[list[Trace]]:
    """Label-skew partition: per-class client proportions drawn from
    Dirichlet(alpha). Proportions are resampled (bounded retries) until
    every client holds at least one trace.
    """
    if len(train_traces) < k:
        raise ValidationError(
            f"partition_noniid_dirichlet: {len(train_traces)} traces for {k} clients")
    if alpha <= 0:
        raise ValidationError(f"partition_noniid_dirichlet: alpha must be > 0, got {alpha}")
    rng = np.random.default_rng(seed)
    groups = [g for g in _split_by_label(train_traces) if g]
    for _ in range(max_retries):
        shards: list[list[Trace]] = [[] for _ in range(k)]
        for group in groups:
            order = rng.permutation(len(group))
            proportions = rng.dirichlet(np.full(k, alpha))
            cuts = (np.cumsum(proportions) * len(group)).astype(int)[:-1]
            for shard, part in zip(shards, np.split(order, cuts)):
                shard.extend(group[i] for i in part)
        if all(shards):
            return shards
    raise ValidationError(
        f"partition_noniid_dirichlet: could not give every client data in "
        f"{max_retries} attempts (alpha={alpha}, k={k})")


def partition_preset_fig1(train_traces: Sequence[Trace], variant: str) -> list[list[Trace]]:
    """Fixed 10-client per-class counts; surplus traces stay unassigned.

    Assignment is deterministic: traces are taken in id order, so the same
    corpus always produces the same shards.
    """
    if variant == "iid":
        benign_counts, malicious_counts = FIG1_IID_BENIGN, FIG1_IID_MALICIOUS
    elif variant == "noniid":
        benign_counts, malicious_counts = FIG1_NONIID_BENIGN, FIG1_NONIID_MALICIOUS
    else:
        raise ValidationError(f"partition_preset_fig1: unknown variant {variant!r}")
    benign, malicious = _split_by_label(train_traces)
    benign.sort(key=lambda t: t.id)
    malicious.sort(key=lambda t: t.id)
    need_b, need_m = sum(benign_counts), sum(malicious_counts)
    if len(benign) < need_b or len(malicious) < need_m:
        raise ValidationError(
            f"partition_preset_fig1({variant}): needs >= {need_b} benign and "
            f">= {need_m} malicious traces, got {len(benign)}/{len(malicious)}")
    shards = []
    ob = om = 0
    for nb, nm in zip(benign_counts, malicious_counts):
        shards.append(benign[ob:ob + nb] + malicious[om:om + nm])
        ob += nb
        om += nm
    return shards


def _partition(train_traces: Sequence[Trace], cfg: FedConfig) -> list[list[Trace]]:
    seed = derive_int(cfg.seed, _TAG_PARTITION)
    if cfg.partition == "iid":
        return partition_iid(train_traces, cfg.n_clients, seed)
    if cfg.partition == "dirichlet":
        return partition_noniid_dirichlet(
            train_traces, cfg.n_clients, cfg.dirichlet_alpha, seed)
    if cfg.partition == "fig1_iid":
        return partition_preset_fig1(train_traces, "iid")
    if cfg.partition == "fig1_noniid":
        return partition_preset_fig1(train_traces, "noniid")
    raise ValidationError(f"unknown partition {cfg.partition!r}")


# --- aggregation --------------------------------------------------------

def fedavg_aggregate(updates: Sequence[ClientUpdate]) -> nn.ParamSet:
    """Sample-count weighted average, summed in ascending client id order
    with float64 accumulation.
    """
    if not updates:
        raise ValidationError("fedavg_aggregate: no updates")
    ordered = sorted(updates, key=lambda u: u.client_id)
    first = ordered[0].weights
    for u in ordered[1:]:
        if not first.same_schema(u.weights):
            raise ValidationError(
                f"fedavg_aggregate: client {u.client_id} weights have a different schema")
    for u in ordered:
        if u.n_samples < 1:
            raise ValidationError(
                f"fedavg_aggregate: client {u.client_id} reports n_samples={u.n_samples}")
    if len(ordered) == 1:
        return first.copy()
    if all(np.array_equal(u.weights.flat, first.flat) for u in ordered[1:]):
        return first.copy()  # exact idempotency on identical updates
    total = float(sum(u.n_samples for u in ordered))
    acc = np.zeros_like(first.flat)
    for u in ordered:
        acc += (u.n_samples / total) * u.weights.flat
    return nn.ParamSet(first.schema, acc)


# --- evaluation helpers ---------------------------------------------------

def evaluate_model(params: nn.ParamSet, cfg: nn.ModelConfig, data: WindowDataset,
                   threshold: float = 0.5) -> dict:
    """Window- and trace-level metric sets for one dataset."""
    probs = nn.predict_probs(params, cfg, data.x)
    window = metrics.evaluate(probs, data.y, threshold, level=metrics.WINDOW)
    trace_probs, trace_y = metrics.aggregate_trace_level(
        probs, data.trace_ids, data.trace_labels)
    trace = metrics.evaluate(trace_probs, trace_y, threshold, level=metrics.TRACE)
    return {"window": window, "trace": trace}


def _global_train_accuracy(params: nn.ParamSet, cfg: nn.ModelConfig,
                           client_data: Sequence[WindowDataset]) -> float:
    probs = np.concatenate([nn.predict_probs(params, cfg, d.x) for d in client_data])
    ids = np.concatenate([d.trace_ids for d in client_data])
    labels: dict[str, int] = {}
    for d in client_data:
        labels.update(d.trace_labels)
    trace_probs, trace_y = metrics.aggregate_trace_level(probs, ids, labels)
    return metrics.evaluate(trace_probs, trace_y, level=metrics.TRACE).accuracy


# --- pipeline assembly ----------------------------------------------------

@dataclass
class Prepared:
    """Split, fitted, and featurized inputs shared by both drivers."""

    model_cfg: nn.ModelConfig
    vocab: object
    train_traces: list[Trace]
    val_traces: list[Trace]
    val_data: WindowDataset


def prepare(corpus: Sequence[Trace], model_cfg: nn.ModelConfig, root_seed: int,
            split: SplitSpec | None = None,
            feat: FeatureConfig | None = None) -> tuple[Prepared, FeatureConfig]:
    feat = feat or FeatureConfig()
    problems = feat.validate() + model_cfg.validate()
    if problems:
        raise ValidationError(problems)
    if split is None:
        split = SplitSpec(seed=derive_int(root_seed, _TAG_SPLIT))
    train_traces, val_traces = split_train_val(corpus, split)
    vocab = fit_vocab(train_traces, feat.max_terms)
    model_cfg = replace(model_cfg, input_dim=vocab.size)
    val_data = featurize_traces(val_traces, vocab, feat.window, feat.stride)
    return Prepared(model_cfg, vocab, list(train_traces), list(val_traces), val_data), feat


def _train_client(client_id: int, data: WindowDataset, global_params: nn.ParamSet,
                  model_cfg: nn.ModelConfig, epochs: int, root_seed: int,
                  round_index: int, noise_sigma: float) -> ClientUpdate:
    """One client's local round: fresh optimizer state, weights received
    from the server, a per-(round, client) RNG stream.
    """
    params = global_params.copy()
    state = nn.OptimizerState(params)
    rng = derive_rng(root_seed, _TAG_TRAIN, round_index, client_id)
    params, state, history = nn.train_epochs(
        data, params, state, model_cfg, epochs, rng, noise_sigma=noise_sigma)
    return ClientUpdate(client_id=client_id, weights=params,
                        n_samples=len(data), local_history=history)


def run_federated(corpus: Sequence[Trace], fed_cfg: FedConfig,
                  model_cfg: nn.ModelConfig,
                  split: SplitSpec | None = None,
                  feat: FeatureConfig | None = None,
                  ) -> tuple[nn.ParamSet, list[RoundReport]]:
    """Synchronous FedAvg. Round 0 is the evaluation of the untrained
    global model; each later round broadcasts the global weights, trains
    every selected client locally, aggregates, and re-evaluates. Stops
    early when global train and validation trace accuracy both exceed the
    threshold.
    """
    fed_cfg.check()
    prepared, feat = prepare(corpus, model_cfg, fed_cfg.seed, split, feat)
    model_cfg = prepared.model_cfg

    shards = _partition(prepared.train_traces, fed_cfg)
    client_data = [featurize_traces(s, prepared.vocab, feat.window, feat.stride)
                   for s in shards]
    params = nn.init_params(model_cfg, np.random.SeedSequence((fed_cfg.seed, _TAG_INIT)))

    reports: list[RoundReport] = []
    t0 = time.perf_counter()
    reports.append(RoundReport(
        round=0,
        global_metrics=evaluate_model(params, model_cfg, prepared.val_data),
        per_client=[],
        wall_time=time.perf_counter() - t0,
    ))

    for round_index in range(1, fed_cfg.rounds + 1):
        t0 = time.perf_counter()
        selected = list(range(fed_cfg.n_clients))
        if fed_cfg.participation_fraction < 1.0:
            count = max(1, round(fed_cfg.participation_fraction * fed_cfg.n_clients))
            rng = derive_rng(fed_cfg.seed, _TAG_SELECT, round_index)
            selected = sorted(rng.choice(fed_cfg.n_clients, size=count, replace=False))

        def job(cid: int) -> ClientUpdate:
            return _train_client(cid, client_data[cid], params, model_cfg,
                                 fed_cfg.local_epochs, fed_cfg.seed, round_index,
                                 feat.noise_sigma)

        if fed_cfg.client_parallelism > 1:
            with ThreadPoolExecutor(max_workers=fed_cfg.client_parallelism) as pool:
                updates = list(pool.map(job, selected))
        else:
            updates = [job(cid) for cid in selected]

        params = fedavg_aggregate(updates)
        val_metrics = evaluate_model(params, model_cfg, prepared.val_data)
        train_acc = _global_train_accuracy(params, model_cfg, client_data)
        reports.append(RoundReport(
            round=round_index,
            global_metrics=val_metrics,
            per_client=[(u.client_id, u.n_samples,
                         u.local_history[-1]["accuracy"] if u.local_history else 0.0)
                        for u in sorted(updates, key=lambda u: u.client_id)],
            wall_time=time.perf_counter() - t0,
            train_accuracy_trace=train_acc,
        ))
        if (train_acc > fed_cfg.early_stop_threshold
                and val_metrics["trace"].accuracy > fed_cfg.early_stop_threshold):
            break
    return params, reports


def run_centralized(corpus: Sequence[Trace], model_cfg: nn.ModelConfig,
                    epochs: int = 20, seed: int = 42,
                    split: SplitSpec | None = None,
                    feat: FeatureConfig | None = None,
                    early_stop_threshold: float = 0.90,
                    ) -> tuple[nn.ParamSet, list[dict], dict]:
    """Centralized baseline on the full training split with early stopping.

    Uses the same preparation, initialization, and (round=1, client=0)
    training stream as a single-client federated run, so the two coincide
    exactly when federated early stopping cannot trigger mid-run.
    """
    prepared, feat = prepare(corpus, model_cfg, seed, split, feat)
    model_cfg = prepared.model_cfg
    train_data = featurize_traces(
        prepared.train_traces, prepared.vocab, feat.window, feat.stride)
    params = nn.init_params(model_cfg, np.random.SeedSequence((seed, _TAG_INIT)))
    state = nn.OptimizerState(params)
    rng = derive_rng(seed, _TAG_TRAIN, 1, 0)
    early = None
    if early_stop_threshold is not None and early_stop_threshold <= 1.0:
        early = nn.EarlyStop(early_stop_threshold, train_data, prepared.val_data)
    params, state, history = nn.train_epochs(
        train_data, params, state, model_cfg, epochs, rng,
        noise_sigma=feat.noise_sigma, early_stop=early)
    final = evaluate_model(params, model_cfg, prepared.val_data)
    return params, history, final
