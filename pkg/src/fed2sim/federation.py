"""Federated rounds: local SGD, FedAvg, feature-paired averaging, per-round metrics."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .architecture import GroupAssignment, ModelSpec, instantiate
from .data import Dataset, Partition, make_probe
from .features import agreement_from_preferences, alignment_from_preferences, preference_matrices
from .nn.model import Model, accuracy, backward, forward, sgd_step
from .permutation import conflict_from_preferences
from .rng import RngStream

log = logging.getLogger(__name__)

BYTES_PER_PARAM = 8


class AggregationError(ValueError):
    pass


@dataclass
class FederationConfig:
    clients: int = 10
    rounds: int = 30
    local_epochs: int = 1
    lr: float = 0.05
    batch_size: int = 32
    aggregation: str = "fed2"
    seed: int = 0
    analysis_every: int = 1       # preference-based metrics every k rounds (final round always)
    probe_batches: int = 4
    probe_batch_size: int = 32
    signed: bool = True

    def __post_init__(self):
        if self.clients < 1 or self.rounds < 1 or self.local_epochs < 1:
            raise ValueError("clients, rounds and local_epochs must all be >= 1")
        if self.aggregation not in ("fedavg", "fed2"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")


@dataclass
class RoundMetrics:
    round: int
    accuracy: float
    client_accuracy: list[float]
    alignment_distance: float | None
    conflict: float | None
    agreement: float | None
    comm_bytes: int

    CSV_FIELDS = ("round", "accuracy", "client_accuracy", "alignment_distance", "conflict",
                  "agreement", "comm_bytes")

    def row(self) -> dict:
        d = asdict(self)
        d["client_accuracy"] = ";".join(repr(a) for a in self.client_accuracy)
        for k in ("accuracy", "alignment_distance", "conflict", "agreement"):
            d[k] = "" if d[k] is None else repr(float(d[k]))
        return d


def write_metrics_csv(path, metrics: list[RoundMetrics]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=RoundMetrics.CSV_FIELDS)
        w.writeheader()
        for m in metrics:
            w.writerow(m.row())


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
        missing = set(RoundMetrics.CSV_FIELDS) - set(rows[0].keys() if rows else ())
    if not rows:
        raise ValueError(f"{path}: no metric rows")
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    return rows


def local_train(model: Model, shard: Dataset, epochs: int, lr: float, batch_size: int, rng) -> Model:
    """``epochs`` shuffled passes of mini-batch SGD on a copy of ``model``."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if len(shard) == 0:
        raise ValueError("empty shard")
    gen = rngmod.as_generator(rng)
    m = model.copy()
    for _ in range(epochs):
        order = gen.permutation(len(shard))
        for s in range(0, len(order), batch_size):
            b = order[s:s + batch_size]
            _, cache = forward(m, shard.x[b])
            sgd_step(m, backward(m, cache, shard.y[b]), lr)
    return m


def _anchored_mean(arrays: list[np.ndarray]) -> np.ndarray:
    # w0 + sum(w_n - w0) / N: equals the plain mean in exact arithmetic and returns
    # w0 bitwise when every input is identical
    base = arrays[0]
    acc = np.zeros_like(base)
    for a in arrays[1:]:
        acc += a - base
    return base + acc / len(arrays)


def _check_same(clients: list[Model]):
    if not clients:
        raise AggregationError("no clients to aggregate")
    ref = clients[0]
    for n, m in enumerate(clients[1:], 1):
        if not ref.same_structure(m):
            raise AggregationError(f"client {n} does not share client 0's parameter structure")


def fedavg_aggregate(clients: list[Model]) -> Model:
    """Coordinate-wise uniform average in ascending client order."""
    _check_same(clients)
    states = [m.state() for m in clients]
    new = clients[0].copy()
    new.load_state({k: _anchored_mean([s[k] for s in states]) for k in states[0]})
    return new


def fed2_aggregate(clients: list[Model], assignment: GroupAssignment, prev_global: Model) -> Model:
    """Average shared tensors over all clients and group-g tensors over paired clients only.

    A client contributes to group g iff g is present on it and its class set for g
    equals the server-issued one. Groups nobody contributes to keep ``prev_global``.
    """
    _check_same(clients + [prev_global])
    if len(assignment.presence) != len(clients):
        raise AggregationError(f"presence mask covers {len(assignment.presence)} clients, got {len(clients)}")
    for n, m in enumerate(clients):
        if m.assignment is not None and m.assignment.mapping != assignment.mapping:
            raise AggregationError(f"client {n} has a class-to-group map inconsistent with the server's")
    states = [m.state() for m in clients]
    groups = prev_global.groups()
    prev = prev_global.state()
    new_state = {}
    for k, g in groups.items():
        if g is None:
            contrib = list(range(len(clients)))
        else:
            contrib = [n for n in range(len(clients)) if assignment.presence[n][g]]
        if contrib:
            new_state[k] = _anchored_mean([states[n][k] for n in contrib])
        else:
            new_state[k] = prev[k].copy()
    new = prev_global.copy()
    new.load_state(new_state)
    return new


def exchanged_params(model: Model, present: tuple[bool, ...] | None) -> int:
    """Parameters a client exchanges in one direction: shared tensors plus its present groups."""
    total = 0
    for _, arr, g in model.parameters():
        if g is None or present is None or present[g]:
            total += arr.size
    return total


def round_bytes(model: Model, aggregation: str, assignment: GroupAssignment | None, clients) -> int:
    """Upload plus download bytes for one round (float64 payloads).

    ``clients`` is a client count or the list of participating client indices.
    """
    idx = list(range(clients)) if isinstance(clients, int) else list(clients)
    if aggregation == "fedavg" or assignment is None:
        return 2 * BYTES_PER_PARAM * model.param_count() * len(idx)
    return sum(2 * BYTES_PER_PARAM * exchanged_params(model, assignment.presence[n]) for n in idx)


def attach_cost_tracking(metrics: list[RoundMetrics], model: Model, aggregation: str,
                         assignment: GroupAssignment | None, clients) -> list[int]:
    """Cumulative bytes after each round of ``metrics``."""
    per = round_bytes(model, aggregation, assignment, clients)
    return [per * (i + 1) for i in range(len(metrics))]


@dataclass
class FederationResult:
    metrics: list[RoundMetrics]
    global_model: Model
    client_models: list[Model]
    assignment: GroupAssignment | None
    warnings: list[str] = field(default_factory=list)
    preferences: list[list[np.ndarray]] | None = None


def run_federation(cfg: FederationConfig, spec: ModelSpec, train: Dataset, partition: Partition,
                   test: Dataset, probe=None) -> FederationResult:
    if partition.num_clients != cfg.clients:
        raise ValueError(f"partition has {partition.num_clients} clients, config expects {cfg.clients}")
    root = RngStream(cfg.seed)
    global_model = instantiate(spec, root.child(rngmod.INIT))
    assignment = global_model.assignment
    shards = [partition.shard(train, n) for n in range(cfg.clients)]
    if assignment is not None:
        assignment = assignment.with_presence([np.unique(s.y) for s in shards])
    if probe is None:
        probe = make_probe(test, cfg.probe_batches, cfg.probe_batch_size, root.child(rngmod.PROBE))
    warnings = [f"client {n} has an empty shard and is skipped" for n, s in enumerate(shards) if len(s) == 0]
    for w in warnings:
        log.warning(w)
    active = [n for n, s in enumerate(shards) if len(s)]
    per_round = round_bytes(global_model, cfg.aggregation, assignment, active)
    metrics: list[RoundMetrics] = []
    clients: list[Model] = []
    prefs = None
    for r in range(cfg.rounds):
        snapshot = global_model
        clients = [local_train(snapshot, shards[n], cfg.local_epochs, cfg.lr, cfg.batch_size,
                               root.child(rngmod.TRAIN, r, n)) for n in active]
        if cfg.aggregation == "fedavg" or assignment is None:
            global_model = fedavg_aggregate(clients)
        else:
            sub = GroupAssignment(assignment.mapping, assignment.num_groups,
                                  tuple(assignment.presence[n] for n in active))
            global_model = fed2_aggregate(clients, sub, snapshot)
        analyse = (r + 1) % cfg.analysis_every == 0 or r == cfg.rounds - 1
        align = conflict = agree = None
        if analyse:
            prefs = [preference_matrices(m, probe) for m in clients]
            align = alignment_from_preferences(prefs)
            conflict = conflict_from_preferences(prefs, cfg.signed).overall
            agree = agreement_from_preferences(prefs, cfg.signed)
        metrics.append(RoundMetrics(
            round=r + 1,
            accuracy=accuracy(global_model, test.x, test.y),
            client_accuracy=[accuracy(m, test.x, test.y) for m in clients],
            alignment_distance=align,
            conflict=conflict,
            agreement=agree,
            comm_bytes=per_round * (r + 1),
        ))
        log.info("round %d acc %.4f", r + 1, metrics[-1].accuracy)
    return FederationResult(metrics, global_model, clients, assignment, warnings, prefs)
