"""Federated averaging over zone clients, adaptive local fine-tuning, and individual training.

Every client trains from the round-start global weights (parallel FedAvg), with a
fresh optimizer per training call and a seed derived from (seed, zone, round), so the
outcome does not depend on client order or on running clients in threads.
"""
from __future__ import annotations

import csv
import enum
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import ClientDataset, stack_samples
from .grid import ZoneId
from .nn import ModelWeights, TrainResult, train

_LOCAL_PHASE = -1  # round key shared by adapFL fine-tuning and individual training


class Regime(enum.Enum):
    INDIVIDUAL = "IL"
    FEDERATED = "FL"
    ADAPFL = "adapFL"

    @classmethod
    def parse(cls, text: str) -> "Regime":
        for r in cls:
            if text.strip().lower() in (r.value.lower(), r.name.lower()):
                return r
        raise ValueError(f"unknown regime {text!r}")


@dataclass(frozen=True)
class Schedule:
    regime: Regime
    n_rounds: int = 0
    epochs_per_round: int = 10
    local_epochs: int = 0
    individual_epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    learning_rate: float = 1e-3

    def __post_init__(self):
        for name in ("n_rounds", "epochs_per_round", "local_epochs", "individual_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.regime is Regime.FEDERATED and self.local_epochs != 0:
            raise ValueError("a federated schedule has no local epochs; use the adapFL regime")

    @classmethod
    def individual(cls, epochs: int = 100, **kw) -> "Schedule":
        return cls(Regime.INDIVIDUAL, individual_epochs=epochs, **kw)

    @classmethod
    def federated(cls, n_rounds: int = 10, epochs_per_round: int = 10, **kw) -> "Schedule":
        return cls(Regime.FEDERATED, n_rounds, epochs_per_round, 0, n_rounds * epochs_per_round, **kw)

    @classmethod
    def adaptive(cls, n_rounds: int = 9, epochs_per_round: int = 10, local_epochs: int = 10, **kw) -> "Schedule":
        return cls(Regime.ADAPFL, n_rounds, epochs_per_round, local_epochs,
                   n_rounds * epochs_per_round + local_epochs, **kw)


def budget_ok(individual_epochs: int, n_rounds: int, epochs_per_round: int, local_epochs: int) -> bool:
    return individual_epochs == n_rounds * epochs_per_round + local_epochs


def check_budget(schedule: Schedule) -> bool:
    """True when the schedule spends exactly the individual-training epoch budget."""
    return budget_ok(schedule.individual_epochs, schedule.n_rounds, schedule.epochs_per_round,
                     schedule.local_epochs)


@dataclass
class Client:
    zone: ZoneId
    dataset: ClientDataset
    _arrays: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def n_train(self) -> int:
        return len(self.dataset.train)

    def train_arrays(self):
        if self._arrays is None:
            if not self.dataset.train:
                raise ValueError(f"client {self.zone.value} has no training samples")
            self._arrays = stack_samples(self.dataset.train)
        return self._arrays


def client_seed(seed: int, zone: ZoneId, round_index: int) -> int:
    zone_index = list(ZoneId).index(zone)
    key = [seed, zone_index, round_index + 1]  # SeedSequence entropy must be non-negative
    return int(np.random.SeedSequence(key).generate_state(1, np.uint64)[0])


def aggregate(weight_sets, sizes) -> ModelWeights:
    """Size-weighted mean, parameter by parameter.

    Contributions are formed in float64 and sorted per parameter before summation,
    which makes the result bitwise independent of client order.
    """
    weight_sets, sizes = list(weight_sets), list(sizes)
    if not weight_sets:
        raise ValueError("nothing to aggregate")
    if len(weight_sets) != len(sizes):
        raise ValueError("one size per weight set is required")
    if any(s <= 0 for s in sizes):
        raise ValueError("client sizes must be positive")
    total = sum(sizes)
    if total <= 0:
        raise ValueError("zero total size")
    ref = weight_sets[0]
    for w in weight_sets[1:]:
        if not ref.same_architecture(w):
            raise ValueError("weight sets differ in architecture")
    fractions = [s / total for s in sizes]
    out = []
    for per_client in zip(*(w.arrays() for w in weight_sets)):
        contrib = np.stack([f * a.astype(np.float64) for f, a in zip(fractions, per_client)])
        contrib.sort(axis=0)
        acc = contrib[0].copy()
        for row in contrib[1:]:
            acc += row
        out.append(acc.astype(per_client[0].dtype))
    return ModelWeights.from_arrays(out)


@dataclass(frozen=True)
class RoundRecord:
    round: int
    zone: ZoneId
    train_mse: float
    weight_norm: float


ROUND_LOG_HEADER = ("round", "zone", "train_mse", "weight_norm")


def write_round_log(records, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROUND_LOG_HEADER)
    for r in records:
        w.writerow([r.round, r.zone.value, repr(r.train_mse), repr(r.weight_norm)])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def read_round_log(path) -> list[RoundRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != ROUND_LOG_HEADER:
            raise ValueError(f"{path}: unexpected round log header {reader.fieldnames}")
        return [RoundRecord(int(r["round"]), ZoneId(r["zone"]), float(r["train_mse"]), float(r["weight_norm"]))
                for r in reader]


def _train_client(client: Client, start: ModelWeights, epochs: int, schedule: Schedule, round_index: int) -> TrainResult:
    x, y = client.train_arrays()
    return train(start, x, y, epochs, schedule.batch_size, client_seed(schedule.seed, client.zone, round_index),
                 schedule.learning_rate)


def _map_clients(fn, clients, workers: int):
    if workers > 1 and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, clients))
    return [fn(c) for c in clients]


def _check_clients(clients) -> list[Client]:
    clients = list(clients)
    if not clients:
        raise ValueError("no clients")
    for c in clients:
        if c.n_train == 0:
            raise ValueError(f"client {c.zone.value} has an empty training set")
    if len({c.zone for c in clients}) != len(clients):
        raise ValueError("client zones must be distinct")
    return clients


def run_federated(clients, init: ModelWeights, schedule: Schedule, workers: int = 1, on_round=None):
    """FedAvg for ``schedule.n_rounds`` rounds of ``epochs_per_round`` local epochs.

    Returns the final global weights and the per-round, per-client log.
    ``on_round(round_index, global_weights)`` is called after each aggregation.
    """
    if schedule.regime is Regime.INDIVIDUAL:
        raise ValueError("run_federated needs a federated or adapFL schedule")
    clients = _check_clients(clients)
    sizes = [c.n_train for c in clients]
    global_w = init
    log: list[RoundRecord] = []
    for r in range(schedule.n_rounds):
        results = _map_clients(
            lambda c, start=global_w, r=r: _train_client(c, start, schedule.epochs_per_round, schedule, r),
            clients, workers)
        global_w = aggregate([res.weights for res in results], sizes)
        norm = float(np.linalg.norm(global_w.flat().astype(np.float64)))
        log += [RoundRecord(r + 1, c.zone, res.final_loss, norm) for c, res in zip(clients, results)]
        if on_round is not None:
            on_round(r + 1, global_w)
    return global_w, log


def fine_tune(global_w: ModelWeights, clients, schedule: Schedule, workers: int = 1) -> dict[ZoneId, ModelWeights]:
    """Local adaptation: each client trains its own copy for ``schedule.local_epochs`` epochs."""
    clients = _check_clients(clients)
    results = _map_clients(lambda c: _train_client(c, global_w, schedule.local_epochs, schedule, _LOCAL_PHASE),
                           clients, workers)
    return {c.zone: res.weights for c, res in zip(clients, results)}


@dataclass
class AdaptiveResult:
    global_weights: ModelWeights
    personalized: dict[ZoneId, ModelWeights]
    round_log: list[RoundRecord]


def run_adaptive(clients, init: ModelWeights, schedule: Schedule, workers: int = 1) -> AdaptiveResult:
    if schedule.regime is not Regime.ADAPFL:
        raise ValueError("run_adaptive needs an adapFL schedule")
    clients = _check_clients(clients)
    global_w, log = run_federated(clients, init, schedule, workers)
    return AdaptiveResult(global_w, fine_tune(global_w, clients, schedule, workers), log)


def run_individual(client: Client, init: ModelWeights, schedule: Schedule) -> ModelWeights:
    """The client's model trained alone for ``schedule.individual_epochs`` epochs."""
    if schedule.regime is not Regime.INDIVIDUAL:
        raise ValueError("run_individual needs an individual schedule")
    (client,) = _check_clients([client])
    return _train_client(client, init, schedule.individual_epochs, schedule, _LOCAL_PHASE).weights
