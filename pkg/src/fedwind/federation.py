"""FedAvg client/server logic and the local-only baseline."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .data import CASES, TRAIN, VALIDATION, TEST, NormStats, ScadaDataset, apply_norm, fit_norm
from .errors import ClientSkip, DataError, FedWindError, ProtocolError, RoundAborted
from .nn import Architecture, Batch, ModelParams, OptimizerState
from .stopping import EarlyStopping

logger = logging.getLogger(__name__)

_STREAMS = {"fed": 0, "local": 1, "finetune": 2}


@dataclass
class ClientState:
    """One turbine: its private (normalized) partitions, model and optimizer."""

    client_id: int
    train: Batch
    validation: Batch
    test: Batch
    optimizer: OptimizerState
    seed: int
    model: ModelParams | None = None
    norm: NormStats | None = None
    kind: str = "representative"
    rng: np.random.Generator = field(init=False)

    def __post_init__(self):
        self.rng = self.stream("fed")

    @property
    def n_train(self) -> int:
        return len(self.train)

    def stream(self, name: str, *extra: int) -> np.random.Generator:
        """Independent seeded generator for one purpose (fed/local/finetune)."""
        return np.random.default_rng([self.seed, _STREAMS[name], *extra])

    def batch(self, partition: str) -> Batch:
        try:
            return {TRAIN: self.train, VALIDATION: self.validation, TEST: self.test}[partition]
        except KeyError:
            raise DataError(f"unknown partition {partition!r}") from None

    @classmethod
    def from_dataset(cls, client_id: int, dataset: ScadaDataset, case: str, arch: Architecture,
                     learning_rate: float, seed: int, *, momentum: float = 0.9, batch_size: int = 32,
                     norm: NormStats | None = None, kind: str = "representative") -> "ClientState":
        """Build a client from a labelled dataset; normalization defaults to its own train split."""
        features, target = CASES[case]
        train = dataset.part(TRAIN)
        if norm is None:
            norm = fit_norm(train.features(features), features)

        def batch(part: ScadaDataset) -> Batch:
            return Batch(apply_norm(norm, part.features(features)), part.column(target))

        return cls(
            client_id=client_id,
            train=batch(train),
            validation=batch(dataset.part(VALIDATION)),
            test=batch(dataset.part(TEST)),
            optimizer=OptimizerState.zeros(arch, learning_rate, momentum, batch_size),
            seed=seed,
            norm=norm,
            kind=kind,
        )


@dataclass
class ServerState:
    arch: Architecture
    global_model: ModelParams
    patience: int = 5
    local_epochs: int = 3
    round: int = 0
    best_loss: float = math.inf
    best_model: ModelParams | None = None
    best_round: int | None = None
    rounds_since_improvement: int = 0
    history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")

    def record(self, score: float, model: ModelParams) -> None:
        """Advance one round with its mean validation loss (restore-best bookkeeping)."""
        self.round += 1
        self.global_model = model
        self.history.append(score)
        if score < self.best_loss:
            self.best_loss, self.best_model, self.best_round = score, model, self.round
            self.rounds_since_improvement = 0
        else:
            self.rounds_since_improvement += 1

    @property
    def should_stop(self) -> bool:
        return self.rounds_since_improvement >= self.patience


@dataclass
class TrainReport:
    strategy: str
    test_rmse: dict[int, float] = field(default_factory=dict)
    val_rmse: dict[int, float] = field(default_factory=dict)
    seconds: dict[int, float] = field(default_factory=dict)
    iterations: dict[int, int] = field(default_factory=dict)
    bytes_per_round: dict[int, list[tuple[int, int]]] = field(default_factory=dict)
    history: list[float] = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def validation_loss(model: ModelParams, client: ClientState) -> float:
    return nn.mse_loss(nn.forward(model, client.validation.inputs), client.validation.targets)


def local_update(client: ClientState, global_params: ModelParams,
                 epochs: int = 3) -> tuple[ModelParams, float, int]:
    """Train from the received global weights; returns (weights, validation MSE, n_train).

    The client's optimizer velocity and shuffling stream carry over between
    rounds.
    """
    if client.n_train == 0:
        raise ClientSkip(client.client_id)
    if epochs == 0:
        params = global_params
    else:
        params, client.optimizer = nn.train_epochs(global_params, client.optimizer, client.train,
                                                   epochs, client.rng)
    client.model = params
    return params, validation_loss(params, client), client.n_train


def _exact_weighted_mean(columns: Sequence[list[float]], weights: Sequence[int], total: int) -> list[float]:
    out = []
    for values in zip(*columns):
        first = values[0]
        if all(v == first for v in values) and all(math.copysign(1, v) == math.copysign(1, first) for v in values):
            out.append(first)
            continue
        ratios = [v.as_integer_ratio() for v in values]
        den = max(d for _, d in ratios)
        num = sum(w * a * (den // d) for w, (a, d) in zip(weights, ratios))
        # int / int is correctly rounded in Python
        out.append(num / (den * total))
    return out


def aggregate_weighted(updates: Sequence[tuple[ModelParams, int]]) -> ModelParams:
    """Sum_j (n_j / n) * w_j, accumulated exactly and rounded once to float64.

    Exact accumulation makes the result independent of update order and
    returns identical inputs unchanged.
    """
    if not updates:
        raise ProtocolError("no updates to aggregate", field="updates")
    arch = updates[0][0].arch
    for params, n in updates:
        if params.arch.n_params != arch.n_params:
            raise ProtocolError(f"update has {params.arch.n_params} parameters, expected {arch.n_params}",
                                field="weights")
        if int(n) < 1:
            raise ProtocolError(f"sample count must be >= 1, got {n}", field="n_train")
    weights = [int(n) for _, n in updates]
    g = math.gcd(*weights)
    weights = [w // g for w in weights]
    mean = _exact_weighted_mean([p.flat.tolist() for p, _ in updates], weights, sum(weights))
    return ModelParams(arch, np.asarray(mean))


def _sorted(clients: Sequence[ClientState]) -> list[ClientState]:
    return sorted(clients, key=lambda c: c.client_id)


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values)


def fedavg_round(server: ServerState, clients: Sequence[ClientState],
                 workers: int = 1) -> tuple[ServerState, dict[int, float]]:
    """One synchronous round: broadcast, local updates, aggregation, validation of the new global."""
    if not clients:
        raise ProtocolError("a round needs at least one client", field="clients")
    ordered = _sorted(clients)
    current = server.global_model
    round_index = server.round + 1

    def run(client: ClientState):
        try:
            return local_update(client, current, server.local_epochs)
        except FedWindError as exc:
            raise RoundAborted(client.client_id, round_index, str(exc)) from exc

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, ordered))
    else:
        results = [run(c) for c in ordered]
    new_global = aggregate_weighted([(p, n) for p, _, n in results])
    losses = {c.client_id: validation_loss(new_global, c) for c in ordered}
    server.record(_mean([losses[c.client_id] for c in ordered]), new_global)
    return server, losses


def _test_rmse(model: ModelParams, client: ClientState) -> float:
    return evaluate(model, client, TEST) if len(client.test) else math.nan


def run_fedavg(server: ServerState, clients: Sequence[ClientState], patience: int | None = None,
               max_rounds: int | None = None, workers: int = 1) -> tuple[ModelParams, TrainReport]:
    """Repeat rounds until the mean client validation loss stalls; return the best round's model."""
    if patience is not None:
        if patience < 1:
            raise ValueError("patience must be >= 1")
        server.patience = patience
    start = time.perf_counter()
    while True:
        server, _ = fedavg_round(server, clients, workers)
        logger.debug("round %d: mean validation loss %.6g", server.round, server.history[-1])
        if server.should_stop or (max_rounds is not None and server.round >= max_rounds):
            break
    elapsed = time.perf_counter() - start
    best = server.best_model
    return best, fedavg_report(best, clients, elapsed, server.round, server.history)


def fedavg_report(best: ModelParams, clients: Sequence[ClientState], elapsed: float, rounds: int,
                  history: Sequence[float]) -> TrainReport:
    report = TrainReport("B", history=list(history))
    for c in _sorted(clients):
        report.test_rmse[c.client_id] = _test_rmse(best, c)
        report.val_rmse[c.client_id] = evaluate(best, c, VALIDATION)
        report.seconds[c.client_id] = elapsed
        report.iterations[c.client_id] = rounds
    return report


def run_local_only(client: ClientState, patience: int = 15, max_epochs: int | None = None,
                   init: ModelParams | None = None) -> tuple[ModelParams, TrainReport]:
    """Strategy A: local SGD with epoch-level early stopping and restore-best.

    Uses a fresh optimizer and its own shuffling stream, so federation state
    on the same client is untouched.
    """
    params = init if init is not None else client.model
    if params is None:
        raise DataError(f"client {client.client_id} has no initial model")
    if client.n_train == 0 or len(client.validation) == 0:
        raise DataError(f"client {client.client_id}: empty train or validation partition")
    opt = OptimizerState.zeros(params.arch, client.optimizer.learning_rate, client.optimizer.momentum,
                               client.optimizer.batch_size)
    rng = client.stream("local")
    stopper = EarlyStopping(patience)
    history = []
    start = time.perf_counter()
    epochs = 0
    while True:
        params, opt = nn.train_epochs(params, opt, client.train, 1, rng)
        epochs += 1
        loss = validation_loss(params, client)
        history.append(loss)
        if stopper.update(loss, params) or (max_epochs is not None and epochs >= max_epochs):
            break
    elapsed = time.perf_counter() - start
    best = stopper.best_payload
    cid = client.client_id
    report = TrainReport("A", history=history)
    report.test_rmse[cid] = _test_rmse(best, client)
    report.val_rmse[cid] = evaluate(best, client, VALIDATION)
    report.seconds[cid] = elapsed
    report.iterations[cid] = epochs
    return best, report


def residuals(model: ModelParams, client: ClientState, partition: str) -> np.ndarray:
    """measured - predicted, in target units, in record order."""
    b = client.batch(partition)
    if len(b) == 0:
        raise DataError(f"client {client.client_id}: empty {partition} partition")
    return b.targets - nn.forward(model, b.inputs)


def evaluate(model: ModelParams, client: ClientState, partition: str) -> float:
    """RMSE of the model on one of the client's partitions, in target units."""
    b = client.batch(partition)
    if len(b) == 0:
        raise DataError(f"client {client.client_id}: empty {partition} partition")
    return nn.rmse(nn.forward(model, b.inputs), b.targets)
