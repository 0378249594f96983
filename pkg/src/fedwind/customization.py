"""Per-client customization of a global model by finetuning its trailing layers."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

from . import nn
from .data import VALIDATION
from .errors import ConfigError, DataError
from .federation import ClientState, TrainReport, _test_rmse, evaluate
from .nn import ModelParams, OptimizerState
from .stopping import EarlyStopping


@dataclass(frozen=True)
class FinetunePlan:
    k_finetuned: int
    learning_rate: float
    patience: int = 5
    max_epochs: int | None = None

    @classmethod
    def half_rate(cls, base_learning_rate: float, k: int, patience: int = 5,
                  max_epochs: int | None = None) -> "FinetunePlan":
        return cls(k, base_learning_rate / 2.0, patience, max_epochs)


class Customized(NamedTuple):
    params: ModelParams
    k: int
    val_rmse: float
    val_by_k: dict[int, float]


def finetune(global_params: ModelParams, client: ClientState, plan: FinetunePlan) -> tuple[ModelParams, float]:
    """Train only the last ``plan.k_finetuned`` layers; earlier layers stay bit-identical.

    The unmodified global model is the epoch-0 candidate for restore-best, so
    the returned validation RMSE never exceeds the global model's.
    """
    arch = global_params.arch
    k = plan.k_finetuned
    if not 1 <= k <= arch.n_layers:
        raise ConfigError(f"k_finetuned must be in [1, {arch.n_layers}], got {k}")
    if client.n_train == 0 or len(client.validation) == 0:
        raise DataError(f"client {client.client_id}: empty train or validation partition")
    first = arch.layer_start(arch.n_layers - k)
    opt = OptimizerState.zeros(arch, plan.learning_rate, client.optimizer.momentum, client.optimizer.batch_size)
    rng = client.stream("finetune", k)

    stopper = EarlyStopping(plan.patience)
    stopper.update(evaluate(global_params, client, VALIDATION), global_params)
    params = global_params
    epochs = 0
    while plan.max_epochs is None or epochs < plan.max_epochs:
        params, opt = nn.train_epochs(params, opt, client.train, 1, rng, trainable_from=first)
        epochs += 1
        if stopper.update(evaluate(params, client, VALIDATION), params):
            break
    return stopper.best_payload, stopper.best_score


def choose_k(val_by_k: Mapping[int, float]) -> int:
    """Lowest validation RMSE; ties go to the smaller layer count."""
    return min(val_by_k, key=lambda k: (val_by_k[k], k))


def select_customization(global_params: ModelParams, client: ClientState, base_learning_rate: float,
                         patience: int = 5, ks: Sequence[int] = (1, 2, 3),
                         max_epochs: int | None = None) -> Customized:
    ks = [k for k in ks if k <= global_params.arch.n_layers]
    results = {k: finetune(global_params, client, FinetunePlan.half_rate(base_learning_rate, k, patience, max_epochs))
               for k in ks}
    val_by_k = {k: r[1] for k, r in results.items()}
    k = choose_k(val_by_k)
    return Customized(results[k][0], k, val_by_k[k], val_by_k)


def run_customized(global_params: ModelParams, clients: Sequence[ClientState], base_learning_rate: float,
                   patience: int = 5, max_epochs: int | None = None,
                   base_seconds: float = 0.0) -> tuple[dict[int, Customized], TrainReport]:
    """Strategy C for every client; reported time includes the federated training time."""
    report = TrainReport("C")
    chosen = {}
    for c in sorted(clients, key=lambda c: c.client_id):
        start = time.perf_counter()
        res = select_customization(global_params, c, base_learning_rate, patience, max_epochs=max_epochs)
        spent = time.perf_counter() - start
        chosen[c.client_id] = res
        report.test_rmse[c.client_id] = _test_rmse(res.params, c)
        report.val_rmse[c.client_id] = res.val_rmse
        report.seconds[c.client_id] = base_seconds + spent
        report.iterations[c.client_id] = res.k
        report.meta.setdefault("finetune_seconds", {})[c.client_id] = spent
    return chosen, report
