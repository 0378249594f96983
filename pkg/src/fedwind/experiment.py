"""Config-driven experiments: fleet setup, strategies A/B/C, reports, model search."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Annotated, Literal, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, ValidationError, model_validator

from . import nn
from .customization import run_customized
from .data import (
    CASES,
    TEST,
    TRAIN,
    NormStats,
    ScadaDataset,
    SyntheticFleetConfig,
    apply_norm,
    fit_norm,
    generate_synthetic_fleet,
    ingest_csv,
    load_fleet,
    partition_client,
    split_test_suffix,
)
from .errors import ConfigError, DataError
from .federation import ClientState, TrainReport, run_local_only
from .nn import Architecture, Batch, ModelParams, OptimizerState
from .stopping import EarlyStopping
from .transport import FederationServer, remote_report, run_session, session_hyperparameters

logger = logging.getLogger(__name__)

STRATEGIES = ("A", "B", "C")
CASE_DEFAULTS = {
    "power_curve": (nn.POWER_CURVE_ARCH, nn.POWER_CURVE_LR, "lowest_wind"),
    "bearing_temp": (nn.BEARING_TEMP_ARCH, nn.BEARING_TEMP_LR, "consecutive"),
}
SEARCH_LR_RANGE = {"power_curve": (0.001, 0.075), "bearing_temp": (0.000005, 0.001)}
OUTPUT_ACTIVATION = {"power_curve": "relu", "bearing_temp": "linear"}


# ------------------------------------------------------------------ config


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SyntheticSource(_Strict):
    kind: Literal["synthetic"] = "synthetic"
    fleet: dict = Field(default_factory=dict, description="SyntheticFleetConfig overrides")

    def fleet_config(self) -> SyntheticFleetConfig:
        names = {f.name for f in dataclasses.fields(SyntheticFleetConfig)}
        unknown = set(self.fleet) - names
        if unknown:
            raise ConfigError(f"unknown synthetic fleet fields {sorted(unknown)}")
        return SyntheticFleetConfig(**self.fleet)


class CsvSource(_Strict):
    kind: Literal["csv"] = "csv"
    directory: str
    schema_map: dict[str, str] | None = Field(default=None, alias="schema")
    scale: dict[str, float] | None = None

    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class Patience(_Strict):
    A: PositiveInt = 15
    B: PositiveInt = 5
    C: PositiveInt = 5


class ExperimentConfig(_Strict):
    """Everything that determines an experiment; JSON files mirror these fields."""

    case: Literal["power_curve", "bearing_temp"] = "power_curve"
    data: Annotated[Union[SyntheticSource, CsvSource], Field(discriminator="kind")] = Field(
        default_factory=SyntheticSource)
    n_clients: PositiveInt = 9
    scarce_ids: list[int] | None = None
    scarcity: Literal["lowest_wind", "consecutive"] | None = None
    strategies: list[Literal["A", "B", "C"]] = Field(default_factory=lambda: list(STRATEGIES))
    hidden: list[tuple[PositiveInt, Literal["elu", "relu", "linear"]]] | None = None
    learning_rate: PositiveFloat | None = None
    seed: int = 0
    client_seeds: list[int] | None = None
    patience: Patience = Field(default_factory=Patience)
    local_epochs: PositiveInt = 3
    batch_size: PositiveInt = 32
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    max_epochs: PositiveInt | None = None
    max_rounds: PositiveInt | None = None
    test_fraction: float = Field(0.30, gt=0.0, lt=1.0)
    normalization: Literal["fleet", "client"] = "fleet"
    transport: Literal["inproc", "tcp"] = "inproc"
    listen: str = "127.0.0.1:0"
    timeout: PositiveFloat = 300.0
    workers: PositiveInt = 1

    @model_validator(mode="after")
    def _check(self) -> "ExperimentConfig":
        ids = self.scarce_ids if self.scarce_ids is not None else []
        bad = [i for i in ids if not 0 <= i < self.n_clients]
        if bad:
            raise ValueError(f"scarce ids {bad} are not client ids 0..{self.n_clients - 1}")
        if len(set(ids)) != len(ids):
            raise ValueError("scarce ids must be unique")
        if self.client_seeds is not None and len(self.client_seeds) != self.n_clients:
            raise ValueError("client_seeds needs one entry per client")
        if not self.strategies:
            raise ValueError("at least one strategy is required")
        if "C" in self.strategies and "B" not in self.strategies:
            raise ValueError("strategy C finetunes the strategy-B model; include B")
        if len(set(self.strategies)) != len(self.strategies):
            raise ValueError("duplicate strategies")
        return self

    @property
    def architecture(self) -> Architecture:
        default, _, _ = CASE_DEFAULTS[self.case]
        if self.hidden is None:
            return default
        return Architecture(default.input_dim, tuple((int(u), a) for u, a in self.hidden),
                            default.output_activation)

    @property
    def lr(self) -> float:
        return self.learning_rate if self.learning_rate is not None else CASE_DEFAULTS[self.case][1]

    @property
    def scheme(self) -> str:
        return self.scarcity or CASE_DEFAULTS[self.case][2]

    def resolved_scarce_ids(self) -> list[int]:
        if self.scarce_ids is not None:
            return sorted(self.scarce_ids)
        if isinstance(self.data, SyntheticSource):
            n = self.data.fleet_config().n_scarce
        else:
            n = 5
        return list(range(min(n, self.n_clients)))

    def client_seed(self, client_id: int) -> int:
        if self.client_seeds is not None:
            return self.client_seeds[client_id]
        return self.seed * 1000 + client_id

    def ordered_strategies(self) -> list[str]:
        return [s for s in STRATEGIES if s in self.strategies]


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        return ExperimentConfig.model_validate_json(text)
    except ValidationError as exc:
        raise ConfigError(f"invalid config {path}:\n{exc}") from exc


# ------------------------------------------------------------------ report


@dataclass
class ReportRow:
    client: int
    kind: str
    rmse: dict[str, float] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)
    val_rmse: dict[str, float] = field(default_factory=dict)


@dataclass
class ReportTable:
    strategies: list[str]
    rows: list[ReportRow]
    meta: dict = field(default_factory=dict)

    def column(self, metric: str, strategy: str, kind: str | None = None) -> list[float]:
        return [getattr(r, metric)[strategy] for r in self.rows if kind is None or r.kind == kind]

    def mean(self, metric: str, strategy: str, kind: str | None = None) -> float:
        values = self.column(metric, strategy, kind)
        return math.fsum(values) / len(values)

    def sd(self, metric: str, strategy: str, kind: str | None = None) -> float:
        # population sd over the clients in the table
        return statistics.pstdev(self.column(metric, strategy, kind))

    def numbers(self, with_time: bool = False) -> list:
        """Every reported number as a flat list; timings only when asked (wall-clock varies)."""
        metrics = ("rmse", "val_rmse", "seconds") if with_time else ("rmse", "val_rmse")
        out = []
        for r in self.rows:
            out.append((r.client, r.kind))
            for m in metrics:
                out.extend(getattr(r, m).get(s) for s in self.strategies)
        return out


def _columns(strategies: Sequence[str]) -> list[str]:
    return (["wt", "kind"] + [f"rmse_{s}" for s in strategies] + [f"seconds_{s}" for s in strategies]
            + [f"val_rmse_{s}" for s in strategies])


def _fmt(value: float) -> str:
    return "nan" if value is None or math.isnan(value) else f"{value:.6f}"


def report_csv(table: ReportTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    s = table.strategies
    writer.writerow(_columns(s))
    for r in table.rows:
        writer.writerow([r.client, r.kind] + [_fmt(r.rmse[x]) for x in s] + [_fmt(r.seconds[x]) for x in s]
                        + [_fmt(r.val_rmse[x]) for x in s])
    for label, fn in (("mean", table.mean), ("sd", table.sd)):
        writer.writerow([label, ""] + [_fmt(fn(m, x)) for m in ("rmse", "seconds", "val_rmse") for x in s])
    return buf.getvalue()


def emit_report(table: ReportTable, path) -> Path:
    path = Path(path)
    path.write_text(report_csv(table))
    return path


def parse_report(text: str) -> tuple[ReportTable, dict[str, dict[str, float]]]:
    """Inverse of :func:`report_csv`: (table, {"mean": {...}, "sd": {...}})."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    strategies = [h[len("rmse_"):] for h in header if h.startswith("rmse_")]
    if header != _columns(strategies):
        raise DataError(f"unexpected report header {header}")
    rows, summary = [], {}
    for rec in reader:
        values = dict(zip(header, rec))
        if rec[0] in ("mean", "sd"):
            summary[rec[0]] = {h: float(values[h]) for h in header[2:]}
            continue
        rows.append(ReportRow(
            int(rec[0]), rec[1],
            rmse={x: float(values[f"rmse_{x}"]) for x in strategies},
            seconds={x: float(values[f"seconds_{x}"]) for x in strategies},
            val_rmse={x: float(values[f"val_rmse_{x}"]) for x in strategies},
        ))
    return ReportTable(strategies, rows), summary


def read_report(path) -> tuple[ReportTable, dict[str, dict[str, float]]]:
    return parse_report(Path(path).read_text())


# ------------------------------------------------------------------ runner


def load_datasets(config: ExperimentConfig) -> list[ScadaDataset]:
    if isinstance(config.data, SyntheticSource):
        fleet = generate_synthetic_fleet(config.data.fleet_config())
    else:
        fleet = load_fleet(config.data.directory, config.data.schema_map, config.data.scale)
    if len(fleet) < config.n_clients:
        raise ConfigError(f"{config.n_clients} clients requested but only {len(fleet)} turbines available")
    return fleet[:config.n_clients]


def build_clients(config: ExperimentConfig, fleet: Sequence[ScadaDataset] | None = None) -> list[ClientState]:
    """Partition every turbine and wrap it as a client with normalized batches."""
    fleet = load_datasets(config) if fleet is None else list(fleet)
    scarce = set(config.resolved_scarce_ids())
    features, _ = CASES[config.case]
    labelled = []
    for cid, ds in enumerate(fleet):
        scheme = config.scheme if cid in scarce else "representative"
        try:
            labelled.append(partition_client(ds, scheme, seed=config.client_seed(cid),
                                             test_fraction=config.test_fraction))
        except DataError as exc:
            raise DataError(f"client {cid} ({ds.turbine_id}): {exc}") from exc
    norm = None
    if config.normalization == "fleet":
        norm = NormStats.merge([fit_norm(l.part(TRAIN).features(features), features) for l in labelled])
    arch = config.architecture
    return [
        ClientState.from_dataset(cid, l, config.case, arch, config.lr, config.client_seed(cid),
                                 momentum=config.momentum, batch_size=config.batch_size, norm=norm,
                                 kind="scarce" if cid in scarce else "representative")
        for cid, l in enumerate(labelled)
    ]


def _map(fn, items, workers: int):
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def run_strategies(config: ExperimentConfig, clients: Sequence[ClientState],
                   capture: list | None = None) -> tuple[ReportTable, dict]:
    """Train the requested strategies on prepared clients; returns (table, models)."""
    arch = config.architecture
    init = nn.init_live_weights(arch, config.seed)
    strategies = config.ordered_strategies()
    reports: dict[str, TrainReport] = {}
    models: dict = {}
    if "A" in strategies:
        results = _map(lambda c: run_local_only(c, config.patience.A, config.max_epochs, init=init),
                       clients, config.workers)
        merged = TrainReport("A")
        models["A"] = {}
        for c, (best, rep) in zip(clients, results):
            models["A"][c.client_id] = best
            for name in ("test_rmse", "val_rmse", "seconds", "iterations"):
                getattr(merged, name).update(getattr(rep, name))
        reports["A"] = merged
    if "B" in strategies:
        hp = session_hyperparameters(clients[0], config.local_epochs)
        server = FederationServer(arch, init, hp, patience=config.patience.B, max_rounds=config.max_rounds,
                                  timeout=config.timeout)
        best, session = run_session(server, clients, config.transport, config.listen, capture)
        reports["B"] = remote_report(best, clients, session)
        models["B"] = best
    if "C" in strategies:
        b = reports["B"]
        chosen, reports["C"] = run_customized(models["B"], clients, config.lr, config.patience.C,
                                              config.max_epochs, base_seconds=b.meta["elapsed"])
        models["C"] = chosen
    rows = []
    for c in sorted(clients, key=lambda c: c.client_id):
        cid = c.client_id
        rows.append(ReportRow(
            cid, c.kind,
            rmse={s: reports[s].test_rmse[cid] for s in strategies},
            seconds={s: reports[s].seconds[cid] for s in strategies},
            val_rmse={s: reports[s].val_rmse[cid] for s in strategies},
        ))
    meta = {
        "case": config.case,
        "architecture": arch.to_dict(),
        "n_params": arch.n_params,
        "learning_rate": config.lr,
        "transport": config.transport,
        "workers": config.workers,
        "seed": config.seed,
    }
    if "A" in reports:
        meta["epochs_A"] = dict(reports["A"].iterations)
    if "B" in reports:
        meta["rounds_B"] = max(reports["B"].iterations.values())
        meta["history_B"] = list(reports["B"].history)
        meta["bytes_per_round_B"] = reports["B"].bytes_per_round
    if "C" in reports:
        meta["finetune_seconds"] = reports["C"].meta["finetune_seconds"]
        meta["k_C"] = {cid: ch.k for cid, ch in models["C"].items()}
    return ReportTable(strategies, rows, meta), models


def run_experiment(config: ExperimentConfig, capture: list | None = None) -> ReportTable:
    start = time.perf_counter()
    clients = build_clients(config)
    table, _ = run_strategies(config, clients, capture)
    table.meta["total_seconds"] = time.perf_counter() - start
    return table


# ------------------------------------------------------------------ model search


@dataclass
class Trial:
    hidden: tuple[int, ...]
    learning_rate: float
    test_rmse: float
    epochs: int


@dataclass
class SearchResult:
    architecture: Architecture
    learning_rate: float
    test_rmse: float
    trials: list[Trial]

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture.to_dict(),
            "learning_rate": self.learning_rate,
            "test_rmse": self.test_rmse,
            "n_params": self.architecture.n_params,
            "trials": [dataclasses.asdict(t) for t in self.trials],
        }


def sample_trial(rng: np.random.Generator, case: str, units=(4, 8, 12, 16), max_depth: int = 3):
    depth = int(rng.integers(0, max_depth + 1))
    hidden = tuple(int(u) for u in rng.choice(units, size=depth))
    lo, hi = SEARCH_LR_RANGE[case]
    lr = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    return hidden, lr


def random_model_search(dataset: ScadaDataset, case: str, trials: int = 100, seed: int = 0,
                        max_epochs: int = 150, patience: int = 15, test_fraction: float = 0.30,
                        batch_size: int = 32, momentum: float = 0.9) -> SearchResult:
    """Random search over depth 0-3 ELU networks and learning rates on one public turbine.

    Chronological split: the last ``test_fraction`` of records is the test
    set. Each candidate trains until the training loss stalls for
    ``patience`` epochs (or ``max_epochs``), keeping its best-training-loss
    weights; the candidate with the lowest test RMSE wins.
    """
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    if case not in CASES:
        raise ConfigError(f"unknown case {case!r}")
    if len(dataset) == 0:
        raise DataError("search dataset is empty")
    features, target = CASES[case]
    labelled = split_test_suffix(dataset, test_fraction)
    train, test = labelled.part("pool"), labelled.part(TEST)
    if len(train) == 0 or len(test) == 0:
        raise DataError("search dataset too small for a train/test split")
    norm = fit_norm(train.features(features), features)
    tr = Batch(apply_norm(norm, train.features(features)), train.column(target))
    te = Batch(apply_norm(norm, test.features(features)), test.column(target))
    rng = np.random.default_rng(seed)
    done: list[Trial] = []
    best = None
    for i in range(trials):
        hidden, lr = sample_trial(rng, case)
        arch = Architecture(len(features), tuple((u, "elu") for u in hidden), OUTPUT_ACTIVATION[case])
        params = nn.init_live_weights(arch, [seed, i])
        opt = OptimizerState.zeros(arch, lr, momentum, batch_size)
        shuffle = np.random.default_rng([seed, i, 1])
        stopper = EarlyStopping(patience)
        epochs = 0
        while epochs < max_epochs:
            params, opt = nn.train_epochs(params, opt, tr, 1, shuffle)
            epochs += 1
            if stopper.update(nn.mse_loss(nn.forward(params, tr.inputs), tr.targets), params):
                break
        model = stopper.best_payload
        score = nn.rmse(nn.forward(model, te.inputs), te.targets)
        done.append(Trial(hidden, lr, score, epochs))
        logger.info("trial %d: hidden=%s lr=%.3g test rmse=%.6f", i, hidden, lr, score)
        if best is None or score < best[2]:
            best = (arch, lr, score)
    return SearchResult(best[0], best[1], best[2], done)


def search_dataset(case: str, seed: int = 0, source: CsvSource | str | None = None,
                   fleet: dict | None = None) -> ScadaDataset:
    """The public turbine: a CSV file/directory's first turbine, else the last synthetic one."""
    if isinstance(source, CsvSource):
        return load_fleet(source.directory, source.schema_map, source.scale)[0]
    if source is not None:
        p = Path(source)
        return load_fleet(p)[0] if p.is_dir() else ingest_csv(p)
    cfg = SyntheticFleetConfig(**{"seed": seed, **(fleet or {})})
    return generate_synthetic_fleet(cfg)[-1]


PENMANSHIEL_ENV = "FEDWIND_PENMANSHIEL_DIR"


def penmanshiel_config(directory: str | os.PathLike | None = None, **overrides) -> ExperimentConfig | None:
    """Case-1 config over a directory of Penmanshiel turbine CSVs, or None when unavailable.

    The CSVs are expected to be already reduced to 10-minute rows with
    columns mapped through ``schema`` (override as needed).
    """
    directory = directory or os.environ.get(PENMANSHIEL_ENV)
    if not directory or not Path(directory).is_dir():
        return None
    n_files = len(list(Path(directory).glob("*.csv")))
    if n_files < 2:
        return None
    doc = {
        "case": "power_curve",
        "data": {"kind": "csv", "directory": str(directory)},
        "n_clients": n_files,
        # half the farm (rounded up) is scarce, as in the 14-turbine study
        "scarce_ids": list(range((n_files + 1) // 2)),
        **overrides,
    }
    return ExperimentConfig.model_validate(doc)


def config_json(config: ExperimentConfig) -> str:
    return json.dumps(config.model_dump(mode="json", by_alias=True), indent=2, sort_keys=True)
