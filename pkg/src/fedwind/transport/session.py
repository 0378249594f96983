"""The FedAvg round protocol driven over channels.

Per round the server sends GLOBAL_WEIGHTS to every client and waits for one
CLIENT_UPDATE from each. A client first scores the weights it received on
its validation set, then trains; the score travels back with the update.
The server therefore learns the validation loss of round r's aggregate while
collecting round r+1's updates, and decides to stop one exchange later than
a shared-memory loop would. The updates of that last exchange are
discarded, so the numbers match :func:`fedwind.federation.run_fedavg`.
"""

from __future__ import annotations

import logging
import math
import threading
import time
from typing import Callable, Sequence

from ..errors import FedWindError, ProtocolError, RoundAborted
from ..federation import ClientState, ServerState, TrainReport, fedavg_report, local_update, validation_loss
from ..federation import aggregate_weighted
from ..nn import Architecture, ModelParams, OptimizerState
from .channels import Channel, ChannelClosed, ChannelTimeout, TcpListener, connect, inproc_pair
from .frames import Kind, RoundMessage

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 300.0


def _expect(msg: RoundMessage, kind: Kind, round_index: int | None = None) -> RoundMessage:
    if msg.kind is not kind:
        raise ProtocolError(f"expected {kind.name}, got {msg.kind.name}", field="kind")
    if round_index is not None and msg.round != round_index:
        raise ProtocolError(f"expected round {round_index}, got {msg.round}", field="round")
    return msg


class FederationServer:
    """Drives the synchronous round loop against a set of connected clients."""

    def __init__(self, arch: Architecture, init: ModelParams, hyperparameters: dict, *, patience: int = 5,
                 max_rounds: int | None = None, timeout: float = DEFAULT_TIMEOUT):
        self.arch = arch
        self.init = init
        self.hyperparameters = dict(hyperparameters)
        self.patience = patience
        self.max_rounds = max_rounds
        self.timeout = timeout
        self.state: ServerState | None = None

    def _recv(self, link: Channel, client_id, round_index: int, deadline: float) -> RoundMessage:
        try:
            return link.recv(timeout=max(0.0, deadline - time.monotonic()))
        except ChannelTimeout:
            raise RoundAborted(client_id, round_index, f"no reply within {self.timeout} s") from None
        except (ChannelClosed, ProtocolError) as exc:
            raise RoundAborted(client_id, round_index, str(exc)) from exc

    def _send(self, link: Channel, client_id, round_index: int, msg: RoundMessage) -> None:
        try:
            link.send(msg)
        except ChannelClosed as exc:
            raise RoundAborted(client_id, round_index, str(exc)) from exc

    def handshake(self, links: Sequence[Channel]) -> list[tuple[int, Channel]]:
        deadline = time.monotonic() + self.timeout
        named = []
        for i, link in enumerate(links):
            hello = self._recv(link, f"#{i}", 0, deadline)
            _expect(hello, Kind.INIT, 0)
            named.append((int(hello.config["client_id"]), link))
        named.sort(key=lambda item: item[0])
        ids = [cid for cid, _ in named]
        if len(set(ids)) != len(ids):
            raise ProtocolError(f"duplicate client ids {ids}", field="client_id")
        doc = {"architecture": self.arch.to_dict(), "hyperparameters": self.hyperparameters}
        for cid, link in named:
            self._send(link, cid, 0, RoundMessage.init(doc))
        return named

    def run(self, links: Sequence[Channel]) -> tuple[ModelParams, TrainReport]:
        start = time.perf_counter()
        named = self.handshake(links)
        handshake_bytes = {cid: (link.bytes_sent, link.bytes_received) for cid, link in named}
        server = ServerState(self.arch, self.init, patience=self.patience,
                             local_epochs=int(self.hyperparameters.get("local_epochs", 3)))
        self.state = server
        per_round: dict[int, list[tuple[int, int]]] = {cid: [] for cid, _ in named}
        broadcast = self.init
        exchange = 0
        try:
            while True:
                exchange += 1
                counters = {cid: (link.bytes_sent, link.bytes_received) for cid, link in named}
                for cid, link in named:
                    self._send(link, cid, exchange, RoundMessage.global_weights(exchange, broadcast.flat))
                deadline = time.monotonic() + self.timeout
                updates = []
                for cid, link in named:
                    msg = self._recv(link, cid, exchange, deadline)
                    try:
                        _expect(msg, Kind.CLIENT_UPDATE, exchange)
                        params = ModelParams(self.arch, msg.weights)
                    except FedWindError as exc:
                        raise RoundAborted(cid, exchange, str(exc)) from exc
                    updates.append((cid, params, msg.n_train, msg.val_loss))
                for cid, link in named:
                    sent0, recv0 = counters[cid]
                    per_round[cid].append((link.bytes_sent - sent0, link.bytes_received - recv0))
                if exchange > 1:
                    # losses refer to the aggregate broadcast in this exchange
                    server.record(math.fsum(u[3] for u in updates) / len(updates), broadcast)
                    if server.should_stop or (self.max_rounds is not None and server.round >= self.max_rounds):
                        break
                broadcast = aggregate_weighted([(p, n) for _, p, n, _ in updates])
            best = server.best_model
            for cid, link in named:
                self._send(link, cid, exchange, RoundMessage.stop(exchange, best.flat))
        finally:
            for _, link in named:
                link.close()
        elapsed = time.perf_counter() - start
        report = TrainReport("B", history=list(server.history))
        report.bytes_per_round = per_round
        report.meta["handshake_bytes"] = handshake_bytes
        report.meta["exchanges"] = exchange
        report.meta["elapsed"] = elapsed
        for cid in per_round:
            report.iterations[cid] = server.round
            report.seconds[cid] = elapsed
        return best, report


class FederationClient:
    """Serves one ClientState over a channel until STOP."""

    def __init__(self, client: ClientState, link: Channel, timeout: float | None = None,
                 on_round: Callable[[int], None] | None = None):
        self.client = client
        self.link = link
        self.timeout = timeout
        self.on_round = on_round
        self.final: ModelParams | None = None
        self.error: BaseException | None = None

    def run(self) -> ModelParams | None:
        c = self.client
        try:
            self.link.send(RoundMessage.init({"client_id": c.client_id}))
            init = _expect(self.link.recv(self.timeout), Kind.INIT, 0).config
            arch = Architecture.from_dict(init["architecture"])
            hp = init["hyperparameters"]
            c.optimizer = OptimizerState.zeros(arch, float(hp["learning_rate"]), float(hp.get("momentum", 0.9)),
                                               int(hp.get("batch_size", 32)))
            epochs = int(hp.get("local_epochs", 3))
            while True:
                msg = self.link.recv(self.timeout)
                if msg.kind is Kind.STOP:
                    self.final = ModelParams(arch, msg.weights)
                    c.model = self.final
                    return self.final
                _expect(msg, Kind.GLOBAL_WEIGHTS)
                received = ModelParams(arch, msg.weights)
                score = validation_loss(received, c)
                if self.on_round is not None:
                    self.on_round(msg.round)
                params, _, n = local_update(c, received, epochs)
                self.link.send(RoundMessage.client_update(msg.round, params.flat, n, score))
        except BaseException as exc:  # noqa: BLE001 - reported to the owner thread
            self.error = exc
            logger.warning("client %s stopped: %s", c.client_id, exc)
            return None
        finally:
            self.link.close()


def _start_clients(pairs: Sequence[tuple[ClientState, Callable[[], Channel]]], timeout,
                   hooks: dict | None = None) -> list[tuple[dict, threading.Thread]]:
    out = []
    for client, make_link in pairs:
        holder: dict = {}

        def target(client=client, make_link=make_link, holder=holder):
            try:
                link = make_link()
            except OSError as exc:
                holder["error"] = exc
                return
            worker = FederationClient(client, link, timeout, (hooks or {}).get(client.client_id))
            holder["worker"] = worker
            worker.run()

        thread = threading.Thread(target=target, name=f"fed-client-{client.client_id}", daemon=True)
        thread.start()
        out.append((holder, thread))
    return out


def session_hyperparameters(client: ClientState, local_epochs: int) -> dict:
    opt = client.optimizer
    return {"learning_rate": opt.learning_rate, "momentum": opt.momentum, "batch_size": opt.batch_size,
            "local_epochs": local_epochs}


def run_session(server: FederationServer, clients: Sequence[ClientState], transport: str = "inproc",
                address: str = "127.0.0.1:0", capture: list | None = None,
                hooks: dict | None = None) -> tuple[ModelParams, TrainReport]:
    """Run a full federated training with every client in a worker thread.

    ``transport`` is ``"inproc"`` (queue pairs) or ``"tcp"`` (loopback or the
    given listen address). ``capture`` collects every frame the server sends
    or receives. ``hooks`` maps client ids to callables invoked with the round
    index before each local update (fault injection in tests).
    """
    if transport == "inproc":
        server_ends = []
        pairs = []
        for c in clients:
            s_end, c_end = inproc_pair(capture)
            server_ends.append(s_end)
            pairs.append((c, lambda c_end=c_end: c_end))
        workers = _start_clients(pairs, server.timeout, hooks)
        try:
            return server.run(server_ends)
        finally:
            for _, t in workers:
                t.join(timeout=5)
    if transport == "tcp":
        listener = TcpListener(address)
        try:
            pairs = [(c, lambda: connect(listener.address)) for c in clients]
            workers = _start_clients(pairs, server.timeout, hooks)
            links = [listener.accept(server.timeout, capture) for _ in clients]
            try:
                return server.run(links)
            finally:
                for _, t in workers:
                    t.join(timeout=5)
        finally:
            listener.close()
    raise ValueError(f"unknown transport {transport!r}")


def remote_report(best: ModelParams, clients: Sequence[ClientState], session: TrainReport) -> TrainReport:
    """Attach client-side evaluations to a session report."""
    report = fedavg_report(best, clients, session.meta["elapsed"], max(session.iterations.values()),
                           session.history)
    report.bytes_per_round = session.bytes_per_round
    report.meta.update(session.meta)
    return report
