import socket
import struct
import threading
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from _helpers import TINY, curve_client
from fedwind import nn
from fedwind.errors import ProtocolError, RoundAborted
from fedwind.federation import ServerState, run_fedavg
from fedwind.nn import POWER_CURVE_ARCH
from fedwind.transport import (
    HEADER_SIZE,
    ChannelClosed,
    ChannelTimeout,
    FederationServer,
    Kind,
    RoundMessage,
    TcpListener,
    connect,
    decode,
    encode,
    inproc_pair,
    payload_fields,
    run_session,
    session_hyperparameters,
)
from fedwind.transport.frames import INIT_KEYS, decode_header


def test_header_layout():
    frame = encode(RoundMessage.stop(7, np.array([1.5])))
    assert HEADER_SIZE == 13
    assert frame[:4] == b"FFL1"
    assert frame[4] == 4
    assert struct.unpack("<I", frame[5:9])[0] == 7
    assert struct.unpack("<I", frame[9:13])[0] == len(frame) - 13 == 4 + 8
    assert struct.unpack("<I", frame[13:17])[0] == 1
    assert struct.unpack("<d", frame[17:25])[0] == 1.5


def test_power_model_payload_size():
    w = nn.init_weights(POWER_CURVE_ARCH, 0).flat
    frame = encode(RoundMessage.global_weights(1, w))
    assert len(frame) - HEADER_SIZE == 4 + 137 * 8 == 1100
    update = encode(RoundMessage.client_update(1, w, 12345, 0.25))
    assert len(update) - HEADER_SIZE == 1100 + 16


@given(st.lists(st.floats(allow_nan=False), max_size=50), st.integers(0, 2**32 - 1), st.integers(0, 2**64 - 1),
       st.floats(allow_nan=False))
def test_roundtrip_bit_exact(values, rnd, n, loss):
    w = np.array(values, dtype=np.float64)
    for msg in (RoundMessage.global_weights(rnd, w), RoundMessage.stop(rnd, w),
                RoundMessage.client_update(rnd, w, n, loss)):
        back = decode(encode(msg))
        assert back == msg
        assert np.array_equal(back.weights.view(np.uint64), w.view(np.uint64))


def test_init_roundtrip_and_key_whitelist():
    doc = {"architecture": POWER_CURVE_ARCH.to_dict(), "hyperparameters": {"learning_rate": 0.013}}
    assert decode(encode(RoundMessage.init(doc))).config == doc
    with pytest.raises(ProtocolError):
        encode(RoundMessage.init({"rows": [[1, 2, 3]]}))
    assert "rows" not in INIT_KEYS


@pytest.mark.parametrize("mutate,field", [
    (lambda f: b"XXXX" + f[4:], "magic"),
    (lambda f: f[:4] + bytes([9]) + f[5:], "kind"),
    (lambda f: f[:-3], "payload"),
    (lambda f: f + b"\0", "payload_len"),
    (lambda f: f[:8], "header"),
])
def test_malformed_frames(mutate, field):
    frame = encode(RoundMessage.global_weights(1, np.arange(3.0)))
    with pytest.raises(ProtocolError) as exc:
        decode(mutate(frame))
    assert exc.value.field == field


def test_count_and_tail_mismatches():
    bad_count = encode(RoundMessage.global_weights(1, np.arange(3.0)))
    bad_count = bad_count[:13] + struct.pack("<I", 5) + bad_count[17:]
    with pytest.raises(ProtocolError) as exc:
        decode(bad_count)
    assert exc.value.field == "count"
    upd = encode(RoundMessage.client_update(1, np.arange(3.0), 5, 0.1))
    short = upd[:9] + struct.pack("<I", len(upd) - 13 - 8) + upd[13:-8]
    with pytest.raises(ProtocolError):
        decode(short)
    with pytest.raises(ProtocolError):
        encode(RoundMessage(Kind.CLIENT_UPDATE, 1, weights=np.zeros(2)))


def test_payload_fields_never_include_rows():
    msgs = [RoundMessage.init({"client_id": 3}), RoundMessage.global_weights(1, np.zeros(2)),
            RoundMessage.client_update(1, np.zeros(2), 3, 0.5), RoundMessage.stop(2, np.zeros(2))]
    for m in msgs:
        assert payload_fields(decode(encode(m))) <= {"kind", "round", "config", "weights", "n_train", "val_loss"}


def test_inproc_channel_counts_and_close():
    cap = []
    a, b = inproc_pair(cap)
    msg = RoundMessage.global_weights(1, np.arange(4.0))
    a.send(msg)
    assert b.recv(1.0) == msg
    assert a.bytes_sent == b.bytes_received == len(encode(msg))
    assert cap == [("sent", encode(msg))]
    with pytest.raises(ChannelTimeout):
        b.recv(0.01)
    a.close()
    with pytest.raises(ChannelClosed):
        b.recv(1.0)
    with pytest.raises(ChannelClosed):
        a.send(msg)


def test_tcp_channel_roundtrip_and_midframe_close():
    listener = TcpListener("127.0.0.1:0")
    try:
        client = connect(listener.address)
        server = listener.accept(5.0)
        msg = RoundMessage.client_update(3, np.arange(137.0), 10, 0.5)
        client.send(msg)
        assert server.recv(5.0) == msg
        assert client.bytes_sent == server.bytes_received == 13 + 1100 + 16
        raw = socket.create_connection(("127.0.0.1", int(listener.address.rsplit(":", 1)[1])))
        half = listener.accept(5.0)
        raw.sendall(encode(msg)[:20])
        raw.close()
        with pytest.raises(ProtocolError):
            half.recv(5.0)
        client.close()
        with pytest.raises(ChannelClosed):
            server.recv(5.0)
    finally:
        listener.close()
    with pytest.raises(ChannelTimeout):
        TcpListener("127.0.0.1:0").accept(0.05)


def make_clients(j=3):
    return [curve_client(i, n=50 + 7 * i, arch=POWER_CURVE_ARCH, lr=0.02) for i in range(j)]


def direct_reference(init, j=3, patience=2, max_rounds=6):
    return run_fedavg(ServerState(POWER_CURVE_ARCH, init), make_clients(j), patience=patience, max_rounds=max_rounds)


@pytest.mark.parametrize("transport", ["inproc", "tcp"])
def test_session_matches_shared_memory_run(transport):
    init = nn.init_live_weights(POWER_CURVE_ARCH, 0)
    want, want_report = direct_reference(init)
    clients = make_clients()
    server = FederationServer(POWER_CURVE_ARCH, init, session_hyperparameters(clients[0], 3), patience=2,
                              max_rounds=6)
    cap = []
    got, report = run_session(server, clients, transport, capture=cap)
    assert got == want
    assert report.history == want_report.history
    for c in clients:
        assert c.model == want
    # every exchange moves one GLOBAL_WEIGHTS down and one CLIENT_UPDATE up per client
    for cid, rounds in report.bytes_per_round.items():
        assert rounds == [(13 + 1100, 13 + 1100 + 16)] * report.meta["exchanges"]
    kinds = [decode(f).kind for _, f in cap]
    assert kinds.count(Kind.STOP) == 3 and kinds.count(Kind.INIT) == 6


def test_session_privacy_schema():
    clients = make_clients()
    init = nn.init_live_weights(POWER_CURVE_ARCH, 1)
    server = FederationServer(POWER_CURVE_ARCH, init, session_hyperparameters(clients[0], 3), patience=1,
                              max_rounds=3)
    cap = []
    run_session(server, clients, "tcp", capture=cap)
    for _, frame in cap:
        msg = decode(frame)
        if msg.kind is Kind.INIT:
            assert set(msg.config) <= {"architecture", "hyperparameters", "client_id"}
        else:
            assert msg.weights.size == POWER_CURVE_ARCH.n_params
            assert payload_fields(msg) <= {"kind", "round", "weights", "n_train", "val_loss"}


@pytest.mark.parametrize("transport", ["inproc", "tcp"])
def test_client_crash_aborts_round(transport):
    clients = make_clients()
    server = FederationServer(POWER_CURVE_ARCH, nn.init_live_weights(POWER_CURVE_ARCH, 0),
                              session_hyperparameters(clients[0], 1), patience=50, max_rounds=10, timeout=10)

    def crash(round_index):
        if round_index == 2:
            raise RuntimeError("disk full")

    with pytest.raises(RoundAborted) as exc:
        run_session(server, clients, transport, hooks={1: crash})
    assert exc.value.client_id == 1 and exc.value.round_index == 2


def test_silent_client_times_out():
    clients = make_clients(2)
    server = FederationServer(POWER_CURVE_ARCH, nn.init_live_weights(POWER_CURVE_ARCH, 0),
                              session_hyperparameters(clients[0], 1), patience=50, max_rounds=5, timeout=0.3)
    release = threading.Event()
    start = time.monotonic()
    with pytest.raises(RoundAborted) as exc:
        run_session(server, clients, "inproc", hooks={0: lambda r: release.wait(2.0)})
    release.set()
    assert exc.value.client_id == 0
    assert time.monotonic() - start < 5.0


def test_duplicate_client_ids_rejected():
    clients = make_clients(2)
    clients[1].client_id = 0
    server = FederationServer(POWER_CURVE_ARCH, nn.init_live_weights(POWER_CURVE_ARCH, 0),
                              session_hyperparameters(clients[0], 1), timeout=5)
    with pytest.raises(ProtocolError):
        run_session(server, clients, "inproc")


def test_decode_header_rejects_huge_length():
    header = struct.pack("<4sBII", b"FFL1", 2, 1, 2**31)
    with pytest.raises(ProtocolError) as exc:
        decode_header(header)
    assert exc.value.field == "payload_len"
