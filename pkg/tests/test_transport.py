import threading

import numpy as np
import pytest

from zerosim.collectives import ProcessGroup, all_reduce
from zerosim.transport import (
    ProtocolError,
    SimFabric,
    TcpEndpoint,
    decode_payload,
    encode_frame,
    free_loopback_roster,
    parse_roster,
    payload_tag,
)


def test_frame_round_trip():
    for payload in (np.arange(5, dtype=np.uint16), np.linspace(0, 1, 7, dtype=np.float32), np.zeros(0, np.uint16)):
        tag = payload_tag(2, payload)
        frame = encode_frame(tag, 9, payload)
        assert len(frame) == 16 + payload.nbytes
        out = decode_payload(tag, payload.shape[0], frame[16:])
        assert out.dtype == payload.dtype and np.array_equal(out, payload)


def test_unsupported_dtype():
    with pytest.raises(TypeError):
        payload_tag(1, np.zeros(2, np.float64))


def test_sim_fabric_detects_deadlock():
    fabric = SimFabric(2)
    eps = [fabric.endpoint(r) for r in range(2)]
    with pytest.raises(ProtocolError, match="deadlock"):
        fabric.run([lambda: eps[0].recv(1), lambda: eps[1].recv(0)])


def test_sim_fabric_rejects_leftover_messages():
    fabric = SimFabric(2)
    ep = fabric.endpoint(0)
    with pytest.raises(ProtocolError, match="undelivered"):
        fabric.run([lambda: ep.send(1, 1, 1, np.zeros(1, np.uint16)), lambda: None])


def test_sim_fabric_reraises_rank_errors():
    fabric = SimFabric(2)

    def boom():
        raise KeyError("x")

    with pytest.raises(KeyError):
        fabric.run([boom, lambda: None])


def test_parse_roster():
    assert parse_roster("# ranks\n127.0.0.1:5000\nhost:6000  # two\n") == [("127.0.0.1", 5000), ("host", 6000)]
    with pytest.raises(ValueError):
        parse_roster("nohost\n")
    with pytest.raises(ValueError):
        parse_roster("# empty\n")


def test_tcp_mesh_all_reduce():
    roster = free_loopback_roster(3)
    out = [None] * 3
    errors = []

    def rank(r):
        try:
            ep = TcpEndpoint(r, roster, timeout=20)
            try:
                out[r] = all_reduce(ProcessGroup(ep), np.full(6, r + 1, np.float32))
            finally:
                ep.close()
        except Exception as exc:  # pragma: no cover - reported below
            errors.append(exc)

    threads = [threading.Thread(target=rank, args=(r,)) for r in range(3)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(30)
    assert not errors
    assert all(o is not None and np.all(o == 6.0) for o in out)
