import json
import socket
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xlab.models import build
from xlab.oracle import (
    BudgetExhausted, Oracle, OracleServer, ProtocolError, QueryValidationError, RemoteOracle,
    TransportError, decode_images, decode_probs, encode_images, encode_probs,
)


@pytest.fixture(scope="module")
def victim():
    return build("mlp", seed=11)


def images(n, seed=0):
    return np.random.default_rng(seed).random((n, 1, 28, 28), dtype=np.float32)


class TestLocalOracle:
    def test_budget_exact(self, victim):
        oracle = Oracle(victim, budget=10_000)
        x = images(1)
        for _ in range(10_000):
            oracle.query(x)
        assert oracle.used == 10_000
        with pytest.raises(BudgetExhausted):
            oracle.query(x)
        assert oracle.used == 10_000

    def test_zero_budget(self, victim):
        with pytest.raises(BudgetExhausted):
            Oracle(victim, budget=0).query(images(1))

    def test_no_partial_answers(self, victim):
        oracle = Oracle(victim, budget=5)
        oracle.query(images(3))
        with pytest.raises(BudgetExhausted):
            oracle.query(images(3))
        assert oracle.used == 3
        assert oracle.query(images(2)).shape == (2, 10)

    def test_rows_on_simplex(self, victim):
        p = Oracle(victim, budget=100).query(images(50, seed=3))
        assert p.dtype == np.float32
        assert (p >= 0).all()
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-5)

    @pytest.mark.parametrize("bad", [-0.01, 1.01, np.nan])
    def test_pixel_range(self, victim, bad):
        x = images(1)
        x[0, 0, 3, 3] = bad
        oracle = Oracle(victim, budget=10)
        with pytest.raises(QueryValidationError):
            oracle.query(x)
        assert oracle.used == 0

    def test_single_image_without_batch_axis(self, victim):
        assert Oracle(victim, budget=1).query(images(1)[0]).shape == (1, 10)

    def test_threads_never_overconsume(self, victim):
        oracle = Oracle(victim, budget=500)
        granted = []

        def worker(seed):
            x = images(1, seed)
            count = 0
            while True:
                try:
                    oracle.query(x)
                except BudgetExhausted:
                    break
                count += 1
            granted.append(count)

        threads = [threading.Thread(target=worker, args=(s,)) for s in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert sum(granted) == 500 == oracle.used

    def test_query_log(self, victim):
        oracle = Oracle(victim, budget=10, keep_log=True)
        oracle.query(images(2))
        oracle.query(images(3))
        assert [n for _, n in oracle.query_log] == [2, 3]


class TestWireFormat:
    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float32, st.tuples(st.integers(1, 4), st.just(1), st.integers(1, 5), st.integers(1, 5)),
                  elements=st.floats(0, 1, width=32)))
    def test_image_round_trip(self, x):
        y = decode_images(encode_images(x), x.shape[0], x.shape[1:])
        assert y.tobytes() == x.tobytes()

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float32, st.tuples(st.integers(1, 4), st.just(10)),
                  elements=st.floats(0, 1, width=32)))
    def test_probs_round_trip(self, p):
        wire = json.loads(json.dumps(encode_probs(p)))
        assert decode_probs(wire).tobytes() == p.tobytes()

    def test_bad_payload(self):
        with pytest.raises(ValueError):
            decode_images(encode_images(np.zeros((2, 1, 2, 2))), 3, (1, 2, 2))


@pytest.fixture
def server(victim):
    srv = OracleServer(Oracle(victim, budget=50)).start()
    yield srv
    srv.stop()


def raw_exchange(address, lines):
    with socket.create_connection(address, timeout=5) as sock:
        f = sock.makefile("rwb")
        out = []
        for line in lines:
            f.write(line + b"\n")
            f.flush()
            out.append(json.loads(f.readline()))
        return out


class TestRemoteOracle:
    def test_matches_local(self, victim, server):
        x = images(4, seed=5)
        local = Oracle(victim, budget=4).query(x)
        with RemoteOracle(server.address) as remote:
            got = remote.query(x)
            assert remote.used == 4
        assert got.tobytes() == local.tobytes()

    def test_budget_error_code(self, server):
        frame = {"id": 1, "op": "query", "n": 60, "images": encode_images(images(60))}
        (reply,) = raw_exchange(server.address, [json.dumps(frame).encode()])
        assert reply == {"id": 1, "error": "BUDGET", "msg": reply["msg"]}
        with RemoteOracle(server.address) as remote:
            remote.query(images(50))
            with pytest.raises(BudgetExhausted):
                remote.query(images(1))

    def test_validation_error(self, server):
        x = images(1)
        x[0, 0, 0, 0] = 2.0
        with RemoteOracle(server.address) as remote:
            with pytest.raises(QueryValidationError):
                remote.query(x)
            assert remote.used == 0

    def test_malformed_frame_reports_line(self, server):
        good = json.dumps({"id": 1, "op": "status"}).encode()
        replies = raw_exchange(server.address, [good, b"{not json", b'{"id": 3, "op": "query", "n": 1}'])
        assert replies[1]["error"] == "PROTOCOL" and replies[1]["msg"].startswith("line 2:")
        assert replies[2]["error"] == "PROTOCOL" and replies[2]["msg"].startswith("line 3:")
        assert replies[2]["id"] == 3

    def test_connection_loss_is_transport_error(self, victim):
        srv = OracleServer(Oracle(victim, budget=10)).start()
        remote = RemoteOracle(srv.address)
        srv.stop()
        remote._sock.shutdown(socket.SHUT_RDWR)
        with pytest.raises(TransportError):
            remote.query(images(1))

    def test_connect_refused(self):
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            port = s.getsockname()[1]
        with pytest.raises(TransportError):
            RemoteOracle(("127.0.0.1", port), timeout=2)

    def test_concurrent_clients_saturate_exactly(self, victim):
        budget = 200
        srv = OracleServer(Oracle(victim, budget=budget)).start()
        granted = []

        def worker(seed):
            count = 0
            with RemoteOracle(srv.address) as remote:
                x = images(1, seed)
                while True:
                    try:
                        remote.query(x)
                    except BudgetExhausted:
                        break
                    count += 1
            granted.append(count)

        threads = [threading.Thread(target=worker, args=(s,)) for s in range(6)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        try:
            assert sum(granted) == budget
            with RemoteOracle(srv.address) as remote:
                assert remote.used == budget
        finally:
            srv.stop()


def test_protocol_error_carries_line():
    err = ProtocolError("boom", line=7)
    assert err.line == 7 and str(err) == "line 7: boom"
