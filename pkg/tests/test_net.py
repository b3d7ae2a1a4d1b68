import json
import math
import socket

import numpy as np
import pytest

from ddml.client import PrivacyParams
from ddml.errors import BindFailure
from ddml.glm import ModelSpec
from ddml.net import (
    Connection,
    PoolServer,
    ServerThread,
    client_agent,
    parse_address,
    read_trace,
    replay_trace,
    server_from_config,
)
from ddml.pool import InstancePool, SpamPolicy
from ddml.sim import SimConfig

SPEC = ModelSpec.dense("logistic", 3)
PARAMS = PrivacyParams(math.log(16), 0.01)


def config(**kw):
    base = dict(spec=SPEC, privacy=PARAMS, k=5, spam=SpamPolicy(3.0, True))
    base.update(kw)
    return SimConfig(**base)


@pytest.fixture
def served():
    server = server_from_config(config(), record=True)
    with ServerThread(server) as st:
        yield server, st


def local_data(n=10, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((n, 3)), (rng.random(n) < 0.5).astype(float)


def test_parse_address():
    assert parse_address("10.0.0.1:9000") == ("10.0.0.1", 9000)
    assert parse_address("localhost") == ("localhost", 7070)
    assert parse_address(":8080") == ("127.0.0.1", 8080)


def test_identity_round_trip_is_accepted(served):
    _, st = served
    with Connection(st.address) as conn:
        drawn = conn.request({"op": "draw"})
        assert set(drawn) == {"ok", "weights", "version"}
        reply = conn.request({"op": "submit", "weights": drawn["weights"]})
    assert reply == {"ok": True, "status": "accepted"}


def test_spec_reply(served):
    _, st = served
    with Connection(st.address) as conn:
        assert ModelSpec.from_dict(conn.request({"op": "spec"})["spec"]) == SPEC


def test_errors_keep_the_connection_open(served):
    _, st = served
    with socket.create_connection(st.address) as sock, sock.makefile("rb") as fh:
        sock.sendall(b"{not json\n")
        assert json.loads(fh.readline())["error"].startswith("BadRequest")
        sock.sendall(b'{"op": "submit", "weights": [1, 2]}\n')
        assert json.loads(fh.readline())["error"].startswith("ShapeMismatch")
        sock.sendall(b'{"op": "launch"}\n[1, 2]\n{"op": "submit"}\n')
        for _ in range(3):
            assert json.loads(fh.readline())["error"].startswith("BadRequest")
        sock.sendall(b'{"op": "draw"}\n')
        assert json.loads(fh.readline())["ok"]


def test_replies_never_name_an_instance(served):
    server, _ = served
    replies = [server.handle({"op": "draw"}), server.handle({"op": "submit", "weights": [0.0] * 4})]
    for reply in replies:
        assert not {"index", "slot", "instance"} & set(reply)


def test_token_strategies_are_refused():
    pool = InstancePool(np.zeros((3, 1, 4)), "same_instance")
    with pytest.raises(ValueError):
        PoolServer(pool, SPEC, np.random.default_rng(0))
    with pytest.raises(ValueError):
        PoolServer(InstancePool(np.zeros((3, 1, 5))), SPEC, np.random.default_rng(0))


def test_agent_without_examples_does_nothing():
    summary = client_agent(("127.0.0.1", 1), np.zeros((0, 3)), [], PARAMS, 10, np.random.default_rng(0))
    assert summary.rounds == 0 and summary.submits == 0 and not summary.errors


def test_honest_agent_and_spammer(served):
    server, st = served
    X, y = local_data()
    honest = client_agent(st.address, X, y, PARAMS, 20, np.random.default_rng(1))
    assert honest.rounds == 20 and honest.spec_fetches == 1 and not honest.errors
    spammer = client_agent(st.address, X, y, PARAMS, 5, np.random.default_rng(2), update=lambda w: w + 100.0)
    assert spammer.rejected_spam == 5
    counters = st.call(lambda: dict(server.pool.counters))
    assert counters["rejected_spam"] == honest.rejected_spam + 5 and counters["submits"] == 25


def test_agent_refetches_a_revised_spec(served):
    server, st = served
    X, y = local_data()
    revised = SPEC.revised()
    calls = []

    def update(w):
        if not calls:
            st.call(server.set_spec, revised)
        calls.append(1)
        return w

    summary = client_agent(st.address, X, y, PARAMS, 3, np.random.default_rng(3), update=update)
    assert summary.spec_fetches == 2 and summary.rounds == 3
    with pytest.raises(ValueError):
        server.set_spec(ModelSpec.dense("logistic", 4))


def test_agent_gives_up_when_nobody_listens():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    X, y = local_data()
    summary = client_agent(("127.0.0.1", port), X, y, PARAMS, 2, np.random.default_rng(0), max_retries=2, backoff=0.001)
    assert summary.retries == 2 and summary.rounds == 0
    assert summary.errors and "gave up" in summary.errors[0]


def test_accept_rate_liveness():
    server = server_from_config(config(strategy="accept_rate", k=10, spam=SpamPolicy()))
    assert server.pool.k == 1
    weights = [0.0] * 4
    statuses = [server.handle({"op": "submit", "weights": weights})["status"] for _ in range(10_000)]
    accepted = statuses.count("accepted")
    assert abs(accepted - 1000) <= 4 * math.sqrt(10_000 * 0.09)
    assert accepted + statuses.count("dropped") == 10_000


def test_bind_failure(served):
    _, st = served
    other = server_from_config(config())
    with pytest.raises(BindFailure):
        ServerThread(other, *st.address).start()


def test_shutdown_writes_snapshot_and_replayable_trace(tmp_path):
    cfg = config(seed=4)
    snap_path, trace_path = tmp_path / "pool.json", tmp_path / "trace.ndjson"
    server = server_from_config(cfg, record=True, snapshot_path=snap_path, trace_path=trace_path)
    X, y = local_data()
    with ServerThread(server) as st:
        client_agent(st.address, X, y, PARAMS, 30, np.random.default_rng(5))
        client_agent(st.address, X, y, PARAMS, 3, np.random.default_rng(6), update=lambda w: w - 50.0)
    snap = json.loads(snap_path.read_text())
    assert snap["counters"]["submits"] == 33 and len(snap["instances"]) == 5
    assert ModelSpec.from_dict(snap["spec"]) == SPEC
    replayed = replay_trace(cfg, read_trace(trace_path)).snapshot()
    assert replayed["instances"] == snap["instances"]
    assert replayed["counters"] == snap["counters"]
