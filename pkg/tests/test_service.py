import math

import pytest
from fastapi.testclient import TestClient

from ddml.client import PrivacyParams
from ddml.glm import ModelSpec
from ddml.net import server_from_config
from ddml.pool import SpamPolicy
from ddml.service import create_app
from ddml.sim import SimConfig

SPEC = ModelSpec.dense("linear", 2)


@pytest.fixture
def client():
    cfg = SimConfig(spec=SPEC, privacy=PrivacyParams(1.0, 0.01), k=4, spam=SpamPolicy(3.0, True))
    return TestClient(create_app(server_from_config(cfg)))


def test_spec_and_draw(client):
    assert ModelSpec.from_dict(client.get("/spec").json()["spec"]) == SPEC
    body = client.post("/draw").json()
    assert len(body["weights"]) == 3 and body["version"] == SPEC.version


def test_submit_round_trip_and_counters(client):
    weights = client.post("/draw").json()["weights"]
    assert client.post("/submit", json={"weights": weights}).json() == {"ok": True, "status": "accepted"}
    spam = client.post("/submit", json={"weights": [1e6, 1e6, 1e6]})
    assert spam.json()["status"] == "rejected_spam"
    counters = client.get("/counters").json()
    assert counters["submits"] == 2 and counters["draws"] == 1
    assert len(client.get("/snapshot").json()["instances"]) == 4


def test_submit_errors(client):
    bad = client.post("/submit", json={"weights": [1.0]})
    assert bad.status_code == 400
    assert bad.json()["error"].startswith("ShapeMismatch")
    assert client.post("/submit", json={"weights": "nope"}).status_code == 422


def test_analyze(client):
    reports = client.post("/analyze", json={"k": 2, "epsilon": 2.0}).json()
    assert [r["adversary"] for r in reports] == ["I", "II", "III"]
    assert reports[1]["epsilon_effective"] == pytest.approx(0.5)
    assert reports[2]["epsilon_effective"] == pytest.approx(2.0 / (2 * math.sqrt(10_000)))
    assert client.post("/analyze", json={"k": 1, "epsilon": 1.0}).status_code == 422
