from __future__ import annotations

import pytest
from fastapi.testclient import TestClient

from omgs.backends import FunctionBackend, HttpBackend, RecordingBackend
from omgs.deliberation import DeliberationConfig, run_case
from omgs.service import create_app
from omgs.synthetic import agent_policy, write_corpus


@pytest.fixture(scope="module")
def replay(tmp_path_factory, case_by_id, snapshot):
    inner = FunctionBackend(agent_policy)
    rec = RecordingBackend(inner, backend_id="svc")
    run_case(case_by_id["OV-001"], snapshot, rec, DeliberationConfig())
    path = tmp_path_factory.mktemp("svc") / "replay.json"
    rec.save(path)
    return path, inner


def test_generate_serves_recorded_responses(replay):
    path, inner = replay
    client = TestClient(create_app(path))
    for req in inner.requests[:3]:
        r = client.post("/generate", json=req.to_wire())
        assert r.status_code == 200 and set(r.json()) == {"message", "usage"}
        assert r.json()["message"] == agent_policy(req)[0]


def test_generate_unknown_request_is_404(replay):
    client = TestClient(create_app(replay[0]))
    r = client.post("/generate", json={"role": "Chair", "instruction": "x", "context": {}, "schema_id": "nope"})
    assert r.status_code == 404


def test_generate_without_replay_is_503():
    r = TestClient(create_app()).post("/generate", json={"role": "Chair", "instruction": "", "context": {}, "schema_id": "s"})
    assert r.status_code == 503


def test_http_backend_round_trip_through_service(replay, case_by_id, snapshot, monkeypatch):
    """The HTTP backend speaks the same wire contract the service serves."""
    path, _ = replay
    client = TestClient(create_app(path))
    monkeypatch.setenv("OMGS_BACKEND_TOKEN", "secret")
    backend = HttpBackend("http://testserver", client=client)
    result = run_case(case_by_id["OV-001"], snapshot, backend, DeliberationConfig())
    direct = run_case(case_by_id["OV-001"], snapshot, FunctionBackend(agent_policy), DeliberationConfig())
    assert result.summary == direct.summary


def test_ingest_route(tmp_path):
    corpus = write_corpus(tmp_path / "c.jsonl")
    client = TestClient(create_app())
    r = client.post("/ingest", json={"corpus": [str(corpus)], "out": str(tmp_path / "snap")})
    assert r.status_code == 200 and r.json()["entries"] == 53
    bad = client.post("/ingest", json={"corpus": [str(tmp_path / "missing.jsonl")], "out": str(tmp_path / "x")})
    assert bad.status_code == 422 and bad.json()["detail"]["stage"]


def test_missing_fields_are_422():
    client = TestClient(create_app())
    for route in ("/ingest", "/run", "/audit", "/score", "/stats", "/usage"):
        assert client.post(route, json={}).status_code == 422


def test_usage_route_empty_is_422(tmp_path):
    r = TestClient(create_app()).post("/usage", json={"paths": [str(tmp_path)]})
    assert r.status_code == 422 and r.json()["detail"]["stage"] == "usage"
