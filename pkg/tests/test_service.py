"""HTTP service endpoints: status mapping, payload schemas, and the
in-process application factory.

Exit-code convention over HTTP: malformed input (exit 2) maps to 422;
semantic failures (exit 1) are well-formed runs and return 200 with the
verdict in the body.
"""

import json

import pytest
from fastapi.testclient import TestClient
from jsonschema import Draft202012Validator

from attnforge.service.app import create_app

from conftest import packaged


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app())


@pytest.fixture(scope="module")
def validator():
    schema = json.loads(packaged("schemas/report.schema.json"))
    return Draft202012Validator(schema)


TINY = {"heads": 1, "seq_q": 16, "seq_k": 16, "d_qk": 4, "d_v": 4}


def test_health(client):
    r = client.get("/v1/health")
    assert r.status_code == 200
    body = r.json()
    assert body["ok"] is True and "version" in body


def test_variants_lists_all_builtins(client, validator):
    r = client.get("/v1/variants")
    assert r.status_code == 200
    body = r.json()
    validator.validate(body)
    names = [b["name"] for b in body["builtins"]]
    assert len(names) == 9 and names == sorted(names)
    assert "softmax-deepseek" in names


def test_check_passes_and_validates(client, validator):
    r = client.post("/v1/check", json={"variant": "relu",
                                       "overrides": TINY, "seed": 5})
    assert r.status_code == 200
    body = r.json()
    validator.validate(body)
    assert body["ok"] is True and body["exit_code"] == 0
    assert all(c["pass"] for c in body["comparisons"])


def test_unknown_variant_maps_to_422(client, validator):
    r = client.post("/v1/check", json={"variant": "softmsx"})
    assert r.status_code == 422
    body = r.json()
    validator.validate(body)
    assert body["exit_code"] == 2
    assert body["error"]["kind"] == "unknown-variant"


def test_malformed_variant_text_maps_to_422(client, validator):
    bad = json.dumps({"name": "x", "pattern": "parallel",
                      "dims": {"batch": 1, "heads": 1, "seq_q": 8,
                               "dqk": 4, "dv": 4}})
    r = client.post("/v1/check", json={"variant_text": bad})
    assert r.status_code == 422
    body = r.json()
    validator.validate(body)
    assert body["error"]["kind"] == "schema"
    assert "dims.seq_k" in body["error"]["message"]


def test_semantic_failure_stays_200(client, validator):
    zero = packaged("data/devices/desk.json")
    dev = json.loads(zero)
    for tier in dev["tiers"]:
        tier["capacity_bytes"] = 0
    r = client.post("/v1/schedule", json={
        "variant": "relu", "overrides": TINY,
        "device_text": json.dumps(dev)})
    assert r.status_code == 200
    body = r.json()
    validator.validate(body)
    assert body["ok"] is False and body["exit_code"] == 1
    assert body["error"]["kind"] == "no-feasible-plan"


def test_gradcheck_endpoint(client, validator):
    r = client.post("/v1/gradcheck", json={
        "variant": "relu",
        "overrides": {"heads": 1, "seq_q": 8, "seq_k": 8,
                      "d_qk": 4, "d_v": 4},
        "seed": 1, "samples": 6})
    assert r.status_code == 200
    body = r.json()
    validator.validate(body)
    assert body["ok"] is True
    assert {t["tensor"] for t in body["tensors"]} == {"q", "k", "v"}


def test_emit_is_deterministic_over_http(client, validator):
    req = {"variant": "relu", "scale": 0.03125}
    a = client.post("/v1/emit", json=req)
    b = client.post("/v1/emit", json=req)
    assert a.status_code == b.status_code == 200
    pa, pb = a.json(), b.json()
    validator.validate(pa)
    assert pa["kernel_text"] == pb["kernel_text"]
    assert pa["sha256"] == pb["sha256"]
    assert pa["kernel_text"].startswith('kernel "relu"')


def test_schedule_with_verify(client, validator):
    r = client.post("/v1/schedule", json={
        "variant": "relu",
        "overrides": {"heads": 1, "seq_q": 32, "seq_k": 32,
                      "d_qk": 16, "d_v": 16},
        "device_text": packaged("data/devices/toy-alpha.json"),
        "verify": True})
    assert r.status_code == 200
    body = r.json()
    validator.validate(body)
    assert body["verify"]["equal"] is True
    assert body["verify"]["space"] == 16384


def test_bench_single_row(client, validator):
    r = client.post("/v1/bench", json={
        "variants": ["relu"], "overrides": TINY, "repeats": 1,
        "blocks": [8]})
    assert r.status_code == 200
    body = r.json()
    validator.validate(body)
    assert len(body["rows"]) == 1
    row = body["rows"][0]
    assert row["candidate"] == "tiled" and row["repeats"] == 1
    assert row["ratio"] >= 0.0


def test_request_model_validation_is_fastapis_own(client):
    r = client.post("/v1/check", json={"variant": "relu",
                                       "scale": "not-a-number"})
    assert r.status_code == 422
    body = r.json()
    # pydantic validation error shape, not a run report
    assert "detail" in body and "schema" not in body
