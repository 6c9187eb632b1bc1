import json

import pytest
from fastapi.testclient import TestClient

from msnn.service.app import create_app


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app())


def _tiny_synth_payload(path, seed=3):
    return {
        "kind": "bandpower",
        "out": str(path),
        "trials": 40,
        "channels": 2,
        "timepoints": 32,
        "fs": 16.0,
        "bands": [[3.0, 4.0], [6.0, 7.0]],
        "active_channels": [[0], [1]],
        "amplitudes": [2.0, 2.0],
        "noise_sigma": 0.5,
        "seed": seed,
    }


_TINY_OVERRIDES = {
    "model.kernel_sizes": "8,4",
    "model.feature_maps": "2,4,4",
    "train.max_epochs": "3",
    "train.patience": "3",
}


def test_health(client):
    response = client.get("/health")
    assert response.status_code == 200
    body = response.json()
    assert body["status"] == "ok"


def test_synth_writes_dataset_and_sidecar(client, tmp_path):
    out = tmp_path / "data.epch"
    response = client.post("/synth", json=_tiny_synth_payload(out))
    assert response.status_code == 200
    body = response.json()
    assert str(out) in body["outputs"]
    assert out.exists()
    sidecar = json.loads((tmp_path / "data.epch.meta.json").read_text())
    assert sidecar["classes"][0]["channels"] == [0]


def test_unknown_generator_is_422(client, tmp_path):
    response = client.post("/synth", json={"kind": "nope", "out": str(tmp_path / "x")})
    assert response.status_code == 422


def test_train_eval_analyze_flow(client, tmp_path):
    data = tmp_path / "data.epch"
    assert client.post("/synth", json=_tiny_synth_payload(data)).status_code == 200

    train = client.post(
        "/train",
        json={
            "data": str(data),
            "out": str(tmp_path / "run"),
            "overrides": _TINY_OVERRIDES,
            "seed": 5,
        },
    )
    assert train.status_code == 200, train.text
    ckpt = tmp_path / "run" / "checkpoint.msnn"
    assert ckpt.exists()
    assert (tmp_path / "run" / "report.json").exists()
    assert (tmp_path / "run" / "config.resolved.ini").exists()

    ev = client.post(
        "/eval",
        json={"checkpoint": str(ckpt), "data": str(data), "out": str(tmp_path / "ev")},
    )
    assert ev.status_code == 200, ev.text
    assert "accuracy" in ev.json()["summary"]

    an = client.post(
        "/analyze",
        json={
            "checkpoint": str(ckpt),
            "data": str(data),
            "out": str(tmp_path / "an"),
            "analyses": ["psd", "features"],
            "stage": "pooled",
            "limit": 2,
        },
    )
    assert an.status_code == 200, an.text
    assert (tmp_path / "an" / "features_pooled.csv").exists()
    assert (tmp_path / "an" / "manifest.json").exists()


def test_eval_mode_conflict_is_422(client, tmp_path):
    response = client.post(
        "/eval",
        json={
            "out": str(tmp_path / "x"),
            "data": "whatever.epch",
            "kfold": 3,
            "record": "whatever.rec",
        },
    )
    assert response.status_code == 422
    assert "one evaluation mode" in response.json()["detail"]


def test_missing_checkpoint_is_404(client, tmp_path):
    response = client.post(
        "/eval",
        json={
            "checkpoint": str(tmp_path / "nope.msnn"),
            "data": str(tmp_path / "nope.epch"),
            "out": str(tmp_path / "x"),
        },
    )
    assert response.status_code == 404


def test_unknown_analysis_is_422(client, tmp_path):
    data = tmp_path / "d.epch"
    assert client.post("/synth", json=_tiny_synth_payload(data)).status_code == 200
    train = client.post(
        "/train",
        json={
            "data": str(data),
            "out": str(tmp_path / "r"),
            "overrides": _TINY_OVERRIDES,
        },
    )
    assert train.status_code == 200
    response = client.post(
        "/analyze",
        json={
            "checkpoint": str(tmp_path / "r" / "checkpoint.msnn"),
            "data": str(data),
            "out": str(tmp_path / "a"),
            "analyses": ["wat"],
        },
    )
    assert response.status_code == 422
    assert "unknown analysis" in response.json()["detail"]


def test_occupied_run_dir_is_422(client, tmp_path):
    data = tmp_path / "d.epch"
    assert client.post("/synth", json=_tiny_synth_payload(data)).status_code == 200
    out = tmp_path / "run"
    out.mkdir()
    (out / "junk.txt").write_text("x")
    response = client.post(
        "/train",
        json={"data": str(data), "out": str(out), "overrides": _TINY_OVERRIDES},
    )
    assert response.status_code == 422
    assert "not empty" in response.json()["detail"]
