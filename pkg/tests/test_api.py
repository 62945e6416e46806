"""
Tests for the FastAPI inference service.
"""

import pytest
import torch
from fastapi.testclient import TestClient

import main
from schemas import RunConfig
from agra.adversarial import AGRAModel
from agra.distribution_bank import initialize_bank

POINTS = [[38.0, 44.0], [74.0, 44.0], [56.0, 64.0], [42.0, 84.0], [70.0, 84.0]]


@pytest.fixture
def client():
    return TestClient(main.app)


@pytest.fixture
def loaded(monkeypatch):
    torch.manual_seed(0)
    g = torch.Generator().manual_seed(0)
    bank = initialize_bank(torch.rand(8, 6, 64, generator=g), torch.rand(8, 6, 64, generator=g), C=2)
    monkeypatch.setattr(main, "_state", {"model": AGRAModel(RunConfig()), "bank": bank, "checkpoint": "memory"})


def test_health_without_model(client, monkeypatch):
    monkeypatch.setattr(main, "_state", {"model": None, "bank": None, "checkpoint": None})
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json()["message"] == "model not loaded yet"


def test_predict_without_checkpoint(client, monkeypatch, tmp_path):
    monkeypatch.setattr(main, "_state", {"model": None, "bank": None, "checkpoint": None})
    monkeypatch.setattr(main.config, "CHECKPOINT", str(tmp_path / "absent.pt"))
    response = client.post("/predict", json={"image_path": "x.png", "landmarks": POINTS})
    assert response.status_code == 503


def test_predict(client, loaded, source_manifest):
    record = source_manifest.split("test")[0]
    request = {"image_path": f"{source_manifest.root}/{record.path}", "landmarks": record.landmarks}
    response = client.post("/predict", json=request)
    assert response.status_code == 200
    body = response.json()
    assert len(body["scores"]) == 7
    assert body["label"] == max(range(7), key=lambda k: body["scores"][k])
    assert body["label_name"] in {"surprise", "fear", "disgust", "happiness", "sadness", "anger", "neutral"}


def test_predict_bad_image(client, loaded, tmp_path):
    response = client.post("/predict", json={"image_path": str(tmp_path / "none.png"), "landmarks": POINTS})
    assert response.status_code == 400


def test_predict_bad_landmarks(client, loaded, source_manifest):
    record = source_manifest.split("test")[0]
    bad = POINTS[:4] + [[200.0, 5.0]]
    response = client.post("/predict", json={"image_path": f"{source_manifest.root}/{record.path}", "landmarks": bad})
    assert response.status_code == 400
