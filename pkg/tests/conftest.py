"""
Shared fixtures: a tiny toy-fixture dataset on disk and small run configurations.
"""

import os

import pytest
import torch

from agra.config import build_config
from agra.data import load_manifest
from agra.toy_data import make_toy_dataset


def pytest_collection_modifyitems(config, items):
    if os.getenv("AGRA_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set AGRA_RUN_SLOW=1 to run full-fixture acceptance tests")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def toy_manifests(tmp_path_factory) -> dict[str, str]:
    """A small two-domain fixture: 70 source faces, 50 target faces."""
    return make_toy_dataset(tmp_path_factory.mktemp("toy"), n_source=70, n_target=50, seed=0)


@pytest.fixture(scope="session")
def source_manifest(toy_manifests):
    return load_manifest(toy_manifests["toy_source"], "toy_source")


@pytest.fixture(scope="session")
def target_manifest(toy_manifests):
    return load_manifest(toy_manifests["toy_target"], "toy_target")


@pytest.fixture
def make_cfg(tmp_path, toy_manifests):
    """Factory for a fast RunConfig pointed at the tiny fixture; extra `--set` style overrides allowed."""
    def _make(*overrides: str, **sections):
        data = {
            "seed": 0,
            "output_dir": str(tmp_path / "run"),
            "train": {"batch_size": 8, "stage1_epochs": 1, "stage2_epochs": 1, "lr": 0.01,
                      "plft_epochs": 1, "early_stopping_patience": None},
            "bank": {"kmeans_iters": 20},
            "protocol": {"source": "toy_source", "targets": ["toy_target"], "manifests": dict(toy_manifests)},
        }
        for key, value in sections.items():
            data.setdefault(key, {}).update(value)
        return build_config(data, list(overrides))
    return _make


@pytest.fixture
def cfg(make_cfg):
    return make_cfg()


@pytest.fixture
def images():
    g = torch.Generator().manual_seed(0)
    return torch.rand(3, 3, 112, 112, generator=g)


@pytest.fixture
def landmarks():
    return torch.tensor([
        [[38.0, 44.0], [74.0, 44.0], [56.0, 64.0], [42.0, 84.0], [70.0, 84.0]],
        [[30.0, 40.0], [80.0, 40.0], [56.0, 60.0], [40.0, 90.0], [72.0, 90.0]],
        [[0.0, 0.0], [111.0, 111.0], [56.0, 56.0], [10.0, 100.0], [100.0, 10.0]],
    ])


def central_difference_agreement(loss_fn, params, coords_per_param: int = 8, eps: float = 1e-4,
                                 rtol: float = 1e-4, atol: float = 1e-6, seed: int = 0) -> float:
    """
    Fraction of sampled parameter coordinates where autograd agrees with a
    central difference (f(p + eps) - f(p - eps)) / 2eps.

    Args:
        loss_fn: Zero-argument callable returning a scalar tensor
        params: Leaf tensors to perturb in place; restored afterwards
    """
    grads = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    g = torch.Generator().manual_seed(seed)
    agree = total = 0
    with torch.no_grad():
        for p, grad in zip(params, grads):
            grad = torch.zeros_like(p) if grad is None else grad
            flat, flat_grad = p.data.view(-1), grad.reshape(-1)
            for i in torch.randperm(flat.numel(), generator=g)[:coords_per_param].tolist():
                original = flat[i].item()
                flat[i] = original + eps
                up = loss_fn().item()
                flat[i] = original - eps
                down = loss_fn().item()
                flat[i] = original
                numeric = (up - down) / (2 * eps)
                agree += abs(numeric - flat_grad[i].item()) <= atol + rtol * abs(numeric)
                total += 1
    return agree / total


@pytest.fixture
def grad_agreement():
    return central_difference_agreement
