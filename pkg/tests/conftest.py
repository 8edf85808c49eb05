import numpy as np
import pytest
import torch

from checkpoint import ModelBundle
from config import TestingConfig, run_config_from_dict
from dataset import build_toy_dataset
from skeleton import canonical_topology


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ('CROSSMOTION_ENV', 'CROSSMOTION_RUN_DIR', 'CROSSMOTION_CHECKPOINT'):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def topo():
    return canonical_topology()


@pytest.fixture(scope='session')
def toy():
    """Two species, one record per gait, short clips."""
    return build_toy_dataset(seed=3, species_count=2, records_per_gait=1, min_length=24, max_length=40)


@pytest.fixture
def records(toy):
    return toy[1]


@pytest.fixture
def micro_config(tmp_path):
    return run_config_from_dict({'run_dir': str(tmp_path / 'run')}, TestingConfig.RUN_OVERRIDES)


@pytest.fixture
def micro_bundle(micro_config):
    return ModelBundle(micro_config)


def _central_difference(loss_fn, tensors, num_coords, step, seed):
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, tensors, allow_unused=True)
    analytic = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, analytic)]

    sizes = np.array([t.numel() for t in tensors])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picked = rng.choice(total, size=min(num_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    a, n = [], []
    with torch.no_grad():
        for flat in picked:
            k = int(np.searchsorted(offsets, flat, side='right') - 1)
            t = tensors[k].view(-1)
            i = int(flat - offsets[k])
            original = t[i].item()
            t[i] = original + step
            up = loss_fn().item()
            t[i] = original - step
            down = loss_fn().item()
            t[i] = original
            n.append((up - down) / (2 * step))
            a.append(analytic[k].reshape(-1)[i].item())
    a, n = np.array(a), np.array(n)
    return np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)


@pytest.fixture
def gradcheck():
    """Relative error between autograd and central differences over sampled coordinates.

    Tensors must be float64 leaves with ``requires_grad``. The loss function is
    re-evaluated under ``no_grad`` for each perturbation, so it must be deterministic.
    """
    def check(loss_fn, tensors, num_coords=200, step=1e-5, seed=0):
        return _central_difference(loss_fn, list(tensors), num_coords, step, seed)

    return check
