import os
from pathlib import Path

import pytest
import torch

from mcld.persistence import load_config
from mcld.stages import StageCache, eval_pairs, generate_pairs

torch.set_num_threads(1)

CACHE_DIR = Path(os.environ.get("MCLD_TEST_CACHE", Path(__file__).resolve().parent.parent / ".cache"))


@pytest.fixture(scope="session")
def tiny_cfg():
    return load_config(overrides={"preset": "tiny"})


@pytest.fixture(scope="session")
def stage_cache():
    return StageCache(CACHE_DIR)


@pytest.fixture(scope="session")
def train_pairs(tiny_cfg):
    return generate_pairs(tiny_cfg, tiny_cfg.train_pairs)


@pytest.fixture(scope="session")
def test_pairs(tiny_cfg):
    return eval_pairs(tiny_cfg, 100)


@pytest.fixture(scope="session")
def trained_ae(tiny_cfg, stage_cache, train_pairs):
    return stage_cache.autoencoder(tiny_cfg, train_pairs)


@pytest.fixture(scope="session")
def trained_face(tiny_cfg, stage_cache, train_pairs):
    return stage_cache.face(tiny_cfg, train_pairs)


@pytest.fixture(scope="session")
def full_models(tiny_cfg, stage_cache, train_pairs, trained_ae, trained_face):
    """Trained full preset, seed 0: the same checkpoint the acceptance ablation uses."""
    import dataclasses

    cfg = dataclasses.replace(tiny_cfg, ablation="full", seed=0)
    return stage_cache.diffusion(cfg, trained_ae, trained_face, train_pairs)[0]


@pytest.fixture(scope="session")
def small_models():
    """Untrained 32x32 models: cheap, for algebraic properties of sampling and editing."""
    from mcld.autoenc import Autoencoder
    from mcld.embedders import FaceEncoder
    from mcld.pipeline import build_models

    cfg = load_config(overrides={"preset": "tiny", "channels": 8, "d": 16, "ddim_steps": 4, "T": 200})
    torch.manual_seed(0)
    models = build_models(cfg, Autoencoder(cfg.f, cfg.latent_channels, 8), FaceEncoder(d=cfg.d, size=cfg.face_size))
    with torch.no_grad():
        for p in models.net.parameters():
            p.add_(0.05 * torch.randn_like(p))  # zero-initialised layers would hide condition effects
    return models


@pytest.fixture(scope="session")
def small_pairs():
    from mcld.synthdata import DatasetConfig, sample_pair

    return [sample_pair(i, DatasetConfig(canvas=(32, 32), factor=2)) for i in range(6)]


TRAINED_FIXTURES = {"trained_ae", "trained_face", "full_models", "ablation"}


def pytest_collection_modifyitems(items):
    for item in items:
        if TRAINED_FIXTURES & set(getattr(item, "fixturenames", ())):
            item.add_marker(pytest.mark.slow)
