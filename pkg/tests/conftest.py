import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from elasticlab import backbone as bb
from elasticlab.config import ModelConfig, TrainConfig
from elasticlab.data import load_corpus, make_synthetic_images
from elasticlab.trainer import pretrain_teacher

settings.register_profile("lab", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("lab")


def tiny_config(**kw):
    base = dict(layers=2, hidden=16, heads=2, mlp_hidden=32, max_seq=16, vocab_size=128)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_teacher():
    """A briefly pretrained small causal model (a few seconds of CPU)."""
    cfg = tiny_config(hidden=32, mlp_hidden=64, max_seq=32)
    corpus = load_corpus("mixed")
    teacher, _ = pretrain_teacher(cfg, corpus.train, TrainConfig(lr=3e-3, batch_size=16, seq_len=32, max_steps=60))
    return teacher


@pytest.fixture(scope="session")
def tiny_encoder_teacher():
    cfg = tiny_config(mode="encoder", hidden=32, mlp_hidden=64, image_grid=4, patch_dim=12)
    x, _ = make_synthetic_images(64, grid=4, classes=4, seed=0)
    teacher, _ = pretrain_teacher(cfg, x, TrainConfig(lr=3e-3, batch_size=16, max_steps=30))
    return teacher


@pytest.fixture
def fresh_model():
    return bb.build_model(tiny_config())


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion."""
    lines = request.config.stash[ACCEPTANCE_KEY]

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"ACCEPTANCE {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"
        print(line)
        lines.append((number, line))
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
