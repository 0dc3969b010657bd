import numpy as np
import pytest

from njepa.config import RunConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**overrides) -> RunConfig:
    """A very small model on 16x16 images (4x4 grid) for fast end-to-end checks."""
    cfg = RunConfig()
    base = {
        "model.image_size": 16, "model.patch_size": 4, "model.embed_dim": 16, "model.depth": 2,
        "model.heads": 2, "model.pred_embed_dim": 8, "model.pred_depth": 1, "model.pred_heads": 2,
        "train.batch_size": 4, "train.steps": 3, "data.synthetic_per_class": 4,
        "data.synthetic_test_per_class": 4, "probe.epochs": 5, "probe.last_k": 2,
        "run.wall_clock": False,
    }
    base.update(overrides)
    for k, v in base.items():
        cfg.set(k, v)
    return cfg.validate()


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record():
    """Store one acceptance line: record(criterion, passed, detail)."""
    def _record(criterion: int, passed: bool, detail: str) -> None:
        _ACCEPTANCE[criterion] = (bool(passed), detail)
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
