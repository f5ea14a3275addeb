import json

import numpy as np
import pytest

from conceptfuse import pipeline as pl
from conceptfuse.config import RunConfig
from conceptfuse.dataset import generate_dataset

SMALL_CONFIG = {
    "data_size": 200,
    "eval_pairs": 8,
    "eval_seeds": [0],
    "pno_pairs": 2,
    "epochs": 2,
    "pno": {"steps": 10},
    "encoders": {"epochs": 2},
    "denoiser": {"epochs": 5},
}

_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)


@pytest.fixture
def record_criterion(request):
    """Record one PASS/FAIL line for the acceptance summary, then assert."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> None:
        status = "PASS" if ok else "FAIL"
        line = f"[{status}] criterion {number}: {title}" + (f" | {detail}" if detail else "")
        request.config.stash[_ACCEPTANCE_KEY].append((number, line))
        print(line)
        assert ok, line

    return record


@pytest.fixture(scope="session")
def small_config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.json"
    path.write_text(json.dumps(SMALL_CONFIG))
    return path


@pytest.fixture(scope="session")
def small_cfg():
    return RunConfig.from_dict(SMALL_CONFIG)


@pytest.fixture(scope="session")
def small_ws(tmp_path_factory, small_cfg):
    """A fully trained workspace at toy size (a couple of seconds)."""
    ws = pl.Workspace(tmp_path_factory.mktemp("small_ws"))
    pl.stage_gen_data(ws, small_cfg.seed, small_cfg.data_size)
    pl.stage_train_encoders(ws, small_cfg)
    pl.stage_train_denoiser(ws, small_cfg)
    pl.stage_train_aligner(ws, small_cfg, "both")
    return ws


@pytest.fixture(scope="session")
def small_components(small_ws):
    return pl.Components.load(small_ws)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(3, 60)


@pytest.fixture(scope="session")
def default_cfg():
    return RunConfig()


@pytest.fixture(scope="session")
def default_ws(tmp_path_factory, default_cfg):
    """The default-configuration pipeline, trained once per session."""
    ws = pl.Workspace(tmp_path_factory.mktemp("default_ws"))
    pl.stage_gen_data(ws, default_cfg.seed, default_cfg.data_size)
    pl.stage_train_encoders(ws, default_cfg)
    pl.stage_train_denoiser(ws, default_cfg)
    for loss in ("both", "infonce", "attn"):
        pl.stage_train_aligner(ws, default_cfg, loss)
    return ws


@pytest.fixture(scope="session")
def default_components(default_ws):
    return pl.Components.load(default_ws)


@pytest.fixture(scope="session")
def default_dataset(default_ws):
    return default_ws.load_dataset()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
