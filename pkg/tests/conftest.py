import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sfda_prompt import cli, data
from sfda_prompt.config import parse_config, serialize_config
from sfda_prompt.segnet import SegModel, SegModelConfig, build_model

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=15,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

TINY = SegModelConfig(in_channels=1, base_channels=2, depth=2, num_classes=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return build_model(TINY, seed=3, dtype=np.float64)


@pytest.fixture(scope="session")
def small_source():
    """Small two-domain labeled set at 16x16."""
    return [data.gen_domain(data.DOMAIN_PRESETS[name], 12, (16, 16, 1), seed=k)
            for k, name in enumerate(("source_a", "source_b"))]


@pytest.fixture(scope="session")
def small_target():
    return data.gen_domain(data.DOMAIN_PRESETS["target"], 12, (16, 16, 1), seed=9)


# ------------------------------------------------------------ desk benchmark

ROOT = Path(__file__).resolve().parents[1]
DESK_CONFIG = ROOT / "configs" / "desk.conf"
ACCEPTANCE_LINES = []


class DeskRun:
    """Shipped desk preset materialized once per session through the CLI."""

    def __init__(self, root):
        self.root = root
        cfg = parse_config(DESK_CONFIG)
        self.config = replace(cfg, data_root=str(root / "data"), source_model=str(root / "source.bin"))
        self.config_path = root / "desk.conf"
        self.config_path.write_text(serialize_config(self.config))
        self.timings = {}
        self._splits = {}

    def _timed(self, name, argv):
        start = time.perf_counter()
        code = cli.main(argv)
        self.timings[name] = time.perf_counter() - start
        assert code == 0, f"{argv[0]} exited with {code}"

    def prepare(self):
        if "train-source" in self.timings:
            return self
        self._timed("gen-data", ["gen-data", "--config", str(self.config_path), "--out", self.config.data_root])
        self._timed("train-source", ["train-source", "--config", str(self.config_path), "--data",
                                     self.config.data_root, "--out", self.config.source_model, "--seed", "0"])
        return self

    @property
    def model(self):
        return SegModel.load(self.prepare().config.source_model)

    def split(self, domain, split):
        self.prepare()
        key = (domain, split)
        if key not in self._splits:
            self._splits[key] = data.load_split(self.config.data_root, domain, split)[0]
        return self._splits[key]


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    return DeskRun(tmp_path_factory.mktemp("desk"))


def pytest_collection_modifyitems(items):
    for item in items:
        if "desk" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
