import os
import time

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from camodepth.attack import optimize_texture
from camodepth.scenegen import SceneGenConfig, generate_dataset

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(int(os.environ.get("CAMODEPTH_THREADS", torch.get_num_threads())))


@pytest.fixture(scope="session")
def small_config():
    return SceneGenConfig(height=16, width=16)


@pytest.fixture(scope="session")
def small_scenes(small_config):
    return generate_dataset(small_config, 6, seed=3)


@pytest.fixture(scope="session")
def rig_scenes():
    return generate_dataset(SceneGenConfig(), 8, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class Rig:
    """Scenes plus a trained victim for one master seed, built once per session."""

    def __init__(self, seed: int):
        from camodepth.config import PipelineConfig
        from camodepth.pipeline import gen_scenes, train_stage

        t0 = time.perf_counter()
        self.cfg = PipelineConfig(seed=seed)
        self.sets = gen_scenes(self.cfg)
        self.result = train_stage(self.cfg, self.sets["train"])
        self.model = self.result.model
        self.build_seconds = time.perf_counter() - t0
        self.attacks = {}  # (loss_terms, column) -> seed
        self.seconds = {}  # stage -> wall clock
        self.run = None
        self.reports = None

    def full_attack(self):
        """Default attack (all losses, TC and PA on) and its paired evaluation; computed once."""
        if self.run is None:
            from camodepth.pipeline import eval_stage, resolved

            t0 = time.perf_counter()
            self.run = optimize_texture(self.model, self.sets["attack"], resolved(self.cfg).attack)
            self.seconds["attack"] = time.perf_counter() - t0
            t0 = time.perf_counter()
            self.reports = {r.method: r for r in eval_stage(self.cfg, self.model, self.sets["eval"], self.run.seed)}
            self.seconds["eval"] = time.perf_counter() - t0
            self.attacks[(("a", "st", "nps"), "Full")] = self.run.seed
        return self.reports


@pytest.fixture(scope="session")
def trained_rig():
    cache = {}

    def get(seed: int = 0) -> Rig:
        if seed not in cache:
            cache[seed] = Rig(seed)
        return cache[seed]

    return get


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def acceptance_log(request):
    """Criterion number -> one-line verdict, printed at the end of the session."""
    return request.config.stash.setdefault(ACCEPTANCE_KEY, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(lines):
        for line in lines[key]:
            terminalreporter.write_line(line)
