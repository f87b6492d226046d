import dataclasses
import os
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from learned_sirt.classic import SirtConfig, sirt
from learned_sirt.lsirt import PhantomDataset, reconstruct, train
from learned_sirt.metrics import psnr
from learned_sirt.phantoms import gen_triangles
from learned_sirt.presets import preset, resolve_run_config
from learned_sirt.projector import get_projector
from learned_sirt.rng import make_rng

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

N_HELD_OUT = 10

# acceptance verdicts, printed in the terminal summary
VERDICTS = {}


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[number])


class DeskRun:
    """Train the desk-2d preset once per session and evaluate it on held-out data."""

    def __init__(self, root):
        self.run = resolve_run_config(preset("desk-2d"))
        self.root = root
        self.proj = get_projector(self.run.geometry, self.run.grid)
        self.held_out = [self._held_out(i) for i in range(N_HELD_OUT)]
        self.models = {}
        self.histories = {}
        self.seconds = {}

    def _held_out(self, i):
        truth = gen_triangles(int(make_rng(self.run.seed, "eval", i).integers(0, 2**63)), self.run.grid.dims)
        noise = make_rng(self.run.seed, "eval", i, 1).standard_normal(self.run.geometry.sino_shape)
        return truth, self.proj.forward(truth) + np.sqrt(self.run.lsirt.noise_variance) * noise

    def config(self, variant):
        return dataclasses.replace(self.run.lsirt, variant=variant)

    def train(self, variant, tag):
        if tag not in self.models:
            t0 = time.perf_counter()
            self.models[tag], self.histories[tag] = train(
                PhantomDataset(self.run.dataset["family"], self.run.grid.dims), self.run.geometry,
                self.run.grid, self.config(variant), seed=self.run.seed, run_dir=str(self.root / tag))
            self.seconds[tag] = time.perf_counter() - t0
        return self.models[tag]

    def checkpoint_bytes(self, tag):
        return (self.root / tag / "final.ckpt").read_bytes()

    def sirt_psnr(self):
        return [psnr(sirt(y, self.run.geometry, self.run.grid, SirtConfig(n_iter=100)), t)
                for t, y in self.held_out]

    def lsirt_psnr(self, variant, tag, snapshot=None):
        model = self.train(variant, tag)
        cfg = self.config(variant)
        final, early = [], []
        for t, y in self.held_out:
            x, snaps = reconstruct(y, self.run.geometry, self.run.grid, model, cfg,
                                   snapshots=() if snapshot is None else (snapshot,))
            final.append(psnr(x, t))
            if snapshot is not None:
                early.append(psnr(snaps[snapshot], t))
        return final, early


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    return DeskRun(tmp_path_factory.mktemp("desk"))
