import dataclasses
import time

import numpy as np
import pytest

from ddnet.config import TrainConfig
from ddnet.data import load_manifest_arrays, synth_generate
from ddnet.train import train

DESK_SEEDS = (0, 1, 2)
DESK_PAIRS = 200
DESK_SIZE = 64


@dataclasses.dataclass
class DeskRun:
    variant: str
    seed: int
    history: list
    seconds: float

    @property
    def final(self):
        return self.history[-1].report


@pytest.fixture(scope="session")
def desk_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    train_m, test_m = synth_generate(DESK_PAIRS, DESK_SIZE, 0, root)
    return load_manifest_arrays(train_m), load_manifest_arrays(test_m)


@pytest.fixture(scope="session")
def desk_runs(desk_data):
    """Desk-scale training for both wirings over three seeds (about half an hour)."""
    train_set, test_set = desk_data
    runs = {}
    for variant in ("dense_deformable", "plain_deformable"):
        for seed in DESK_SEEDS:
            cfg = TrainConfig.preset("desk")
            cfg.model.variant = variant
            cfg.seed = seed
            start = time.perf_counter()
            result = train(cfg, train_set, test_set, log=lambda line: None)
            runs[variant, seed] = DeskRun(variant, seed, result.history, time.perf_counter() - start)
    return runs


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line for a numbered criterion, then assert it."""
    def emit(number, title, passed, detail):
        with capsys.disabled():
            print(f"\ncriterion {number} {title}: {'PASS' if passed else 'FAIL'} ({detail})")
        assert passed, detail
    return emit


def median(values):
    return float(np.median(list(values)))
