import time

import numpy as np
import pytest

from srw.sessions import Session
from srw.text import Vocabulary

EXPERIMENT_SEEDS = (1, 2, 3)


@pytest.fixture(scope="session")
def ablation_run(tmp_path_factory):
    """Three-seed ablation experiment shared by the slow acceptance/behavior tests."""
    from srw.experiment import run_ablation

    out = tmp_path_factory.mktemp("ablation")
    started = time.time()
    results = [
        run_ablation(seed, out, n_sessions=5000, epochs=15)
        for seed in EXPERIMENT_SEEDS
    ]
    return {"results": results, "elapsed": time.time() - started, "out_dir": out}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_vocab():
    return Vocabulary(["dodge", "posters", "mopar", "banner", "poster", "banners"])


@pytest.fixture
def dodge_session():
    # Error-correction pattern: typo in the source, car context in the history.
    return Session(
        history=["dodge banners", "mopar banner", "mopar poster"],
        source="dodger posters",
        target="dodge posters",
        purchased_product="p00001",
        session_id="s1",
    )
