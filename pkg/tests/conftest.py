import time

import numpy as np
import pytest

from scenecoattn import datasynth, relgraph, trainer
from scenecoattn import model as M


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar f over every coordinate of x (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture(scope="session")
def world():
    return datasynth.default_world()


@pytest.fixture(scope="session")
def small_corpus(world):
    return datasynth.generate(world, 40, seed=3)


@pytest.fixture(scope="session")
def small_graph(small_corpus):
    counts = relgraph.OccurrenceCounts(12).observe_frames(datasynth.build_history(small_corpus))
    return relgraph.build_matrix(counts)


@pytest.fixture
def tiny_cfg(small_corpus):
    return M.ModelConfig(vocab_size=len(small_corpus.vocab), d_model=16, n_heads=2, d_ff=32,
                         d_v=16, d_r=8, dropout=0.0)


OVERFIT_MODEL = dict(dropout=0.0)                      # otherwise the default desk config
OVERFIT_TRAIN = dict(lr=1e-3, max_steps=500, seed=0)


@pytest.fixture(scope="session")
def overfit_run(small_corpus, small_graph):
    """500 steps on the 32 training scenes of the small corpus (shared by several tests)."""
    cfg = M.ModelConfig(vocab_size=len(small_corpus.vocab), **OVERFIT_MODEL)
    start = time.perf_counter()
    result = trainer.train(small_corpus.train, small_corpus.vocab, small_graph, cfg,
                           trainer.TrainConfig(**OVERFIT_TRAIN))
    return result, cfg, time.perf_counter() - start
