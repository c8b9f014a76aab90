import os

import numpy as np
import pytest

from graft import numerics as nx
from graft.graph_store import Graph, generate_sbm
from graft.lm_pretrain import BASE_LM_DIR, base_vocab, load_base_lm


def numeric_grad(f, x: nx.Tensor, coords, eps: float = 1e-6) -> np.ndarray:
    out = np.empty(len(coords))
    for k, c in enumerate(coords):
        old = x.data[c]
        x.data[c] = old + eps
        up = f().item()
        x.data[c] = old - eps
        down = f().item()
        x.data[c] = old
        out[k] = (up - down) / (2 * eps)
    return out


def grad_check(f, inputs, rng, max_coords: int = 12, eps: float = 1e-6) -> float:
    """Worst relative error between autodiff and central differences over sampled coordinates.

    ``f`` is a no-arg callable building a scalar Tensor from ``inputs``.
    """
    loss = f()
    grads = nx.backward(loss)
    worst = 0.0
    for x in inputs:
        analytic = grads.get(x)
        if analytic is None:
            analytic = np.zeros(x.shape)
        flat = list(np.ndindex(*x.shape))
        pick = rng.choice(len(flat), min(max_coords, len(flat)), replace=False)
        coords = [flat[i] for i in pick]
        num = numeric_grad(f, x, coords, eps)
        ana = np.array([analytic[c] for c in coords])
        denom = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-7)
        worst = max(worst, float(np.linalg.norm(ana - num) / denom))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def vocab():
    return base_vocab()


@pytest.fixture(scope="session")
def sbm_sparse():
    return generate_sbm(2, 100, 0.04, 0.005, rng=np.random.default_rng(11))


@pytest.fixture(scope="session")
def sbm_dense():
    return generate_sbm(2, 100, 0.3, 0.02, rng=np.random.default_rng(12))


@pytest.fixture
def path_graph():
    return Graph.from_edges(3, [(0, 1), (1, 2)], [("a", "b"), ("b", "c"), ("c", "d")], [0, 0, 1], ["x", "y"])


@pytest.fixture(scope="session")
def base_lm():
    if not os.path.exists(os.path.join(BASE_LM_DIR, "lm.ckpt")):
        pytest.skip("base LM not built (scripts/pretrain_lm.py)")
    return load_base_lm()
