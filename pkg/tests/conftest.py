import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """Small rendered-digit corpus shared by the io/cli tests."""
    from semrobust.synthdata import write_corpus

    out = tmp_path_factory.mktemp("corpus")
    write_corpus(out, n_train=600, n_test=240, seed=0)
    return out


@pytest.fixture(scope="session")
def tiny_xy():
    """Random 16-pixel 3-class data for dense-arch estimator tests."""
    rng = np.random.default_rng(0)
    X = rng.uniform(0, 1, size=(90, 16)).astype(np.float32)
    y = rng.integers(0, 3, size=90)
    # nudge class structure into the pixels so short training runs do something
    for c in range(3):
        X[y == c, c] = np.clip(X[y == c, c] + 0.5, 0, 1)
    return X, y.astype(np.int64)
