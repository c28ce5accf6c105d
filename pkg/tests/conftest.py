import numpy as np
import pytest

from layoutdoll import tensor as T


@pytest.fixture
def float64():
    """Run a test at 64-bit precision (finite-difference checks need it)."""
    old = T.get_default_dtype()
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(old)


@pytest.fixture(scope="session")
def micro_checkpoint(tmp_path_factory):
    """A tiny corpus plus a briefly trained checkpoint, shared by the
    service/CLI tests (mechanics only, no quality expectations)."""
    from layoutdoll.dataset import generate_corpus
    from layoutdoll.pipeline import micro_config, train_pipeline

    root = tmp_path_factory.mktemp("micro")
    corpus = root / "corpus"
    ck = root / "ck.zip"
    generate_corpus(corpus, 10, seed=3)
    train_pipeline(corpus / "manifest.jsonl", ck, 25, cfg=micro_config(0))
    return {"root": root, "corpus": corpus / "manifest.jsonl", "checkpoint": ck}


def numeric_grad(f, x, h=1e-4):
    """Central finite differences of a scalar-valued f at ndarray x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return np.abs(a - b).max() / denom
