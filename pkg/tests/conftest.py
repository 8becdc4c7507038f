import numpy as np
import pytest

from default_moe.config import ExperimentConfig
from default_moe.data import corpus_from_bytes


def fd_grad(f, x, step=1e-6):
    """Central-difference gradient of scalar ``f`` at array ``x`` (float64)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


@pytest.fixture
def small_text():
    rng = np.random.default_rng(7)
    words = [b"the", b"quick", b"brown", b"fox", b"jumps", b"over", b"lazy", b"dog", b"and", b"cat"]
    doc_a = b" ".join(words[i] for i in rng.integers(0, 10, 3000)) + b".\n"
    doc_b = b" ".join(words[i][::-1] for i in rng.integers(0, 10, 3000)) + b"!\n"
    return corpus_from_bytes([doc_a, doc_b], ["a", "b"], train_fraction=0.9)


def tiny_config(*overrides):
    base = ["model.hidden=16", "model.intermediate=24", "model.n_layers=3", "model.n_experts=4",
            "model.max_seq_len=16", "train.batch_size=4", "train.seq_len=12", "train.steps=20",
            "train.warmup_steps=2", "train.eval_interval=10", "train.eval_batches=2"]
    return ExperimentConfig().with_overrides(base + list(overrides))
