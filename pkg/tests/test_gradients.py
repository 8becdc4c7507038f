import json
from pathlib import Path

import numpy as np
import pytest

from default_moe import autodiff as ad
from default_moe.autodiff import Tensor
from default_moe.gradients import (REPORT_COLUMNS, ModelStateError, NonDeterministicFunction, UndefinedSimilarity,
                                   cosine, cosine_to_dense, dense_router_gradient, finite_difference_check,
                                   grad_report, gradcheck_model, paired_router_gradients, relative_error,
                                   router_gradient_error, vector_relative_error, write_grad_reports)
from default_moe.training import build_model

from conftest import tiny_config

CORPUS = Path(__file__).resolve().parents[1] / "data" / "corpus"


def tiny_model(*overrides):
    cfg = tiny_config("model.dtype=float64", *overrides)
    return build_model(cfg, 20)


def batch(seed=0, b=2, s=8, vocab=20):
    rng = np.random.default_rng(seed)
    return rng.integers(0, vocab, (b, s)), rng.integers(0, vocab, (b, s))


def test_fd_examples():
    w = Tensor(np.array([3.0]), requires_grad=True)
    rep = finite_difference_check(lambda: ad.mul(w, w).sum(), {"w": w})
    assert rep.max_rel_error < 1e-8
    a = Tensor(np.arange(40.0).reshape(5, 8) / 7, requires_grad=True)
    c = Tensor(np.random.default_rng(0).standard_normal((5, 8)))
    for step in (1e-2, 1e-5):
        rep = finite_difference_check(lambda: ad.sum_all(ad.mul(a, c)), {"a": a}, step=step)
        assert rep.max_rel_error < 1e-8


def test_fd_detects_wrong_gradient():
    x = Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)

    def f():
        return ad.custom_op(np.asarray((x.data ** 2).sum()), [x], lambda g: (g * 3 * x.data,), "bad")

    assert finite_difference_check(f, {"x": x}).max_rel_error > 0.1


def test_fd_detects_nondeterminism():
    x = Tensor(np.array([1.0]), requires_grad=True)
    rng = np.random.default_rng(0)
    with pytest.raises(NonDeterministicFunction):
        finite_difference_check(lambda: ad.scale(ad.sum_all(x), rng.random()), {"x": x})


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-12, 0.0) == pytest.approx(1e-4)
    assert vector_relative_error(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 0.0


def test_cosine_examples():
    g = np.random.default_rng(1).standard_normal((4, 3))
    assert cosine(g, g) == pytest.approx(1.0)
    assert cosine(g, -g) == pytest.approx(-1.0)
    with pytest.raises(UndefinedSimilarity):
        cosine(g, np.zeros_like(g))


@pytest.mark.parametrize("mode", ["topk", "dense", "default"])
def test_gradcheck_tiny_model(mode):
    model = tiny_model()
    if mode == "default":
        for layer in model.moe_layers:
            layer.bank.vectors[:] = np.random.default_rng(2).standard_normal(layer.bank.vectors.shape) * 0.1
    x, y = batch()
    rep = gradcheck_model(model, x, y, mode)
    assert rep.max_rel_error < 1e-4, rep.worst()
    assert set(rep.per_param) == set(model.parameters())


def test_gradcheck_requires_float64():
    with pytest.raises(ValueError):
        gradcheck_model(build_model(tiny_config(), 20), *batch(), "topk")


def test_identical_experts_give_identical_dense_rows():
    model = tiny_model()
    layer = model.moe_layers[0]
    for i in range(1, len(layer.experts)):
        for dst, src in zip(layer.experts[i], layer.experts[0]):
            dst.data[:] = src.data
    x, y = batch(3)
    # with equal expert outputs the probability gradient is the same in every column,
    # so softmax removes it entirely and the router gradient vanishes
    g = dense_router_gradient(model, x, y)[0]
    assert np.abs(g).max() < 1e-12


def test_dense_router_gradient_single_token_closed_form():
    """N=2 linear-in-pi mixture: dL/dW = (dL/dpi) J_softmax x^T, with dL/dpi_i = <g, E_i>."""
    from default_moe.config import MoeLayerConfig
    from default_moe.moe import MoELayer

    layer = MoELayer(MoeLayerConfig(n_experts=2, top_k=1, hidden=3, intermediate=4, routing="dense"),
                     np.random.default_rng(4), dtype=np.float64, init_std=0.7)
    x = np.array([[0.4, -1.1, 0.3]])
    g = np.array([[1.0, 2.0, -0.5]])
    y, outcome = layer(Tensor(x))
    ad.sum_all(ad.mul(y, Tensor(g))).backward()
    e = np.concatenate(layer.last_expert_outputs)
    p = outcome.probs.data[0]
    dpi = e @ g[0]
    dz = p * (dpi - p @ dpi)
    assert np.allclose(layer.router.grad, np.outer(dz, x[0]), rtol=1e-12)


def test_dense_router_gradient_matches_fd():
    model = tiny_model()
    x, y = batch(5)
    analytic = dense_router_gradient(model, x, y)
    with model.routing_mode("topk"), model.frozen_ema():
        _, _, _, recorded = model.loss(x, y, include_aux=False)
    for layer, g in zip(model.moe_layers, analytic):
        w = layer.router.data
        v = np.random.default_rng(6).standard_normal(w.shape)
        v /= np.linalg.norm(v)

        def f():
            with ad.no_grad(), model.routing_mode("dense"), model.frozen_ema():
                return model.loss(x, y, routing=recorded, include_aux=False)[0].item()

        w += 1e-5 * v
        up = f()
        w -= 2e-5 * v
        down = f()
        w += 1e-5 * v
        assert relative_error(float((g * v).sum()), (up - down) / 2e-5) < 1e-4


def test_eps_zero_when_k_equals_n():
    model = tiny_model()
    x, y = batch(7)
    for mode in ("topk", "default"):
        _, norms = router_gradient_error(model, x, y, mode, top_k=model.config.n_experts)
        assert norms == [0.0] * len(norms)


def test_eps_default_zero_for_perfect_default():
    model = tiny_model("model.n_layers=2")
    x, y = batch(8, b=1, s=1)
    with model.routing_mode("dense"), model.frozen_ema():
        model.forward(x)
    layer = model.moe_layers[0]
    layer.bank.vectors[:] = np.concatenate(layer.last_expert_outputs)
    _, norms = router_gradient_error(model, x, y, "default")
    assert norms == [0.0]
    assert cosine_to_dense(model, x, y, "default") == [pytest.approx(1.0, abs=1e-15)]


def test_topk_and_dense_agree_on_selected_rows_single_token():
    """d(loss)/d(pi) of the activated experts is identical in sparse and dense combines."""
    from default_moe.moe import combine_experts

    rng = np.random.default_rng(9)
    n, d = 8, 5
    outs = rng.standard_normal((n, d))
    g = rng.standard_normal((1, d))
    sel = 3
    grads = {}
    for mode in ("topk", "dense"):
        probs = Tensor(np.full((1, n), 1.0 / n), requires_grad=True)
        idx = [np.array([0]) if (mode == "dense" or i == sel) else np.array([], dtype=int) for i in range(n)]
        expert_t = [Tensor(outs[i:i + 1]) if idx[i].size else None for i in range(n)]
        y = combine_experts(probs, expert_t, idx)
        ad.sum_all(ad.mul(y, Tensor(g))).backward()
        grads[mode] = probs.grad[0]
    assert grads["topk"][sel] == grads["dense"][sel]
    rest = np.arange(n) != sel
    assert not grads["topk"][rest].any() and grads["dense"][rest].any()


def test_cosine_dense_to_itself_is_one():
    model = tiny_model()
    assert cosine_to_dense(model, *batch(10), "dense") == [pytest.approx(1.0)] * 2


def test_paired_gradients_leave_state_untouched():
    model = tiny_model()
    x, y = batch(11)
    before = [layer.bank.vectors.copy() for layer in model.moe_layers]
    paired_router_gradients(model, x, y, "default")
    assert all(np.array_equal(b, layer.bank.vectors) for b, layer in zip(before, model.moe_layers))


def test_paired_gradients_detect_state_change(monkeypatch):
    model = tiny_model()
    import default_moe.gradients as gm
    real = gm.router_gradients
    calls = {"n": 0}

    def meddling(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 2:
            model.moe_layers[0].router.data[0, 0] += 1.0
        return real(*args, **kwargs)

    monkeypatch.setattr(gm, "router_gradients", meddling)
    with pytest.raises(ModelStateError):
        gm.paired_router_gradients(model, *batch(12), "topk")


def test_default_error_below_topk_on_average_at_init():
    """Random 8c1 models, bank warmed on 50 single-token samples, then one fresh sample each.

    The error terms are per-sample quantities, so both the bank statistics and
    the evaluation use single-token samples drawn from the same text.
    """
    from default_moe.config import ExperimentConfig
    from default_moe.data import load_corpus, sample_batch

    corpus = load_corpus(CORPUS)
    eps_t, eps_d, cos_t, cos_d = [], [], [], []
    for seed in range(100):
        model = build_model(ExperimentConfig().with_overrides(["model.dtype=float64", f"model.seed={seed}"]),
                            corpus.vocab_size)
        with model.routing_mode("default"), ad.no_grad():
            for step in range(50):
                model.forward(sample_batch(corpus.train, 1, 1, seed, step)[0])
        x, y = sample_batch(corpus.val, 1, 1, seed, 999)
        for mode, eps, cos in (("topk", eps_t, cos_t), ("default", eps_d, cos_d)):
            mode_g, dense_g = paired_router_gradients(model, x, y, mode)
            eps.append(np.mean([np.linalg.norm(d - m) for m, d in zip(mode_g, dense_g)]))
            cos.append(np.mean([cosine(m, d) for m, d in zip(mode_g, dense_g)]))
    assert np.mean(eps_d) < np.mean(eps_t)
    assert np.mean(cos_d) > np.mean(cos_t)


def test_grad_report_and_files(tmp_path):
    model = tiny_model()
    batches = [batch(s) for s in range(3)]
    reports = [grad_report(model, batches, m, top_k=k, seed=0) for m in ("topk", "default") for k in (1, 4)]
    for r in reports:
        assert all(-1 <= c <= 1 for c in r.cosines) and r.n_samples == 3
        if r.top_k == 4:
            assert r.eps_norms == [0.0, 0.0]
    write_grad_reports(reports, tmp_path / "g.csv", tmp_path / "g.jsonl")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS) and len(lines) == 1 + 4 * 2
    assert len([json.loads(l) for l in (tmp_path / "g.jsonl").read_text().splitlines()]) == 4
