import math

import numpy as np
import pytest

from default_moe import autodiff as ad
from default_moe.autodiff import Tensor
from default_moe.config import ExperimentConfig
from default_moe.data import corpus_from_bytes
from default_moe.optim import AdamW, clip_grad_norm, cosine_lr
from default_moe.training import (Trainer, TrainingDiverged, bank_memory_scalars, build_model, compare_runs,
                                  evaluate, steps_to_target, throughput_bench)

from conftest import tiny_config


def smoke_corpus():
    rng = np.random.default_rng(0)
    phrase = rng.choice(list(b"abcdefgh "), 64).astype(np.uint8).tobytes()
    return corpus_from_bytes([phrase * 8], train_fraction=0.9)


def smoke_config(*extra):
    base = ["train.batch_size=8", "train.seq_len=32", "train.steps=200", "train.warmup_steps=10",
            "train.eval_interval=0", "model.max_seq_len=32"]
    return ExperimentConfig().with_overrides(base + list(extra))


def test_cosine_schedule_shape():
    assert cosine_lr(0, 1.0, 100, 10) == pytest.approx(0.1)
    assert cosine_lr(9, 1.0, 100, 10) == 1.0
    assert cosine_lr(10, 1.0, 100, 10) == 1.0
    assert cosine_lr(100, 1.0, 100, 10, 0.1) == pytest.approx(0.1)
    assert cosine_lr(55, 1.0, 100, 10, 0.0) == pytest.approx(0.5)


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    a.grad = np.array([3.0, 4.0])
    assert clip_grad_norm([a], 1.0) == 5.0
    assert np.linalg.norm(a.grad) == pytest.approx(1.0, rel=1e-6)


def test_adamw_first_step_moves_by_lr():
    p = Tensor(np.array([[1.0, -2.0]]), requires_grad=True)
    p.grad = np.array([[0.5, -3.0]])
    AdamW({"p": p}, lr=0.1, eps=0.0).step()
    assert np.allclose(p.data, [[0.9, -1.9]])


def test_learning_rate_zero_leaves_parameters(small_text):
    tr = Trainer(tiny_config("train.lr=0", "train.routing=default", "train.eval_interval=0"), small_text)
    before = {k: v.data.copy() for k, v in tr.model.parameters().items()}
    hist = tr.run(5)
    assert all(math.isfinite(r.train_loss) for r in hist)
    assert all(np.array_equal(before[k], v.data) for k, v in tr.model.parameters().items())


@pytest.mark.parametrize("mode", ["topk", "default", "dense"])
def test_identical_seeds_give_identical_traces(small_text, mode):
    runs = [Trainer(tiny_config(f"train.routing={mode}"), small_text).run() for _ in range(2)]
    keys = ("train_loss", "aux_loss", "grad_norm", "val_loss", "expert_counts")
    assert [[getattr(r, k) for k in keys] for r in runs[0]] == [[getattr(r, k) for k in keys] for r in runs[1]]


def test_smoke_convergence_on_memorizable_corpus():
    tr = Trainer(smoke_config(), smoke_corpus())
    hist = tr.run()
    assert np.mean([r.train_loss for r in hist[-10:]]) < 0.5 * hist[0].train_loss


def test_untrained_loss_is_log_vocab_on_uniform_bytes():
    raw = np.random.default_rng(1).integers(0, 256, 20000).astype(np.uint8).tobytes()
    corpus = corpus_from_bytes([raw])
    model = build_model(tiny_config(), corpus.vocab_size)
    loss, ppl = evaluate(model, corpus.val, 12)
    assert abs(loss - math.log(corpus.vocab_size)) < 0.05 * math.log(corpus.vocab_size)
    assert ppl == math.exp(loss)


def test_eval_invariant_to_partitioning(small_text):
    model = build_model(tiny_config("model.dtype=float64", "train.routing=default"), small_text.vocab_size)
    for layer in model.moe_layers:
        layer.bank.vectors[:] = np.random.default_rng(2).standard_normal(layer.bank.vectors.shape)
    a = evaluate(model, small_text.val, 12, batch_size=1, max_windows=30)[0]
    b = evaluate(model, small_text.val, 12, batch_size=7, max_windows=30)[0]
    assert a == pytest.approx(b, rel=1e-12)


def test_eval_does_not_touch_bank(small_text):
    model = build_model(tiny_config("train.routing=default"), small_text.vocab_size)
    before = [layer.bank.vectors.copy() for layer in model.moe_layers]
    evaluate(model, small_text.val, 12, max_windows=4)
    assert all(np.array_equal(b, layer.bank.vectors) for b, layer in zip(before, model.moe_layers))
    with pytest.raises(ValueError):
        evaluate(model, small_text.val[:1], 12)


def test_compare_against_itself_gives_identical_curves(small_text, tmp_path):
    cfg = tiny_config()
    a = compare_runs(cfg, ["topk"], [1], small_text)
    b = compare_runs(cfg, ["topk"], [1], small_text, out_dir=tmp_path)
    assert a["curves"] == b["curves"]
    entry = a["per_seed"][0]
    assert entry["topk"]["steps_to_target"] <= cfg.train.steps
    assert (tmp_path / "metrics_topk_seed1.csv").is_file() and (tmp_path / "summary.json").is_file()


def test_compare_reports_ratio_statistics(small_text):
    s = compare_runs(tiny_config(), ["topk", "default"], [1, 2, 3], small_text)
    m = s["modes_summary"]["default"]
    assert set(m) >= {"steps_to_target_ratio_mean", "steps_to_target_ratio_std", "final_val_loss_mean"}
    assert s["modes_summary"]["topk"]["steps_to_target_ratio_mean"] == 1.0


def test_dense_reaches_topk_target_no_later():
    """Seed-averaged curves: dense gets to top-k's final loss within top-k's step count."""
    cfg = smoke_config("train.eval_interval=10", "train.eval_batches=2")
    s = compare_runs(cfg, ["topk", "dense"], [0, 1, 2], smoke_corpus())
    steps = s["curves"]["topk_seed0"]["steps"]
    mean = {m: np.mean([s["curves"][f"{m}_seed{k}"]["val_loss"] for k in range(3)], axis=0) for m in ("topk", "dense")}
    target = mean["topk"][-1]
    dense_steps = steps_to_target(steps, mean["dense"], target)
    assert dense_steps is not None and dense_steps <= steps_to_target(steps, mean["topk"], target)


def test_compare_rejects_bad_requests(small_text):
    with pytest.raises(ValueError):
        compare_runs(tiny_config(), [], [0], small_text)
    with pytest.raises(ValueError):
        compare_runs(tiny_config("train.eval_interval=0"), ["topk"], [0], small_text)


def test_steps_to_target():
    assert steps_to_target([10, 20, 30], [3.0, 2.0, 1.0], 2.0) == 20
    assert steps_to_target([10, 20], [3.0, 2.5], 2.0) is None


def test_divergence_dumps_router_diagnostics(small_text, tmp_path):
    tr = Trainer(tiny_config("train.routing=default"), small_text, out_dir=tmp_path)
    tr.model.tok_emb.data[:] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        tr.train_step()
    layer = info.value.diagnostics["layers"][0]
    assert {"prob_max_mean", "prob_nan", "default_vector_norms"} <= set(layer)
    assert "diverged" in (tmp_path / "events_default_seed0.jsonl").read_text()


def test_routing_frequency_ratio(small_text):
    tr = Trainer(tiny_config("train.eval_interval=0"), small_text)
    tr.run(10)
    ratios = tr.routing_frequency_ratio()
    assert len(ratios) == len(tr.model.moe_layers) and all(r >= 1 for r in ratios)


def test_bank_memory_accounting():
    cfg = ExperimentConfig().model
    assert bank_memory_scalars(cfg) == 8 * 64 * 3
    model = build_model(tiny_config())
    assert model.bank_scalars() == sum(layer.bank.vectors.size for layer in model.moe_layers) == 4 * 16 * 2


def test_throughput_bench_dense_is_slower(small_text):
    cfg = tiny_config("model.n_experts=8", "model.intermediate=64", "train.batch_size=8")
    rates = throughput_bench(cfg, ["topk", "dense"], small_text, windows=10, steps_per_window=2)
    assert rates["dense"] < rates["topk"]
