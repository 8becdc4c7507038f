"""Training loop, evaluation, mode comparison and throughput measurement."""

from __future__ import annotations

import copy
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import NumericError, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, ModelConfig, TrainConfig
from .data import Corpus, eval_windows, load_corpus, sample_batch
from .model import MoETransformerLM
from .optim import AdamW, clip_grad_norm, cosine_lr
from .reporting import CsvLog, JsonlLog, write_json

logger = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """Loss became non-finite; ``diagnostics`` holds router and bank statistics."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class StepMetrics:
    step: int
    mode: str
    seed: int
    train_loss: float
    aux_loss: float
    lr: float
    grad_norm: float
    tokens_per_sec: float
    val_loss: Optional[float] = None
    ppl: Optional[float] = None
    expert_counts: list[list[int]] = field(default_factory=list)

    def row(self) -> dict:
        return asdict(self)


def build_model(config: ExperimentConfig, vocab_size: Optional[int] = None) -> MoETransformerLM:
    mcfg = config.model
    if vocab_size is not None and vocab_size != mcfg.vocab_size:
        mcfg = replace(mcfg, vocab_size=vocab_size)
    if config.train.seq_len > mcfg.max_seq_len:
        mcfg = replace(mcfg, max_seq_len=config.train.seq_len)
    return MoETransformerLM(mcfg, routing=config.train.routing, aux_alpha=config.train.aux_alpha)


def build_optimizer(model: MoETransformerLM, tcfg: TrainConfig) -> AdamW:
    return AdamW(model.parameters(), lr=tcfg.lr, betas=(tcfg.beta1, tcfg.beta2), eps=tcfg.eps,
                 weight_decay=tcfg.weight_decay)


def router_diagnostics(model: MoETransformerLM, outcomes=None) -> dict:
    """Router probability statistics and default-vector norms per MoE layer.

    Without ``outcomes`` (the forward pass failed before routing) only the
    bank norms are filled in.
    """
    diag = {"layers": []}
    outcomes = list(outcomes) if outcomes is not None else [None] * len(model.moe_layers)
    for layer, outcome in zip(model.moe_layers, outcomes):
        entry = {"prob_max_mean": None, "prob_min": None, "prob_nan": None, "expert_counts": None,
                 "default_vector_norms": np.linalg.norm(layer.bank.vectors, axis=1).tolist()}
        if outcome is not None:
            p = outcome.probs.data
            entry.update(prob_max_mean=float(np.nanmean(p.max(axis=1))), prob_min=float(np.nanmin(p)),
                         prob_nan=int(np.isnan(p).sum()), expert_counts=outcome.expert_counts().tolist())
        diag["layers"].append(entry)
    return diag


def train_step(model: MoETransformerLM, optimizer: AdamW, inputs: np.ndarray, targets: np.ndarray,
               lr: float, grad_clip: float = 1.0) -> tuple[float, float, float, list]:
    """Forward, backward, clip and one AdamW update.

    Default-vector EMA updates happen inside the forward pass. Returns
    ``(ce_loss, aux_loss, grad_norm, routing_outcomes)``.
    """
    model.zero_grad()
    try:
        total, ce, aux, outcomes = model.loss(inputs, targets)
    except NumericError as exc:
        raise TrainingDiverged(f"non-finite forward pass: {exc}", router_diagnostics(model)) from exc
    if not math.isfinite(total.item()):
        raise TrainingDiverged(f"non-finite loss {total.item()}", router_diagnostics(model, outcomes))
    total.backward()
    norm = clip_grad_norm(model.parameters().values(), grad_clip)
    if not math.isfinite(norm):
        raise TrainingDiverged(f"non-finite gradient norm {norm}", router_diagnostics(model, outcomes))
    optimizer.step(lr)
    return ce, aux, norm, outcomes


def evaluate(model: MoETransformerLM, tokens: np.ndarray, seq_len: int, batch_size: int = 16,
             max_windows: Optional[int] = None) -> tuple[float, float]:
    """Mean next-token cross-entropy over consecutive validation windows.

    Parameters and default vectors are left untouched; default routing uses
    the current vectors as fixed fill values. Returns ``(loss, perplexity)``.
    """
    if len(tokens) < 2:
        raise ValueError("validation stream is empty")
    inputs, targets = eval_windows(tokens, seq_len, max_windows)
    total = 0.0
    count = 0
    with model.frozen_ema(), no_grad():
        for start in range(0, len(inputs), batch_size):
            x, y = inputs[start:start + batch_size], targets[start:start + batch_size]
            _, ce, _, _ = model.loss(x, y, include_aux=False)
            total += ce * y.size
            count += y.size
    loss = total / count
    return loss, math.exp(loss)


class Trainer:
    """Owns one model, its optimizer and the data stream for a single run.

    Batches are a pure function of ``(train.seed, step)``, so runs in
    different routing modes see identical data and a resumed run continues
    exactly where the original left off.
    """

    def __init__(self, config: ExperimentConfig, corpus: Optional[Corpus] = None,
                 out_dir: Optional[str | Path] = None, run_name: Optional[str] = None):
        self.config = config
        self.corpus = corpus if corpus is not None else load_corpus(config.train.corpus, config.train.train_fraction)
        self.model = build_model(config, self.corpus.vocab_size)
        self.optimizer = build_optimizer(self.model, config.train)
        self.step = 0
        self.history: list[StepMetrics] = []
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.run_name = run_name or f"{config.train.routing}_seed{config.train.seed}"
        self._csv = self._events = None
        if self.out_dir is not None:
            self._csv = CsvLog(self.out_dir / f"metrics_{self.run_name}.csv")
            self._events = JsonlLog(self.out_dir / f"events_{self.run_name}.jsonl")

    @property
    def mode(self) -> str:
        return self.config.train.routing

    def lr_at(self, step: int) -> float:
        t = self.config.train
        return cosine_lr(step, t.lr, t.steps, t.warmup_steps, t.min_lr_ratio)

    def train_step(self) -> StepMetrics:
        t = self.config.train
        inputs, targets = sample_batch(self.corpus.train, t.batch_size, t.seq_len, t.seed, self.step)
        lr = self.lr_at(self.step)
        start = time.perf_counter()
        try:
            ce, aux, norm, outcomes = train_step(self.model, self.optimizer, inputs, targets, lr, t.grad_clip)
        except TrainingDiverged as exc:
            if self._events is not None:
                self._events.append({"event": "diverged", "step": self.step, "diagnostics": exc.diagnostics})
            raise
        elapsed = time.perf_counter() - start
        self.step += 1
        return StepMetrics(step=self.step, mode=self.mode, seed=t.seed, train_loss=ce, aux_loss=aux, lr=lr,
                           grad_norm=norm, tokens_per_sec=inputs.size / max(elapsed, 1e-12),
                           expert_counts=[o.expert_counts().tolist() for o in outcomes])

    def evaluate(self, max_windows: Optional[int] = None) -> tuple[float, float]:
        t = self.config.train
        if max_windows is None:
            max_windows = t.eval_batches * t.batch_size
        return evaluate(self.model, self.corpus.val, t.seq_len, t.batch_size, max_windows)

    def run(self, steps: Optional[int] = None,
            callback: Optional[Callable[[StepMetrics], None]] = None) -> list[StepMetrics]:
        """Train until ``steps`` total steps (default: the configured count)."""
        t = self.config.train
        steps = t.steps if steps is None else steps
        while self.step < steps:
            rec = self.train_step()
            if t.eval_interval and (rec.step % t.eval_interval == 0 or rec.step == steps):
                rec.val_loss, rec.ppl = self.evaluate()
                logger.info("%s step %d train %.4f val %.4f", self.run_name, rec.step, rec.train_loss, rec.val_loss)
            self.history.append(rec)
            self._log(rec)
            if t.checkpoint_path and t.checkpoint_interval and rec.step % t.checkpoint_interval == 0:
                self.save(t.checkpoint_path)
            if callback is not None:
                callback(rec)
        return self.history

    def _log(self, rec: StepMetrics) -> None:
        if self._csv is not None:
            self._csv.append(rec.row())
        if self._events is not None:
            row = rec.row()
            row.pop("tokens_per_sec")
            self._events.append({"event": "step", **row})

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.model, self.optimizer, self.step, self.config.to_dict(),
                        self.config.content_hash())

    def load(self, path: str | Path) -> None:
        header = load_checkpoint(path, self.model, self.optimizer)
        if header.get("config_hash") and header["config_hash"] != self.config.content_hash():
            logger.warning("checkpoint config hash differs from the current config")
        self.step = header["step"]

    def routing_frequency_ratio(self, last_fraction: float = 0.2) -> list[float]:
        """Per MoE layer, max/min expert share over the last part of the history."""
        recs = [r for r in self.history if r.expert_counts]
        if not recs:
            raise ValueError("no routing history recorded")
        tail = recs[-max(1, int(round(len(recs) * last_fraction))):]
        counts = np.sum([np.asarray(r.expert_counts) for r in tail], axis=0)
        ratios = []
        for row in counts:
            ratios.append(float("inf") if row.min() == 0 else float(row.max() / row.min()))
        return ratios


@dataclass
class RunSummary:
    mode: str
    seed: int
    steps: list[int]
    val_losses: list[float]
    final_val_loss: float
    train_losses: list[float]


def steps_to_target(steps: Sequence[int], losses: Sequence[float], target: float) -> Optional[int]:
    for s, v in zip(steps, losses):
        if v <= target:
            return s
    return None


def _run_one(config: ExperimentConfig, corpus: Corpus, mode: str, seed: int,
             out_dir: Optional[Path]) -> RunSummary:
    cfg = copy.deepcopy(config)
    cfg.train.routing = mode
    cfg.train.seed = seed
    cfg.model.seed = seed
    trainer = Trainer(cfg, corpus, out_dir, run_name=f"{mode}_seed{seed}")
    history = trainer.run()
    evals = [r for r in history if r.val_loss is not None]
    return RunSummary(mode, seed, [r.step for r in evals], [r.val_loss for r in evals],
                      evals[-1].val_loss, [r.train_loss for r in history])


def compare_runs(config: ExperimentConfig, modes: Sequence[str], seeds: Sequence[int],
                 corpus: Optional[Corpus] = None, out_dir: Optional[str | Path] = None,
                 workers: int = 1) -> dict:
    """Train every (mode, seed) pair on identical data and summarise.

    The first mode is the baseline. For each seed the target is the
    baseline's final validation loss; a mode's steps-to-target is the first
    evaluation step at or below it.
    """
    if not modes or not seeds:
        raise ValueError("compare_runs needs at least one mode and one seed")
    if config.train.eval_interval < 1:
        raise ValueError("compare_runs needs eval_interval >= 1")
    corpus = corpus if corpus is not None else load_corpus(config.train.corpus, config.train.train_fraction)
    out = Path(out_dir) if out_dir is not None else None
    jobs = [(mode, seed) for seed in seeds for mode in modes]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_one, config, corpus, m, s, out) for m, s in jobs]
            results = [f.result() for f in futures]
    else:
        results = [_run_one(config, corpus, m, s, out) for m, s in jobs]
    runs = {(r.mode, r.seed): r for r in results}

    baseline = modes[0]
    per_seed = []
    for seed in seeds:
        base = runs[(baseline, seed)]
        target = base.final_val_loss
        entry = {"seed": seed, "target": target}
        for mode in modes:
            r = runs[(mode, seed)]
            entry[mode] = {"final_val_loss": r.final_val_loss,
                           "steps_to_target": steps_to_target(r.steps, r.val_losses, target)}
        per_seed.append(entry)

    summary = {"baseline": baseline, "modes": list(modes), "seeds": list(seeds), "per_seed": per_seed,
               "curves": {f"{r.mode}_seed{r.seed}": {"steps": r.steps, "val_loss": r.val_losses}
                          for r in results},
               "modes_summary": {}}
    for mode in modes:
        finals = [runs[(mode, s)].final_val_loss for s in seeds]
        ratios = []
        for e in per_seed:
            reached, base_steps = e[mode]["steps_to_target"], e[baseline]["steps_to_target"]
            if reached is not None and base_steps:
                ratios.append(reached / base_steps)
        summary["modes_summary"][mode] = {
            "final_val_loss_mean": statistics.fmean(finals),
            "final_val_loss_std": statistics.stdev(finals) if len(finals) > 1 else 0.0,
            "steps_to_target_ratio_mean": statistics.fmean(ratios) if ratios else None,
            "steps_to_target_ratio_std": statistics.stdev(ratios) if len(ratios) > 1 else 0.0,
            "seeds_reaching_target_within_baseline_steps": sum(
                1 for e in per_seed
                if e[mode]["steps_to_target"] is not None and e[baseline]["steps_to_target"] is not None
                and e[mode]["steps_to_target"] <= e[baseline]["steps_to_target"]),
        }
    if out is not None:
        write_json(out / "summary.json", summary)
    return summary


def throughput_bench(config: ExperimentConfig, modes: Sequence[str], corpus: Optional[Corpus] = None,
                     windows: int = 10, steps_per_window: int = 2, warmup: int = 2) -> dict[str, float]:
    """Median training tokens/sec per mode over ``windows`` timed windows.

    Modes are interleaved window by window so slow drifts in machine load
    affect them equally. Each mode trains its own copy of the same
    initial model on the same batches.
    """
    corpus = corpus if corpus is not None else load_corpus(config.train.corpus, config.train.train_fraction)
    trainers = {}
    for mode in modes:
        cfg = copy.deepcopy(config)
        cfg.train.routing = mode
        trainers[mode] = Trainer(cfg, corpus)
    for tr in trainers.values():
        for _ in range(warmup):
            tr.train_step()
    rates: dict[str, list[float]] = {m: [] for m in modes}
    t = config.train
    for _ in range(windows):
        for mode, tr in trainers.items():
            start = time.perf_counter()
            for _ in range(steps_per_window):
                tr.train_step()
            rates[mode].append(steps_per_window * t.batch_size * t.seq_len / (time.perf_counter() - start))
    return {m: statistics.median(r) for m, r in rates.items()}


def bank_memory_scalars(model_config: ModelConfig) -> int:
    """Default-vector storage the method adds: N * hidden per MoE layer."""
    return model_config.n_experts * model_config.hidden * model_config.n_moe_layers
