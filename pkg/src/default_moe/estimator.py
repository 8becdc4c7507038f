"""scikit-learn compatible wrapper around the MoE language model."""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from ._validation import check_documents, check_in, check_positive, check_token_windows
from .config import EMA_APPLY, EMA_INITS, EMA_WEIGHTINGS, ROUTING_MODES, ExperimentConfig, ModelConfig, TrainConfig
from .data import Corpus, CorpusError, corpus_from_bytes
from .training import Trainer, evaluate


class MoELanguageModel(BaseEstimator):
    """Byte-level MoE transformer LM with an sklearn-style interface.

    ``fit`` trains on one or more documents; ``score`` returns the negative
    mean next-token cross-entropy (higher is better, as sklearn expects);
    ``predict_proba`` gives next-token distributions for token windows.

    Parameters mirror the fields of :class:`ModelConfig` and
    :class:`TrainConfig`; ``routing`` selects ``"topk"``, ``"dense"`` or
    ``"default"``.
    """

    def __init__(self, routing="default", n_experts=8, top_k=1, hidden=64, n_layers=4, intermediate=128,
                 first_layer_dense=True, beta=0.9, ema_weighting="scored", ema_init="zeros",
                 ema_apply="forward", aux_alpha=0.01, steps=1000, batch_size=32, seq_len=128, lr=3e-3,
                 warmup_steps=100, weight_decay=0.1, grad_clip=1.0, dtype="float32", random_state=0):
        self.routing = routing
        self.n_experts = n_experts
        self.top_k = top_k
        self.hidden = hidden
        self.n_layers = n_layers
        self.intermediate = intermediate
        self.first_layer_dense = first_layer_dense
        self.beta = beta
        self.ema_weighting = ema_weighting
        self.ema_init = ema_init
        self.ema_apply = ema_apply
        self.aux_alpha = aux_alpha
        self.steps = steps
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.dtype = dtype
        self.random_state = random_state

    def _validate_params(self) -> None:
        check_in("routing", self.routing, ROUTING_MODES)
        check_in("ema_weighting", self.ema_weighting, EMA_WEIGHTINGS)
        check_in("ema_init", self.ema_init, EMA_INITS)
        check_in("ema_apply", self.ema_apply, EMA_APPLY)
        for name in ("n_experts", "top_k", "hidden", "n_layers", "intermediate", "steps", "batch_size", "seq_len"):
            check_positive(name, getattr(self, name))
        check_positive("aux_alpha", self.aux_alpha, allow_zero=True)
        if self.top_k > self.n_experts:
            raise ValueError(f"top_k={self.top_k} exceeds n_experts={self.n_experts}")

    def _experiment_config(self, vocab_size: int) -> ExperimentConfig:
        seed = int(self.random_state or 0)
        model = ModelConfig(vocab_size=vocab_size, hidden=self.hidden, n_layers=self.n_layers,
                            intermediate=self.intermediate, max_seq_len=self.seq_len, n_experts=self.n_experts,
                            top_k=self.top_k, first_layer_dense=self.first_layer_dense, beta=self.beta,
                            ema_init=self.ema_init, ema_weighting=self.ema_weighting, ema_apply=self.ema_apply,
                            dtype=self.dtype, seed=seed)
        train = TrainConfig(steps=self.steps, batch_size=self.batch_size, seq_len=self.seq_len, lr=self.lr,
                            warmup_steps=min(self.warmup_steps, self.steps), weight_decay=self.weight_decay,
                            grad_clip=self.grad_clip, aux_alpha=self.aux_alpha, routing=self.routing,
                            eval_interval=0, seed=seed)
        return ExperimentConfig(model, train)

    def fit(self, X, y=None):
        """Train on documents ``X`` (a string, bytes, or a list of them)."""
        self._validate_params()
        docs = check_documents(X)
        corpus = corpus_from_bytes(docs, train_fraction=1.0)
        if len(corpus.train) <= self.seq_len:
            raise ValueError(f"training text has {len(corpus.train)} bytes, needs more than seq_len={self.seq_len}")
        trainer = Trainer(self._experiment_config(corpus.vocab_size), corpus)
        trainer.run()
        self.vocab_ = corpus.vocab
        self.model_ = trainer.model
        self.history_ = trainer.history
        self.n_steps_ = trainer.step
        return self

    def encode(self, text) -> np.ndarray:
        check_is_fitted(self, "model_")
        return _corpus_view(self.vocab_).encode(text)

    def decode(self, ids) -> str:
        check_is_fitted(self, "model_")
        return _corpus_view(self.vocab_).decode(ids)

    def _loss(self, X) -> float:
        check_is_fitted(self, "model_")
        docs = check_documents(X)
        tokens = np.concatenate([self.encode(d) for d in docs])
        if len(tokens) < 2:
            raise ValueError("need at least two tokens to score")
        seq = min(self.seq_len, len(tokens) - 1)
        loss, _ = evaluate(self.model_, tokens, seq, batch_size=self.batch_size)
        return loss

    def score(self, X, y=None) -> float:
        """Negative mean next-token cross-entropy in nats."""
        return -self._loss(X)

    def perplexity(self, X) -> float:
        return math.exp(self._loss(X))

    def predict_proba(self, X) -> np.ndarray:
        """Next-token distribution after each window of token ids, shape (n_windows, vocab)."""
        check_is_fitted(self, "model_")
        windows = check_token_windows(X, len(self.vocab_), self.seq_len)
        with self.model_.frozen_ema(), ad.no_grad():
            logits, _ = self.model_.forward(windows)
        last = logits.data.reshape(windows.shape[0], windows.shape[1], -1)[:, -1, :].astype(np.float64)
        last -= last.max(axis=1, keepdims=True)
        p = np.exp(last)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)


def _corpus_view(vocab) -> Corpus:
    empty = np.zeros(0, dtype=np.int64)
    if not vocab:
        raise CorpusError("empty vocabulary")
    return Corpus(empty, empty, list(vocab), empty, empty, [])
