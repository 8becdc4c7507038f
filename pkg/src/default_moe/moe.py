"""Mixture-of-Experts layer with TopK, dense and default-vector routing.

All three routing modes share one combine step: for every token the layer
builds an ``(N, hidden)`` stack of per-expert values and takes its
probability-weighted sum. Modes differ only in what fills the rows of experts
that were not run for a token:

* ``topk``    zeros (the router sees no signal from those experts)
* ``dense``   every expert is run, so there are no missing rows
* ``default`` the expert's EMA default vector, held constant

Because the arithmetic is shared, topk with K=N, dense, and default with K=N
agree bit for bit, and a default layer whose vectors equal the true expert
outputs reproduces the dense router gradient exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import NumericError, ShapeError, Tensor, custom_op, matmul, softmax_rows, swiglu, take_rows, transpose
from .config import MoeLayerConfig


@dataclass
class RoutingOutcome:
    """Router probabilities and the experts chosen for each token.

    ``selected[t]`` lists the K chosen experts in descending probability
    (ties go to the smaller index). Combine weights are the raw
    probabilities of those experts; they are not renormalised.
    """

    probs: Tensor
    selected: np.ndarray

    @property
    def n_tokens(self) -> int:
        return self.selected.shape[0]

    @property
    def n_experts(self) -> int:
        return self.probs.shape[1]

    @property
    def top_k(self) -> int:
        return self.selected.shape[1]

    @property
    def combine_weights(self) -> np.ndarray:
        return np.take_along_axis(self.probs.data, self.selected, axis=1)

    def mask(self) -> np.ndarray:
        m = np.zeros(self.probs.shape, dtype=bool)
        np.put_along_axis(m, self.selected, True, axis=1)
        return m

    def expert_counts(self) -> np.ndarray:
        return np.bincount(self.selected.reshape(-1), minlength=self.n_experts)


def router_forward(weight: Tensor, x: Tensor) -> Tensor:
    """Router probabilities ``softmax(x @ W.T)`` for ``W`` of shape (N, hidden)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"router: tokens {x.shape} do not match router weight {weight.shape}")
    return softmax_rows(matmul(x, transpose(weight)))


def topk_select(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries per row, largest first.

    The sort is stable on negated probabilities, so equal values keep
    ascending expert order and the smaller index wins ties.
    """
    probs = np.asarray(probs)
    n = probs.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    return np.argsort(-probs, axis=-1, kind="stable")[..., :k]


class DefaultVectorBank:
    """Per-expert EMA of activated expert outputs.

    The vectors are plain arrays and never enter the autodiff graph as
    leaves, so they can carry no gradient.
    """

    def __init__(self, n_experts: int, hidden: int, beta: float = 0.9, init: str = "zeros",
                 weighting: str = "scored", apply: str = "forward", normalize: bool = True,
                 dtype=np.float32, rng: Optional[np.random.Generator] = None):
        if not 0.0 <= beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {beta}")
        self.n_experts = n_experts
        self.hidden = hidden
        self.beta = float(beta)
        self.init = init
        self.weighting = weighting
        self.apply = apply
        self.normalize = normalize
        self.steps = 0
        if init == "zeros":
            self.vectors = np.zeros((n_experts, hidden), dtype=dtype)
        elif init == "gaussian":
            rng = rng if rng is not None else np.random.default_rng()
            self.vectors = rng.standard_normal((n_experts, hidden)).astype(dtype)
        else:
            raise ValueError(f"unknown init {init!r}")

    @property
    def n_scalars(self) -> int:
        return self.vectors.size

    def update(self, outputs: Sequence[Optional[np.ndarray]], probs: Sequence[Optional[np.ndarray]]) -> None:
        """One EMA step from this batch's activated outputs.

        ``outputs[i]`` holds expert ``i``'s outputs for the tokens routed to
        it (``None`` or empty when it got none) and ``probs[i]`` those tokens'
        router probabilities for expert ``i``. Experts without tokens keep
        their vector.
        """
        if len(outputs) != self.n_experts:
            raise ValueError(f"expected outputs for {self.n_experts} experts, got {len(outputs)}")
        beta = self.beta
        for i, out in enumerate(outputs):
            if out is None or len(out) == 0:
                continue
            out = np.asarray(out, dtype=np.float64)
            if not np.isfinite(out).all():
                raise NumericError(f"non-finite output from expert {i} in EMA update")
            if self.weighting == "scored":
                w = np.asarray(probs[i], dtype=np.float64)
                total = w @ out
                mean = total / w.sum() if self.normalize else total / len(w)
            else:
                mean = out.mean(axis=0)
            self.vectors[i] = beta * self.vectors[i] + (1.0 - beta) * mean
        self.steps += 1

    def state_dict(self) -> dict:
        return {"vectors": self.vectors.copy(), "beta": self.beta, "steps": self.steps}

    def load_state_dict(self, state: dict) -> None:
        vectors = np.asarray(state["vectors"])
        if vectors.shape != self.vectors.shape:
            raise ValueError(f"bank shape {vectors.shape} does not match {self.vectors.shape}")
        self.vectors = vectors.astype(self.vectors.dtype, copy=True)
        self.beta = float(state["beta"])
        self.steps = int(state["steps"])


def ema_update(bank: DefaultVectorBank, outputs: Sequence[Optional[np.ndarray]],
               probs: Sequence[Optional[np.ndarray]]) -> None:
    bank.update(outputs, probs)


def combine_experts(probs: Tensor, expert_outputs: Sequence[Optional[Tensor]], token_index: Sequence[np.ndarray],
                    forward_fill: Optional[np.ndarray] = None, backward_fill: Optional[np.ndarray] = None) -> Tensor:
    """``y[t] = sum_i probs[t, i] * V[t, i]`` over a per-token stack of expert values.

    ``V[t, i]`` is expert ``i``'s output when token ``t`` is in
    ``token_index[i]``; otherwise it is ``forward_fill[i]`` in the forward
    pass and ``backward_fill[i]`` when forming d(y)/d(probs). Fills default
    to zero and are treated as constants.
    """
    n_tok, n_exp = probs.shape
    p = probs.data
    outs = [o for o in expert_outputs if o is not None]
    hidden = outs[0].shape[1] if outs else (forward_fill.shape[1] if forward_fill is not None else 0)
    dt = p.dtype

    def stack(fill):
        v = np.empty((n_tok, n_exp, hidden), dtype=dt)
        v[:] = 0 if fill is None else fill[None, :, :]
        for i, out in enumerate(expert_outputs):
            if out is not None:
                v[token_index[i], i] = out.data
        return v

    v_fwd = stack(forward_fill)
    v_bwd = v_fwd if backward_fill is forward_fill else stack(backward_fill)
    y = np.matmul(p[:, None, :], v_fwd)[:, 0, :]

    def backward(g):
        g_probs = np.matmul(v_bwd, g[:, :, None])[:, :, 0]
        grads = [g_probs]
        for i, out in enumerate(expert_outputs):
            if out is not None:
                idx = token_index[i]
                grads.append(g[idx] * p[idx, i][:, None])
        return grads

    parents = [probs] + outs
    return custom_op(y, parents, backward, "moe_combine")


class MoELayer:
    """Router plus a bank of SwiGLU experts.

    Parameters are created from ``rng`` at construction. ``ema_enabled``
    gates the default-vector update; it is switched off for evaluation and
    gradient analysis.
    """

    def __init__(self, config: MoeLayerConfig, rng: np.random.Generator, dtype=np.float32,
                 init_std: float = 0.02, down_std: Optional[float] = None):
        self.config = config
        n, d, h = config.n_experts, config.hidden, config.intermediate
        down_std = init_std if down_std is None else down_std

        def param(shape, std):
            return Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=True)

        self.router = param((n, d), init_std)
        self.experts = [(param((d, h), init_std), param((d, h), init_std), param((h, d), down_std))
                        for _ in range(n)]
        self.bank = DefaultVectorBank(n, d, beta=config.beta, init=config.ema_init,
                                      weighting=config.ema_weighting, apply=config.ema_apply,
                                      normalize=config.ema_normalize, dtype=dtype, rng=rng)
        self.ema_enabled = True
        self.expert_calls = np.zeros(n, dtype=np.int64)
        self.last_expert_outputs: list[Optional[np.ndarray]] = [None] * n
        self.last_token_index: list[np.ndarray] = []

    @property
    def routing(self) -> str:
        return self.config.routing

    def parameters(self) -> dict[str, Tensor]:
        params = {"router": self.router}
        for i, (g, u, d) in enumerate(self.experts):
            params[f"expert{i}.gate"] = g
            params[f"expert{i}.up"] = u
            params[f"expert{i}.down"] = d
        return params

    def __call__(self, x: Tensor, routing: Optional[RoutingOutcome] = None) -> tuple[Tensor, RoutingOutcome]:
        return self.forward(x, routing)

    def forward(self, x: Tensor, routing: Optional[RoutingOutcome] = None) -> tuple[Tensor, RoutingOutcome]:
        """Route ``x`` (tokens x hidden) and mix expert outputs.

        ``routing`` may carry a previously recorded selection; its expert
        sets are reused so that two evaluations see identical Top-K
        decisions. Probabilities are always recomputed from the current
        router weights.
        """
        cfg = self.config
        n = cfg.n_experts
        probs = router_forward(self.router, x)
        if routing is None:
            selected = topk_select(probs.data, cfg.top_k)
        else:
            selected = routing.selected
            if selected.shape[0] != x.shape[0]:
                raise ShapeError(f"recorded routing covers {selected.shape[0]} tokens, batch has {x.shape[0]}")
        outcome = RoutingOutcome(probs, selected)
        mask = outcome.mask()
        run_mask = np.ones_like(mask) if cfg.routing == "dense" else mask

        token_index = [np.flatnonzero(run_mask[:, i]) for i in range(n)]
        outputs: list[Optional[Tensor]] = []
        for i, (wg, wu, wd) in enumerate(self.experts):
            idx = token_index[i]
            if idx.size == 0:
                outputs.append(None)
                continue
            self.expert_calls[i] += idx.size
            outputs.append(swiglu(take_rows(x, idx, unique=True), wg, wu, wd))
        self.last_token_index = token_index
        self.last_expert_outputs = [None if o is None else o.data for o in outputs]

        forward_fill = backward_fill = None
        if cfg.routing == "default":
            if self.bank.n_experts != n:
                raise ValueError(f"bank has {self.bank.n_experts} experts, layer has {n}")
            if self.ema_enabled:
                self.bank.update(self.last_expert_outputs,
                                 [probs.data[idx, i] for i, idx in enumerate(token_index)])
            backward_fill = self.bank.vectors.astype(probs.dtype, copy=False)
            forward_fill = backward_fill if self.bank.apply == "forward" else None
        y = combine_experts(probs, outputs, token_index, forward_fill, backward_fill)
        return y, outcome


def aux_load_balance_loss(outcome: RoutingOutcome, alpha: float) -> Tensor:
    """Switch-style balance loss ``alpha * N * sum_i f_i * P_i`` over the whole batch.

    ``f_i`` is the share of (token, slot) assignments going to expert ``i``
    and carries no gradient; ``P_i`` is the batch-mean router probability.
    """
    t, n = outcome.probs.shape
    if t == 0:
        raise ValueError("aux loss needs at least one token")
    p = outcome.probs.data
    frac = outcome.expert_counts() / float(outcome.selected.size)
    mean_prob = p.mean(axis=0)
    coef = alpha * n
    value = np.asarray(coef * float(frac @ mean_prob), dtype=p.dtype)
    row = (coef * frac / t).astype(p.dtype)

    def backward(g):
        return (np.broadcast_to(g * row, (t, n)).copy(),)

    return custom_op(value, [outcome.probs], backward, "aux_loss")
