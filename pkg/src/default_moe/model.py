"""Character-level transformer LM whose feedforward blocks are MoE layers."""

from __future__ import annotations

import contextlib
import math
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .moe import MoELayer, RoutingOutcome, aux_load_balance_loss


class Block:
    """Pre-norm residual block: single-head causal attention, then an FFN.

    The FFN is a routed :class:`MoELayer`, or a plain SwiGLU when ``dense_ffn``.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype, dense_ffn: bool,
                 routing: str, aux_alpha: float):
        d, h, std = config.hidden, config.intermediate, config.init_std
        out_std = std / math.sqrt(2 * config.n_layers)

        def param(shape, s):
            return Tensor((rng.standard_normal(shape) * s).astype(dtype), requires_grad=True)

        self.attn_norm = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.wq = param((d, d), std)
        self.wk = param((d, d), std)
        self.wv = param((d, d), std)
        self.wo = param((d, d), out_std)
        self.ffn_norm = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.moe: Optional[MoELayer] = None
        if dense_ffn:
            self.ffn = (param((d, h), std), param((d, h), std), param((h, d), out_std))
        else:
            self.moe = MoELayer(config.layer_config(routing, aux_alpha), rng, dtype=dtype,
                                init_std=std, down_std=out_std)

    def parameters(self) -> dict[str, Tensor]:
        params = {"attn_norm": self.attn_norm, "wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo,
                  "ffn_norm": self.ffn_norm}
        if self.moe is None:
            params.update({"ffn.gate": self.ffn[0], "ffn.up": self.ffn[1], "ffn.down": self.ffn[2]})
        else:
            params.update({f"moe.{k}": v for k, v in self.moe.parameters().items()})
        return params

    def attention(self, x: Tensor, batch: int, seq: int) -> Tensor:
        d = x.shape[1]
        q = ad.reshape(x @ self.wq, (batch, seq, d))
        k = ad.reshape(x @ self.wk, (batch, seq, d))
        v = ad.reshape(x @ self.wv, (batch, seq, d))
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d))
        att = ad.softmax_rows(scores, causal=True)
        out = ad.reshape(ad.matmul(att, v), (batch * seq, d))
        return out @ self.wo

    def __call__(self, x: Tensor, batch: int, seq: int,
                 routing: Optional[RoutingOutcome] = None) -> tuple[Tensor, Optional[RoutingOutcome]]:
        x = x + self.attention(ad.rms_norm(x, self.attn_norm), batch, seq)
        hn = ad.rms_norm(x, self.ffn_norm)
        if self.moe is None:
            return x + ad.swiglu(hn, *self.ffn), None
        y, outcome = self.moe(hn, routing)
        return x + y, outcome


class MoETransformerLM:
    """Embedding, ``n_layers`` blocks, final norm and an untied output head
    (with an optional logit bias).

    ``forward`` returns logits for every position, flattened to
    ``(batch * seq, vocab)``, plus one :class:`RoutingOutcome` per MoE layer.
    """

    def __init__(self, config: ModelConfig, routing: str = "topk", aux_alpha: float = 0.01):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(config.seed)
        d, std = config.hidden, config.init_std

        def param(shape, s):
            return Tensor((rng.standard_normal(shape) * s).astype(self.dtype), requires_grad=True)

        self.tok_emb = param((config.vocab_size, d), std)
        self.pos_emb = param((config.max_seq_len, d), std)
        self.blocks = [Block(config, rng, self.dtype, dense_ffn=(i == 0 and config.first_layer_dense),
                             routing=routing, aux_alpha=aux_alpha)
                       for i in range(config.n_layers)]
        self.final_norm = Tensor(np.ones(d, dtype=self.dtype), requires_grad=True)
        self.head = param((d, config.vocab_size), std)
        self.head_bias = Tensor(np.zeros(config.vocab_size, dtype=self.dtype), requires_grad=True) \
            if config.head_bias else None
        self._params = self._collect()

    def _collect(self) -> dict[str, Tensor]:
        params = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb}
        for i, block in enumerate(self.blocks):
            params.update({f"block{i}.{k}": v for k, v in block.parameters().items()})
        params["final_norm"] = self.final_norm
        params["head"] = self.head
        if self.head_bias is not None:
            params["head_bias"] = self.head_bias
        return params

    def parameters(self) -> dict[str, Tensor]:
        return self._params

    @property
    def moe_layers(self) -> list[MoELayer]:
        return [b.moe for b in self.blocks if b.moe is not None]

    @property
    def moe_layer_indices(self) -> list[int]:
        return [i for i, b in enumerate(self.blocks) if b.moe is not None]

    @property
    def routing(self) -> str:
        layers = self.moe_layers
        return layers[0].config.routing if layers else "topk"

    def set_routing(self, mode: str, top_k: Optional[int] = None) -> None:
        for layer in self.moe_layers:
            layer.config.routing = mode
            if top_k is not None:
                if not 1 <= top_k <= layer.config.n_experts:
                    raise ValueError(f"top_k must lie in [1, {layer.config.n_experts}], got {top_k}")
                layer.config.top_k = top_k

    def set_aux_alpha(self, alpha: float) -> None:
        for layer in self.moe_layers:
            layer.config.aux_alpha = alpha

    @contextlib.contextmanager
    def frozen_ema(self):
        """Disable default-vector updates inside the block."""
        saved = [layer.ema_enabled for layer in self.moe_layers]
        for layer in self.moe_layers:
            layer.ema_enabled = False
        try:
            yield self
        finally:
            for layer, flag in zip(self.moe_layers, saved):
                layer.ema_enabled = flag

    @contextlib.contextmanager
    def routing_mode(self, mode: str, top_k: Optional[int] = None):
        saved = [(layer.config.routing, layer.config.top_k) for layer in self.moe_layers]
        self.set_routing(mode, top_k)
        try:
            yield self
        finally:
            for layer, (m, k) in zip(self.moe_layers, saved):
                layer.config.routing = m
                layer.config.top_k = k

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def forward(self, tokens: np.ndarray,
                routing: Optional[Sequence[Optional[RoutingOutcome]]] = None) -> tuple[Tensor, list[RoutingOutcome]]:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ValueError(f"tokens must be (batch, seq), got shape {tokens.shape}")
        batch, seq = tokens.shape
        if seq > self.config.max_seq_len:
            raise ValueError(f"sequence length {seq} exceeds max_seq_len {self.config.max_seq_len}")
        d = self.config.hidden
        pos = np.broadcast_to(np.arange(seq), (batch, seq))
        x = ad.reshape(ad.embedding(self.tok_emb, tokens) + ad.embedding(self.pos_emb, pos), (batch * seq, d))
        outcomes: list[RoutingOutcome] = []
        moe_i = 0
        for block in self.blocks:
            recorded = None
            if block.moe is not None and routing is not None:
                recorded = routing[moe_i]
            x, outcome = block(x, batch, seq, recorded)
            if outcome is not None:
                outcomes.append(outcome)
                moe_i += 1
        logits = ad.rms_norm(x, self.final_norm) @ self.head
        if self.head_bias is not None:
            logits = ad.add_bias(logits, self.head_bias)
        return logits, outcomes

    def loss(self, tokens: np.ndarray, targets: np.ndarray,
             routing: Optional[Sequence[Optional[RoutingOutcome]]] = None,
             include_aux: bool = True) -> tuple[Tensor, float, float, list[RoutingOutcome]]:
        """Total loss (cross-entropy plus each MoE layer's balance loss).

        Returns ``(total, ce_value, aux_value, outcomes)``.
        """
        logits, outcomes = self.forward(tokens, routing)
        ce = ad.cross_entropy(logits, np.asarray(targets).reshape(-1))
        total = ce
        aux_value = 0.0
        if include_aux:
            for layer, outcome in zip(self.moe_layers, outcomes):
                if layer.config.aux_alpha > 0:
                    aux = aux_load_balance_loss(outcome, layer.config.aux_alpha)
                    aux_value += aux.item()
                    total = total + aux
        return total, ce.item(), aux_value, outcomes

    def bank_scalars(self) -> int:
        return sum(layer.bank.n_scalars for layer in self.moe_layers)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self._params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)[:5]}")
        for name, p in self._params.items():
            value = np.asarray(arrays[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} does not match {p.shape}")
            p.data = value.astype(self.dtype, copy=True)
