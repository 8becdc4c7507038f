"""Routing analyses: entropy, default-vector similarity, load and coactivation.

Entropies use the natural logarithm, so they lie in ``[0, ln N]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import no_grad
from .moe import DefaultVectorBank
from .reporting import write_json, write_matrix_csv


@dataclass
class MetricsRecord:
    step: int
    layer: int
    metric: str
    value: object
    mode: str
    seed: int


def router_entropy(probs: np.ndarray, atol: float = 1e-6) -> float:
    """Mean over tokens of ``-sum_i p_i ln p_i`` for a (tokens, N) array."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise ValueError(f"expected a non-empty (tokens, experts) array, got shape {p.shape}")
    if (p < -atol).any() or not np.allclose(p.sum(axis=1), 1.0, atol=atol):
        raise ValueError("router probabilities are not normalised")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return float(terms.sum(axis=1).mean())


def default_vector_similarity(bank: DefaultVectorBank | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise cosine similarity of the default vectors.

    Returns ``(matrix, undefined)``. Rows and columns of zero-norm vectors
    are marked in the boolean ``undefined`` mask and hold 0 off the
    diagonal; the diagonal is always 1.
    """
    vecs = np.asarray(bank.vectors if isinstance(bank, DefaultVectorBank) else bank, dtype=np.float64)
    norms = np.linalg.norm(vecs, axis=1)
    zero = norms == 0
    unit = np.divide(vecs, norms[:, None], out=np.zeros_like(vecs), where=~zero[:, None])
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, 1.0)
    undefined = zero[:, None] | zero[None, :]
    return sim, undefined


def routing_frequency(assignments: np.ndarray, n_experts: int,
                      tags: Optional[np.ndarray] = None) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Share of routed (token, slot) pairs per expert, overall and per source tag.

    ``assignments`` is (tokens, K); ``tags`` gives one tag per token.
    """
    a = np.asarray(assignments)
    if a.size == 0:
        raise ValueError("no assignments")
    a = a.reshape(len(a), -1)
    overall = np.bincount(a.reshape(-1), minlength=n_experts) / a.size
    by_tag: dict[int, np.ndarray] = {}
    if tags is not None:
        tags = np.asarray(tags).reshape(-1)
        if len(tags) != len(a):
            raise ValueError(f"{len(tags)} tags for {len(a)} tokens")
        for tag in np.unique(tags):
            sub = a[tags == tag]
            by_tag[int(tag)] = np.bincount(sub.reshape(-1), minlength=n_experts) / sub.size
    return overall, by_tag


def expert_coactivation(assignments: np.ndarray, n_experts: int) -> np.ndarray:
    """(N, N) matrix: off-diagonal share of tokens whose expert set holds both
    experts, diagonal share of tokens activating that expert."""
    a = np.asarray(assignments).reshape(len(assignments), -1)
    onehot = np.zeros((len(a), n_experts))
    np.put_along_axis(onehot, a, 1.0, axis=1)
    return onehot.T @ onehot / max(len(a), 1)


def collect_routing(model, inputs_batches: Sequence[np.ndarray]) -> list[dict]:
    """Run ``model`` without updating anything; gather per-layer probs and assignments."""
    per_layer = [{"probs": [], "selected": []} for _ in model.moe_layers]
    with model.frozen_ema(), no_grad():
        for inputs in inputs_batches:
            _, outcomes = model.forward(inputs)
            for store, o in zip(per_layer, outcomes):
                store["probs"].append(o.probs.data)
                store["selected"].append(o.selected)
    return [{"probs": np.concatenate(s["probs"]), "selected": np.concatenate(s["selected"])} for s in per_layer]


def analyze_model(model, inputs_batches: Sequence[np.ndarray], out_dir: str | Path,
                  tags: Optional[np.ndarray] = None, tag_names: Optional[Sequence[str]] = None) -> dict:
    """Write ``<metric>_layer<k>.csv`` files and ``summary.json`` under ``out_dir``."""
    out = Path(out_dir)
    routing = collect_routing(model, inputs_batches)
    n = model.config.n_experts
    ln_n = float(np.log(n))
    summary = {"entropy_log_base": "e", "max_entropy": ln_n, "layers": {}}
    experts = [f"expert{i}" for i in range(n)]
    for layer_idx, layer, r in zip(model.moe_layer_indices, model.moe_layers, routing):
        ent = router_entropy(r["probs"])
        sim, undefined = default_vector_similarity(layer.bank)
        overall, by_tag = routing_frequency(r["selected"], n, tags)
        coact = expert_coactivation(r["selected"], n)
        write_matrix_csv(out / f"default_vector_similarity_layer{layer_idx}.csv", sim, experts,
                         comment="cosine similarity; undefined entries (zero-norm vectors) are 0")
        write_matrix_csv(out / f"expert_coactivation_layer{layer_idx}.csv", coact, experts)
        freq_rows = [overall] + [by_tag[t] for t in sorted(by_tag)]
        labels = ["all"] + [tag_names[t] if tag_names else str(t) for t in sorted(by_tag)]
        write_matrix_csv(out / f"routing_frequency_layer{layer_idx}.csv", np.array(freq_rows), experts,
                         comment="rows: " + ",".join(labels))
        write_matrix_csv(out / f"router_entropy_layer{layer_idx}.csv", np.array([[ent, ln_n]]),
                         ["entropy_nats", "max_entropy_nats"])
        summary["layers"][str(layer_idx)] = {
            "router_entropy": ent,
            "routing_frequency": overall.tolist(),
            "max_min_frequency_ratio": float(overall.max() / overall.min()) if overall.min() > 0 else None,
            "undefined_similarity_entries": int(undefined.sum()),
        }
    write_json(out / "summary.json", summary)
    return summary
