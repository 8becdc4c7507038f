"""Router-gradient analysis and finite-difference checking.

The dense router gradient is obtained by running every expert for every
token. Comparing it with the router gradient of a sparse mode gives the
per-layer error ``eps = dense - mode``; for TopK this is the contribution of
the missing experts, for default routing it is what the default vectors fail
to capture.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Tensor, no_grad
from .model import MoETransformerLM
from .moe import RoutingOutcome


class UndefinedSimilarity(ValueError):
    """Cosine similarity requested for a zero-norm vector."""


class NonDeterministicFunction(RuntimeError):
    pass


class ModelStateError(RuntimeError):
    """Model parameters or default vectors changed between paired evaluations."""


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise UndefinedSimilarity("cosine similarity of a zero-norm gradient is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# finite differences ------------------------------------------------------------

@dataclass
class FDReport:
    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)

    def worst(self) -> tuple[str, float]:
        name = max(self.per_param, key=self.per_param.get)
        return name, self.per_param[name]


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def vector_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``|a - n| / max(|a|, |n|, floor)`` with Euclidean norms over all probes of one block."""
    return float(np.linalg.norm(analytic - numeric)
                 / max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor))


def finite_difference_check(f: Callable[[], Tensor], params: dict[str, Tensor], step: float = 1e-5,
                            n_probes: int = 32, coordinate_limit: int = 16,
                            rng: Optional[np.random.Generator] = None) -> FDReport:
    """Compare autodiff gradients of ``f`` with central differences.

    ``f`` rebuilds the scalar from the current values of ``params`` (which
    are perturbed in place and restored). Blocks with at most
    ``coordinate_limit`` entries are swept coordinate by coordinate; larger
    ones are checked along ``n_probes`` random unit directions. A block's
    error is :func:`vector_relative_error` of its analytic and numeric
    directional derivatives, which stays well conditioned when a single
    probe happens to be nearly orthogonal to the gradient.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    root = f()
    base = root.item()
    root.backward()
    with no_grad():
        if f().item() != base:
            raise NonDeterministicFunction("f returned different values for identical parameters")

    def evaluate() -> float:
        with no_grad():
            return f().item()

    report = FDReport(0.0)
    for name, p in params.items():
        grad = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        flat = p.data.reshape(-1)
        sweep = flat.size <= coordinate_limit
        analytic, numeric = [], []
        for j in range(flat.size if sweep else n_probes):
            if sweep:
                v = np.zeros(flat.size)
                v[j] = 1.0
            else:
                v = rng.standard_normal(flat.size)
                v /= np.linalg.norm(v)
            orig = flat.copy()
            flat += step * v
            up = evaluate()
            flat[:] = orig - step * v
            down = evaluate()
            flat[:] = orig
            analytic.append(float(grad @ v))
            numeric.append((up - down) / (2 * step))
        err = vector_relative_error(np.array(analytic), np.array(numeric))
        report.per_param[name] = err
        report.max_rel_error = max(report.max_rel_error, err)
    for p in params.values():
        p.grad = None
    return report


def model_loss_fn(model: MoETransformerLM, inputs: np.ndarray, targets: np.ndarray,
                  include_aux: bool = True) -> Callable[[], Tensor]:
    """Scalar loss closure with Top-K decisions frozen at their current values.

    Freezing the expert sets makes the loss a smooth function of the
    parameters near the current point; default vectors stay fixed because
    the caller is expected to hold :meth:`MoETransformerLM.frozen_ema`.
    """
    with no_grad():
        _, _, _, recorded = model.loss(inputs, targets, include_aux=include_aux)
    recorded = [RoutingOutcome(o.probs, o.selected.copy()) for o in recorded]

    def f() -> Tensor:
        return model.loss(inputs, targets, routing=recorded, include_aux=include_aux)[0]

    return f


def gradcheck_model(model: MoETransformerLM, inputs: np.ndarray, targets: np.ndarray, mode: str,
                    step: float = 1e-5, n_probes: int = 32, seed: int = 0) -> FDReport:
    """FD-check every parameter of ``model`` in routing ``mode``.

    In default mode the loss is the default-vector surrogate with the
    vectors frozen, applied in the forward pass.
    """
    if model.dtype != np.float64:
        raise ValueError("finite-difference checks need a float64 model")
    saved_apply = [layer.bank.apply for layer in model.moe_layers]
    for layer in model.moe_layers:
        layer.bank.apply = "forward"
    try:
        with model.routing_mode(mode), model.frozen_ema():
            f = model_loss_fn(model, inputs, targets)
            return finite_difference_check(f, model.parameters(), step=step, n_probes=n_probes,
                                           rng=np.random.default_rng(seed))
    finally:
        for layer, a in zip(model.moe_layers, saved_apply):
            layer.bank.apply = a


# router gradients -----------------------------------------------------------------

def _fingerprint(model: MoETransformerLM) -> tuple:
    return tuple((layer.router.data.tobytes(), layer.bank.vectors.tobytes(), layer.bank.steps)
                 for layer in model.moe_layers)


def router_gradients(model: MoETransformerLM, inputs: np.ndarray, targets: np.ndarray, mode: str,
                     routing: Optional[Sequence[RoutingOutcome]] = None, top_k: Optional[int] = None,
                     include_aux: bool = False) -> tuple[list[np.ndarray], list[RoutingOutcome]]:
    """Router weight gradients of every MoE layer under ``mode``.

    Default vectors are not updated. Other parameters' gradients are
    cleared afterwards.
    """
    with model.routing_mode(mode, top_k), model.frozen_ema():
        model.zero_grad()
        total, _, _, outcomes = model.loss(inputs, targets, routing=routing, include_aux=include_aux)
        total.backward()
        grads = [layer.router.grad.copy() for layer in model.moe_layers]
        model.zero_grad()
    return grads, outcomes


def dense_router_gradient(model: MoETransformerLM, inputs: np.ndarray, targets: np.ndarray,
                          routing: Optional[Sequence[RoutingOutcome]] = None,
                          include_aux: bool = False) -> list[np.ndarray]:
    """d(loss)/d(router) with every expert evaluated for every token."""
    grads, _ = router_gradients(model, inputs, targets, "dense", routing=routing, include_aux=include_aux)
    return grads


def paired_router_gradients(model: MoETransformerLM, inputs: np.ndarray, targets: np.ndarray, mode: str,
                            top_k: Optional[int] = None,
                            include_aux: bool = False) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """``(mode_grads, dense_grads)`` with the dense pass reusing the mode pass's expert sets."""
    before = _fingerprint(model)
    mode_grads, outcomes = router_gradients(model, inputs, targets, mode, top_k=top_k, include_aux=include_aux)
    dense_grads, _ = router_gradients(model, inputs, targets, "dense", routing=outcomes, top_k=top_k,
                                      include_aux=include_aux)
    if _fingerprint(model) != before:
        raise ModelStateError("model state changed between the mode and dense evaluations")
    return mode_grads, dense_grads


def router_gradient_error(model: MoETransformerLM, inputs: np.ndarray, targets: np.ndarray, mode: str,
                          top_k: Optional[int] = None) -> tuple[list[np.ndarray], list[float]]:
    """Per-layer ``eps = dense - mode`` router gradient and its Frobenius norm."""
    mode_grads, dense_grads = paired_router_gradients(model, inputs, targets, mode, top_k)
    eps = [d - m for d, m in zip(dense_grads, mode_grads)]
    return eps, [float(np.linalg.norm(e)) for e in eps]


def cosine_to_dense(model: MoETransformerLM, inputs: np.ndarray, targets: np.ndarray, mode: str,
                    top_k: Optional[int] = None) -> list[float]:
    mode_grads, dense_grads = paired_router_gradients(model, inputs, targets, mode, top_k)
    return [cosine(m, d) for m, d in zip(mode_grads, dense_grads)]


# reports ----------------------------------------------------------------------

@dataclass
class GradReport:
    mode: str
    top_k: int
    seed: int
    n_samples: int
    cosines: list[float]
    eps_norms: list[float]
    layers: list[int]

    def rows(self) -> list[dict]:
        return [{"layer": layer, "K": self.top_k, "mode": self.mode, "cosine": c, "eps_norm": e, "seed": self.seed}
                for layer, c, e in zip(self.layers, self.cosines, self.eps_norms)]


def grad_report(model: MoETransformerLM, batches: Sequence[tuple[np.ndarray, np.ndarray]], mode: str,
                top_k: Optional[int] = None, seed: int = 0) -> GradReport:
    """Average cosine-to-dense and ``|eps|`` over ``batches``."""
    cos_sum = None
    eps_sum = None
    for inputs, targets in batches:
        mode_grads, dense_grads = paired_router_gradients(model, inputs, targets, mode, top_k)
        cos = np.array([cosine(m, d) for m, d in zip(mode_grads, dense_grads)])
        eps = np.array([np.linalg.norm(d - m) for m, d in zip(mode_grads, dense_grads)])
        cos_sum = cos if cos_sum is None else cos_sum + cos
        eps_sum = eps if eps_sum is None else eps_sum + eps
    n = len(batches)
    k = top_k if top_k is not None else model.moe_layers[0].config.top_k
    return GradReport(mode, k, seed, n, (cos_sum / n).tolist(), (eps_sum / n).tolist(), model.moe_layer_indices)


REPORT_COLUMNS = ("layer", "K", "mode", "cosine", "eps_norm", "seed")


def write_grad_reports(reports: Sequence[GradReport], csv_path: str | Path, jsonl_path: str | Path) -> None:
    csv_path, jsonl_path = Path(csv_path), Path(jsonl_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in reports:
            for row in r.rows():
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    with open(jsonl_path, "w") as f:
        for r in reports:
            f.write(json.dumps(asdict(r), sort_keys=True) + "\n")
