"""Per-example, per-token and query-objective gradients over the MLP parameters."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .tinylm import (
    Example, InvalidInput, QuerySet, TinyLM, batch_mean_nll, flatten_mlp_grads,
    load_param_view, nll_loss, param_view, response_logprobs,
)


class NonFiniteGradient(RuntimeError):
    pass


@dataclass
class GradVector:
    values: np.ndarray
    source: str  # "example" | "token" | "query"

    def __len__(self):
        return len(self.values)

    def __neg__(self):
        return GradVector(-self.values, self.source)


def _check_finite(model: TinyLM, flat: np.ndarray, what: str) -> None:
    if np.all(np.isfinite(flat)):
        return
    for spec in model.layer_map():
        if not np.all(np.isfinite(flat[spec.offset:spec.offset + spec.size])):
            raise NonFiniteGradient(f"non-finite gradient for {what} in layer {spec.layer_id}")


def _grad(model: TinyLM, scalar: torch.Tensor, what: str, retain_graph: bool = False) -> np.ndarray:
    grads = torch.autograd.grad(scalar, model.mlp_parameters(), retain_graph=retain_graph)
    flat = flatten_mlp_grads(model, grads)
    _check_finite(model, flat, what)
    return flat


def zero_grad_vector(model: TinyLM, source: str = "example") -> GradVector:
    return GradVector(np.zeros(sum(s.size for s in model.layer_map())), source)


def example_grad(model: TinyLM, example: Example) -> GradVector:
    """Gradient of :func:`nll_loss` with respect to the MLP parameter view."""
    return GradVector(_grad(model, nll_loss(model, example), example.id), "example")


def token_grads(model: TinyLM, example: Example) -> list[GradVector]:
    """``(1/T) * grad log p(z_t | z_<t)`` for each response token, one backward pass each.

    The negated sum reproduces :func:`example_grad`.
    """
    logp = response_logprobs(model, example.prompt, example.response)
    T = len(example.response)
    out = []
    for t in range(T):
        flat = _grad(model, logp[t] / T, f"{example.id}[{t}]", retain_graph=t < T - 1)
        out.append(GradVector(flat, "token"))
    return out


def query_objective(model: TinyLM, queries: QuerySet) -> torch.Tensor:
    """Mean over items of the per-token mean answer log-likelihood."""
    return -batch_mean_nll(model, queries.items)


def query_grad(model: TinyLM, queries: QuerySet) -> GradVector:
    """Gradient of the query log-likelihood objective (ascent direction, not a loss)."""
    if queries.n == 0:
        raise InvalidInput("empty query set")
    return GradVector(_grad(model, query_objective(model, queries), f"query set {queries.id}"), "query")


def check_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, grad: np.ndarray, eps: float,
                   coords: Sequence[int]) -> float:
    """Max relative error between ``grad`` and central differences of ``fn`` on ``coords``."""
    if eps <= 0:
        raise InvalidInput("eps must be positive")
    worst = 0.0
    for i in coords:
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        fd = (fn(xp) - fn(xm)) / (2 * eps)
        denom = max(abs(fd), abs(grad[i]))
        if denom == 0.0:
            continue
        worst = max(worst, abs(fd - grad[i]) / denom)
    return worst


def finite_diff_check(model: TinyLM, target: Example | QuerySet, eps: float = 1e-4,
                      n_coords: int = 20, seed: int = 0) -> float:
    """Compare the analytic MLP gradient of ``target`` with central differences.

    Coordinates are drawn with a fixed seed from entries whose analytic
    gradient is at least 1e-3 of the largest one, where relative error is
    meaningful. The model is not modified.
    """
    if eps <= 0:
        raise InvalidInput("eps must be positive")
    if isinstance(target, QuerySet):
        analytic = query_grad(model, target).values

        def objective(m):
            return query_objective(m, target).item()
    else:
        analytic = example_grad(model, target).values

        def objective(m):
            return nll_loss(m, target).item()

    probe = _clone(model)
    x0 = param_view(model).values

    def fn(x):
        load_param_view(probe, x)
        with torch.no_grad():
            return objective(probe)

    scale = np.abs(analytic).max()
    if scale == 0.0:
        return 0.0
    eligible = np.flatnonzero(np.abs(analytic) >= 1e-3 * scale)
    rng = np.random.default_rng(seed)
    coords = rng.choice(eligible, size=min(n_coords, len(eligible)), replace=False)
    return check_gradient(fn, x0, analytic, eps, sorted(coords.tolist()))


def _clone(model: TinyLM) -> TinyLM:
    probe = TinyLM(model.cfg)
    probe.load_state_dict(model.state_dict())
    probe.eval()
    return probe
