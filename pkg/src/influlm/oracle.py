"""Brute-force ground truth on convex proxies: exact fits, leave-one-out refits and dense influence.

The regularizer is folded into every per-example loss,
``l_i(w) = loss(x_i, y_i; w) + (l2/2) |w|^2``, and the training objective is
their mean. With that convention removing one example gives exactly the
upweighting perturbation ``epsilon = -1/N``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats
from scipy.special import expit, log_expit

from . import storage

NOISE_FLOOR = 1e-12
MODELS = ("logistic_regression", "linear_regression")


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, grad_norm: float):
        super().__init__(f"{message} (final gradient norm {grad_norm:.3e})")
        self.grad_norm = grad_norm


class SingularCurvature(ValueError):
    pass


@dataclass
class ConvexProxySpec:
    """A strongly convex model plus a query objective (mean log-likelihood of the query points).

    Logistic labels are 0/1; linear regression uses a unit-variance Gaussian likelihood.
    """

    model: str
    X: np.ndarray
    y: np.ndarray
    l2: float
    X_query: np.ndarray
    y_query: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.X_query = np.asarray(self.X_query, dtype=np.float64)
        self.y_query = np.asarray(self.y_query, dtype=np.float64)
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}")
        if not self.l2 > 0:
            raise ValueError("l2 strength must be positive for a unique optimum")
        if len(self.X) < 2 or len(self.X) != len(self.y):
            raise ValueError("need at least two (x, y) pairs of matching length")
        if not self.ids:
            self.ids = [f"{i:05d}" for i in range(len(self.X))]
        if len(self.ids) != len(self.X) or len(set(self.ids)) != len(self.ids):
            raise ValueError("ids must be unique, one per example")

    @property
    def n(self) -> int:
        return len(self.X)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    # per-example pieces ---------------------------------------------------

    def residuals(self, w: np.ndarray, X=None, y=None) -> np.ndarray:
        X = self.X if X is None else X
        y = self.y if y is None else y
        z = X @ w
        return (expit(z) if self.model == "logistic_regression" else z) - y

    def losses(self, w: np.ndarray) -> np.ndarray:
        z = self.X @ w
        if self.model == "logistic_regression":
            data = -(self.y * log_expit(z) + (1 - self.y) * log_expit(-z))
        else:
            data = 0.5 * (z - self.y) ** 2
        return data + 0.5 * self.l2 * (w @ w)

    def example_grads(self, w: np.ndarray) -> np.ndarray:
        return self.residuals(w)[:, None] * self.X + self.l2 * w

    def curvature_weights(self, w: np.ndarray) -> np.ndarray:
        if self.model == "logistic_regression":
            p = expit(self.X @ w)
            return p * (1 - p)
        return np.ones(self.n)

    # objective ------------------------------------------------------------

    def objective(self, w: np.ndarray, weights: np.ndarray) -> float:
        return float(weights @ self.losses(w))

    def gradient(self, w: np.ndarray, weights: np.ndarray) -> np.ndarray:
        return weights @ self.example_grads(w)

    def hessian(self, w: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
        """Exact Hessian, which equals the Gauss-Newton matrix for both models."""
        weights = np.full(self.n, 1.0 / self.n) if weights is None else weights
        c = weights * self.curvature_weights(w)
        return (self.X * c[:, None]).T @ self.X + weights.sum() * self.l2 * np.eye(self.dim)

    def query_value(self, w: np.ndarray) -> float:
        z = self.X_query @ w
        if self.model == "logistic_regression":
            return float(np.mean(self.y_query * log_expit(z) + (1 - self.y_query) * log_expit(-z)))
        return float(np.mean(-0.5 * (self.y_query - z) ** 2 - 0.5 * np.log(2 * np.pi)))

    def query_grad(self, w: np.ndarray) -> np.ndarray:
        r = self.residuals(w, self.X_query, self.y_query)
        return -(r[:, None] * self.X_query).mean(axis=0)


def _uniform_weights(n: int, drop: int | None = None) -> np.ndarray:
    w = np.ones(n)
    if drop is not None:
        w[drop] = 0.0
    return w / w.sum()


def fit_convex(spec: ConvexProxySpec, weights: np.ndarray | None = None, w0: np.ndarray | None = None,
               tol: float = 1e-10, max_iter: int = 100) -> np.ndarray:
    """Damped Newton iterations until the gradient norm is at most ``tol``."""
    weights = _uniform_weights(spec.n) if weights is None else np.asarray(weights, dtype=np.float64)
    w = np.zeros(spec.dim) if w0 is None else np.array(w0, dtype=np.float64)
    g = spec.gradient(w, weights)
    for _ in range(max_iter):
        if np.linalg.norm(g) <= tol:
            return w
        step = np.linalg.solve(spec.hessian(w, weights), g)
        f0, t = spec.objective(w, weights), 1.0
        while t > 1e-10 and spec.objective(w - t * step, weights) > f0 + 1e-4 * t * (g @ -step) + 1e-15 * abs(f0):
            t *= 0.5
        w = w - t * step
        g = spec.gradient(w, weights)
    if np.linalg.norm(g) <= tol:
        return w
    raise ConvergenceError("Newton iterations did not converge", float(np.linalg.norm(g)))


def normal_equations(spec: ConvexProxySpec) -> np.ndarray:
    """Closed-form ridge solution for the linear-regression proxy."""
    if spec.model != "linear_regression":
        raise ValueError("closed form only exists for linear regression")
    n = spec.n
    return np.linalg.solve(spec.X.T @ spec.X / n + spec.l2 * np.eye(spec.dim), spec.X.T @ spec.y / n)


@dataclass
class LooResult:
    deltas: dict[str, float]
    errors: dict[str, str]
    base_value: float


def loo_retrain_oracle(spec: ConvexProxySpec, tol: float = 1e-10) -> LooResult:
    """Refit without each example in turn and report ``f(w_refit) - f(w_full)``."""
    w_full = fit_convex(spec, tol=tol)
    base = spec.query_value(w_full)
    deltas, errors = {}, {}
    for i, ex_id in enumerate(spec.ids):
        try:
            w = fit_convex(spec, weights=_uniform_weights(spec.n, drop=i), w0=w_full, tol=tol)
        except ConvergenceError as exc:
            errors[ex_id] = str(exc)
            continue
        deltas[ex_id] = spec.query_value(w) - base
    return LooResult(deltas, errors, base)


def dense_influence_from(H: np.ndarray, grad_f: np.ndarray, grad_loss: np.ndarray, damping: float = 0.0) -> np.ndarray | float:
    """``-grad_f^T (H + damping I)^-1 grad_loss``; ``grad_loss`` may be a stack of row vectors."""
    M = H + damping * np.eye(len(H))
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise SingularCurvature("curvature is not positive definite; pass damping > 0") from None
    if damping == 0.0 and np.linalg.cond(M) > 1e12:
        raise SingularCurvature("curvature is numerically singular; pass damping > 0")
    u = np.linalg.solve(L.T, np.linalg.solve(L, grad_f))
    out = -(np.atleast_2d(grad_loss) @ u)
    return float(out[0]) if np.ndim(grad_loss) == 1 else out


def dense_influence(spec: ConvexProxySpec, example: int | str, damping: float = 0.0,
                    w: np.ndarray | None = None) -> float:
    if spec.dim > 10_000:
        raise ValueError("dense influence is limited to 1e4 parameters")
    idx = spec.ids.index(example) if isinstance(example, str) else int(example)
    w = fit_convex(spec) if w is None else w
    return dense_influence_from(spec.hessian(w), spec.query_grad(w), spec.example_grads(w)[idx], damping)


def dense_influence_scores(spec: ConvexProxySpec, damping: float = 0.0, w: np.ndarray | None = None) -> dict[str, float]:
    w = fit_convex(spec) if w is None else w
    scores = dense_influence_from(spec.hessian(w), spec.query_grad(w), spec.example_grads(w), damping)
    return dict(zip(spec.ids, map(float, scores)))


@dataclass(frozen=True)
class LooComparison:
    pearson: float
    spearman: float
    sign_agreement: float
    n_sign: int

    def to_dict(self) -> dict:
        return {"pearson": self.pearson, "spearman": self.spearman,
                "sign_agreement": self.sign_agreement, "n_sign": self.n_sign}


def compare_influence_to_loo(scores: Mapping[str, float], deltas: Mapping[str, float],
                             epsilon: float, noise_floor: float = NOISE_FLOOR) -> LooComparison:
    """Agreement between predicted changes ``epsilon * score`` and refit changes.

    Leave-one-out corresponds to ``epsilon = -1/N``. Sign agreement only counts
    examples whose actual change exceeds ``noise_floor``.
    """
    if set(scores) != set(deltas):
        raise ValueError("influence scores and leave-one-out deltas cover different ids")
    ids = sorted(scores)
    pred = epsilon * np.array([scores[i] for i in ids])
    actual = np.array([deltas[i] for i in ids])
    pearson = float(stats.pearsonr(pred, actual)[0])
    spearman = float(stats.spearmanr(pred, actual)[0])
    mask = np.abs(actual) > noise_floor
    agree = float(np.mean(np.sign(pred[mask]) == np.sign(actual[mask]))) if mask.any() else float("nan")
    return LooComparison(pearson, spearman, agree, int(mask.sum()))


def make_logistic_proxy(n: int = 200, d: int = 10, l2: float = 1e-2, n_query: int = 50,
                        seed: int = 0) -> ConvexProxySpec:
    """Synthetic logistic-regression problem with Bernoulli labels from a random ground-truth weight."""
    rng = np.random.default_rng(seed)
    w_true = rng.normal(size=d)
    X = rng.normal(size=(n, d))
    Xq = rng.normal(size=(n_query, d))
    y = (rng.random(n) < expit(X @ w_true)).astype(float)
    yq = (rng.random(n_query) < expit(Xq @ w_true)).astype(float)
    return ConvexProxySpec("logistic_regression", X, y, l2, Xq, yq)


def spec_hash(spec: ConvexProxySpec) -> str:
    head = storage.canonical_json({"model": spec.model, "l2": spec.l2, "ids": spec.ids})
    return storage.sha256_bytes(head + storage.hash_arrays(spec.X, spec.y, spec.X_query, spec.y_query).encode())


def run_loo_validation(spec: ConvexProxySpec, damping: float = 0.0) -> tuple[LooComparison, dict]:
    """Dense influence vs. leave-one-out on one proxy; returns the comparison and a report dict."""
    w = fit_convex(spec)
    scores = dense_influence_scores(spec, damping, w)
    loo = loo_retrain_oracle(spec)
    kept = {k: scores[k] for k in loo.deltas}
    cmp = compare_influence_to_loo(kept, loo.deltas, epsilon=-1.0 / spec.n)
    report = {"model": spec.model, "n": spec.n, "dim": spec.dim, "l2": spec.l2, "damping": damping,
              "spec_hash": spec_hash(spec),
              "refit_errors": loo.errors, **cmp.to_dict()}
    return cmp, report
