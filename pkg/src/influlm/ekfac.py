"""Eigenvalue-corrected Kronecker-factored curvature for the MLP layers.

For a linear layer with bias-augmented input ``a`` and pre-activation gradient
``g`` the weight gradient is ``G = g a^T`` (shape ``d_out x (d_in+1)``). Its
row-major vectorisation is ``kron(g, a)``, so the curvature block is modelled as
``kron(S, A)`` whose eigenvectors are ``kron(Q_S[:, j], Q_A[:, i])``. The
eigenvalues are then refit per direction from sampled gradients.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
import torch

from . import storage
from .gradients import GradVector
from .tinylm import Example, InvalidInput, LayerSpec, TinyLM, checkpoint_hash, _sequence

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-8
DEFAULT_DAMPING_FACTOR = 0.1
DAMPING_FLOOR = 1e-8


@dataclass
class LayerFactors:
    layer_id: str
    A: np.ndarray
    S: np.ndarray
    Q_A: np.ndarray
    Q_S: np.ndarray
    Lambda: np.ndarray  # (d_in+1, d_out)
    damping: float
    sample_count: int

    def __post_init__(self):
        # a fixed memory layout keeps BLAS results identical before and after a save/load round trip
        for name in ("A", "S", "Q_A", "Q_S", "Lambda"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))

    def validate(self, tol: float = 1e-8) -> None:
        for name, M in (("A", self.A), ("S", self.S)):
            if not np.allclose(M, M.T, atol=tol * max(1.0, np.abs(M).max())):
                raise InvalidInput(f"{self.layer_id}: {name} is not symmetric")
            if np.linalg.eigvalsh(M).min() < -tol * max(1.0, np.abs(M).max()):
                raise InvalidInput(f"{self.layer_id}: {name} is not positive semi-definite")
        for name, Q in (("Q_A", self.Q_A), ("Q_S", self.Q_S)):
            if np.abs(Q.T @ Q - np.eye(len(Q))).max() > tol:
                raise InvalidInput(f"{self.layer_id}: {name} is not orthonormal")
        if (self.Lambda < 0).any():
            raise InvalidInput(f"{self.layer_id}: negative corrected eigenvalue")
        if not self.damping > 0:
            raise InvalidInput(f"{self.layer_id}: damping must be positive")

    def with_damping(self, damping: float) -> "LayerFactors":
        return LayerFactors(self.layer_id, self.A, self.S, self.Q_A, self.Q_S, self.Lambda,
                            damping, self.sample_count)

    def ihvp(self, V: np.ndarray) -> np.ndarray:
        """Apply ``(kron(S, A) + damping)^-1`` in the corrected eigenbasis to a ``d_out x (d_in+1)`` block."""
        R = self.Q_S.T @ V @ self.Q_A
        R = R / (self.Lambda.T + self.damping)
        return self.Q_S @ R @ self.Q_A.T


@dataclass
class CurvatureModel:
    layers: list[LayerFactors]
    checkpoint_hash: str
    seed: int

    @property
    def id(self) -> str:
        arrays = []
        for f in self.layers:
            arrays += [f.Q_A, f.Q_S, f.Lambda, np.array([f.damping])]
        return storage.hash_arrays(*arrays)[:16]

    def check_alignment(self, layer_map: Sequence[LayerSpec]) -> None:
        if [f.layer_id for f in self.layers] != [s.layer_id for s in layer_map]:
            raise InvalidInput("curvature layers do not match the parameter layer map")
        for f, s in zip(self.layers, layer_map):
            if f.Lambda.shape != (s.d_in + 1, s.d_out):
                raise InvalidInput(f"{s.layer_id}: factor shape {f.Lambda.shape} vs layer {(s.d_in + 1, s.d_out)}")

    def layer_specs(self) -> list[LayerSpec]:
        specs, offset = [], 0
        for f in self.layers:
            d_in, d_out = f.Lambda.shape[0] - 1, f.Lambda.shape[1]
            specs.append(LayerSpec(f.layer_id, offset, d_in, d_out))
            offset += specs[-1].size
        return specs

    def save(self, path) -> str:
        meta = {
            "checkpoint_hash": self.checkpoint_hash,
            "seed": self.seed,
            "layers": [{"layer_id": f.layer_id, "damping": f.damping, "sample_count": f.sample_count}
                       for f in self.layers],
        }
        arrays = {}
        for i, f in enumerate(self.layers):
            for name in ("A", "S", "Q_A", "Q_S", "Lambda"):
                arrays[f"{i:03d}.{name}"] = getattr(f, name)
        return storage.save_arrays(path, "curvature", meta, arrays)

    @classmethod
    def load(cls, path) -> "CurvatureModel":
        meta, arrays = storage.load_arrays(path, "curvature")
        layers = []
        for i, m in enumerate(meta["layers"]):
            parts = {name: arrays[f"{i:03d}.{name}"] for name in ("A", "S", "Q_A", "Q_S", "Lambda")}
            layers.append(LayerFactors(m["layer_id"], damping=m["damping"], sample_count=m["sample_count"], **parts))
        return cls(layers, meta["checkpoint_hash"], meta["seed"])


# --------------------------------------------------------------------------
# array-level building blocks


def augment(acts: np.ndarray) -> np.ndarray:
    """Append the homogeneous coordinate that carries the bias."""
    return np.concatenate([acts, np.ones((acts.shape[0], 1))], axis=1)


def kronecker_factors(acts: np.ndarray, grads: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Second moments of bias-augmented inputs ``acts`` (n, d_in+1) and output gradients ``grads`` (n, d_out)."""
    if len(acts) == 0 or len(grads) == 0:
        raise InvalidInput("empty sample")
    A = acts.T @ acts / len(acts)
    S = grads.T @ grads / len(grads)
    return (A + A.T) / 2, (S + S.T) / 2


def _eigh_desc(M: np.ndarray, name: str) -> tuple[np.ndarray, np.ndarray]:
    scale = max(1.0, np.abs(M).max())
    if np.abs(M - M.T).max() > SYMMETRY_TOL * scale:
        raise InvalidInput(f"{name} is not symmetric")
    w, Q = np.linalg.eigh((M + M.T) / 2)
    order = np.argsort(-w, kind="stable")
    return Q[:, order], w[order]


def eigendecompose(A: np.ndarray, S: np.ndarray):
    """Eigenbases of both factors, eigenvalues sorted in descending order."""
    Q_A, lam_A = _eigh_desc(A, "A")
    Q_S, lam_S = _eigh_desc(S, "S")
    return Q_A, lam_A, Q_S, lam_S


def eigenvalue_correction(grad_mats: np.ndarray, Q_A: np.ndarray, Q_S: np.ndarray) -> np.ndarray:
    """Mean squared projection of each sampled gradient matrix (n, d_out, d_in+1) on the Kronecker eigenbasis.

    Returns shape (d_in+1, d_out).
    """
    if len(grad_mats) == 0:
        raise InvalidInput("empty sample")
    rotated = np.einsum("oj,noi,ik->nkj", Q_S, grad_mats, Q_A)
    return (rotated ** 2).mean(axis=0)


def default_damping(Lambda: np.ndarray, factor: float = DEFAULT_DAMPING_FACTOR) -> float:
    return max(factor * float(Lambda.mean()), DAMPING_FLOOR)


def reconstruction_error(grad_mats: np.ndarray, Q_A: np.ndarray, Q_S: np.ndarray, diag: np.ndarray) -> float:
    """Frobenius distance between the empirical curvature ``mean vec(G) vec(G)^T`` and
    ``Q diag(diag) Q^T`` with ``Q = kron(Q_S, Q_A)``.

    Computed without forming the dense matrix:
    ``||C||^2 - 2 sum(diag * c) + sum(diag^2)`` where ``c`` is the diagonal of C in the rotated basis.
    """
    n = len(grad_mats)
    flat = grad_mats.reshape(n, -1)
    gram = flat @ flat.T
    c_norm2 = (gram ** 2).sum() / n ** 2
    c_rot = eigenvalue_correction(grad_mats, Q_A, Q_S)
    err2 = c_norm2 - 2 * (diag * c_rot).sum() + (diag ** 2).sum()
    return float(np.sqrt(max(err2, 0.0)))


# --------------------------------------------------------------------------
# model-level estimation


@dataclass
class _LayerSample:
    acts: np.ndarray     # (P, d_in+1) augmented inputs at contributing positions
    grads: np.ndarray    # (P, d_out) pre-activation gradients
    weight_grad: np.ndarray  # (d_out, d_in+1) summed over positions


def _pick_examples(examples: Sequence[Example], sample_count: int, seed: int) -> list[Example]:
    if sample_count < 1:
        raise InvalidInput("sample_count must be >= 1")
    pool = [e for e in examples if e.response]
    if not pool:
        raise InvalidInput("empty sample")
    perm = np.random.default_rng(seed).permutation(len(pool))
    return [pool[i] for i in perm[:sample_count]]


def sampled_layer_statistics(model: TinyLM, example: Example, gen: torch.Generator,
                             n_draws: int = 1) -> Iterator[dict[str, _LayerSample]]:
    """Backpropagate the summed loss of model-sampled response targets through every MLP layer.

    Context tokens are the example's own; only the predicted tokens are drawn
    from the model's predictive distribution. Yields one dict per draw.
    """
    seq = _sequence(example.prompt, example.response)
    start, stop = len(example.prompt), len(seq) - 1  # rows predicting response tokens
    for _ in range(n_draws):
        trace: list = []
        logp = model(torch.tensor([seq], dtype=torch.long), trace=trace)[0]
        rows = logp[start:stop]
        with torch.no_grad():
            targets = torch.multinomial(rows.exp(), 1, generator=gen)
        loss = -rows.gather(1, targets).sum()
        outs = torch.autograd.grad(loss, [s for _, _, s in trace])
        stats = {}
        for (name, a, _), g in zip(trace, outs):
            acts = augment(a[0, start:stop].detach().numpy())
            gr = g[0, start:stop].detach().numpy()
            stats[name] = _LayerSample(acts, gr, gr.T @ acts)
        yield stats


def estimate_factors(model: TinyLM, examples: Sequence[Example], sample_count: int, seed: int = 0,
                     max_positions: int = 64, n_draws: int = 1) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-layer (A, S): token-position means of outer products, at most ``max_positions`` positions per example."""
    chosen = _pick_examples(examples, sample_count, seed)
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    acc: dict[str, list] = {name: [0.0, 0.0, 0] for name, _ in model.mlp_layers()}
    for ex in chosen:
        for stats in sampled_layer_statistics(model, ex, gen, n_draws):
            P = None
            for name, s in stats.items():
                if P is None:
                    P = len(s.acts)
                    keep = np.sort(rng.choice(P, size=max_positions, replace=False)) if P > max_positions else np.arange(P)
                a, g = s.acts[keep], s.grads[keep]
                acc[name][0] = acc[name][0] + a.T @ a
                acc[name][1] = acc[name][1] + g.T @ g
                acc[name][2] += len(keep)
    out = {}
    for name, (aa, gg, count) in acc.items():
        A, S = aa / count, gg / count
        out[name] = ((A + A.T) / 2, (S + S.T) / 2)
    return out


def correct_eigenvalues(model: TinyLM, examples: Sequence[Example],
                        bases: dict[str, tuple[np.ndarray, np.ndarray]], sample_count: int,
                        seed: int = 0, n_draws: int = 1) -> dict[str, np.ndarray]:
    """Per-layer corrected eigenvalue grids (d_in+1, d_out).

    Each sample is one example's sampled-target weight gradient scaled by
    ``1/sqrt(T)``, so the average outer product matches the curvature of the
    per-example mean token loss.
    """
    chosen = _pick_examples(examples, sample_count, seed)
    gen = torch.Generator().manual_seed(seed + 1)
    sums: dict[str, np.ndarray] = {}
    count = 0
    for ex in chosen:
        T = len(ex.response)
        for stats in sampled_layer_statistics(model, ex, gen, n_draws):
            count += 1
            for name, s in stats.items():
                Q_A, Q_S = bases[name]
                rot = (Q_S.T @ s.weight_grad @ Q_A).T
                sums[name] = sums.get(name, 0.0) + rot ** 2 / T
    return {name: v / count for name, v in sums.items()}


def fit_curvature(model: TinyLM, examples: Sequence[Example], sample_count: int = 256, seed: int = 0,
                  max_positions: int = 64, n_draws: int = 1, damping: float | None = None,
                  damping_factor: float = DEFAULT_DAMPING_FACTOR) -> CurvatureModel:
    """Estimate factors, eigendecompose, correct eigenvalues and set damping for every MLP layer.

    ``damping=None`` uses ``damping_factor * mean(Lambda)`` per layer.
    """
    factors = estimate_factors(model, examples, sample_count, seed, max_positions, n_draws)
    bases = {}
    for name, (A, S) in factors.items():
        Q_A, _, Q_S, _ = eigendecompose(A, S)
        bases[name] = (Q_A, Q_S)
    lambdas = correct_eigenvalues(model, examples, bases, sample_count, seed, n_draws)
    n_used = min(sample_count, sum(1 for e in examples if e.response))
    layers = []
    for name, (A, S) in factors.items():
        Q_A, Q_S = bases[name]
        Lam = lambdas[name]
        lam = default_damping(Lam, damping_factor) if damping is None else float(damping)
        f = LayerFactors(name, A, S, Q_A, Q_S, Lam, lam, n_used)
        f.validate()
        layers.append(f)
    curv = CurvatureModel(layers, checkpoint_hash(model), seed)
    logger.info("curvature %s fitted on %d examples", curv.id, n_used)
    return curv


# --------------------------------------------------------------------------
# inverse curvature-vector products


def ihvp(curvature: CurvatureModel, v: GradVector | np.ndarray) -> GradVector:
    values = v.values if isinstance(v, GradVector) else np.asarray(v, dtype=np.float64)
    specs = curvature.layer_specs()
    total = sum(s.size for s in specs)
    if len(values) != total:
        raise InvalidInput(f"vector of length {len(values)} does not match curvature layout ({total})")
    out = np.empty_like(values)
    for f, s in zip(curvature.layers, specs):
        V = values[s.offset:s.offset + s.size].reshape(s.d_out, s.d_in + 1)
        out[s.offset:s.offset + s.size] = f.ihvp(V).reshape(-1)
    return GradVector(out, v.source if isinstance(v, GradVector) else "query")
