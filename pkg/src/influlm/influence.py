"""Instance-, span- and token-level influence of training examples on a query objective.

Sign convention: a positive score means upweighting the example is predicted
to increase the query log-likelihood.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch.func import functional_call, jvp

from .ekfac import CurvatureModel, ihvp
from .gradients import GradVector, example_grad, query_grad, _grad
from .tinylm import (
    Example, InvalidInput, QuerySet, TinyLM, _sequence, checkpoint_hash, response_logprobs,
)

DEFAULT_TOP_FRACTION = 0.05
SPAN_MODES = ("delete", "mask")


class CheckpointMismatch(ValueError):
    pass


@dataclass
class PreconditionedQuery:
    """Inverse-curvature-preconditioned query gradient, shared by every example scored against it."""

    q: GradVector
    query_set_id: str
    curvature_id: str
    checkpoint_hash: str


class SpanScore(NamedTuple):
    label: str
    start: int
    end: int
    score: float


@dataclass
class InfluenceRecord:
    example_id: str
    instance_score: float
    query_set_id: str
    checkpoint_hash: str
    token_scores: list[float] | None = None
    span_scores: list[SpanScore] | None = None

    def to_dict(self) -> dict:
        return {
            "example_id": self.example_id,
            "instance_score": self.instance_score,
            "query_set_id": self.query_set_id,
            "checkpoint_hash": self.checkpoint_hash,
            "token_scores": self.token_scores,
            "span_scores": None if self.span_scores is None else [list(s) for s in self.span_scores],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InfluenceRecord":
        spans = d.get("span_scores")
        return cls(d["example_id"], d["instance_score"], d["query_set_id"], d["checkpoint_hash"],
                   d.get("token_scores"), None if spans is None else [SpanScore(*s) for s in spans])


def precondition_query(model: TinyLM, curvature: CurvatureModel, queries: QuerySet) -> PreconditionedQuery:
    ck = checkpoint_hash(model)
    if curvature.checkpoint_hash != ck:
        raise CheckpointMismatch(f"curvature was fitted on checkpoint {curvature.checkpoint_hash}, model is {ck}")
    curvature.check_alignment(model.layer_map())
    q = ihvp(curvature, query_grad(model, queries))
    return PreconditionedQuery(GradVector(q.values, "query"), queries.id, curvature.id, ck)


def instance_influence(model: TinyLM, pq: PreconditionedQuery, example: Example) -> float:
    """``-<q, grad L(example)>``; an empty response has zero gradient and scores 0."""
    if not example.response:
        return 0.0
    return -float(pq.q.values @ example_grad(model, example).values)


def _masked_score(model: TinyLM, pq: PreconditionedQuery, example: Example, keep: np.ndarray) -> float:
    if not keep.any():
        return 0.0
    logp = response_logprobs(model, example.prompt, example.response)
    loss = -logp[torch.from_numpy(keep)].mean()
    return -float(pq.q.values @ _grad(model, loss, example.id))


def sequence_influence(model: TinyLM, pq: PreconditionedQuery, example: Example,
                       span: tuple[int, int], mode: str = "delete") -> float:
    """Influence of ``example`` minus that of the example without ``response[start:end]``.

    ``mode="delete"`` removes the tokens so later positions shift;
    ``mode="mask"`` keeps them as context but drops them from the loss.
    """
    start, end = span
    if not (0 <= start <= end <= len(example.response)):
        raise InvalidInput(f"span [{start}, {end}) outside response of length {len(example.response)}")
    if mode not in SPAN_MODES:
        raise InvalidInput(f"unknown span mode {mode!r}")
    if start == end:
        return 0.0
    full = instance_influence(model, pq, example)
    if mode == "delete":
        return full - instance_influence(model, pq, example.without_span(start, end))
    keep = np.ones(len(example.response), dtype=bool)
    keep[start:end] = False
    return full - _masked_score(model, pq, example, keep)


def _mlp_param_names(model: TinyLM) -> list[str]:
    lookup = {id(p): name for name, p in model.named_parameters()}
    return [lookup[id(p)] for p in model.mlp_parameters()]


def token_influence(model: TinyLM, pq: PreconditionedQuery, example: Example) -> list[float]:
    """``<q, (1/T) grad log p(z_t | z_<t)>`` for every response token.

    Evaluated as one forward-mode directional derivative of the per-token
    log-probabilities along ``q``, rather than T separate backward passes.
    """
    if not example.response:
        raise InvalidInput(f"{example.id}: empty response")
    names = _mlp_param_names(model)
    primals, tangents = [], []
    for spec, (_, lin) in zip(model.layer_map(), model.mlp_layers()):
        block = torch.from_numpy(pq.q.values[spec.offset:spec.offset + spec.size].reshape(spec.d_out, spec.d_in + 1))
        primals += [lin.weight.detach(), lin.bias.detach()]
        tangents += [block[:, :-1].contiguous(), block[:, -1].contiguous()]
    seq = torch.tensor([_sequence(example.prompt, example.response)], dtype=torch.long)
    start = len(example.prompt)
    targets = torch.tensor(example.response, dtype=torch.long)[:, None]

    def logprobs(*mlp):
        out = functional_call(model, dict(zip(names, mlp)), (seq,))[0]
        return out[start:start + len(example.response)].gather(1, targets)[:, 0]

    _, directional = jvp(logprobs, tuple(primals), tuple(tangents))
    return (directional / len(example.response)).detach().numpy().tolist()


def top_tokens(record: InfluenceRecord, fraction: float = DEFAULT_TOP_FRACTION) -> list[int]:
    """Indices of the ``ceil(fraction * T)`` highest token scores, ties to the lower index, in rank order."""
    if record.token_scores is None:
        raise InvalidInput(f"{record.example_id}: no token scores; score with the token target first")
    if not (0 < fraction <= 1):
        raise InvalidInput("fraction must be in (0, 1]")
    scores = record.token_scores
    k = math.ceil(fraction * len(scores) - 1e-12)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order[:k]


def score_examples(model: TinyLM, pq: PreconditionedQuery, examples: Sequence[Example],
                   targets: Sequence[str] = ("instance",), span_mode: str = "delete") -> list[InfluenceRecord]:
    """Score every example; ``targets`` may add ``"token"`` and ``"sequence"`` (behavior spans)."""
    unknown = set(targets) - {"instance", "token", "sequence"}
    if unknown:
        raise InvalidInput(f"unknown score targets {sorted(unknown)}")
    records = []
    for ex in sorted(examples, key=lambda e: e.id):
        inst = instance_influence(model, pq, ex)
        rec = InfluenceRecord(ex.id, inst, pq.query_set_id, pq.checkpoint_hash)
        if "token" in targets and ex.response:
            rec.token_scores = token_influence(model, pq, ex)
        if "sequence" in targets:
            rec.span_scores = [SpanScore(s.label, s.start, s.end, sequence_influence(model, pq, ex, (s.start, s.end), span_mode))
                               for s in ex.behavior_spans]
        records.append(rec)
    return records
