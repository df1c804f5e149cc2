import numpy as np
import pytest
import torch

from influlm.gradients import (
    NonFiniteGradient, check_gradient, example_grad, finite_diff_check, query_grad, token_grads,
)
from influlm.tinylm import EOS, Example, InvalidInput, QuerySet, build_model, param_view, tokenize


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def test_example_grad_matches_finite_differences(small_model, examples):
    for ex in examples[:3]:
        assert finite_diff_check(small_model, ex, eps=1e-4, n_coords=20) <= 1e-4


def test_query_grad_matches_finite_differences(small_model, examples):
    qs = QuerySet(tuple((e.prompt, e.response) for e in examples[:4]))
    assert finite_diff_check(small_model, qs, eps=1e-4, n_coords=20) <= 1e-4


def test_finite_diff_exact_for_linear_functions():
    rng = np.random.default_rng(0)
    c = rng.normal(size=30)
    x = rng.normal(size=30)
    assert check_gradient(lambda v: float(c @ v), x, c, 1e-3, range(30)) <= 1e-10


def test_finite_diff_rejects_nonpositive_eps(small_model, examples):
    with pytest.raises(InvalidInput):
        finite_diff_check(small_model, examples[0], eps=0.0)
    with pytest.raises(InvalidInput):
        check_gradient(lambda v: 0.0, np.zeros(2), np.zeros(2), -1.0, [0])


def test_finite_diff_does_not_mutate(small_model, examples):
    before = param_view(small_model).values.copy()
    finite_diff_check(small_model, examples[0])
    np.testing.assert_array_equal(param_view(small_model).values, before)


def test_example_grad_is_pure(small_model, examples):
    a = example_grad(small_model, examples[0]).values
    b = example_grad(small_model, examples[0]).values
    np.testing.assert_array_equal(a, b)


def test_example_grad_zero_at_saturation(small_cfg):
    model = build_model(small_cfg, seed=0)
    with torch.no_grad():
        model.ln_f.weight.zero_()
        model.ln_f.bias.zero_()
        model.ln_f.bias[0] = 1.0
        model.head.weight.zero_()
        model.head.weight[ord("z"), 0] = 1e4
    ex = Example("sat", tokenize("q"), tokenize("zzz"))
    assert np.all(example_grad(model, ex).values == 0.0)
    assert all(np.all(g.values == 0.0) for g in token_grads(model, ex))


def test_token_grads_sum_identity(small_model, examples):
    for ex in examples:
        toks = token_grads(small_model, ex)
        assert len(toks) == len(ex.response)
        total = -np.sum([g.values for g in toks], axis=0)
        assert _rel(total, example_grad(small_model, ex).values) <= 1e-10


def test_token_grads_single_token(small_model):
    ex = Example("one", tokenize("hi"), [EOS])
    (only,) = token_grads(small_model, ex)
    np.testing.assert_allclose(-only.values, example_grad(small_model, ex).values, rtol=0, atol=1e-15)


def test_query_grad_singleton_is_negated_example_grad(small_model, examples):
    ex = examples[1]
    q = query_grad(small_model, QuerySet(((ex.prompt, ex.response),)))
    assert _rel(q.values, -example_grad(small_model, ex).values) <= 1e-12
    assert q.source == "query"


def test_query_grad_linearity(small_model, examples):
    a, b = examples[2], examples[3]
    qa = query_grad(small_model, QuerySet(((a.prompt, a.response),))).values
    qb = query_grad(small_model, QuerySet(((b.prompt, b.response),))).values
    both = query_grad(small_model, QuerySet(((a.prompt, a.response), (b.prompt, b.response)))).values
    assert _rel(both, (qa + qb) / 2) <= 1e-12


def test_nonfinite_gradient_names_layer(small_cfg, examples):
    model = build_model(small_cfg, seed=0)
    with torch.no_grad():
        model.blocks[1].fc_out.weight[0, 0] = float("nan")
    with pytest.raises(NonFiniteGradient, match="block"):
        example_grad(model, examples[0])
