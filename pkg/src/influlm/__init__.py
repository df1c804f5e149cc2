"""Influence-function attribution of a tiny language model's query performance to training data."""
from .ekfac import CurvatureModel, LayerFactors, fit_curvature, ihvp
from .gradients import GradVector, example_grad, query_grad, token_grads
from .influence import (
    InfluenceRecord, PreconditionedQuery, instance_influence, precondition_query, score_examples,
    sequence_influence, token_influence, top_tokens,
)
from .pipeline import RunConfig, run_pipeline
from .tinylm import Example, ModelConfig, ParamView, QuerySet, TinyLM, TrainConfig, build_model, train

__version__ = "0.1.0"
