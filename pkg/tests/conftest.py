import random

import pytest

from influlm.tinylm import EOS, Example, ModelConfig, Span, build_model


def random_example(rng: random.Random, ex_id: str, max_prompt: int = 8, max_response: int = 10,
                   domain: str = "math") -> Example:
    prompt = [rng.randrange(256) for _ in range(rng.randint(0, max_prompt))]
    response = [rng.randrange(256) for _ in range(rng.randint(1, max_response - 1))] + [EOS]
    spans = []
    if len(response) >= 3:
        start = rng.randrange(len(response) - 1)
        spans.append(Span("verification", start, rng.randint(start + 1, len(response))))
    return Example(id=ex_id, prompt=prompt, response=response, domain=domain,
                   difficulty=rng.randint(1, 5), behavior_spans=spans)


@pytest.fixture(scope="session")
def small_cfg():
    return ModelConfig(d_model=16, n_layers=2, n_heads=2, d_ff=24, max_seq_len=64)


@pytest.fixture(scope="session")
def small_model(small_cfg):
    return build_model(small_cfg, seed=3)


@pytest.fixture(scope="session")
def examples():
    rng = random.Random(11)
    return [random_example(rng, f"e{i:03d}") for i in range(12)]
