"""Line-delimited dataset I/O and a synthetic two-domain corpus.

Record schema (one JSON object per line)::

    {"id": "m0001", "prompt": "12+7=", "response": "19", "domain": "math",
     "category": "add", "difficulty": 3,
     "behavior_spans": [{"label": "verification", "start": 2, "end": 9}]}

``prompt``/``response`` may be strings (byte tokens; an end-of-sequence token
is appended to a string response) or explicit lists of token ids.
"""
from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import storage
from .tinylm import EOS, Example, InvalidInput, Span, detokenize, tokenize

logger = logging.getLogger(__name__)

MAX_ERROR_RATE = 0.01


class IngestError(ValueError):
    def __init__(self, message: str, errors: list[tuple[int, str]]):
        super().__init__(message)
        self.errors = errors


@dataclass
class IngestResult:
    examples: list[Example]
    errors: list[tuple[int, str]] = field(default_factory=list)


@dataclass(frozen=True)
class EvalItem:
    prompt: str
    answer: str
    domain: str = "other"


def _tokens(value, what: str, append_eos: bool) -> list[int]:
    if isinstance(value, str):
        return tokenize(value) + ([EOS] if append_eos else [])
    if isinstance(value, list) and all(isinstance(t, int) and 0 <= t <= EOS for t in value):
        return list(value)
    raise InvalidInput(f"{what} must be a string or a list of token ids")


def _span(raw) -> Span:
    if isinstance(raw, dict):
        return Span(raw["label"], int(raw["start"]), int(raw["end"]))
    label, start, end = raw
    return Span(label, int(start), int(end))


def example_from_record(rec: dict) -> Example:
    for key in ("id", "prompt", "response"):
        if key not in rec:
            raise InvalidInput(f"missing required field {key!r}")
    difficulty = rec.get("difficulty")
    if difficulty is not None and (isinstance(difficulty, bool) or not isinstance(difficulty, int)):
        raise InvalidInput(f"difficulty must be an integer, got {difficulty!r}")
    return Example(
        id=str(rec["id"]),
        prompt=_tokens(rec["prompt"], "prompt", append_eos=False),
        response=_tokens(rec["response"], "response", append_eos=True),
        domain=rec.get("domain") or "other",
        category=rec.get("category"),
        difficulty=difficulty,
        behavior_spans=[_span(s) for s in rec.get("behavior_spans") or []],
    )


def _as_text(tokens: Sequence[int], eos_terminated: bool):
    """Text form when it re-tokenizes to exactly ``tokens``, otherwise the raw id list."""
    body = list(tokens)
    if eos_terminated:
        if not body or body[-1] != EOS:
            return list(tokens)
        body = body[:-1]
    if any(t >= 256 for t in body):
        return list(tokens)
    try:
        return bytes(body).decode("utf-8")
    except UnicodeDecodeError:
        return list(tokens)


def example_to_record(ex: Example) -> dict:
    return {
        "id": ex.id,
        "prompt": _as_text(ex.prompt, eos_terminated=False),
        "response": _as_text(ex.response, eos_terminated=True),
        "domain": ex.domain,
        "category": ex.category,
        "difficulty": ex.difficulty,
        "behavior_spans": [{"label": s.label, "start": s.start, "end": s.end} for s in ex.behavior_spans],
    }


def ingest(path: str | Path, max_error_rate: float = MAX_ERROR_RATE) -> IngestResult:
    """Parse and validate a dataset file; malformed lines go to ``errors``.

    Raises :class:`IngestError` when more than ``max_error_rate`` of the lines are malformed.
    """
    examples, errors = [], []
    seen: set[str] = set()
    n_lines = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            n_lines += 1
            try:
                ex = example_from_record(json.loads(line))
                if ex.id in seen:
                    raise InvalidInput(f"duplicate id {ex.id!r}")
            except (ValueError, KeyError, TypeError) as exc:
                errors.append((lineno, str(exc)))
                continue
            seen.add(ex.id)
            examples.append(ex)
    if n_lines == 0:
        logger.warning("%s: empty dataset", path)
    elif len(errors) / n_lines > max_error_rate:
        raise IngestError(f"{path}: {len(errors)} of {n_lines} lines malformed", errors)
    for lineno, msg in errors:
        logger.warning("%s:%d rejected: %s", path, lineno, msg)
    return IngestResult(examples, errors)


def write_dataset(path: str | Path, examples: Sequence[Example]) -> str:
    return storage.write_jsonl(path, [example_to_record(e) for e in examples])


def ingest_evalset(path: str | Path) -> list[EvalItem]:
    items = []
    for i, rec in enumerate(storage.read_jsonl(path), 1):
        if "prompt" not in rec or "answer" not in rec:
            raise InvalidInput(f"{path}: record {i} needs 'prompt' and 'answer'")
        items.append(EvalItem(rec["prompt"], rec["answer"], rec.get("domain") or "other"))
    return items


def write_evalset(path: str | Path, items: Sequence[EvalItem]) -> str:
    return storage.write_jsonl(path, [{"prompt": i.prompt, "answer": i.answer, "domain": i.domain} for i in items])


# --------------------------------------------------------------------------
# synthetic corpus: arithmetic answers vs. bracket-closing programs

BEHAVIOR_RATE = 0.1
_OPEN = "([{<"
_CLOSE = {"(": ")", "[": "]", "{": "}", "<": ">"}


def _math_problem(rng: random.Random, difficulty: int) -> tuple[str, str, str]:
    lo, hi = {1: (0, 2), 2: (0, 4), 3: (0, 9), 4: (10, 49), 5: (10, 99)}[difficulty]
    a, b = rng.randint(lo, hi), rng.randint(0, hi if difficulty <= 3 or difficulty == 5 else 9)
    if rng.random() < 0.25:
        return f"x+{b}={a + b};x=", str(a), "FOBAR"
    return f"{a}+{b}=", str(a + b), "add"


def _code_problem(rng: random.Random, difficulty: int) -> tuple[str, str, str]:
    opened = "".join(rng.choice(_OPEN) for _ in range(difficulty))
    closing = "".join(_CLOSE[c] for c in reversed(opened))
    return f"close {opened}", closing, "brackets"


def _with_behaviors(answer: str, domain: str, rng: random.Random, prompt: str, rate: float):
    """Optionally append annotated behavior segments after the answer."""
    response, spans = answer, []
    if domain == "math":
        segments = [("verification", f" check {answer}"), ("exploration", f" alt {prompt}{answer}")]
    else:
        segments = [("verification", f" ok {answer}"), ("subgoal", " step"), ("exploration", f" alt {answer}")]
    for label, text in segments:
        if rng.random() < rate:
            start = len(tokenize(response))
            response += text
            spans.append(Span(label, start, len(tokenize(response))))
    return response, spans


def synthetic_examples(domain: str, n: int, seed: int = 0, prefix: str | None = None,
                       difficulties: Sequence[int] = (1, 2, 3, 4, 5), behavior_rate: float = BEHAVIOR_RATE) -> list[Example]:
    rng = random.Random(f"{domain}:{seed}")
    make = _math_problem if domain == "math" else _code_problem
    prefix = prefix or domain[0]
    out = []
    for i in range(n):
        d = rng.choice(list(difficulties))
        prompt, answer, category = make(rng, d)
        response, spans = _with_behaviors(answer, domain, rng, prompt, behavior_rate)
        out.append(Example(id=f"{prefix}{i:05d}", prompt=tokenize(prompt), response=tokenize(response) + [EOS],
                           domain=domain, category=category, difficulty=d, behavior_spans=spans))
    return out


def synthetic_corpus(n_math: int = 500, n_code: int = 500, seed: int = 0) -> list[Example]:
    return synthetic_examples("math", n_math, seed) + synthetic_examples("code", n_code, seed)


def synthetic_evalset(domain: str, n: int, seed: int = 1, difficulties: Sequence[int] = (1, 2, 3, 4)) -> list[EvalItem]:
    """Distinct (prompt, answer) problems; fewer than ``n`` if the problem space is exhausted."""
    rng = random.Random(f"eval:{domain}:{seed}")
    make = _math_problem if domain == "math" else _code_problem
    seen, items = set(), []
    for _ in range(50 * n):
        prompt, answer, _ = make(rng, rng.choice(list(difficulties)))
        if prompt not in seen:
            seen.add(prompt)
            items.append(EvalItem(prompt, answer, domain))
        if len(items) == n:
            break
    return items


def render(example: Example) -> str:
    return detokenize(example.prompt) + " => " + detokenize(example.response)
