import json
import logging
import random

import numpy as np
import pytest

from influlm import storage
from influlm.data import (
    EvalItem, IngestError, example_from_record, example_to_record, ingest, ingest_evalset, synthetic_corpus,
    synthetic_evalset, synthetic_examples, write_dataset, write_evalset,
)
from influlm.tinylm import EOS, Example, InvalidInput, Span

from conftest import random_example


def _write_lines(path, rows):
    path.write_text("".join((r if isinstance(r, str) else json.dumps(r)) + "\n" for r in rows))


def _good(i):
    return {"id": f"x{i:04d}", "prompt": "1+1=", "response": "2", "domain": "math", "difficulty": 1}


# ---------------------------------------------------------------- records

def test_string_fields_are_byte_tokens_with_eos():
    ex = example_from_record({"id": "a", "prompt": "hi", "response": "yo", "domain": "code",
                              "behavior_spans": [{"label": "subgoal", "start": 0, "end": 1}]})
    assert ex.prompt == (104, 105) and ex.response == (121, 111, EOS)
    assert ex.behavior_spans == (Span("subgoal", 0, 1),)
    assert example_from_record(example_to_record(ex)) == ex


def test_token_list_fields_round_trip():
    ex = Example("t", [256, 3], [7, 300 % 258, 9], domain="other")
    rec = example_to_record(ex)
    assert rec["prompt"] == [256, 3] and rec["response"] == [7, 42, 9]
    assert example_from_record(rec) == ex


def test_record_validation():
    with pytest.raises(InvalidInput):
        example_from_record({"id": "a", "prompt": "x"})
    with pytest.raises(InvalidInput):
        example_from_record({"id": "a", "prompt": "x", "response": "y", "difficulty": 9})
    with pytest.raises(InvalidInput):
        example_from_record({"id": "a", "prompt": "x", "response": "y", "difficulty": "hard"})
    with pytest.raises(InvalidInput):
        example_from_record({"id": "a", "prompt": [999], "response": "y"})
    with pytest.raises(InvalidInput):
        example_from_record({"id": "a", "prompt": "x", "response": "y", "domain": "poetry"})


# ---------------------------------------------------------------- ingest

def test_ingest_empty_file_warns(tmp_path, caplog):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    with caplog.at_level(logging.WARNING):
        result = ingest(path)
    assert result.examples == [] and result.errors == []
    assert "empty dataset" in caplog.text


def test_ingest_rejects_bad_span_line(tmp_path):
    rows = [_good(i) for i in range(150)]
    rows[37] = dict(rows[37], behavior_spans=[{"label": "verification", "start": 0, "end": 5}])
    path = tmp_path / "d.jsonl"
    _write_lines(path, rows)
    result = ingest(path)
    assert len(result.examples) == 149
    assert [lineno for lineno, _ in result.errors] == [38]
    assert "span" in result.errors[0][1]


def test_ingest_hard_fails_above_error_rate(tmp_path):
    rows = [_good(i) for i in range(50)] + ["{not json", {"id": "x0000", "prompt": "a", "response": "b"}]
    path = tmp_path / "d.jsonl"
    _write_lines(path, rows)
    with pytest.raises(IngestError) as info:
        ingest(path)
    assert len(info.value.errors) == 2
    assert any("duplicate" in msg for _, msg in info.value.errors)


def test_ingest_round_trip_1000_lines(tmp_path):
    rng = random.Random(0)
    original = [random_example(rng, f"r{i:04d}", domain=rng.choice(["math", "code", "other"])) for i in range(1000)]
    first = tmp_path / "a.jsonl"
    write_dataset(first, original)
    loaded = ingest(first).examples
    assert loaded == original
    second = tmp_path / "b.jsonl"
    write_dataset(second, loaded)
    assert ingest(second).examples == original
    assert storage.sha256_file(first) == storage.sha256_file(second)


def test_evalset_round_trip(tmp_path):
    items = [EvalItem("1+1=", "2", "math"), EvalItem("close (", ")", "code")]
    write_evalset(tmp_path / "e.jsonl", items)
    assert ingest_evalset(tmp_path / "e.jsonl") == items
    _write_lines(tmp_path / "bad.jsonl", [{"prompt": "x"}])
    with pytest.raises(InvalidInput):
        ingest_evalset(tmp_path / "bad.jsonl")


# ---------------------------------------------------------------- synthetic corpus

def test_synthetic_corpus_is_deterministic_and_annotated():
    a, b = synthetic_corpus(50, 50, seed=3), synthetic_corpus(50, 50, seed=3)
    assert a == b
    assert {e.domain for e in a} == {"math", "code"}
    assert all(1 <= e.difficulty <= 5 and e.response[-1] == EOS for e in a)
    assert any(e.behavior_spans for e in a)


def test_synthetic_answers_are_correct():
    for ex in synthetic_examples("math", 100, seed=1):
        prompt = bytes(ex.prompt).decode()
        answer = bytes(ex.response[:-1]).decode().split(" ")[0]
        if prompt.startswith("x+"):
            b, total = prompt[2:-3].split("=")
            assert int(answer) + int(b) == int(total)
        else:
            lhs, rhs = prompt[:-1].split("+")
            assert int(answer) == int(lhs) + int(rhs)
    pairs = {"(": ")", "[": "]", "{": "}", "<": ">"}
    for ex in synthetic_examples("code", 100, seed=1):
        opened = bytes(ex.prompt).decode().split(" ")[1]
        answer = bytes(ex.response[:-1]).decode().split(" ")[0]
        assert answer == "".join(pairs[c] for c in reversed(opened))
        assert len(opened) == ex.difficulty


def test_synthetic_evalset_has_distinct_prompts():
    items = synthetic_evalset("code", 120)
    assert len(items) == 120 and len({i.prompt for i in items}) == 120


# ---------------------------------------------------------------- containers

def test_array_container_round_trip(tmp_path):
    arrays = {"b": np.arange(6.0).reshape(2, 3), "a": np.array([np.pi])}
    sha = storage.save_arrays(tmp_path / "x.bin", "thing", {"k": 1}, arrays)
    assert sha == storage.sha256_file(tmp_path / "x.bin")
    meta, loaded = storage.load_arrays(tmp_path / "x.bin", "thing")
    assert meta == {"k": 1}
    for k in arrays:
        np.testing.assert_array_equal(loaded[k], arrays[k])
    assert storage.save_arrays(tmp_path / "y.bin", "thing", {"k": 1}, arrays) == sha
    with pytest.raises(storage.StorageError):
        storage.load_arrays(tmp_path / "x.bin", "other")
    (tmp_path / "z.bin").write_bytes(b"garbage")
    with pytest.raises(storage.StorageError):
        storage.load_arrays(tmp_path / "z.bin", "thing")
