import json
import logging

import pytest

from influlm import storage
from influlm.data import EvalItem, ingest, synthetic_examples, write_dataset, write_evalset
from influlm.pipeline import (
    MANIFEST, OUTPUT_ROOT_ENV, RunConfig, StageError, load_config, read_records, records_path, resolve_output_dir,
    run_pipeline,
)
from influlm.tinylm import EOS, Example, InvalidInput, detokenize


def _write_fixture(root):
    train = (synthetic_examples("math", 40, 0, difficulties=(1, 2))
             + synthetic_examples("code", 40, 0, difficulties=(1, 2), behavior_rate=0.5))
    # evaluation problems are the training problems, so a briefly trained model answers some of them
    evalset = [EvalItem(detokenize(e.prompt), detokenize([t for t in e.response if t != EOS]).split(" ")[0], e.domain)
               for e in train]
    pool = (synthetic_examples("math", 6, 5, prefix="pm", difficulties=(3, 4, 5))
            + synthetic_examples("code", 6, 5, prefix="pc", difficulties=(1, 2, 3)))
    write_dataset(root / "train.jsonl", train)
    write_evalset(root / "eval.jsonl", evalset)
    write_dataset(root / "pool.jsonl", pool)


def make_config(root, out="run", **extra):
    raw = {
        "dataset": str(root / "train.jsonl"), "evalset": str(root / "eval.jsonl"), "pool": str(root / "pool.jsonl"),
        "output_dir": str(root / out),
        "model": {"d_model": 16, "n_heads": 2, "d_ff": 32, "max_seq_len": 40},
        "training": {"steps": 200, "batch_size": 16, "lr": 1e-2},
        "factors": {"sample_count": 40, "max_positions": 16},
        "query_n": 12,
        "analysis": {"robustness_ns": [4, 8], "report_examples": 3},
    }
    raw.update(extra)
    return RunConfig.from_dict(raw)


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    _write_fixture(root)
    return root


@pytest.fixture(scope="module")
def first_run(fixture_dir):
    return run_pipeline(make_config(fixture_dir))


def test_full_run_writes_every_artifact(first_run):
    out = first_run.output_dir
    assert first_run.executed == ["train", "factors", "query", "score", "analyze"]
    queries = json.loads((out / "queries.json").read_text())
    assert set(queries) == {"math", "code"}
    for target in queries:
        recs = read_records(out / records_path(target))
        assert len(recs) == 80 and all(r.token_scores is not None for r in recs)
        for n in (4, 8):
            assert len(read_records(out / records_path(target, n))) == 80
    summary = json.loads((out / "report/summary.json").read_text())
    assert set(summary["targets"]["math"]["n_robustness"]) == {"4", "8", "12"}
    assert (out / "report/index.html").exists()
    assert len(ingest(out / "flip/flipped_dataset.jsonl").examples) == 80
    manifest = json.loads((out / MANIFEST).read_text())
    assert set(manifest["stages"]) == {"train", "factors", "query", "score", "analyze"}


def test_rerun_is_a_cache_hit(fixture_dir, first_run):
    before = {p: storage.sha256_file(p) for p in first_run.output_dir.rglob("*") if p.is_file()}
    again = run_pipeline(make_config(fixture_dir))
    assert again.executed == [] and again.cached == ["train", "factors", "query", "score", "analyze"]
    after = {p: storage.sha256_file(p) for p in first_run.output_dir.rglob("*") if p.is_file()}
    assert before == after


def test_independent_runs_are_byte_identical(fixture_dir, first_run):
    other = run_pipeline(make_config(fixture_dir, out="run_b"))
    for stage in ("train", "factors", "query", "score", "analyze"):
        assert other.manifest["stages"][stage]["outputs"] == first_run.manifest["stages"][stage]["outputs"]


def test_deleted_output_reruns_only_downstream(fixture_dir, first_run):
    cfg = make_config(fixture_dir, out="run_c")
    run_pipeline(cfg)
    (resolve_output_dir(cfg.output_dir) / records_path("math")).unlink()
    again = run_pipeline(cfg)
    assert again.cached == ["train", "factors", "query"]
    assert again.executed == ["score", "analyze"]


def test_config_change_invalidates_later_stages(fixture_dir, first_run):
    cfg = make_config(fixture_dir, out="run_c")
    run_pipeline(cfg)
    cfg.analysis.top_fraction = 0.5
    again = run_pipeline(cfg)
    assert again.executed == ["analyze"]


def test_partial_run_drops_stale_downstream(fixture_dir, first_run):
    cfg = make_config(fixture_dir, out="run_d")
    run_pipeline(cfg)
    cfg.factors.damping = 0.5
    result = run_pipeline(cfg, until="factors")
    assert result.executed == ["factors"]
    assert list(result.manifest["stages"]) == ["train", "factors"]


def test_stage_failure_names_the_stage(tmp_path, fixture_dir):
    bad_eval = tmp_path / "eval.jsonl"
    write_evalset(bad_eval, [EvalItem("zzzz", "never", "math")])
    cfg = make_config(fixture_dir, out=str(tmp_path / "fail"), evalset=str(bad_eval))
    with pytest.raises(StageError) as info:
        run_pipeline(cfg)
    assert info.value.stage == "query"
    assert "upstream" in info.value.trail


def test_overlong_examples_are_truncated(tmp_path, caplog):
    long = Example("long", [65] * 30, [66] * 30 + [EOS], domain="math", difficulty=1)
    write_dataset(tmp_path / "train.jsonl", [long])
    write_evalset(tmp_path / "eval.jsonl", [EvalItem("A", "B", "math")])
    raw = {"dataset": str(tmp_path / "train.jsonl"), "evalset": str(tmp_path / "eval.jsonl"),
           "output_dir": str(tmp_path / "out"), "model": {"d_model": 8, "n_heads": 2, "d_ff": 8, "max_seq_len": 16},
           "training": {"steps": 2}}
    with caplog.at_level(logging.WARNING):
        run_pipeline(RunConfig.from_dict(raw), until="train")
    assert "truncated" in caplog.text
    cut = long.truncated(16)
    assert len(cut.prompt) + len(cut.response) == 15


def test_config_validation(tmp_path, fixture_dir):
    with pytest.raises(InvalidInput):
        RunConfig.from_dict({"dataset": "a", "evalset": "b", "output_dir": "c", "colour": 1})
    with pytest.raises(InvalidInput):
        RunConfig.from_dict({"dataset": "a", "evalset": "b", "output_dir": "c", "factors": {"rank": 3}})
    with pytest.raises(InvalidInput):
        run_pipeline(RunConfig.from_dict({"dataset": str(tmp_path / "none"), "evalset": "b", "output_dir": "c"}))
    with pytest.raises(InvalidInput):
        run_pipeline(make_config(fixture_dir, query_n=5))  # robustness n above query_n
    with pytest.raises(InvalidInput):
        run_pipeline(make_config(fixture_dir), until="deploy")


def test_load_config_overrides(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"dataset": "a", "evalset": "b", "output_dir": "c", "factors": {"damping": 0.2}}))
    cfg = load_config(path, {"factors.damping": 0.7, "training.steps": 9, "score_targets": ["instance"]})
    assert cfg.factors.damping == 0.7 and cfg.training.steps == 9 and cfg.score_targets == ("instance",)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    assert resolve_output_dir("runs/x") == tmp_path / "runs/x"
    assert resolve_output_dir("/abs/y") == tmp_path.__class__("/abs/y")
    monkeypatch.delenv(OUTPUT_ROOT_ENV)
    assert str(resolve_output_dir("runs/x")) == "runs/x"
