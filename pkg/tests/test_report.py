import json
from pathlib import Path

import pytest

from influlm.attribution import difficulty_flip
from influlm.influence import InfluenceRecord, SpanScore
from influlm.report import ReportOptions, emit_report, render_heatmap, token_label
from influlm.tinylm import EOS, Example, InvalidInput, Span, tokenize

GOLDEN = Path(__file__).parent / "golden"


def _fixture():
    dataset = [
        Example("a", tokenize("1+1="), tokenize("2 ok") + [EOS], domain="math", category="add", difficulty=1,
                behavior_spans=[Span("verification", 1, 4)]),
        Example("b", tokenize("close ("), tokenize(")") + [EOS], domain="code", category="brackets", difficulty=1),
        Example("c", tokenize("x<&>"), tokenize("<b>\n") + [EOS], domain="code", category="brackets", difficulty=3),
    ]
    records = {
        "math": [
            InfluenceRecord("a", 1.5, "qm", "ck", token_scores=[1.0, -0.25, 0.5, 0.125, 0.125],
                            span_scores=[SpanScore("verification", 1, 4, 0.375)]),
            InfluenceRecord("b", -0.5, "qm", "ck", token_scores=[-0.75, 0.25], span_scores=[]),
            InfluenceRecord("c", 0.25, "qm", "ck", token_scores=[0.0, 0.5, -0.5, 0.125, 0.125], span_scores=[]),
        ],
    }
    return dataset, records


def test_report_matches_golden_files(tmp_path):
    dataset, records = _fixture()
    pool = [Example("pc", [1], [2, EOS], domain="code", difficulty=1)]
    plan = difficulty_flip(dataset, pool, 2, 3)
    options = ReportOptions(fraction=0.4, n_examples=2, correlations={"math": {10: 0.5, 3: 1.0}}, flip_plan=plan)
    written = emit_report(records, dataset, tmp_path, options)
    assert sorted(written) == ["heatmaps/math/a.html", "heatmaps/math/c.html", "index.html", "summary.json"]
    for rel in written:
        assert (tmp_path / rel).read_bytes() == (GOLDEN / "report" / rel).read_bytes(), rel


def test_report_is_byte_deterministic(tmp_path):
    dataset, records = _fixture()
    first = emit_report(records, dataset, tmp_path / "one")
    second = emit_report(records, dataset, tmp_path / "two")
    assert first == second


def test_summary_contents(tmp_path):
    dataset, records = _fixture()
    emit_report(records, dataset, tmp_path, ReportOptions(heatmaps=False))
    summary = json.loads((tmp_path / "summary.json").read_text())
    math = summary["targets"]["math"]
    assert math["top_positive"] == [["a", 1.5], ["c", 0.25]]
    assert {g["key"]: g["mean"] for g in math["groups"]["domain"]} == {"code": -0.125, "math": 1.5}
    assert math["behaviors"][0]["key"] == "verification"
    assert not (tmp_path / "index.html").exists()


def test_single_token_response_is_highlighted():
    ex = Example("s", tokenize("q"), [EOS])
    page = render_heatmap(InfluenceRecord("s", -2.0, "q", "c", token_scores=[-2.0]), ex, "math", 0.05)
    assert page.count('class="tok hl"') == 1
    assert "&lt;eos&gt;" in page


def test_heatmap_highlights_top_fraction_and_escapes():
    dataset, records = _fixture()
    page = render_heatmap(records["math"][2], dataset[2], "math", 0.4)
    assert page.count('class="tok hl"') == 2
    assert 'title="t=1 score=5.000000e-01">b<' in page
    assert "x&lt;&amp;&gt;" in page and "\\n" in page


def test_missing_token_scores_rejected_with_hint(tmp_path):
    dataset, _ = _fixture()
    records = {"math": [InfluenceRecord("a", 1.0, "q", "c")]}
    with pytest.raises(InvalidInput, match="token"):
        emit_report(records, dataset, tmp_path)


def test_token_labels():
    assert token_label(ord("a")) == "a"
    assert token_label(EOS) == "<eos>"
    assert token_label(10) == "\\n"
    assert token_label(200) == "\\xc8"
