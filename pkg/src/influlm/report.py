"""Summary JSON and per-example token heatmap documents."""
from __future__ import annotations

import html
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from . import storage
from .attribution import (
    ReweightPlan, aggregate_behavior_influence, aggregate_by, rank_examples,
)
from .influence import DEFAULT_TOP_FRACTION, InfluenceRecord, top_tokens
from .tinylm import BOS, EOS, Example, InvalidInput


@dataclass
class ReportOptions:
    fraction: float = DEFAULT_TOP_FRACTION
    n_examples: int = 10
    group_keys: Sequence[str] = ("domain", "category", "difficulty")
    top_k: int = 20
    heatmaps: bool = True
    correlations: Mapping[str, Mapping[int, float]] = field(default_factory=dict)
    flip_plan: ReweightPlan | None = None


def token_label(tok: int) -> str:
    if tok == EOS:
        return "<eos>"
    if tok == BOS:
        return "<bos>"
    if 32 <= tok < 127:
        return chr(tok)
    if tok == 10:
        return "\\n"
    return f"\\x{tok:02x}"


def summarize(records_by_target: Mapping[str, Sequence[InfluenceRecord]], dataset: Sequence[Example],
              options: ReportOptions) -> dict:
    by_id = {e.id: e for e in dataset}
    targets = {}
    for target, records in sorted(records_by_target.items()):
        entry = {
            "query_set_id": records[0].query_set_id if records else None,
            "n_records": len(records),
            "top_positive": [[i, s] for i, s in rank_examples(records, positive_only=True)[:options.top_k]],
            "groups": {key: [g.to_dict() for g in aggregate_by(records, by_id, key)] for key in options.group_keys},
        }
        if any(r.span_scores for r in records):
            entry["behaviors"] = [g.to_dict() for g in aggregate_behavior_influence(records, by_id)]
        if target in options.correlations:
            entry["n_robustness"] = {str(n): c for n, c in sorted(options.correlations[target].items())}
        targets[target] = entry
    summary = {"targets": targets}
    if options.flip_plan is not None:
        summary["flip_plan"] = options.flip_plan.to_dict()
    return summary


_STYLE = (
    "body{font-family:monospace;max-width:60em;margin:2em auto}"
    ".tok{white-space:pre}.hl{background:#f6c244;font-weight:bold}"
    "table{border-collapse:collapse}td{padding:0 .6em}"
)


def render_heatmap(record: InfluenceRecord, example: Example, target: str, fraction: float) -> str:
    """HTML page with the response tokens; the top ``fraction`` by score are highlighted, every score is in a tooltip."""
    top = top_tokens(record, fraction)
    marked = set(top)
    spans = []
    for t, (tok, score) in enumerate(zip(example.response, record.token_scores)):
        cls = "tok hl" if t in marked else "tok"
        spans.append(f'<span class="{cls}" title="t={t} score={score:.6e}">{html.escape(token_label(tok))}</span>')
    prompt = html.escape("".join(token_label(t) for t in example.prompt))
    rows = "".join(
        f"<tr><td>{rank + 1}</td><td>{t}</td><td>{html.escape(token_label(example.response[t]))}</td>"
        f"<td>{record.token_scores[t]:.6e}</td></tr>"
        for rank, t in enumerate(top))
    meta = f"domain={example.domain} category={example.category} difficulty={example.difficulty}"
    return (
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">"
        f"<title>{html.escape(example.id)} / {html.escape(target)}</title><style>{_STYLE}</style></head><body>\n"
        f"<h1>{html.escape(example.id)}</h1>\n"
        f"<p>target: {html.escape(target)} | instance score: {record.instance_score:.6e} | {html.escape(meta)}</p>\n"
        f"<p>prompt: <span class=\"tok\">{prompt}</span></p>\n"
        f"<p>response:</p>\n<p>{''.join(spans)}</p>\n"
        f"<h2>top {fraction:g} of tokens</h2>\n<table><tr><th>rank</th><th>t</th><th>token</th><th>score</th></tr>{rows}</table>\n"
        "</body></html>\n"
    )


def emit_report(records_by_target: Mapping[str, Sequence[InfluenceRecord]], dataset: Sequence[Example],
                out_dir: str | Path, options: ReportOptions | None = None) -> dict[str, str]:
    """Write ``summary.json`` plus heatmap pages for the most positively influential examples.

    Returns a map from relative path to sha256 of every file written.
    """
    options = options or ReportOptions()
    out_dir = Path(out_dir)
    by_id = {e.id: e for e in dataset}
    written = {}
    summary = summarize(records_by_target, dataset, options)
    payload = json.dumps(summary, indent=2, sort_keys=True, allow_nan=False).encode() + b"\n"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "summary.json").write_bytes(payload)
    written["summary.json"] = storage.sha256_bytes(payload)
    if not options.heatmaps:
        return written
    index_lines = []
    for target, records in sorted(records_by_target.items()):
        rec_by_id = {r.example_id: r for r in records}
        chosen = [i for i, _ in rank_examples(records, positive_only=True)[:options.n_examples]]
        missing = [i for i in chosen if rec_by_id[i].token_scores is None]
        if missing:
            raise InvalidInput(f"target {target}: no token scores for {missing[:3]}...; "
                               "rerun scoring with the 'token' target to build heatmaps")
        for ex_id in chosen:
            page = render_heatmap(rec_by_id[ex_id], by_id[ex_id], target, options.fraction).encode()
            rel = f"heatmaps/{target}/{ex_id}.html"
            (out_dir / rel).parent.mkdir(parents=True, exist_ok=True)
            (out_dir / rel).write_bytes(page)
            written[rel] = storage.sha256_bytes(page)
            index_lines.append(f'<li><a href="{html.escape(rel)}">{html.escape(target)}: {html.escape(ex_id)}</a> '
                               f'({rec_by_id[ex_id].instance_score:.6e})</li>')
    index = ("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>influence report</title></head><body>\n"
             "<ul>\n" + "\n".join(index_lines) + "\n</ul>\n</body></html>\n").encode()
    (out_dir / "index.html").write_bytes(index)
    written["index.html"] = storage.sha256_bytes(index)
    return written
