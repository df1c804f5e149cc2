"""Stage orchestration with content-hash caching: train -> factors -> query -> score -> analyze.

Each stage's cache key hashes its configuration slice and the sha256 of every
input artifact. A stage is skipped when the manifest records the same key and
all of its outputs are present with their recorded hashes, and no upstream
stage ran in the same invocation.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Callable


from . import storage
from .attribution import apply_plan, difficulty_flip, rank_correlation
from .data import EvalItem, ingest, ingest_evalset, write_dataset
from .ekfac import CurvatureModel, fit_curvature
from .influence import InfluenceRecord, precondition_query, score_examples
from .report import ReportOptions, emit_report
from .tinylm import (
    DEFAULT_QUERY_SIZE, Checkpoint, EmptyQuerySet, InvalidInput, ModelConfig, QuerySet, TrainConfig,
    evaluate_correct, train,
)

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "INFLULM_OUTPUT_ROOT"
MANIFEST = "manifest.json"
STAGES = ("train", "factors", "query", "score", "analyze")


@dataclass
class FactorConfig:
    sample_count: int = 256
    max_positions: int = 64
    n_draws: int = 1
    damping: float | None = None
    damping_factor: float = 0.1
    seed: int = 0


@dataclass
class AnalysisConfig:
    group_keys: tuple[str, ...] = ("domain", "category", "difficulty")
    math_easy_threshold: int = 2
    code_hard_threshold: int = 4
    reverse_flip: bool = False
    robustness_ns: tuple[int, ...] = (10, 25, 50)
    top_fraction: float = 0.05
    report_examples: int = 10


@dataclass
class RunConfig:
    dataset: str
    evalset: str
    output_dir: str
    pool: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    factors: FactorConfig = field(default_factory=FactorConfig)
    query_n: int = DEFAULT_QUERY_SIZE
    score_targets: tuple[str, ...] = ("instance", "token", "sequence")
    span_mode: str = "delete"
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    seed: int = 0

    def validate(self) -> None:
        for name in ("dataset", "evalset") + (("pool",) if self.pool else ()):
            if not Path(getattr(self, name)).exists():
                raise InvalidInput(f"{name} path {getattr(self, name)} does not exist")
        if self.query_n < 1:
            raise InvalidInput("query_n must be >= 1")
        if any(n > self.query_n or n < 1 for n in self.analysis.robustness_ns):
            raise InvalidInput("robustness n values must lie in [1, query_n]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        nested = {"model": ModelConfig, "training": TrainConfig, "factors": FactorConfig, "analysis": AnalysisConfig}
        for key, typ in nested.items():
            if key in d and not is_dataclass(d[key]):
                d[key] = _build(typ, d[key])
        if "score_targets" in d:
            d["score_targets"] = tuple(d["score_targets"])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInput(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


def _build(typ, values: dict):
    known = {f.name for f in fields(typ)}
    unknown = set(values) - known
    if unknown:
        raise InvalidInput(f"unknown {typ.__name__} keys {sorted(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    return typ(**values)


def load_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    """Read a JSON config; ``overrides`` (dotted keys such as ``factors.damping``) win over the file."""
    with open(path) as fh:
        raw = json.load(fh)
    for key, value in (overrides or {}).items():
        node = raw
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return RunConfig.from_dict(raw)


def resolve_output_dir(path: str | Path) -> Path:
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return path if path.is_absolute() or not root else Path(root) / path


class StageError(RuntimeError):
    def __init__(self, stage: str, trail: dict, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause} (inputs: {json.dumps(trail, sort_keys=True)})")
        self.stage = stage
        self.trail = trail


@dataclass
class RunResult:
    output_dir: Path
    executed: list[str]
    cached: list[str]
    manifest: dict


# --------------------------------------------------------------------------
# stage bodies; each returns {relative output path: sha256}


def records_path(target: str, n: int | None = None) -> str:
    return f"scores/{target}.jsonl" if n is None else f"scores/{target}.n{n}.jsonl"


def load_dataset(path, max_seq_len: int) -> list:
    examples = ingest(path).examples
    fitted = [e.truncated(max_seq_len) for e in examples]
    cut = sum(a is not b for a, b in zip(examples, fitted))
    if cut:
        logger.warning("%s: %d examples truncated to %d tokens", path, cut, max_seq_len)
    return fitted


def _stage_train(cfg: RunConfig, out: Path) -> dict[str, str]:
    examples = load_dataset(cfg.dataset, cfg.model.max_seq_len)
    ckpt = train(cfg.model, examples, cfg.training)
    return {"checkpoint.bin": ckpt.save(out / "checkpoint.bin")}


def _stage_factors(cfg: RunConfig, out: Path) -> dict[str, str]:
    ckpt = Checkpoint.load(out / "checkpoint.bin")
    f = cfg.factors
    examples = load_dataset(cfg.dataset, cfg.model.max_seq_len)
    curv = fit_curvature(ckpt.model, examples, f.sample_count, f.seed, f.max_positions, f.n_draws, f.damping,
                         f.damping_factor)
    return {"curvature.bin": curv.save(out / "curvature.bin")}


def _group_eval(items: list[EvalItem]) -> dict[str, list[EvalItem]]:
    groups: dict[str, list[EvalItem]] = {}
    for it in items:
        groups.setdefault(it.domain, []).append(it)
    return dict(sorted(groups.items()))


def _stage_query(cfg: RunConfig, out: Path) -> dict[str, str]:
    ckpt = Checkpoint.load(out / "checkpoint.bin")
    queries = {}
    for target, items in _group_eval(ingest_evalset(cfg.evalset)).items():
        try:
            qs = evaluate_correct(ckpt.model, [(i.prompt, i.answer) for i in items], cfg.query_n, seed=cfg.seed)
        except EmptyQuerySet:
            logger.warning("target %s: no correctly answered items, skipped", target)
            continue
        queries[target] = {"id": qs.id, "items": [[list(p), list(a)] for p, a in qs.items]}
    if not queries:
        raise EmptyQuerySet("no target has a correctly answered evaluation item")
    payload = json.dumps(queries, sort_keys=True).encode() + b"\n"
    (out / "queries.json").write_bytes(payload)
    return {"queries.json": storage.sha256_bytes(payload)}


def load_queries(out: Path) -> dict[str, QuerySet]:
    raw = json.loads((out / "queries.json").read_text())
    return {t: QuerySet(tuple((p, a) for p, a in q["items"])) for t, q in raw.items()}


def _stage_score(cfg: RunConfig, out: Path) -> dict[str, str]:
    ckpt = Checkpoint.load(out / "checkpoint.bin")
    curv = CurvatureModel.load(out / "curvature.bin")
    examples = load_dataset(cfg.dataset, cfg.model.max_seq_len)
    written = {}
    for target, qs in load_queries(out).items():
        pq = precondition_query(ckpt.model, curv, qs)
        recs = score_examples(ckpt.model, pq, examples, cfg.score_targets, cfg.span_mode)
        rel = records_path(target)
        written[rel] = storage.write_jsonl(out / rel, [r.to_dict() for r in recs])
        for n in cfg.analysis.robustness_ns:
            if n >= qs.n:
                continue
            sub = precondition_query(ckpt.model, curv, qs.subset(n))
            recs_n = score_examples(ckpt.model, sub, examples, ("instance",))
            rel = records_path(target, n)
            written[rel] = storage.write_jsonl(out / rel, [r.to_dict() for r in recs_n])
    return written


def read_records(path: Path) -> list[InfluenceRecord]:
    return [InfluenceRecord.from_dict(d) for d in storage.read_jsonl(path)]


def _stage_analyze(cfg: RunConfig, out: Path) -> dict[str, str]:
    examples = load_dataset(cfg.dataset, cfg.model.max_seq_len)
    queries = load_queries(out)
    records_by_target, correlations = {}, {}
    for target, qs in queries.items():
        records_by_target[target] = read_records(out / records_path(target))
        by_n = {qs.n: records_by_target[target]}
        for n in cfg.analysis.robustness_ns:
            if n < qs.n:
                by_n[n] = read_records(out / records_path(target, n))
        if len(by_n) > 1:
            correlations[target] = rank_correlation(by_n, qs.n)
    a = cfg.analysis
    plan = None
    written = {}
    if cfg.pool:
        # the reweighted corpus keeps full-length examples
        full, pool = ingest(cfg.dataset).examples, ingest(cfg.pool).examples
        plan = difficulty_flip(full, pool, a.math_easy_threshold, a.code_hard_threshold, a.reverse_flip, cfg.seed)
        written["flip/flipped_dataset.jsonl"] = write_dataset(out / "flip/flipped_dataset.jsonl",
                                                              apply_plan(full, pool, plan))
        diff = {"removed": len(plan.removals), "added": len(plan.additions), "shortfall": plan.shortfall,
                "size_before": len(examples), "size_after": len(examples) - len(plan.removals) + len(plan.additions)}
        payload = json.dumps(diff, indent=2, sort_keys=True).encode() + b"\n"
        (out / "flip/diff_summary.json").write_bytes(payload)
        written["flip/diff_summary.json"] = storage.sha256_bytes(payload)
    options = ReportOptions(fraction=a.top_fraction, n_examples=a.report_examples, group_keys=a.group_keys,
                            heatmaps="token" in cfg.score_targets, correlations=correlations, flip_plan=plan)
    for rel, sha in emit_report(records_by_target, examples, out / "report", options).items():
        written[f"report/{rel}"] = sha
    return written


_BODIES: dict[str, Callable[[RunConfig, Path], dict[str, str]]] = {
    "train": _stage_train,
    "factors": _stage_factors,
    "query": _stage_query,
    "score": _stage_score,
    "analyze": _stage_analyze,
}


def _stage_inputs(stage: str, cfg: RunConfig, produced: dict[str, dict[str, str]]) -> dict[str, Any]:
    data = {"dataset": storage.sha256_file(cfg.dataset)}
    upstream = {s: produced[s] for s in STAGES[:STAGES.index(stage)]}
    if stage == "train":
        return {**data, "model": asdict(cfg.model), "training": asdict(cfg.training)}
    if stage == "factors":
        return {**data, "factors": asdict(cfg.factors), "upstream": upstream}
    if stage == "query":
        return {"evalset": storage.sha256_file(cfg.evalset), "n": cfg.query_n, "seed": cfg.seed,
                "upstream": {"train": produced["train"]}}
    if stage == "score":
        return {**data, "targets": list(cfg.score_targets), "span_mode": cfg.span_mode,
                "robustness_ns": list(cfg.analysis.robustness_ns), "upstream": upstream}
    return {**data, "pool": storage.sha256_file(cfg.pool) if cfg.pool else None,
            "analysis": asdict(cfg.analysis), "seed": cfg.seed, "upstream": {"score": produced["score"],
                                                                              "query": produced["query"]}}


def _outputs_intact(out: Path, outputs: dict[str, str]) -> bool:
    return all((out / rel).exists() and storage.sha256_file(out / rel) == sha for rel, sha in outputs.items())


def run_pipeline(cfg: RunConfig, until: str = "analyze") -> RunResult:
    """Execute every stage up to and including ``until``, reusing cached results where inputs are unchanged."""
    if until not in STAGES:
        raise InvalidInput(f"unknown stage {until!r}; expected one of {STAGES}")
    cfg.validate()
    out = resolve_output_dir(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    mpath = out / MANIFEST
    recorded = json.loads(mpath.read_text())["stages"] if mpath.exists() else {}
    config_hash = storage.sha256_bytes(storage.canonical_json(cfg.to_dict()))
    produced: dict[str, dict[str, str]] = {}
    executed, cached = [], []
    dirty = False
    for stage in STAGES[:STAGES.index(until) + 1]:
        inputs = _stage_inputs(stage, cfg, produced)
        key = storage.sha256_bytes(storage.canonical_json({"stage": stage, "inputs": inputs}))
        prev = recorded.get(stage)
        if not dirty and prev and prev["key"] == key and _outputs_intact(out, prev["outputs"]):
            produced[stage] = prev["outputs"]
            cached.append(stage)
            logger.info("stage %s: cache hit", stage)
            continue
        logger.info("stage %s: running", stage)
        try:
            outputs = _BODIES[stage](cfg, out)
        except Exception as exc:
            trail = {"key": key, "upstream": {s: produced[s] for s in produced}}
            raise StageError(stage, trail, exc) from exc
        recorded[stage] = {"key": key, "inputs": inputs, "outputs": dict(sorted(outputs.items()))}
        produced[stage] = recorded[stage]["outputs"]
        executed.append(stage)
        dirty = True
        _write_manifest(mpath, config_hash, recorded)
    if dirty:
        # downstream stages recorded by an earlier run no longer match their inputs
        for stage in STAGES[STAGES.index(until) + 1:]:
            recorded.pop(stage, None)
    manifest = _write_manifest(mpath, config_hash, recorded)
    return RunResult(out, executed, cached, manifest)


def _write_manifest(path: Path, config_hash: str, stages: dict) -> dict:
    manifest = {"config_hash": config_hash, "stages": {s: stages[s] for s in STAGES if s in stages}}
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
