"""Command-line orchestration: extract, train, route, evaluate, sweep-thresholds.

One binary, subcommand style. Every command reads a JSON config file (flag
overrides for seed, output directory, parallelism, and pathway), validates it
strictly (unknown keys are rejected), and writes the resolved config beside
its outputs so a run can be reproduced from its artifacts alone. All
randomness flows from the single configured seed.

Endpoint strings select the backing service: ``http(s)://...`` talks to a
real service over the documented wire protocol, while ``mock:keyword``,
``mock:suicide``, and ``mock:non_suicide`` select the bundled deterministic
mocks for offline runs. Credentials come only from the environment
(RISKCASCADE_API_TOKEN, sent as a bearer header when present).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import analysis, mlmodels, scorers
from .analysis import Analyst, FeatureCache, extract_features, vectorize
from .cascade import (
    AgentVoting,
    MlVoting,
    Provenance,
    RoutingConfig,
    ensemble_f1,
    llm_vote,
    ml_vote,
    optimize_weights,
    route,
    run_cascade,
    save_weights,
    load_weights,
)
from .core import Dataset, Label, Split, load_dataset, token_length
from .errors import AnalystError, DegenerateDataError
from .evaluation import (
    ReportRow,
    confusion,
    cross_domain_gap,
    metrics,
    render_figures,
    render_table,
    stage_cost_report,
    write_report_csv,
    write_report_jsonl,
)
from .mlmodels import ModelKind, TrainedModel, predict_proba, train
from .modelio import atomic_write_text
from .scorers import (
    AgentPersona,
    BaselineScorer,
    HttpChatClient,
    KeywordAnalystMock,
    MockChatClient,
    RemoteScorer,
    TrainBaselineConfig,
    keyword_agent_reply,
    train_baseline,
)

TOKEN_ENV_VAR = "RISKCASCADE_API_TOKEN"


# ---------------------------------------------------------------------------
# Configuration.
# ---------------------------------------------------------------------------


@dataclass
class DatasetsSection:
    train: Optional[str] = None
    val: Optional[str] = None
    test: dict[str, str] = field(default_factory=dict)


@dataclass
class Stage1Section:
    kind: str = "baseline"  # baseline | remote
    model_path: Optional[str] = None
    endpoint: Optional[str] = None
    epochs: int = 300
    learning_rate: float = 0.5
    hash_bits: int = 18


@dataclass
class ModelsSection:
    kinds: list[str] = field(
        default_factory=lambda: [k.value for k in ModelKind]
    )
    hyperparameters: dict[str, dict] = field(default_factory=dict)


@dataclass
class AnalystSection:
    endpoint: str = "mock:keyword"
    cache_path: Optional[str] = None
    prompt_version: str = analysis.PROMPT_VERSION
    max_retries: int = 2
    backoff: float = 0.1


@dataclass
class AgentsSection:
    endpoint: str = "mock:keyword"
    personas: list[str] = field(default_factory=lambda: ["bullish", "bearish", "expert"])


@dataclass
class SweepSection:
    tau_lows: list[float] = field(default_factory=lambda: [0.001, 0.002, 0.005, 0.01, 0.02, 0.05])
    tau_highs: list[float] = field(default_factory=lambda: [0.95, 0.98, 0.99, 0.995, 0.998, 0.999])
    min_stage1_coverage: float = 0.0


@dataclass
class RoutingSection:
    tau_low: float = 0.005
    tau_high: float = 0.995
    max_tokens: int = 256

    def to_config(self) -> RoutingConfig:
        return RoutingConfig(self.tau_low, self.tau_high, self.max_tokens)


@dataclass
class PipelineConfig:
    seed: int = 0
    out_dir: str = "runs/out"
    parallelism: int = 4
    format: str = "jsonl"
    pathway: str = "ml"  # ml | llm
    datasets: DatasetsSection = field(default_factory=DatasetsSection)
    routing: RoutingSection = field(default_factory=RoutingSection)
    stage1: Stage1Section = field(default_factory=Stage1Section)
    models: ModelsSection = field(default_factory=ModelsSection)
    ensemble_cap: float = 0.5
    analyst: AnalystSection = field(default_factory=AnalystSection)
    agents: AgentsSection = field(default_factory=AgentsSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def resolved_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTION_TYPES = {
    "datasets": DatasetsSection,
    "routing": RoutingSection,
    "stage1": Stage1Section,
    "models": ModelsSection,
    "analyst": AnalystSection,
    "agents": AgentsSection,
    "sweep": SweepSection,
}


class ConfigError(ValueError):
    pass


def _build_section(cls, data: dict, context: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {context}")
    return cls(**data)


def parse_config(data: dict) -> PipelineConfig:
    """Build a validated PipelineConfig from a raw JSON object."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    allowed = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in config root")
    kwargs: dict = {}
    for key, value in data.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be an object")
            kwargs[key] = _build_section(_SECTION_TYPES[key], value, f"section {key!r}")
        else:
            kwargs[key] = value
    config = PipelineConfig(**kwargs)
    if config.format not in ("jsonl", "csv"):
        raise ConfigError(f"format must be jsonl or csv, got {config.format!r}")
    if config.pathway not in ("ml", "llm"):
        raise ConfigError(f"pathway must be ml or llm, got {config.pathway!r}")
    if config.stage1.kind not in ("baseline", "remote"):
        raise ConfigError(f"stage1.kind must be baseline or remote, got {config.stage1.kind!r}")
    for kind in config.models.kinds:
        ModelKind(kind)  # raises ValueError on an unknown learner
    for name in config.agents.personas:
        AgentPersona(name)
    config.routing.to_config()  # validates thresholds
    return config


def load_config(path: str | Path) -> PipelineConfig:
    with Path(path).open("r", encoding="utf-8") as fh:
        return parse_config(json.load(fh))


def _write_resolved_config(config: PipelineConfig) -> None:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "config.resolved.json",
                      json.dumps(config.resolved_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Endpoint resolution.
# ---------------------------------------------------------------------------


def _auth_headers() -> Optional[dict]:
    token = os.environ.get(TOKEN_ENV_VAR)
    return {"Authorization": f"Bearer {token}"} if token else None


def _resolve_analyst(section: AnalystSection):
    if section.endpoint == "mock:keyword":
        return KeywordAnalystMock()
    if section.endpoint.startswith(("http://", "https://")):
        client = HttpChatClient(section.endpoint, max_retries=section.max_retries,
                                backoff=section.backoff, headers=_auth_headers())
        return Analyst(client, max_retries=section.max_retries)
    raise ConfigError(f"unsupported analyst endpoint {section.endpoint!r}")


def _resolve_chat_client(endpoint: str):
    if endpoint == "mock:keyword":
        return MockChatClient(keyword_agent_reply)
    if endpoint == "mock:suicide":
        return MockChatClient(lambda _: "Label: [suicide]")
    if endpoint == "mock:non_suicide":
        return MockChatClient(lambda _: "Label: [non_suicide]")
    if endpoint.startswith(("http://", "https://")):
        return HttpChatClient(endpoint, headers=_auth_headers())
    raise ConfigError(f"unsupported chat endpoint {endpoint!r}")


def _stage1_model_path(config: PipelineConfig) -> Path:
    if config.stage1.model_path:
        return Path(config.stage1.model_path)
    return Path(config.out_dir) / "stage1_baseline.json"


def _resolve_stage1(config: PipelineConfig, require_model: bool = True):
    if config.stage1.kind == "remote":
        if not config.stage1.endpoint:
            raise ConfigError("stage1.kind is remote but stage1.endpoint is unset")
        return RemoteScorer(config.stage1.endpoint, headers=_auth_headers())
    path = _stage1_model_path(config)
    if not path.exists():
        if require_model:
            raise ConfigError(f"stage-1 model not found at {path}; run the train command first")
        return None
    return BaselineScorer.load(path)


def _cache(config: PipelineConfig) -> FeatureCache:
    path = config.analyst.cache_path or str(Path(config.out_dir) / "feature_cache.jsonl")
    return FeatureCache(path, prompt_version=config.analyst.prompt_version)


def _load_split(config: PipelineConfig, which: str) -> Dataset:
    path = getattr(config.datasets, which)
    if not path:
        raise ConfigError(f"config has no {which!r} dataset")
    split = Split.TRAIN if which == "train" else Split.VAL if which == "val" else Split.TEST
    return load_dataset(path, format=config.format, split=split)


def _test_sets(config: PipelineConfig) -> list[Dataset]:
    if not config.datasets.test:
        raise ConfigError("config lists no test datasets")
    return [
        load_dataset(path, format=config.format, name=name, split=Split.TEST)
        for name, path in config.datasets.test.items()
    ]


def _write_jsonl(path: Path, records: Sequence[dict]) -> None:
    atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


# ---------------------------------------------------------------------------
# extract
# ---------------------------------------------------------------------------


def cmd_extract(config: PipelineConfig) -> int:
    """Extract features for every configured dataset through the cache."""
    _write_resolved_config(config)
    out = Path(config.out_dir)
    cache = _cache(config)
    analyst = _resolve_analyst(config.analyst)
    datasets: list[Dataset] = []
    for which in ("train", "val"):
        if getattr(config.datasets, which):
            datasets.append(_load_split(config, which))
    if config.datasets.test:
        datasets.extend(_test_sets(config))
    if not datasets:
        print("error: no datasets configured", file=sys.stderr)
        return 1
    for ds in datasets:
        try:
            matrix = extract_features(ds, analyst, cache, parallelism=config.parallelism)
        except AnalystError as exc:
            print(f"error: {ds.name}: {exc}", file=sys.stderr)
            return 1
        records = [
            {"id": post.id, "vector": matrix[i].tolist()} for i, post in enumerate(ds.posts)
        ]
        path = out / f"features_{ds.name}.jsonl"
        _write_jsonl(path, records)
        print(f"{ds.name}: {len(ds)} posts -> {path}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _roster_names(config: PipelineConfig) -> list[str]:
    return ["stage1"] + list(config.models.kinds)


def cmd_train(config: PipelineConfig) -> int:
    """Train stage 1 and the roster models, then learn the voting weights."""
    _write_resolved_config(config)
    out = Path(config.out_dir)
    try:
        train_ds = _load_split(config, "train")
        val_ds = _load_split(config, "val")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    if config.stage1.kind == "baseline":
        try:
            stage1 = train_baseline(
                train_ds,
                TrainBaselineConfig(
                    epochs=config.stage1.epochs,
                    learning_rate=config.stage1.learning_rate,
                    seed=config.seed,
                    hash_bits=config.stage1.hash_bits,
                ),
            )
        except DegenerateDataError as exc:
            print(f"error: train split: {exc}", file=sys.stderr)
            return 1
        stage1.save(_stage1_model_path(config))
    else:
        stage1 = _resolve_stage1(config)

    cache = _cache(config)
    analyst = _resolve_analyst(config.analyst)
    try:
        train_X = extract_features(train_ds, analyst, cache, config.parallelism)
        val_X = extract_features(val_ds, analyst, cache, config.parallelism)
    except AnalystError as exc:
        print(f"error: feature extraction: {exc}", file=sys.stderr)
        return 1

    def gold(ds: Dataset, split: str) -> np.ndarray:
        labels = ds.labels()
        if any(l is None for l in labels):
            raise DegenerateDataError(f"{split} split contains unlabeled posts")
        return np.array([l.value for l in labels], dtype=np.float64)

    try:
        train_y = gold(train_ds, "train")
        val_y = gold(val_ds, "val")
        models: list[TrainedModel] = []
        for kind_name in config.models.kinds:
            kind = ModelKind(kind_name)
            hp = mlmodels.default_hyperparameters(kind)
            hp.update(config.models.hyperparameters.get(kind_name, {}))
            model = train(kind, train_X, train_y, hp, seed=config.seed)
            model.save(out / f"model_{kind_name}.json")
            models.append(model)
        score_matrix = np.zeros((len(val_ds), 1 + len(models)))
        for i, post in enumerate(val_ds.posts):
            score_matrix[i, 0] = stage1.score(post.text)
            for j, model in enumerate(models):
                score_matrix[i, 1 + j] = predict_proba(model, val_X[i])
        weights = optimize_weights(score_matrix, val_y, cap=config.ensemble_cap,
                                   seed=config.seed)
        val_f1 = ensemble_f1(score_matrix, val_y.astype(np.intp), weights.as_array())
    except DegenerateDataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    save_weights(out / "weights.json", weights, _roster_names(config), val_f1)
    print(f"stage-1 model, {len(models)} roster models, and weights (val F1 {val_f1:.4f}) -> {out}")
    return 0


# ---------------------------------------------------------------------------
# route
# ---------------------------------------------------------------------------


def cmd_route(config: PipelineConfig) -> int:
    """Score and route the test sets without resolving escalations."""
    _write_resolved_config(config)
    out = Path(config.out_dir)
    try:
        stage1 = _resolve_stage1(config)
        test_sets = _test_sets(config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    cfg = config.routing.to_config()
    for ds in test_sets:
        decisions = [route(post, stage1.score(post.text), cfg) for post in ds.posts]
        records = []
        for post, decision in zip(ds.posts, decisions):
            record = {"id": post.id, "stage1_prob": decision.prob, "accepted": decision.accepted}
            if decision.accepted:
                record["label"] = decision.label.to_name()
            else:
                record["reason"] = decision.reason.value
            records.append(record)
        _write_jsonl(out / f"routing_{ds.name}.jsonl", records)
        cost = stage_cost_report(decisions)
        print(f"{ds.name}: stage1 {cost.stage1_fraction:.4f} stage2 {cost.stage2_fraction:.4f} "
              + " ".join(f"{r.value}={f:.3f}" for r, f in sorted(cost.reasons.items(), key=lambda x: x[0].value)))
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _load_stage2(config: PipelineConfig):
    out = Path(config.out_dir)
    if config.pathway == "llm":
        personas = tuple(AgentPersona(p) for p in config.agents.personas)
        return AgentVoting(personas=personas, client=_resolve_chat_client(config.agents.endpoint))
    models = []
    for kind_name in config.models.kinds:
        path = out / f"model_{kind_name}.json"
        if not path.exists():
            raise ConfigError(f"model file {path} not found; run the train command first")
        models.append(TrainedModel.load(path))
    weights_path = out / "weights.json"
    if not weights_path.exists():
        raise ConfigError(f"weight file {weights_path} not found; run the train command first")
    weights, roster, _ = load_weights(weights_path)
    expected = _roster_names(config)
    if roster != expected:
        raise ConfigError(f"weight roster {roster} does not match configured roster {expected}")
    return MlVoting(models=models, weights=weights)


def _lazy_feature_provider(config: PipelineConfig):
    cache = _cache(config)
    analyst = _resolve_analyst(config.analyst)

    def provide(post) -> np.ndarray:
        hit = cache.get(post.text)
        if hit is None:
            hit = analyst.analyze(post.text)
            cache.put(post.text, hit)
        return vectorize(hit)

    return provide


def cmd_evaluate(config: PipelineConfig) -> int:
    """Run the cascade on every test set; emit reports, csv, and figures."""
    _write_resolved_config(config)
    out = Path(config.out_dir)
    try:
        stage1 = _resolve_stage1(config)
        stage2 = _load_stage2(config)
        test_sets = _test_sets(config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    cfg = config.routing.to_config()
    provider = _lazy_feature_provider(config) if config.pathway == "ml" else None
    method = f"cascade_{config.pathway}"

    rows: list[ReportRow] = []
    per_ds_metrics: dict[str, dict[str, object]] = {}
    total_failed = 0
    total_posts = 0
    for ds in test_sets:
        results = run_cascade(ds, stage1, cfg, stage2, feature_provider=provider,
                              parallelism=config.parallelism)
        _write_jsonl(out / f"predictions_{ds.name}.jsonl", [r.to_record() for r in results])
        failed = sum(1 for r in results if r.provenance is Provenance.STAGE2_FAILED)
        total_failed += failed
        total_posts += len(results)

        paired = [
            (r.label, post.gold_label)
            for r, post in zip(results, ds.posts)
            if post.gold_label is not None
        ]
        if not paired:
            print(f"error: {ds.name} has no gold labels to evaluate", file=sys.stderr)
            return 1
        cascade_metrics = metrics(confusion([p for p, _ in paired], [g for _, g in paired]))
        stage1_pairs = [
            (Label.SUICIDE if r.stage1_prob >= 0.5 else Label.NON_SUICIDE, post.gold_label)
            for r, post in zip(results, ds.posts)
            if post.gold_label is not None
        ]
        stage1_metrics = metrics(confusion([p for p, _ in stage1_pairs], [g for _, g in stage1_pairs]))
        cost = stage_cost_report([r.routing for r in results])
        rows.append(ReportRow(ds.name, "stage1", stage1_metrics))
        rows.append(ReportRow(ds.name, method, cascade_metrics, cost=cost))
        per_ds_metrics[ds.name] = {"stage1": stage1_metrics, method: cascade_metrics}
        if failed:
            print(f"warning: {ds.name}: {failed} post(s) fell back to stage-1 labels", file=sys.stderr)

    gaps = None
    if len(test_sets) >= 2:
        gaps = {}
        first = test_sets[0].name
        for other_ds in test_sets[1:]:
            other = other_ds.name
            suffix = "" if len(test_sets) == 2 else f":{first}_vs_{other}"
            for m in ("stage1", method):
                gaps[f"{m}{suffix}"] = cross_domain_gap(
                    per_ds_metrics[first][m], per_ds_metrics[other][m]
                )

    table = render_table(rows, gaps)
    print(table, end="")
    atomic_write_text(out / "report.txt", table)
    write_report_jsonl(out / "report.jsonl", rows, gaps)
    write_report_csv(out / "metrics.csv", rows)
    render_figures(out / "figures", rows, gaps)
    if total_posts > 0 and total_failed == total_posts:
        print("error: every post failed stage-2 resolution", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# sweep-thresholds
# ---------------------------------------------------------------------------


def cmd_sweep_thresholds(config: PipelineConfig) -> int:
    """Grid-sweep the routing band on the validation set.

    Maximizes validation F1 of the full pipeline subject to a minimum stage-1
    coverage; stage-2 labels do not depend on the thresholds, so they are
    resolved once and reused across the grid.
    """
    _write_resolved_config(config)
    out = Path(config.out_dir)
    try:
        stage1 = _resolve_stage1(config)
        stage2 = _load_stage2(config)
        val_ds = _load_split(config, "val")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    gold = val_ds.labels()
    if any(l is None for l in gold):
        print("error: val split contains unlabeled posts", file=sys.stderr)
        return 1

    probs = [stage1.score(post.text) for post in val_ds.posts]
    lengths = [token_length(post.text) for post in val_ds.posts]
    if isinstance(stage2, MlVoting):
        provider = _lazy_feature_provider(config)
        stage2_labels = []
        for i, post in enumerate(val_ds.posts):
            scores = [probs[i]] + [
                predict_proba(m, provider(post)) for m in stage2.models
            ]
            stage2_labels.append(ml_vote(scores, stage2.weights)[0])
    else:
        stage2_labels = []
        for i, post in enumerate(val_ds.posts):
            verdicts = [
                scorers.agent_classify(stage2.client, persona, post.text)
                for persona in stage2.personas
            ]
            tie = Label.SUICIDE if probs[i] >= 0.5 else Label.NON_SUICIDE
            stage2_labels.append(llm_vote(verdicts, tie))

    max_tokens = config.routing.max_tokens
    records = []
    best = None  # (f1, record)
    for tau_low in config.sweep.tau_lows:
        for tau_high in config.sweep.tau_highs:
            if not tau_low < tau_high:
                continue
            preds = []
            accepted = 0
            for i in range(len(val_ds)):
                short = lengths[i] <= max_tokens
                if short and probs[i] >= tau_high:
                    preds.append(Label.SUICIDE)
                    accepted += 1
                elif short and probs[i] <= tau_low:
                    preds.append(Label.NON_SUICIDE)
                    accepted += 1
                else:
                    preds.append(stage2_labels[i])
            coverage = accepted / len(val_ds)
            f1 = metrics(confusion(preds, gold)).f1
            record = {"tau_low": tau_low, "tau_high": tau_high,
                      "val_f1": f1, "stage1_coverage": coverage}
            records.append(record)
            if coverage >= config.sweep.min_stage1_coverage and (best is None or f1 > best[0]):
                best = (f1, record)
    _write_jsonl(out / "sweep.jsonl", records)
    if best is None:
        print("error: no grid point satisfies the minimum stage-1 coverage", file=sys.stderr)
        return 1
    atomic_write_text(out / "thresholds.json", json.dumps(best[1], sort_keys=True) + "\n")
    print(f"selected tau_low={best[1]['tau_low']} tau_high={best[1]['tau_high']} "
          f"val_f1={best[1]['val_f1']:.4f} coverage={best[1]['stage1_coverage']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing.
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="riskcascade",
        description="Two-stage cascaded-ensemble text classification pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("extract", "extract feature vectors for the configured datasets"),
        ("train", "train the stage-1 scorer, roster models, and voting weights"),
        ("route", "apply stage-1 routing to the test sets"),
        ("evaluate", "run the full cascade and emit reports and figures"),
        ("sweep-thresholds", "grid-sweep the routing band on the validation set"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        p.add_argument("--out", default=None, help="override the configured output directory")
        p.add_argument("--parallelism", type=int, default=None,
                       help="override the configured worker bound")
        p.add_argument("--pathway", choices=["llm", "ml"], default=None,
                       help="override the configured stage-2 pathway")
    return parser


_COMMANDS = {
    "extract": cmd_extract,
    "train": cmd_train,
    "route": cmd_route,
    "evaluate": cmd_evaluate,
    "sweep-thresholds": cmd_sweep_thresholds,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
    except (OSError, ValueError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.out_dir = args.out
    if args.parallelism is not None:
        config.parallelism = args.parallelism
    if args.pathway is not None:
        config.pathway = args.pathway
    try:
        return _COMMANDS[args.command](config)
    except Exception as exc:  # surface anything unplanned as a clean failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
