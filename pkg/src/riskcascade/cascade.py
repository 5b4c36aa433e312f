"""The two-stage architecture: routing, voting pathways, weight optimization.

Stage 1 accepts a post when it is short enough and the scorer is confident
on either side of the band [tau_low, tau_high]; everything else escalates.
Stage 2 resolves escalations by persona-agent majority voting (stage-1 label
as tie-breaker) or by a weighted soft vote over the stage-1 probability and
the feature-based learners.

Comparisons are inclusive at both band edges and at the 0.5 voting
threshold.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .analysis import FEATURE_DIM
from .core import Dataset, Label, Post, check_probability, token_length
from .errors import DegenerateDataError, DimensionError
from .mlmodels import TrainedModel, predict_proba
from .modelio import atomic_write_text
from .scorers import AgentPersona, ChatClient, Scorer, Verdict, agent_classify

__all__ = [
    "AgentVoting",
    "CascadeResult",
    "EnsembleWeights",
    "EscalationReason",
    "MlVoting",
    "Provenance",
    "RoutingConfig",
    "RoutingDecision",
    "check_feasibility",
    "ensemble_f1",
    "llm_vote",
    "load_weights",
    "ml_vote",
    "optimize_weights",
    "route",
    "run_cascade",
    "save_weights",
]


@dataclass(frozen=True)
class RoutingConfig:
    """Band thresholds and the token-length cap for stage-1 acceptance."""

    tau_low: float = 0.005
    tau_high: float = 0.995
    max_tokens: int = 256

    def __post_init__(self) -> None:
        check_probability(self.tau_low, "tau_low")
        check_probability(self.tau_high, "tau_high")
        if not self.tau_low < self.tau_high:
            raise ValueError(f"tau_low {self.tau_low} must be < tau_high {self.tau_high}")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")


class EscalationReason(Enum):
    AMBIGUOUS_PROB = "ambiguous_prob"
    TOO_LONG = "too_long"
    BOTH = "both"


@dataclass(frozen=True)
class RoutingDecision:
    accepted: bool
    prob: float
    label: Optional[Label] = None
    reason: Optional[EscalationReason] = None

    @classmethod
    def accept(cls, label: Label, prob: float) -> "RoutingDecision":
        return cls(accepted=True, prob=prob, label=label)

    @classmethod
    def escalate(cls, reason: EscalationReason, prob: float) -> "RoutingDecision":
        return cls(accepted=False, prob=prob, reason=reason)


def route(post: Post, stage1_prob: float, cfg: RoutingConfig) -> RoutingDecision:
    """Accept a short, confidently scored post; otherwise escalate with reason.

    Accept(SUICIDE) iff length <= max_tokens and p >= tau_high;
    Accept(NON_SUICIDE) iff length <= max_tokens and p <= tau_low.
    Both comparisons are inclusive.
    """
    p = check_probability(stage1_prob, "stage1 probability")
    short = token_length(post.text) <= cfg.max_tokens
    confident = p >= cfg.tau_high or p <= cfg.tau_low
    if short and confident:
        label = Label.SUICIDE if p >= cfg.tau_high else Label.NON_SUICIDE
        return RoutingDecision.accept(label, p)
    if short:
        reason = EscalationReason.AMBIGUOUS_PROB
    elif confident:
        reason = EscalationReason.TOO_LONG
    else:
        reason = EscalationReason.BOTH
    return RoutingDecision.escalate(reason, p)


def llm_vote(verdicts: Sequence[Verdict], tie_breaker: Label) -> Label:
    """Equal-weight majority over non-abstaining verdicts; ties fall to the tie-breaker.

    A panel with zero counted verdicts is an exact tie by definition.
    """
    if not verdicts:
        raise ValueError("need at least one verdict")
    n_suicide = sum(1 for v in verdicts if v.label is Label.SUICIDE)
    n_non = sum(1 for v in verdicts if v.label is Label.NON_SUICIDE)
    if n_suicide > n_non:
        return Label.SUICIDE
    if n_non > n_suicide:
        return Label.NON_SUICIDE
    return tie_breaker


def check_feasibility(values: Sequence[float], cap: float = 0.5, sum_tol: float = 1e-6) -> None:
    """Validate non-negativity, the sum-to-one constraint, and the lead-weight cap.

    The sum tolerance is widened only when validating published fixtures whose
    printed values carry rounding error; the type invariant stays at 1e-6.
    """
    if len(values) == 0:
        raise DimensionError("weights are empty")
    if any(v < 0.0 for v in values):
        raise ValueError(f"negative weight in {tuple(values)}")
    total = sum(values)
    if abs(total - 1.0) > sum_tol:
        raise ValueError(f"weights sum to {total}, outside 1 +/- {sum_tol}")
    if values[0] > cap + 1e-9:
        raise ValueError(f"lead weight {values[0]} exceeds cap {cap}")


@dataclass(frozen=True)
class EnsembleWeights:
    """Soft-vote weights on the capped simplex; slot 0 is the stage-1 scorer."""

    values: tuple[float, ...]
    cap: float = 0.5
    roster: Optional[tuple[str, ...]] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if self.roster is not None and len(self.roster) != len(self.values):
            raise DimensionError("roster and weights differ in length")
        check_feasibility(self.values, self.cap)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


def ml_vote(scores: Sequence[float], w: EnsembleWeights, threshold: float = 0.5) -> tuple[Label, float]:
    """Weighted soft vote: returns (label, ensemble probability).

    The label is SUICIDE exactly when the convex combination reaches the
    threshold (inclusive).
    """
    if len(scores) != len(w.values):
        raise DimensionError(f"{len(scores)} scores for {len(w.values)} weights")
    for s in scores:
        check_probability(s, "model score")
    prob = float(np.dot(np.asarray(scores, dtype=np.float64), w.as_array()))
    prob = min(max(prob, 0.0), 1.0)
    label = Label.SUICIDE if prob >= threshold else Label.NON_SUICIDE
    return label, prob


def ensemble_f1(score_matrix: np.ndarray, labels: np.ndarray, weights: np.ndarray,
                threshold: float = 0.5) -> float:
    """F1 of thresholded weighted votes over a score matrix (rows = samples)."""
    combined = score_matrix @ weights
    preds = combined >= threshold
    gold = labels == 1
    tp = float(np.sum(preds & gold))
    if tp == 0.0:
        return 0.0
    precision = tp / float(np.sum(preds))
    recall = tp / float(np.sum(gold))
    return 2.0 * precision * recall / (precision + recall)


def _project_capped_simplex(w: np.ndarray, cap: float) -> np.ndarray:
    """Map any vector to the simplex with the lead coordinate capped."""
    w = np.clip(w, 0.0, None)
    total = w.sum()
    if total <= 0.0:
        w = np.ones_like(w)
        total = w.sum()
    w = w / total
    if w[0] > cap:
        excess = w[0] - cap
        w[0] = cap
        rest = w[1:].sum()
        if rest <= 0.0:
            w[1:] += excess / (len(w) - 1)
        else:
            w[1:] += excess * (w[1:] / rest)
    return w


def optimize_weights(
    val_scores: Union[np.ndarray, Sequence[Sequence[float]]],
    val_labels: Sequence,
    cap: float = 0.5,
    seed: int = 0,
    threshold: float = 0.5,
    restarts: int = 8,
    step_sizes: Sequence[float] = (0.2, 0.1, 0.05, 0.02, 0.01, 0.005),
) -> EnsembleWeights:
    """Maximize validation F1 over the capped simplex by direct search.

    Thresholded F1 is piecewise constant, so a smooth solver has nothing to
    follow; instead we run greedy pairwise mass transfers with shrinking step
    sizes from a uniform start, the feasible corners, and seed-driven random
    restarts, projecting every iterate back onto the capped simplex. The
    result never scores below the uniform feasible initialization.
    """
    scores = np.asarray(val_scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise DimensionError(f"score matrix must be 2-D and non-empty, got {scores.shape}")
    labels = np.array(
        [l.value if isinstance(l, Label) else int(l) for l in val_labels], dtype=np.intp
    )
    if len(labels) != scores.shape[0]:
        raise DimensionError("scores and labels differ in length")
    if not (np.any(labels == 1) and np.any(labels == 0)):
        raise DegenerateDataError("validation labels contain a single class")
    if not 0.0 < cap <= 1.0:
        raise ValueError(f"cap must be in (0, 1], got {cap}")
    k = scores.shape[1]
    if k == 1 and cap < 1.0:
        raise ValueError("a single-model roster cannot satisfy a cap below 1")

    def objective(w: np.ndarray) -> float:
        return ensemble_f1(scores, labels, w, threshold)

    def local_search(w: np.ndarray) -> tuple[np.ndarray, float]:
        w = w.copy()
        best = objective(w)
        for step in step_sizes:
            improved = True
            while improved:
                improved = False
                for i in range(k):
                    for j in range(k):
                        if i == j or w[i] <= 0.0:
                            continue
                        delta = min(step, w[i])
                        cand = w.copy()
                        cand[i] -= delta
                        cand[j] += delta
                        cand = _project_capped_simplex(cand, cap)
                        f1 = objective(cand)
                        if f1 > best + 1e-12:
                            w, best = cand, f1
                            improved = True
        return w, best

    uniform = _project_capped_simplex(np.full(k, 1.0 / k), cap)
    starts = [uniform]
    for i in range(k):
        corner = np.full(k, 1e-9)
        corner[i] = 1.0
        starts.append(_project_capped_simplex(corner, cap))
    rng = np.random.default_rng(seed)
    for _ in range(restarts):
        starts.append(_project_capped_simplex(rng.dirichlet(np.ones(k)), cap))

    uniform = uniform / uniform.sum()
    uniform_f1 = objective(uniform)
    best_w, best_f1 = uniform, uniform_f1
    for start in starts:
        w, f1 = local_search(start)
        if f1 > best_f1 + 1e-12:
            best_w, best_f1 = w, f1
    # exact renormalization guards the 1e-6 sum invariant after float drift;
    # fall back to the uniform start if that nudge ever crossed a threshold
    best_w = best_w / best_w.sum()
    if objective(best_w) < uniform_f1:
        best_w = uniform
    assert objective(best_w) >= uniform_f1, "search fell below its uniform start"
    return EnsembleWeights(values=tuple(best_w.tolist()), cap=cap)


# ---------------------------------------------------------------------------
# Full cascade orchestration.
# ---------------------------------------------------------------------------


class Provenance(Enum):
    STAGE1 = "stage1"
    STAGE2 = "stage2"
    # stage-2 failed and the stage-1 label was kept; never silently dropped
    STAGE2_FAILED = "stage2_failed"


@dataclass
class AgentVoting:
    personas: tuple[AgentPersona, ...]
    client: ChatClient


@dataclass
class MlVoting:
    models: list[TrainedModel]
    weights: EnsembleWeights

    def __post_init__(self) -> None:
        if len(self.weights.values) != len(self.models) + 1:
            raise DimensionError(
                f"{len(self.models)} models need {len(self.models) + 1} weights "
                f"(stage-1 scorer holds slot 0), got {len(self.weights.values)}"
            )


@dataclass(frozen=True)
class CascadeResult:
    post_id: str
    label: Label
    provenance: Provenance
    stage1_prob: float
    routing: RoutingDecision
    ensemble_prob: Optional[float] = None
    verdicts: Optional[tuple[Verdict, ...]] = None
    error: Optional[str] = None

    def to_record(self) -> dict:
        record = {
            "id": self.post_id,
            "label": self.label.to_name(),
            "provenance": self.provenance.value,
            "stage1_prob": self.stage1_prob,
        }
        if self.routing.reason is not None:
            record["reason"] = self.routing.reason.value
        if self.ensemble_prob is not None:
            record["ensemble_prob"] = self.ensemble_prob
        if self.verdicts is not None:
            record["verdicts"] = [
                v.label.to_name() if v.label is not None else "abstain" for v in self.verdicts
            ]
        if self.error is not None:
            record["error"] = self.error
        return record


def _stage1_label(prob: float) -> Label:
    return Label.SUICIDE if prob >= 0.5 else Label.NON_SUICIDE


def run_cascade(
    ds: Dataset,
    stage1: Scorer,
    cfg: RoutingConfig,
    stage2: Union[AgentVoting, MlVoting],
    features: Optional[np.ndarray] = None,
    feature_provider: Optional[Callable[[Post], np.ndarray]] = None,
    parallelism: int = 4,
) -> list[CascadeResult]:
    """Score, route, and resolve a dataset; output order equals input order.

    ML voting needs either a feature matrix aligned with the dataset or a
    lazy per-post provider, which is only consulted for escalated posts.
    Per-post stage-2 failures never abort the batch: the post keeps its
    stage-1 label under a flagged provenance with the error recorded. A
    stage-1 scoring failure is treated as maximal uncertainty (p = 0.5),
    which always escalates.
    """
    if isinstance(stage2, MlVoting):
        if features is None and feature_provider is None:
            raise ValueError("ML voting requires features or a feature_provider")
        if features is not None:
            features = np.asarray(features, dtype=np.float64)
            if features.shape != (len(ds), FEATURE_DIM):
                raise DimensionError(
                    f"features {features.shape} not aligned with dataset of {len(ds)} posts"
                )

    stage1_errors: dict[int, str] = {}
    probs: list[float] = []
    for i, post in enumerate(ds.posts):
        try:
            probs.append(check_probability(stage1.score(post.text), "stage1 probability"))
        except Exception as exc:
            stage1_errors[i] = str(exc)
            probs.append(0.5)
    decisions = [route(post, probs[i], cfg) for i, post in enumerate(ds.posts)]

    results: dict[int, CascadeResult] = {}
    escalated: list[int] = []
    for i, decision in enumerate(decisions):
        if decision.accepted:
            results[i] = CascadeResult(
                post_id=ds.posts[i].id,
                label=decision.label,
                provenance=Provenance.STAGE1,
                stage1_prob=probs[i],
                routing=decision,
                error=stage1_errors.get(i),
            )
        else:
            escalated.append(i)

    def resolve(i: int) -> CascadeResult:
        post = ds.posts[i]
        prob = probs[i]
        base = {
            "post_id": post.id,
            "stage1_prob": prob,
            "routing": decisions[i],
        }
        try:
            if isinstance(stage2, AgentVoting):
                verdicts = tuple(
                    agent_classify(stage2.client, persona, post.text)
                    for persona in stage2.personas
                )
                label = llm_vote(verdicts, tie_breaker=_stage1_label(prob))
                return CascadeResult(
                    label=label, provenance=Provenance.STAGE2, verdicts=verdicts,
                    error=stage1_errors.get(i), **base,
                )
            if features is not None:
                vector = features[i]
            else:
                vector = feature_provider(post)
            scores = [prob] + [predict_proba(m, vector) for m in stage2.models]
            label, ensemble_prob = ml_vote(scores, stage2.weights)
            return CascadeResult(
                label=label, provenance=Provenance.STAGE2, ensemble_prob=ensemble_prob,
                error=stage1_errors.get(i), **base,
            )
        except Exception as exc:
            return CascadeResult(
                label=_stage1_label(prob), provenance=Provenance.STAGE2_FAILED,
                error=str(exc), **base,
            )

    if escalated:
        if parallelism > 1 and len(escalated) > 1:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                for i, result in zip(escalated, pool.map(resolve, escalated)):
                    results[i] = result
        else:
            for i in escalated:
                results[i] = resolve(i)

    return [results[i] for i in range(len(ds))]


# ---------------------------------------------------------------------------
# Weight-file persistence.
# ---------------------------------------------------------------------------


def save_weights(path: str | Path, weights: EnsembleWeights, roster: Sequence[str],
                 val_f1: float) -> None:
    if len(roster) != len(weights.values):
        raise DimensionError("roster length does not match weights")
    document = {
        "roster": list(roster),
        "weights": list(weights.values),
        "cap": weights.cap,
        "val_f1": val_f1,
    }
    atomic_write_text(path, json.dumps(document, sort_keys=True) + "\n")


def load_weights(path: str | Path) -> tuple[EnsembleWeights, list[str], float]:
    with Path(path).open("r", encoding="utf-8") as fh:
        document = json.load(fh)
    weights = EnsembleWeights(
        values=tuple(document["weights"]),
        cap=float(document["cap"]),
        roster=tuple(document["roster"]),
    )
    return weights, list(document["roster"]), float(document["val_f1"])
