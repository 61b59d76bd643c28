"""Dynamic risk assessment: link history to checklist items, score RPN,
tier the risk, adapt sample sizes, and rank items with a blended
logistic-regression + item-similarity predictor.

The logistic model is trained from scratch with full-batch gradient
descent so the gradient can be checked against finite differences.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import ChecklistItem, HistoricalIssue
from .textindex import VectorIndex

FEATURE_NAMES = ("rpn_scaled", "supplier_failure_rate", "recency", "link_density")


class FactorRangeError(ValueError):
    """Severity, occurrence or detection outside the 1-10 scale."""


@dataclass(frozen=True)
class RiskConfig:
    link_threshold: float = 0.35
    max_links: int = 10
    tier_high: int = 200
    tier_medium: int = 80
    multiplier_high: float = 2.0
    multiplier_medium: float = 1.0
    multiplier_low: float = 0.5
    blend_weight: float = 0.5
    top_n: int = 5
    learning_rate: float = 0.1
    epochs: int = 500


@dataclass(frozen=True)
class IssueLink:
    item_id: str
    issue_id: str
    similarity: float

    def to_dict(self) -> dict:
        return {"item_id": self.item_id, "issue_id": self.issue_id,
                "similarity": self.similarity}


@dataclass(frozen=True)
class RiskAssessment:
    item_id: str
    severity: int
    occurrence: int
    detection: int
    rpn: int
    tier: str
    adjusted_sample_size: int
    priority: float
    critical: bool
    links: tuple[IssueLink, ...]

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "severity": self.severity,
            "occurrence": self.occurrence,
            "detection": self.detection,
            "rpn": self.rpn,
            "tier": self.tier,
            "adjusted_sample_size": self.adjusted_sample_size,
            "priority": self.priority,
            "critical": self.critical,
            "links": [link.to_dict() for link in self.links],
        }


class IssueCorpus:
    """History plus its embeddings and per-supplier/category failure tallies.

    Issues must be added in chronological order when the corpus feeds
    incremental feature extraction; tallies themselves are order-free.
    """

    def __init__(self, embedder, issues: Iterable[HistoricalIssue] = ()):
        self.embedder = embedder
        self.index = VectorIndex(embedder.dimension)
        self.by_id: dict[str, HistoricalIssue] = {}
        self._supplier_tally: dict[str, list[int]] = {}  # supplier -> [failed, total]
        self._cell_tally: dict[tuple[str, str], list[int]] = {}  # (supplier, category)
        self.latest_date: Optional[dt.date] = None
        for issue in issues:
            self.add(issue)

    def __len__(self) -> int:
        return len(self.by_id)

    def add(self, issue: HistoricalIssue) -> None:
        if issue.id in self.by_id:
            raise ValueError(f"duplicate issue id: {issue.id}")
        self.by_id[issue.id] = issue
        self.index.add(issue.id, self.embedder.embed(issue.description))
        tally = self._supplier_tally.setdefault(issue.supplier_id, [0, 0])
        tally[0] += int(issue.failed)
        tally[1] += 1
        cell = self._cell_tally.setdefault((issue.supplier_id, issue.item_category), [0, 0])
        cell[0] += int(issue.failed)
        cell[1] += 1
        if self.latest_date is None or issue.occurred_on > self.latest_date:
            self.latest_date = issue.occurred_on

    def supplier_failure_rate(self, supplier_id: Optional[str]) -> float:
        if supplier_id is None:
            failed = sum(t[0] for t in self._supplier_tally.values())
            total = sum(t[1] for t in self._supplier_tally.values())
        else:
            failed, total = self._supplier_tally.get(supplier_id, (0, 0))
        return failed / total if total else 0.0

    def suppliers(self) -> list[str]:
        return sorted(self._supplier_tally)

    def categories_with_data(self, supplier_id: Optional[str] = None) -> list[str]:
        if supplier_id is None:
            return sorted({c for (_s, c) in self._cell_tally})
        return sorted({c for (s, c) in self._cell_tally if s == supplier_id})

    def cell_failure_rate(self, supplier_id: Optional[str], category: str) -> float:
        """Failure rate for a supplier x category cell; supplier None aggregates."""
        if supplier_id is None:
            failed = sum(v[0] for (s, c), v in self._cell_tally.items() if c == category)
            total = sum(v[1] for (s, c), v in self._cell_tally.items() if c == category)
        else:
            failed, total = self._cell_tally.get((supplier_id, category), (0, 0))
        return failed / total if total else 0.0

    def category_column(self, category: str) -> np.ndarray:
        """Failure-rate vector over all suppliers (missing cells read as 0)."""
        return np.array(
            [self.cell_failure_rate(s, category) for s in self.suppliers()],
            dtype=np.float64)


def link_issues(item: ChecklistItem, history: IssueCorpus, embedder,
                tau: float = 0.35, max_links: int = 10) -> list[IssueLink]:
    """Issues whose description is cosine-similar to the item text (>= tau)."""
    if len(history) == 0 or max_links <= 0:
        return []
    query = embedder.embed(item.text)
    hits = history.index.search(query, k=len(history))
    links = [IssueLink(item.id, doc_id, sim) for doc_id, sim in hits if sim >= tau]
    return links[:max_links]


def occurrence_from_links(links: Sequence[IssueLink]) -> int:
    if not links:
        return 1
    s_max = max(link.similarity for link in links)
    rounded = math.floor(10.0 * s_max + 0.5)  # round half up
    return max(1, min(10, rounded))


def compute_rpn(severity: int, occurrence: int, detection: int) -> int:
    for name, value in (("severity", severity), ("occurrence", occurrence),
                        ("detection", detection)):
        if not 1 <= value <= 10:
            raise FactorRangeError(f"{name} {value} out of range [1,10]")
    return severity * occurrence * detection


def tier_of(rpn: int, config: RiskConfig = RiskConfig()) -> str:
    if not 1 <= rpn <= 1000:
        raise FactorRangeError(f"rpn {rpn} out of range [1,1000]")
    if rpn >= config.tier_high:
        return "high"
    if rpn >= config.tier_medium:
        return "medium"
    return "low"


def adapt_sample_size(base: int, tier: str, config: RiskConfig = RiskConfig()) -> int:
    if base < 1:
        raise ValueError(f"base sample size must be >= 1, got {base}")
    multiplier = {
        "high": config.multiplier_high,
        "medium": config.multiplier_medium,
        "low": config.multiplier_low,
    }[tier]
    return max(1, math.ceil(multiplier * base))


# ---------------------------------------------------------------------------
# Logistic model

@dataclass
class RiskModel:
    weights: np.ndarray
    bias: float
    loss_trace: list[float] = field(default_factory=list)

    @classmethod
    def zero(cls, n_features: int = len(FEATURE_NAMES)) -> "RiskModel":
        return cls(weights=np.zeros(n_features, dtype=np.float64), bias=0.0)

    def predict_probability(self, features: np.ndarray) -> float:
        return float(sigmoid(np.dot(self.weights, np.asarray(features)) + self.bias))


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    exp_z = np.exp(z[~pos])
    out[~pos] = exp_z / (1.0 + exp_z)
    return out if out.ndim else float(out)


def cross_entropy_loss(weights: np.ndarray, bias: float,
                       x: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(sigmoid(x @ weights + bias), 1e-12, 1.0 - 1e-12)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def cross_entropy_gradient(weights: np.ndarray, bias: float,
                           x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    residual = sigmoid(x @ weights + bias) - y
    grad_w = x.T @ residual / len(y)
    grad_b = float(np.mean(residual))
    return grad_w, grad_b


def train_risk_model(samples: Sequence[tuple[Sequence[float], bool]],
                     config: RiskConfig = RiskConfig()) -> RiskModel:
    """Full-batch gradient descent from w = 0, b = 0; fully deterministic.

    The returned loss trace has epochs + 1 entries, starting at the
    untrained loss.
    """
    if not samples:
        raise ValueError("training set is empty")
    x = np.array([list(f) for f, _ in samples], dtype=np.float64)
    y = np.array([1.0 if label else 0.0 for _, label in samples], dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    weights = np.zeros(x.shape[1], dtype=np.float64)
    bias = 0.0
    trace = [cross_entropy_loss(weights, bias, x, y)]
    for _epoch in range(config.epochs):
        grad_w, grad_b = cross_entropy_gradient(weights, bias, x, y)
        weights = weights - config.learning_rate * grad_w
        bias = bias - config.learning_rate * grad_b
        trace.append(cross_entropy_loss(weights, bias, x, y))
    return RiskModel(weights=weights, bias=bias, loss_trace=trace)


# ---------------------------------------------------------------------------
# Item-based recommendation over the supplier x category failure matrix

def recommend_score(item: ChecklistItem, supplier_id: Optional[str],
                    history: IssueCorpus, top_k: int = 5) -> float:
    """Similarity-weighted mean of the supplier's failure rates in the
    categories most similar to the item's category; 0 without data."""
    candidates = history.categories_with_data(supplier_id)
    if not candidates or len(history) == 0:
        return 0.0
    own = history.category_column(item.category)
    own_norm = float(np.linalg.norm(own))
    if own_norm == 0.0:
        return 0.0
    sims = []
    for category in candidates:
        col = history.category_column(category)
        col_norm = float(np.linalg.norm(col))
        sim = float(np.dot(own, col) / (own_norm * col_norm)) if col_norm else 0.0
        sims.append((category, sim))
    sims.sort(key=lambda e: (-e[1], e[0]))
    top = sims[:top_k]
    denominator = sum(sim for _c, sim in top)
    if denominator <= 0.0:
        return 0.0
    numerator = sum(sim * history.cell_failure_rate(supplier_id, c) for c, sim in top)
    return numerator / denominator


# ---------------------------------------------------------------------------
# Feature extraction and full assessment

def recency_score(links: Sequence[IssueLink], history: IssueCorpus,
                  ref_date: Optional[dt.date]) -> float:
    if not links or ref_date is None:
        return 0.0
    newest = max(history.by_id[link.issue_id].occurred_on for link in links)
    age_days = (ref_date - newest).days
    return max(0.0, min(1.0, 1.0 - age_days / 365.0))


def extract_features(item: ChecklistItem, supplier_id: Optional[str],
                     links: Sequence[IssueLink], history: IssueCorpus,
                     ref_date: Optional[dt.date],
                     config: RiskConfig = RiskConfig()) -> np.ndarray:
    occurrence = occurrence_from_links(links)
    rpn = compute_rpn(item.severity, occurrence, item.detection)
    return np.array([
        rpn / 1000.0,
        history.supplier_failure_rate(supplier_id),
        recency_score(links, history, ref_date),
        len(links) / config.max_links if config.max_links else 0.0,
    ], dtype=np.float64)


def history_training_samples(issues: Sequence[HistoricalIssue], embedder,
                             config: RiskConfig = RiskConfig(),
                             ) -> list[tuple[np.ndarray, bool]]:
    """One sample per issue, featurized against the history before it.

    Issues are processed in (occurred_on, id) order; each issue becomes a
    pseudo checklist item with default detection, so the features match
    what assessment-time extraction would have seen.
    """
    ordered = sorted(issues, key=lambda i: (i.occurred_on, i.id))
    corpus = IssueCorpus(embedder)
    samples: list[tuple[np.ndarray, bool]] = []
    for issue in ordered:
        pseudo = ChecklistItem(id=issue.id, text=issue.description,
                               category=issue.item_category,
                               severity=issue.severity)
        links = link_issues(pseudo, corpus, embedder,
                            tau=config.link_threshold, max_links=config.max_links)
        features = extract_features(pseudo, issue.supplier_id, links, corpus,
                                    issue.occurred_on, config)
        samples.append((features, issue.failed))
        corpus.add(issue)
    return samples


def assess_checklist(checklist: Sequence[ChecklistItem], history: IssueCorpus,
                     model: RiskModel, embedder,
                     config: RiskConfig = RiskConfig(),
                     supplier_id: Optional[str] = None,
                     top_n: Optional[int] = None) -> list[RiskAssessment]:
    """Assess every item and flag the top_n most critical ones.

    Critical flags are resolved by (priority desc, rpn desc, item_id asc),
    so output is deterministic for fixed inputs.
    """
    for item in checklist:
        errors = item.validate()
        if errors:
            range_errors = [e for e in errors if "out of range" in e]
            if range_errors:
                raise FactorRangeError("; ".join(range_errors))
            raise ValueError("; ".join(errors))
    seen_ids = set()
    for item in checklist:
        if item.id in seen_ids:
            raise ValueError(f"duplicate item id: {item.id}")
        seen_ids.add(item.id)

    n = config.top_n if top_n is None else top_n
    partial = []
    for item in checklist:
        links = link_issues(item, history, embedder,
                            tau=config.link_threshold, max_links=config.max_links)
        occurrence = occurrence_from_links(links)
        rpn = compute_rpn(item.severity, occurrence, item.detection)
        tier = tier_of(rpn, config)
        features = extract_features(item, supplier_id, links, history,
                                    history.latest_date, config)
        learned = model.predict_probability(features)
        recommended = recommend_score(item, supplier_id, history)
        priority = config.blend_weight * learned + (1.0 - config.blend_weight) * recommended
        partial.append((item, links, occurrence, rpn, tier, priority))

    ranked = sorted(partial, key=lambda row: (-row[5], -row[3], row[0].id))
    critical_ids = {row[0].id for row in ranked[:max(0, n)]}

    assessments = []
    for item, links, occurrence, rpn, tier, priority in partial:
        assessments.append(RiskAssessment(
            item_id=item.id,
            severity=item.severity,
            occurrence=occurrence,
            detection=item.detection,
            rpn=rpn,
            tier=tier,
            adjusted_sample_size=adapt_sample_size(item.base_sample_size, tier, config),
            priority=priority,
            critical=item.id in critical_ids,
            links=tuple(links),
        ))
    return assessments
