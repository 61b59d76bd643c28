"""Shared domain types: checklist items, historical issues, knowledge records.

Everything here is an immutable value object. Validation collects *all*
violations instead of failing on the first one, so callers (and the API)
can report complete error lists.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import unicodedata
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

FIELD_SEP = "\x1f"

DEFAULT_CATEGORIES = ("process", "material", "equipment", "method", "measurement", "environment")

DEFAULT_FAILURE_PATTERNS = (
    "solder bridge",
    "cold joint",
    "misalignment",
    "contamination",
    "label misprint",
    "dimensional deviation",
    "missing component",
    "wrong component",
    "crack",
    "delamination",
    "corrosion",
    "leak",
)


class RecordValidationError(ValueError):
    """Raised with the complete list of violated invariants."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


def canonicalize(text: str) -> str:
    """Normalize free text: Unicode NFC, trim, collapse whitespace runs."""
    normalized = unicodedata.normalize("NFC", text)
    return " ".join(normalized.split())


def utc_now_iso() -> str:
    return dt.datetime.now(dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_timestamp(value: str) -> dt.datetime:
    return dt.datetime.fromisoformat(value.replace("Z", "+00:00"))


@dataclass(frozen=True)
class Taxonomy:
    categories: tuple[str, ...] = DEFAULT_CATEGORIES
    failure_patterns: tuple[str, ...] = DEFAULT_FAILURE_PATTERNS

    def __post_init__(self):
        seen = set()
        for key in self.categories:
            if not key or key != key.lower():
                raise ValueError(f"taxonomy key must be lowercase and non-empty: {key!r}")
            if key in seen:
                raise ValueError(f"duplicate taxonomy key: {key!r}")
            seen.add(key)

    @classmethod
    def from_file(cls, path: str | Path) -> "Taxonomy":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            categories=tuple(data["categories"]),
            failure_patterns=tuple(data.get("failure_patterns", ())),
        )

    @classmethod
    def default(cls) -> "Taxonomy":
        ref = resources.files("smartaudit").joinpath("data/taxonomy.json")
        with resources.as_file(ref) as path:
            return cls.from_file(path)

    def category_rank(self, key: str) -> int:
        return self.categories.index(key)


@dataclass(frozen=True)
class ChecklistItem:
    id: str
    text: str
    category: str = ""
    severity: int = 5
    detection: int = 5
    base_sample_size: int = 1

    def validate(self) -> list[str]:
        errors = []
        if not canonicalize(self.text):
            errors.append(f"item {self.id}: text empty after trimming")
        if not 1 <= self.severity <= 10:
            errors.append(f"item {self.id}: severity {self.severity} out of range [1,10]")
        if not 1 <= self.detection <= 10:
            errors.append(f"item {self.id}: detection {self.detection} out of range [1,10]")
        if self.base_sample_size < 1:
            errors.append(f"item {self.id}: base_sample_size must be >= 1")
        return errors

    @classmethod
    def from_dict(cls, raw: dict) -> "ChecklistItem":
        return cls(
            id=str(raw["id"]),
            text=str(raw.get("text", "")),
            category=str(raw.get("category", "")),
            severity=int(raw.get("severity", 5) if raw.get("severity") is not None else 5),
            detection=int(raw.get("detection", 5) if raw.get("detection") is not None else 5),
            base_sample_size=int(raw.get("base_sample_size", 1)),
        )

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "category": self.category,
            "severity": self.severity,
            "detection": self.detection,
            "base_sample_size": self.base_sample_size,
        }


@dataclass(frozen=True)
class HistoricalIssue:
    id: str
    supplier_id: str
    item_category: str
    description: str
    failure_pattern: str
    tags: frozenset[str]
    severity: int
    occurred_on: dt.date
    failed: bool

    def validate(self, taxonomy: Taxonomy, clock: Optional[dt.date] = None) -> list[str]:
        errors = []
        if not 1 <= self.severity <= 10:
            errors.append(f"issue {self.id}: severity {self.severity} out of range [1,10]")
        today = clock or dt.date.today()
        if self.occurred_on > today:
            errors.append(f"issue {self.id}: occurred_on {self.occurred_on} is in the future")
        unknown = sorted(self.tags - set(taxonomy.categories))
        for tag in unknown:
            errors.append(f"issue {self.id}: unknown tag: {tag}")
        return errors

    @classmethod
    def from_dict(cls, raw: dict) -> "HistoricalIssue":
        return cls(
            id=str(raw["id"]),
            supplier_id=str(raw["supplier_id"]),
            item_category=str(raw.get("item_category", "")),
            description=str(raw.get("description", "")),
            failure_pattern=str(raw.get("failure_pattern", "")),
            tags=frozenset(raw.get("tags", ())),
            severity=int(raw.get("severity", 5)),
            occurred_on=dt.date.fromisoformat(raw["occurred_on"]),
            failed=bool(raw.get("failed", False)),
        )

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "supplier_id": self.supplier_id,
            "item_category": self.item_category,
            "description": self.description,
            "failure_pattern": self.failure_pattern,
            "tags": sorted(self.tags),
            "severity": self.severity,
            "occurred_on": self.occurred_on.isoformat(),
            "failed": self.failed,
        }


@dataclass(frozen=True)
class QualityScore:
    root_cause_depth: int
    causal_chain_validity: int
    corrective_action_specificity: int
    evidence_support: int

    @property
    def overall(self) -> int:
        return 5 * (
            self.root_cause_depth
            + self.causal_chain_validity
            + self.corrective_action_specificity
            + self.evidence_support
        )

    def validate(self) -> list[str]:
        errors = []
        for name, value in self.dimensions().items():
            if not 0 <= value <= 5:
                errors.append(f"quality dimension {name}: {value} out of range [0,5]")
        return errors

    def dimensions(self) -> dict[str, int]:
        return {
            "root_cause_depth": self.root_cause_depth,
            "causal_chain_validity": self.causal_chain_validity,
            "corrective_action_specificity": self.corrective_action_specificity,
            "evidence_support": self.evidence_support,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "QualityScore":
        return cls(
            root_cause_depth=int(raw["root_cause_depth"]),
            causal_chain_validity=int(raw["causal_chain_validity"]),
            corrective_action_specificity=int(raw["corrective_action_specificity"]),
            evidence_support=int(raw["evidence_support"]),
        )

    def to_dict(self) -> dict:
        out = self.dimensions()
        out["overall"] = self.overall
        return out


@dataclass(frozen=True)
class KnowledgeRecord:
    id: str
    supplier_id: str
    tuned_description: str
    failure_pattern: str
    tags: frozenset[str]
    root_cause: str = ""
    corrective_action: str = ""
    source_issue_id: Optional[str] = None
    quality: Optional[QualityScore] = None
    content_hash: str = ""
    created_at: str = ""
    near_duplicate_of: Optional[str] = None

    def compute_hash(self) -> str:
        """SHA-256 over field-name-prefixed canonical content, 0x1F-separated."""
        parts = [
            "tuned_description", canonicalize(self.tuned_description),
            "failure_pattern", canonicalize(self.failure_pattern),
            "tags", ",".join(sorted(self.tags)),
            "root_cause", canonicalize(self.root_cause),
            "corrective_action", canonicalize(self.corrective_action),
        ]
        return hashlib.sha256(FIELD_SEP.join(parts).encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, raw: dict) -> "KnowledgeRecord":
        quality = raw.get("quality")
        return cls(
            id=str(raw.get("id", "")),
            supplier_id=str(raw.get("supplier_id", "")),
            tuned_description=str(raw.get("tuned_description", "")),
            failure_pattern=str(raw.get("failure_pattern", "")),
            tags=frozenset(raw.get("tags", ())),
            root_cause=str(raw.get("root_cause", "")),
            corrective_action=str(raw.get("corrective_action", "")),
            source_issue_id=raw.get("source_issue_id"),
            quality=QualityScore.from_dict(quality) if quality else None,
            content_hash=str(raw.get("content_hash", "")),
            created_at=str(raw.get("created_at", "")),
            near_duplicate_of=raw.get("near_duplicate_of"),
        )

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "source_issue_id": self.source_issue_id,
            "supplier_id": self.supplier_id,
            "tuned_description": self.tuned_description,
            "failure_pattern": self.failure_pattern,
            "tags": sorted(self.tags),
            "root_cause": self.root_cause,
            "corrective_action": self.corrective_action,
            "quality": self.quality.to_dict() if self.quality else None,
            "content_hash": self.content_hash,
            "created_at": self.created_at,
            "near_duplicate_of": self.near_duplicate_of,
        }


def validate_record(raw: KnowledgeRecord, taxonomy: Taxonomy) -> KnowledgeRecord:
    """Validate a candidate record and return it with its content hash filled in.

    Raises RecordValidationError carrying the complete list of violations.
    A record without an id gets one derived from the content hash, so ids
    are deterministic for fixture data and duplicates collide on purpose.
    """
    violations = []
    if not canonicalize(raw.tuned_description):
        violations.append("empty tuned_description")
    for tag in sorted(raw.tags - set(taxonomy.categories)):
        violations.append(f"unknown tag: {tag}")
    if raw.quality is not None:
        violations.extend(raw.quality.validate())
    if violations:
        raise RecordValidationError(violations)

    content_hash = raw.compute_hash()
    record_id = raw.id or f"kr-{content_hash[:12]}"
    return replace(raw, id=record_id, content_hash=content_hash)
