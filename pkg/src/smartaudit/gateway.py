"""Pluggable boundary to language-model and embedding backends.

All prompts are typed templates rendered at temperature 0.0. The mock
backend resolves a completion by fixture lookup (keyed by prompt digest),
then by a deterministic rule per template, so every pipeline in the
system can run byte-identically offline. The HTTP backend speaks a
minimal JSON protocol with one retry.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from .core import canonicalize
from .textindex import STOPWORDS, tokenize


class GatewayError(Exception):
    pass


class GatewayParseError(GatewayError):
    """No structured block could be extracted from the model output."""


class GatewaySchemaError(GatewayError):
    """The structured block violates the template's output contract."""


class GatewayUnavailable(GatewayError):
    """Backend failed: remote unreachable, script exhausted, or no fallback."""


# ---------------------------------------------------------------------------
# Output contracts

@dataclass(frozen=True)
class FieldSpec:
    kind: str  # "str" | "int" | "list_str" | "pair_list"
    min_value: Optional[int] = None
    max_value: Optional[int] = None
    choices: Optional[tuple[str, ...]] = None


@dataclass(frozen=True)
class OutputContract:
    fields: tuple[tuple[str, FieldSpec], ...]

    def validate(self, parsed: dict) -> dict:
        """Check field presence, types and ranges; unknown extras are ignored."""
        problems = []
        clean = {}
        for name, spec in self.fields:
            if name not in parsed:
                problems.append(f"field '{name}': missing")
                continue
            value = parsed[name]
            if spec.kind == "str":
                if not isinstance(value, str):
                    problems.append(f"field '{name}': expected string")
                    continue
                if spec.choices and value not in spec.choices:
                    problems.append(f"field '{name}': {value!r} not one of {list(spec.choices)}")
                    continue
            elif spec.kind == "int":
                if isinstance(value, bool) or not isinstance(value, int):
                    problems.append(f"field '{name}': expected integer")
                    continue
                if spec.min_value is not None and value < spec.min_value or \
                   spec.max_value is not None and value > spec.max_value:
                    problems.append(
                        f"field '{name}': {value} out of range "
                        f"[{spec.min_value},{spec.max_value}]")
                    continue
            elif spec.kind == "list_str":
                if not isinstance(value, list) or not all(isinstance(x, str) for x in value):
                    problems.append(f"field '{name}': expected list of strings")
                    continue
            elif spec.kind == "pair_list":
                ok = isinstance(value, list) and all(
                    isinstance(x, dict) and isinstance(x.get("why"), str)
                    and isinstance(x.get("because"), str) for x in value)
                if not ok:
                    problems.append(f"field '{name}': expected list of why/because pairs")
                    continue
            clean[name] = value
        if problems:
            raise GatewaySchemaError("; ".join(problems))
        return clean


def parse_structured(raw_text: str, contract: OutputContract) -> dict:
    """Extract the first well-formed JSON object from text and validate it."""
    decoder = json.JSONDecoder()
    for pos, ch in enumerate(raw_text):
        if ch != "{":
            continue
        try:
            value, _end = decoder.raw_decode(raw_text, pos)
        except json.JSONDecodeError:
            continue
        if isinstance(value, dict):
            return contract.validate(value)
    raise GatewayParseError(f"no structured block found in response ({len(raw_text)} chars)")


# ---------------------------------------------------------------------------
# Templates

@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str
    output_contract: Optional[OutputContract]

    def render(self, params: dict) -> str:
        rendered = {k: _render_value(v) for k, v in params.items()}
        return self.body.format(**rendered)


def _render_value(value: Any) -> str:
    if isinstance(value, str):
        return value
    return json.dumps(value, sort_keys=True, ensure_ascii=False)


_QUALITY_DIMS = (
    "root_cause_depth",
    "causal_chain_validity",
    "corrective_action_specificity",
    "evidence_support",
)

INTENTS = ("commonality", "failure_analysis", "report_generation", "retrieval")

TEMPLATES: dict[str, PromptTemplate] = {}


def _register(template_id: str, body: str, contract: Optional[OutputContract]) -> None:
    TEMPLATES[template_id] = PromptTemplate(template_id, body, contract)


_register(
    "tune_description",
    "Rewrite the following audit finding as one clear, factual sentence; "
    "keep part identifiers verbatim.\nFinding: {payload}\n"
    'Answer as JSON: {{"text": "..."}}',
    OutputContract((("text", FieldSpec("str")),)),
)
_register(
    "extract_pattern",
    "Name the failure pattern in this finding. Known patterns: {patterns}.\n"
    "Finding: {payload}\n"
    'Answer as JSON: {{"pattern": "..."}}',
    OutputContract((("pattern", FieldSpec("str")),)),
)
_register(
    "assign_tags",
    "Assign cause-category tags to this finding. Categories: {categories}.\n"
    "Finding: {payload}\n"
    'Answer as JSON: {{"tags": ["..."]}}',
    OutputContract((("tags", FieldSpec("list_str")),)),
)
_register(
    "cod_summarize",
    "Round {round} of dense summarization, at most {max_tokens} tokens. "
    "Keep every entity already present and add the most salient missing ones.\n"
    "Previous summary: {previous}\nFull text: {payload}\n"
    'Answer as JSON: {{"summary": "..."}}',
    OutputContract((("summary", FieldSpec("str")),)),
)
_register(
    "quality_judge",
    "Score this failure analysis on four 0-5 dimensions: root_cause_depth, "
    "causal_chain_validity, corrective_action_specificity, evidence_support.\n"
    "Description: {description}\nRoot cause: {root_cause}\n"
    "Corrective action: {corrective_action}\n"
    'Answer as JSON: {{"root_cause_depth": 0, "causal_chain_validity": 0, '
    '"corrective_action_specificity": 0, "evidence_support": 0}}',
    OutputContract(tuple((d, FieldSpec("int", 0, 5)) for d in _QUALITY_DIMS)),
)
_register(
    "intent_classify",
    "Classify the request into one of: commonality, failure_analysis, "
    "report_generation, retrieval.\nRequest: {payload}\n"
    'Answer as JSON: {{"intent": "..."}}',
    OutputContract((("intent", FieldSpec("str", choices=INTENTS)),)),
)
_register(
    "agent_step",
    "You are an audit analysis agent. Decide the next step.\n"
    "Request: {request}\nIntent: {intent}\nTools: {tools}\n"
    "Transcript so far:\n{transcript}\n"
    "Reply with 'Thought: ...' then either 'Action: <tool> <json args>' "
    "or 'Final: <report>'.",
    None,  # free-form ReAct text, parsed by the session loop
)
_register(
    "five_whys",
    "Run a 5-Whys analysis ({depth} levels) for this failure.\n"
    "Failure pattern: {failure_pattern}\nDescription: {payload}\n"
    'Answer as JSON: {{"chain": [{{"why": "...", "because": "..."}}]}}',
    OutputContract((("chain", FieldSpec("pair_list")),)),
)
_register(
    "eight_d_section",
    "Write the {section} section of an 8D corrective-action report.\n"
    "Context: {context}\n"
    'Answer as JSON: {{"text": "..."}}',
    OutputContract((("text", FieldSpec("str")),)),
)


# ---------------------------------------------------------------------------
# Requests and responses

@dataclass(frozen=True)
class LlmRequest:
    template_id: str
    rendered_prompt: str
    params: dict
    temperature: float = 0.0

    @property
    def prompt_sha256(self) -> str:
        return hashlib.sha256(self.rendered_prompt.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class LlmResponse:
    raw_text: str
    parsed: Optional[dict]


# ---------------------------------------------------------------------------
# Rule-based fallbacks (the deterministic mock behaviour on fixture miss)

_INTENT_RULES: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("failure_analysis", ("why", "root cause")),
    ("report_generation", ("8d", "report")),
    ("commonality", ("common", "top", "trend", "most frequent")),
)


def classify_intent_keywords(text: str) -> str:
    """Keyword table, first matching rule wins; no hit means retrieval.

    Single-word terms match as token prefixes ("tags" hits "tag"-free rules,
    "reporting" hits "report"); phrases match as substrings.
    """
    canon = canonicalize(text).lower()
    tokens = tokenize(text)
    for intent, terms in _INTENT_RULES:
        for term in terms:
            if " " in term:
                if term in canon:
                    return intent
            elif any(tok.startswith(term) for tok in tokens):
                return intent
    return "retrieval"


_SUPPLIER_TOKEN_RE = re.compile(r"^s(?:up)?\d+$")


def _supplier_token(text: str) -> Optional[str]:
    for tok in tokenize(text):
        if _SUPPLIER_TOKEN_RE.match(tok):
            return tok
    return None


def densify_summary(text: str, round_no: int, max_tokens: int) -> str:
    """Mock chain-of-density rule.

    Texts short enough to fit are passed through whole. Longer texts keep
    their first max_tokens - r tokens and append the r highest-frequency
    non-stopword tokens not already present, so each round stays within
    the budget while getting denser.
    """
    tokens = tokenize(text)
    if len(tokens) <= max_tokens:
        return " ".join(tokens)
    counts: dict[str, int] = {}
    first_pos: dict[str, int] = {}
    for pos, tok in enumerate(tokens):
        if tok in STOPWORDS:
            continue
        counts[tok] = counts.get(tok, 0) + 1
        first_pos.setdefault(tok, pos)
    dense = sorted(counts, key=lambda t: (-counts[t], first_pos[t]))[:round_no]
    base = tokens[: max_tokens - round_no]
    base_set = set(base)
    return " ".join(base + [t for t in dense if t not in base_set])


_CAUSAL_MARKERS = frozenset(
    ["because", "since", "due", "caused", "causing", "led", "resulting", "root"])


def _judge_quality_heuristic(root_cause: str, corrective_action: str) -> dict[str, int]:
    rc = tokenize(root_cause)
    ca = tokenize(corrective_action)
    numeric = [t for t in rc + ca if any(c.isdigit() for c in t)]
    return {
        "root_cause_depth": min(5, len(rc) // 4),
        "causal_chain_validity": min(5, sum(1 for t in rc if t in _CAUSAL_MARKERS)),
        "corrective_action_specificity": min(5, len(ca) // 4),
        "evidence_support": min(5, len(numeric)),
    }


_FIVE_WHYS_LADDER = (
    ("Why was {p} observed?",
     "The process step produced {p} under its current operating window."),
    ("Why did the process step produce {p}?",
     "A key process parameter drifted outside its control limits."),
    ("Why did the parameter drift go unnoticed?",
     "The control plan has no in-process check for that parameter."),
    ("Why is the check missing from the control plan?",
     "The risk analysis behind the control plan never ranked this failure mode."),
    ("Why was the failure mode never ranked?",
     "Field data on {p} was not fed back into the periodic risk review."),
)


def build_five_whys_chain(failure_pattern: str, depth: int = 5) -> list[dict[str, str]]:
    pattern = canonicalize(failure_pattern) or "the failure"
    chain = []
    for i in range(depth):
        if i < len(_FIVE_WHYS_LADDER):
            why, because = _FIVE_WHYS_LADDER[i]
        else:
            why = f"Why does the level-{i} gap persist?"
            because = "The systemic review cadence does not cover it."
        chain.append({"why": why.format(p=pattern), "because": because.format(p=pattern)})
    return chain


_EIGHT_D_BOILERPLATE = {
    "D0": "Plan: scope the corrective-action effort, gather the affected records, "
          "and set review checkpoints with the supplier.",
    "D1": "Team: supplier quality engineer (lead), supplier process engineer, "
          "production line lead, incoming inspection representative.",
    "D3": "Containment: quarantine suspect lots at supplier and receiving dock, "
          "screen work-in-progress and finished-goods inventory, certify shipments.",
    "D6": "Validation: run the corrected process for three consecutive lots with "
          "tightened sampling and confirm zero recurrence before lifting containment.",
    "D7": "Prevention: update the process FMEA, control plan and work instructions; "
          "extend the fix to sister lines running the same process.",
    "D8": "Recognition: record the lessons learned in the knowledge base and "
          "acknowledge the team before closing the case.",
}


def _fallback_agent_step(params: dict) -> str:
    """Deterministic planner used when no fixture scripts the step."""
    intent = params.get("intent", "retrieval")
    request = params.get("request", "")
    steps = params.get("steps", [])
    n = len(steps)

    def emit(thought: str, tool: str, args: dict) -> str:
        return f"Thought: {thought}\nAction: {tool} " + json.dumps(
            args, sort_keys=True, ensure_ascii=False)

    def final(thought: str, report: str) -> str:
        return f"Thought: {thought}\nFinal: {report}"

    def last_observation() -> Any:
        raw = steps[-1]["observation"]
        try:
            return json.loads(raw)
        except (json.JSONDecodeError, TypeError):
            return None

    if n > 0 and last_observation() is None:
        return final("The last tool call failed; stopping with a diagnostic.",
                     f"Analysis halted: {steps[-1]['observation']}")

    supplier = _supplier_token(request)
    if intent == "commonality":
        if n == 0:
            tokens = tokenize(request)
            if any(t.startswith("categor") for t in tokens):
                group_by = "category"
            elif any(t.startswith("supplier") for t in tokens) and supplier is None:
                group_by = "supplier"
            else:
                group_by = "tag"
            filters = {"supplier": supplier} if supplier else {}
            return emit("Count the grouped failure frequencies first.",
                        "commonality_stats", {"filters": filters, "group_by": group_by})
        table = last_observation()
        lines = [f"## Commonality by {table['group_by']}", ""]
        for entry in table["entries"]:
            lines.append(f"- {entry['key']}: {entry['count']} "
                         f"(cumulative {entry['cumulative_share']:.2f})")
        if not table["entries"]:
            lines.append("- no matching records")
        return final("The frequency table answers the request.", "\n".join(lines))

    if intent == "retrieval":
        if n == 0:
            return emit("Search the knowledge base for matching records.",
                        "search_knowledge", {"k": 5, "mode": "hybrid", "query": request})
        results = last_observation()
        lines = ["## Matching records", ""]
        for hit in results:
            lines.append(f"- {hit['id']}: {hit['record']['tuned_description']}")
        if not results:
            lines.append("- no matching records")
        return final("Report the retrieved records.", "\n".join(lines))

    if intent == "failure_analysis":
        if n == 0:
            return emit("Locate the record to analyze.",
                        "search_knowledge", {"k": 3, "mode": "hybrid", "query": request})
        if n == 1:
            results = last_observation()
            if not results:
                return final("Nothing to analyze.", "No matching records found.")
            return emit("Walk the causal chain for the best match.",
                        "five_whys", {"record_id": results[0]["id"]})
        chain = last_observation()
        lines = ["## Root-cause chain", ""]
        for i, pair in enumerate(chain["chain"], start=1):
            lines.append(f"{i}. {pair['why']}")
            lines.append(f"   Because: {pair['because']}")
        return final("The chain is complete.", "\n".join(lines))

    # report_generation
    if n == 0:
        return emit("Collect the records the report should cover.",
                    "search_knowledge", {"k": 3, "mode": "hybrid", "query": request})
    if n == 1:
        results = last_observation()
        if not results:
            return final("Nothing to report on.", "No matching records found.")
        ids = [hit["id"] for hit in results[:3]]
        return emit("Assemble the corrective-action report.",
                    "eight_d_report", {"record_ids": ids})
    report = last_observation()
    return final("The report is assembled.", report["markdown"])


def _fallback(template_id: str, params: dict) -> str:
    if template_id == "tune_description":
        return json.dumps({"text": canonicalize(params["payload"])}, ensure_ascii=False)
    if template_id == "extract_pattern":
        payload_tokens = set(tokenize(params["payload"]))
        for pattern in params.get("patterns", []):
            pattern_tokens = tokenize(pattern)
            if pattern_tokens and all(t in payload_tokens for t in pattern_tokens):
                return json.dumps({"pattern": pattern}, ensure_ascii=False)
        content = [t for t in tokenize(params["payload"]) if t not in STOPWORDS]
        return json.dumps({"pattern": " ".join(content[:4]) or "unclassified"},
                          ensure_ascii=False)
    if template_id == "assign_tags":
        payload_tokens = set(tokenize(params["payload"]))
        tags = [c for c in params.get("categories", []) if c in payload_tokens]
        return json.dumps({"tags": tags}, ensure_ascii=False)
    if template_id == "cod_summarize":
        summary = densify_summary(params["payload"], int(params["round"]),
                                  int(params["max_tokens"]))
        return json.dumps({"summary": summary}, ensure_ascii=False)
    if template_id == "quality_judge":
        dims = _judge_quality_heuristic(params.get("root_cause", ""),
                                        params.get("corrective_action", ""))
        return json.dumps(dims, sort_keys=True)
    if template_id == "intent_classify":
        return json.dumps({"intent": classify_intent_keywords(params["payload"])})
    if template_id == "agent_step":
        return _fallback_agent_step(params)
    if template_id == "five_whys":
        chain = build_five_whys_chain(params.get("failure_pattern", ""),
                                      int(params.get("depth", 5)))
        return json.dumps({"chain": chain}, ensure_ascii=False)
    if template_id == "eight_d_section":
        section = params.get("section", "")
        text = _EIGHT_D_BOILERPLATE.get(
            section, f"{section}: see attached records for details.")
        return json.dumps({"text": text}, ensure_ascii=False)
    raise GatewayUnavailable(f"no fallback rule for template {template_id!r}")


# ---------------------------------------------------------------------------
# Backends

def load_fixture_file(path: str | Path) -> dict[tuple[str, str], str]:
    fixtures: dict[tuple[str, str], str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        entry = json.loads(line)
        fixtures[(entry["template_id"], entry["prompt_sha256"])] = entry["response"]
    return fixtures


class MockBackend:
    """Fixture lookup by (template_id, prompt digest), then rule fallback."""

    def __init__(self, fixtures: Optional[dict[tuple[str, str], str]] = None):
        self.fixtures = dict(fixtures or {})

    def complete_text(self, request: LlmRequest) -> str:
        key = (request.template_id, request.prompt_sha256)
        if key in self.fixtures:
            return self.fixtures[key]
        return _fallback(request.template_id, request.params)


class ScriptedBackend:
    """Pops pre-scripted responses in order; used to author fixtures and tests."""

    def __init__(self, responses: list[str]):
        self.responses = list(responses)
        self._pos = 0

    def complete_text(self, request: LlmRequest) -> str:
        if self._pos >= len(self.responses):
            raise GatewayUnavailable("scripted backend exhausted")
        response = self.responses[self._pos]
        self._pos += 1
        return response


class RecordingBackend:
    """Wraps a backend and captures fixture lines for every completion."""

    def __init__(self, inner):
        self.inner = inner
        self.lines: list[dict] = []

    def complete_text(self, request: LlmRequest) -> str:
        response = self.inner.complete_text(request)
        self.lines.append({
            "template_id": request.template_id,
            "prompt_sha256": request.prompt_sha256,
            "response": response,
        })
        return response

    def dump(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in self.lines:
                fh.write(json.dumps(line, ensure_ascii=False) + "\n")


class HttpBackend:
    """POST {"prompt", "temperature"} -> {"text"} with timeout and one retry."""

    def __init__(self, url: str, api_key: str = "", timeout: float = 30.0,
                 max_in_flight: int = 4):
        import httpx

        self.url = url
        self.timeout = timeout
        self._headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._semaphore = threading.Semaphore(max_in_flight)
        self._client = httpx.Client(timeout=timeout)

    def complete_text(self, request: LlmRequest) -> str:
        import httpx

        body = {"prompt": request.rendered_prompt, "temperature": request.temperature}
        last: Exception | None = None
        with self._semaphore:
            for _attempt in range(2):
                try:
                    resp = self._client.post(self.url, json=body, headers=self._headers)
                    resp.raise_for_status()
                    return resp.json()["text"]
                except (httpx.HTTPError, KeyError, ValueError) as exc:
                    last = exc
        raise GatewayUnavailable(f"llm backend at {self.url} failed: {last}")


class LlmGateway:
    """Typed entry point: render template, call backend, parse and validate.

    One reprompt on parse/schema failure, then a hard error. Temperature is
    pinned at 0.0 so scores and tags stay comparable across runs.
    """

    def __init__(self, backend):
        self.backend = backend

    def complete(self, template_id: str, params: dict) -> LlmResponse:
        template = TEMPLATES.get(template_id)
        if template is None:
            raise GatewayError(f"unknown template: {template_id}")
        request = LlmRequest(template_id, template.render(params), params)
        last_error: Optional[GatewayError] = None
        for _attempt in range(2):
            raw = self.backend.complete_text(request)
            if template.output_contract is None:
                return LlmResponse(raw, None)
            try:
                return LlmResponse(raw, parse_structured(raw, template.output_contract))
            except (GatewayParseError, GatewaySchemaError) as exc:
                last_error = exc
        raise last_error


# ---------------------------------------------------------------------------
# Embedders

class HashEmbedder:
    """Deterministic feature-hashing embedder over tokens and adjacent bigrams.

    Each feature is SHA-256 hashed; the digest picks the bucket (mod d) and
    its parity picks the sign. The accumulated vector is L2-normalized.
    Empty text maps to the first basis vector.
    """

    def __init__(self, dimension: int = 64):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = dimension

    def _basis(self) -> np.ndarray:
        v = np.zeros(self.dimension, dtype=np.float64)
        v[0] = 1.0
        return v

    def embed(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            return self._basis()
        features = tokens + [a + "\x1f" + b for a, b in zip(tokens, tokens[1:])]
        vec = np.zeros(self.dimension, dtype=np.float64)
        for feat in features:
            digest = int.from_bytes(
                hashlib.sha256(feat.encode("utf-8")).digest(), "big")
            sign = 1.0 if digest % 2 == 0 else -1.0
            vec[digest % self.dimension] += sign
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            return self._basis()
        return vec / norm


class HttpEmbedder:
    """POST {"input"} -> {"vector"}; output re-normalized defensively."""

    def __init__(self, url: str, dimension: int, timeout: float = 30.0):
        import httpx

        self.url = url
        self.dimension = dimension
        self._client = httpx.Client(timeout=timeout)

    def embed(self, text: str) -> np.ndarray:
        import httpx

        last: Exception | None = None
        for _attempt in range(2):
            try:
                resp = self._client.post(self.url, json={"input": text})
                resp.raise_for_status()
                vec = np.asarray(resp.json()["vector"], dtype=np.float64)
                if vec.shape != (self.dimension,):
                    raise GatewayUnavailable(
                        f"embedding dimension {vec.shape} != {self.dimension}")
                norm = float(np.linalg.norm(vec))
                if norm == 0.0:
                    raise GatewayUnavailable("embedding backend returned a zero vector")
                return vec / norm
            except (httpx.HTTPError, KeyError, ValueError) as exc:
                last = exc
        raise GatewayUnavailable(f"embedding backend at {self.url} failed: {last}")
