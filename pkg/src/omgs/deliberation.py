"""Multi-agent tumour-board protocol.

Three phases over pluggable backends:

1. round 0: every role writes an independent initial assessment from its own
   package only;
2. rounds 1..max_rounds: specialists are polled in a fixed order and either
   stay silent or intervene with a declared trigger, a target role and a
   rationale; polling stops after a round with no accepted intervention;
3. the chair arbitrates over the accepted transcript and emits the decision
   summary (final assessment, core treatment strategy, change triggers).

Every message passes a schema check and the citation policy (citations must
resolve to an evidence-bank entry or a case document). Bounced messages are
regenerated with a notice up to the retry budget; messages that still fail
are kept in the transcript flagged ``rejected`` and hidden from later turns.

Transcript messages form a hash chain so a persisted run can be replayed and
checked for tampering without calling any backend.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any

from .backends import AgentBackend, BackendError, GenerationRequest, GenerationResult, Usage
from .canonical import canonical_bytes, content_hash, sha256_hex
from .case_schema import StructuredCase
from .evidence_bank import CorpusSnapshot, Unresolved, resolve_citation
from .role_scoping import (
    DEFAULT_ACCESS_MATRIX,
    SPECIALISTS,
    AccessMatrix,
    Role,
    RolePackage,
    build_role_package,
)

logger = logging.getLogger(__name__)

INITIAL_SCHEMA = "initial-assessment/v1"
TURN_SCHEMA = "deliberation-turn/v1"
SUMMARY_SCHEMA = "decision-summary/v1"


class MessageKind(str, Enum):
    INITIAL_ASSESSMENT = "InitialAssessment"
    INTERVENTION = "Intervention"
    SILENCE = "Silence"
    CHAIR_SUMMARY = "ChairSummary"


class Trigger(str, Enum):
    CONFLICT = "Conflict"
    SAFETY_CONCERN = "SafetyConcern"
    MISSING_INFO = "MissingInfo"
    NEW_EVIDENCE = "NewEvidence"


class Mode(str, Enum):
    OMGS = "omgs"
    CHAIR_R = "chair-r"
    CHAIR_E = "chair-e"
    CHAIR_D = "chair-d"


# --------------------------------------------------------------------------
# output template and decision summary


@dataclass(frozen=True)
class OutputTemplate:
    final_assessment_header: str = "Final Assessment"
    strategy_header: str = "Core Treatment Strategy"
    triggers_header: str = "Change Triggers"
    final_assessment_max_chars: int = 1200
    strategy_max_chars: int = 1500
    trigger_max_chars: int = 400
    max_triggers: int = 8

    def to_dict(self) -> dict[str, Any]:
        return {
            "sections": [
                {"key": "final_assessment", "header": self.final_assessment_header, "max_chars": self.final_assessment_max_chars},
                {"key": "core_treatment_strategy", "header": self.strategy_header, "max_chars": self.strategy_max_chars},
                {
                    "key": "change_triggers",
                    "header": self.triggers_header,
                    "max_chars_each": self.trigger_max_chars,
                    "max_items": self.max_triggers,
                },
            ]
        }


DEFAULT_TEMPLATE = OutputTemplate()


@dataclass(frozen=True)
class Section:
    text: str
    citations: tuple[str, ...]

    def to_dict(self) -> dict[str, Any]:
        return {"text": self.text, "citations": list(self.citations)}


@dataclass(frozen=True)
class ChangeTrigger:
    condition: str
    citations: tuple[str, ...]

    def to_dict(self) -> dict[str, Any]:
        return {"condition": self.condition, "citations": list(self.citations)}


@dataclass(frozen=True)
class DecisionSummary:
    final_assessment: Section
    core_treatment_strategy: Section
    change_triggers: tuple[ChangeTrigger, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "final_assessment": self.final_assessment.to_dict(),
            "core_treatment_strategy": self.core_treatment_strategy.to_dict(),
            "change_triggers": [t.to_dict() for t in self.change_triggers],
        }

    def all_citations(self) -> list[str]:
        ids = list(self.final_assessment.citations) + list(self.core_treatment_strategy.citations)
        for t in self.change_triggers:
            ids.extend(t.citations)
        return ids

    def render_markdown(self, template: OutputTemplate = DEFAULT_TEMPLATE) -> str:
        def cites(ids: Sequence[str]) -> str:
            return " [" + "; ".join(ids) + "]" if ids else ""

        lines = [
            f"## {template.final_assessment_header}",
            self.final_assessment.text + cites(self.final_assessment.citations),
            "",
            f"## {template.strategy_header}",
            self.core_treatment_strategy.text + cites(self.core_treatment_strategy.citations),
            "",
            f"## {template.triggers_header}",
        ]
        lines += [f"- {t.condition}{cites(t.citations)}" for t in self.change_triggers]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Violation:
    code: str
    location: str
    detail: str

    def __str__(self) -> str:
        return f"{self.code} at {self.location}: {self.detail}"

    def to_dict(self) -> dict[str, str]:
        return {"code": self.code, "location": self.location, "detail": self.detail}


def _citation_list(raw: Any, where: str, problems: list[Violation]) -> tuple[str, ...]:
    if raw is None:
        return ()
    if not isinstance(raw, (list, tuple)) or not all(isinstance(c, str) for c in raw):
        problems.append(Violation("schema", where, "citations must be a list of strings"))
        return ()
    return tuple(raw)


def parse_summary(raw: Any) -> tuple[DecisionSummary | None, list[Violation]]:
    problems: list[Violation] = []
    if not isinstance(raw, Mapping):
        return None, [Violation("schema", "summary", "must be an object")]

    def section(key: str) -> Section | None:
        val = raw.get(key)
        if not isinstance(val, Mapping):
            problems.append(Violation("missing", key, "section missing"))
            return None
        text = val.get("text")
        if not isinstance(text, str):
            problems.append(Violation("schema", key, "text must be a string"))
            text = ""
        return Section(text, _citation_list(val.get("citations"), key, problems))

    fa = section("final_assessment")
    cts = section("core_treatment_strategy")
    triggers: list[ChangeTrigger] = []
    raw_triggers = raw.get("change_triggers")
    if raw_triggers is None:
        problems.append(Violation("missing", "change_triggers", "section missing"))
    elif not isinstance(raw_triggers, (list, tuple)):
        problems.append(Violation("schema", "change_triggers", "must be a list"))
    else:
        for i, t in enumerate(raw_triggers):
            where = f"change_triggers[{i}]"
            if not isinstance(t, Mapping) or not isinstance(t.get("condition"), str):
                problems.append(Violation("schema", where, "needs a condition string"))
                continue
            triggers.append(ChangeTrigger(t["condition"], _citation_list(t.get("citations"), where, problems)))
    if fa is None or cts is None or raw_triggers is None or problems:
        return None, problems
    return DecisionSummary(fa, cts, tuple(triggers)), []


def validate_decision_summary(
    y: DecisionSummary,
    snapshot: CorpusSnapshot,
    case: StructuredCase | None,
    template: OutputTemplate = DEFAULT_TEMPLATE,
) -> list[Violation]:
    """Schema, citation and length checks; an empty list means the summary is valid."""
    out: list[Violation] = []

    def check(where: str, text: str, citations: Sequence[str], limit: int) -> None:
        if not text.strip():
            out.append(Violation("empty", where, "text is empty"))
        if len(text) > limit:
            out.append(Violation("length", where, f"{len(text)} chars exceeds limit {limit}"))
        if not citations:
            out.append(Violation("uncited", where, "at least one citation required"))
        for cid in citations:
            if isinstance(resolve_citation(cid, snapshot, case), Unresolved):
                out.append(Violation("unresolved", where, cid))

    check("final_assessment", y.final_assessment.text, y.final_assessment.citations, template.final_assessment_max_chars)
    check(
        "core_treatment_strategy",
        y.core_treatment_strategy.text,
        y.core_treatment_strategy.citations,
        template.strategy_max_chars,
    )
    if not y.change_triggers:
        out.append(Violation("empty", "change_triggers", "at least one change trigger required"))
    if len(y.change_triggers) > template.max_triggers:
        out.append(Violation("length", "change_triggers", f"{len(y.change_triggers)} items exceeds {template.max_triggers}"))
    for i, t in enumerate(y.change_triggers):
        check(f"change_triggers[{i}]", t.condition, t.citations, template.trigger_max_chars)
    return out


# --------------------------------------------------------------------------
# messages, transcript, usage


@dataclass(frozen=True)
class AgentMessage:
    seq: int
    kind: MessageKind
    role: Role
    round: int
    content: Mapping[str, Any]
    citations: tuple[str, ...]
    status: str = "accepted"
    attempts: int = 1
    notices: tuple[Mapping[str, Any], ...] = ()
    digest: str = ""

    @property
    def accepted(self) -> bool:
        return self.status == "accepted"

    def body(self) -> dict[str, Any]:
        return {
            "seq": self.seq,
            "kind": self.kind.value,
            "role": self.role.value,
            "round": self.round,
            "status": self.status,
            "attempts": self.attempts,
            "content": dict(self.content),
            "citations": list(self.citations),
            "notices": [dict(n) for n in self.notices],
        }

    def to_dict(self) -> dict[str, Any]:
        return self.body() | {"digest": self.digest}

    def view(self) -> dict[str, Any]:
        """What other agents see of this message."""
        return {
            "kind": self.kind.value,
            "role": self.role.value,
            "round": self.round,
            "content": dict(self.content),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> AgentMessage:
        return cls(
            seq=int(d["seq"]),
            kind=MessageKind(d["kind"]),
            role=Role(d["role"]),
            round=int(d["round"]),
            content=d["content"],
            citations=tuple(d.get("citations", ())),
            status=d.get("status", "accepted"),
            attempts=int(d.get("attempts", 1)),
            notices=tuple(d.get("notices", ())),
            digest=d.get("digest", ""),
        )


def chain_digest(prev: str, message: AgentMessage) -> str:
    return sha256_hex(prev.encode("ascii") + canonical_bytes(message.body()))


@dataclass(frozen=True)
class Transcript:
    case_id: str
    config: Mapping[str, Any]
    config_hash: str
    snapshot_id: str
    backend_id: str
    messages: tuple[AgentMessage, ...] = ()

    @property
    def genesis(self) -> str:
        return content_hash(
            {
                "case_id": self.case_id,
                "config_hash": self.config_hash,
                "snapshot_id": self.snapshot_id,
                "backend_id": self.backend_id,
            }
        )

    @property
    def head(self) -> str:
        return self.messages[-1].digest if self.messages else self.genesis

    def append(self, message: AgentMessage) -> Transcript:
        msg = replace(message, seq=len(self.messages), digest="")
        msg = replace(msg, digest=chain_digest(self.head, msg))
        return replace(self, messages=self.messages + (msg,))

    def accepted_view(self) -> list[dict[str, Any]]:
        return [m.view() for m in self.messages if m.accepted]

    def verify_chain(self) -> list[int]:
        """Sequence numbers whose stored digest does not match the chain."""
        bad = []
        prev = self.genesis
        for i, m in enumerate(self.messages):
            expected = chain_digest(prev, replace(m, digest=""))
            if m.seq != i or m.digest != expected:
                bad.append(i)
            prev = m.digest
        return bad

    def to_jsonl(self) -> str:
        import json

        return "".join(json.dumps(m.to_dict(), sort_keys=True, ensure_ascii=False) + "\n" for m in self.messages)

    def header(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "config": dict(self.config),
            "config_hash": self.config_hash,
            "snapshot_id": self.snapshot_id,
            "backend_id": self.backend_id,
            "transcript_head": self.head,
            "message_count": len(self.messages),
        }


@dataclass(frozen=True)
class UsageRecord:
    role: str
    schema_id: str
    round: int
    attempt: int
    usage: Usage

    def to_dict(self) -> dict[str, Any]:
        return {
            "role": self.role,
            "schema_id": self.schema_id,
            "round": self.round,
            "attempt": self.attempt,
        } | self.usage.to_dict()


@dataclass
class UsageLedger:
    records: list[UsageRecord] = field(default_factory=list)

    def add(self, record: UsageRecord) -> None:
        self.records.append(record)

    @property
    def prompt_tokens(self) -> int:
        return sum(r.usage.prompt_tokens for r in self.records)

    @property
    def completion_tokens(self) -> int:
        return sum(r.usage.completion_tokens for r in self.records)

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    @property
    def wall_ms(self) -> int:
        return sum(r.usage.wall_ms for r in self.records)

    def totals(self) -> dict[str, int]:
        return {
            "calls": len(self.records),
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "total_tokens": self.total_tokens,
            "wall_ms": self.wall_ms,
        }

    def to_dict(self) -> dict[str, Any]:
        return {"records": [r.to_dict() for r in self.records], "totals": self.totals()}


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class DeliberationConfig:
    max_rounds: int = 3
    polling_order: tuple[Role, ...] = SPECIALISTS
    citation_retry_budget: int = 2
    mode: Mode = Mode.OMGS
    k: int = 10
    chair_initial_assessment: bool = True
    backend_retries: int = 2
    parallel_initial: bool = False
    template: OutputTemplate = DEFAULT_TEMPLATE

    def __post_init__(self) -> None:
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if sorted(r.value for r in self.polling_order) != sorted(r.value for r in SPECIALISTS):
            raise ValueError("polling_order must be a permutation of the four specialist roles")
        if self.citation_retry_budget < 0 or self.backend_retries < 0:
            raise ValueError("retry budgets must be nonnegative")

    def to_dict(self) -> dict[str, Any]:
        return {
            "max_rounds": self.max_rounds,
            "polling_order": [r.value for r in self.polling_order],
            "citation_retry_budget": self.citation_retry_budget,
            "mode": self.mode.value,
            "k": self.k,
            "chair_initial_assessment": self.chair_initial_assessment,
            "backend_retries": self.backend_retries,
            "parallel_initial": self.parallel_initial,
            "template": self.template.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> DeliberationConfig:
        kwargs: dict[str, Any] = {}
        for key in ("max_rounds", "citation_retry_budget", "k", "backend_retries"):
            if key in d:
                kwargs[key] = int(d[key])
        for key in ("chair_initial_assessment", "parallel_initial"):
            if key in d:
                kwargs[key] = bool(d[key])
        if "polling_order" in d:
            kwargs["polling_order"] = tuple(Role(r) for r in d["polling_order"])
        if "mode" in d:
            kwargs["mode"] = Mode(d["mode"])
        if "template" in d:
            s = {sec["key"]: sec for sec in d["template"]["sections"]}
            kwargs["template"] = OutputTemplate(
                final_assessment_header=s["final_assessment"]["header"],
                strategy_header=s["core_treatment_strategy"]["header"],
                triggers_header=s["change_triggers"]["header"],
                final_assessment_max_chars=s["final_assessment"]["max_chars"],
                strategy_max_chars=s["core_treatment_strategy"]["max_chars"],
                trigger_max_chars=s["change_triggers"]["max_chars_each"],
                max_triggers=s["change_triggers"]["max_items"],
            )
        return cls(**kwargs)

    def config_hash(self) -> str:
        return sha256_hex(canonical_bytes(self.to_dict()))


# --------------------------------------------------------------------------
# errors


class CaseFailure(RuntimeError):
    """A case could not complete; the partial transcript and ledger are attached."""

    def __init__(self, stage: str, reason: str, transcript: Transcript, ledger: UsageLedger) -> None:
        super().__init__(f"{stage}: {reason}")
        self.stage = stage
        self.reason = reason
        self.transcript = transcript
        self.ledger = ledger

    def to_dict(self) -> dict[str, Any]:
        return {
            "status": "failed",
            "stage": self.stage,
            "reason": self.reason,
            "case_id": self.transcript.case_id,
            "messages_persisted": len(self.transcript.messages),
        }


class ReplayError(RuntimeError):
    pass


class ReplayRefused(ReplayError):
    def __init__(self, diff: Mapping[str, tuple[Any, Any]]) -> None:
        fields = ", ".join(sorted(diff))
        super().__init__(f"config hash mismatch; differing fields: {fields}")
        self.diff = dict(diff)


class TamperError(ReplayError):
    def __init__(self, seqs: Sequence[int]) -> None:
        super().__init__(f"transcript hash chain broken at messages {list(seqs)}")
        self.seqs = list(seqs)


# --------------------------------------------------------------------------
# citation policy


def message_citations(kind: MessageKind, content: Mapping[str, Any]) -> tuple[str, ...]:
    if kind is MessageKind.CHAIR_SUMMARY:
        ids: list[str] = []
        for key in ("final_assessment", "core_treatment_strategy"):
            sec = content.get(key)
            if isinstance(sec, Mapping):
                ids.extend(c for c in sec.get("citations") or () if isinstance(c, str))
        for t in content.get("change_triggers") or ():
            if isinstance(t, Mapping):
                ids.extend(c for c in t.get("citations") or () if isinstance(c, str))
        return tuple(ids)
    raw = content.get("citations") or ()
    return tuple(c for c in raw if isinstance(c, str)) if isinstance(raw, (list, tuple)) else ()


def unresolved_citations(ids: Sequence[str], snapshot: CorpusSnapshot, case: StructuredCase | None) -> tuple[str, ...]:
    out: list[str] = []
    for cid in ids:
        if isinstance(resolve_citation(cid, snapshot, case), Unresolved) and cid not in out:
            out.append(cid)
    return tuple(out)


@dataclass(frozen=True)
class Accepted:
    message: Mapping[str, Any]
    attempts: int
    notices: tuple[Mapping[str, Any], ...] = ()


@dataclass(frozen=True)
class Rejection:
    message: Any
    offending_ids: tuple[str, ...]
    violations: tuple[str, ...]
    attempts: int
    notices: tuple[Mapping[str, Any], ...] = ()


def enforce_citation_policy(
    message: Any,
    snapshot: CorpusSnapshot,
    case: StructuredCase | None,
    budget: int = 2,
    regenerate: Callable[[Mapping[str, Any]], Any] | None = None,
    schema_check: Callable[[Any], list[str]] | None = None,
) -> Accepted | Rejection:
    """Accept ``message`` iff it is well formed and every citation resolves.

    On a violation a notice (unresolved ids, schema problems) is passed to
    ``regenerate`` for a new message, at most ``budget`` times.
    """
    attempts = 1
    notices: list[Mapping[str, Any]] = []
    while True:
        violations = list(schema_check(message)) if schema_check else []
        if not isinstance(message, Mapping):
            violations.append("message must be an object")
        unresolved: tuple[str, ...] = ()
        if isinstance(message, Mapping):
            kind = _kind_of(message)
            unresolved = unresolved_citations(message_citations(kind, message), snapshot, case)
        if not violations and not unresolved:
            return Accepted(message, attempts, tuple(notices))
        notice = {
            "attempt": attempts,
            "unresolved_citations": list(unresolved),
            "violations": violations,
            "policy": "citations must be evidence-bank entry ids or case document ids",
        }
        notices.append(notice)
        if attempts > budget or regenerate is None:
            return Rejection(message, unresolved, tuple(violations), attempts, tuple(notices))
        message = regenerate(notice)
        attempts += 1


def _kind_of(message: Mapping[str, Any]) -> MessageKind:
    if "final_assessment" in message or "change_triggers" in message:
        return MessageKind.CHAIR_SUMMARY
    try:
        return MessageKind(message.get("kind", MessageKind.INITIAL_ASSESSMENT.value))
    except ValueError:
        return MessageKind.INITIAL_ASSESSMENT


# --------------------------------------------------------------------------
# per-kind schema checks


def _nonempty_text(value: Any) -> bool:
    if isinstance(value, str):
        return bool(value.strip())
    if isinstance(value, (list, tuple)):
        return all(isinstance(v, str) for v in value)
    return False


def check_initial(message: Any) -> list[str]:
    if not isinstance(message, Mapping):
        return ["message must be an object"]
    problems = []
    if message.get("kind", "InitialAssessment") != "InitialAssessment":
        problems.append("kind must be InitialAssessment")
    if not isinstance(message.get("assessment"), str) or not message["assessment"].strip():
        problems.append("assessment must be a nonempty string")
    for key in ("safety_considerations", "uncertainties"):
        if key not in message or not _nonempty_text(message[key]):
            problems.append(f"{key} must be text or a list of strings")
    cites = message.get("citations", [])
    if not isinstance(cites, list) or not all(isinstance(c, str) for c in cites):
        problems.append("citations must be a list of strings")
    return problems


def check_turn(role: Role) -> Callable[[Any], list[str]]:
    def check(message: Any) -> list[str]:
        if not isinstance(message, Mapping):
            return ["message must be an object"]
        kind = message.get("kind")
        if kind == "Silence":
            return []
        if kind != "Intervention":
            return ["kind must be Silence or Intervention"]
        problems = []
        if message.get("trigger") not in {t.value for t in Trigger}:
            problems.append(f"trigger must be one of {[t.value for t in Trigger]}")
        target = message.get("directed_to")
        if target not in {r.value for r in Role} or target == role.value:
            problems.append("directed_to must name another role")
        if not isinstance(message.get("rationale"), str) or not message["rationale"].strip():
            problems.append("rationale must be a nonempty string")
        if not isinstance(message.get("content"), str) or not message["content"].strip():
            problems.append("content must be a nonempty string")
        cites = message.get("citations", [])
        if not isinstance(cites, list) or not all(isinstance(c, str) for c in cites):
            problems.append("citations must be a list of strings")
        return problems

    return check


def check_summary(snapshot: CorpusSnapshot, case: StructuredCase | None, template: OutputTemplate) -> Callable[[Any], list[str]]:
    def check(message: Any) -> list[str]:
        y, problems = parse_summary(message)
        if y is None:
            return [str(p) for p in problems]
        # unresolved ids are reported by the citation policy itself
        return [str(v) for v in validate_decision_summary(y, snapshot, case, template) if v.code != "unresolved"]

    return check


# --------------------------------------------------------------------------
# protocol driver


INITIAL_INSTRUCTION = (
    "Give your independent, role-specific assessment and recommendation. State safety "
    "considerations, key uncertainties and supporting references. Cite only evidence-bank "
    "entry ids or patient document ids from your package."
)
TURN_INSTRUCTION = (
    "Stay silent unless a predefined condition holds: inter-role conflict, safety concern, "
    "missing critical information, or newly identified decision-relevant evidence. If you "
    "intervene, declare the trigger, the role you address and your rationale."
)
CHAIR_INSTRUCTION = (
    "Reconcile the specialists' positions and write the MDT decision summary: final "
    "assessment, core treatment strategy and change triggers, each with citations."
)
CHAIR_BASELINE_INSTRUCTION = (
    "Acting alone as the MDT chair, write the MDT decision summary: final assessment, core "
    "treatment strategy and change triggers, each with citations."
)


@dataclass
class _Driver:
    case: StructuredCase
    snapshot: CorpusSnapshot
    backends: Mapping[Role, AgentBackend]
    config: DeliberationConfig
    transcript: Transcript
    ledger: UsageLedger = field(default_factory=UsageLedger)

    def call(self, role: Role, request: GenerationRequest, round_idx: int, attempt: int) -> GenerationResult:
        backend = self.backends[role]
        for tries in range(self.config.backend_retries + 1):
            try:
                result = backend.generate(request)
                break
            except BackendError as exc:
                if not exc.retryable or tries == self.config.backend_retries:
                    raise CaseFailure(
                        f"generate:{role.value}:{request.schema_id}", str(exc), self.transcript, self.ledger
                    ) from exc
                logger.warning("retrying %s after backend error: %s", role.value, exc)
        self.ledger.add(UsageRecord(role.value, request.schema_id, round_idx, attempt, result.usage))
        return result

    def negotiate(
        self,
        role: Role,
        request: GenerationRequest,
        round_idx: int,
        schema_check: Callable[[Any], list[str]],
    ) -> Accepted | Rejection:
        attempt = 1
        first = self.call(role, request, round_idx, attempt).message
        notices: list[Mapping[str, Any]] = []

        def regenerate(notice: Mapping[str, Any]) -> Any:
            nonlocal attempt
            attempt += 1
            notices.append(notice)
            retry = GenerationRequest(
                request.role,
                request.instruction,
                dict(request.context) | {"policy_notices": list(notices)},
                request.schema_id,
            )
            return self.call(role, retry, round_idx, attempt).message

        return enforce_citation_policy(
            first, self.snapshot, self.case, self.config.citation_retry_budget, regenerate, schema_check
        )

    def record(self, role: Role, round_idx: int, kind: MessageKind, outcome: Accepted | Rejection) -> AgentMessage:
        raw = outcome.message if isinstance(outcome.message, Mapping) else {"raw": outcome.message}
        content = {k: v for k, v in raw.items() if k != "kind"}
        if isinstance(outcome, Accepted) and kind is not MessageKind.CHAIR_SUMMARY:
            kind = MessageKind(raw.get("kind", kind.value))
        msg = AgentMessage(
            seq=0,
            kind=kind,
            role=role,
            round=round_idx,
            content=content,
            citations=message_citations(kind, raw),
            status="accepted" if isinstance(outcome, Accepted) else "rejected",
            attempts=outcome.attempts,
            notices=outcome.notices,
        )
        self.transcript = self.transcript.append(msg)
        return self.transcript.messages[-1]


def initial_roles(config: DeliberationConfig) -> tuple[Role, ...]:
    lead = (Role.CHAIR,) if config.chair_initial_assessment else ()
    return lead + SPECIALISTS


def run_initial_round(
    driver: _Driver, packages: Mapping[Role, RolePackage]
) -> list[AgentMessage]:
    """Round 0: each role sees only its own package and an empty transcript."""
    roles = initial_roles(driver.config)
    snap_ids = {packages[r].snapshot_id for r in roles}
    if snap_ids != {driver.snapshot.snapshot_id}:
        raise ValueError("all packages must be built against the run's snapshot")

    def request_for(role: Role) -> GenerationRequest:
        return GenerationRequest(
            role.value,
            INITIAL_INSTRUCTION,
            {"package": packages[role].to_dict(driver.snapshot), "transcript": []},
            INITIAL_SCHEMA,
        )

    requests = {role: request_for(role) for role in roles}
    if driver.config.parallel_initial:
        # generation only; ledger and transcript writes stay on this thread
        outcomes = _parallel_initial(driver, requests)
    else:
        outcomes = {role: driver.negotiate(role, requests[role], 0, check_initial) for role in roles}
    return [driver.record(role, 0, MessageKind.INITIAL_ASSESSMENT, outcomes[role]) for role in roles]


def _parallel_initial(driver: _Driver, requests: Mapping[Role, GenerationRequest]) -> dict[Role, Accepted | Rejection]:
    ledgers = {role: UsageLedger() for role in requests}

    def work(role: Role) -> Accepted | Rejection:
        sub = _Driver(driver.case, driver.snapshot, driver.backends, driver.config, driver.transcript, ledgers[role])
        return sub.negotiate(role, requests[role], 0, check_initial)

    with ThreadPoolExecutor(max_workers=len(requests)) as pool:
        futures = {role: pool.submit(work, role) for role in requests}
        results = {}
        for role in requests:
            try:
                results[role] = futures[role].result()
            finally:
                driver.ledger.records.extend(ledgers[role].records)
    return results


def run_deliberation_rounds(driver: _Driver, packages: Mapping[Role, RolePackage]) -> None:
    """Rounds 1..max_rounds of trigger-gated interventions."""
    for round_idx in range(1, driver.config.max_rounds + 1):
        intervened = False
        for role in driver.config.polling_order:
            request = GenerationRequest(
                role.value,
                TURN_INSTRUCTION,
                {
                    "package": packages[role].to_dict(driver.snapshot),
                    "transcript": driver.transcript.accepted_view(),
                    "round": round_idx,
                    "triggers": [t.value for t in Trigger],
                },
                TURN_SCHEMA,
            )
            outcome = driver.negotiate(role, request, round_idx, check_turn(role))
            msg = driver.record(role, round_idx, MessageKind.INTERVENTION, outcome)
            if msg.accepted and msg.kind is MessageKind.INTERVENTION:
                intervened = True
        if not intervened:
            break


def chair_arbitrate(
    driver: _Driver, chair_context: Mapping[str, Any], instruction: str = CHAIR_INSTRUCTION
) -> DecisionSummary:
    """Final synthesis; the chair sees its context plus the accepted transcript."""
    rounds = [m.round for m in driver.transcript.messages]
    round_idx = max(rounds) if rounds else 0
    context = dict(chair_context) | {
        "transcript": driver.transcript.accepted_view(),
        "template": driver.config.template.to_dict(),
    }
    request = GenerationRequest(Role.CHAIR.value, instruction, context, SUMMARY_SCHEMA)
    check = check_summary(driver.snapshot, driver.case, driver.config.template)
    outcome = driver.negotiate(Role.CHAIR, request, round_idx, check)
    driver.record(Role.CHAIR, round_idx, MessageKind.CHAIR_SUMMARY, outcome)
    if isinstance(outcome, Rejection):
        detail = "; ".join(list(outcome.violations) + [f"unresolved {i}" for i in outcome.offending_ids])
        raise CaseFailure("chair_arbitrate", f"summary rejected after {outcome.attempts} attempts: {detail}", driver.transcript, driver.ledger)
    y, _ = parse_summary(outcome.message)
    assert y is not None
    return y


def mode_context(
    case: StructuredCase,
    snapshot: CorpusSnapshot,
    mode: Mode,
    k: int = 10,
    matrix: AccessMatrix = DEFAULT_ACCESS_MATRIX,
) -> dict[str, Any]:
    """Chair-baseline inputs; each richer mode only adds keys to the previous one."""
    context: dict[str, Any] = {"case": case.to_dict()}
    if mode in (Mode.CHAIR_E, Mode.CHAIR_D):
        package = build_role_package(case, Role.CHAIR, matrix, snapshot, k)
        context["evidence"] = package.to_dict(snapshot)["evidence"]
    if mode is Mode.CHAIR_D:
        context["dossier"] = [d.index_entry() | {"body": d.body} for d in case.documents]
    return context


@dataclass(frozen=True)
class RunResult:
    transcript: Transcript
    summary: DecisionSummary
    ledger: UsageLedger


def _backend_map(backends: AgentBackend | Mapping[Role, AgentBackend]) -> dict[Role, AgentBackend]:
    if isinstance(backends, Mapping):
        missing = [r.value for r in Role if r not in backends]
        if missing:
            raise ValueError(f"no backend for roles {missing}")
        return dict(backends)
    return {r: backends for r in Role}


def backend_id_of(backends: Mapping[Role, AgentBackend]) -> str:
    ids = sorted({b.backend_id for b in backends.values()})
    return ids[0] if len(ids) == 1 else "+".join(ids)


def run_case(
    case: StructuredCase,
    snapshot: CorpusSnapshot,
    backends: AgentBackend | Mapping[Role, AgentBackend],
    config: DeliberationConfig = DeliberationConfig(),
    matrix: AccessMatrix = DEFAULT_ACCESS_MATRIX,
) -> RunResult:
    """Run one case in the configured mode. Raises :class:`CaseFailure` with the partial transcript."""
    bmap = _backend_map(backends)
    transcript = Transcript(
        case_id=case.case_id,
        config=config.to_dict(),
        config_hash=config.config_hash(),
        snapshot_id=snapshot.snapshot_id,
        backend_id=backend_id_of(bmap),
    )
    driver = _Driver(case, snapshot, bmap, config, transcript)
    if config.mode is Mode.OMGS:
        packages = {role: build_role_package(case, role, matrix, snapshot, config.k) for role in Role}
        run_initial_round(driver, packages)
        run_deliberation_rounds(driver, packages)
        chair_ctx = {"package": packages[Role.CHAIR].to_dict(snapshot)}
        summary = chair_arbitrate(driver, chair_ctx)
    else:
        ctx = mode_context(case, snapshot, config.mode, config.k, matrix)
        summary = chair_arbitrate(driver, ctx, CHAIR_BASELINE_INSTRUCTION)
    return RunResult(driver.transcript, summary, driver.ledger)


def replay_transcript(
    transcript: Transcript,
    config: DeliberationConfig,
    snapshot: CorpusSnapshot | None = None,
    case: StructuredCase | None = None,
    expected_head: str | None = None,
) -> DecisionSummary:
    """Re-derive the decision summary from persisted messages, without any backend call.

    Refuses when the config differs from the recorded one; raises
    :class:`TamperError` when the hash chain (or ``expected_head``) does not
    match; validates the summary when ``snapshot`` is supplied.
    """
    if transcript.config_hash != config.config_hash():
        current = config.to_dict()
        diff = {
            k: (transcript.config.get(k), current.get(k))
            for k in set(current) | set(transcript.config)
            if transcript.config.get(k) != current.get(k)
        }
        raise ReplayRefused(diff)
    bad = transcript.verify_chain()
    if bad:
        raise TamperError(bad)
    if expected_head is not None and transcript.head != expected_head:
        raise TamperError([len(transcript.messages) - 1])
    finals = [m for m in transcript.messages if m.kind is MessageKind.CHAIR_SUMMARY]
    if not finals or not finals[-1].accepted or finals[-1] is not transcript.messages[-1]:
        raise ReplayError("transcript does not end with an accepted chair summary")
    y, problems = parse_summary(finals[-1].content)
    if y is None:
        raise ReplayError("; ".join(str(p) for p in problems))
    if snapshot is not None:
        violations = validate_decision_summary(y, snapshot, case, config.template)
        if violations:
            raise ReplayError("; ".join(str(v) for v in violations))
    return y
