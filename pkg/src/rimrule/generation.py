"""Failure-driven rule generation.

Each failure case is handled independently: the generator prompt compares
the incorrect trace against the gold trace and proposes one if-then rule,
which must pass a linguistic check (clean if/when-then form, bounded
length) and a predictive check (the agent does better on the same query
with the rule injected). On partial improvement the generator is re-invoked
on the updated trace until the case is corrected, no progress is made, or
the iteration cap is hit.
"""

from __future__ import annotations

import enum
import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .errors import AgentError, GatewayError, MalformedModelOutputError, SchemaError
from .eval_harness import (
    AgentRun,
    Case,
    ToolSpec,
    TraceStep,
    answers_match,
    parse_case,
)
from .model_gateway import extract_json_objects, get_template
from .rule_core import ErrorType, Rule, ToolScope

DEFAULT_MAX_ITERATIONS = 3
DEFAULT_MAX_TOKENS = 120


@dataclass(frozen=True)
class FailureCase:
    """One unit of supervision: query, tools, incorrect trace, gold trace."""

    id: str
    query: str
    tools: tuple[ToolSpec, ...]
    incorrect_trace: tuple[TraceStep, ...]
    gold_trace: tuple[TraceStep, ...]
    gold_answer: str

    def __post_init__(self):
        if not self.incorrect_trace or not self.gold_trace:
            raise ValueError("failure case requires non-empty traces")

    def tool_names(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.tools)

    def as_case(self) -> Case:
        return Case(self.id, self.query, self.tools, self.gold_trace, self.gold_answer)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "query": self.query,
            "tools": [t.to_json() for t in self.tools],
            "incorrect_trace": [s.to_json() for s in self.incorrect_trace],
            "gold_trace": [s.to_json() for s in self.gold_trace],
            "gold_answer": self.gold_answer,
        }

    @classmethod
    def from_json(cls, obj: dict, line: int = 0) -> "FailureCase":
        case = parse_case(obj, line)
        raw = obj.get("incorrect_trace")
        if not isinstance(raw, list) or not raw:
            raise SchemaError(line, "incorrect_trace", "must be a non-empty list")
        return cls(
            id=case.id,
            query=case.query,
            tools=case.tools,
            incorrect_trace=tuple(TraceStep.from_json(s) for s in raw),
            gold_trace=case.gold_trace,
            gold_answer=case.gold_answer,
        )


def load_failures(path: str | Path) -> list[FailureCase]:
    failures = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(line_no, "json", str(exc))
            failures.append(FailureCase.from_json(obj, line_no))
    return failures


def save_failures(failures: Sequence[FailureCase], path: str | Path):
    with Path(path).open("w", encoding="utf-8") as fh:
        for failure in failures:
            fh.write(json.dumps(failure.to_json(), ensure_ascii=False) + "\n")


@dataclass(frozen=True)
class RuleProposal:
    nl_text: str
    error_type: ErrorType
    analysis: str = ""

    def __post_init__(self):
        if not self.nl_text:
            raise ValueError("proposal requires non-empty nl_text")


@dataclass(frozen=True)
class CheckResult:
    passed: bool
    reason: str = ""


class PredictiveOutcome(enum.Enum):
    FULL_FIX = "full_fix"
    PARTIAL = "partial"
    NONE = "none"


@dataclass(frozen=True)
class PredictiveResult:
    outcome: PredictiveOutcome
    run: Optional[AgentRun] = None
    note: str = ""


@dataclass(frozen=True)
class GenerationReport:
    failure_id: str
    accepted: tuple[Rule, ...]
    rejected: tuple[tuple[RuleProposal, str], ...]
    iterations_used: int
    corrected: bool

    def to_json(self) -> dict:
        return {
            "failure_id": self.failure_id,
            "accepted": [r.to_json() for r in self.accepted],
            "rejected": [
                {"nl_text": p.nl_text, "error_type": p.error_type.value, "reason": reason}
                for p, reason in self.rejected
            ],
            "iterations_used": self.iterations_used,
            "corrected": self.corrected,
        }


# ---------------------------------------------------------------------------
# Experience collection
# ---------------------------------------------------------------------------


def collect_failures(cases: Sequence[Case], agent) -> list[FailureCase]:
    """Run the agent zero-shot and keep every case it gets wrong.

    A case fails when the final answer mismatches gold or the run aborted on
    an unrecoverable tool error; agent exceptions are recorded as failures.
    """
    failures: list[FailureCase] = []
    for case in cases:
        try:
            run = agent.run(case.query, case.tools, ())
        except AgentError as exc:
            run = AgentRun(trace=(TraceStep(observation=f"ERROR: {exc}"),), final_answer=None, error=str(exc))
        failed = run.error is not None or not answers_match(run.final_answer, case.gold_answer)
        if not failed:
            continue
        trace = run.trace or (TraceStep(observation=run.error or "no trace recorded"),)
        failures.append(
            FailureCase(
                id=case.id,
                query=case.query,
                tools=case.tools,
                incorrect_trace=trace,
                gold_trace=case.gold_trace,
                gold_answer=case.gold_answer,
            )
        )
    return failures


# ---------------------------------------------------------------------------
# Proposal and checks
# ---------------------------------------------------------------------------


def _trace_text(trace: Sequence[TraceStep]) -> str:
    return json.dumps([s.to_json() for s in trace], ensure_ascii=False, indent=2)


def _generation_prompt(failure: FailureCase, trace: Sequence[TraceStep]) -> str:
    return get_template("rule_generation").render(
        {
            "user_query": failure.query,
            "tool_schema_json": json.dumps(
                [t.to_json() for t in failure.tools], ensure_ascii=False, indent=2
            ),
            "agent_trace": _trace_text(trace),
            "groundtruth_trace": _trace_text(failure.gold_trace),
        }
    )


def propose_rule(
    failure: FailureCase, gateway, trace: Optional[Sequence[TraceStep]] = None
) -> RuleProposal:
    """Ask the generator for exactly one rule for this failure.

    `trace` overrides the incorrect trace on re-invocation, so later rounds
    see the partially improved execution.
    """
    prompt = _generation_prompt(failure, trace if trace is not None else failure.incorrect_trace)
    response = gateway.complete(prompt, tag="rule_generation")
    objects = [obj for obj in extract_json_objects(response) if "new_rule" in obj]
    if not objects:
        raise MalformedModelOutputError("no rule object in generator output", response)
    if len(objects) > 1:
        raise MalformedModelOutputError("generator returned more than one rule", response)
    obj = objects[0]
    nl_text = obj.get("new_rule")
    if not isinstance(nl_text, str) or not nl_text.strip():
        raise MalformedModelOutputError("'new_rule' must be a non-empty string", response)
    try:
        error_type = ErrorType.from_label(str(obj.get("error_type", "")))
    except ValueError as exc:
        raise MalformedModelOutputError(str(exc), response)
    analysis = response.split("{", 1)[0].strip()
    return RuleProposal(nl_text=nl_text.strip(), error_type=error_type, analysis=analysis)


_IF_THEN_RE = re.compile(r"^\s*(if|when)\b.*?\bthen\b", re.IGNORECASE | re.DOTALL)


def linguistic_check(proposal: RuleProposal, max_tokens: int = DEFAULT_MAX_TOKENS) -> CheckResult:
    """Clean if/when-then form and bounded whitespace-token length."""
    if not _IF_THEN_RE.search(proposal.nl_text):
        return CheckResult(False, "missing-if-then")
    if len(proposal.nl_text.split()) > max_tokens:
        return CheckResult(False, "length")
    return CheckResult(True)


def _tool_call_steps(trace: Sequence[TraceStep]) -> list[tuple[str, str]]:
    return [
        (s.tool, json.dumps(s.args or {}, sort_keys=True))
        for s in trace
        if s.tool is not None
    ]


def matching_prefix_length(trace: Sequence[TraceStep], gold: Sequence[TraceStep]) -> int:
    """Leading tool calls (name + canonical args) shared with the gold trace."""
    ours, theirs = _tool_call_steps(trace), _tool_call_steps(gold)
    count = 0
    for a, b in zip(ours, theirs):
        if a != b:
            break
        count += 1
    return count


def predictive_check(
    proposal: RuleProposal,
    failure: FailureCase,
    agent,
    context_rules: Sequence[str] = (),
) -> PredictiveResult:
    """Re-run the agent with the proposal (plus prior accepted rules) injected.

    full_fix: answer now matches gold. partial: the trace matches a strictly
    longer prefix of the gold trace than the recorded failure did.
    """
    injected = tuple(context_rules) + (proposal.nl_text,)
    try:
        run = agent.run(failure.query, failure.tools, injected)
    except AgentError as exc:
        return PredictiveResult(PredictiveOutcome.NONE, note=str(exc))
    if run.error is None and answers_match(run.final_answer, failure.gold_answer):
        return PredictiveResult(PredictiveOutcome.FULL_FIX, run)
    before = matching_prefix_length(failure.incorrect_trace, failure.gold_trace)
    after = matching_prefix_length(run.trace, failure.gold_trace)
    if after > before:
        return PredictiveResult(PredictiveOutcome.PARTIAL, run)
    return PredictiveResult(PredictiveOutcome.NONE, run)


# ---------------------------------------------------------------------------
# Per-failure loop and pool assembly
# ---------------------------------------------------------------------------


def _scope_for(proposal: RuleProposal, failure: FailureCase) -> ToolScope:
    # Tool-use rules start scoped to the tools the gold trace actually calls;
    # decomposition rules are unscoped by invariant.
    if proposal.error_type is ErrorType.DECOMPOSITION:
        return ToolScope.unscoped()
    tools = sorted({s.tool for s in failure.gold_trace if s.tool})
    return ToolScope.of_tools(tools) if tools else ToolScope.unscoped()


def generate_for_failure(
    failure: FailureCase,
    gateway,
    agent,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
    max_tokens: int = DEFAULT_MAX_TOKENS,
) -> GenerationReport:
    """Propose-check loop for one failure case."""
    if max_iterations < 1:
        raise ValueError("max_iterations must be >= 1")

    accepted: list[Rule] = []
    rejected: list[tuple[RuleProposal, str]] = []
    corrected = False
    iterations = 0
    current_trace: Sequence[TraceStep] = failure.incorrect_trace

    while iterations < max_iterations:
        iterations += 1
        try:
            proposal = propose_rule(failure, gateway, trace=current_trace)
        except (MalformedModelOutputError, GatewayError):
            break
        check = linguistic_check(proposal, max_tokens)
        if not check.passed:
            rejected.append((proposal, check.reason))
            break
        result = predictive_check(
            proposal, failure, agent, context_rules=[r.nl_text for r in accepted]
        )
        if result.outcome is PredictiveOutcome.NONE:
            rejected.append((proposal, result.note or "no-improvement"))
            break
        accepted.append(
            Rule.from_nl(
                proposal.nl_text,
                proposal.error_type,
                tool_scope=_scope_for(proposal, failure),
                provenance=(failure.id,),
            )
        )
        if result.outcome is PredictiveOutcome.FULL_FIX:
            corrected = True
            break
        if result.run is not None and result.run.trace:
            current_trace = result.run.trace

    return GenerationReport(
        failure_id=failure.id,
        accepted=tuple(accepted),
        rejected=tuple(rejected),
        iterations_used=iterations,
        corrected=corrected,
    )


def merge_rule_pool(reports: Sequence[GenerationReport]) -> list[Rule]:
    """Deduplicate accepted rules across failures; identical text merges provenance."""
    by_id: dict[str, Rule] = {}
    for report in reports:
        for rule in report.accepted:
            if rule.id in by_id:
                by_id[rule.id] = by_id[rule.id].with_provenance(rule.provenance)
            else:
                by_id[rule.id] = rule
    return [by_id[rule_id] for rule_id in sorted(by_id)]


def generate_rules(
    failures: Sequence[FailureCase],
    gateway,
    agent,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    max_workers: int = 4,
) -> tuple[list[Rule], list[GenerationReport]]:
    """Run the per-failure loop over all failures with a bounded worker pool."""
    if not failures:
        return [], []
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        reports = list(
            pool.map(
                lambda f: generate_for_failure(f, gateway, agent, max_iterations, max_tokens),
                failures,
            )
        )
    return merge_rule_pool(reports), reports
