"""Dataset ingestion, split construction, agents, and accuracy accounting.

Datasets are JSON lines, one case per line:

    {"id": str, "query": str,
     "tools": [{"name": str, "description": str, "parameters": {...}, "category": str?}],
     "gold_trace": [{"thought": str?, "tool": str?, "args": {...}?, "observation": str?}],
     "gold_answer": str,
     "incorrect_trace": [...]?}          # present only in failure exports

The agent contract is run(query, tools, injected_rules) -> AgentRun. The
mock agent is fully scripted and deterministic; the HTTP agent drives a
ReAct loop through the model gateway and retries tool calls on error
feedback up to a per-call cap.
"""

from __future__ import annotations

import json
import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

from .errors import AgentError, InfeasibleSplitError, MalformedModelOutputError, SchemaError
from .model_gateway import extract_json

DEFAULT_STEP_CAP = 15
DEFAULT_RETRY_CAP = 2


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str = ""
    parameters: dict = field(default_factory=dict)
    category: Optional[str] = None

    def to_json(self) -> dict:
        obj = {"name": self.name, "description": self.description, "parameters": self.parameters}
        if self.category:
            obj["category"] = self.category
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "ToolSpec":
        return cls(
            name=obj["name"],
            description=obj.get("description", ""),
            parameters=obj.get("parameters", {}),
            category=obj.get("category"),
        )


@dataclass(frozen=True)
class TraceStep:
    thought: Optional[str] = None
    tool: Optional[str] = None
    args: Optional[dict] = None
    observation: Optional[str] = None

    def to_json(self) -> dict:
        obj: dict = {}
        if self.thought is not None:
            obj["thought"] = self.thought
        if self.tool is not None:
            obj["tool"] = self.tool
        if self.args is not None:
            obj["args"] = self.args
        if self.observation is not None:
            obj["observation"] = self.observation
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "TraceStep":
        return cls(
            thought=obj.get("thought"),
            tool=obj.get("tool"),
            args=obj.get("args"),
            observation=obj.get("observation"),
        )


@dataclass(frozen=True)
class Case:
    """One evaluation case with gold data; the agent trace is absent until run."""

    id: str
    query: str
    tools: tuple[ToolSpec, ...]
    gold_trace: tuple[TraceStep, ...]
    gold_answer: str

    def tool_names(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.tools)


@dataclass(frozen=True)
class Dataset:
    name: str
    cases: tuple[Case, ...]

    def __len__(self) -> int:
        return len(self.cases)

    def case_by_id(self, case_id: str) -> Case:
        for case in self.cases:
            if case.id == case_id:
                return case
        raise KeyError(case_id)


def _require(obj: dict, key: str, line: int):
    if key not in obj or obj[key] in (None, ""):
        raise SchemaError(line, key, "missing or empty")
    return obj[key]


def parse_case(obj: dict, line: int = 0) -> Case:
    case_id = _require(obj, "id", line)
    query = _require(obj, "query", line)
    tools_raw = _require(obj, "tools", line)
    gold_trace_raw = _require(obj, "gold_trace", line)
    gold_answer = _require(obj, "gold_answer", line)
    if not isinstance(tools_raw, list) or not tools_raw:
        raise SchemaError(line, "tools", "must be a non-empty list")
    if not isinstance(gold_trace_raw, list) or not gold_trace_raw:
        raise SchemaError(line, "gold_trace", "must be a non-empty list")
    try:
        tools = tuple(ToolSpec.from_json(t) for t in tools_raw)
    except (KeyError, TypeError) as exc:
        raise SchemaError(line, "tools", str(exc))
    trace = tuple(TraceStep.from_json(s) for s in gold_trace_raw)
    return Case(id=case_id, query=query, tools=tools, gold_trace=trace, gold_answer=str(gold_answer))


def load_dataset(path: str | Path, name: Optional[str] = None) -> Dataset:
    """Load and validate a JSONL dataset; the first bad line raises SchemaError."""
    path = Path(path)
    cases: list[Case] = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(line_no, "json", str(exc))
            case = parse_case(obj, line_no)
            if case.id in seen:
                raise SchemaError(line_no, "id", f"duplicate case id {case.id!r}")
            seen.add(case.id)
            cases.append(case)
    return Dataset(name=name or path.stem, cases=tuple(cases))


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train_ids: tuple[str, ...]
    test_rand_ids: tuple[str, ...]
    test_unseen_ids: tuple[str, ...]
    held_out_tools: tuple[str, ...]
    seed: int

    def to_json(self) -> dict:
        return {
            "train_ids": list(self.train_ids),
            "test_rand_ids": list(self.test_rand_ids),
            "test_unseen_ids": list(self.test_unseen_ids),
            "held_out_tools": list(self.held_out_tools),
            "seed": self.seed,
        }


def make_splits(
    dataset: Dataset,
    rand_fraction: float,
    unseen_tool_fraction: float,
    seed: int,
) -> SplitSpec:
    """Split into train / test-rand / test-unseen.

    Held-out tools are a seeded sample of the tool universe; every case that
    touches one goes to test-unseen, and test-rand is a seeded sample of the
    remainder, so train never touches a held-out tool.
    """
    if not 0 < rand_fraction < 1:
        raise ValueError("rand_fraction must be in (0,1)")
    if not 0 < unseen_tool_fraction < 1:
        raise ValueError("unseen_tool_fraction must be in (0,1)")
    if not dataset.cases:
        raise InfeasibleSplitError("dataset is empty")

    tool_universe = sorted({name for case in dataset.cases for name in case.tool_names()})
    rng = random.Random(seed)
    held_count = max(1, int(round(unseen_tool_fraction * len(tool_universe))))
    if held_count >= len(tool_universe):
        raise InfeasibleSplitError("held-out tool sample covers the whole tool universe")
    held = set(rng.sample(tool_universe, held_count))

    unseen = [c.id for c in dataset.cases if set(c.tool_names()) & held]
    pool = [c.id for c in dataset.cases if not set(c.tool_names()) & held]
    if not pool:
        raise InfeasibleSplitError("every case touches a held-out tool")

    rng.shuffle(pool)
    rand_count = int(round(rand_fraction * len(pool)))
    test_rand = sorted(pool[:rand_count])
    train = sorted(pool[rand_count:])
    return SplitSpec(
        train_ids=tuple(train),
        test_rand_ids=tuple(test_rand),
        test_unseen_ids=tuple(sorted(unseen)),
        held_out_tools=tuple(sorted(held)),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Agents
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AgentRun:
    trace: tuple[TraceStep, ...]
    final_answer: Optional[str]
    error: Optional[str] = None


@dataclass(frozen=True)
class ScriptedOutcome:
    answer: Optional[str]
    trace: tuple[TraceStep, ...] = ()
    error: Optional[str] = None


@dataclass(frozen=True)
class RuleTrigger:
    contains: tuple[str, ...]
    outcome: ScriptedOutcome


@dataclass(frozen=True)
class CaseScript:
    base: ScriptedOutcome
    triggers: tuple[RuleTrigger, ...] = ()


def _outcome_from_json(obj: dict) -> ScriptedOutcome:
    return ScriptedOutcome(
        answer=obj.get("answer"),
        trace=tuple(TraceStep.from_json(s) for s in obj.get("trace", ())),
        error=obj.get("error"),
    )


class MockAgent:
    """Deterministic agent scripted per query.

    A trigger fires when all its substrings occur in the joined injected rule
    text; the first firing trigger wins, otherwise the base outcome applies.
    """

    def __init__(self, script: dict[str, CaseScript]):
        self.script = script

    @classmethod
    def from_script(cls, obj: dict) -> "MockAgent":
        script = {}
        for query, entry in obj.items():
            triggers = tuple(
                RuleTrigger(
                    contains=tuple(t["contains"]),
                    outcome=_outcome_from_json(t),
                )
                for t in entry.get("triggers", ())
            )
            script[query] = CaseScript(base=_outcome_from_json(entry["base"]), triggers=triggers)
        return cls(script)

    def run(
        self,
        query: str,
        tools: Sequence[ToolSpec],
        injected_rules: Sequence[str] = (),
    ) -> AgentRun:
        entry = self.script.get(query)
        if entry is None:
            raise AgentError(f"no scripted behavior for query: {query!r}")
        joined = "\n".join(injected_rules)
        outcome = entry.base
        for trigger in entry.triggers:
            if all(needle in joined for needle in trigger.contains):
                outcome = trigger.outcome
                break
        return AgentRun(trace=outcome.trace, final_answer=outcome.answer, error=outcome.error)


_REACT_INSTRUCTIONS = """You are a tool-using agent. Solve the user task step by step.
At each step respond with ONE JSON object, either
{"thought": "...", "tool": "<tool name>", "args": {...}}
to call a tool, or
{"thought": "...", "final_answer": "..."}
to finish."""


class LlmReActAgent:
    """ReAct-style loop over the model gateway with retry on tool errors.

    Tool calls are executed through the supplied executor. An error
    observation is fed back so the model can retry; after `retry_cap` failed
    attempts of the same call the run aborts as unrecoverable.
    """

    def __init__(
        self,
        gateway,
        tool_executor: Callable[[str, dict], str],
        step_cap: int = DEFAULT_STEP_CAP,
        retry_cap: int = DEFAULT_RETRY_CAP,
    ):
        self.gateway = gateway
        self.tool_executor = tool_executor
        self.step_cap = step_cap
        self.retry_cap = retry_cap

    def run(
        self,
        query: str,
        tools: Sequence[ToolSpec],
        injected_rules: Sequence[str] = (),
    ) -> AgentRun:
        system = _REACT_INSTRUCTIONS
        if injected_rules:
            from .retrieval import injection_block

            system = injection_block(injected_rules) + "\n" + system
        tool_lines = "\n".join(
            f"- {t.name}: {t.description} {json.dumps(t.parameters, ensure_ascii=False)}"
            for t in tools
        )
        transcript = f"{system}\n\nAvailable tools:\n{tool_lines}\n\nTask: {query}\n"

        steps: list[TraceStep] = []
        error_counts: dict[str, int] = {}
        for _ in range(self.step_cap):
            response = self.gateway.complete(transcript, tag="react_step")
            try:
                move = extract_json(response)
            except MalformedModelOutputError:
                return AgentRun(tuple(steps), None, error="unparseable agent step")
            thought = move.get("thought")
            if "final_answer" in move:
                steps.append(TraceStep(thought=thought))
                return AgentRun(tuple(steps), str(move["final_answer"]))
            tool_name = move.get("tool")
            args = move.get("args") or {}
            if not tool_name:
                return AgentRun(tuple(steps), None, error="agent step named no tool")
            try:
                observation = self.tool_executor(tool_name, args)
                failed = False
            except Exception as exc:
                observation = f"ERROR: {exc}"
                failed = True
            steps.append(TraceStep(thought=thought, tool=tool_name, args=args, observation=observation))
            transcript += f"\nCall: {tool_name}({json.dumps(args, sort_keys=True)})\nObservation: {observation}\n"
            if failed:
                key = f"{tool_name}|{json.dumps(args, sort_keys=True)}"
                error_counts[key] = error_counts.get(key, 0) + 1
                if error_counts[key] > self.retry_cap:
                    return AgentRun(tuple(steps), None, error=f"unrecoverable tool error: {observation}")
        return AgentRun(tuple(steps), None, error="step limit reached")


# ---------------------------------------------------------------------------
# Accuracy accounting
# ---------------------------------------------------------------------------


def normalize_answer(text: str) -> str:
    return " ".join(text.strip().lower().split())


def answers_match(got: Optional[str], expected: str) -> bool:
    """Exact match after trim/lowercase; numeric answers compare after parsing."""
    if got is None:
        return False
    a, b = normalize_answer(got), normalize_answer(expected)
    if a == b:
        return True
    try:
        return math.isclose(float(a), float(b), rel_tol=1e-9)
    except ValueError:
        return False


@dataclass(frozen=True)
class Verdict:
    case_id: str
    correct: bool
    answer: Optional[str]
    expected: str
    injected_rule_ids: tuple[str, ...] = ()
    error: Optional[str] = None

    def to_json(self) -> dict:
        return {
            "case_id": self.case_id,
            "correct": self.correct,
            "answer": self.answer,
            "expected": self.expected,
            "injected_rule_ids": list(self.injected_rule_ids),
            "error": self.error,
        }


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    standard_error: float
    n: int
    verdicts: tuple[Verdict, ...]

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "se": self.standard_error,
            "n": self.n,
            "verdicts": [v.to_json() for v in self.verdicts],
        }


def binomial_se(accuracy: float, n: int) -> float:
    if n == 0:
        return 0.0
    return math.sqrt(accuracy * (1.0 - accuracy) / n)


def run_eval(
    cases: Sequence[Case],
    agent,
    retriever: Optional[Callable[[Case], tuple[tuple[str, ...], tuple[str, ...]]]] = None,
    max_workers: int = 4,
) -> EvalResult:
    """Evaluate the agent over cases, optionally injecting retrieved rules.

    `retriever` maps a case to (rule_ids, nl_texts) to inject; None means no
    injection. Per-case agent errors count as incorrect, never propagate.
    """

    def _one(case: Case) -> Verdict:
        rule_ids: tuple[str, ...] = ()
        nl_texts: tuple[str, ...] = ()
        if retriever is not None:
            rule_ids, nl_texts = retriever(case)
        try:
            run = agent.run(case.query, case.tools, nl_texts)
        except AgentError as exc:
            return Verdict(case.id, False, None, case.gold_answer, rule_ids, error=str(exc))
        correct = run.error is None and answers_match(run.final_answer, case.gold_answer)
        return Verdict(case.id, correct, run.final_answer, case.gold_answer, rule_ids, run.error)

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        verdicts = sorted(pool.map(_one, cases), key=lambda v: v.case_id)

    n = len(verdicts)
    correct = sum(1 for v in verdicts if v.correct)
    accuracy = correct / n if n else 0.0
    return EvalResult(accuracy, binomial_se(accuracy, n), n, tuple(verdicts))


@dataclass(frozen=True)
class CompareReport:
    delta_accuracy: float
    wins: tuple[str, ...]
    losses: tuple[str, ...]
    ties: tuple[str, ...]

    def to_json(self) -> dict:
        return {
            "delta_accuracy": self.delta_accuracy,
            "wins": list(self.wins),
            "losses": list(self.losses),
            "ties": list(self.ties),
        }


def compare_runs(result_a: EvalResult, result_b: EvalResult) -> CompareReport:
    """Per-case win/loss/tie of run b against run a."""
    by_a = {v.case_id: v for v in result_a.verdicts}
    by_b = {v.case_id: v for v in result_b.verdicts}
    if set(by_a) != set(by_b):
        raise ValueError("results cover different case sets")
    wins, losses, ties = [], [], []
    for case_id in sorted(by_a):
        a, b = by_a[case_id], by_b[case_id]
        if b.correct and not a.correct:
            wins.append(case_id)
        elif a.correct and not b.correct:
            losses.append(case_id)
        else:
            ties.append(case_id)
    return CompareReport(
        delta_accuracy=result_b.accuracy - result_a.accuracy,
        wins=tuple(wins),
        losses=tuple(losses),
        ties=tuple(ties),
    )
