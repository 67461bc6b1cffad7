"""MDL-guided rule consolidation.

The objective is model cost plus data cost in nats:

    model cost  = alpha * sum of symbolic token lengths   (prior normalizer
                  is constant over a fixed pool and dropped)
    data cost   = -(k log(k/n) + (n-k) log(1-(k/n)))      (Bernoulli plug-in
                  over corrected-failure counts, 0*log 0 = 0)

Greedy descent sweeps rules in ascending id order, evaluating a prune and,
for single-category tool scopes, a generalize edit, applying any edit that
strictly reduces the objective.

The plug-in code is n times the empirical entropy of the correction rate,
so it is 0 at k=0 as well as k=n: once fewer than half the failures are
corrected, dropping further corrections REDUCES data cost, and the empty
library codes for free. Descending from a high-performing pool only makes
sense on the k >= n/2 side, where losing corrections is punished; edits
that would strictly reduce k into the k < n/2 region are therefore
inadmissible, which keeps the descent out of the degenerate
corrects-nothing basin.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

from .errors import MalformedModelOutputError, OracleError
from .eval_harness import answers_match
from .generation import FailureCase, linguistic_check, RuleProposal
from .model_gateway import extract_json
from .retrieval import derive_tool_categories, rule_applies
from .rule_core import (
    ErrorType,
    Rule,
    RuleLibrary,
    ToolScope,
    symbolic_token_length,
)

IMPROVEMENT_EPS = 1e-9
TIE_EPS = 1e-12


def _failure_id(failure: Union[FailureCase, str]) -> str:
    return failure if isinstance(failure, str) else failure.id


def degenerate_floor(start_k: int, n: int) -> int:
    """Lowest corrected count the descent may reach from a given start.

    From a high-performing start the floor is n/2 (the entropy peak); a
    weaker start must not lose corrections at all, since every loss there
    would be rewarded by the plug-in code.
    """
    return min(start_k, math.ceil(n / 2))


def _edit_admissible(new_k: int, cur_k: int, n: int) -> bool:
    if new_k >= cur_k:
        return True
    return new_k >= degenerate_floor(cur_k, n)


# ---------------------------------------------------------------------------
# Correction oracles
# ---------------------------------------------------------------------------


class CorrectionOracle:
    """Answers "does injecting this library correct this failure?".

    Results are deterministic per (library state, failure id) and cached by
    that key; the cache can persist across CLI invocations.
    """

    def __init__(self, cache_path: Optional[str | Path] = None):
        self.cache_path = Path(cache_path) if cache_path else None
        self._cache: dict[str, bool] = {}
        self._lock = threading.Lock()
        if self.cache_path and self.cache_path.exists():
            raw = json.loads(self.cache_path.read_text(encoding="utf-8"))
            self._cache = {key: bool(bit) for key, bit in raw.items()}

    def corrects(self, library: RuleLibrary, failure: Union[FailureCase, str]) -> bool:
        key = f"{library.state_digest}:{_failure_id(failure)}"
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        value = self._evaluate(library, failure)
        with self._lock:
            self._cache[key] = value
        return value

    def count_corrected(
        self, library: RuleLibrary, failures: Sequence[Union[FailureCase, str]]
    ) -> int:
        return sum(1 for f in failures if self.corrects(library, f))

    def _evaluate(self, library: RuleLibrary, failure: Union[FailureCase, str]) -> bool:
        raise NotImplementedError

    def save_cache(self):
        if not self.cache_path:
            return
        payload = json.dumps(
            {k: int(v) for k, v in sorted(self._cache.items())}, ensure_ascii=False
        )
        with self.cache_path.open("w", encoding="utf-8") as fh:
            try:
                import fcntl

                fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
            except (ImportError, OSError):
                pass
            fh.write(payload + "\n")


@dataclass(frozen=True)
class FailureContext:
    tool_names: tuple[str, ...]
    tool_categories: frozenset[str]


class MatrixOracle(CorrectionOracle):
    """Per-rule correction bits combined by OR.

    Bits record whether each rule alone corrects each failure; a library
    corrects a failure when any of its rules that pass the scope filter for
    that failure has the bit set. A desk-scale, monotone approximation of
    re-running the agent per candidate library.
    """

    def __init__(
        self,
        bits: dict[tuple[str, str], bool],
        contexts: Optional[dict[str, FailureContext]] = None,
        cache_path: Optional[str | Path] = None,
    ):
        super().__init__(cache_path)
        self.bits = dict(bits)
        self.contexts = contexts or {}

    @classmethod
    def from_agent(
        cls,
        rules: Sequence[Rule],
        failures: Sequence[FailureCase],
        agent,
        tool_to_category: Optional[dict[str, str]] = None,
        cache_path: Optional[str | Path] = None,
    ) -> "MatrixOracle":
        """Precompute bits by running the agent with each rule alone injected."""
        bits: dict[tuple[str, str], bool] = {}
        contexts: dict[str, FailureContext] = {}
        for failure in failures:
            contexts[failure.id] = FailureContext(
                tool_names=failure.tool_names(),
                tool_categories=derive_tool_categories(failure.tools, tool_to_category),
            )
            for rule in rules:
                try:
                    run = agent.run(failure.query, failure.tools, (rule.nl_text,))
                except Exception as exc:
                    raise OracleError(failure.id, str(exc))
                bits[(rule.id, failure.id)] = run.error is None and answers_match(
                    run.final_answer, failure.gold_answer
                )
        return cls(bits, contexts, cache_path)

    def _evaluate(self, library: RuleLibrary, failure: Union[FailureCase, str]) -> bool:
        fid = _failure_id(failure)
        context = self.contexts.get(fid)
        for rule in library:
            if context is not None:
                ok, _ = rule_applies(rule, context.tool_names, context.tool_categories)
                if not ok:
                    continue
            if self.bits.get((rule.id, fid), False):
                return True
        return False


class AgentOracle(CorrectionOracle):
    """Exact oracle: re-run the agent per candidate library.

    `retriever` maps (library, failure) to the natural-language rules to
    inject, mirroring inference-time retrieval.
    """

    def __init__(
        self,
        agent,
        retriever: Callable[[RuleLibrary, FailureCase], Sequence[str]],
        cache_path: Optional[str | Path] = None,
    ):
        super().__init__(cache_path)
        self.agent = agent
        self.retriever = retriever

    def _evaluate(self, library: RuleLibrary, failure: Union[FailureCase, str]) -> bool:
        if isinstance(failure, str):
            raise OracleError(failure, "agent oracle needs the full failure case")
        nl_texts = tuple(self.retriever(library, failure))
        try:
            run = self.agent.run(failure.query, failure.tools, nl_texts)
        except Exception as exc:
            raise OracleError(failure.id, str(exc))
        return run.error is None and answers_match(run.final_answer, failure.gold_answer)


# ---------------------------------------------------------------------------
# Costs
# ---------------------------------------------------------------------------


def model_cost(library: RuleLibrary, alpha: float) -> float:
    """alpha * total symbolic token length, in nats."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return alpha * sum(symbolic_token_length(rule) for rule in library)


def plug_in_code(k: int, n: int) -> float:
    """Bernoulli plug-in code length -(k ln p + (n-k) ln(1-p)) with p = k/n."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if k < 0 or k > n:
        raise ValueError("k must be within [0, n]")
    if k == 0 or k == n:
        return 0.0
    p = k / n
    return -(k * math.log(p) + (n - k) * math.log(1.0 - p))


def data_cost(
    library: RuleLibrary,
    failures: Sequence[Union[FailureCase, str]],
    oracle: CorrectionOracle,
) -> float:
    if not failures:
        raise ValueError("failure set must be non-empty")
    k = oracle.count_corrected(library, failures)
    return plug_in_code(k, len(failures))


def mdl(
    library: RuleLibrary,
    failures: Sequence[Union[FailureCase, str]],
    alpha: float,
    oracle: CorrectionOracle,
) -> float:
    return model_cost(library, alpha) + data_cost(library, failures, oracle)


# ---------------------------------------------------------------------------
# Edits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EditProposal:
    kind: str  # "prune" | "generalize"
    rule_id: str
    target_category: Optional[str] = None
    delta_model_cost: Optional[float] = None
    delta_data_cost: Optional[float] = None

    @property
    def delta_mdl(self) -> Optional[float]:
        if self.delta_model_cost is None or self.delta_data_cost is None:
            return None
        return self.delta_model_cost + self.delta_data_cost


def generalize_target(
    rule: Rule, tool_to_category: Optional[dict[str, str]]
) -> tuple[Optional[str], list[str]]:
    """Category a tools-scoped rule can generalize to, plus any unmapped tools."""
    if rule.tool_scope.kind != "tools":
        return None, []
    mapping = tool_to_category or {}
    unmapped = [t for t in rule.tool_scope.tools if t not in mapping]
    if unmapped:
        return None, unmapped
    categories = {mapping[t] for t in rule.tool_scope.tools}
    if len(categories) != 1:
        return None, []
    return categories.pop(), []


def enumerate_edits(
    library: RuleLibrary,
    tool_to_category: Optional[dict[str, str]] = None,
) -> tuple[list[EditProposal], list[tuple[str, list[str]]]]:
    """Edit skeletons: one prune per rule, one generalize where the scope allows.

    Rules whose tools cannot all be mapped to one category are reported and
    skipped for generalize.
    """
    edits: list[EditProposal] = []
    skipped: list[tuple[str, list[str]]] = []
    for rule in library:
        edits.append(EditProposal("prune", rule.id))
        target, unmapped = generalize_target(rule, tool_to_category)
        if target is not None:
            edits.append(EditProposal("generalize", rule.id, target_category=target))
        elif unmapped:
            skipped.append((rule.id, unmapped))
    return edits, skipped


@dataclass(frozen=True)
class AppliedEdit:
    kind: str
    rule_id: str
    target_category: Optional[str]
    delta_model: float
    delta_data: float
    mdl_before: float
    mdl_after: float

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "rule_id": self.rule_id,
            "delta_model": self.delta_model,
            "delta_data": self.delta_data,
            "mdl_before": self.mdl_before,
            "mdl_after": self.mdl_after,
        }


@dataclass(frozen=True)
class ConsolidationTrace:
    initial_hash: str
    final_hash: str
    passes: int
    alpha: float
    edits: tuple[AppliedEdit, ...]

    def to_json(self) -> dict:
        return {
            "initial_hash": self.initial_hash,
            "final_hash": self.final_hash,
            "passes": self.passes,
            "alpha": self.alpha,
            "edits": [e.to_json() for e in self.edits],
        }


def _apply_edit(library: RuleLibrary, edit: EditProposal) -> RuleLibrary:
    if edit.kind == "prune":
        return library.without(edit.rule_id)
    assert edit.target_category is not None
    return library.with_rule_scope(edit.rule_id, ToolScope.of_category(edit.target_category))


def _candidate_edits(
    library: RuleLibrary, rule_id: str, tool_to_category: Optional[dict[str, str]]
) -> list[EditProposal]:
    candidates = [EditProposal("prune", rule_id)]
    target, _ = generalize_target(library.get(rule_id), tool_to_category)
    if target is not None:
        candidates.append(EditProposal("generalize", rule_id, target_category=target))
    return candidates


def consolidate(
    initial: RuleLibrary,
    failures: Sequence[Union[FailureCase, str]],
    alpha: float,
    oracle: CorrectionOracle,
    tool_to_category: Optional[dict[str, str]] = None,
    max_passes: Optional[int] = None,
) -> tuple[RuleLibrary, ConsolidationTrace]:
    """Greedy strict-descent over prune/generalize edits.

    Rules are visited in ascending id order; the better of a rule's edits is
    applied immediately when it improves the objective (ties go to prune).
    Terminates when a full pass applies nothing.
    """
    if not failures:
        raise ValueError("failure set must be non-empty")
    if alpha <= 0:
        raise ValueError("alpha must be positive")

    n = len(failures)
    library = initial
    cur_model = model_cost(library, alpha)
    cur_k = oracle.count_corrected(library, failures)
    cur_data = plug_in_code(cur_k, n)

    applied: list[AppliedEdit] = []
    passes = 0
    while True:
        passes += 1
        changed = False
        for rule_id in sorted(library.ids):
            if rule_id not in library.ids:
                continue
            best: Optional[tuple[float, float, float, int, EditProposal, RuleLibrary]] = None
            for skeleton in _candidate_edits(library, rule_id, tool_to_category):
                candidate = _apply_edit(library, skeleton)
                new_k = oracle.count_corrected(candidate, failures)
                if not _edit_admissible(new_k, cur_k, n):
                    continue
                new_model = model_cost(candidate, alpha)
                new_data = plug_in_code(new_k, n)
                delta_model = new_model - cur_model
                delta_data = new_data - cur_data
                delta = delta_model + delta_data
                # prune is evaluated first; generalize must win by a margin
                if best is None or delta < best[0] - TIE_EPS:
                    best = (delta, delta_model, delta_data, new_k, skeleton, candidate)
            if best is None:
                continue
            delta, delta_model, delta_data, new_k, skeleton, candidate = best
            if delta < -IMPROVEMENT_EPS:
                mdl_before = cur_model + cur_data
                library = candidate
                cur_model += delta_model
                cur_data += delta_data
                cur_k = new_k
                applied.append(
                    AppliedEdit(
                        kind=skeleton.kind,
                        rule_id=rule_id,
                        target_category=skeleton.target_category,
                        delta_model=delta_model,
                        delta_data=delta_data,
                        mdl_before=mdl_before,
                        mdl_after=mdl_before + delta,
                    )
                )
                changed = True
        if not changed:
            break
        if max_passes is not None and passes >= max_passes:
            break

    trace = ConsolidationTrace(
        initial_hash=initial.library_hash,
        final_hash=library.library_hash,
        passes=passes,
        alpha=alpha,
        edits=tuple(applied),
    )
    return library, trace


def verify_local_optimum(
    library: RuleLibrary,
    failures: Sequence[Union[FailureCase, str]],
    alpha: float,
    oracle: CorrectionOracle,
    tool_to_category: Optional[dict[str, str]] = None,
) -> bool:
    """Post-hoc check: no admissible single edit improves the objective."""
    n = len(failures)
    cur_model = model_cost(library, alpha)
    cur_k = oracle.count_corrected(library, failures)
    cur = cur_model + plug_in_code(cur_k, n)
    for rule_id in library.ids:
        for skeleton in _candidate_edits(library, rule_id, tool_to_category):
            candidate = _apply_edit(library, skeleton)
            new_k = oracle.count_corrected(candidate, failures)
            if not _edit_admissible(new_k, cur_k, n):
                continue
            value = model_cost(candidate, alpha) + plug_in_code(new_k, n)
            if value - cur < -IMPROVEMENT_EPS:
                return False
    return True


# ---------------------------------------------------------------------------
# Alpha selection
# ---------------------------------------------------------------------------


def default_accuracy_evaluator(
    failures: Sequence[Union[FailureCase, str]], oracle: CorrectionOracle
) -> Callable[[RuleLibrary, float], float]:
    def evaluate(library: RuleLibrary, alpha: float) -> float:
        return oracle.count_corrected(library, failures) / len(failures)

    return evaluate


def select_alpha(
    initial: RuleLibrary,
    failures: Sequence[Union[FailureCase, str]],
    grid: Sequence[float],
    oracle: CorrectionOracle,
    evaluator: Callable[[RuleLibrary, float], float],
    tool_to_category: Optional[dict[str, str]] = None,
) -> float:
    """Consolidate on each alpha and keep the best end-to-end accuracy.

    Ties break toward larger alpha (stronger compression).
    """
    if not grid:
        raise ValueError("alpha grid must be non-empty")
    best: Optional[tuple[float, float]] = None
    for alpha in grid:
        consolidated, _ = consolidate(initial, failures, alpha, oracle, tool_to_category)
        accuracy = evaluator(consolidated, alpha)
        if best is None or (accuracy, alpha) > best:
            best = (accuracy, alpha)
    assert best is not None
    return best[1]


# ---------------------------------------------------------------------------
# Prompt-based consolidation baseline
# ---------------------------------------------------------------------------

_MERGE_PROMPT = """You curate a library of if-then rules for a tool-using agent.
Merge or rewrite the candidate rules below so that redundant or overlapping
rules become a single rule. Keep every rule an atomic if-then sentence and
keep its error type, one of: decomposition error, tool selection error,
tool arguments error.

Candidate rules:
{rule_bullets}

Return only valid JSON:
{{"rules": [{{"nl_text": "...", "error_type": "..."}}]}}"""


def prompt_consolidate(initial: RuleLibrary, gateway, vocab) -> RuleLibrary:
    """Baseline consolidation: ask the model to merge or rewrite the rules.

    Merged rules must all re-pass the linguistic check, otherwise the
    original library is kept unchanged; survivors are re-translated.
    """
    from .vocab import translate_library

    if not len(initial):
        return initial
    bullets = "\n".join(
        f"- [{r.error_type.value}] {r.nl_text}" for r in initial
    )
    response = gateway.complete(_MERGE_PROMPT.format(rule_bullets=bullets), tag="prompt_consolidate")
    obj = extract_json(response)
    raw_rules = obj.get("rules")
    if not isinstance(raw_rules, list):
        raise MalformedModelOutputError("merge output must carry a 'rules' list", response)

    provenance = sorted({p for rule in initial for p in rule.provenance})
    merged: list[Rule] = []
    for entry in raw_rules:
        if isinstance(entry, str):
            nl_text, label = entry, "dec"
        else:
            nl_text = entry.get("nl_text", "")
            label = entry.get("error_type", "")
        try:
            error_type = ErrorType.from_label(label)
        except ValueError as exc:
            raise MalformedModelOutputError(str(exc), response)
        if not nl_text:
            raise MalformedModelOutputError("merged rule with empty nl_text", response)
        proposal = RuleProposal(nl_text=nl_text, error_type=error_type)
        if not linguistic_check(proposal).passed:
            return initial  # reject the merge wholesale, keep the originals
        merged.append(Rule.from_nl(nl_text, error_type, provenance=provenance))

    library, _failures = translate_library(merged, vocab, gateway)
    return library
