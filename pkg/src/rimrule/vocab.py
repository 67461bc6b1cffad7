"""Closed-vocabulary induction and NL-to-symbolic rule classification.

The vocabulary is induced by running a create-then-update prompt chain over
batches of natural-language rules, once per randomized rule ordering, and
keeping the most compact candidate. Once induced it is frozen; classification
only ever chooses from it.
"""

from __future__ import annotations

import json
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .errors import (
    GatewayError,
    MalformedModelOutputError,
    UnknownTokenError,
)
from .model_gateway import extract_json, get_template
from .rule_core import (
    ACTION,
    BASE_STRENGTHS,
    DOMAIN,
    FIELDS,
    QUALIFIER,
    STRENGTH,
    TOKEN_RE,
    TOOL_CATEGORY,
    ConditionClause,
    ErrorType,
    Rule,
    RuleLibrary,
    SymbolicForm,
    ToolScope,
    Vocabulary,
)

DEFAULT_BATCH_SIZE = 20
DEFAULT_NUM_ORDERINGS = 3


@dataclass(frozen=True)
class VocabCandidate:
    """One induced vocabulary plus the ordering that produced it."""

    vocabulary: Vocabulary
    ordering_seed: int

    @property
    def total_size(self) -> int:
        return self.vocabulary.total_size

    def summary(self) -> dict:
        return {
            "ordering_seed": self.ordering_seed,
            "total_size": self.total_size,
            "field_sizes": {f: len(self.vocabulary.field_tokens(f)) for f in FIELDS},
        }


@dataclass(frozen=True)
class ClassificationResult:
    rule_id: str
    symbolic: SymbolicForm
    raw_model_output: str
    tool_category: Optional[str] = None


@dataclass(frozen=True)
class TranslationFailure:
    rule_id: str
    reason: str


def _bullets(rules: Sequence[Rule]) -> str:
    return "\n".join(f"- {r.nl_text}" for r in rules)


def _field_view(tokens: frozenset[str]) -> str:
    return ", ".join(sorted(tokens)) if tokens else "None yet"


def _complete_json(gateway, prompt: str, tag: str, retries: int = 1) -> dict:
    """Call the gateway and parse a JSON object, re-asking once on bad output."""
    last: Optional[MalformedModelOutputError] = None
    for _ in range(retries + 1):
        response = gateway.complete(prompt, tag=tag)
        try:
            return extract_json(response)
        except MalformedModelOutputError as exc:
            last = exc
    assert last is not None
    raise last


def _vocab_fields_from_json(obj: dict) -> dict[str, set[str]]:
    fields: dict[str, set[str]] = {}
    for name in FIELDS:
        raw = obj.get(name, [])
        if not isinstance(raw, list):
            raise MalformedModelOutputError(f"vocabulary field {name!r} is not a list", str(obj))
        tokens = set()
        for token in raw:
            if not isinstance(token, str) or not TOKEN_RE.match(token):
                raise MalformedModelOutputError(
                    f"vocabulary token {token!r} in field {name!r} is not [A-Z0-9_]+", str(obj)
                )
            tokens.add(token)
        fields[name] = tokens
    return fields


def _induce_one_ordering(
    rules: Sequence[Rule], batch_size: int, ordering_seed: int, gateway
) -> VocabCandidate:
    ordered = list(rules)
    random.Random(ordering_seed).shuffle(ordered)

    accumulated: dict[str, set[str]] = {f: set() for f in FIELDS}
    version = "v1"
    for start in range(0, len(ordered), batch_size):
        batch = ordered[start : start + batch_size]
        if start == 0:
            prompt = get_template("vocab_create").render({"rule_bullets": _bullets(batch)})
            tag = "vocab_create"
        else:
            prompt = get_template("vocab_update").render(
                {
                    "current_domains": _field_view(frozenset(accumulated[DOMAIN])),
                    "current_qualifiers": _field_view(frozenset(accumulated[QUALIFIER])),
                    "current_actions": _field_view(frozenset(accumulated[ACTION])),
                    "current_strengths": _field_view(frozenset(accumulated[STRENGTH])),
                    "current_tool_categories": _field_view(frozenset(accumulated[TOOL_CATEGORY])),
                    "new_rule_bullets": _bullets(batch),
                }
            )
            tag = "vocab_update"
        try:
            obj = _complete_json(gateway, prompt, tag=tag)
        except GatewayError as exc:
            raise GatewayError(f"batch {start // batch_size}: {exc}") from exc
        if start == 0 and isinstance(obj.get("vocab_version"), str):
            version = obj["vocab_version"]
        # The update prompt asks for the complete vocabulary back; union with
        # the accumulated state so a partial reply cannot drop tokens.
        for name, tokens in _vocab_fields_from_json(obj).items():
            accumulated[name] |= tokens

    accumulated[STRENGTH] |= BASE_STRENGTHS
    vocabulary = Vocabulary(
        version=version,
        domain=frozenset(accumulated[DOMAIN]),
        qualifier=frozenset(accumulated[QUALIFIER]),
        action=frozenset(accumulated[ACTION]),
        strength=frozenset(accumulated[STRENGTH]),
        tool_category=frozenset(accumulated[TOOL_CATEGORY]),
    )
    for name in FIELDS:
        if not vocabulary.field_tokens(name):
            raise MalformedModelOutputError(
                f"vocabulary field {name!r} is empty after induction", ""
            )
    return VocabCandidate(vocabulary=vocabulary, ordering_seed=ordering_seed)


def induce_vocabulary(
    rules: Sequence[Rule],
    batch_size: int = DEFAULT_BATCH_SIZE,
    num_orderings: int = DEFAULT_NUM_ORDERINGS,
    seed: int = 0,
    gateway=None,
    candidate_log: Optional[str | Path] = None,
    max_workers: int = 4,
) -> Vocabulary:
    """Induce the five-field vocabulary and keep the most compact candidate.

    Orderings run concurrently; batches within one ordering are sequential
    because each update prompt depends on the accumulated vocabulary. Ties on
    total size break toward the lowest ordering seed.
    """
    if not rules:
        raise ValueError("cannot induce a vocabulary from an empty rule list")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if num_orderings < 1:
        raise ValueError("num_orderings must be >= 1")

    seeds = [seed + i for i in range(num_orderings)]
    with ThreadPoolExecutor(max_workers=min(max_workers, num_orderings)) as pool:
        candidates = list(
            pool.map(lambda s: _induce_one_ordering(rules, batch_size, s, gateway), seeds)
        )

    if candidate_log:
        with Path(candidate_log).open("w", encoding="utf-8") as fh:
            for cand in candidates:
                fh.write(json.dumps(cand.summary(), ensure_ascii=False) + "\n")

    best = min(candidates, key=lambda c: (c.total_size, c.ordering_seed))
    return best.vocabulary


def select_candidate(candidates: Sequence[VocabCandidate]) -> VocabCandidate:
    """Compactness selection rule, exposed for candidate-log auditing."""
    if not candidates:
        raise ValueError("no candidates to select from")
    return min(candidates, key=lambda c: (c.total_size, c.ordering_seed))


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------

_CORRECTION_SUFFIX = (
    "\n\nThe previous classification used tokens that are not in the vocabulary: {bad}."
    "\nRe-classify the rule choosing only from the given vocabulary options."
    "\nReturn ONLY valid JSON in the same schema."
)


def _classification_prompt(rule: Rule, vocab: Vocabulary) -> str:
    rule_obj = {
        "id": rule.id,
        "nl_text": rule.nl_text,
        "error_type": rule.error_type.value,
    }
    return get_template("rule_classification").render(
        {
            "domain_list": _field_view(vocab.domain),
            "qualifier_list": _field_view(vocab.qualifier),
            "action_list": _field_view(vocab.action),
            "strength_list": _field_view(vocab.strength),
            "tool_category_list": _field_view(vocab.tool_category),
            "rule_json": json.dumps(rule_obj, ensure_ascii=False),
        }
    )


def _parse_classification(
    obj: dict, vocab: Vocabulary, error_type: ErrorType
) -> tuple[SymbolicForm, Optional[str]]:
    domain = obj.get("domain")
    if not isinstance(domain, str) or not domain:
        raise MalformedModelOutputError("classification missing 'domain'", str(obj))
    qualifiers = obj.get("qualifier", [])
    if isinstance(qualifiers, str):
        qualifiers = [qualifiers]
    actions = obj.get("action", [])
    if isinstance(actions, str):
        actions = [actions]
    if not actions:
        raise MalformedModelOutputError("classification missing 'action'", str(obj))
    strength = obj.get("strength")
    if not isinstance(strength, str) or not strength:
        raise MalformedModelOutputError("classification missing 'strength'", str(obj))
    tool_category = obj.get("tool_category") or None

    if not vocab.contains(DOMAIN, domain):
        raise UnknownTokenError(DOMAIN, domain)
    for q in qualifiers:
        if not vocab.contains(QUALIFIER, q):
            raise UnknownTokenError(QUALIFIER, q)
    for a in actions:
        if not vocab.contains(ACTION, a):
            raise UnknownTokenError(ACTION, a)
    if not vocab.contains(STRENGTH, strength):
        raise UnknownTokenError(STRENGTH, strength)
    if tool_category is not None and not vocab.contains(TOOL_CATEGORY, tool_category):
        raise UnknownTokenError(TOOL_CATEGORY, tool_category)

    # Qualified rules condition on domain-and-qualifier. A decomposition rule
    # with no qualifiers instead keeps its tool category as an alternative
    # trigger in the condition, since its scope must stay unscoped.
    clauses = [ConditionClause.domain_is(domain)]
    connectives: tuple[str, ...] = ()
    if qualifiers:
        clauses.append(ConditionClause.qualifier_any_of(qualifiers))
        connectives = ("and",)
    elif error_type is ErrorType.DECOMPOSITION and tool_category:
        clauses.append(ConditionClause.tool_category_is(tool_category))
        connectives = ("or",)
    form = SymbolicForm(
        clauses=tuple(clauses),
        connectives=connectives,
        actions=tuple(actions),
        strength=strength,
    )
    return form, tool_category


def classify_rule(rule: Rule, vocab: Vocabulary, gateway) -> ClassificationResult:
    """Assign symbolic field values to one rule using the frozen vocabulary.

    Out-of-vocabulary tokens trigger a single corrective re-prompt before the
    error surfaces.
    """
    if not rule.nl_text:
        raise ValueError("rule has no nl_text to classify")
    prompt = _classification_prompt(rule, vocab)
    response = gateway.complete(prompt, tag="rule_classification")
    try:
        form, tool_category = _parse_classification(extract_json(response), vocab, rule.error_type)
        return ClassificationResult(rule.id, form, response, tool_category)
    except UnknownTokenError as exc:
        retry_prompt = prompt + _CORRECTION_SUFFIX.format(bad=f"{exc.field}={exc.token}")
        response = gateway.complete(retry_prompt, tag="rule_classification")
        form, tool_category = _parse_classification(extract_json(response), vocab, rule.error_type)
        return ClassificationResult(rule.id, form, response, tool_category)


def apply_classification(rule: Rule, result: ClassificationResult) -> Rule:
    """Attach the symbolic form and derive a scope when the rule has none.

    Decomposition rules stay unscoped. A tool-use rule that carries no scope
    picks up the classified tool category; an existing tools scope (trace
    evidence) is kept as the more specific one.
    """
    translated = rule.with_symbolic(result.symbolic)
    if rule.error_type is ErrorType.DECOMPOSITION:
        return translated.with_scope(ToolScope.unscoped())
    if rule.tool_scope.kind == "unscoped" and result.tool_category:
        return translated.with_scope(ToolScope.of_category(result.tool_category))
    return translated


def translate_library(
    rules: Sequence[Rule],
    vocab: Vocabulary,
    gateway,
    max_workers: int = 4,
) -> tuple[RuleLibrary, list[TranslationFailure]]:
    """Classify every rule; rules that still fail after the retry are excluded."""
    if not rules:
        return RuleLibrary((), vocab.version), []

    def _one(rule: Rule):
        try:
            return apply_classification(rule, classify_rule(rule, vocab, gateway)), None
        except (UnknownTokenError, MalformedModelOutputError, GatewayError) as exc:
            return None, TranslationFailure(rule.id, str(exc))

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        outcomes = list(pool.map(_one, rules))

    translated = tuple(rule for rule, _ in outcomes if rule is not None)
    failures = [failure for _, failure in outcomes if failure is not None]
    return RuleLibrary(translated, vocab.version), failures
