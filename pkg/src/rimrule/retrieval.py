"""Inference-time rule selection.

Two-stage symbolic retrieval: a coarse applicability filter (decomposition
rules always pass; tool-use rules must match the available tools or tool
categories), then cosine ranking between the rule's condition-side tokens
and the query's symbolic state. A raw-text embedding baseline over the
natural-language form is kept alongside for comparison.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Protocol, Sequence, Union

import numpy as np

from .errors import UnknownTokenError
from .eval_harness import ToolSpec
from .rule_core import (
    DOMAIN,
    QUALIFIER,
    Rule,
    RuleLibrary,
    Vocabulary,
)

DEFAULT_TOP_K = 5


@dataclass(frozen=True)
class QueryState:
    """Symbolic view of one inference-time state."""

    query_text: str
    available_tools: tuple[str, ...]
    tool_categories: frozenset[str]
    domain: Optional[str] = None
    qualifiers: tuple[str, ...] = ()

    def tokens(self) -> tuple[str, ...]:
        parts: list[str] = []
        if self.domain:
            parts.append(self.domain)
        parts.extend(self.qualifiers)
        parts.extend(sorted(self.tool_categories))
        return tuple(parts)


@dataclass(frozen=True)
class RankedRule:
    rule_id: str
    score: float
    filter_reason: str

    def to_json(self) -> dict:
        return {"rule_id": self.rule_id, "score": self.score, "filter_reason": self.filter_reason}


# ---------------------------------------------------------------------------
# Query symbolization
# ---------------------------------------------------------------------------


class QueryClassifier(Protocol):
    def classify_query(self, query: str, vocab: Vocabulary) -> tuple[Optional[str], tuple[str, ...]]:
        ...


class KeywordQueryClassifier:
    """Deterministic offline classifier: phrase table plus token-derived phrases.

    Every vocabulary domain/qualifier token doubles as a lowercase phrase
    (underscores become spaces); an explicit table can add extra phrases.
    """

    def __init__(self, extra_table: Optional[dict[str, str]] = None):
        self.extra_table = {k.lower(): v for k, v in (extra_table or {}).items()}

    def classify_query(self, query: str, vocab: Vocabulary) -> tuple[Optional[str], tuple[str, ...]]:
        text = " ".join(query.lower().split())
        matches: list[tuple[int, str]] = []
        phrase_map: dict[str, str] = {}
        for token in vocab.domain | vocab.qualifier:
            phrase_map[token.replace("_", " ").lower()] = token
        phrase_map.update(self.extra_table)
        for phrase, token in phrase_map.items():
            pos = text.find(phrase)
            if pos >= 0:
                matches.append((pos, token))
        matches.sort()
        domain = None
        qualifiers: set[str] = set()
        for _, token in matches:
            if token in vocab.domain and domain is None:
                domain = token
            elif token in vocab.qualifier:
                qualifiers.add(token)
        return domain, tuple(sorted(qualifiers))


class GatewayQueryClassifier:
    """Live classifier reusing the rule-classification prompt on the raw query."""

    def __init__(self, gateway):
        self.gateway = gateway

    def classify_query(self, query: str, vocab: Vocabulary) -> tuple[Optional[str], tuple[str, ...]]:
        from .rule_core import ErrorType, Rule as _Rule
        from .vocab import classify_rule

        probe = _Rule.from_nl(query, ErrorType.DECOMPOSITION)
        result = classify_rule(probe, vocab, self.gateway)
        return result.symbolic.domain, result.symbolic.qualifiers


def derive_tool_categories(
    tools: Sequence[Union[ToolSpec, str]],
    tool_to_category: Optional[dict[str, str]] = None,
) -> frozenset[str]:
    mapping = tool_to_category or {}
    categories: set[str] = set()
    for tool in tools:
        if isinstance(tool, ToolSpec):
            if tool.category:
                categories.add(tool.category)
            elif tool.name in mapping:
                categories.add(mapping[tool.name])
        elif tool in mapping:
            categories.add(mapping[tool])
    return frozenset(categories)


def symbolize_query(
    query: str,
    tools: Sequence[Union[ToolSpec, str]],
    vocab: Vocabulary,
    classifier: QueryClassifier,
    tool_to_category: Optional[dict[str, str]] = None,
) -> QueryState:
    """Convert a raw query plus tool context into symbolic tokens."""
    domain, qualifiers = classifier.classify_query(query, vocab)
    if domain is not None and not vocab.contains(DOMAIN, domain):
        raise UnknownTokenError(DOMAIN, domain)
    for q in qualifiers:
        if not vocab.contains(QUALIFIER, q):
            raise UnknownTokenError(QUALIFIER, q)
    names = tuple(t.name if isinstance(t, ToolSpec) else t for t in tools)
    return QueryState(
        query_text=query,
        available_tools=names,
        tool_categories=derive_tool_categories(tools, tool_to_category),
        domain=domain,
        qualifiers=qualifiers,
    )


# ---------------------------------------------------------------------------
# Coarse filter
# ---------------------------------------------------------------------------


def rule_applies(
    rule: Rule,
    available_tools: Iterable[str],
    tool_categories: Iterable[str],
) -> tuple[bool, str]:
    """Scope predicate behind the coarse filter.

    Decomposition rules always apply. Tool-use rules apply when their tools
    scope intersects the available tools, their category scope matches an
    available category, or (unscoped) any tool-category clause matches; an
    unscoped rule with no category clause has nothing to mismatch.
    """
    from .rule_core import ErrorType

    if rule.error_type is ErrorType.DECOMPOSITION:
        return True, "decomposition"
    scope = rule.tool_scope
    tools = set(available_tools)
    categories = set(tool_categories)
    if scope.kind == "tools":
        if tools & set(scope.tools):
            return True, "tool-overlap"
        return False, ""
    if scope.kind == "category":
        if scope.category in categories:
            return True, "category-scope"
        return False, ""
    clause_categories = set(rule.symbolic.tool_categories) if rule.symbolic else set()
    if clause_categories:
        if clause_categories & categories:
            return True, "category-clause"
        return False, ""
    return True, "unscoped"


def coarse_filter(library: RuleLibrary, state: QueryState) -> list[tuple[Rule, str]]:
    survivors = []
    for rule in library:
        ok, reason = rule_applies(rule, state.available_tools, state.tool_categories)
        if ok:
            survivors.append((rule, reason))
    return survivors


# ---------------------------------------------------------------------------
# Embedders and ranking
# ---------------------------------------------------------------------------


class VocabTokenEmbedder:
    """Sparse indicator vector over the vocabulary token universe.

    Fully deterministic and exact on identity: equal token multisets embed to
    identical vectors with cosine 1.
    """

    def __init__(self, vocab: Vocabulary):
        self.universe = vocab.token_universe()
        self.index = {token: i for i, token in enumerate(self.universe)}

    @property
    def dimension(self) -> int:
        return len(self.universe)

    def embed_tokens(self, tokens: Iterable[str]) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        for token in tokens:
            i = self.index.get(token)
            if i is not None:
                vec[i] = 1.0
        return vec


class HashingTextEmbedder:
    """Deterministic bag-of-words text embedder (hashing trick, md5-based)."""

    def __init__(self, dimension: int = 256):
        self.dimension = dimension

    def embed_text(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        for word in re.findall(r"[a-z0-9]+", text.lower()):
            digest = hashlib.md5(word.encode("utf-8")).hexdigest()
            vec[int(digest, 16) % self.dimension] += 1.0
        return vec


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    norm = float(np.linalg.norm(a) * np.linalg.norm(b))
    if norm == 0.0:
        return 0.0
    return float(np.dot(a, b) / norm)


def rule_ranking_tokens(rule: Rule) -> tuple[str, ...]:
    """Condition-side tokens compared against the query state.

    Actions and strength are prescriptions, not matching conditions, so they
    stay out of the similarity computation.
    """
    tokens: list[str] = []
    if rule.symbolic is not None:
        tokens.extend(rule.symbolic.condition_tokens())
    if rule.tool_scope.kind == "category" and rule.tool_scope.category:
        tokens.append(rule.tool_scope.category)
    return tuple(tokens)


def rank_and_select(
    survivors: Sequence[tuple[Rule, str]],
    state: QueryState,
    embedder: VocabTokenEmbedder,
    k: int = DEFAULT_TOP_K,
) -> list[RankedRule]:
    """Cosine-rank filter survivors against the query state, keep the top k.

    Ties sort by ascending rule id, so the ranking is independent of library
    order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    query_vec = embedder.embed_tokens(state.tokens())
    ranked = [
        RankedRule(rule.id, cosine(embedder.embed_tokens(rule_ranking_tokens(rule)), query_vec), reason)
        for rule, reason in survivors
    ]
    ranked.sort(key=lambda r: (-r.score, r.rule_id))
    return ranked[: min(k, len(ranked))]


def retrieve(
    library: RuleLibrary,
    state: QueryState,
    embedder: VocabTokenEmbedder,
    k: int = DEFAULT_TOP_K,
) -> list[RankedRule]:
    """Coarse filter then rank; the paper's two-stage symbolic retrieval."""
    return rank_and_select(coarse_filter(library, state), state, embedder, k)


def nl_retrieve(
    library: RuleLibrary,
    query: str,
    tools: Sequence[Union[ToolSpec, str]],
    embedder: HashingTextEmbedder,
    k: int = DEFAULT_TOP_K,
) -> list[RankedRule]:
    """Baseline: raw-text cosine over nl_text, no coarse filter."""
    if k < 1:
        raise ValueError("k must be >= 1")
    parts = [query]
    for tool in tools:
        if isinstance(tool, ToolSpec):
            parts.append(f"{tool.name} {tool.description}")
        else:
            parts.append(str(tool))
    query_vec = embedder.embed_text("\n".join(parts))
    ranked = [
        RankedRule(rule.id, cosine(embedder.embed_text(rule.nl_text), query_vec), "nl-baseline")
        for rule in library
    ]
    ranked.sort(key=lambda r: (-r.score, r.rule_id))
    return ranked[: min(k, len(ranked))]


# ---------------------------------------------------------------------------
# Prompt injection
# ---------------------------------------------------------------------------

INJECTION_HEADER = "Rules:"


def injection_block(nl_texts: Sequence[str]) -> str:
    """Numbered rule list under the fixed header, prepended to agent prompts."""
    lines = [INJECTION_HEADER]
    for i, text in enumerate(nl_texts, start=1):
        lines.append(f"{i}. {text}")
    return "\n".join(lines)
