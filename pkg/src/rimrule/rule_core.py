"""Dual natural-language / symbolic rule representation.

Symbolic rules follow a small closed grammar over five token fields
(domain, qualifier, action, strength, tool_category):

    if (domain=X and qualifier=[A, B]) then (action=[C, D]) with strength=S

Conditions are one or more clauses joined by ``and``/``or`` (left
associative, no nesting). Token lists are canonically sorted, so every
form has exactly one serialization.
"""

from __future__ import annotations

import enum
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .errors import (
    MissingSymbolicFormError,
    RuleSyntaxError,
    UnknownTokenError,
)

TOKEN_RE = re.compile(r"^[A-Z0-9_]+$")

DOMAIN = "domain"
QUALIFIER = "qualifier"
ACTION = "action"
STRENGTH = "strength"
TOOL_CATEGORY = "tool_category"

FIELDS = (DOMAIN, QUALIFIER, ACTION, STRENGTH, TOOL_CATEGORY)


class ErrorType(enum.Enum):
    """Failure class a rule targets: decomposition, tool selection, or arguments."""

    DECOMPOSITION = "dec"
    TOOL_SELECTION = "sel"
    TOOL_ARGUMENTS = "arg"

    @classmethod
    def from_label(cls, label: str) -> "ErrorType":
        """Map serialized codes or long labels ("decomposition error") to a member."""
        key = label.strip().lower()
        for member in cls:
            if key == member.value:
                return member
        if "decomposition" in key:
            return cls.DECOMPOSITION
        if "selection" in key:
            return cls.TOOL_SELECTION
        if "argument" in key:
            return cls.TOOL_ARGUMENTS
        raise ValueError(f"unrecognized error type: {label!r}")


def _sorted_unique(tokens: Iterable[str]) -> tuple[str, ...]:
    return tuple(sorted(set(tokens)))


@dataclass(frozen=True)
class ToolScope:
    """Which tools a rule applies to: nothing specific, a tool list, or a category."""

    kind: str  # "unscoped" | "tools" | "category"
    tools: tuple[str, ...] = ()
    category: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("unscoped", "tools", "category"):
            raise ValueError(f"bad scope kind: {self.kind!r}")
        if self.kind == "tools" and not self.tools:
            raise ValueError("tools scope requires a non-empty tool list")
        if self.kind == "category" and not self.category:
            raise ValueError("category scope requires a category token")
        object.__setattr__(self, "tools", _sorted_unique(self.tools))

    @classmethod
    def unscoped(cls) -> "ToolScope":
        return cls("unscoped")

    @classmethod
    def of_tools(cls, names: Iterable[str]) -> "ToolScope":
        return cls("tools", tools=tuple(names))

    @classmethod
    def of_category(cls, token: str) -> "ToolScope":
        return cls("category", category=token)

    def to_json(self) -> dict:
        if self.kind == "tools":
            return {"kind": "tools", "tools": list(self.tools)}
        if self.kind == "category":
            return {"kind": "category", "category": self.category}
        return {"kind": "unscoped"}

    @classmethod
    def from_json(cls, obj: dict) -> "ToolScope":
        kind = obj.get("kind", "unscoped")
        if kind == "tools":
            return cls.of_tools(obj["tools"])
        if kind == "category":
            return cls.of_category(obj["category"])
        return cls.unscoped()


@dataclass(frozen=True)
class ConditionClause:
    """One condition: domain equality, qualifier membership, or tool-category equality."""

    field: str  # DOMAIN | QUALIFIER | TOOL_CATEGORY
    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.field not in (DOMAIN, QUALIFIER, TOOL_CATEGORY):
            raise ValueError(f"bad clause field: {self.field!r}")
        if not self.tokens:
            raise ValueError("clause requires at least one token")
        if self.field != QUALIFIER and len(self.tokens) != 1:
            raise ValueError(f"{self.field} clause takes exactly one token")
        object.__setattr__(self, "tokens", _sorted_unique(self.tokens))

    @classmethod
    def domain_is(cls, token: str) -> "ConditionClause":
        return cls(DOMAIN, (token,))

    @classmethod
    def qualifier_any_of(cls, tokens: Iterable[str]) -> "ConditionClause":
        return cls(QUALIFIER, tuple(tokens))

    @classmethod
    def tool_category_is(cls, token: str) -> "ConditionClause":
        return cls(TOOL_CATEGORY, (token,))

    def render(self) -> str:
        if self.field == QUALIFIER:
            return f"qualifier=[{', '.join(self.tokens)}]"
        return f"{self.field}={self.tokens[0]}"


@dataclass(frozen=True)
class SymbolicForm:
    """Parsed symbolic rule: condition clauses, connectives, actions, strength."""

    clauses: tuple[ConditionClause, ...]
    connectives: tuple[str, ...]
    actions: tuple[str, ...]
    strength: str

    def __post_init__(self):
        if not self.clauses:
            raise ValueError("symbolic form requires at least one clause")
        if not self.actions:
            raise ValueError("symbolic form requires at least one action")
        if len(self.connectives) != len(self.clauses) - 1:
            raise ValueError("connective count must be clause count minus one")
        for conn in self.connectives:
            if conn not in ("and", "or"):
                raise ValueError(f"bad connective: {conn!r}")
        if sum(1 for c in self.clauses if c.field == DOMAIN) > 1:
            raise ValueError("at most one domain clause")
        if sum(1 for c in self.clauses if c.field == QUALIFIER) > 1:
            raise ValueError("at most one qualifier clause")
        object.__setattr__(self, "actions", _sorted_unique(self.actions))

    def clause_of(self, field_name: str) -> Optional[ConditionClause]:
        for clause in self.clauses:
            if clause.field == field_name:
                return clause
        return None

    @property
    def domain(self) -> Optional[str]:
        clause = self.clause_of(DOMAIN)
        return clause.tokens[0] if clause else None

    @property
    def qualifiers(self) -> tuple[str, ...]:
        clause = self.clause_of(QUALIFIER)
        return clause.tokens if clause else ()

    @property
    def tool_categories(self) -> tuple[str, ...]:
        return _sorted_unique(
            t for c in self.clauses if c.field == TOOL_CATEGORY for t in c.tokens
        )

    def condition_tokens(self) -> tuple[str, ...]:
        """All tokens on the condition side, in clause order."""
        return tuple(t for c in self.clauses for t in c.tokens)

    def all_tokens(self) -> tuple[str, ...]:
        return self.condition_tokens() + self.actions + (self.strength,)


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------

BASE_STRENGTHS = frozenset({"MANDATORY", "RECOMMENDED", "OPTIONAL"})


@dataclass(frozen=True)
class Vocabulary:
    """Versioned closed token sets for the five semantic fields."""

    version: str
    domain: frozenset[str] = frozenset()
    qualifier: frozenset[str] = frozenset()
    action: frozenset[str] = frozenset()
    strength: frozenset[str] = frozenset()
    tool_category: frozenset[str] = frozenset()

    def __post_init__(self):
        for name in (DOMAIN, QUALIFIER, ACTION, STRENGTH, TOOL_CATEGORY):
            object.__setattr__(self, name, frozenset(getattr(self, name)))

    def field_tokens(self, field_name: str) -> frozenset[str]:
        return getattr(self, field_name)

    def contains(self, field_name: str, token: str) -> bool:
        return token in self.field_tokens(field_name)

    @property
    def total_size(self) -> int:
        return sum(len(self.field_tokens(f)) for f in FIELDS)

    def token_universe(self) -> tuple[str, ...]:
        universe: set[str] = set()
        for f in FIELDS:
            universe |= self.field_tokens(f)
        return tuple(sorted(universe))

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "domain": sorted(self.domain),
            "qualifier": sorted(self.qualifier),
            "action": sorted(self.action),
            "strength": sorted(self.strength),
            "tool_category": sorted(self.tool_category),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(
            version=obj.get("version") or obj.get("vocab_version") or "v1",
            domain=frozenset(obj.get("domain", ())),
            qualifier=frozenset(obj.get("qualifier", ())),
            action=frozenset(obj.get("action", ())),
            strength=frozenset(obj.get("strength", ())),
            tool_category=frozenset(obj.get("tool_category", ())),
        )

    def save(self, path: str | Path):
        Path(path).write_text(
            json.dumps(self.to_json(), indent=2, ensure_ascii=False) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def from_forms(cls, forms: Iterable[SymbolicForm], version: str = "scan") -> "Vocabulary":
        """Build the minimal vocabulary covering the given forms."""
        fields: dict[str, set[str]] = {f: set() for f in FIELDS}
        for form in forms:
            for clause in form.clauses:
                fields[clause.field].update(clause.tokens)
            fields[ACTION].update(form.actions)
            fields[STRENGTH].add(form.strength)
        return cls(
            version=version,
            domain=frozenset(fields[DOMAIN]),
            qualifier=frozenset(fields[QUALIFIER]),
            action=frozenset(fields[ACTION]),
            strength=frozenset(fields[STRENGTH]),
            tool_category=frozenset(fields[TOOL_CATEGORY]),
        )


# ---------------------------------------------------------------------------
# Rules and libraries
# ---------------------------------------------------------------------------


def rule_id_for(nl_text: str) -> str:
    """Stable rule id: content hash of the natural-language text."""
    return hashlib.sha256(nl_text.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class Rule:
    """A learned rule in both natural-language and symbolic form."""

    id: str
    nl_text: str
    error_type: ErrorType
    tool_scope: ToolScope = field(default_factory=ToolScope.unscoped)
    symbolic: Optional[SymbolicForm] = None
    provenance: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.nl_text:
            raise ValueError("rule requires non-empty nl_text")
        if self.id != rule_id_for(self.nl_text):
            raise ValueError("rule id must be the content hash of nl_text")
        object.__setattr__(self, "provenance", _sorted_unique(self.provenance))

    @classmethod
    def from_nl(
        cls,
        nl_text: str,
        error_type: ErrorType,
        tool_scope: Optional[ToolScope] = None,
        symbolic: Optional[SymbolicForm] = None,
        provenance: Iterable[str] = (),
    ) -> "Rule":
        return cls(
            id=rule_id_for(nl_text),
            nl_text=nl_text,
            error_type=error_type,
            tool_scope=tool_scope or ToolScope.unscoped(),
            symbolic=symbolic,
            provenance=tuple(provenance),
        )

    def with_symbolic(self, form: SymbolicForm) -> "Rule":
        return Rule(self.id, self.nl_text, self.error_type, self.tool_scope, form, self.provenance)

    def with_scope(self, scope: ToolScope) -> "Rule":
        return Rule(self.id, self.nl_text, self.error_type, scope, self.symbolic, self.provenance)

    def with_provenance(self, extra: Iterable[str]) -> "Rule":
        merged = self.provenance + tuple(extra)
        return Rule(self.id, self.nl_text, self.error_type, self.tool_scope, self.symbolic, merged)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "nl_text": self.nl_text,
            "symbolic": serialize_symbolic(self.symbolic) if self.symbolic else None,
            "error_type": self.error_type.value,
            "tool_scope": self.tool_scope.to_json(),
            "provenance": list(self.provenance),
        }

    @classmethod
    def from_json(cls, obj: dict, vocab: Optional[Vocabulary] = None) -> "Rule":
        symbolic = None
        if obj.get("symbolic"):
            symbolic = parse_symbolic(obj["symbolic"], vocab)
        return cls(
            id=obj["id"],
            nl_text=obj["nl_text"],
            error_type=ErrorType.from_label(obj["error_type"]),
            tool_scope=ToolScope.from_json(obj.get("tool_scope", {})),
            symbolic=symbolic,
            provenance=tuple(obj.get("provenance", ())),
        )


@dataclass(frozen=True)
class RuleLibrary:
    """Ordered, deduplicated rule collection; the unit MDL operates on."""

    rules: tuple[Rule, ...] = ()
    vocab_version: str = ""

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))
        ids = [r.id for r in self.rules]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate rule ids in library")

    def __len__(self) -> int:
        return len(self.rules)

    def __iter__(self):
        return iter(self.rules)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(r.id for r in self.rules)

    @property
    def library_hash(self) -> str:
        """Digest over sorted rule ids; recomputed from current contents."""
        joined = "\n".join(sorted(self.ids))
        return hashlib.sha256(joined.encode("utf-8")).hexdigest()[:16]

    @property
    def state_digest(self) -> str:
        """Digest that also covers scopes and symbolic forms.

        Scope edits keep rule ids (ids hash only nl_text), so caches keyed by
        library_hash alone would conflate pre- and post-edit libraries.
        """
        parts = []
        for rule in sorted(self.rules, key=lambda r: r.id):
            sym = serialize_symbolic(rule.symbolic) if rule.symbolic else ""
            parts.append(f"{rule.id}|{rule.tool_scope.to_json()}|{sym}")
        return hashlib.sha256("\n".join(parts).encode("utf-8")).hexdigest()[:16]

    def get(self, rule_id: str) -> Rule:
        for rule in self.rules:
            if rule.id == rule_id:
                return rule
        raise KeyError(rule_id)

    def without(self, rule_id: str) -> "RuleLibrary":
        return RuleLibrary(tuple(r for r in self.rules if r.id != rule_id), self.vocab_version)

    def with_rule_scope(self, rule_id: str, scope: ToolScope) -> "RuleLibrary":
        return RuleLibrary(
            tuple(r.with_scope(scope) if r.id == rule_id else r for r in self.rules),
            self.vocab_version,
        )

    def to_json(self) -> dict:
        return {
            "vocab_version": self.vocab_version,
            "rules": [r.to_json() for r in self.rules],
        }

    @classmethod
    def from_json(cls, obj: dict, vocab: Optional[Vocabulary] = None) -> "RuleLibrary":
        return cls(
            rules=tuple(Rule.from_json(r, vocab) for r in obj.get("rules", ())),
            vocab_version=obj.get("vocab_version", ""),
        )

    def save(self, path: str | Path):
        Path(path).write_text(
            json.dumps(self.to_json(), indent=2, ensure_ascii=False) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path, vocab: Optional[Vocabulary] = None) -> "RuleLibrary":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")), vocab)


# ---------------------------------------------------------------------------
# Grammar: tokenizer + recursive-descent parser
# ---------------------------------------------------------------------------

_KEYWORDS = frozenset(
    {"if", "and", "or", "then", "with", "action", "strength", DOMAIN, QUALIFIER, TOOL_CATEGORY}
)

_LEXEME_RE = re.compile(r"[A-Za-z0-9_]+|[()\[\],=]")


class _Lexer:
    def __init__(self, text: str):
        self.text = text
        self.items: list[tuple[str, int]] = []
        pos = 0
        while pos < len(text):
            ch = text[pos]
            if ch.isspace():
                pos += 1
                continue
            m = _LEXEME_RE.match(text, pos)
            if not m:
                raise RuleSyntaxError(f"unexpected character {ch!r}", pos, "token or punctuation")
            self.items.append((m.group(0), pos))
            pos = m.end()
        self.index = 0

    def peek(self) -> tuple[str, int]:
        if self.index < len(self.items):
            return self.items[self.index]
        return ("", len(self.text))

    def next(self) -> tuple[str, int]:
        item = self.peek()
        if self.index < len(self.items):
            self.index += 1
        return item

    def expect(self, lexeme: str, expected: str):
        got, pos = self.next()
        if got != lexeme:
            raise RuleSyntaxError(f"got {got!r}", pos, expected)
        return pos


def _expect_token(lexer: _Lexer, what: str) -> str:
    got, pos = lexer.next()
    if not TOKEN_RE.match(got):
        raise RuleSyntaxError(f"got {got!r}", pos, what)
    return got


def _parse_token_list(lexer: _Lexer, what: str) -> list[str]:
    lexer.expect("[", "'['")
    tokens: list[str] = []
    nxt, pos = lexer.peek()
    if nxt == "]":
        lexer.next()
        raise RuleSyntaxError(f"empty {what} list", pos, what)
    while True:
        tokens.append(_expect_token(lexer, what))
        nxt, pos = lexer.next()
        if nxt == "]":
            return tokens
        if nxt != ",":
            raise RuleSyntaxError(f"got {nxt!r}", pos, "',' or ']'")


def _parse_clause(lexer: _Lexer) -> ConditionClause:
    name, pos = lexer.next()
    if name == DOMAIN:
        lexer.expect("=", "'='")
        return ConditionClause.domain_is(_expect_token(lexer, "domain token"))
    if name == QUALIFIER:
        lexer.expect("=", "'='")
        return ConditionClause.qualifier_any_of(_parse_token_list(lexer, "qualifier"))
    if name == TOOL_CATEGORY:
        lexer.expect("=", "'='")
        return ConditionClause.tool_category_is(_expect_token(lexer, "tool_category token"))
    raise RuleSyntaxError(f"got {name!r}", pos, "clause field (domain/qualifier/tool_category)")


def parse_symbolic(text: str, vocab: Optional[Vocabulary] = None) -> SymbolicForm:
    """Parse one symbolic rule string.

    With a vocabulary, every token is validated against its field; without
    one, only grammar and token format are checked.
    """
    lexer = _Lexer(text)
    lexer.expect("if", "'if'")
    lexer.expect("(", "'('")

    clauses = [_parse_clause(lexer)]
    connectives: list[str] = []
    while True:
        nxt, pos = lexer.next()
        if nxt == ")":
            break
        if nxt not in ("and", "or"):
            raise RuleSyntaxError(f"got {nxt!r}", pos, "'and', 'or', or ')'")
        connectives.append(nxt)
        clause = _parse_clause(lexer)
        if clause.field == DOMAIN and any(c.field == DOMAIN for c in clauses):
            raise RuleSyntaxError("duplicate domain clause", pos, "distinct clause field")
        if clause.field == QUALIFIER and any(c.field == QUALIFIER for c in clauses):
            raise RuleSyntaxError("duplicate qualifier clause", pos, "distinct clause field")
        clauses.append(clause)

    lexer.expect("then", "'then'")
    lexer.expect("(", "'('")
    lexer.expect("action", "'action'")
    lexer.expect("=", "'='")
    actions = _parse_token_list(lexer, "action")
    lexer.expect(")", "')'")
    lexer.expect("with", "'with'")
    lexer.expect("strength", "'strength'")
    lexer.expect("=", "'='")
    strength = _expect_token(lexer, "strength token")

    trailing, pos = lexer.peek()
    if trailing:
        raise RuleSyntaxError(f"trailing input {trailing!r}", pos, "end of rule")

    form = SymbolicForm(tuple(clauses), tuple(connectives), tuple(actions), strength)
    if vocab is not None:
        _validate_form_tokens(form, vocab)
    return form


def _validate_form_tokens(form: SymbolicForm, vocab: Vocabulary):
    for clause in form.clauses:
        for token in clause.tokens:
            if not vocab.contains(clause.field, token):
                raise UnknownTokenError(clause.field, token)
    for token in form.actions:
        if not vocab.contains(ACTION, token):
            raise UnknownTokenError(ACTION, token)
    if not vocab.contains(STRENGTH, form.strength):
        raise UnknownTokenError(STRENGTH, form.strength)


def serialize_symbolic(form: SymbolicForm) -> str:
    """Canonical string for a symbolic form; parse_symbolic round-trips it."""
    condition = form.clauses[0].render()
    for conn, clause in zip(form.connectives, form.clauses[1:]):
        condition += f" {conn} {clause.render()}"
    actions = ", ".join(form.actions)
    return f"if ({condition}) then (action=[{actions}]) with strength={form.strength}"


# ---------------------------------------------------------------------------
# Token length and validation
# ---------------------------------------------------------------------------


def symbolic_token_length(rule: Rule) -> int:
    """Semantic token count of a rule's symbolic form plus its scope cost.

    Structural keywords and connectives are free; the scope contributes the
    tool-list size for a tools scope, 1 for a category scope, 0 otherwise.
    """
    if rule.symbolic is None:
        raise MissingSymbolicFormError(f"rule {rule.id} has no symbolic form")
    form = rule.symbolic
    count = sum(len(clause.tokens) for clause in form.clauses)
    count += len(form.actions)
    count += 1  # strength
    if rule.tool_scope.kind == "tools":
        count += len(rule.tool_scope.tools)
    elif rule.tool_scope.kind == "category":
        count += 1
    return count


def validate_rule(rule: Rule, vocab: Vocabulary) -> list[str]:
    """Collect every invariant violation; an empty list means the rule is valid."""
    violations: list[str] = []
    if not rule.nl_text.strip():
        violations.append("nl_text is empty")
    if rule.error_type is ErrorType.DECOMPOSITION and rule.tool_scope.kind != "unscoped":
        violations.append("decomposition rules are unscoped")
    if rule.tool_scope.kind == "category":
        token = rule.tool_scope.category or ""
        if not TOKEN_RE.match(token):
            violations.append(f"token format: scope category {token!r}")
        elif not vocab.contains(TOOL_CATEGORY, token):
            violations.append(f"unknown tool_category token: {token!r}")
    if rule.symbolic is None:
        return violations

    form = rule.symbolic
    for clause in form.clauses:
        for token in clause.tokens:
            if not TOKEN_RE.match(token):
                violations.append(f"token format: {clause.field} {token!r}")
            elif not vocab.contains(clause.field, token):
                violations.append(f"unknown {clause.field} token: {token!r}")
    for token in form.actions:
        if not TOKEN_RE.match(token):
            violations.append(f"token format: action {token!r}")
        elif not vocab.contains(ACTION, token):
            violations.append(f"unknown action token: {token!r}")
    if not TOKEN_RE.match(form.strength):
        violations.append(f"token format: strength {form.strength!r}")
    elif not vocab.contains(STRENGTH, form.strength):
        violations.append(f"unknown strength token: {form.strength!r}")
    return violations
