import json
from pathlib import Path

import pytest

from rimrule.rule_core import Vocabulary

FIXTURES = Path(__file__).parent / "fixtures"

# Normalized form of the case-study rule's symbolic rendering; the condition
# mixes a domain clause with a tool-category clause through an "or".
CASE_STUDY_SYMBOLIC = (
    "if (domain=FAMILIAL_RELATIONSHIP or tool_category=GENEALOGY_QUERY) "
    "then (action=[DECOMPOSE_QUERY, RESOLVE_INTERMEDIATE_ENTITY, SEQUENCE_SUBTASKS]) "
    "with strength=MANDATORY"
)

CASE_STUDY_NL = (
    "If the user query involves identifying a specific familial relationship "
    "(e.g., maternal grandfather), then decompose the task by first resolving "
    "intermediate relationships (e.g., mother, father) sequentially."
)


def load_sample_symbolic_rules() -> list[str]:
    text = (FIXTURES / "sample_symbolic_rules.txt").read_text(encoding="utf-8")
    return [line for line in text.splitlines() if line.strip()]


@pytest.fixture
def sample_symbolic_rules() -> list[str]:
    return load_sample_symbolic_rules()


@pytest.fixture
def small_vocab() -> Vocabulary:
    return Vocabulary(
        version="v1",
        domain=frozenset({"RELATIONSHIP_RESOLUTION", "FAMILIAL_RELATIONSHIP", "INVENTORY_MANAGEMENT"}),
        qualifier=frozenset(
            {"RELATIONSHIP_CHAIN_TRAVERSAL", "INTERMEDIATE_ENTITY_IDENTIFICATION", "STOCK_CHECK"}
        ),
        action=frozenset(
            {"DECOMPOSE_QUERY", "RESOLVE_INTERMEDIATE_ENTITY", "SEQUENCE_SUBTASKS", "SELECT_TOOL_BASED_ON_QUERY"}
        ),
        strength=frozenset({"MANDATORY", "RECOMMENDED", "OPTIONAL"}),
        tool_category=frozenset({"GENEALOGY_QUERY", "INVENTORY_QUERY"}),
    )


def write_jsonl(path: Path, objs) -> Path:
    with path.open("w", encoding="utf-8") as fh:
        for obj in objs:
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")
    return path


def make_random_form(rng, vocab: Vocabulary):
    """Random valid SymbolicForm drawn from a vocabulary."""
    from rimrule.rule_core import ConditionClause, SymbolicForm

    clauses = []
    if rng.random() < 0.8:
        clauses.append(ConditionClause.domain_is(rng.choice(sorted(vocab.domain))))
    if rng.random() < 0.7:
        pool = sorted(vocab.qualifier)
        count = rng.randint(1, min(3, len(pool)))
        clauses.append(ConditionClause.qualifier_any_of(rng.sample(pool, count)))
    if rng.random() < 0.4 or not clauses:
        clauses.append(ConditionClause.tool_category_is(rng.choice(sorted(vocab.tool_category))))
    rng.shuffle(clauses)
    connectives = tuple(rng.choice(["and", "or"]) for _ in range(len(clauses) - 1))
    actions_pool = sorted(vocab.action)
    actions = rng.sample(actions_pool, rng.randint(1, min(3, len(actions_pool))))
    strength = rng.choice(sorted(vocab.strength))
    return SymbolicForm(tuple(clauses), connectives, tuple(actions), strength)


def make_random_rule(rng, vocab: Vocabulary, index: int):
    """Random translated rule; scope drawn across all three kinds."""
    from rimrule.rule_core import ErrorType, Rule, ToolScope

    error_type = rng.choice(list(ErrorType))
    form = make_random_form(rng, vocab)
    if error_type is ErrorType.DECOMPOSITION:
        scope = ToolScope.unscoped()
    else:
        roll = rng.random()
        if roll < 0.4:
            tools = [f"tool_{rng.randint(0, 9)}" for _ in range(rng.randint(1, 3))]
            scope = ToolScope.of_tools(tools)
        elif roll < 0.7:
            scope = ToolScope.of_category(rng.choice(sorted(vocab.tool_category)))
        else:
            scope = ToolScope.unscoped()
    return Rule.from_nl(
        f"If condition {index} holds, then take action {index}.",
        error_type,
        tool_scope=scope,
        symbolic=form,
        provenance=(f"case-{index}",),
    )
