"""Rule library engine for tool-use agents.

Distills compact if-then rules from agent failure traces, consolidates them
under a minimum-description-length objective, and retrieves them at
inference time for prompt injection.
"""

from .rule_core import (
    ConditionClause,
    ErrorType,
    Rule,
    RuleLibrary,
    SymbolicForm,
    ToolScope,
    Vocabulary,
    parse_symbolic,
    serialize_symbolic,
    symbolic_token_length,
    validate_rule,
)

__all__ = [
    "ConditionClause",
    "ErrorType",
    "Rule",
    "RuleLibrary",
    "SymbolicForm",
    "ToolScope",
    "Vocabulary",
    "parse_symbolic",
    "serialize_symbolic",
    "symbolic_token_length",
    "validate_rule",
]

__version__ = "0.1.0"
