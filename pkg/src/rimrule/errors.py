"""Exception types shared across the package."""


class RimRuleError(Exception):
    """Base class for all rimrule errors."""


class RuleSyntaxError(RimRuleError):
    """Symbolic rule text does not match the grammar."""

    def __init__(self, message: str, position: int, expected: str):
        super().__init__(f"{message} at position {position} (expected {expected})")
        self.position = position
        self.expected = expected


class UnknownTokenError(RimRuleError):
    """A token is absent from the vocabulary field it was used in."""

    def __init__(self, field: str, token: str):
        super().__init__(f"unknown {field} token: {token!r}")
        self.field = field
        self.token = token


class MissingSymbolicFormError(RimRuleError):
    """Operation requires a rule that has been translated to symbolic form."""


class GatewayError(RimRuleError):
    """Model backend call failed after exhausting retries."""


class AuthError(GatewayError):
    """Model backend rejected the credentials."""


class GatewayTimeoutError(GatewayError):
    """Model backend did not answer within the configured timeout."""


class MalformedModelOutputError(RimRuleError):
    """Model output could not be parsed into the expected structure."""

    def __init__(self, message: str, output: str = ""):
        super().__init__(message)
        self.output = output


class UnboundPlaceholderError(RimRuleError):
    """A prompt template placeholder was left without a binding."""

    def __init__(self, name: str):
        super().__init__(f"unbound placeholder: {name}")
        self.name = name


class SchemaError(RimRuleError):
    """A dataset line failed validation."""

    def __init__(self, line: int, field: str, message: str = ""):
        detail = f": {message}" if message else ""
        super().__init__(f"line {line}, field {field!r}{detail}")
        self.line = line
        self.field = field


class InfeasibleSplitError(RimRuleError):
    """Requested split cannot be constructed from the dataset."""


class OracleError(RimRuleError):
    """Correction oracle could not evaluate a failure."""

    def __init__(self, failure_id: str, message: str):
        super().__init__(f"oracle failed on {failure_id}: {message}")
        self.failure_id = failure_id


class AgentError(RimRuleError):
    """Agent run aborted before producing a final answer."""
