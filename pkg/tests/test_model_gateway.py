import json
from pathlib import Path

import pytest

from rimrule.errors import (
    AuthError,
    GatewayError,
    MalformedModelOutputError,
    UnboundPlaceholderError,
)
from rimrule.model_gateway import (
    CallLog,
    GatewayConfig,
    HttpGateway,
    MockGateway,
    TEMPLATES,
    extract_json,
    extract_json_objects,
    get_template,
    prompt_hash,
    render,
)

FIXTURES = Path(__file__).parent / "fixtures" / "prompts"


class TestTemplates:
    @pytest.mark.parametrize(
        "name", ["rule_generation", "vocab_create", "vocab_update", "rule_classification"]
    )
    def test_templates_match_reference_fixtures(self, name):
        shipped = get_template(name).body
        reference = (FIXTURES / f"{name}.txt").read_text(encoding="utf-8").rstrip("\n")
        assert shipped == reference

    def test_every_placeholder_marker_is_in_the_body(self):
        for template in TEMPLATES.values():
            for marker in template.placeholders.values():
                assert marker in template.body, (template.name, marker)

    def test_render_substitutes_all_payloads(self):
        bindings = {
            "user_query": "QUERY-PAYLOAD",
            "tool_schema_json": "SCHEMA-PAYLOAD",
            "agent_trace": "TRACE-PAYLOAD",
            "groundtruth_trace": "GOLD-PAYLOAD",
        }
        prompt = render("rule_generation", bindings)
        for payload in bindings.values():
            assert payload in prompt
        assert "[INSERT" not in prompt

    def test_missing_binding_raises(self):
        with pytest.raises(UnboundPlaceholderError) as err:
            render(
                "rule_generation",
                {
                    "user_query": "q",
                    "tool_schema_json": "s",
                    "agent_trace": "t",
                },
            )
        assert err.value.name == "groundtruth_trace"

    def test_binding_containing_marker_is_not_reexpanded(self):
        bindings = {
            "user_query": "literal [INSERT TOOL SCHEMA JSON] stays",
            "tool_schema_json": "S",
            "agent_trace": "T",
            "groundtruth_trace": "G",
        }
        prompt = render("rule_generation", bindings)
        assert "literal [INSERT TOOL SCHEMA JSON] stays" in prompt
        # the real marker slot still got its own binding
        assert "2. The available tools         S" in prompt


class TestMockGateway:
    def test_scripted_hash_map(self):
        prompt = "what is up"
        gw = MockGateway(by_hash={prompt_hash(prompt): "scripted"})
        assert gw.complete(prompt) == "scripted"

    def test_substring_matchers_first_match_wins(self):
        gw = MockGateway(matchers=[("alpha", "A"), (("alpha", "beta"), "AB"), ("beta", "B")])
        assert gw.complete("alpha beta") == "A"
        assert gw.complete("only beta") == "B"

    def test_identical_prompt_identical_response(self):
        gw = MockGateway(default="same")
        assert gw.complete("x") == gw.complete("x")

    def test_unscripted_prompt_raises(self):
        gw = MockGateway()
        with pytest.raises(GatewayError):
            gw.complete("nothing matches")

    def test_scripted_exception_raises(self):
        gw = MockGateway(matchers=[("boom", GatewayError("scripted failure"))])
        with pytest.raises(GatewayError):
            gw.complete("boom")


class _FakeResponse:
    def __init__(self, status_code=200, content="ok"):
        self.status_code = status_code
        self._content = content

    def json(self):
        return {"choices": [{"message": {"content": self._content}}]}


class _FakeSession:
    """Session whose post() pops scripted outcomes (exceptions or responses)."""

    def __init__(self, outcomes):
        self.outcomes = list(outcomes)
        self.requests = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.requests.append({"url": url, "json": json, "headers": headers})
        outcome = self.outcomes.pop(0)
        if isinstance(outcome, Exception):
            raise outcome
        return outcome


def _config(**kw):
    defaults = dict(endpoint="http://backend/v1/chat", model="m", backoff_s=0.0)
    defaults.update(kw)
    return GatewayConfig(**defaults)


class TestHttpGateway:
    def test_posts_chat_completions_payload(self):
        session = _FakeSession([_FakeResponse(content="hello")])
        gw = HttpGateway(_config(), session=session)
        assert gw.complete("hi") == "hello"
        payload = session.requests[0]["json"]
        assert payload["model"] == "m"
        assert payload["messages"] == [{"role": "user", "content": "hi"}]
        assert payload["temperature"] == 0.0

    def test_transient_failure_then_success_counts_attempts(self):
        log = CallLog()
        session = _FakeSession([ConnectionError("refused"), _FakeResponse(content="late")])
        gw = HttpGateway(_config(max_retries=1), call_log=log, session=session)
        assert gw.complete("hi") == "late"
        assert log.records[0].attempts == 2

    def test_no_retries_surfaces_gateway_error(self):
        session = _FakeSession([ConnectionError("refused")])
        gw = HttpGateway(_config(max_retries=0), session=session)
        with pytest.raises(GatewayError):
            gw.complete("hi")

    def test_auth_error_not_retried(self):
        session = _FakeSession([_FakeResponse(status_code=401), _FakeResponse()])
        gw = HttpGateway(_config(max_retries=3), session=session)
        with pytest.raises(AuthError):
            gw.complete("hi")
        assert len(session.requests) == 1

    def test_call_log_file_is_jsonl(self, tmp_path):
        log_path = tmp_path / "calls.jsonl"
        log = CallLog(log_path)
        session = _FakeSession([_FakeResponse(content="resp")])
        gw = HttpGateway(_config(), call_log=log, session=session)
        gw.complete("hi", tag="unit")
        record = json.loads(log_path.read_text().splitlines()[0])
        assert record["template"] == "unit"
        assert record["response"] == "resp"


class TestExtractJson:
    def test_fenced_block(self):
        response = (
            "Here is the analysis: the agent failed to decompose.\n"
            "```json\n"
            '{"new_rule": "If the query involves X, then decompose.", '
            '"error_type": "decomposition error"}\n'
            "```"
        )
        obj = extract_json(response)
        assert obj["error_type"] == "decomposition error"

    def test_no_braces_raises(self):
        with pytest.raises(MalformedModelOutputError):
            extract_json("no json here at all")

    def test_first_of_two_objects_returned(self):
        obj = extract_json('{"a": 1} and then {"b": 2}')
        assert obj == {"a": 1}

    def test_all_objects_enumerated(self):
        objs = extract_json_objects('x {"a": 1} y {"b": {"nested": true}} z')
        assert objs == [{"a": 1}, {"b": {"nested": True}}]

    def test_prose_braces_skipped(self):
        objs = extract_json_objects("set {1,2} is not json but {\"k\": 3} is")
        assert objs == [{"k": 3}]
