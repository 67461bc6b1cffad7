"""Single boundary to language-model backends.

Hosts the prompt templates used by the pipeline, a chat-completions HTTP
client with retries, a deterministic scripted mock for offline runs, JSON
extraction from model chatter, and an append-only call log.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

from .errors import (
    AuthError,
    GatewayError,
    GatewayTimeoutError,
    MalformedModelOutputError,
    UnboundPlaceholderError,
)

ENV_API_BASE = "RIMRULE_API_BASE"
ENV_API_KEY = "RIMRULE_API_KEY"
ENV_MODEL = "RIMRULE_MODEL"


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Prompt templates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptTemplate:
    """A named prompt body with literal placeholder markers."""

    name: str
    body: str
    placeholders: dict[str, str]  # binding name -> literal marker in body

    def render(self, bindings: dict[str, str]) -> str:
        """Substitute every marker in a single pass.

        Binding values are inserted verbatim and never re-expanded, so a
        value containing a marker-like string is safe.
        """
        missing = [name for name in self.placeholders if name not in bindings]
        if missing:
            raise UnboundPlaceholderError(missing[0])
        marker_to_name = {marker: name for name, marker in self.placeholders.items()}
        pattern = re.compile("|".join(re.escape(m) for m in self.placeholders.values()))
        return pattern.sub(lambda m: str(bindings[marker_to_name[m.group(0)]]), self.body)


def _load_body(name: str) -> str:
    return (
        resources.files("rimrule")
        .joinpath(f"templates/{name}.txt")
        .read_text(encoding="utf-8")
        .rstrip("\n")
    )


TEMPLATES: dict[str, PromptTemplate] = {
    "rule_generation": PromptTemplate(
        name="rule_generation",
        body=_load_body("rule_generation"),
        placeholders={
            "user_query": "[INSERT USER QUERY]",
            "tool_schema_json": "[INSERT TOOL SCHEMA JSON]",
            "agent_trace": "[INSERT TOOL AGENT TRACE]",
            "groundtruth_trace": "[INSERT GROUNDTRUTH TRACE]",
        },
    ),
    "vocab_create": PromptTemplate(
        name="vocab_create",
        body=_load_body("vocab_create"),
        placeholders={"rule_bullets": "[INSERT_BULLETS_HERE]"},
    ),
    "vocab_update": PromptTemplate(
        name="vocab_update",
        body=_load_body("vocab_update"),
        placeholders={
            "current_domains": "[INSERT CURRENT DOMAINS OR 'None yet']",
            "current_qualifiers": "[INSERT CURRENT QUALIFIERS OR 'None yet']",
            "current_actions": "[INSERT CURRENT ACTIONS OR 'None yet']",
            "current_strengths": "[INSERT CURRENT STRENGTHS OR 'None yet']",
            "current_tool_categories": "[INSERT CURRENT TOOL_CATEGORIES OR 'None yet']",
            "new_rule_bullets": "[INSERT NEW RULE BULLETS HERE]",
        },
    ),
    "rule_classification": PromptTemplate(
        name="rule_classification",
        body=_load_body("rule_classification"),
        placeholders={
            "domain_list": "[INSERT domain list]",
            "qualifier_list": "[INSERT qualifier list]",
            "action_list": "[INSERT action list]",
            "strength_list": "[INSERT strength list]",
            "tool_category_list": "[INSERT tool_category list]",
            "rule_json": "[INSERT RULE OBJECT AS JSON]",
        },
    ),
}


def get_template(name: str) -> PromptTemplate:
    return TEMPLATES[name]


def render(template: Union[str, PromptTemplate], bindings: dict[str, str]) -> str:
    if isinstance(template, str):
        template = get_template(template)
    return template.render(bindings)


# ---------------------------------------------------------------------------
# Call log
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CallRecord:
    template: str
    prompt_hash: str
    response: str
    latency_ms: int
    attempts: int

    def to_json(self) -> dict:
        return {
            "template": self.template,
            "prompt_hash": self.prompt_hash,
            "response": self.response,
            "latency_ms": self.latency_ms,
            "attempts": self.attempts,
        }


class CallLog:
    """Append-only record of gateway calls; writes are serialized."""

    def __init__(self, path: Optional[str | Path] = None):
        self.path = Path(path) if path else None
        self.records: list[CallRecord] = []
        self._lock = threading.Lock()

    def append(self, record: CallRecord):
        with self._lock:
            self.records.append(record)
            if self.path:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record.to_json(), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Gateways
# ---------------------------------------------------------------------------


@dataclass
class GatewayConfig:
    endpoint: str = ""
    model: str = ""
    api_key_env: str = ENV_API_KEY
    timeout_s: float = 60.0
    max_retries: int = 2
    temperature: float = 0.0
    backoff_s: float = 0.5

    def __post_init__(self):
        if self.timeout_s <= 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    @classmethod
    def from_env(cls, **overrides) -> "GatewayConfig":
        cfg = cls(
            endpoint=os.environ.get(ENV_API_BASE, ""),
            model=os.environ.get(ENV_MODEL, ""),
        )
        for key, value in overrides.items():
            setattr(cfg, key, value)
        return cfg


class HttpGateway:
    """Chat-completions-style HTTP client with bounded retries."""

    def __init__(self, config: GatewayConfig, call_log: Optional[CallLog] = None, session=None):
        if not config.endpoint:
            raise ValueError("gateway endpoint not configured")
        self.config = config
        self.call_log = call_log
        if session is None:
            import requests

            session = requests.Session()
        self.session = session
        self._max_in_flight = threading.Semaphore(16)

    def complete(self, prompt: str, tag: str = "") -> str:
        cfg = self.config
        payload = {
            "model": cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": cfg.temperature,
        }
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(cfg.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"

        start = time.perf_counter()
        last_error: Optional[Exception] = None
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                time.sleep(cfg.backoff_s * (2 ** (attempt - 1)))
            try:
                with self._max_in_flight:
                    resp = self.session.post(
                        cfg.endpoint, json=payload, headers=headers, timeout=cfg.timeout_s
                    )
                if resp.status_code in (401, 403):
                    raise AuthError(f"backend returned {resp.status_code}")
                if resp.status_code >= 400:
                    raise GatewayError(f"backend returned {resp.status_code}")
                text = resp.json()["choices"][0]["message"]["content"]
                self._log(tag, prompt, text, start, attempt + 1)
                return text
            except AuthError:
                raise
            except GatewayError as exc:
                last_error = exc
            except Exception as exc:  # transport failure; retry
                if type(exc).__name__ == "Timeout":
                    last_error = GatewayTimeoutError(str(exc))
                else:
                    last_error = exc
        if isinstance(last_error, GatewayTimeoutError):
            raise last_error
        raise GatewayError(f"call failed after {cfg.max_retries + 1} attempts: {last_error}")

    def _log(self, tag: str, prompt: str, response: str, start: float, attempts: int):
        if self.call_log:
            self.call_log.append(
                CallRecord(
                    template=tag,
                    prompt_hash=prompt_hash(prompt),
                    response=response,
                    latency_ms=int((time.perf_counter() - start) * 1000),
                    attempts=attempts,
                )
            )


Responder = Union[str, Exception, Callable[[str], str]]


class MockGateway:
    """Deterministic scripted backend: identical prompt, identical response.

    Responses are resolved in order: exact prompt-hash map, then substring
    matchers (first match wins), then the default.
    """

    def __init__(
        self,
        by_hash: Optional[dict[str, Responder]] = None,
        matchers: Sequence[tuple[Union[str, tuple[str, ...]], Responder]] = (),
        default: Optional[Responder] = None,
        call_log: Optional[CallLog] = None,
    ):
        self.by_hash = dict(by_hash or {})
        self.matchers = list(matchers)
        self.default = default
        self.call_log = call_log
        self.calls: list[str] = []
        self._lock = threading.Lock()

    @classmethod
    def from_script(cls, obj: dict, call_log: Optional[CallLog] = None) -> "MockGateway":
        matchers = [
            (tuple(m["contains"]) if isinstance(m["contains"], list) else m["contains"], m["response"])
            for m in obj.get("matchers", ())
        ]
        return cls(
            by_hash=obj.get("by_hash", {}),
            matchers=matchers,
            default=obj.get("default"),
            call_log=call_log,
        )

    def _resolve(self, prompt: str) -> Responder:
        key = prompt_hash(prompt)
        if key in self.by_hash:
            return self.by_hash[key]
        for needle, responder in self.matchers:
            needles = (needle,) if isinstance(needle, str) else needle
            if all(n in prompt for n in needles):
                return responder
        if self.default is not None:
            return self.default
        raise GatewayError(f"no scripted response for prompt hash {key[:12]}")

    def complete(self, prompt: str, tag: str = "") -> str:
        with self._lock:
            self.calls.append(prompt)
        responder = self._resolve(prompt)
        if isinstance(responder, Exception):
            raise responder
        text = responder(prompt) if callable(responder) else responder
        if self.call_log:
            self.call_log.append(
                CallRecord(
                    template=tag,
                    prompt_hash=prompt_hash(prompt),
                    response=text,
                    latency_ms=0,
                    attempts=1,
                )
            )
        return text


# ---------------------------------------------------------------------------
# Output parsing
# ---------------------------------------------------------------------------

_DECODER = json.JSONDecoder()


def extract_json(response: str) -> dict:
    """Return the first balanced top-level JSON object in the response.

    Surrounding prose and code fences are tolerated.
    """
    objects = extract_json_objects(response, first_only=True)
    if not objects:
        raise MalformedModelOutputError("no JSON object found in model output", response)
    return objects[0]


def extract_json_objects(response: str, first_only: bool = False) -> list[dict]:
    """All balanced top-level JSON objects in the response, in order."""
    objects: list[dict] = []
    pos = 0
    while True:
        start = response.find("{", pos)
        if start < 0:
            return objects
        try:
            value, end = _DECODER.raw_decode(response, start)
        except ValueError:
            pos = start + 1
            continue
        if isinstance(value, dict):
            objects.append(value)
            if first_only:
                return objects
        pos = end
