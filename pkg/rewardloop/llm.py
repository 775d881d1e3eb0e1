"""
Chat-completion backends and candidate extraction.

`HttpBackend` talks to any OpenAI-compatible server; `MockBackend` replays
a scripted JSONL file keyed by (round, index[, attempt]) so whole runs can
be reproduced without a model.
"""

import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional, Protocol

import requests

from rewardloop.config import BackendKind, LlmConfig
from rewardloop.reward_dsl import (
    RewardArityError,
    RewardDslError,
    RewardLexError,
    RewardProgram,
    RewardSyntaxError,
    VariableCatalog,
    compile_reward,
)
from rewardloop.utils import read_jsonl

logger = logging.getLogger(__name__)

CHAT_COMPLETIONS_PATH = "/chat/completions"
RETRYABLE_STATUS = (408, 409, 429, 500, 502, 503, 504)

_FENCE_RE = re.compile(r"```([^\n`]*)\n(.*?)```", re.DOTALL)


class LlmError(Exception):
    """Base class of model bridge errors."""


class TransportError(LlmError):
    pass


class MalformedResponseError(LlmError):
    pass


class NoCodeBlockError(LlmError):
    pass


class MockScriptError(LlmError):
    pass


class PromptPreconditionError(LlmError):
    pass


class ParseStatus(Enum):
    OK = "ok"
    NO_CODE_BLOCK = "no_code_block"
    PARSE_ERROR = "parse_error"
    CHECK_ERROR = "check_error"


@dataclass(frozen=True)
class CandidateSource:
    raw_response: str
    extracted_source: Optional[str]
    parse_status: ParseStatus
    error_detail: Optional[str] = None
    program: Optional[RewardProgram] = field(default=None, compare=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "raw_response": self.raw_response,
            "extracted_source": self.extracted_source,
            "parse_status": self.parse_status.value,
            "error_detail": self.error_detail,
        }


def extract_code(response: str) -> str:
    """First ```reward block, else the first untagged block, trimmed."""
    untagged = None
    for m in _FENCE_RE.finditer(response):
        tag = m.group(1).strip().lower()
        if tag == "reward":
            return m.group(2).strip()
        if tag == "" and untagged is None:
            untagged = m.group(2).strip()
    if untagged is None:
        raise NoCodeBlockError("response contains no fenced code block")
    return untagged


def to_candidate(response: str, schema: VariableCatalog) -> CandidateSource:
    try:
        source = extract_code(response)
    except NoCodeBlockError as e:
        return CandidateSource(response, None, ParseStatus.NO_CODE_BLOCK, str(e))

    try:
        program = compile_reward(source, schema)
    except RewardDslError as e:
        # lexing, syntax and arity problems are parse errors, the rest come from checking
        status = (
            ParseStatus.PARSE_ERROR
            if isinstance(e, (RewardLexError, RewardSyntaxError, RewardArityError))
            else ParseStatus.CHECK_ERROR
        )
        return CandidateSource(response, source, status, str(e))
    return CandidateSource(response, source, ParseStatus.OK, None, program)


class Backend(Protocol):
    def complete(self, messages: list[dict[str, str]], round_index: int, sample_index: int, attempt: int) -> str: ...


class HttpBackend:
    def __init__(self, config: LlmConfig, session: Optional[requests.Session] = None):
        self.config = config
        self.session = session or requests.Session()
        self.url = config.resolved_base_url().rstrip("/") + CHAT_COMPLETIONS_PATH

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = LlmConfig.api_key()
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, messages, round_index: int, sample_index: int, attempt: int) -> str:
        payload = {
            "model": self.config.model,
            "messages": messages,
            "temperature": self.config.temperature,
            "n": 1,
        }
        last_error: Optional[Exception] = None
        for retry in range(self.config.max_retries + 1):
            try:
                response = self.session.post(
                    self.url,
                    json=payload,
                    headers=self._headers(),
                    timeout=self.config.timeout_seconds,
                )
            except requests.RequestException as e:
                last_error = e
            else:
                if response.status_code < 400:
                    return _parse_envelope(response)
                last_error = TransportError(f"HTTP {response.status_code}: {response.text[:500]}")
                if response.status_code not in RETRYABLE_STATUS:
                    raise last_error

            if retry < self.config.max_retries:
                wait = self.config.backoff_seconds * (2**retry)
                logger.info(
                    "request round=%d sample=%d failed (%s), retrying in %.1fs",
                    round_index, sample_index, last_error, wait,
                )
                time.sleep(wait)

        raise TransportError(
            f"chat completion failed after {self.config.max_retries + 1} attempts: {last_error}"
        )


def _parse_envelope(response: requests.Response) -> str:
    try:
        data = response.json()
        content = data["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as e:
        raise MalformedResponseError(f"unexpected response envelope: {e}")
    if not isinstance(content, str):
        raise MalformedResponseError("message content is not text")
    return content


class MockBackend:
    """Replays records {round, index, response_text[, attempt]} from a JSONL file."""

    def __init__(self, script_path: str):
        self.script_path = script_path
        self.responses: dict[tuple[int, int, int], str] = {}
        try:
            records = read_jsonl(script_path)
        except (OSError, ValueError) as e:
            raise MockScriptError(f"cannot read mock script {script_path}: {e}")
        for rec in records:
            try:
                key = (int(rec["round"]), int(rec["index"]), int(rec.get("attempt", 0)))
                text = rec["response_text"]
            except (KeyError, TypeError, ValueError) as e:
                raise MockScriptError(f"bad mock record {rec}: {e}")
            self.responses[key] = str(text)

    def complete(self, messages, round_index: int, sample_index: int, attempt: int) -> str:
        for key in ((round_index, sample_index, attempt), (round_index, sample_index, 0)):
            if key in self.responses:
                return self.responses[key]
        raise MockScriptError(
            f"mock script {self.script_path} has no response for round {round_index} index {sample_index}"
        )


def make_backend(config: LlmConfig) -> Backend:
    match config.backend:
        case BackendKind.MOCK:
            if not config.mock_script:
                raise MockScriptError("the mock backend needs llm.mock_script")
            return MockBackend(config.mock_script)
        case _:
            return HttpBackend(config)


def sample_rewards(
    messages: list[dict[str, str]],
    k: int,
    backend: Backend,
    schema: VariableCatalog,
    round_index: int = 1,
    attempt: int = 0,
    parallelism: int = 4,
) -> list[CandidateSource]:
    """
    Request `k` independent completions and turn each into a candidate.

    Results are ordered by sample index. Transport failures propagate;
    unusable responses only mark their own candidate.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")

    def one(index: int) -> CandidateSource:
        text = backend.complete(messages, round_index, index, attempt)
        return to_candidate(text, schema)

    workers = max(1, min(parallelism, k))
    if workers == 1:
        return [one(i) for i in range(k)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(k)))
