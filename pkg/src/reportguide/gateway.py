"""LLM gateway: one entry point for chat-completion calls.

Two backends share the `complete()` interface. The `http` backend speaks the
OpenAI-compatible chat-completions wire format with bounded retries, a
parallelism cap, and request-rate spacing. The `mock` backend is a pure
function of the request, routed by a sentinel tag embedded in the system
prompt, so every pipeline stage can run offline and byte-reproducibly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field

import requests

from .errors import ConfigError, LLMOutputError, MockContractError, TransportError
from .textnorm import alias_key, is_cjk, match_key

logger = logging.getLogger(__name__)

# Retryable HTTP statuses: rate limiting and server-side failures.
_RETRY_STATUSES = frozenset({429, 500, 502, 503, 504})


@dataclass(frozen=True)
class ChatRequest:
    """A single chat-completion call: one system prompt, one user message."""

    system: str
    user: str
    temperature: float = 0.0
    max_tokens: int = 2048

    def __post_init__(self):
        if self.temperature < 0:
            raise ConfigError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_tokens < 1:
            raise ConfigError(f"max_tokens must be >= 1, got {self.max_tokens}")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    input_tokens: int
    output_tokens: int
    latency_ms: float = 0.0


@dataclass(frozen=True)
class GatewayConfig:
    """Where and how to send chat calls.

    `endpoint` is the full chat-completions URL for the http backend. The API
    key is only ever read from the environment variable named by
    `api_key_env`; the key itself never appears in configs or artifacts.
    `call_log_path`, when set, receives one JSON line per real (http) call.
    """

    backend: str = "mock"
    endpoint: str = ""
    model: str = "mock-clinical-1"
    api_key_env: str = "LLM_API_KEY"
    max_retries: int = 3
    parallelism: int = 4
    requests_per_minute: int = 600
    call_log_path: str | None = None
    retry_base_delay: float = 0.25

    def __post_init__(self):
        if self.backend not in ("mock", "http"):
            raise ConfigError(f"unknown gateway backend {self.backend!r}")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        if self.requests_per_minute < 1:
            raise ConfigError("requests_per_minute must be >= 1")
        if self.backend == "http" and not self.endpoint:
            raise ConfigError("http backend requires an endpoint URL")


def estimate_tokens(text: str) -> int:
    """Deterministic token-count heuristic used for prompt budgeting.

    One token per CJK ideograph plus one per four remaining characters,
    rounded up. Monotone under concatenation; never returns a negative.
    """
    cjk = sum(1 for ch in text if is_cjk(ch))
    latin = len(text) - cjk
    return math.ceil(latin / 4) + cjk


# ---------------------------------------------------------------------------
# Tolerant output parsing
# ---------------------------------------------------------------------------

_FENCE_RE = re.compile(r"```[a-zA-Z0-9_-]*\n?|```")


def strip_code_fences(text: str) -> str:
    return _FENCE_RE.sub("", text)


def _find_json_span(text: str, open_ch: str, close_ch: str) -> str | None:
    start = text.find(open_ch)
    end = text.rfind(close_ch)
    if start == -1 or end == -1 or end <= start:
        return None
    return text[start : end + 1]


def parse_string_list(text: str) -> list[str]:
    """Parse a JSON array of strings out of possibly noisy LLM output.

    Code fences are stripped and prose around the array is ignored. Raises
    LLMOutputError (carrying the raw text) when no valid array is present.
    """
    span = _find_json_span(strip_code_fences(text), "[", "]")
    if span is None:
        raise LLMOutputError("no JSON array found in LLM output", raw_text=text)
    try:
        data = json.loads(span)
    except json.JSONDecodeError as exc:
        raise LLMOutputError(f"invalid JSON array in LLM output: {exc}", raw_text=text) from exc
    if not isinstance(data, list) or not all(isinstance(x, str) for x in data):
        raise LLMOutputError("LLM output is not an array of strings", raw_text=text)
    return data


def parse_string_groups(text: str) -> list[list[str]]:
    """Parse a JSON array of arrays of strings (synonym groups)."""
    span = _find_json_span(strip_code_fences(text), "[", "]")
    if span is None:
        raise LLMOutputError("no JSON array found in LLM output", raw_text=text)
    try:
        data = json.loads(span)
    except json.JSONDecodeError as exc:
        raise LLMOutputError(f"invalid JSON in LLM output: {exc}", raw_text=text) from exc
    if not isinstance(data, list):
        raise LLMOutputError("LLM output is not an array", raw_text=text)
    groups: list[list[str]] = []
    for item in data:
        if not isinstance(item, list) or not item or not all(isinstance(x, str) for x in item):
            raise LLMOutputError("LLM output group is not a non-empty string array", raw_text=text)
        groups.append(list(item))
    return groups


# ---------------------------------------------------------------------------
# Mock backend
# ---------------------------------------------------------------------------

# Sentinel tags routing mock behavior. Prompt files embed exactly one of these.
SENTINEL_EXTRACT = "[task:extract]"
SENTINEL_MERGE = "[task:merge]"
SENTINEL_ANNOTATE = "[task:annotate]"
SENTINEL_ENTITIES = "[task:entities]"

# Keyword -> canonical finding name. Scanning is case-insensitive substring
# matching, so keywords for different findings must never contain each other.
# The lowercased canonical name itself is always an implicit keyword, which
# keeps generated phrases ("X is present.") extractable back to X.
MOCK_LEXICON: tuple[tuple[str, str], ...] = (
    ("pulmonary tuberculosis", "Pulmonary tuberculosis"),
    ("tuberculosis", "Pulmonary tuberculosis"),
    ("pulmonary cavitation", "Pulmonary cavitation"),
    ("cavitation", "Pulmonary cavitation"),
    ("cavity", "Pulmonary cavitation"),
    ("pleural effusion", "Pleural effusion"),
    ("pulmonary infiltrates", "Pulmonary infiltrates"),
    ("infiltrates", "Pulmonary infiltrates"),
    ("pulmonary fibrosis", "Pulmonary fibrosis"),
    ("fibrotic streaking", "Pulmonary fibrosis"),
    ("lymphadenopathy", "Lymphadenopathy"),
    ("enlarged lymph nodes", "Lymphadenopathy"),
    ("pleural thickening", "Pleural thickening"),
    ("thickened pleura", "Pleural thickening"),
    ("calcified granuloma", "Calcified granuloma"),
    ("calcification", "Calcified granuloma"),
    ("consolidation", "Consolidation"),
    ("airspace opacity", "Consolidation"),
    ("atelectasis", "Atelectasis"),
    ("volume loss", "Atelectasis"),
    ("pneumothorax", "Pneumothorax"),
    ("cardiomegaly", "Cardiomegaly"),
    ("enlarged cardiac silhouette", "Cardiomegaly"),
    ("miliary nodules", "Miliary nodules"),
    ("miliary pattern", "Miliary nodules"),
    ("hilar prominence", "Hilar prominence"),
    ("prominent hilum", "Hilar prominence"),
    ("bronchiectasis", "Bronchiectasis"),
    ("apical scarring", "Apical scarring"),
    ("apical scar", "Apical scarring"),
    ("secondary ptb", "secondary PTB"),
    ("right upper field", "right upper field"),
)

# Synonym classes for the mock merge step: variant key -> canonical key.
# Keys are alias_key() forms. The canonical surface is chosen among the
# input labels, so the mock never invents labels that were not offered.
MOCK_SYNONYMS: dict[str, str] = {
    "tb": "pulmonary tuberculosis",
    "tuberculosis": "pulmonary tuberculosis",
    "ptb": "pulmonary tuberculosis",
    "lung cavity": "pulmonary cavitation",
    "cavitation": "pulmonary cavitation",
    "effusion of the pleura": "pleural effusion",
    "infiltrate": "pulmonary infiltrates",
    "infiltrates": "pulmonary infiltrates",
    "fibrosis": "pulmonary fibrosis",
    "enlarged lymph nodes": "lymphadenopathy",
}


def _mock_extract_entities(user_text: str) -> list[str]:
    text = user_text.casefold()
    found: list[str] = []
    for keyword, canonical in MOCK_LEXICON:
        if keyword in text and canonical not in found:
            found.append(canonical)
    return found


def _mock_merge(user_text: str) -> list[list[str]]:
    sets = parse_string_groups(user_text)
    order: list[str] = []  # class keys in first-appearance order
    members: dict[str, list[str]] = {}
    for label_set in sets:
        for label in label_set:
            key = alias_key(label)
            cls = MOCK_SYNONYMS.get(key, key)
            if cls not in members:
                members[cls] = []
                order.append(cls)
            members[cls].append(label)
    groups: list[list[str]] = []
    for cls in order:
        surfaces = members[cls]
        # Prefer the surface whose normalized form names the class; fall back
        # to the first-seen surface so output stays within the input labels.
        canonical = next((s for s in surfaces if alias_key(s) == cls), surfaces[0])
        seen = {alias_key(canonical)}
        group = [canonical]
        for s in surfaces:
            k = alias_key(s)
            if k not in seen:
                seen.add(k)
                group.append(s)
        groups.append(group)
    return groups


def _mock_annotate(user_text: str) -> list[str]:
    span = _find_json_span(user_text, "{", "}")
    if span is None:
        raise MockContractError("annotate request carries no JSON payload")
    try:
        payload = json.loads(span)
    except json.JSONDecodeError as exc:
        raise MockContractError(f"annotate request payload is not valid JSON: {exc}") from exc
    report = payload.get("report", "")
    labels = payload.get("labels", [])
    aliases = payload.get("aliases", {})
    text = str(report).casefold()
    by_canonical: dict[str, list[str]] = {}
    for keyword, canonical in MOCK_LEXICON:
        by_canonical.setdefault(match_key(canonical), []).append(keyword)
    hits: list[str] = []
    for name in labels:
        keywords = [str(name).casefold()]
        keywords += by_canonical.get(match_key(str(name)), [])
        keywords += [str(a).casefold() for a, n in aliases.items() if n == name]
        if any(kw in text for kw in keywords):
            hits.append(str(name))
    return hits


def _mock_complete(request: ChatRequest) -> str:
    if SENTINEL_EXTRACT in request.system:
        return json.dumps(_mock_extract_entities(request.user), ensure_ascii=False)
    if SENTINEL_ENTITIES in request.system:
        return json.dumps(_mock_extract_entities(request.user), ensure_ascii=False)
    if SENTINEL_MERGE in request.system:
        return json.dumps(_mock_merge(request.user), ensure_ascii=False)
    if SENTINEL_ANNOTATE in request.system:
        return json.dumps(_mock_annotate(request.user), ensure_ascii=False)
    raise MockContractError(
        "mock backend received a system prompt without a recognized task sentinel"
    )


# ---------------------------------------------------------------------------
# HTTP backend
# ---------------------------------------------------------------------------


class _Limiter:
    """Shared per-endpoint concurrency cap and request-rate spacing."""

    def __init__(self, parallelism: int, requests_per_minute: int):
        self.semaphore = threading.BoundedSemaphore(parallelism)
        self.min_interval = 60.0 / requests_per_minute
        self._lock = threading.Lock()
        self._next_start = 0.0

    def wait_turn(self) -> None:
        with self._lock:
            now = time.monotonic()
            start_at = max(now, self._next_start)
            self._next_start = start_at + self.min_interval
        delay = start_at - now
        if delay > 0:
            time.sleep(delay)


_LIMITERS: dict[tuple, _Limiter] = {}
_LIMITERS_LOCK = threading.Lock()


def _limiter_for(config: GatewayConfig) -> _Limiter:
    key = (config.endpoint, config.parallelism, config.requests_per_minute)
    with _LIMITERS_LOCK:
        limiter = _LIMITERS.get(key)
        if limiter is None:
            limiter = _Limiter(config.parallelism, config.requests_per_minute)
            _LIMITERS[key] = limiter
        return limiter


def _api_key(config: GatewayConfig) -> str:
    key = os.environ.get(config.api_key_env, "")
    if not key:
        raise ConfigError(
            f"API key environment variable {config.api_key_env!r} is not set"
        )
    return key


def _log_call(config: GatewayConfig, request: ChatRequest, response: ChatResponse) -> None:
    if not config.call_log_path:
        return
    digest = hashlib.sha256((request.system + "\x00" + request.user).encode("utf-8")).hexdigest()
    entry = {
        "request_sha256": digest,
        "model": config.model,
        "input_tokens": response.input_tokens,
        "output_tokens": response.output_tokens,
        "latency_ms": round(response.latency_ms, 3),
        "timestamp": time.time(),
    }
    line = json.dumps(entry, ensure_ascii=False)
    with open(config.call_log_path, "a", encoding="utf-8") as fh:
        fh.write(line + "\n")


def _http_complete(request: ChatRequest, config: GatewayConfig) -> ChatResponse:
    key = _api_key(config)
    limiter = _limiter_for(config)
    payload = {
        "model": config.model,
        "messages": [
            {"role": "system", "content": request.system},
            {"role": "user", "content": request.user},
        ],
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    }
    headers = {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}
    last_error = "no attempt made"
    with limiter.semaphore:
        # max_retries counts retries, so the total attempt budget is one
        # initial try plus max_retries more.
        for attempt in range(config.max_retries + 1):
            if attempt > 0:
                time.sleep(config.retry_base_delay * (2 ** (attempt - 1)))
            limiter.wait_turn()
            started = time.monotonic()
            try:
                resp = requests.post(config.endpoint, json=payload, headers=headers, timeout=120)
            except requests.RequestException as exc:
                last_error = f"transport failure: {exc}"
                logger.warning("gateway attempt %d failed: %s", attempt + 1, last_error)
                continue
            latency_ms = (time.monotonic() - started) * 1000.0
            if resp.status_code in _RETRY_STATUSES:
                last_error = f"retryable HTTP status {resp.status_code}"
                logger.warning("gateway attempt %d failed: %s", attempt + 1, last_error)
                continue
            if resp.status_code != 200:
                raise TransportError(
                    f"gateway request failed with HTTP {resp.status_code}: {resp.text[:500]}"
                )
            try:
                body = resp.json()
                text = body["choices"][0]["message"]["content"]
            except (ValueError, LookupError, TypeError) as exc:
                raise TransportError(f"malformed chat-completion response: {exc}") from exc
            usage = body.get("usage") or {}
            response = ChatResponse(
                text=text,
                input_tokens=int(usage.get("prompt_tokens", estimate_tokens(request.system + request.user))),
                output_tokens=int(usage.get("completion_tokens", estimate_tokens(text))),
                latency_ms=latency_ms,
            )
            _log_call(config, request, response)
            return response
    raise TransportError(
        f"gateway gave up after {config.max_retries + 1} attempts; last error: {last_error}"
    )


def complete(request: ChatRequest, config: GatewayConfig) -> ChatResponse:
    """Run one chat call against the configured backend.

    The mock backend is referentially transparent: the same request always
    yields the same response, which is what makes full pipeline runs
    byte-reproducible.
    """
    if config.backend == "mock":
        text = _mock_complete(request)
        return ChatResponse(
            text=text,
            input_tokens=estimate_tokens(request.system + request.user),
            output_tokens=estimate_tokens(text),
            latency_ms=0.0,
        )
    return _http_complete(request, config)
