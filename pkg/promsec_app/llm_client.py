"""
LLM clients for code generation and prompt inference.

Three interchangeable clients share one ``complete(messages)`` contract:

- ``ScriptedLlmClient`` answers from an ordered JSON rule file and is fully
  deterministic; it backs tests and hermetic benchmark runs.
- ``HttpLlmClient`` posts to a chat-completions endpoint with a bearer
  credential read from the configured environment variable, retrying
  transient failures with exponential back-off.
- ``HuggingFaceLlmClient`` goes through ``huggingface_hub.InferenceClient``.

The module-level operations (``generate_code``, ``infer_prompt``) append exactly
one ``LlmExchange`` to a ``CostLog`` per call, including failed calls.
"""
import json
import logging
import os
import re
import threading
import time
import uuid
from dataclasses import asdict, dataclass, field
from string import Template

import requests
from django.conf import settings
from django.template import Context, Engine
from huggingface_hub import InferenceClient
from tenacity import RetryError, Retrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from .code_parser import SourceUnit
from .utils import PipelineError, data_path, read_text

logger = logging.getLogger(__name__)

SCRIPTED = 'scripted'
HTTP = 'http'
HUGGINGFACE = 'huggingface'
CLIENT_KINDS = (SCRIPTED, HTTP, HUGGINGFACE)

INITIAL = 'initial'
INFERRED = 'inferred'
REWRITE = 'rewrite'

SYSTEM_INSTRUCTION = (
    "You are a coding assistant. Reply with the complete program only, "
    "in exactly one fenced code block, with no explanation."
)
INFER_INSTRUCTION = (
    "Analyze the codebase and estimate a detailed prompt that could have generated it. "
    "Reply with the prompt only."
)
REWRITE_INSTRUCTION = "Rewrite the following code so that it is secure and keeps its behavior:"

_FENCE_RE = re.compile(r'```[\w+.-]*[ \t]*\n(.*?)```', re.DOTALL)
_TOKEN_RE = re.compile(r'[^\W]+|[^\w\s]')
_FUNCTION_RE = re.compile(r'^\s*def\s+([A-Za-z_]\w*)', re.MULTILINE)
_SECTION_RE = re.compile(r'^\[T(\d+)\]\s*$', re.MULTILINE)
_RETRYABLE_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


class LlmError(PipelineError):
    pass


class HttpError(LlmError):
    pass


class LlmTimeout(LlmError):
    pass


class NoCodeBlock(LlmError):
    pass


class MissingCredential(LlmError):
    pass


class EmptyCode(LlmError):
    pass


class ScriptedRuleError(LlmError):
    pass


class _RetryableStatus(Exception):
    def __init__(self, status, body):
        self.status = status
        super().__init__(f"HTTP {status}: {body[:200]}")


def count_tokens(text):
    """Word runs plus one token per punctuation character"""
    return len(_TOKEN_RE.findall(text or ''))


def extract_code(reply):
    """Body of the first fenced code block in a reply"""
    match = _FENCE_RE.search(reply or '')
    if not match:
        raise NoCodeBlock("reply contains no fenced code block", reply=reply or '')
    code = match.group(1)
    return code if code.endswith('\n') else code + '\n'


def function_names(code):
    return _FUNCTION_RE.findall(code or '')


# ==================== Records ====================

@dataclass(frozen=True)
class PromptRecord:
    text: str
    role: str = INITIAL
    iteration: int = 0
    parent: str = None
    id: str = field(default_factory=lambda: uuid.uuid4().hex[:12])

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise LlmError("prompt text must not be empty")
        if self.iteration < 0:
            raise LlmError(f"prompt iteration must be >= 0, got {self.iteration}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**{k: data[k] for k in ('text', 'role', 'iteration', 'parent', 'id') if k in data})


def rewrite_prompt(unit, iteration=0):
    """Prompt asking to rewrite given code; used when a run starts from code"""
    return PromptRecord(f"{REWRITE_INSTRUCTION}\n```python\n{unit.text.rstrip()}\n```",
                        role=REWRITE, iteration=iteration)


@dataclass(frozen=True)
class LlmExchange:
    purpose: str
    messages: list
    reply: str
    input_tokens: int
    output_tokens: int
    latency: float
    client: str
    error: str = None

    def to_dict(self):
        data = asdict(self)
        data['messages'] = [dict(m) for m in self.messages]
        return data


class CostLog:
    """Append-only exchange log; appends are serialized"""

    def __init__(self):
        self._lock = threading.Lock()
        self._exchanges = []

    def append(self, exchange):
        with self._lock:
            self._exchanges.append(exchange)

    def __len__(self):
        with self._lock:
            return len(self._exchanges)

    def __iter__(self):
        with self._lock:
            return iter(list(self._exchanges))

    def since(self, mark):
        with self._lock:
            return list(self._exchanges[mark:])

    def totals(self, exchanges=None):
        exchanges = list(self) if exchanges is None else exchanges
        return {
            'queries': len(exchanges),
            'input_tokens': sum(e.input_tokens for e in exchanges),
            'output_tokens': sum(e.output_tokens for e in exchanges),
            'seconds': sum(e.latency for e in exchanges),
        }

    def by_purpose(self):
        groups = {}
        for e in self:
            groups.setdefault(e.purpose, []).append(e)
        return {purpose: self.totals(items) for purpose, items in sorted(groups.items())}


# ==================== Configuration ====================

@dataclass(frozen=True)
class LlmConfig:
    client: str = SCRIPTED
    endpoint: str = 'https://api.openai.com/v1/chat/completions'
    model: str = 'gpt-3.5-turbo'
    credential_env: str = 'PROMSEC_LLM_API_KEY'
    temperature: float = 0.0
    timeout: float = 60.0
    max_retries: int = 3
    scripted_rules: str = None
    max_tokens: int = 1024

    def __post_init__(self):
        if self.client not in CLIENT_KINDS:
            raise LlmError(f"unknown LLM client {self.client!r}, expected one of {', '.join(CLIENT_KINDS)}")
        if not self.timeout or self.timeout <= 0:
            raise LlmError(f"LLM timeout must be > 0, got {self.timeout}")
        if self.max_retries < 0:
            raise LlmError(f"LLM retries must be >= 0, got {self.max_retries}")

    @classmethod
    def from_settings(cls, **overrides):
        values = {
            'client': settings.PROMSEC_LLM_CLIENT,
            'endpoint': settings.PROMSEC_LLM_ENDPOINT,
            'model': settings.PROMSEC_LLM_MODEL,
            'credential_env': settings.PROMSEC_LLM_CREDENTIAL_ENV,
            'temperature': settings.PROMSEC_LLM_TEMPERATURE,
            'timeout': settings.PROMSEC_LLM_TIMEOUT,
            'max_retries': settings.PROMSEC_LLM_MAX_RETRIES,
            'scripted_rules': settings.PROMSEC_LLM_SCRIPTED_RULES,
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_dict(self):
        # only the variable name is recorded, never its value
        return asdict(self)

    def credential(self):
        value = os.environ.get(self.credential_env)
        if not value:
            raise MissingCredential(f"environment variable {self.credential_env} is not set")
        return value


# ==================== Clients ====================

class BaseLlmClient:
    name = ''

    def __init__(self, config=None):
        self.config = config or LlmConfig(client=self.name)
        self.cost_log = CostLog()

    def complete(self, messages):
        """Reply text and provider usage ({'input_tokens', 'output_tokens'} or None)"""
        raise NotImplementedError


@dataclass
class ScriptedRule:
    name: str
    patterns: list
    response: str = None
    responses: list = None
    match: str = 'substring'
    rewrites: list = None

    def __post_init__(self):
        if self.match not in ('substring', 'regex'):
            raise ScriptedRuleError(f"rule {self.name}: unknown match mode {self.match!r}")
        if not self.response and not self.responses:
            raise ScriptedRuleError(f"rule {self.name} has no response")
        if self.match == 'regex':
            try:
                self._compiled = [re.compile(p, re.DOTALL) for p in self.patterns]
            except re.error as e:
                raise ScriptedRuleError(f"rule {self.name}: bad pattern: {e}")
        try:
            self._rewrites = [(re.compile(p, re.MULTILINE), r) for p, r in self.rewrites or ()]
        except (re.error, TypeError, ValueError) as e:
            raise ScriptedRuleError(f"rule {self.name}: bad rewrite: {e}")

    @classmethod
    def load(cls, data):
        try:
            return cls(name=data.get('name', ''), patterns=list(data['patterns']),
                       response=data.get('response'), responses=data.get('responses'),
                       match=data.get('match', 'substring'), rewrites=data.get('rewrites'))
        except (KeyError, TypeError) as e:
            raise ScriptedRuleError(f"scripted rule entry is malformed: {e}")

    @property
    def is_catch_all(self):
        if self.match == 'regex':
            return any(p in ('.*', '') for p in self.patterns)
        return '' in self.patterns

    def matches(self, text):
        if self.match == 'regex':
            return any(p.search(text) for p in self._compiled)
        return any(p in text for p in self.patterns)

    def reply(self, turn):
        """Response for the turn-th match of this rule (0-based); the last response repeats"""
        if self.responses:
            return self.responses[min(turn, len(self.responses) - 1)]
        return self.response

    def rewrite(self, code):
        """Apply the rule's (pattern, replacement) pairs to the code it echoes"""
        for pattern, replacement in self._rewrites:
            code = pattern.sub(replacement, code)
        return code


class ScriptedLlmClient(BaseLlmClient):
    """
    Deterministic stand-in for an LLM.

    The last user message is matched against the rules in order; the first
    match answers. Responses may use ``${prompt}``, ``${code}`` (first fenced
    block of the message, after the rule's ``rewrites``) and ``${functions}``.
    """
    name = SCRIPTED

    def __init__(self, rules=None, config=None):
        super().__init__(config)
        if rules is None:
            rules = self.load_rules(self.config.scripted_rules or data_path('scripted_rules.json'))
        self.rules = [r if isinstance(r, ScriptedRule) else ScriptedRule.load(r) for r in rules]
        if not self.rules or not self.rules[-1].is_catch_all:
            raise ScriptedRuleError("scripted rules must end with a catch-all rule")
        self._turns = {}
        self._lock = threading.Lock()

    @staticmethod
    def load_rules(path):
        try:
            data = json.loads(read_text(path))
        except (PipelineError, ValueError) as e:
            raise ScriptedRuleError(f"cannot read scripted rules {path}: {e}")
        if not isinstance(data, list):
            raise ScriptedRuleError("scripted rules must be a JSON array")
        return [ScriptedRule.load(entry) for entry in data]

    def complete(self, messages):
        text = next((m['content'] for m in reversed(messages) if m['role'] == 'user'), '')
        for index, rule in enumerate(self.rules):
            if rule.matches(text):
                with self._lock:
                    turn = self._turns.get(index, 0)
                    self._turns[index] = turn + 1
                match = _FENCE_RE.search(text)
                code = rule.rewrite(match.group(1).rstrip('\n')) if match else ''
                reply = Template(rule.reply(turn)).safe_substitute(
                    prompt=text, code=code, functions=', '.join(function_names(code)) or 'none',
                )
                logger.debug("Scripted rule %s answered turn %d", rule.name, turn)
                return reply, None
        raise ScriptedRuleError("no scripted rule matched")

    def reset(self):
        with self._lock:
            self._turns.clear()


class HttpLlmClient(BaseLlmClient):
    """Chat-completions endpoint over requests, retried with tenacity"""
    name = HTTP

    def __init__(self, config=None, session=None):
        super().__init__(config)
        self.session = session or requests.Session()

    def _post(self, payload, headers):
        try:
            response = self.session.post(self.config.endpoint, json=payload, headers=headers,
                                         timeout=self.config.timeout)
        except requests.Timeout as e:
            raise LlmTimeout(f"LLM request timed out after {self.config.timeout}s") from e
        if response.status_code in _RETRYABLE_STATUS:
            raise _RetryableStatus(response.status_code, response.text)
        if response.status_code >= 400:
            raise HttpError(f"LLM endpoint returned HTTP {response.status_code}", status=response.status_code)
        return response.json()

    def complete(self, messages):
        headers = {
            'Content-Type': 'application/json',
            'Authorization': f"Bearer {self.config.credential()}",
        }
        payload = {
            'model': self.config.model,
            'messages': messages,
            'temperature': self.config.temperature,
        }
        retrying = Retrying(
            retry=retry_if_exception_type((_RetryableStatus, requests.ConnectionError, LlmTimeout)),
            wait=wait_exponential(multiplier=1, min=1, max=30),
            stop=stop_after_attempt(self.config.max_retries + 1),
            reraise=True,
        )
        try:
            data = retrying(self._post, payload, headers)
        except _RetryableStatus as e:
            raise HttpError(f"LLM endpoint kept failing: {e}", status=e.status)
        except requests.RequestException as e:
            raise HttpError(f"LLM request failed: {type(e).__name__}")
        except (RetryError, ValueError) as e:
            raise HttpError(f"LLM endpoint returned an unusable reply: {type(e).__name__}")
        choices = data.get('choices') or []
        if not choices:
            raise HttpError("LLM endpoint returned no choices")
        content = (choices[0].get('message') or {}).get('content') or ''
        usage = data.get('usage')
        if usage:
            usage = {'input_tokens': usage.get('prompt_tokens', 0),
                     'output_tokens': usage.get('completion_tokens', 0)}
        return content, usage


class HuggingFaceLlmClient(BaseLlmClient):
    """Chat completion through the HuggingFace Inference API"""
    name = HUGGINGFACE

    def __init__(self, config=None, client=None):
        super().__init__(config)
        self.client = client or InferenceClient(model=self.config.model, token=self.config.credential(),
                                                timeout=self.config.timeout)

    def complete(self, messages):
        try:
            response = self.client.chat_completion(
                messages=messages,
                temperature=self.config.temperature,
                max_tokens=self.config.max_tokens,
            )
        except Exception as e:
            error = str(e)
            if 'timeout' in error.lower() or 'timed out' in error.lower():
                raise LlmTimeout("HuggingFace request timed out")
            raise HttpError(f"HuggingFace request failed: {type(e).__name__}")
        content = response.choices[0].message.content or ''
        usage = getattr(response, 'usage', None)
        if usage:
            usage = {'input_tokens': usage.prompt_tokens or 0, 'output_tokens': usage.completion_tokens or 0}
        return content, usage


def make_client(config=None):
    config = config or LlmConfig.from_settings()
    if config.client == HTTP:
        return HttpLlmClient(config)
    if config.client == HUGGINGFACE:
        return HuggingFaceLlmClient(config)
    return ScriptedLlmClient(config=config)


# ==================== Operations ====================

def _exchange(client, purpose, messages, cost_log):
    """Run one completion and record it whatever the outcome"""
    log = cost_log if cost_log is not None else client.cost_log
    input_tokens = sum(count_tokens(m['content']) for m in messages)
    started = time.monotonic()
    reply, usage, error = '', None, None
    try:
        reply, usage = client.complete(messages)
    except LlmError as e:
        error = e
    latency = time.monotonic() - started
    if usage:
        input_tokens, output_tokens = usage['input_tokens'], usage['output_tokens']
    else:
        output_tokens = count_tokens(reply)
    log.append(LlmExchange(purpose, messages, reply, input_tokens, output_tokens, latency,
                           client.name, type(error).__name__ if error else None))
    if error is not None:
        logger.warning("LLM %s via %s failed: %s", purpose, client.name, error)
        raise error
    return reply


def generate_code(client, prompt, cost_log=None, unit_id=None):
    """Ask for code; the first fenced block of the reply becomes the unit"""
    messages = [
        {'role': 'system', 'content': SYSTEM_INSTRUCTION},
        {'role': 'user', 'content': prompt.text},
    ]
    reply = _exchange(client, 'generate', messages, cost_log)
    code = extract_code(reply)
    return SourceUnit.from_text(code, origin='llm-generated', id=unit_id)


def infer_prompt(client, code, iteration=0, parent=None, cost_log=None):
    """Ask for the prompt that could have produced the code"""
    if not code.text.strip():
        raise EmptyCode("cannot infer a prompt for empty code")
    messages = [
        {'role': 'system', 'content': INFER_INSTRUCTION},
        {'role': 'user', 'content': f"{INFER_INSTRUCTION}\n```python\n{code.text.rstrip()}\n```"},
    ]
    reply = _exchange(client, 'infer', messages, cost_log).strip()
    if not reply:
        raise LlmError("LLM returned an empty prompt")
    return PromptRecord(reply, role=INFERRED, iteration=iteration, parent=parent)


# ==================== Context templates ====================

_BL_TEMPLATES = None


def load_bl_templates(path=None):
    """Template sources keyed 1..7 from the sectioned text file"""
    text = read_text(path or data_path('bl_templates.txt'))
    parts = _SECTION_RE.split(text)
    templates = {}
    for i in range(1, len(parts) - 1, 2):
        templates[int(parts[i])] = parts[i + 1].strip('\n')
    if sorted(templates) != list(range(1, 8)):
        raise LlmError(f"template file must define T1..T7, found {sorted(templates)}")
    return templates


def bl_templates():
    global _BL_TEMPLATES
    if _BL_TEMPLATES is None:
        engine = Engine(autoescape=False)
        _BL_TEMPLATES = {k: engine.from_string(src) for k, src in load_bl_templates().items()}
    return _BL_TEMPLATES


def render_bl_template(index, base, report, iteration=None):
    """
    Base prompt plus the context degree of template ``index``.

    1 adds nothing; 2 lines; 3 CWE ids; 4 ids and lines; 5 lines and
    confidence; 6 ids and confidence; 7 ids, lines and confidence.
    """
    templates = bl_templates()
    if index not in templates:
        raise LlmError(f"template index must be in 1..7, got {index}")
    findings = [{'line': f.line, 'cwe_id': f"CWE-{f.cwe}", 'confidence': f.confidence}
                for f in report.findings]
    context = Context({
        'prompt': base.text,
        'lines': ', '.join(str(line) for line in sorted({f.line for f in report.findings})) or 'none',
        'cwes': ', '.join(f"CWE-{cwe}" for cwe in report.cwes()) or 'none',
        'findings': findings,
    })
    text = templates[index].render(context)
    return PromptRecord(text, role=f"template-{index}",
                        iteration=base.iteration if iteration is None else iteration, parent=base.id)
