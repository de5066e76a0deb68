"""Tagged trajectories, tool-call parsing and the multi-turn episode loop.

A trajectory renders to the exact tag format the agent is trained on, e.g.::

    <think>...</think><tool_call>flight_search(...)</tool_call><tool_response>{...}</tool_response>...<answer>...</answer>

Nothing may sit between segments; `parse_trajectory` marks such text (and
any unknown, unbalanced or misordered tag) as malformed.
"""
from __future__ import annotations

import ast
import functools
import json
import logging
import random
import re
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from .domain import Itinerary, ItineraryFormatError, Query, parse_block
from .sandbox import TOOL_SCHEMAS, LiveStream, Sandbox, ToolResponse, call_tool_live

logger = logging.getLogger(__name__)


class SegmentKind(str, Enum):
    THINK = "think"
    TOOL_CALL_THINKING = "tool_call_thinking"
    TOOL_CALL = "tool_call"
    TOOL_RESPONSE = "tool_response"
    TOOL_RESPONSE_THINKING = "tool_response_thinking"
    ANSWER = "answer"


THOUGHT_KINDS = frozenset({SegmentKind.THINK, SegmentKind.TOOL_CALL_THINKING, SegmentKind.TOOL_RESPONSE_THINKING})
TERMINALS = ("answered", "turn_limit", "length_limit", "malformed")
_TAG_RE = re.compile(r"<(/?)([A-Za-z_][A-Za-z0-9_]*)>")
_KIND_BY_TAG = {k.value: k for k in SegmentKind}


class RenderError(ValueError):
    """The trajectory cannot be rendered to the tag format."""


@dataclass(frozen=True)
class Segment:
    kind: SegmentKind
    body: str
    turn_index: int = 0


@dataclass(frozen=True)
class DecisionRecord:
    """One categorical choice: which head, the active features, the valid mask.

    Masked records stand in for environment-injected content; they never
    contribute to likelihoods or gradients.
    """

    head: str
    features: tuple[int, ...]
    valid: tuple[bool, ...]
    choice: int
    log_prob: float = 0.0
    masked: bool = False

    def to_dict(self) -> dict:
        return {"head": self.head, "features": list(self.features), "valid": [int(v) for v in self.valid],
                "choice": self.choice, "log_prob": self.log_prob, "masked": self.masked}

    @classmethod
    def from_dict(cls, data: dict) -> "DecisionRecord":
        return cls(data["head"], tuple(data["features"]), tuple(bool(v) for v in data["valid"]),
                   int(data["choice"]), float(data["log_prob"]), bool(data["masked"]))


@dataclass(frozen=True)
class Trajectory:
    query_id: str
    segments: tuple[Segment, ...]
    terminal: str
    decisions: tuple[DecisionRecord, ...] = ()
    error: str = ""

    @property
    def answer(self) -> str | None:
        if self.segments and self.segments[-1].kind is SegmentKind.ANSWER:
            return self.segments[-1].body
        return None

    @property
    def tool_calls(self) -> int:
        return sum(1 for s in self.segments if s.kind is SegmentKind.TOOL_CALL)

    def turns(self) -> list[tuple[int, str, str | None]]:
        """(turn index, call body, response body or None) for every tool call."""
        out = []
        for i, seg in enumerate(self.segments):
            if seg.kind is SegmentKind.TOOL_CALL:
                nxt = self.segments[i + 1] if i + 1 < len(self.segments) else None
                resp = nxt.body if nxt is not None and nxt.kind is SegmentKind.TOOL_RESPONSE else None
                out.append((seg.turn_index, seg.body, resp))
        return out

    def to_dict(self) -> dict:
        text = render_trajectory(self) if self.terminal != "malformed" else ""
        return {"query_id": self.query_id, "text": text, "terminal": self.terminal,
                "decisions": [d.to_dict() for d in self.decisions], "error": self.error}

    @classmethod
    def from_dict(cls, data: dict) -> "Trajectory":
        parsed = parse_trajectory(data["text"], query_id=data["query_id"])
        terminal = data["terminal"] if parsed.terminal != "malformed" else "malformed"
        return cls(data["query_id"], parsed.segments, terminal,
                   tuple(DecisionRecord.from_dict(d) for d in data.get("decisions", ())),
                   data.get("error", "") or parsed.error)


def _turn_indices(kinds: Sequence[SegmentKind]) -> list[int]:
    out, calls = [], 0
    for kind in kinds:
        if kind in (SegmentKind.TOOL_RESPONSE, SegmentKind.TOOL_RESPONSE_THINKING):
            out.append(max(calls - 1, 0))
        else:
            out.append(calls)
        if kind is SegmentKind.TOOL_CALL:
            calls += 1
    return out


def build_segments(pairs: Iterable[tuple[SegmentKind, str]]) -> tuple[Segment, ...]:
    """Segments with turn indices assigned the same way the parser assigns them."""
    pairs = list(pairs)
    turns = _turn_indices([k for k, _ in pairs])
    return tuple(Segment(k, b, t) for (k, b), t in zip(pairs, turns))


def _ordering_problem(kinds: Sequence[SegmentKind]) -> str | None:
    for i, kind in enumerate(kinds):
        prev = kinds[i - 1] if i else None
        if kind is SegmentKind.TOOL_RESPONSE and prev is not SegmentKind.TOOL_CALL:
            return f"tool_response at segment {i} does not follow a tool_call"
        if prev is SegmentKind.TOOL_CALL and kind is not SegmentKind.TOOL_RESPONSE:
            return f"tool_call at segment {i - 1} has no tool_response"
        if prev is SegmentKind.ANSWER:
            return f"segment {i} follows the answer"
    return None


def parse_trajectory(text: str, query_id: str = "") -> Trajectory:
    """Split tagged text into segments. Problems yield terminal='malformed'."""
    pairs: list[tuple[SegmentKind, str]] = []
    pos = 0

    def malformed(reason: str) -> Trajectory:
        return Trajectory(query_id, build_segments(pairs), "malformed", (), reason)

    while pos < len(text):
        m = _TAG_RE.match(text, pos)
        if m is None:
            return malformed(f"text outside tags at offset {pos}")
        closing, name = m.group(1), m.group(2)
        if closing:
            return malformed(f"unexpected closing tag </{name}> at offset {pos}")
        kind = _KIND_BY_TAG.get(name)
        if kind is None:
            return malformed(f"unknown tag <{name}> at offset {pos}")
        inner = _TAG_RE.search(text, m.end())
        if inner is None:
            return malformed(f"unclosed <{name}> at offset {pos}")
        if inner.group(1) != "/" or inner.group(2) != name:
            return malformed(f"<{name}> at offset {pos} interleaved with <{inner.group(1)}{inner.group(2)}>")
        pairs.append((kind, text[m.end():inner.start()]))
        pos = inner.end()
    kinds = [k for k, _ in pairs]
    problem = _ordering_problem(kinds)
    if problem is None and kinds and kinds[-1] is SegmentKind.TOOL_CALL:
        problem = "trajectory ends with an unanswered tool_call"
    if problem:
        return malformed(problem)
    terminal = "answered" if kinds and kinds[-1] is SegmentKind.ANSWER else "turn_limit"
    return Trajectory(query_id, build_segments(pairs), terminal)


def render_trajectory(trajectory: Trajectory) -> str:
    if trajectory.terminal == "malformed":
        raise RenderError(f"cannot render a malformed trajectory: {trajectory.error}")
    problem = _ordering_problem([s.kind for s in trajectory.segments])
    if problem:
        raise RenderError(problem)
    parts = []
    for seg in trajectory.segments:
        if _TAG_RE.search(seg.body):
            raise RenderError(f"segment body contains a tag delimiter: {seg.body[:40]!r}")
        parts.append(f"<{seg.kind.value}>{seg.body}</{seg.kind.value}>")
    return "".join(parts)


@dataclass(frozen=True)
class FormatReport:
    ok: bool
    diagnostics: tuple[str, ...] = ()

    def __bool__(self) -> bool:
        return self.ok


def validate_format(trajectory: Trajectory) -> FormatReport:
    """Strict format gate used to filter distilled traces."""
    problems: list[str] = []
    if trajectory.terminal == "malformed":
        problems.append(f"malformed: {trajectory.error}")
    kinds = [s.kind for s in trajectory.segments]
    order = _ordering_problem(kinds)
    if order:
        problems.append(order)
    answers = kinds.count(SegmentKind.ANSWER)
    if answers == 0:
        problems.append("missing answer")
    elif answers > 1:
        problems.append("more than one answer")
    elif kinds[-1] is not SegmentKind.ANSWER:
        problems.append("answer is not the final segment")
    for seg in trajectory.segments:
        if _TAG_RE.search(seg.body):
            problems.append(f"tag delimiter inside {seg.kind.value} body")
        if seg.kind is SegmentKind.TOOL_CALL:
            try:
                parse_tool_call(seg.body)
            except ToolCallError as exc:
                problems.append(f"{exc.kind.replace('_', ' ')}: {exc}")
    return FormatReport(not problems, tuple(problems))


# ---------------------------------------------------------------------------
# Tool calls
# ---------------------------------------------------------------------------

_ALIASES = {
    "depart_station": "depart_city", "depart_city_name": "depart_city",
    "arrive_station": "arrival_city", "arrival_station": "arrival_city", "arrival_city_name": "arrival_city",
    "arrive_city": "arrival_city", "origin_name": "origin", "destination_name": "destination",
}
# Tools whose signature takes **kwargs; the others reject unknown keywords.
_OPEN_SIGNATURES = frozenset({"flight_search", "train_search", "hotel_search", "poi_search"})


class ToolCallError(ValueError):
    """A tool call that cannot be executed. `kind` is syntax, unknown_tool or arity."""

    def __init__(self, kind: str, message: str, tool: str = "") -> None:
        super().__init__(message)
        self.kind = kind
        self.tool = tool


@dataclass(frozen=True)
class ToolCall:
    name: str
    args: dict
    extras: dict = field(default_factory=dict)

    def render(self) -> str:
        parts = [f"{k}={json.dumps(v, ensure_ascii=False)}" for k, v in self.args.items() if v is not None]
        parts += [f"{k}={json.dumps(v, ensure_ascii=False)}" for k, v in self.extras.items()]
        return f"{self.name}({', '.join(parts)})"


def _literal(node: ast.AST, tool: str):
    if isinstance(node, ast.Constant) and isinstance(node.value, (str, int, float, bool, type(None))):
        return node.value
    raise ToolCallError("syntax", "arguments must be literal values", tool)


def parse_tool_call(body: str) -> ToolCall:
    """Parse `name(args...)` into a canonical keyword form.

    Both positional and keyword styles are accepted. `hotel_search` with four
    positional arguments takes (city_name, hotel_name, checkin_date, checkout_date).
    """
    call = _parse_tool_call_cached(body)
    return ToolCall(call.name, dict(call.args), dict(call.extras))


@functools.lru_cache(maxsize=65536)
def _parse_tool_call_cached(body: str) -> ToolCall:
    try:
        with warnings.catch_warnings():
            # model text like "1abc" makes the tokenizer warn before it fails
            warnings.simplefilter("ignore", (DeprecationWarning, SyntaxWarning))
            node = ast.parse(body.strip(), mode="eval").body
    except SyntaxError as exc:
        raise ToolCallError("syntax", f"cannot parse tool call: {exc.msg}") from None
    if not isinstance(node, ast.Call) or not isinstance(node.func, ast.Name):
        raise ToolCallError("syntax", "expected a call of the form name(...)")
    name = node.func.id
    if name not in TOOL_SCHEMAS:
        raise ToolCallError("unknown_tool", f"unknown tool {name!r}", name)
    required, optional = TOOL_SCHEMAS[name]
    positional_names = list(required)
    if name == "hotel_search" and len(node.args) == 4:
        positional_names = ["city_name", "hotel_name", "checkin_date", "checkout_date"]
    elif optional:
        positional_names += list(optional)
    if len(node.args) > len(positional_names):
        raise ToolCallError("arity", f"{name} takes at most {len(positional_names)} positional arguments", name)
    values: dict = {}
    for pname, arg in zip(positional_names, node.args):
        if isinstance(arg, ast.Starred):
            raise ToolCallError("syntax", "starred arguments are not allowed", name)
        values[pname] = _literal(arg, name)
    extras: dict = {}
    for kw in node.keywords:
        if kw.arg is None:
            raise ToolCallError("syntax", "** arguments are not allowed", name)
        key = _ALIASES.get(kw.arg, kw.arg)
        target = values if key in required or key in optional else extras
        if key in target:
            raise ToolCallError("arity", f"{name} got multiple values for {key}", name)
        target[key] = _literal(kw.value, name)
    missing = [k for k in required if k not in values]
    if missing:
        raise ToolCallError("arity", f"{name} missing required arguments: {', '.join(missing)}", name)
    if extras and name not in _OPEN_SIGNATURES:
        raise ToolCallError("arity", f"{name} got unexpected keywords: {', '.join(extras)}", name)
    args = {k: values.get(k, optional.get(k)) for k in required + tuple(optional)}
    return ToolCall(name, args, extras)


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeLimits:
    max_turns: int = 8
    max_total_segments: int = 64

    def __post_init__(self) -> None:
        if self.max_turns < 0 or self.max_total_segments <= 0:
            raise ValueError("episode limits must be positive")


@dataclass
class Step:
    """What a policy emits for one turn: a thought plus a tool call or an answer."""

    kind: str
    thought: str
    body: str
    decisions: list[DecisionRecord] = field(default_factory=list)

    @property
    def is_answer(self) -> bool:
        return self.kind == "answer"


class AgentSession(Protocol):
    def act(self, rng: random.Random) -> Step: ...

    def observe(self, call_body: str, response: ToolResponse) -> tuple[str, list[DecisionRecord]]: ...


class Agent(Protocol):
    def begin(self, query: Query) -> AgentSession: ...


class Environment:
    """Executes tool-call text against a sandbox (optionally under live-API flakiness)."""

    def __init__(self, sandbox: Sandbox, live: LiveStream | None = None) -> None:
        self.sandbox = sandbox
        self.live = live
        self.log: list[tuple[str, ToolResponse]] = []

    def execute(self, call_body: str) -> ToolResponse:
        try:
            call = parse_tool_call(call_body)
        except ToolCallError as exc:
            response = ToolResponse.error(exc.tool or "unknown", exc.kind, str(exc))
        else:
            response = call_tool_live(self.sandbox, self.live, call.name, call.args)
        self.log.append((call_body, response))
        return response


def run_episode(agent: Agent, environment: Environment, query: Query, limits: EpisodeLimits,
                rng: random.Random) -> Trajectory:
    """Think/act/observe until the agent answers or a limit is hit."""
    pairs: list[tuple[SegmentKind, str]] = []
    decisions: list[DecisionRecord] = []
    calls = 0

    def done(terminal: str, error: str = "") -> Trajectory:
        return Trajectory(query.id, build_segments(pairs), terminal, tuple(decisions), error)

    try:
        session = agent.begin(query)
        while True:
            step = session.act(rng)
            decisions.extend(step.decisions)
            first = not pairs
            if step.is_answer:
                if len(pairs) + 2 > limits.max_total_segments:
                    return done("length_limit")
                pairs.append((SegmentKind.THINK, step.thought))
                pairs.append((SegmentKind.ANSWER, step.body))
                return done("answered")
            if calls >= limits.max_turns:
                return done("turn_limit")
            if len(pairs) + 4 > limits.max_total_segments:
                return done("length_limit")
            response = environment.execute(step.body)
            reflection, masked = session.observe(step.body, response)
            decisions.extend(masked)
            pairs.append((SegmentKind.THINK if first else SegmentKind.TOOL_CALL_THINKING, step.thought))
            pairs.append((SegmentKind.TOOL_CALL, step.body))
            pairs.append((SegmentKind.TOOL_RESPONSE, response.text))
            pairs.append((SegmentKind.TOOL_RESPONSE_THINKING, reflection))
            calls += 1
    except Exception as exc:  # a broken policy or tool must not take the training loop down
        logger.warning("episode for %s failed: %s", query.id, exc)
        return done("malformed", f"{type(exc).__name__}: {exc}")


@dataclass(frozen=True)
class Extraction:
    itinerary: Itinerary | None
    error: str = ""
    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return self.itinerary is not None


def extract_itinerary(answer_body: str | None, transfer_buffer: int = 0) -> Extraction:
    if answer_body is None:
        return Extraction(None, "no answer")
    try:
        itinerary = parse_block(answer_body)
    except ItineraryFormatError as exc:
        return Extraction(None, str(exc))
    return Extraction(itinerary, "", tuple(itinerary.invariant_violations(transfer_buffer)))


def save_trajectories(trajectories: Iterable[Trajectory], path: str | Path,
                      queries: dict[str, Query] | None = None) -> int:
    """One JSON object per line; the query is embedded when `queries` knows it."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for t in trajectories:
            record = t.to_dict()
            if queries and t.query_id in queries:
                record["query"] = queries[t.query_id].to_dict()
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
            n += 1
    return n


def load_trajectories(path: str | Path) -> list[Trajectory]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(Trajectory.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad trajectory record: {exc}") from None
    return out
