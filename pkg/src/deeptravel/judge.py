"""Client for an external text-completion judge behind the verifier interface.

The endpoint contract is one POST of ``{"prompt": str}`` answered by
``{"completion": str}``. Any network error, timeout or unparseable reply
becomes a `RewardRecord` with ``verifier_failed=True`` and r=0.
"""
from __future__ import annotations

import json
import logging
import re
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass

from .domain import Query
from .protocol import Trajectory
from .sandbox import TOOL_SCHEMAS
from .verifier import Conclusion, RewardRecord, RubricResult, TrajectoryVerdict, TurnVerdict

logger = logging.getLogger(__name__)

TRAJECTORY_RUBRICS = (
    "Is the answer complete?",
    "Is the main requirement understood accurately?",
    "Is the logic sound?",
    "Are other constraints met?",
    "Are specific requirements met?",
    "Emergency backup plan?",
)
TURN_RUBRICS = (
    "Is the tool call parameters/logic correct?",
    "Is the agent's response accurately reflect the tool response?",
)
# Conclusion labels the judge must choose from, mapped to verdicts.
CONCLUSION_LABELS = {
    "Very satisfied": Conclusion.VERY_SATISFIED,
    "Very satisfied but did not address unexpected situations": Conclusion.SATISFIED_NO_CONTINGENCY,
    "Basically satisfied, other constraints or specific requirements were not met": Conclusion.BASIC_CONSTRAINT_MISS,
    "Dissatisfied, logically unreasonable": Conclusion.LOGIC_UNREASONABLE,
    "Dissatisfied, main requirements misunderstood": Conclusion.MAIN_REQUIREMENT_MISREAD,
    "Dissatisfied, incomplete answer": Conclusion.INCOMPLETE_ANSWER,
}
_CONCLUSION_RE = re.compile(r"Final Conclusion:\s*\{*\s*(.+?)\s*\}*\s*$", re.M)


def _tool_lines() -> list[str]:
    lines = []
    for name, (required, optional) in TOOL_SCHEMAS.items():
        params = list(required) + ["**kwargs"] * (name not in ("route_planning", "web_search"))
        lines.append(f"{name}({', '.join(params)})")
    return lines


def trajectory_prompt(query: Query, answer: str) -> str:
    labels = " or ".join("{{{" + label + "}}}" for label in CONCLUSION_LABELS)
    parts = [
        "You judge a travel assistant's final plan against a user's request.",
        f"[Query]\n{query.text}",
        f"[Agent's Response]\n{answer}",
        "Evaluation Rubrics",
        *[f"{i}. [{rubric}]" for i, rubric in enumerate(TRAJECTORY_RUBRICS, 1)],
        "Available Tools",
        *_tool_lines(),
        "Give your reasoning after 'Evaluation Reason:' and then one line",
        f"Final Conclusion: {labels}",
    ]
    return "\n".join(parts)


def turn_prompt(query: Query, answer: str, call: str, response: str | None) -> str:
    parts = [
        "You judge one tool-call turn of a travel assistant.",
        f"[Query]\n{query.text}",
        f"[Agent's Response]\n{answer}",
        f"[Tool call]\n{call}",
        f"[Tool response used for agent's response generation]\n<tool_response>{response or ''}</tool_response>",
        "Evaluation Rubrics",
        *[f"{i}. [{rubric}]" for i, rubric in enumerate(TURN_RUBRICS, 1)],
        "Available Tools",
        *_tool_lines(),
        "Give your reasoning after 'Evaluation Reason:' and then one line",
        "Final Conclusion: Satisfied or Unsatisfied (inconsistent information) or Unsatisfied (tool call logic error)",
    ]
    return "\n".join(parts)


class JudgeError(RuntimeError):
    pass


def parse_conclusion(completion: str) -> Conclusion:
    matches = _CONCLUSION_RE.findall(completion)
    if not matches:
        raise JudgeError("no 'Final Conclusion' line in judge output")
    label = matches[-1].strip().strip("{}").strip()
    for text, conclusion in sorted(CONCLUSION_LABELS.items(), key=lambda kv: -len(kv[0])):
        if label.casefold() == text.casefold():
            return conclusion
    raise JudgeError(f"unrecognised conclusion {label!r}")


def parse_turn_conclusion(completion: str) -> tuple[bool, bool]:
    """(call_logic_ok, consistency_ok) from a turn-level judgment."""
    matches = _CONCLUSION_RE.findall(completion)
    if not matches:
        raise JudgeError("no 'Final Conclusion' line in judge output")
    label = matches[-1].casefold()
    if label.startswith("satisfied"):
        return True, True
    if "logic" in label:
        return False, True
    if "inconsistent" in label:
        return True, False
    raise JudgeError(f"unrecognised turn conclusion {matches[-1]!r}")


@dataclass
class JudgeConfig:
    endpoint: str
    timeout: float = 30.0
    max_in_flight: int = 4


class ExternalJudge:
    """Same `joint_reward` contract as the rule engine, answered by a remote model."""

    def __init__(self, config: JudgeConfig) -> None:
        self.config = config
        self._slots = threading.BoundedSemaphore(config.max_in_flight)

    def complete(self, prompt: str) -> str:
        data = json.dumps({"prompt": prompt}).encode()
        request = urllib.request.Request(self.config.endpoint, data=data,
                                         headers={"Content-Type": "application/json"})
        with self._slots:
            try:
                with urllib.request.urlopen(request, timeout=self.config.timeout) as resp:
                    body = json.loads(resp.read().decode())
            except (urllib.error.URLError, TimeoutError, OSError, json.JSONDecodeError) as exc:
                raise JudgeError(f"judge request failed: {exc}") from exc
        if not isinstance(body, dict) or not isinstance(body.get("completion"), str):
            raise JudgeError("judge reply lacks a completion string")
        return body["completion"]

    def verify_trajectory(self, query: Query, trajectory: Trajectory) -> TrajectoryVerdict:
        if trajectory.terminal != "answered" or trajectory.answer is None:
            conclusion = Conclusion.INCOMPLETE_ANSWER
        else:
            conclusion = parse_conclusion(self.complete(trajectory_prompt(query, trajectory.answer)))
        rubric = RubricResult("judge", conclusion.passed, (conclusion.value,))
        return TrajectoryVerdict(conclusion, (rubric,))

    def joint_reward(self, query: Query, trajectory: Trajectory) -> RewardRecord:
        start = time.perf_counter()
        try:
            verdict = self.verify_trajectory(query, trajectory)
            turns: list[TurnVerdict] = []
            if verdict.passed:
                for index, call, response in trajectory.turns():
                    text = self.complete(turn_prompt(query, trajectory.answer or "", call, response))
                    logic_ok, consistent = parse_turn_conclusion(text)
                    turns.append(TurnVerdict(index, logic_ok, consistent, text[-200:]))
        except JudgeError as exc:
            logger.warning("external judge failed on %s: %s", trajectory.query_id, exc)
            return RewardRecord(trajectory.query_id, 0, None, (), (time.perf_counter() - start) * 1000, True)
        r = int(verdict.passed and all(t.passed for t in turns))
        return RewardRecord(trajectory.query_id, r, verdict, tuple(turns), (time.perf_counter() - start) * 1000)
