"""Rule-based reward: whole-answer rubric check, then per-turn checks.

`Verifier.joint_reward` returns r=1 only if the answer passes the rubric
engine and every tool-call turn passes both the call-logic and the
consistency check. A failed rubric short-circuits: turn checks never run.
"""
from __future__ import annotations

import json
import logging
import random
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

from .domain import Itinerary, Query, constraint_violations, days_between, fmt_clock, plan_violations
from .protocol import Extraction, ToolCallError, Trajectory, extract_itinerary, parse_tool_call

logger = logging.getLogger(__name__)

DEFAULT_TRANSFER_BUFFER = 60


class Conclusion(str, Enum):
    VERY_SATISFIED = "VerySatisfied"
    SATISFIED_NO_CONTINGENCY = "SatisfiedNoContingency"
    BASIC_CONSTRAINT_MISS = "BasicConstraintMiss"
    LOGIC_UNREASONABLE = "LogicUnreasonable"
    MAIN_REQUIREMENT_MISREAD = "MainRequirementMisread"
    INCOMPLETE_ANSWER = "IncompleteAnswer"

    @property
    def passed(self) -> bool:
        return self in (Conclusion.VERY_SATISFIED, Conclusion.SATISFIED_NO_CONTINGENCY)


RUBRICS = ("complete", "main_requirement", "logic", "other_constraints", "specific_requirements", "contingency")
# The hard rubric whose failure decides the conclusion, in priority order.
_FAILURE_CONCLUSION = (
    ("complete", Conclusion.INCOMPLETE_ANSWER),
    ("main_requirement", Conclusion.MAIN_REQUIREMENT_MISREAD),
    ("logic", Conclusion.LOGIC_UNREASONABLE),
    ("other_constraints", Conclusion.BASIC_CONSTRAINT_MISS),
    ("specific_requirements", Conclusion.BASIC_CONSTRAINT_MISS),
)
_OTHER_SLOTS = frozenset({"budget_total", "arrival_deadline"})
_CONTINGENCY_MARKERS = ("friendly tips", "alternative option", "backup")


@dataclass(frozen=True)
class RubricResult:
    name: str
    passed: bool
    diagnostics: tuple[str, ...] = ()


@dataclass(frozen=True)
class TrajectoryVerdict:
    conclusion: Conclusion
    rubrics: tuple[RubricResult, ...]

    @property
    def passed(self) -> bool:
        return self.conclusion.passed

    def rubric(self, name: str) -> RubricResult:
        return next(r for r in self.rubrics if r.name == name)

    def to_dict(self) -> dict:
        return {"conclusion": self.conclusion.value,
                "rubrics": [{"name": r.name, "passed": r.passed, "diagnostics": list(r.diagnostics)}
                            for r in self.rubrics]}


def conclude(rubrics: Iterable[RubricResult]) -> Conclusion:
    results = {r.name: r.passed for r in rubrics}
    for name, conclusion in _FAILURE_CONCLUSION:
        if not results.get(name, False):
            return conclusion
    return Conclusion.VERY_SATISFIED if results.get("contingency", False) else Conclusion.SATISFIED_NO_CONTINGENCY


@dataclass(frozen=True)
class TurnVerdict:
    turn_index: int
    call_logic_ok: bool
    consistency_ok: bool
    diagnostics: str = ""

    @property
    def passed(self) -> bool:
        return self.call_logic_ok and self.consistency_ok

    def to_dict(self) -> dict:
        return {"turn_index": self.turn_index, "call_logic_ok": self.call_logic_ok,
                "consistency_ok": self.consistency_ok, "diagnostics": self.diagnostics}


@dataclass(frozen=True)
class RewardRecord:
    trajectory_id: str
    r: int
    trajectory_verdict: TrajectoryVerdict | None
    turn_verdicts: tuple[TurnVerdict, ...] = ()
    verifier_latency: float = 0.0
    verifier_failed: bool = False

    def to_dict(self) -> dict:
        return {"trajectory_id": self.trajectory_id, "r": self.r,
                "trajectory_verdict": self.trajectory_verdict.to_dict() if self.trajectory_verdict else None,
                "turn_verdicts": [v.to_dict() for v in self.turn_verdicts],
                "verifier_latency": self.verifier_latency, "verifier_failed": self.verifier_failed}


# ---------------------------------------------------------------------------
# Trajectory-level rubric engine
# ---------------------------------------------------------------------------


def _same(a: str, b: str) -> bool:
    return a.strip().casefold() == b.strip().casefold()


def check_rubrics(query: Query, trajectory: Trajectory, transfer_buffer: int = DEFAULT_TRANSFER_BUFFER
                  ) -> tuple[tuple[RubricResult, ...], Extraction]:
    answer = trajectory.answer if trajectory.terminal == "answered" else None
    extraction = extract_itinerary(answer, transfer_buffer)
    itin = extraction.itinerary
    results: list[RubricResult] = []

    complete: list[str] = []
    if trajectory.terminal != "answered":
        complete.append(f"episode ended with {trajectory.terminal}")
    elif itin is None:
        complete.append(f"no itinerary: {extraction.error}")
    else:
        if not itin.outbound_legs:
            complete.append("no outbound transport")
        if not itin.return_legs:
            complete.append("no return transport")
        if query.nights > 0 and itin.hotel_stay is None:
            complete.append("no hotel for an overnight trip")
    results.append(RubricResult("complete", not complete, tuple(complete)))
    if itin is None:
        for name in RUBRICS[1:]:
            results.append(RubricResult(name, False, ("not evaluated without an itinerary",)))
        return tuple(results), extraction

    main: list[str] = []
    if itin.outbound_legs:
        first, last = itin.outbound_legs[0], itin.outbound_legs[-1]
        if not (_same(first.origin, query.origin) and _same(last.destination, query.destination)):
            main.append(f"outbound goes {first.origin}->{last.destination}")
        if first.date != query.depart_date:
            main.append(f"outbound leaves on {first.date}, not {query.depart_date}")
    if itin.return_legs:
        first, last = itin.return_legs[0], itin.return_legs[-1]
        if not (_same(first.origin, query.destination) and _same(last.destination, query.origin)):
            main.append(f"return goes {first.origin}->{last.destination}")
        if first.date != query.return_date:
            main.append(f"return leaves on {first.date}, not {query.return_date}")
    stay = itin.hotel_stay
    if stay is not None and (stay.checkin != query.depart_date or stay.checkout != query.return_date):
        main.append(f"hotel stay {stay.checkin}..{stay.checkout} does not match the trip dates")
    results.append(RubricResult("main_requirement", not main, tuple(main)))

    logic = list(extraction.violations) + plan_violations(itin, transfer_buffer)
    if stay is not None and not _same(stay.city, query.destination):
        logic.append(f"hotel is in {stay.city}, not {query.destination}")
    results.append(RubricResult("logic", not logic, tuple(logic)))

    broken = constraint_violations(query, itin)
    other = tuple(msg for slot, msg in broken if slot in _OTHER_SLOTS)
    specific = tuple(msg for slot, msg in broken if slot not in _OTHER_SLOTS)
    results.append(RubricResult("other_constraints", not other, other))
    results.append(RubricResult("specific_requirements", not specific, specific))

    lowered = (answer or "").casefold()
    tips = any(marker in lowered for marker in _CONTINGENCY_MARKERS)
    results.append(RubricResult("contingency", tips, () if tips else ("no tips or alternative option",)))
    return tuple(results), extraction


# ---------------------------------------------------------------------------
# Turn-level checks
# ---------------------------------------------------------------------------


def call_logic_problems(query: Query, call_body: str, response_text: str | None) -> list[str]:
    """Why a tool call is illogical for this query; empty when it is fine."""
    try:
        call = parse_tool_call(call_body)
    except ToolCallError as exc:
        return [f"{exc.kind}: {exc}"]
    problems: list[str] = []
    if response_text is None:
        return ["tool call has no response"]
    try:
        payload = json.loads(response_text)
    except json.JSONDecodeError:
        return ["tool response is not JSON"]
    if payload.get("status") != "ok" and payload.get("code") != "transient":
        problems.append(f"call failed: {payload.get('error', payload.get('code'))}")
    args = {k: (v if isinstance(v, str) else "") for k, v in call.args.items()}
    trip_cities = {query.origin.casefold(), query.destination.casefold()}
    trip_dates = {query.depart_date, query.return_date}
    if call.name in ("flight_search", "train_search"):
        a, b = args["depart_city"].strip().casefold(), args["arrival_city"].strip().casefold()
        if a == b or {a, b} != trip_cities:
            problems.append(f"searches {args['depart_city']}->{args['arrival_city']}, not a trip leg")
        if args["depart_date"].strip() not in trip_dates:
            problems.append(f"searches date {args['depart_date']}, not a travel day")
    elif call.name == "hotel_search":
        if not _same(args["city_name"], query.destination):
            problems.append(f"hotel city {args['city_name']} is not the destination")
        checkin, checkout = args["checkin_date"].strip(), args["checkout_date"].strip()
        try:
            if days_between(checkin, checkout) <= 0:
                problems.append("checkout is not after checkin")
            if checkin < query.depart_date or checkout > query.return_date:
                problems.append("hotel dates fall outside the trip")
        except ValueError:
            problems.append("hotel dates are not valid dates")
    elif call.name in ("poi_search", "route_planning"):
        if args["city_name"].strip().casefold() not in trip_cities:
            problems.append(f"{call.name} in {args['city_name']}, not a trip city")
    return problems


_LEG_TOOL = {"flight": "flight_search", "train": "train_search"}


def consistency_failures(trajectory: Trajectory, itinerary: Itinerary | None) -> dict[int, list[str]]:
    """Answer facts missing from every tool response, keyed by the turn blamed for them.

    The blamed turn is the latest call of the tool that should have produced
    the fact, else the last turn, else -1 when no tool was called at all.
    """
    if itinerary is None:
        return {}
    turns = trajectory.turns()
    legs: dict[str, list[dict]] = {}
    hotels: dict[str, list[dict]] = {}
    pois: set[tuple[str, str]] = set()
    latest: dict[str, int] = {}
    for turn_index, body, response in turns:
        try:
            name = parse_tool_call(body).name
        except ToolCallError:
            continue
        latest[name] = turn_index
        try:
            payload = json.loads(response) if response is not None else {}
        except json.JSONDecodeError:
            continue
        if payload.get("status") != "ok":
            continue
        for row in payload.get("results", ()):
            if not isinstance(row, dict):
                continue
            if name in ("flight_search", "train_search"):
                legs.setdefault(row.get("id"), []).append(row)
            elif name == "hotel_search":
                hotels.setdefault(row.get("id"), []).append(row)
            elif name == "poi_search":
                pois.add((row.get("name"), row.get("city")))
    fallback = turns[-1][0] if turns else -1
    failures: dict[int, list[str]] = {}

    def blame(tool: str, message: str) -> None:
        failures.setdefault(latest.get(tool, fallback), []).append(message)

    for leg in itinerary.legs:
        arrive = fmt_clock(leg.arrive_time)
        ok = any(row.get("mode") == leg.mode and row.get("from") == leg.origin and row.get("to") == leg.destination
                 and row.get("date") == leg.date and row.get("depart") == fmt_clock(leg.depart_time)
                 and row.get("arrive") == arrive and bool(row.get("next_day")) == leg.next_day
                 and row.get("price") == leg.price and row.get("seats", 0) > 0
                 for row in legs.get(leg.record_id, ()))
        if not ok:
            blame(_LEG_TOOL.get(leg.mode, "flight_search"), f"leg {leg.record_id} does not match any search result")
    stay = itinerary.hotel_stay
    if stay is not None:
        ok = any(row.get("name") == stay.name and row.get("city") == stay.city and row.get("checkin") == stay.checkin
                 and row.get("checkout") == stay.checkout and row.get("total_price") == stay.total_price
                 and tuple(row.get("tags", ())) == stay.tags and row.get("rooms", 0) > 0
                 for row in hotels.get(stay.record_id, ()))
        if not ok:
            blame("hotel_search", f"hotel {stay.record_id} does not match any search result")
    city = stay.city if stay is not None else (itinerary.outbound_legs[-1].destination
                                               if itinerary.outbound_legs else None)
    for day in itinerary.daily_plan:
        for visit in day.visits:
            if (visit.poi, city) not in pois:
                blame("poi_search", f"{visit.poi} was never returned by a POI search")
    return failures


# ---------------------------------------------------------------------------
# The verifier
# ---------------------------------------------------------------------------


@dataclass
class Verifier:
    """Joint reward with short-circuit, ablation switches and failure injection.

    `skip_trajectory` / `skip_turn` force the respective stage to pass.
    `failure_rate` makes that fraction of calls report `verifier_failed`.
    """

    transfer_buffer: int = DEFAULT_TRANSFER_BUFFER
    skip_trajectory: bool = False
    skip_turn: bool = False
    failure_rate: float = 0.0
    seed: int = 0
    turn_stage_calls: int = 0
    turn_calls: int = 0
    trajectory_passes: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _rng: random.Random | None = field(default=None, repr=False)

    def verify_trajectory(self, query: Query, trajectory: Trajectory) -> TrajectoryVerdict:
        rubrics, _ = check_rubrics(query, trajectory, self.transfer_buffer)
        return TrajectoryVerdict(conclude(rubrics), rubrics)

    def verify_turn(self, query: Query, trajectory: Trajectory, turn_index: int, itinerary: Itinerary | None,
                    failures: dict[int, list[str]] | None = None) -> TurnVerdict:
        with self._lock:
            self.turn_calls += 1
        if failures is None:
            failures = consistency_failures(trajectory, itinerary)
        match = [(b, r) for i, b, r in trajectory.turns() if i == turn_index]
        logic = call_logic_problems(query, *match[0]) if match else []
        facts = failures.get(turn_index, [])
        return TurnVerdict(turn_index, not logic, not facts, "; ".join(logic + facts))

    def joint_reward(self, query: Query, trajectory: Trajectory) -> RewardRecord:
        start = time.perf_counter()
        try:
            if self.failure_rate > 0:
                with self._lock:
                    if self._rng is None:
                        self._rng = random.Random(f"verifier:{self.seed}")
                    failed = self._rng.random() < self.failure_rate
                if failed:
                    raise RuntimeError("injected verifier failure")
            record = self._joint(query, trajectory)
        except Exception as exc:
            logger.warning("verifier failed on %s: %s", trajectory.query_id, exc)
            return RewardRecord(trajectory.query_id, 0, None, (), (time.perf_counter() - start) * 1000, True)
        return RewardRecord(record.trajectory_id, record.r, record.trajectory_verdict, record.turn_verdicts,
                            (time.perf_counter() - start) * 1000, False)

    def _joint(self, query: Query, trajectory: Trajectory) -> RewardRecord:
        rubrics, extraction = check_rubrics(query, trajectory, self.transfer_buffer)
        if self.skip_trajectory:
            rubrics = tuple(RubricResult(r.name, True, ("skipped",)) for r in rubrics)
        verdict = TrajectoryVerdict(conclude(rubrics), rubrics)
        if not verdict.passed:
            return RewardRecord(trajectory.query_id, 0, verdict)
        with self._lock:
            self.trajectory_passes += 1
        if self.skip_turn:
            return RewardRecord(trajectory.query_id, 1, verdict)
        with self._lock:
            self.turn_stage_calls += 1
        failures = consistency_failures(trajectory, extraction.itinerary)
        verdicts = [self.verify_turn(query, trajectory, i, extraction.itinerary, failures)
                    for i, _, _ in trajectory.turns()]
        if -1 in failures:
            verdicts.append(TurnVerdict(-1, True, False, "; ".join(failures[-1])))
        r = int(all(v.passed for v in verdicts))
        return RewardRecord(trajectory.query_id, r, verdict, tuple(verdicts))


def save_rewards(records: Iterable[RewardRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict()) + "\n")
