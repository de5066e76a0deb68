"""Agents that plan trips through the tool interface.

Two agents share one action space and one state featurization:

* `OracleAgent` follows a fixed plan and serves as the teacher.
* `SoftmaxAgent` samples each decision from a tabular softmax over action
  templates. Logits live in `PolicyParams`, keyed by (head, feature bucket),
  so log-probabilities, entropies, KL terms and their gradients are exact.

A decision happens on one of three heads: ``act`` picks the next action
template, ``sel`` picks how the answer ranks candidates, and ``obs`` stands in
for tool output injected by the environment. ``obs`` records are always
masked and never carry gradient.
"""
from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .domain import (
    VISIT_WINDOW, DayPlan, HotelStay, Itinerary, Leg, Query, Visit, add_days, constraint_violations,
    parse_clock, plan_violations, render_block,
)
from .protocol import DecisionRecord, Step, ToolCall, ToolCallError, Trajectory, parse_tool_call
from .sandbox import TOOL_NAMES, ToolResponse

logger = logging.getLogger(__name__)

ACT_KINDS = ("CallFlight", "CallTrain", "CallHotel", "CallRoute", "CallPoi", "CallWeb", "EmitAnswer")
SELECTORS = ("cheapest", "fastest", "preference-matched", "first-listed")
OBS_STATUSES = ("ok", "empty", "error")
HEAD_SIZES = {"act": len(ACT_KINDS), "sel": len(SELECTORS), "obs": len(OBS_STATUSES)}
EMIT_ANSWER = ACT_KINDS.index("EmitAnswer")
FIRST_LISTED = SELECTORS.index("first-listed")
POOL_CAP = 8
TRANSFER_BUFFER = 60
LATE_TURN = 5
_MODE_CODE = {None: 0, "flight": 1, "train": 2}
_STATUS_CODE = {"none": 0, "ok": 1, "empty": 2, "error": 3}

Bucket = tuple[str, tuple[int, ...]]


@dataclass(frozen=True)
class ActionTemplate:
    kind: str
    selector: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ACT_KINDS:
            raise ValueError(f"unknown action kind {self.kind!r}")
        if (self.kind == "EmitAnswer") != (self.selector is not None):
            raise ValueError("a selector goes with EmitAnswer and only with EmitAnswer")
        if self.selector is not None and self.selector not in SELECTORS:
            raise ValueError(f"unknown selector {self.selector!r}")


# ---------------------------------------------------------------------------
# Agent state: what has been observed so far
# ---------------------------------------------------------------------------


def _leg_from_row(row: dict) -> Leg:
    return Leg(row["id"], row["mode"], row["from"], row["to"], row["date"], parse_clock(row["depart"]),
               parse_clock(row["arrive"]), bool(row["next_day"]), int(row["price"]))


def _stay_from_row(row: dict) -> HotelStay:
    return HotelStay(row["id"], row["name"], row["city"], row["checkin"], row["checkout"], int(row["total_price"]),
                     tuple(row["tags"]))


class AgentState:
    """Candidate pools and progress flags accumulated from tool responses."""

    def __init__(self, query: Query) -> None:
        self.query = query
        self.mode_pref = query.slot("transport_mode_preference")
        self.poi_required = query.slot("poi_requirement")
        self.calls = 0
        self.last_status = "none"
        self.legs = {"outbound": (query.origin, query.destination, query.depart_date),
                     "return": (query.destination, query.origin, query.return_date)}
        self.pools: dict[str, list[Leg]] = {"outbound": [], "return": []}
        self.searched: set[tuple[str, str]] = set()
        self.hotels: list[HotelStay] = []
        self.hotel_searched = False
        self.pois: list[str] = []
        self.poi_searched = False
        self.route_done = False
        self.web_done = False

    @property
    def needs_hotel(self) -> bool:
        return self.query.nights > 0

    def acceptable(self, leg: Leg) -> bool:
        return self.mode_pref is None or leg.mode == self.mode_pref

    def covered(self, leg_name: str) -> bool:
        return any(self.acceptable(leg) for leg in self.pools[leg_name])

    def _leg_name(self, args: dict) -> str | None:
        key = tuple(str(args.get(k) or "").strip().casefold() for k in ("depart_city", "arrival_city", "depart_date"))
        for name, target in self.legs.items():
            if key == tuple(x.casefold() for x in target):
                return name
        return None

    def observe(self, call: ToolCall | None, response: ToolResponse) -> str:
        """Fold one response into the state. Returns its status: ok, empty or error."""
        self.calls += 1
        status = "error" if not response.ok else ("ok" if response.results else "empty")
        self.last_status = status
        if call is None:
            return status
        name = call.name
        if name in ("flight_search", "train_search"):
            leg_name = self._leg_name(call.args)
            if leg_name is not None:
                self.searched.add((leg_name, name.split("_")[0]))
                pool = self.pools[leg_name]
                known = {leg.record_id for leg in pool}
                for row in response.results:
                    if row["seats"] > 0 and row["id"] not in known and len(pool) < POOL_CAP:
                        pool.append(_leg_from_row(row))
                        known.add(row["id"])
        elif name == "hotel_search":
            q = self.query
            self.hotel_searched = True
            for row in response.results:
                if (row["city"] == q.destination and row["checkin"] == q.depart_date
                        and row["checkout"] == q.return_date and row["rooms"] > 0
                        and len(self.hotels) < POOL_CAP and all(h.record_id != row["id"] for h in self.hotels)):
                    self.hotels.append(_stay_from_row(row))
        elif name == "poi_search":
            self.poi_searched = True
            for row in response.results:
                if row["city"] == self.query.destination and row["name"] not in self.pois and len(self.pois) < POOL_CAP:
                    self.pois.append(row["name"])
        elif name == "route_planning":
            self.route_done = self.route_done or response.ok
        elif name == "web_search":
            self.web_done = self.web_done or response.ok
        return status

    # -- features -----------------------------------------------------------

    def act_features(self) -> tuple[int, ...]:
        legs = int(self.covered("outbound")) + int(self.covered("return"))
        hotel = int(not self.needs_hotel or bool(self.hotels))
        if self.poi_required is None:
            poi = 0
        else:
            poi = 2 if self.poi_required in self.pois else 1
        return (int(self.calls >= LATE_TURN), legs, hotel, poi, _MODE_CODE[self.mode_pref],
                _STATUS_CODE[self.last_status])

    def sel_features(self) -> tuple[int, ...]:
        q = self.query
        return (int(q.slot("budget_total") is not None), int(q.slot("arrival_deadline") is not None),
                int(q.slot("hotel_preference") is not None), _MODE_CODE[self.mode_pref],
                int(self.poi_required is not None))

    # -- argument binding ------------------------------------------------------

    def bind(self, kind: str) -> tuple[str, str]:
        """(thought, tool-call text) for a non-answer template."""
        q = self.query
        dest = q.destination
        if kind in ("CallFlight", "CallTrain"):
            mode = "flight" if kind == "CallFlight" else "train"
            order = ("outbound", "return")
            pick = next((n for n in order if not self.covered(n) and (n, mode) not in self.searched), None)
            if pick is None:
                pick = next((n for n in order if (n, mode) not in self.searched), "outbound")
            a, b, date = self.legs[pick]
            call = ToolCall(f"{mode}_search", {"depart_city": a, "arrival_city": b, "depart_date": date})
            return f"I need {mode} options from {a} to {b} on {date}.", call.render()
        if kind == "CallHotel":
            call = ToolCall("hotel_search", {"city_name": dest, "checkin_date": q.depart_date,
                                             "checkout_date": q.return_date})
            return f"Next I look for a hotel in {dest} from {q.depart_date} to {q.return_date}.", call.render()
        if kind == "CallPoi":
            term = self.poi_required or ""
            call = ToolCall("poi_search", {"query": term, "city_name": dest})
            return f"Let me look up attractions in {dest}.", call.render()
        if kind == "CallRoute":
            if self.hotels:
                target = self.hotels[0].name
            elif self.poi_required:
                target = self.poi_required
            elif self.pois:
                target = self.pois[0]
            else:
                target = f"{dest} City Center"
            call = ToolCall("route_planning", {"origin": f"{dest} Railway Station", "destination": target,
                                               "city_name": dest})
            return f"I check how to get from the station to {target}.", call.render()
        if kind == "CallWeb":
            call = ToolCall("web_search", {"query": f"Introduction to {dest}"})
            return f"Some background on {dest} would help with practical tips.", call.render()
        raise ValueError(f"cannot bind {kind}")


# ---------------------------------------------------------------------------
# Answer construction
# ---------------------------------------------------------------------------


def _daily_plan(state: AgentState, out: Leg, ret: Leg) -> tuple[DayPlan, ...]:
    q = state.query
    pois = list(state.pois)
    if state.poi_required in pois:
        pois.remove(state.poi_required)
        pois.insert(0, state.poi_required)
    plan = []
    for offset in range(q.nights + 1):
        if not pois:
            break
        date = add_days(q.depart_date, offset)
        lo, hi = VISIT_WINDOW
        if date == out.date:
            if out.next_day:
                continue
            lo = max(lo, out.arrive_time + TRANSFER_BUFFER)
        if date == ret.date:
            hi = min(hi, ret.depart_time - TRANSFER_BUFFER)
        visits = []
        t = max(lo, 9 * 60)
        t = -(-t // 5) * 5
        while pois and t <= hi and len(visits) < 2:
            visits.append(Visit(t, pois.pop(0)))
            t = max(t + 180, 14 * 60)
        if visits:
            plan.append(DayPlan(date, tuple(visits)))
    return tuple(plan)


def _assemble(state: AgentState, out: Leg, ret: Leg, hotel: HotelStay | None) -> Itinerary:
    return Itinerary.assemble((out,), hotel if state.needs_hotel else None, (ret,), _daily_plan(state, out, ret))


def _preference_matched(state: AgentState) -> Itinerary | None:
    outs, rets = state.pools["outbound"], state.pools["return"]
    hotels: list[HotelStay | None] = list(state.hotels) if state.needs_hotel else [None]
    # a required POI that no search returned cannot be planned; judge the rest
    reachable = state.poi_required in state.pois
    best = None
    for out in outs:
        for ret in rets:
            for hotel in hotels:
                itin = _assemble(state, out, ret, hotel)
                if best is not None and itin.total_cost >= best.total_cost:
                    continue
                if itin.invariant_violations(TRANSFER_BUFFER) or plan_violations(itin, TRANSFER_BUFFER):
                    continue
                if any(slot != "poi_requirement" or reachable for slot, _ in constraint_violations(state.query, itin)):
                    continue
                best = itin
    return best


def build_itinerary(state: AgentState, selector: str) -> Itinerary | None:
    outs, rets = state.pools["outbound"], state.pools["return"]
    if not outs or not rets or (state.needs_hotel and not state.hotels):
        return None
    if selector == "preference-matched":
        matched = _preference_matched(state)
        if matched is not None:
            return matched
        selector = "cheapest"
    hotels = state.hotels or [None]
    if selector == "cheapest":
        out = min(outs, key=lambda leg: leg.price)
        ret = min(rets, key=lambda leg: leg.price)
        hotel = min(hotels, key=lambda h: h.total_price) if state.hotels else None
    elif selector == "fastest":
        out = min(outs, key=lambda leg: leg.arrive_minute)
        ret = min(rets, key=lambda leg: leg.arrive_minute - leg.depart_time)
        hotel = hotels[0]
    elif selector == "first-listed":
        out, ret, hotel = outs[0], rets[0], hotels[0]
    else:
        raise ValueError(f"unknown selector {selector!r}")
    return _assemble(state, out, ret, hotel)


def render_answer(state: AgentState, itinerary: Itinerary | None) -> str:
    q = state.query
    if itinerary is None:
        return (f"I could not gather enough options to plan the trip from {q.origin} to {q.destination}. "
                "Please try different dates.")
    out, ret = itinerary.outbound_legs[0], itinerary.return_legs[0]
    lines = [f"Here is your plan for {q.origin} to {q.destination}, {q.depart_date} to {q.return_date}.",
             f"Go out on {out.record_id} and come back on {ret.record_id}.", "", render_block(itinerary)]
    if state.web_done:
        lines += ["", "Friendly Tips:"]
        spare = [leg for leg in state.pools["outbound"] if leg.record_id != out.record_id and state.acceptable(leg)]
        if spare:
            lines.append(f"- Alternative option: if {out.record_id} is disrupted, {spare[0].record_id} "
                         f"also runs on {spare[0].date}.")
        lines.append(f"- Keep travel documents ready and leave extra time to reach the {out.mode} station.")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Parameters and exact softmax math
# ---------------------------------------------------------------------------


class PolicyParams:
    """Tabular logits keyed by (head, feature bucket). Unseen buckets read as zeros."""

    def __init__(self, tables: dict[Bucket, np.ndarray] | None = None, version: int = 0) -> None:
        self.tables: dict[Bucket, np.ndarray] = {}
        self.version = version
        for key, row in (tables or {}).items():
            row = np.asarray(row, dtype=np.float64)
            if row.shape != (HEAD_SIZES[key[0]],):
                raise ValueError(f"bad logit row shape for {key}: {row.shape}")
            if not np.all(np.isfinite(row)):
                raise ValueError(f"non-finite logits in bucket {key}")
            self.tables[(key[0], tuple(int(x) for x in key[1]))] = row.copy()

    def logits(self, head: str, features: Sequence[int]) -> np.ndarray:
        row = self.tables.get((head, tuple(features)))
        return row if row is not None else np.zeros(HEAD_SIZES[head])

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.tables, self.version)

    def snapshot(self) -> "PolicyParams":
        """Immutable copy: logit arrays are read-only."""
        snap = self.copy()
        for row in snap.tables.values():
            row.setflags(write=False)
        return snap

    def apply(self, grad: dict[Bucket, np.ndarray], step: float) -> "PolicyParams":
        """New params = self + step * grad, version bumped."""
        out = self.copy()
        for key, g in grad.items():
            row = out.tables.get(key)
            out.tables[key] = (row if row is not None else np.zeros(HEAD_SIZES[key[0]])) + step * g
        out.version = self.version + 1
        for key, row in out.tables.items():
            if not np.all(np.isfinite(row)):
                raise FloatingPointError(f"update produced non-finite logits in bucket {key}")
        return out

    def buckets(self) -> list[Bucket]:
        return sorted(self.tables)

    def to_vector(self, keys: Sequence[Bucket]) -> np.ndarray:
        return np.concatenate([self.logits(h, f) for h, f in keys]) if keys else np.zeros(0)

    def with_vector(self, keys: Sequence[Bucket], vec: np.ndarray) -> "PolicyParams":
        out = self.copy()
        pos = 0
        for key in keys:
            n = HEAD_SIZES[key[0]]
            out.tables[key] = np.array(vec[pos:pos + n], dtype=np.float64)
            pos += n
        return out

    def to_dict(self) -> dict:
        return {"format": "deeptravel-params", "format_version": 1, "version": self.version,
                "tables": [{"head": h, "features": list(f), "logits": self.tables[(h, f)].tolist()}
                           for h, f in self.buckets()]}

    @classmethod
    def from_dict(cls, data: dict) -> "PolicyParams":
        if data.get("format") != "deeptravel-params":
            raise ValueError("not a params file")
        tables = {(t["head"], tuple(t["features"])): np.array(t["logits"], dtype=np.float64) for t in data["tables"]}
        return cls(tables, int(data["version"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "PolicyParams":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PolicyParams):
            return NotImplemented
        keys = set(self.tables) | set(other.tables)
        return all(np.array_equal(self.logits(*k), other.logits(*k)) for k in keys)


def log_softmax(logits: np.ndarray, valid: Sequence[bool]) -> np.ndarray:
    """Log-probabilities with invalid entries at -inf."""
    mask = np.asarray(valid, dtype=bool)
    out = np.full(logits.shape, -np.inf)
    if not mask.any():
        return out
    z = logits[mask]
    m = z.max()
    out[mask] = z - m - math.log(np.exp(z - m).sum())
    return out


def softmax(logits: np.ndarray, valid: Sequence[bool]) -> np.ndarray:
    lp = log_softmax(logits, valid)
    return np.where(np.isfinite(lp), np.exp(lp), 0.0)


def _all_valid(head: str) -> tuple[bool, ...]:
    return (True,) * HEAD_SIZES[head]


def sample_decision(params: PolicyParams, head: str, features: Sequence[int], rng: random.Random,
                    valid: Sequence[bool] | None = None, greedy: bool = False) -> DecisionRecord:
    """Draw one template index; the record carries its exact log-probability."""
    valid = tuple(bool(v) for v in (valid if valid is not None else _all_valid(head)))
    features = tuple(int(f) for f in features)
    if not any(valid):
        forced = EMIT_ANSWER if head == "act" else FIRST_LISTED if head == "sel" else 0
        return DecisionRecord(head, features, valid, forced, 0.0)
    lp = log_softmax(params.logits(head, features), valid)
    if greedy:
        choice = int(np.argmax(lp))
    else:
        u = rng.random()
        acc = 0.0
        choice = -1
        for i, v in enumerate(lp):
            if v == -np.inf:
                continue
            choice = i
            acc += math.exp(v)
            if u < acc:
                break
    return DecisionRecord(head, features, valid, choice, float(lp[choice]))


def decision_log_prob(params: PolicyParams, record: DecisionRecord) -> float:
    if not any(record.valid):
        return 0.0
    return float(log_softmax(params.logits(record.head, record.features), record.valid)[record.choice])


def trajectory_log_prob(params: PolicyParams, trajectory: Trajectory | Iterable[DecisionRecord]) -> float:
    records = trajectory.decisions if isinstance(trajectory, Trajectory) else trajectory
    return float(sum(decision_log_prob(params, r) for r in records if not r.masked))


def add_into(acc: dict[Bucket, np.ndarray], key: Bucket, value: np.ndarray, scale: float = 1.0) -> None:
    row = acc.get(key)
    if row is None:
        acc[key] = scale * value
    else:
        row += scale * value


def trajectory_log_prob_grad(params: PolicyParams, trajectory: Trajectory | Iterable[DecisionRecord],
                             scale: float = 1.0, into: dict[Bucket, np.ndarray] | None = None
                             ) -> dict[Bucket, np.ndarray]:
    """d/dlogits of the unmasked log-likelihood, times `scale`, accumulated into `into`."""
    acc = {} if into is None else into
    records = trajectory.decisions if isinstance(trajectory, Trajectory) else trajectory
    for r in records:
        if r.masked or not any(r.valid):
            continue
        g = -softmax(params.logits(r.head, r.features), r.valid)
        g[r.choice] += 1.0
        add_into(acc, (r.head, r.features), g, scale)
    return acc


def entropy_at(params: PolicyParams, head: str, features: Sequence[int], valid: Sequence[bool] | None = None) -> float:
    lp = log_softmax(params.logits(head, features), valid if valid is not None else _all_valid(head))
    finite = np.isfinite(lp)
    return float(-(np.exp(lp[finite]) * lp[finite]).sum())


def policy_entropy(params: PolicyParams, buckets: Iterable[Bucket | DecisionRecord]) -> float:
    """Mean Shannon entropy over distinct buckets (records contribute their bucket and mask)."""
    seen: dict[tuple, tuple[bool, ...] | None] = {}
    for b in buckets:
        if isinstance(b, DecisionRecord):
            seen.setdefault((b.head, b.features), b.valid)
        else:
            seen.setdefault((b[0], tuple(b[1])), None)
    if not seen:
        return 0.0
    return float(np.mean([entropy_at(params, h, f, v) for (h, f), v in seen.items()]))


def kl_divergence(params: PolicyParams, ref: PolicyParams, buckets: Iterable[tuple[Bucket, Sequence[bool]]]
                  ) -> tuple[float, dict[Bucket, np.ndarray]]:
    """Exact sum over buckets of KL(pi_params || pi_ref) and its gradient wrt params' logits."""
    total = 0.0
    grad: dict[Bucket, np.ndarray] = {}
    for (head, features), valid in buckets:
        lp = log_softmax(params.logits(head, features), valid)
        lq = log_softmax(ref.logits(head, features), valid)
        finite = np.isfinite(lp)
        p = np.where(finite, np.exp(lp), 0.0)
        diff = np.zeros_like(lp)
        diff[finite] = lp[finite] - lq[finite]
        kl = float((p * diff).sum())
        total += kl
        grad[(head, features)] = p * (diff - kl)
    return total, grad


# ---------------------------------------------------------------------------
# Agents
# ---------------------------------------------------------------------------


def _status_choice(status: str) -> int:
    return OBS_STATUSES.index(status)


class _Session:
    """Shared observe/answer plumbing; subclasses choose templates."""

    def __init__(self, query: Query, params: PolicyParams | None = None) -> None:
        self.state = AgentState(query)
        self.params = params

    def observe(self, call_body: str, response: ToolResponse) -> tuple[str, list[DecisionRecord]]:
        try:
            call = parse_tool_call(call_body)
        except ToolCallError:
            call = None
        status = self.state.observe(call, response)
        tool = call.name if call is not None else "unknown"
        features = (TOOL_NAMES.index(tool) if tool in TOOL_NAMES else len(TOOL_NAMES),)
        choice = _status_choice(status)
        lp = log_softmax(self.params.logits("obs", features), _all_valid("obs"))[choice] if self.params else 0.0
        record = DecisionRecord("obs", features, _all_valid("obs"), choice, float(lp), masked=True)
        if status == "ok":
            note = f"The {tool} call returned {len(response.results)} results."
        elif status == "empty":
            note = f"The {tool} call found nothing."
        else:
            note = f"The {tool} call failed ({response.code}); I will adjust."
        return note, [record]

    def _step(self, template: ActionTemplate, decisions: list[DecisionRecord]) -> Step:
        if template.kind == "EmitAnswer":
            itin = build_itinerary(self.state, template.selector)
            thought = f"I have enough information; I rank candidates by {template.selector}."
            return Step("answer", thought, render_answer(self.state, itin), decisions)
        thought, body = self.state.bind(template.kind)
        return Step("call", thought, body, decisions)


class OracleSession(_Session):
    def __init__(self, query: Query, epsilon: float = 0.0, modes: tuple[str, ...] = ("flight", "train"),
                 selector: str = "preference-matched") -> None:
        super().__init__(query)
        self.epsilon = epsilon
        self.modes = modes
        self.selector = selector

    def plan(self) -> ActionTemplate:
        s = self.state
        modes = (s.mode_pref,) if s.mode_pref else self.modes
        for leg in ("outbound", "return"):
            for mode in modes:
                if mode in self.modes and (leg, mode) not in s.searched:
                    return ActionTemplate("CallFlight" if mode == "flight" else "CallTrain")
            if not s.covered(leg):
                return ActionTemplate("EmitAnswer", self.selector)
        if s.needs_hotel and not s.hotel_searched:
            return ActionTemplate("CallHotel")
        if s.poi_required and not s.poi_searched:
            return ActionTemplate("CallPoi")
        if not s.web_done and s.calls < 7:
            return ActionTemplate("CallWeb")
        return ActionTemplate("EmitAnswer", self.selector)

    def act(self, rng: random.Random) -> Step:
        template = self.plan()
        if self.epsilon > 0 and rng.random() < self.epsilon:
            kind = ACT_KINDS[rng.randrange(len(ACT_KINDS))]
            selector = SELECTORS[rng.randrange(len(SELECTORS))] if kind == "EmitAnswer" else None
            template = ActionTemplate(kind, selector)
        decisions = [DecisionRecord("act", self.state.act_features(), _all_valid("act"),
                                    ACT_KINDS.index(template.kind), 0.0)]
        if template.selector is not None:
            decisions.append(DecisionRecord("sel", self.state.sel_features(), _all_valid("sel"),
                                            SELECTORS.index(template.selector), 0.0))
        return self._step(template, decisions)


class OracleAgent:
    """Scripted teacher: transport per preference, hotel, required POI, tips, then answer.

    With `epsilon` > 0 each decision is replaced by a uniformly random template
    with that probability. Restricting `modes` or fixing a weaker `selector`
    gives the agent blind spots; both knobs make graded probes for difficulty
    scoring.
    """

    def __init__(self, epsilon: float = 0.0, modes: tuple[str, ...] = ("flight", "train"),
                 selector: str = "preference-matched") -> None:
        if selector not in SELECTORS or not set(modes) <= {"flight", "train"}:
            raise ValueError("bad oracle configuration")
        self.epsilon = epsilon
        self.modes = tuple(modes)
        self.selector = selector

    def begin(self, query: Query) -> OracleSession:
        return OracleSession(query, self.epsilon, self.modes, self.selector)


def oracle_decide(query: Query, observations: Sequence[tuple[str, ToolResponse]]) -> tuple[str, str]:
    """(thought, action text) the oracle emits after the given (call, response) history."""
    session = OracleSession(query)
    for body, response in observations:
        session.observe(body, response)
    step = session.act(random.Random(0))
    return step.thought, step.body


class SoftmaxSession(_Session):
    def __init__(self, query: Query, params: PolicyParams, greedy: bool) -> None:
        super().__init__(query, params)
        self.greedy = greedy

    def act(self, rng: random.Random) -> Step:
        act = sample_decision(self.params, "act", self.state.act_features(), rng, greedy=self.greedy)
        decisions = [act]
        selector = None
        if act.choice == EMIT_ANSWER:
            sel = sample_decision(self.params, "sel", self.state.sel_features(), rng, greedy=self.greedy)
            decisions.append(sel)
            selector = SELECTORS[sel.choice]
        return self._step(ActionTemplate(ACT_KINDS[act.choice], selector), decisions)


class SoftmaxAgent:
    """Samples (or, with greedy=True, argmaxes) each decision from `params`."""

    def __init__(self, params: PolicyParams, greedy: bool = False) -> None:
        self.params = params
        self.greedy = greedy

    def begin(self, query: Query) -> SoftmaxSession:
        return SoftmaxSession(query, self.params, self.greedy)


# ---------------------------------------------------------------------------
# Behavior cloning
# ---------------------------------------------------------------------------


def clone_loss(params: PolicyParams, trajectories: Sequence[Trajectory]) -> float:
    """Mean negative log-likelihood per trajectory of the unmasked teacher decisions."""
    if not trajectories:
        return 0.0
    return -sum(trajectory_log_prob(params, t) for t in trajectories) / len(trajectories)


def _batches(items: Sequence, size: int | None) -> Iterator[Sequence]:
    if not size or size >= len(items):
        yield items
        return
    for start in range(0, len(items), size):
        yield items[start:start + size]


def behavior_clone(params: PolicyParams, trajectories: Sequence[Trajectory], epochs: int, learning_rate: float,
                   batch_size: int | None = None, history: list[float] | None = None) -> PolicyParams:
    """Gradient ascent on the mean unmasked log-likelihood of teacher decisions.

    Observation records are masked and receive no gradient. `history`, when
    given, collects the full-dataset loss before training and after each epoch.
    """
    trajectories = list(trajectories)
    if not trajectories:
        logger.warning("behavior cloning called with an empty dataset; params unchanged")
        return params.copy()
    current = params.copy()
    if history is not None:
        history.append(clone_loss(current, trajectories))
    for epoch in range(epochs):
        for batch in _batches(trajectories, batch_size):
            grad: dict[Bucket, np.ndarray] = {}
            for t in batch:
                trajectory_log_prob_grad(current, t, 1.0 / len(batch), grad)
            if learning_rate != 0.0:
                current = current.apply(grad, learning_rate)
        loss = clone_loss(current, trajectories)
        if history is not None:
            history.append(loss)
        logger.debug("behavior clone epoch %d loss %.4f", epoch + 1, loss)
    return current


def agreement(params: PolicyParams, trajectories: Sequence[Trajectory]) -> float:
    """Fraction of unmasked teacher decisions that are the params' argmax choice."""
    hits = total = 0
    for t in trajectories:
        for r in t.decisions:
            if r.masked or not any(r.valid):
                continue
            lp = log_softmax(params.logits(r.head, r.features), r.valid)
            hits += int(np.argmax(lp)) == r.choice
            total += 1
    return hits / total if total else 0.0
