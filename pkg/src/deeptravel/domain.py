"""Queries, atomic intents and the structured itinerary shared by every stage.

Money is integer cents throughout and clock times are minutes after midnight,
so budget and schedule comparisons in the verifier are exact.
"""
from __future__ import annotations

import datetime as dt
import hashlib
import json
import re
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Union

SLOT_TYPES: dict[str, type] = {
    "origin": str,
    "destination": str,
    "depart_date": str,
    "return_date": str,
    "arrival_deadline": int,
    "budget_total": int,
    "hotel_preference": str,
    "transport_mode_preference": str,
    "poi_requirement": str,
    "trip_length_days": int,
}
SLOTS = tuple(SLOT_TYPES)
CONSTRAINT_SLOTS = frozenset(
    {"budget_total", "hotel_preference", "transport_mode_preference", "poi_requirement", "arrival_deadline"}
)
MODES = ("flight", "train")
DIFFICULTIES = ("easy", "medium", "hard", "unrated")

_NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten")


class QueryError(ValueError):
    """Raised when an intent set cannot form a valid query."""


class ItineraryFormatError(ValueError):
    """Raised when a structured itinerary block cannot be parsed."""


# ---------------------------------------------------------------------------
# Small helpers
# ---------------------------------------------------------------------------


def parse_date(value: str) -> dt.date:
    return dt.date.fromisoformat(value)


def add_days(value: str, days: int) -> str:
    return (parse_date(value) + dt.timedelta(days=days)).isoformat()


def days_between(start: str, end: str) -> int:
    return (parse_date(end) - parse_date(start)).days


def fmt_clock(minutes: int) -> str:
    return f"{minutes // 60:02d}:{minutes % 60:02d}"


def parse_clock(text: str) -> int:
    m = re.fullmatch(r"(\d{1,2}):(\d{2})", text.strip())
    if not m:
        raise ValueError(f"bad clock time {text!r}")
    hours, mins = int(m.group(1)), int(m.group(2))
    if hours > 23 or mins > 59:
        raise ValueError(f"bad clock time {text!r}")
    return hours * 60 + mins


def fmt_money(cents: int) -> str:
    return f"{cents // 100}.{cents % 100:02d}"


def parse_money(text: str) -> int:
    m = re.fullmatch(r"(\d+)\.(\d{2})", text.strip())
    if not m:
        raise ValueError(f"bad amount {text!r}")
    return int(m.group(1)) * 100 + int(m.group(2))


# ---------------------------------------------------------------------------
# Intents and queries
# ---------------------------------------------------------------------------

IntentValue = Union[str, int]


@dataclass(frozen=True, order=True)
class AtomicIntent:
    slot: str
    value: IntentValue

    def __post_init__(self) -> None:
        expected = SLOT_TYPES.get(self.slot)
        if expected is None:
            raise QueryError(f"unknown intent slot {self.slot!r}")
        if not isinstance(self.value, expected) or isinstance(self.value, bool):
            raise QueryError(f"slot {self.slot} expects {expected.__name__}, got {self.value!r}")


def _check_intents(intents: Iterable[AtomicIntent]) -> dict[str, IntentValue]:
    slots: dict[str, IntentValue] = {}
    for intent in intents:
        if intent.slot in slots:
            raise QueryError(f"slot {intent.slot} given more than once")
        slots[intent.slot] = intent.value
    for required in ("origin", "destination", "depart_date"):
        if required not in slots:
            raise QueryError(f"missing required intent {required}")
    if slots["origin"] == slots["destination"]:
        raise QueryError("origin and destination must differ")
    try:
        parse_date(str(slots["depart_date"]))
        if "return_date" in slots:
            parse_date(str(slots["return_date"]))
    except ValueError as exc:
        raise QueryError(str(exc)) from None
    if "trip_length_days" not in slots and "return_date" not in slots:
        raise QueryError("either trip_length_days or return_date is required")
    if "trip_length_days" in slots:
        length = int(slots["trip_length_days"])
        if length < 1:
            raise QueryError("trip_length_days must be >= 1")
        if "return_date" in slots and add_days(str(slots["depart_date"]), length - 1) != slots["return_date"]:
            raise QueryError("return_date disagrees with trip_length_days")
    elif days_between(str(slots["depart_date"]), str(slots["return_date"])) < 0:
        raise QueryError("return_date before depart_date")
    mode = slots.get("transport_mode_preference")
    if mode is not None and mode not in MODES:
        raise QueryError(f"unknown transport mode {mode!r}")
    deadline = slots.get("arrival_deadline")
    if deadline is not None and not 0 <= int(deadline) < 1440:
        raise QueryError("arrival_deadline must be a minute of the day")
    budget = slots.get("budget_total")
    if budget is not None and int(budget) <= 0:
        raise QueryError("budget_total must be positive")
    for key in ("origin", "destination", "hotel_preference", "poi_requirement"):
        value = slots.get(key)
        if value is not None and (not str(value).strip() or re.search(r"[.<>;|=\n]", str(value))):
            raise QueryError(f"slot {key} has an unusable value {value!r}")
    return slots


def intent_set(**slots: IntentValue) -> frozenset[AtomicIntent]:
    return frozenset(AtomicIntent(k, v) for k, v in slots.items() if v is not None)


def query_id(intents: Iterable[AtomicIntent]) -> str:
    payload = json.dumps(sorted((i.slot, i.value) for i in intents), separators=(",", ":"))
    return "q" + hashlib.sha1(payload.encode()).hexdigest()[:12]


@dataclass(frozen=True)
class Query:
    id: str
    text: str
    intents: frozenset[AtomicIntent]
    constrained: bool
    difficulty: str = "unrated"

    def __post_init__(self) -> None:
        slots = _check_intents(self.intents)
        if self.constrained != bool(CONSTRAINT_SLOTS & set(slots)):
            raise QueryError("constrained flag disagrees with intents")
        if self.difficulty not in DIFFICULTIES:
            raise QueryError(f"unknown difficulty {self.difficulty!r}")

    @classmethod
    def from_intents(cls, intents: Iterable[AtomicIntent], difficulty: str = "unrated") -> "Query":
        intents = frozenset(intents)
        slots = _check_intents(intents)
        return cls(
            id=query_id(intents),
            text=canonical_text(intents),
            intents=intents,
            constrained=bool(CONSTRAINT_SLOTS & set(slots)),
            difficulty=difficulty,
        )

    @cached_property
    def slots(self) -> dict[str, IntentValue]:
        return {i.slot: i.value for i in self.intents}

    def slot(self, name: str, default: IntentValue | None = None) -> IntentValue | None:
        return self.slots.get(name, default)

    @property
    def origin(self) -> str:
        return str(self.slot("origin"))

    @property
    def destination(self) -> str:
        return str(self.slot("destination"))

    @property
    def depart_date(self) -> str:
        return str(self.slot("depart_date"))

    @cached_property
    def return_date(self) -> str:
        explicit = self.slot("return_date")
        if explicit is not None:
            return str(explicit)
        return add_days(self.depart_date, int(self.slot("trip_length_days")) - 1)

    @cached_property
    def nights(self) -> int:
        return days_between(self.depart_date, self.return_date)

    def with_difficulty(self, difficulty: str) -> "Query":
        return Query(self.id, self.text, self.intents, self.constrained, difficulty)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "intents": {i.slot: i.value for i in sorted(self.intents)},
            "constrained": self.constrained,
            "difficulty": self.difficulty,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Query":
        intents = frozenset(AtomicIntent(k, v) for k, v in data["intents"].items())
        return cls(data["id"], data["text"], intents, bool(data["constrained"]), data.get("difficulty", "unrated"))


def _length_word(days: int) -> str:
    return _NUMBER_WORDS[days] if days < len(_NUMBER_WORDS) else str(days)


def canonical_text(intents: Iterable[AtomicIntent]) -> str:
    """Render an intent set as the templated request text.

    The rendering is injective: `parse_query_text` recovers the intent set.
    """
    slots = {i.slot: i.value for i in intents}
    mode = slots.get("transport_mode_preference")
    mode_word = {"flight": "airport ", "train": "train "}.get(str(mode), "")
    if "trip_length_days" in slots:
        head = f"Please help schedule a {_length_word(int(slots['trip_length_days']))} day's {mode_word}trip"
    else:
        head = f"Please help schedule a {mode_word}trip"
    text = f"{head} from {slots['origin']} to {slots['destination']} departing on {slots['depart_date']}"
    if "return_date" in slots:
        text += f" and returning on {slots['return_date']}"
    text += "."
    if "budget_total" in slots:
        text += f" Keep the total budget within {fmt_money(int(slots['budget_total']))} yuan."
    if "arrival_deadline" in slots:
        text += f" I need to arrive before {fmt_clock(int(slots['arrival_deadline']))} on the departure day."
    if "hotel_preference" in slots:
        text += f" I'd like to stay at a {slots['hotel_preference']} hotel."
    if "poi_requirement" in slots:
        text += f" I want to visit {slots['poi_requirement']}."
    return text


_HEAD_RE = re.compile(
    r"Please help schedule a (?:(?P<len>\w+) day's )?(?P<mode>airport |train )?trip "
    r"from (?P<origin>.+?) to (?P<dest>.+?) departing on (?P<depart>\d{4}-\d{2}-\d{2})"
    r"(?: and returning on (?P<ret>\d{4}-\d{2}-\d{2}))?\."
)


def parse_query_text(text: str) -> frozenset[AtomicIntent]:
    """Recover the intent set from text produced by `canonical_text`."""
    m = _HEAD_RE.match(text)
    if not m:
        raise QueryError(f"not a templated query: {text!r}")
    slots: dict[str, IntentValue] = {
        "origin": m.group("origin"),
        "destination": m.group("dest"),
        "depart_date": m.group("depart"),
    }
    if m.group("len"):
        word = m.group("len")
        slots["trip_length_days"] = _NUMBER_WORDS.index(word) if word in _NUMBER_WORDS else int(word)
    if m.group("ret"):
        slots["return_date"] = m.group("ret")
    if m.group("mode"):
        slots["transport_mode_preference"] = "flight" if m.group("mode") == "airport " else "train"
    rest = text[m.end():]
    patterns = (
        ("budget_total", r" Keep the total budget within (\S+) yuan\.", parse_money),
        ("arrival_deadline", r" I need to arrive before (\d{2}:\d{2}) on the departure day\.", parse_clock),
        ("hotel_preference", r" I'd like to stay at a (.+?) hotel\.", str),
        ("poi_requirement", r" I want to visit (.+?)\.", str),
    )
    for slot, pattern, convert in patterns:
        found = re.match(pattern, rest)
        if found:
            slots[slot] = convert(found.group(1))
            rest = rest[found.end():]
    if rest:
        raise QueryError(f"unparsed query text {rest!r}")
    return intent_set(**slots)


# ---------------------------------------------------------------------------
# Itinerary
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Leg:
    record_id: str
    mode: str
    origin: str
    destination: str
    date: str
    depart_time: int
    arrive_time: int
    next_day: bool
    price: int

    @property
    def arrive_minute(self) -> int:
        """Arrival measured from midnight of the departure date."""
        return self.arrive_time + (1440 if self.next_day else 0)

    def absolute(self, anchor: str) -> tuple[int, int]:
        """(departure, arrival) in minutes since midnight of `anchor`."""
        base = days_between(anchor, self.date) * 1440
        return base + self.depart_time, base + self.arrive_minute


@dataclass(frozen=True)
class HotelStay:
    record_id: str
    name: str
    city: str
    checkin: str
    checkout: str
    total_price: int
    tags: tuple[str, ...] = ()


@dataclass(frozen=True)
class Visit:
    time: int
    poi: str


@dataclass(frozen=True)
class DayPlan:
    date: str
    visits: tuple[Visit, ...]


@dataclass(frozen=True)
class Itinerary:
    outbound_legs: tuple[Leg, ...] = ()
    hotel_stay: HotelStay | None = None
    return_legs: tuple[Leg, ...] = ()
    daily_plan: tuple[DayPlan, ...] = ()
    total_cost: int = 0

    @classmethod
    def assemble(cls, outbound, hotel, returns, daily_plan=()) -> "Itinerary":
        draft = cls(tuple(outbound), hotel, tuple(returns), tuple(daily_plan), 0)
        return cls(draft.outbound_legs, hotel, draft.return_legs, draft.daily_plan, itinerary_cost(draft))

    @property
    def legs(self) -> tuple[Leg, ...]:
        return self.outbound_legs + self.return_legs

    @property
    def cost_consistent(self) -> bool:
        return itinerary_cost(self) == self.total_cost

    def invariant_violations(self, transfer_buffer: int = 0) -> list[str]:
        """Chronology and cost problems, as human-readable diagnostics."""
        problems: list[str] = []
        if not self.cost_consistent:
            problems.append(f"total_cost {self.total_cost} != recomputed {itinerary_cost(self)}")
        anchor = self.outbound_legs[0].date if self.outbound_legs else (
            self.hotel_stay.checkin if self.hotel_stay else None)
        for day in self.daily_plan:
            times = [v.time for v in day.visits]
            if times != sorted(times):
                problems.append(f"visits on {day.date} are not time-ordered")
        if anchor is None:
            return problems
        for name, chain in (("outbound", self.outbound_legs), ("return", self.return_legs)):
            for prev, nxt in zip(chain, chain[1:]):
                if prev.destination != nxt.origin:
                    problems.append(f"{name} legs {prev.record_id}->{nxt.record_id} do not connect")
                if nxt.absolute(anchor)[0] < prev.absolute(anchor)[1] + transfer_buffer:
                    problems.append(f"{name} leg {nxt.record_id} departs before the previous leg arrives")
        if self.outbound_legs and self.return_legs:
            arrive = self.outbound_legs[-1].absolute(anchor)[1]
            depart = self.return_legs[0].absolute(anchor)[0]
            if depart < arrive + transfer_buffer:
                problems.append("return departs before the outbound arrival")
        stay = self.hotel_stay
        if stay is not None:
            if days_between(stay.checkin, stay.checkout) <= 0:
                problems.append("hotel checkout is not after checkin")
            if self.outbound_legs:
                checkin_end = (days_between(anchor, stay.checkin) + 1) * 1440
                if self.outbound_legs[-1].absolute(anchor)[1] > checkin_end:
                    problems.append("outbound arrives after the hotel checkin day")
            if self.return_legs and self.return_legs[0].absolute(anchor)[0] < days_between(anchor, stay.checkout) * 1440:
                problems.append("return departs before the hotel checkout day")
        return problems

    def to_dict(self) -> dict:
        return {
            "outbound_legs": [vars(leg) for leg in self.outbound_legs],
            "hotel_stay": None if self.hotel_stay is None else {**vars(self.hotel_stay), "tags": list(self.hotel_stay.tags)},
            "return_legs": [vars(leg) for leg in self.return_legs],
            "daily_plan": [{"date": d.date, "visits": [[v.time, v.poi] for v in d.visits]} for d in self.daily_plan],
            "total_cost": self.total_cost,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Itinerary":
        stay = data.get("hotel_stay")
        return cls(
            tuple(Leg(**leg) for leg in data["outbound_legs"]),
            None if stay is None else HotelStay(**{**stay, "tags": tuple(stay["tags"])}),
            tuple(Leg(**leg) for leg in data["return_legs"]),
            tuple(DayPlan(d["date"], tuple(Visit(t, p) for t, p in d["visits"])) for d in data["daily_plan"]),
            int(data["total_cost"]),
        )


VISIT_WINDOW = (8 * 60, 21 * 60)


def plan_violations(itinerary: Itinerary, transfer_buffer: int = 0) -> list[str]:
    """Daily-plan timing problems: visits outside opening hours or clashing with travel."""
    problems: list[str] = []
    arrive = itinerary.outbound_legs[-1] if itinerary.outbound_legs else None
    depart = itinerary.return_legs[0] if itinerary.return_legs else None
    for day in itinerary.daily_plan:
        if arrive is not None and day.date < arrive.date:
            problems.append(f"plan day {day.date} precedes the outbound trip")
        if depart is not None and day.date > depart.date:
            problems.append(f"plan day {day.date} follows the return trip")
        for v in day.visits:
            if not VISIT_WINDOW[0] <= v.time <= VISIT_WINDOW[1]:
                problems.append(f"visit to {v.poi} at {fmt_clock(v.time)} is outside opening hours")
            if arrive is not None and day.date == arrive.date and (
                    arrive.next_day or v.time < arrive.arrive_time + transfer_buffer):
                problems.append(f"visit to {v.poi} on {day.date} is before arrival")
            if depart is not None and day.date == depart.date and v.time > depart.depart_time - transfer_buffer:
                problems.append(f"visit to {v.poi} on {day.date} is after the return departure")
    return problems


def constraint_violations(query: Query, itinerary: Itinerary) -> list[tuple[str, str]]:
    """(slot, diagnostic) for every optional constraint the itinerary breaks."""
    out: list[tuple[str, str]] = []
    budget = query.slot("budget_total")
    if budget is not None and itinerary.total_cost > int(budget):
        out.append(("budget_total", f"cost {fmt_money(itinerary.total_cost)} exceeds budget {fmt_money(int(budget))}"))
    deadline = query.slot("arrival_deadline")
    if deadline is not None:
        last = itinerary.outbound_legs[-1] if itinerary.outbound_legs else None
        if last is None or last.next_day or last.date != query.depart_date or last.arrive_time > int(deadline):
            out.append(("arrival_deadline", f"outbound does not arrive before {fmt_clock(int(deadline))}"))
    mode = query.slot("transport_mode_preference")
    if mode is not None and any(leg.mode != mode for leg in itinerary.legs):
        out.append(("transport_mode_preference", f"not every leg travels by {mode}"))
    tag = query.slot("hotel_preference")
    if tag is not None and (itinerary.hotel_stay is None or tag not in itinerary.hotel_stay.tags):
        out.append(("hotel_preference", f"hotel is not {tag}"))
    poi = query.slot("poi_requirement")
    if poi is not None and not any(v.poi == poi for day in itinerary.daily_plan for v in day.visits):
        out.append(("poi_requirement", f"{poi} is not in the daily plan"))
    return out


def itinerary_cost(itinerary: Itinerary) -> int:
    """Sum of leg prices plus the hotel total, in cents."""
    cost = sum(leg.price for leg in itinerary.outbound_legs + itinerary.return_legs)
    if itinerary.hotel_stay is not None:
        cost += itinerary.hotel_stay.total_price
    return cost


# The answer's fenced `itinerary` block: one record per line, `kind: key=value; key=value`.

def _fmt_arrival(leg: Leg) -> str:
    return fmt_clock(leg.arrive_time) + ("+1" if leg.next_day else "")


def render_block(itinerary: Itinerary) -> str:
    lines = ["```itinerary"]
    for kind, legs in (("outbound", itinerary.outbound_legs), ("return", itinerary.return_legs)):
        for leg in legs:
            lines.append(
                f"{kind}: id={leg.record_id}; mode={leg.mode}; from={leg.origin}; to={leg.destination}; "
                f"date={leg.date}; depart={fmt_clock(leg.depart_time)}; arrive={_fmt_arrival(leg)}; price={leg.price}"
            )
    stay = itinerary.hotel_stay
    if stay is not None:
        lines.append(
            f"hotel: id={stay.record_id}; name={stay.name}; city={stay.city}; checkin={stay.checkin}; "
            f"checkout={stay.checkout}; total={stay.total_price}; tags={','.join(stay.tags)}"
        )
    for day in itinerary.daily_plan:
        visits = "|".join(f"{fmt_clock(v.time)} {v.poi}" for v in day.visits)
        lines.append(f"day: date={day.date}; visits={visits}")
    lines.append(f"total_cost: {itinerary.total_cost}")
    lines.append("```")
    return "\n".join(lines)


_BLOCK_RE = re.compile(r"```itinerary\n(.*?)\n```", re.S)


def _fields(body: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for part in body.split("; "):
        key, sep, value = part.partition("=")
        if not sep or key in out:
            raise ItineraryFormatError(f"bad field {part!r}")
        out[key.strip()] = value
    return out


def _leg(fields: dict[str, str]) -> Leg:
    arrive = fields["arrive"]
    next_day = arrive.endswith("+1")
    return Leg(
        record_id=fields["id"],
        mode=fields["mode"],
        origin=fields["from"],
        destination=fields["to"],
        date=parse_date(fields["date"]).isoformat(),
        depart_time=parse_clock(fields["depart"]),
        arrive_time=parse_clock(arrive[:-2] if next_day else arrive),
        next_day=next_day,
        price=int(fields["price"]),
    )


def parse_block(text: str) -> Itinerary:
    """Parse the first fenced itinerary block found in `text`."""
    m = _BLOCK_RE.search(text)
    if not m:
        raise ItineraryFormatError("no itinerary block")
    outbound: list[Leg] = []
    returns: list[Leg] = []
    stay: HotelStay | None = None
    days: list[DayPlan] = []
    total: int | None = None
    try:
        for line in m.group(1).splitlines():
            kind, sep, body = line.partition(": ")
            if not sep:
                raise ItineraryFormatError(f"bad line {line!r}")
            if kind == "total_cost":
                total = int(body)
                continue
            fields = _fields(body)
            if kind == "outbound":
                outbound.append(_leg(fields))
            elif kind == "return":
                returns.append(_leg(fields))
            elif kind == "hotel":
                if stay is not None:
                    raise ItineraryFormatError("more than one hotel record")
                tags = tuple(t for t in fields["tags"].split(",") if t)
                stay = HotelStay(fields["id"], fields["name"], fields["city"], parse_date(fields["checkin"]).isoformat(),
                                 parse_date(fields["checkout"]).isoformat(), int(fields["total"]), tags)
            elif kind == "day":
                visits = []
                for item in filter(None, fields["visits"].split("|")):
                    clock, _, poi = item.partition(" ")
                    visits.append(Visit(parse_clock(clock), poi))
                days.append(DayPlan(parse_date(fields["date"]).isoformat(), tuple(visits)))
            else:
                raise ItineraryFormatError(f"unknown record kind {kind!r}")
    except (KeyError, ValueError) as exc:
        if isinstance(exc, ItineraryFormatError):
            raise
        raise ItineraryFormatError(f"malformed itinerary field: {exc}") from None
    if total is None:
        raise ItineraryFormatError("missing total_cost")
    return Itinerary(tuple(outbound), stay, tuple(returns), tuple(days), total)


__all__ = [
    "AtomicIntent", "CONSTRAINT_SLOTS", "DayPlan", "HotelStay", "Itinerary", "ItineraryFormatError", "Leg",
    "MODES", "Query", "VISIT_WINDOW", "constraint_violations", "plan_violations", "QueryError", "SLOTS", "Visit", "add_days", "canonical_text", "days_between", "fmt_clock",
    "intent_set", "itinerary_cost", "parse_block", "parse_query_text", "render_block",
]
