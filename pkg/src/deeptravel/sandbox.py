"""Cached tool layer over a `WorldState`.

Every tool returns a `ToolResponse` whose `text` is the compact JSON placed
inside `<tool_response>` tags. Bad input never raises: it comes back as an
error response so an episode can carry on.
"""
from __future__ import annotations

import dataclasses
import json
import random
import re
import threading
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

from .domain import add_days, days_between, fmt_clock, parse_date
from .world import WorldState, advance_epoch, haversine_km

# Canonical keyword order per tool; optional parameters carry a default.
TOOL_SCHEMAS: dict[str, tuple[tuple[str, ...], dict[str, object]]] = {
    "flight_search": (("depart_city", "arrival_city", "depart_date"), {}),
    "train_search": (("depart_city", "arrival_city", "depart_date"), {}),
    "route_planning": (("origin", "destination", "city_name"), {}),
    "hotel_search": (("city_name", "checkin_date", "checkout_date"), {"hotel_name": None}),
    "poi_search": (("query", "city_name"), {}),
    "web_search": (("query",), {}),
}
TOOL_NAMES = tuple(TOOL_SCHEMAS)
WEB_TOP_K = 5
_STOPWORDS = frozenset({"a", "an", "and", "the", "to", "of", "in", "for", "on", "at", "is"})


@dataclass(frozen=True)
class ToolResponse:
    tool: str
    status: str
    text: str
    code: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @cached_property
    def payload(self) -> dict:
        return json.loads(self.text)

    @property
    def results(self) -> list:
        return self.payload.get("results", []) if self.ok else []

    @classmethod
    def success(cls, tool: str, epoch: int, args: dict, results: list) -> "ToolResponse":
        body = {"tool": tool, "status": "ok", "epoch": epoch, "args": args, "results": results}
        return cls(tool, "ok", _dumps(body))

    @classmethod
    def error(cls, tool: str, code: str, message: str) -> "ToolResponse":
        body = {"tool": tool, "status": "error", "code": code, "error": message}
        return cls(tool, "error", _dumps(body), code)


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def canonical_args(tool: str, args: dict) -> tuple[tuple[str, str], ...]:
    """Cache-key form of the schema arguments: trimmed, case-folded strings."""
    required, optional = TOOL_SCHEMAS[tool]
    out = []
    for name in required + tuple(optional):
        value = args.get(name)
        if value is None:
            out.append((name, ""))
        elif isinstance(value, str):
            out.append((name, value.strip().casefold()))
        else:
            out.append((name, f"!{value!r}"))
    return tuple(out)


CacheKey = tuple[str, tuple[tuple[str, str], ...], int]


class CacheStore:
    """On-demand response cache keyed by (tool, canonical args, epoch).

    The first writer for a key wins; entries are never overwritten, so
    responses cached at an earlier epoch stay retrievable unchanged.
    """

    def __init__(self) -> None:
        self.entries: dict[CacheKey, ToolResponse] = {}
        self.log: list[CacheKey] = []
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, key: CacheKey) -> ToolResponse | None:
        return self.entries.get(key)

    def get_or_insert(self, key: CacheKey, compute: Callable[[], ToolResponse]) -> ToolResponse:
        hit = self.entries.get(key)
        if hit is not None:
            return hit
        value = compute()
        with self._lock:
            hit = self.entries.get(key)
            if hit is not None:
                return hit
            self.entries[key] = value
            self.log.append(key)
        return value


@dataclass(frozen=True)
class LiveModeConfig:
    """Flakiness injected to mimic real APIs. Both rates 0 means sandbox behaviour."""

    failure_rate: float = 0.0
    drift_rate: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        for rate in (self.failure_rate, self.drift_rate):
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"rate out of [0, 1]: {rate}")

    @property
    def enabled(self) -> bool:
        return self.failure_rate > 0 or self.drift_rate > 0

    def stream(self, stream_id: object = 0) -> "LiveStream":
        return LiveStream(self, random.Random(f"live:{self.seed}:{stream_id}"))


@dataclass
class LiveStream:
    config: LiveModeConfig
    rng: random.Random


class Sandbox:
    """The six travel tools over one world, with an epoch-keyed cache."""

    def __init__(self, world: WorldState, cache: CacheStore | None = None) -> None:
        self.world = world
        self.cache = cache if cache is not None else CacheStore()
        self._epoch_lock = threading.Lock()

    @property
    def epoch(self) -> int:
        return self.world.epoch

    def advance_epoch(self) -> WorldState:
        with self._epoch_lock:
            self.world = advance_epoch(self.world)
        return self.world

    # -- dispatch ---------------------------------------------------------

    def call(self, tool: str, args: dict) -> ToolResponse:
        if tool not in TOOL_SCHEMAS:
            return ToolResponse.error(tool, "unknown_tool", f"unknown tool: {tool}")
        key = (tool, canonical_args(tool, args), self.world.epoch)
        return self.cache.get_or_insert(key, lambda: self.compute(tool, args))

    def cached(self, tool: str, args: dict, epoch: int) -> ToolResponse | None:
        """Re-access a response stored at any epoch, current or past."""
        return self.cache.get((tool, canonical_args(tool, args), epoch))

    def compute(self, tool: str, args: dict) -> ToolResponse:
        """Evaluate a tool against the current world, bypassing the cache."""
        required, optional = TOOL_SCHEMAS[tool]
        values = {k: args.get(k, optional.get(k)) for k in required + tuple(optional)}
        for k, v in values.items():
            if not isinstance(v, str) and (k in required or v is not None):
                return ToolResponse.error(tool, "bad_argument", f"{k} must be a string")
        try:
            return getattr(self, "_" + tool)(**values)
        except _ToolFailure as failure:
            return ToolResponse.error(tool, failure.code, failure.message)

    # -- public tool methods ---------------------------------------------

    def flight_search(self, depart_city: str, arrival_city: str, depart_date: str) -> ToolResponse:
        return self.call("flight_search", dict(depart_city=depart_city, arrival_city=arrival_city,
                                               depart_date=depart_date))

    def train_search(self, depart_city: str, arrival_city: str, depart_date: str) -> ToolResponse:
        return self.call("train_search", dict(depart_city=depart_city, arrival_city=arrival_city,
                                              depart_date=depart_date))

    def route_planning(self, origin: str, destination: str, city_name: str) -> ToolResponse:
        return self.call("route_planning", dict(origin=origin, destination=destination, city_name=city_name))

    def hotel_search(self, city_name: str, checkin_date: str, checkout_date: str,
                     hotel_name: str | None = None) -> ToolResponse:
        return self.call("hotel_search", dict(city_name=city_name, checkin_date=checkin_date,
                                              checkout_date=checkout_date, hotel_name=hotel_name))

    def poi_search(self, query: str, city_name: str) -> ToolResponse:
        return self.call("poi_search", dict(query=query, city_name=city_name))

    def web_search(self, query: str) -> ToolResponse:
        return self.call("web_search", dict(query=query))

    # -- implementations ---------------------------------------------------

    def _city(self, name: str) -> str:
        city = self.world.city(name)
        if city is None:
            raise _ToolFailure("unknown_city", f"unknown city: {name.strip()}")
        return city.name

    def _date(self, value: str) -> str:
        try:
            date = parse_date(value.strip()).isoformat()
        except ValueError:
            raise _ToolFailure("bad_date", f"bad date: {value.strip()}") from None
        if not self.world.config.start_date <= date <= self.world.end_date:
            raise _ToolFailure("out_of_horizon", f"date outside the searchable horizon: {date}")
        return date

    def _transport(self, mode: str, depart_city: str, arrival_city: str, depart_date: str) -> ToolResponse:
        tool = f"{mode}_search"
        a, b, date = self._city(depart_city), self._city(arrival_city), self._date(depart_date)
        results = [
            {"id": r.id, "mode": r.mode, "from": r.origin, "to": r.destination, "date": r.date,
             "depart": fmt_clock(r.depart_time), "arrive": fmt_clock(r.arrive_time), "next_day": r.next_day,
             "price": r.price, "seats": r.seats_available}
            for r in self.world.transport.get((mode, a, b, date), ())
        ]
        return ToolResponse.success(tool, self.world.epoch,
                                    {"depart_city": a, "arrival_city": b, "depart_date": date}, results)

    def _flight_search(self, depart_city, arrival_city, depart_date):
        return self._transport("flight", depart_city, arrival_city, depart_date)

    def _train_search(self, depart_city, arrival_city, depart_date):
        return self._transport("train", depart_city, arrival_city, depart_date)

    def _hotel_search(self, city_name, checkin_date, checkout_date, hotel_name=None):
        city = self._city(city_name)
        checkin, checkout = self._date(checkin_date), self._date(checkout_date)
        nights = days_between(checkin, checkout)
        if nights <= 0:
            raise _ToolFailure("invalid_date_range", "invalid date range")
        stay = [add_days(checkin, i) for i in range(nights)]
        wanted = (hotel_name or "").strip().casefold()
        results = []
        for h in self.world.hotels.get(city, ()):
            if wanted and wanted not in h.name.casefold():
                continue
            rooms = min(self.world.rooms.get((h.id, d), 0) for d in stay)
            if rooms <= 0:
                continue
            results.append({"id": h.id, "name": h.name, "city": city, "checkin": checkin, "checkout": checkout,
                            "nights": nights, "nightly_price": h.nightly_price,
                            "total_price": h.nightly_price * nights, "rooms": rooms, "tags": list(h.tags)})
        args = {"city_name": city, "checkin_date": checkin, "checkout_date": checkout, "hotel_name": hotel_name}
        return ToolResponse.success("hotel_search", self.world.epoch, args, results)

    def _poi_search(self, query, city_name):
        city = self._city(city_name)
        term = query.strip().casefold()
        results = [{"name": p.name, "city": city, "address": p.address, "lat": p.lat, "lon": p.lon}
                   for p in self.world.pois(city) if term in p.name.casefold()]
        return ToolResponse.success("poi_search", self.world.epoch, {"query": query.strip(), "city_name": city},
                                    results)

    def _resolve_place(self, name: str, city: str, role: str) -> tuple[str, float, float]:
        folded = name.strip().casefold()
        for p in self.world.places.get(city, ()):
            if p.name.casefold() == folded:
                return p.name, p.lat, p.lon
        for h in self.world.hotels.get(city, ()):
            if h.name.casefold() == folded:
                return h.name, h.lat, h.lon
        raise _ToolFailure("unresolved_place", f"cannot resolve {role} {name.strip()!r} in {city}")

    def _route_planning(self, origin, destination, city_name):
        city = self._city(city_name)
        a_name, a_lat, a_lon = self._resolve_place(origin, city, "origin")
        b_name, b_lat, b_lon = self._resolve_place(destination, city, "destination")
        cfg = self.world.config
        distance_m = int(round(haversine_km(a_lat, a_lon, b_lat, b_lon) * cfg.road_factor * 1000))
        duration = int(round(distance_m / 1000 / cfg.city_speed_kmh * 60))
        result = {"origin": a_name, "destination": b_name, "city": city, "distance_m": distance_m,
                  "duration_min": duration}
        return ToolResponse.success("route_planning", self.world.epoch,
                                    {"origin": a_name, "destination": b_name, "city_name": city}, [result])

    def _web_search(self, query):
        terms = _terms(query)
        scored = []
        for order, doc in enumerate(self.world.docs):
            overlap = len(terms & _terms(doc.topic + " " + doc.city))
            if overlap:
                scored.append((-overlap, order, doc))
        scored.sort(key=lambda t: (t[0], t[1]))
        results = [{"id": d.id, "title": d.topic, "snippet": d.snippet} for _, _, d in scored[:WEB_TOP_K]]
        return ToolResponse.success("web_search", self.world.epoch, {"query": query.strip()}, results)


class _ToolFailure(Exception):
    def __init__(self, code: str, message: str) -> None:
        super().__init__(message)
        self.code = code
        self.message = message


def _terms(text: str) -> set[str]:
    return {t for t in re.findall(r"[a-z0-9']+", text.casefold()) if t not in _STOPWORDS}


def _drift(response: ToolResponse, rng: random.Random) -> ToolResponse:
    """A regenerated response whose prices wobble the way a live API's do."""
    if not response.ok or response.tool not in ("flight_search", "train_search", "hotel_search"):
        return response
    body = json.loads(response.text)
    for row in body["results"]:
        factor = rng.uniform(0.9, 1.1)
        if "price" in row:
            row["price"] = max(1, int(round(row["price"] * factor)))
        if "nightly_price" in row:
            row["nightly_price"] = max(1, int(round(row["nightly_price"] * factor)))
            row["total_price"] = row["nightly_price"] * row["nights"]
    return dataclasses.replace(response, text=_dumps(body))


def call_tool_live(sandbox: Sandbox, stream: LiveStream | None, tool: str, args: dict) -> ToolResponse:
    """Tool call under live-API conditions: transient failures and response drift."""
    if stream is None or not stream.config.enabled:
        return sandbox.call(tool, args)
    if stream.rng.random() < stream.config.failure_rate:
        return ToolResponse.error(tool, "transient", "service temporarily unavailable, please retry")
    if stream.rng.random() < stream.config.drift_rate:
        if tool not in TOOL_SCHEMAS:
            return ToolResponse.error(tool, "unknown_tool", f"unknown tool: {tool}")
        return _drift(sandbox.compute(tool, args), stream.rng)
    return sandbox.call(tool, args)
