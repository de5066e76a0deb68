"""Seeded synthetic travel world: cities, transport schedules, hotels, POIs, web docs.

Schedules and identifiers depend only on (seed, config). Prices, seats and
room availability are redrawn per day-epoch from (seed, epoch), so
`advance_epoch` refreshes them while every record id survives.
"""
from __future__ import annotations

import dataclasses
import datetime as dt
import hashlib
import json
import math
import os
import random
from dataclasses import dataclass, field
from pathlib import Path

from .domain import add_days

FORMAT_NAME = "deeptravel-world"
FORMAT_VERSION = 1
SEED_ENV = "DEEPTRAVEL_SEED"


class ConfigError(ValueError):
    """Invalid world or run configuration."""


# name, latitude, longitude, landmark POIs
CITY_CATALOG: tuple[tuple[str, float, float, tuple[str, ...]], ...] = (
    ("Beijing", 39.9042, 116.4074,
     ("National Palace Museum", "The Great Wall", "Temple of Heaven", "Summer Palace", "Tiananmen Square")),
    ("Shanghai", 31.2304, 121.4737,
     ("The Bund", "Yu Garden", "Oriental Pearl Tower", "Nanjing Road", "Shanghai Museum")),
    ("Suzhou", 31.2989, 120.5853,
     ("Humble Administrator's Garden", "Tiger Hill", "Pingjiang Road", "Lingering Garden", "Jinji Lake")),
    ("Wuhan", 30.5928, 114.3055,
     ("Wuhan Conference Center", "Yellow Crane Tower", "Hankou River Beach", "East Lake", "Hubei Provincial Museum")),
    ("Hangzhou", 30.2741, 120.1551,
     ("West Lake", "Lingyin Temple", "Leifeng Pagoda", "Hefang Street", "Xixi Wetland")),
    ("Guangzhou", 23.1291, 113.2644,
     ("Canton Tower", "Chen Clan Ancestral Hall", "Shamian Island", "Baiyun Mountain", "Yuexiu Park")),
    ("Chengdu", 30.5728, 104.0668,
     ("Giant Panda Base", "Jinli Street", "Wenshu Monastery", "Kuanzhai Alley", "Du Fu Thatched Cottage")),
    ("Xi'an", 34.3416, 108.9398,
     ("Terracotta Army", "Xi'an City Wall", "Big Wild Goose Pagoda", "Muslim Quarter", "Bell Tower")),
    ("Nanjing", 32.0603, 118.7969,
     ("Sun Yat-sen Mausoleum", "Confucius Temple", "Xuanwu Lake", "Nanjing Museum", "Ming Xiaoling")),
    ("Shenzhen", 22.5431, 114.0579,
     ("Window of the World", "OCT Harbour", "Lianhua Mountain", "Dameisha Beach", "Splendid China")),
    ("Chongqing", 29.5630, 106.5516,
     ("Hongya Cave", "Jiefangbei", "Ciqikou Ancient Town", "Eling Park", "Chaotianmen")),
    ("Tianjin", 39.3434, 117.3616,
     ("Tianjin Eye", "Italian Style Town", "Ancient Culture Street", "Five Great Avenues", "Haihe River")),
    ("Qingdao", 36.0671, 120.3826,
     ("Zhanqiao Pier", "Laoshan Mountain", "Badaguan", "Tsingtao Beer Museum", "May Fourth Square")),
    ("Xiamen", 24.4798, 118.0894,
     ("Gulangyu Island", "Nanputuo Temple", "Zengcuoan", "Xiamen University", "Huandao Road")),
)

HOTEL_BRANDS = ("Atour", "Hanting", "Ji Hotel", "Holiday Inn Express", "Marriott", "Hilton Garden Inn",
                "Orange Hotel", "Home Inn", "Vienna Hotel", "Ramada", "Crowne Plaza", "Jinjiang Inn")
DISTRICTS = ("Central", "Riverside", "Station", "Old Town", "Lakeside", "Financial District", "University Town",
             "Airport", "Expo Park", "High-Tech Zone", "Harbour", "North Gate")
HOTEL_TAGS = ("riverside", "near-station", "business", "breakfast", "quiet", "city-center")
AIRLINES = ("CA", "MU", "CZ", "HU", "ZH", "MF", "3U")
DOC_TOPICS = ("Introduction to {city}", "{city} food guide", "{city} travel tips", "Best time to visit {city}",
              "{city} public transport guide")


@dataclass(frozen=True)
class WorldConfig:
    n_cities: int = 6
    start_date: str = "2025-06-20"
    horizon_days: int = 30
    flight_link_prob: float = 0.85
    train_link_prob: float = 0.75
    train_max_km: float = 1600.0
    options_per_link: tuple[int, int] = (2, 6)
    hotels_per_city: tuple[int, int] = (3, 10)
    flight_price_range: tuple[int, int] = (40_000, 250_000)
    train_price_range: tuple[int, int] = (15_000, 90_000)
    hotel_price_range: tuple[int, int] = (25_000, 120_000)
    sellout_prob: float = 0.08
    road_factor: float = 1.3
    city_speed_kmh: float = 40.0

    def validate(self) -> None:
        if self.n_cities < 2:
            raise ConfigError(f"need at least 2 cities, got {self.n_cities}")
        if self.horizon_days < 1:
            raise ConfigError("empty date horizon")
        try:
            dt.date.fromisoformat(self.start_date)
        except ValueError:
            raise ConfigError(f"bad start_date {self.start_date!r}") from None
        for lo, hi in (self.options_per_link, self.hotels_per_city, self.flight_price_range,
                       self.train_price_range, self.hotel_price_range):
            if not 0 < lo <= hi:
                raise ConfigError(f"bad range ({lo}, {hi})")
        for p in (self.flight_link_prob, self.train_link_prob, self.sellout_prob):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"probability out of range: {p}")
        if self.road_factor <= 0 or self.city_speed_kmh <= 0:
            raise ConfigError("road_factor and city_speed_kmh must be positive")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "WorldConfig":
        fields_ = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - fields_
        if unknown:
            raise ConfigError(f"unknown world config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


@dataclass(frozen=True)
class City:
    name: str
    lat: float
    lon: float

    def __post_init__(self) -> None:
        if not (-90.0 <= self.lat <= 90.0 and -180.0 <= self.lon <= 180.0):
            raise ConfigError(f"coordinate out of range for {self.name}")


@dataclass(frozen=True)
class TransportRecord:
    id: str
    mode: str
    origin: str
    destination: str
    date: str
    depart_time: int
    arrive_time: int
    next_day: bool
    price: int
    seats_available: int

    @property
    def duration(self) -> int:
        return self.arrive_time + (1440 if self.next_day else 0) - self.depart_time

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class HotelRecord:
    id: str
    name: str
    city: str
    nightly_price: int
    lat: float
    lon: float
    tags: tuple[str, ...]


@dataclass(frozen=True)
class Place:
    """A POI or station that route planning can resolve."""

    name: str
    city: str
    kind: str
    address: str
    lat: float
    lon: float


@dataclass(frozen=True)
class WebDoc:
    id: str
    topic: str
    city: str
    snippet: str


@dataclass
class WorldState:
    seed: int
    config: WorldConfig
    epoch: int
    cities: tuple[City, ...]
    transport: dict[tuple[str, str, str, str], tuple[TransportRecord, ...]]
    hotels: dict[str, tuple[HotelRecord, ...]]
    rooms: dict[tuple[str, str], int]
    places: dict[str, tuple[Place, ...]]
    docs: tuple[WebDoc, ...]
    _digest: str | None = field(default=None, repr=False, compare=False)

    @property
    def dates(self) -> list[str]:
        return [add_days(self.config.start_date, i) for i in range(self.config.horizon_days)]

    @property
    def end_date(self) -> str:
        return add_days(self.config.start_date, self.config.horizon_days - 1)

    def city(self, name: str) -> City | None:
        folded = name.strip().casefold()
        for city in self.cities:
            if city.name.casefold() == folded:
                return city
        return None

    def pois(self, city: str) -> tuple[Place, ...]:
        return tuple(p for p in self.places.get(city, ()) if p.kind == "poi")

    def transport_ids(self) -> set[str]:
        return {r.id for recs in self.transport.values() for r in recs}

    def records(self):
        """Every entity as a JSON-ready dict, in a canonical order."""
        for c in self.cities:
            yield {"type": "city", "name": c.name, "lat": c.lat, "lon": c.lon}
        for key in sorted(self.transport):
            for rec in self.transport[key]:
                yield {"type": "transport", **rec.to_json()}
        for city in sorted(self.hotels):
            for h in self.hotels[city]:
                rooms = {d: self.rooms[(h.id, d)] for d in self.dates}
                yield {"type": "hotel", **dataclasses.asdict(h), "tags": list(h.tags), "rooms": rooms}
        for city in sorted(self.places):
            for p in self.places[city]:
                yield {"type": "place", **dataclasses.asdict(p)}
        for doc in self.docs:
            yield {"type": "doc", **dataclasses.asdict(doc)}

    def header(self) -> dict:
        return {"format": FORMAT_NAME, "version": FORMAT_VERSION, "seed": self.seed, "epoch": self.epoch,
                "config": self.config.to_dict()}

    def serialize(self) -> str:
        lines = [json.dumps(self.header(), sort_keys=True, separators=(",", ":"))]
        lines.extend(json.dumps(r, sort_keys=True, separators=(",", ":")) for r in self.records())
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        if self._digest is None:
            self._digest = hashlib.sha256(self.serialize().encode()).hexdigest()
        return self._digest


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def _rng(*parts) -> random.Random:
    key = "\x1f".join(str(p) for p in parts).encode()
    return random.Random(int.from_bytes(hashlib.sha256(key).digest()[:8], "big"))


def _log_uniform(rng: random.Random, lo: int, hi: int) -> int:
    return int(round(math.exp(rng.uniform(math.log(lo), math.log(hi)))))


def haversine_km(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    r = 6371.0088
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp, dl = p2 - p1, math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * r * math.asin(math.sqrt(a))


def seed_from_env(default: int) -> int:
    """`DEEPTRAVEL_SEED` overrides a configured seed when set."""
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _make_cities(seed: int, n: int) -> tuple[tuple[City, tuple[str, ...]], ...]:
    out = []
    for i in range(n):
        if i < len(CITY_CATALOG):
            name, lat, lon, pois = CITY_CATALOG[i]
        else:
            rng = _rng(seed, "city", i)
            name = f"City{i + 1}"
            lat, lon = round(rng.uniform(22.0, 42.0), 4), round(rng.uniform(103.0, 122.0), 4)
            pois = tuple(f"{name} {kind}" for kind in ("Museum", "Central Park", "Old Street", "Tower", "Lake"))
        out.append((City(name, lat, lon), pois))
    return tuple(out)


def _schedule(seed: int, cfg: WorldConfig, cities: tuple[City, ...]):
    """Links and per-date services. Links are symmetric so round trips exist."""
    rng = _rng(seed, "schedule")
    dates = [add_days(cfg.start_date, i) for i in range(cfg.horizon_days)]
    links: set[tuple[str, str, str]] = set()
    for i, a in enumerate(cities):
        for b in cities[i + 1:]:
            km = haversine_km(a.lat, a.lon, b.lat, b.lon)
            if rng.random() < cfg.flight_link_prob:
                links.add(("flight", a.name, b.name))
                links.add(("flight", b.name, a.name))
            if km <= cfg.train_max_km and rng.random() < cfg.train_link_prob:
                links.add(("train", a.name, b.name))
                links.add(("train", b.name, a.name))
    by_name = {c.name: c for c in cities}
    services: dict[tuple[str, str, str, str], list[tuple[str, int, int, bool]]] = {}
    counter = {"flight": 0, "train": 0}
    for mode, a, b in sorted(links):
        ca, cb = by_name[a], by_name[b]
        km = haversine_km(ca.lat, ca.lon, cb.lat, cb.lon)
        for date in dates:
            k = rng.randint(*cfg.options_per_link)
            rows = []
            for _ in range(k):
                if mode == "flight":
                    depart = rng.randrange(6 * 60, 22 * 60, 5)
                    duration = int(km / 750 * 60) + 45 + rng.randrange(0, 40, 5)
                    code = AIRLINES[counter["flight"] % len(AIRLINES)]
                    ident = f"{code}{1000 + counter['flight']}"
                else:
                    depart = rng.randrange(6 * 60, 21 * 60, 5)
                    duration = int(km / 260 * 60) + 20 + rng.randrange(0, 60, 5)
                    code = "G" if rng.random() < 0.7 else "D"
                    ident = f"{code}{1000 + counter['train']}"
                counter[mode] += 1
                arrive = depart + duration
                rows.append((ident, depart, arrive % 1440, arrive >= 1440))
            rows.sort(key=lambda r: (r[1], r[0]))
            services[(mode, a, b, date)] = rows
    return services


def _hotels_and_places(seed: int, cfg: WorldConfig, cities):
    hotels: dict[str, tuple[tuple[str, str, float, float, tuple[str, ...]], ...]] = {}
    places: dict[str, tuple[Place, ...]] = {}
    for idx, (city, poi_names) in enumerate(cities):
        rng = _rng(seed, "hotels", city.name)
        n = rng.randint(*cfg.hotels_per_city)
        brands = list(HOTEL_BRANDS[1:])
        rng.shuffle(brands)
        brands = ["Atour"] + brands
        districts = list(DISTRICTS)
        rng.shuffle(districts)
        rows = []
        for j in range(n):
            name = f"{brands[j % len(brands)]} {city.name} {districts[j % len(districts)]}"
            tags = tuple(sorted(rng.sample(HOTEL_TAGS, rng.randint(1, 3))))
            lat = round(city.lat + rng.uniform(-0.08, 0.08), 5)
            lon = round(city.lon + rng.uniform(-0.08, 0.08), 5)
            rows.append((f"H{idx:02d}{j:02d}", name, lat, lon, tags))
        hotels[city.name] = tuple(rows)
        prng = _rng(seed, "places", city.name)
        plist = []
        for k, poi in enumerate(poi_names):
            lat = round(city.lat + prng.uniform(-0.15, 0.15), 5)
            lon = round(city.lon + prng.uniform(-0.15, 0.15), 5)
            plist.append(Place(poi, city.name, "poi", f"No. {prng.randint(1, 300)} {poi} Road, {city.name}", lat, lon))
        for station in ("Railway Station", "Airport"):
            lat = round(city.lat + prng.uniform(-0.2, 0.2), 5)
            lon = round(city.lon + prng.uniform(-0.2, 0.2), 5)
            plist.append(Place(f"{city.name} {station}", city.name, "station", f"{station} Road, {city.name}", lat, lon))
        places[city.name] = tuple(plist)
    return hotels, places


def _docs(cities, places) -> tuple[WebDoc, ...]:
    docs = []
    for city, _ in cities:
        for k, template in enumerate(DOC_TOPICS):
            topic = template.format(city=city.name)
            docs.append(WebDoc(f"D-{city.name}-{k}", topic, city.name,
                               f"{topic}: curated notes on getting around {city.name}, local highlights and tips."))
        for poi in places[city.name]:
            if poi.kind == "poi":
                docs.append(WebDoc(f"D-{city.name}-{poi.name}", f"{poi.name} visitor guide", city.name,
                                   f"Opening hours and ticket advice for {poi.name} in {city.name}."))
    return tuple(docs)


def _epoch_attributes(seed: int, cfg: WorldConfig, epoch: int, services, hotel_rows, dates):
    rng = _rng(seed, "epoch", epoch)
    transport: dict[tuple[str, str, str, str], tuple[TransportRecord, ...]] = {}
    for key in sorted(services):
        mode, a, b, date = key
        lo, hi = cfg.flight_price_range if mode == "flight" else cfg.train_price_range
        recs = []
        for ident, depart, arrive, next_day in services[key]:
            price = _log_uniform(rng, lo, hi)
            seats = 0 if rng.random() < cfg.sellout_prob else rng.randint(1, 40)
            recs.append(TransportRecord(ident, mode, a, b, date, depart, arrive, next_day, price, seats))
        transport[key] = tuple(recs)
    hotels: dict[str, tuple[HotelRecord, ...]] = {}
    rooms: dict[tuple[str, str], int] = {}
    for city in sorted(hotel_rows):
        out = []
        for ident, name, lat, lon, tags in hotel_rows[city]:
            out.append(HotelRecord(ident, name, city, _log_uniform(rng, *cfg.hotel_price_range), lat, lon, tags))
            for date in dates:
                rooms[(ident, date)] = 0 if rng.random() < cfg.sellout_prob else rng.randint(1, 12)
        hotels[city] = tuple(out)
    return transport, hotels, rooms


def generate_world(seed: int, config: WorldConfig | None = None, epoch: int = 0) -> WorldState:
    """Build the world for (seed, config) at `epoch`; pure function of its inputs."""
    cfg = config or WorldConfig()
    cfg.validate()
    if epoch < 0:
        raise ConfigError("epoch must be non-negative")
    cities = _make_cities(seed, cfg.n_cities)
    city_objs = tuple(c for c, _ in cities)
    if len({c.name for c in city_objs}) != len(city_objs):
        raise ConfigError("city names must be unique")
    services = _schedule(seed, cfg, city_objs)
    hotel_rows, places = _hotels_and_places(seed, cfg, cities)
    dates = [add_days(cfg.start_date, i) for i in range(cfg.horizon_days)]
    transport, hotels, rooms = _epoch_attributes(seed, cfg, epoch, services, hotel_rows, dates)
    return WorldState(seed, cfg, epoch, city_objs, transport, hotels, rooms, places, _docs(cities, places))


def advance_epoch(world: WorldState) -> WorldState:
    """The same world one day later: ids and schedules kept, prices/availability redrawn."""
    services = {k: [(r.id, r.depart_time, r.arrive_time, r.next_day) for r in recs]
                for k, recs in world.transport.items()}
    hotel_rows = {c: tuple((h.id, h.name, h.lat, h.lon, h.tags) for h in hs) for c, hs in world.hotels.items()}
    epoch = world.epoch + 1
    transport, hotels, rooms = _epoch_attributes(world.seed, world.config, epoch, services, hotel_rows, world.dates)
    return dataclasses.replace(world, epoch=epoch, transport=transport, hotels=hotels, rooms=rooms, _digest=None)


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------


def save_world(world: WorldState, path: str | os.PathLike) -> str:
    Path(path).write_text(world.serialize(), encoding="utf-8")
    return world.digest()


def load_world(path: str | os.PathLike) -> WorldState:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ConfigError(f"{path}: empty world file")
    header = json.loads(lines[0])
    if header.get("format") != FORMAT_NAME:
        raise ConfigError(f"{path}: not a world file")
    if header.get("version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported world version {header.get('version')}")
    cfg = WorldConfig.from_dict(header["config"])
    cities, places, docs = [], {}, []
    transport: dict = {}
    hotels: dict = {}
    rooms: dict = {}
    for line in lines[1:]:
        rec = json.loads(line)
        kind = rec.pop("type")
        if kind == "city":
            cities.append(City(**rec))
        elif kind == "transport":
            r = TransportRecord(**rec)
            transport.setdefault((r.mode, r.origin, r.destination, r.date), []).append(r)
        elif kind == "hotel":
            avail = rec.pop("rooms")
            h = HotelRecord(**{**rec, "tags": tuple(rec["tags"])})
            hotels.setdefault(h.city, []).append(h)
            for date, n in avail.items():
                rooms[(h.id, date)] = n
        elif kind == "place":
            p = Place(**rec)
            places.setdefault(p.city, []).append(p)
        elif kind == "doc":
            docs.append(WebDoc(**rec))
        else:
            raise ConfigError(f"{path}: unknown record type {kind!r}")
    return WorldState(
        seed=int(header["seed"]), config=cfg, epoch=int(header["epoch"]), cities=tuple(cities),
        transport={k: tuple(v) for k, v in transport.items()}, hotels={k: tuple(v) for k, v in hotels.items()},
        rooms=rooms, places={k: tuple(v) for k, v in places.items()}, docs=tuple(docs),
    )
