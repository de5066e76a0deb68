"""Query synthesis, difficulty scoring, benchmark splits and teacher-trace distillation."""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
import random
import re
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .domain import (
    CONSTRAINT_SLOTS, VISIT_WINDOW, AtomicIntent, DayPlan, HotelStay, Itinerary, Leg, Query, QueryError, Visit,
    add_days, constraint_violations, intent_set,
)
from .policy import OracleAgent, PolicyParams, SoftmaxAgent
from .protocol import Agent, EpisodeLimits, Environment, Trajectory, run_episode, validate_format
from .sandbox import Sandbox
from .verifier import DEFAULT_TRANSFER_BUFFER, Verifier
from .world import HOTEL_TAGS, ConfigError, WorldState

logger = logging.getLogger(__name__)

BENCHMARK_SPLITS = ("constrained", "unconstrained")
LEVELS = ("easy", "medium", "hard")


@dataclass(frozen=True)
class CombinatoricsConfig:
    """Which values each slot ranges over. Optional slots also take 'absent'."""

    dates: tuple[str, ...] | None = None
    trip_lengths: tuple[int, ...] = (2, 3, 4)
    budgets: tuple[int, ...] = (150000, 250000, 400000)
    deadlines: tuple[int, ...] = (12 * 60, 18 * 60)
    hotel_tags: tuple[str, ...] = tuple(HOTEL_TAGS)
    modes: tuple[str, ...] = ("flight", "train")
    pois_per_city: int = 2
    max_constraints: int | None = 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CombinatoricsConfig":
        known = {f.name for f in fields(cls)}
        if set(data) - known:
            raise ConfigError(f"unknown combinatorics settings: {sorted(set(data) - known)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


def _slot_combinations(world: WorldState, config: CombinatoricsConfig) -> Iterator[dict]:
    if len(world.cities) < 2:
        raise ConfigError("enumeration needs at least two cities")
    dates = list(config.dates) if config.dates is not None else world.dates
    names = [c.name for c in world.cities]
    for origin, dest in itertools.permutations(names, 2):
        optional = [
            ("budget_total", config.budgets),
            ("arrival_deadline", config.deadlines),
            ("hotel_preference", config.hotel_tags),
            ("transport_mode_preference", config.modes),
            ("poi_requirement", tuple(p.name for p in world.pois(dest)[:config.pois_per_city])),
        ]
        choices = [[(slot, None)] + [(slot, v) for v in values] for slot, values in optional]
        combos = []
        for combo in itertools.product(*choices):
            extra = {slot: v for slot, v in combo if v is not None}
            if config.max_constraints is None or len(extra) <= config.max_constraints:
                combos.append(extra)
        for date in dates:
            for length in config.trip_lengths:
                if add_days(date, length - 1) > world.end_date or date < world.config.start_date:
                    continue
                for extra in combos:
                    yield dict(origin=origin, destination=dest, depart_date=date, trip_length_days=length, **extra)


def enumerate_intents(world: WorldState, config: CombinatoricsConfig = CombinatoricsConfig()
                      ) -> Iterator[frozenset[AtomicIntent]]:
    """Every valid slot combination, in a fixed order."""
    for slots in _slot_combinations(world, config):
        yield intent_set(**slots)


def synthesize_query(intents: Iterable[AtomicIntent]) -> Query:
    """Templated request text for an intent set; raises QueryError with a diagnostic when invalid."""
    return Query.from_intents(intents)


# ---------------------------------------------------------------------------
# Feasibility witness (independent exhaustive search over the world)
# ---------------------------------------------------------------------------


def _legs(world: WorldState, a: str, b: str, date: str, mode: str | None) -> list[Leg]:
    out = []
    for m in ("flight", "train"):
        if mode is not None and m != mode:
            continue
        for r in world.transport.get((m, a, b, date), ()):
            if r.seats_available > 0:
                out.append(Leg(r.id, r.mode, r.origin, r.destination, r.date, r.depart_time, r.arrive_time,
                               r.next_day, r.price))
    return out


def _stays(world: WorldState, query: Query) -> list[HotelStay | None]:
    if query.nights == 0:
        return [None]
    nights = [add_days(query.depart_date, i) for i in range(query.nights)]
    out = []
    for h in world.hotels.get(query.destination, ()):
        if all(world.rooms.get((h.id, d), 0) > 0 for d in nights):
            out.append(HotelStay(h.id, h.name, h.city, query.depart_date, query.return_date,
                                 h.nightly_price * query.nights, h.tags))
    return out


def _poi_visit(query: Query, poi: str, out: Leg, ret: Leg, buffer: int) -> DayPlan | None:
    """Earliest visit to `poi` that fits between arrival and return, if any."""
    lo, hi = VISIT_WINDOW
    for offset in range(query.nights + 1):
        date = add_days(query.depart_date, offset)
        start, end = lo, hi
        if date == out.date:
            if out.next_day:
                continue
            start = max(start, out.arrive_time + buffer)
        if date == ret.date:
            end = min(end, ret.depart_time - buffer)
        if start <= end:
            return DayPlan(date, (Visit(start, poi),))
    return None


def feasibility_witness(world: WorldState, query: Query, transfer_buffer: int = DEFAULT_TRANSFER_BUFFER
                        ) -> Itinerary | None:
    """Cheapest itinerary from the full world satisfying every hard constraint, or None.

    A required POI is visited at the earliest slot that fits the schedule.
    """
    mode = query.slot("transport_mode_preference")
    poi = query.slot("poi_requirement")
    if poi is not None and poi not in {p.name for p in world.pois(query.destination)}:
        return None
    outs = _legs(world, query.origin, query.destination, query.depart_date, mode)
    rets = _legs(world, query.destination, query.origin, query.return_date, mode)
    stays = _stays(world, query)
    best = None
    for out, ret, stay in itertools.product(outs, rets, stays):
        cost = out.price + ret.price + (stay.total_price if stay else 0)
        if best is not None and cost >= best.total_cost:
            continue
        itin = Itinerary.assemble((out,), stay, (ret,))
        if itin.invariant_violations(transfer_buffer):
            continue
        if any(slot != "poi_requirement" for slot, _ in constraint_violations(query, itin)):
            continue
        if poi is not None:
            day = _poi_visit(query, poi, out, ret, transfer_buffer)
            if day is None:
                continue
            itin = Itinerary.assemble((out,), stay, (ret,), (day,))
        best = itin
    return best


def load_overrides(path: str | Path | None) -> tuple[set[str], set[str]]:
    """(allow, deny) id sets from a file of lines 'allow <id>' / 'deny <id>'."""
    allow: set[str] = set()
    deny: set[str] = set()
    if path is None:
        return allow, deny
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        verb, _, qid = line.partition(" ")
        if verb not in ("allow", "deny") or not qid.strip():
            raise ConfigError(f"{path}:{lineno}: expected 'allow <id>' or 'deny <id>'")
        (allow if verb == "allow" else deny).add(qid.strip())
    return allow, deny


def sanity_filter(world: WorldState, query: Query, allow: set[str] = frozenset(), deny: set[str] = frozenset()
                  ) -> bool:
    if query.id in deny:
        return False
    return query.id in allow or feasibility_witness(world, query) is not None


# ---------------------------------------------------------------------------
# Difficulty
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Thresholds:
    easy: Fraction = Fraction(2, 3)
    medium: Fraction = Fraction(1, 3)

    def classify(self, passes: int, k: int) -> str:
        p = Fraction(passes, k)
        if p >= self.easy:
            return "easy"
        if p >= self.medium:
            return "medium"
        return "hard"


def make_probe(spec: str) -> Agent:
    """Build a probe agent from a short spec.

    'oracle', 'untrained', 'noisy:<eps>' (oracle with random deviations),
    'weak:<eps>' (noisy oracle that only flies and always takes the cheapest
    candidates) or a params file path.
    """
    if spec == "oracle":
        return OracleAgent()
    if spec == "untrained":
        return SoftmaxAgent(PolicyParams())
    kind, _, arg = spec.partition(":")
    if kind in ("noisy", "weak") and arg:
        try:
            eps = float(arg)
        except ValueError:
            raise ConfigError(f"bad probe {spec!r}") from None
        if not 0.0 <= eps <= 1.0:
            raise ConfigError(f"probe noise out of [0, 1]: {eps}")
        return OracleAgent(eps) if kind == "noisy" else OracleAgent(eps, ("flight",), "cheapest")
    if Path(spec).is_file():
        return SoftmaxAgent(PolicyParams.load(spec))
    raise ConfigError(f"unknown probe {spec!r}")


def score_difficulty(query: Query, probe: Agent, k: int, sandbox: Sandbox, verifier: Verifier | None = None,
                     limits: EpisodeLimits | None = None, thresholds: Thresholds = Thresholds(),
                     seed: int = 0, early_stop: bool = False) -> tuple[str, int]:
    """(label, passes) from k seeded probe episodes.

    With `early_stop`, sampling ends once the remaining episodes cannot change
    the label; the label is the same as a full run but `passes` may be partial.
    """
    if k < 1:
        raise ConfigError("k must be at least 1")
    verifier = verifier or Verifier()
    limits = limits or EpisodeLimits()
    passes = 0
    for i in range(k):
        t = run_episode(probe, Environment(sandbox), query, limits, random.Random(f"probe:{seed}:{query.id}:{i}"))
        passes += verifier.joint_reward(query, t).r
        remaining = k - i - 1
        if early_stop and thresholds.classify(passes, k) == thresholds.classify(passes + remaining, k):
            break
    return thresholds.classify(passes, k), passes


# ---------------------------------------------------------------------------
# Splits and benchmark construction
# ---------------------------------------------------------------------------


@dataclass
class SplitSpec:
    benchmark: dict[str, dict[str, int]] = field(default_factory=dict)
    train: int = 0
    val: int = 0

    @property
    def empty(self) -> bool:
        return not self.benchmark and not self.train and not self.val


_BENCH_RE = re.compile(r"^(\d+)/(\d+)/(\d+)$")


def parse_splits(text: str) -> SplitSpec:
    """'constrained=156/45/299,unconstrained=222/78/200,train=450,val=50' -> SplitSpec."""
    spec = SplitSpec()
    seen: set[str] = set()
    for part in filter(None, (p.strip() for p in text.split(","))):
        name, sep, value = part.partition("=")
        name = name.strip()
        if not sep:
            raise ValueError(f"split {part!r} lacks '='")
        if name in seen:
            raise ValueError(f"duplicate split name {name!r}")
        seen.add(name)
        if name in BENCHMARK_SPLITS:
            m = _BENCH_RE.match(value.strip())
            if not m:
                raise ValueError(f"benchmark split {name} needs easy/medium/hard counts")
            spec.benchmark[name] = dict(zip(LEVELS, map(int, m.groups())))
        elif name in ("train", "val"):
            if not value.strip().isdigit():
                raise ValueError(f"split {name} needs a count")
            setattr(spec, name, int(value))
        else:
            raise ValueError(f"unknown split name {name!r}")
    return spec


class InsufficientPool(RuntimeError):
    def __init__(self, deficits: dict[tuple[str, str], int]) -> None:
        self.deficits = deficits
        cells = ", ".join(f"{s}/{lvl} short by {n}" for (s, lvl), n in sorted(deficits.items()))
        super().__init__(f"not enough queries: {cells}")


def build_benchmark(scored: Iterable[Query], counts: dict[str, dict[str, int]],
                    exclude: Iterable[str] = ()) -> dict[str, list[Query]]:
    """Fill each (split, difficulty) cell in stream order from already-labelled queries."""
    excluded = set(exclude)
    need = {(s, lvl): n for s, cells in counts.items() for lvl, n in cells.items() if n > 0}
    out: dict[str, list[Query]] = {s: [] for s in counts}
    used: set[str] = set()
    for q in scored:
        if not need:
            break
        split = "constrained" if q.constrained else "unconstrained"
        key = (split, q.difficulty)
        if key not in need or q.id in used or q.id in excluded:
            continue
        out[split].append(q)
        used.add(q.id)
        need[key] -= 1
        if need[key] == 0:
            del need[key]
    if need:
        raise InsufficientPool(need)
    check_disjoint(out)
    return out


def check_disjoint(splits: dict[str, Sequence[Query]]) -> None:
    owner: dict[str, str] = {}
    for name, queries in splits.items():
        for q in queries:
            if q.id in owner:
                raise ValueError(f"query {q.id} appears in both {owner[q.id]} and {name}")
            owner[q.id] = name


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_queries(queries: Iterable[Query], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(json.dumps(q.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
            n += 1
    return n


def read_queries(path: str | Path) -> list[Query]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(Query.from_dict(json.loads(line)))
                except (json.JSONDecodeError, KeyError, QueryError, TypeError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad query record: {exc}") from None
    return out


@dataclass
class GenerationReport:
    files: dict[str, Path]
    counts: dict[str, dict[str, int]]
    scored: int
    manifest: Path | None


def _is_constrained(slots: dict) -> bool:
    return any(name in CONSTRAINT_SLOTS for name in slots)


def generate_dataset(world: WorldState, spec: SplitSpec, out_dir: str | Path, probe: str = "weak:0.25",
                     k: int = 8, combinatorics: CombinatoricsConfig = CombinatoricsConfig(), seed: int = 0,
                     overrides: str | Path | None = None, thresholds: Thresholds = Thresholds()
                     ) -> GenerationReport:
    """Label shuffled candidate streams until every requested cell is full, then write files + manifest.

    Benchmark cells are filled from a per-split stream (constrained or not);
    RL train/val queries come from the remaining candidates. Every emitted
    query has a feasibility witness unless overridden by the allow/deny file.
    """
    out_dir = Path(out_dir)
    if spec.empty:
        return GenerationReport({}, {}, 0, None)
    allow, deny = load_overrides(overrides)
    agent = make_probe(probe)
    candidates = list(_slot_combinations(world, combinatorics))
    random.Random(f"datagen:{seed}").shuffle(candidates)
    sandbox = Sandbox(world)
    verifier = Verifier()
    used: set[str] = set()
    scored = 0
    deficits: dict[tuple[str, str], int] = {}
    bench: dict[str, list[Query]] = {}
    for split, cells in spec.benchmark.items():
        need = {lvl: n for lvl, n in cells.items() if n > 0}
        chosen: list[Query] = []
        want_constrained = split == "constrained"
        for slots in candidates:
            if not need:
                break
            if _is_constrained(slots) != want_constrained:
                continue
            q = synthesize_query(intent_set(**slots))
            if q.id in used or not sanity_filter(world, q, allow, deny):
                continue
            label, _ = score_difficulty(q, agent, k, sandbox, verifier, thresholds=thresholds, seed=seed,
                                        early_stop=True)
            scored += 1
            if label in need:
                chosen.append(q.with_difficulty(label))
                used.add(q.id)
                need[label] -= 1
                if need[label] == 0:
                    del need[label]
        deficits.update({(split, lvl): n for lvl, n in need.items()})
        bench[split] = chosen
    rl_needed = spec.train + spec.val
    rl_pool: list[Query] = []
    for slots in reversed(candidates):
        if len(rl_pool) >= rl_needed:
            break
        q = synthesize_query(intent_set(**slots))
        if q.id not in used and sanity_filter(world, q, allow, deny):
            rl_pool.append(q)
            used.add(q.id)
    if len(rl_pool) < rl_needed:
        deficits[("rl", "any")] = rl_needed - len(rl_pool)
    if deficits:
        raise InsufficientPool(deficits)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits: dict[str, list[Query]] = {f"benchmark_{s}": qs for s, qs in bench.items()}
    if spec.train:
        splits["train"] = rl_pool[:spec.train]
    if spec.val:
        splits["val"] = rl_pool[spec.train:]
    check_disjoint(splits)
    files: dict[str, Path] = {}
    counts: dict[str, dict[str, int]] = {}
    for name, queries in splits.items():
        path = out_dir / f"{name}.jsonl"
        write_queries(queries, path)
        files[name] = path
        tally = {lvl: 0 for lvl in LEVELS + ("unrated",)}
        for q in queries:
            tally[q.difficulty] += 1
        counts[name] = {lvl: tally[lvl] for lvl in LEVELS} if name.startswith("benchmark_") else {"unrated": len(queries)}
    config_blob = json.dumps({"combinatorics": combinatorics.to_dict(), "probe": probe, "k": k, "seed": seed,
                              "thresholds": [str(thresholds.easy), str(thresholds.medium)]}, sort_keys=True)
    manifest = {
        "format": "deeptravel-data", "version": 1, "world_seed": world.seed, "world_digest": world.digest(),
        "config": json.loads(config_blob), "config_digest": hashlib.sha256(config_blob.encode()).hexdigest(),
        "counts": counts, "files": {name: {"path": p.name, "sha256": _sha256(p)} for name, p in files.items()},
        "scored_queries": scored,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return GenerationReport(files, counts, scored, manifest_path)


def verify_manifest(manifest_path: str | Path) -> list[str]:
    """Problems found re-checking a manifest's hashes, counts and disjointness; empty if sound."""
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    problems = []
    splits = {}
    for name, entry in manifest["files"].items():
        path = manifest_path.parent / entry["path"]
        if not path.exists():
            problems.append(f"{name}: missing file {path.name}")
            continue
        if _sha256(path) != entry["sha256"]:
            problems.append(f"{name}: sha256 mismatch")
        queries = read_queries(path)
        splits[name] = queries
        for lvl, n in manifest["counts"].get(name, {}).items():
            actual = sum(q.difficulty == lvl for q in queries)
            if actual != n:
                problems.append(f"{name}: {lvl} count {actual} != {n}")
    try:
        check_disjoint(splits)
    except ValueError as exc:
        problems.append(str(exc))
    return problems


# ---------------------------------------------------------------------------
# Cold-start distillation
# ---------------------------------------------------------------------------


def distill_cold_start(teacher: Agent, queries: Sequence[Query], sandbox: Sandbox, verifier: Verifier | None = None,
                       limits: EpisodeLimits | None = None, seed: int = 0) -> list[Trajectory]:
    """Teacher episodes that earn r=1 and pass the strict format check."""
    limits = limits or EpisodeLimits()
    runs = [(q, run_episode(teacher, Environment(sandbox), q, limits, random.Random(f"distill:{seed}:{i}")))
            for i, q in enumerate(queries)]
    kept = filter_teacher_traces(runs, verifier)
    logger.info("distilled %d of %d teacher traces", len(kept), len(queries))
    return kept


def filter_teacher_traces(runs: Iterable[tuple[Query, Trajectory]], verifier: Verifier | None = None
                          ) -> list[Trajectory]:
    """Trajectories that pass the strict format check and earn r=1."""
    verifier = verifier or Verifier()
    return [t for q, t in runs if validate_format(t).ok and verifier.joint_reward(q, t).r == 1]


def constraint_slots(query: Query) -> list[str]:
    return sorted(i.slot for i in query.intents if i.slot in CONSTRAINT_SLOTS)
