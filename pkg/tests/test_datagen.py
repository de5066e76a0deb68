from __future__ import annotations

import itertools
import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deeptravel.datagen import (
    CombinatoricsConfig, InsufficientPool, SplitSpec, Thresholds, build_benchmark, check_disjoint,
    distill_cold_start, enumerate_intents, feasibility_witness, filter_teacher_traces, generate_dataset,
    load_overrides, make_probe, parse_splits, read_queries, sanity_filter, score_difficulty, synthesize_query,
    verify_manifest, write_queries,
)
from deeptravel.domain import CONSTRAINT_SLOTS, Query, QueryError, intent_set, itinerary_cost, render_block
from deeptravel.policy import OracleAgent
from deeptravel.protocol import parse_trajectory, render_trajectory
from deeptravel.sandbox import Sandbox
from deeptravel.verifier import Verifier
from deeptravel.world import ConfigError, WorldConfig, generate_world

from helpers import mutations

BARE = dict(budgets=(), deadlines=(), hotel_tags=(), modes=(), pois_per_city=0)


@pytest.fixture(scope="module")
def pair_world():
    return generate_world(3, WorldConfig(n_cities=2))


# -- enumeration ------------------------------------------------------------------------


def test_two_cities_one_date(pair_world):
    cfg = CombinatoricsConfig(dates=(pair_world.dates[0],), trip_lengths=(2,), **BARE)
    combos = list(enumerate_intents(pair_world, cfg))
    assert len(combos) == 2
    assert {(Query.from_intents(c).origin, Query.from_intents(c).destination) for c in combos} == \
        set(itertools.permutations([c.name for c in pair_world.cities], 2))


def test_budget_slot_multiplies_by_four(pair_world):
    bare = CombinatoricsConfig(dates=(pair_world.dates[0],), trip_lengths=(2,), **BARE)
    priced = CombinatoricsConfig(**{**bare.to_dict(), "budgets": (100_000, 200_000, 300_000)})
    assert len(list(enumerate_intents(pair_world, priced))) == 4 * len(list(enumerate_intents(pair_world, bare)))


def test_trips_past_horizon_are_skipped(pair_world):
    cfg = CombinatoricsConfig(dates=(pair_world.dates[-1],), trip_lengths=(1, 2), **BARE)
    assert {Query.from_intents(c).slot("trip_length_days") for c in enumerate_intents(pair_world, cfg)} == {1}


def test_single_city_world_rejected():
    with pytest.raises(ConfigError):
        list(enumerate_intents(generate_world(1, WorldConfig(n_cities=1))))


def test_enumeration_is_deterministic(world):
    cfg = CombinatoricsConfig(trip_lengths=(2,))
    a = [synthesize_query(c).id for c in itertools.islice(enumerate_intents(world, cfg), 500)]
    b = [synthesize_query(c).id for c in itertools.islice(enumerate_intents(world, cfg), 500)]
    assert a == b and len(set(a)) == len(a)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6))
def test_every_enumerated_set_is_a_valid_query(world, index):
    combos = _combos(world)
    q = synthesize_query(combos[index % len(combos)])
    assert q.origin != q.destination
    assert world.config.start_date <= q.depart_date <= q.return_date <= world.end_date
    assert len([i for i in q.intents if i.slot in CONSTRAINT_SLOTS]) <= 2


_COMBO_CACHE: dict = {}


def _combos(world):
    if "all" not in _COMBO_CACHE:
        _COMBO_CACHE["all"] = list(enumerate_intents(world))
    return _COMBO_CACHE["all"]


def test_synthesized_text():
    q = synthesize_query(intent_set(origin="Shanghai", destination="Beijing", depart_date="2025-07-01",
                                    trip_length_days=3, budget_total=150_000))
    assert q.constrained and "Shanghai" in q.text and "Beijing" in q.text and "1500" in q.text
    plain = synthesize_query(intent_set(origin="Shanghai", destination="Beijing", depart_date="2025-07-01",
                                        trip_length_days=3, transport_mode_preference=None))
    assert not plain.constrained and "three day" in plain.text


def test_synthesize_rejects_invalid():
    with pytest.raises(QueryError):
        synthesize_query(intent_set(origin="Shanghai", destination="Shanghai", depart_date="2025-07-01",
                                    trip_length_days=3))


# -- feasibility witness ---------------------------------------------------------------


def test_witness_passes_rubrics(world, feasible_queries):
    for q in feasible_queries:
        itin = feasibility_witness(world, q)
        t = parse_trajectory("<think>x</think><answer>" + render_block(itin) + "</answer>", q.id)
        assert Verifier().verify_trajectory(q, t).passed


def test_impossible_budget_has_no_witness(world):
    q = synthesize_query(intent_set(origin="Shanghai", destination="Beijing", depart_date="2025-07-01",
                                    trip_length_days=3, budget_total=1))
    assert feasibility_witness(world, q) is None


def test_witness_budget_matches_exhaustive_minimum(world):
    base = dict(origin="Shanghai", destination="Beijing", depart_date="2025-07-01", trip_length_days=3)
    cheapest = itinerary_cost(feasibility_witness(world, synthesize_query(intent_set(**base))))
    at = synthesize_query(intent_set(**base, budget_total=cheapest))
    below = synthesize_query(intent_set(**base, budget_total=cheapest - 1))
    assert feasibility_witness(world, at) is not None
    assert feasibility_witness(world, below) is None


def test_overrides(tmp_path, world):
    impossible = synthesize_query(intent_set(origin="Shanghai", destination="Beijing", depart_date="2025-07-01",
                                             trip_length_days=3, budget_total=1))
    easy = synthesize_query(intent_set(origin="Shanghai", destination="Beijing", depart_date="2025-07-01",
                                       trip_length_days=3))
    path = tmp_path / "overrides.txt"
    path.write_text(f"# manual review\nallow {impossible.id}\ndeny {easy.id}  # duplicate of a seed query\n")
    allow, deny = load_overrides(path)
    assert sanity_filter(world, impossible, allow, deny)
    assert not sanity_filter(world, easy, allow, deny)
    assert sanity_filter(world, easy) and not sanity_filter(world, impossible)
    path.write_text("maybe q123\n")
    with pytest.raises(ConfigError):
        load_overrides(path)


# -- difficulty ---------------------------------------------------------------------------


@pytest.mark.parametrize("passes,k,label", [
    (8, 8, "easy"), (2, 3, "easy"), (6, 9, "easy"), (5, 8, "medium"), (1, 3, "medium"), (3, 9, "medium"),
    (2, 8, "hard"), (0, 8, "hard"),
])
def test_threshold_boundaries(passes, k, label):
    assert Thresholds().classify(passes, k) == label


def test_oracle_probe_labels_easy(world, feasible_queries):
    label, passes = score_difficulty(feasible_queries[0], OracleAgent(), 4, Sandbox(world))
    assert (label, passes) == ("easy", 4)


def test_impossible_budget_is_hard(world):
    q = synthesize_query(intent_set(origin="Shanghai", destination="Beijing", depart_date="2025-07-01",
                                    trip_length_days=3, budget_total=1))
    assert score_difficulty(q, OracleAgent(), 8, Sandbox(world)) == ("hard", 0)


def test_k_must_be_positive(world, feasible_queries):
    with pytest.raises(ConfigError):
        score_difficulty(feasible_queries[0], OracleAgent(), 0, Sandbox(world))


def test_early_stop_keeps_label(world, query_pool):
    sb = Sandbox(world)
    probe = make_probe("noisy:0.3")
    for q in query_pool[:25]:
        assert score_difficulty(q, probe, 8, sb, early_stop=True)[0] == score_difficulty(q, probe, 8, sb)[0]


def test_stronger_probe_never_adds_hard_labels(world, query_pool):
    sb = Sandbox(world)
    pool = query_pool[:40]
    hard = {name: sum(score_difficulty(q, make_probe(name), 4, sb)[0] == "hard" for q in pool)
            for name in ("oracle", "untrained")}
    assert hard["oracle"] <= hard["untrained"]


@pytest.mark.parametrize("spec", ["noisy", "weak:x", "noisy:1.5", "nonsense"])
def test_bad_probe_specs(spec):
    with pytest.raises(ConfigError):
        make_probe(spec)


def test_params_file_probe(tmp_path):
    from deeptravel.policy import PolicyParams, SoftmaxAgent
    PolicyParams().save(tmp_path / "p.json")
    assert isinstance(make_probe(str(tmp_path / "p.json")), SoftmaxAgent)


# -- splits -------------------------------------------------------------------------------


def test_parse_splits():
    spec = parse_splits("constrained=156/45/299,unconstrained=222/78/200,train=450,val=50")
    assert spec.benchmark == {"constrained": {"easy": 156, "medium": 45, "hard": 299},
                              "unconstrained": {"easy": 222, "medium": 78, "hard": 200}}
    assert (spec.train, spec.val) == (450, 50)
    assert parse_splits("").empty and parse_splits("train=3") == SplitSpec({}, 3, 0)


@pytest.mark.parametrize("text", [
    "constrained=1/2", "train", "train=x", "test=5", "train=1,train=2", "unconstrained=1/2/3/4",
])
def test_parse_splits_rejects(text):
    with pytest.raises(ValueError):
        parse_splits(text)


def _labelled(world, query_pool):
    sb = Sandbox(world)
    probe = make_probe("noisy:0.5")
    return [q.with_difficulty(score_difficulty(q, probe, 3, sb, early_stop=True)[0]) for q in query_pool[:150]]


def test_build_benchmark_counts_and_exclusion(world, query_pool):
    labelled = _labelled(world, query_pool)
    have = {(s, lvl): sum((q.constrained == (s == "constrained")) and q.difficulty == lvl for q in labelled)
            for s in ("constrained", "unconstrained") for lvl in ("easy", "medium", "hard")}
    counts = {s: {lvl: min(2, have[(s, lvl)]) for lvl in ("easy", "medium", "hard")}
              for s in ("constrained", "unconstrained")}
    excluded = labelled[0].id
    out = build_benchmark(labelled, counts, exclude=[excluded])
    for split, cells in counts.items():
        for lvl, n in cells.items():
            assert sum(q.difficulty == lvl for q in out[split]) == n
        assert all(q.constrained == (split == "constrained") for q in out[split])
    assert excluded not in {q.id for qs in out.values() for q in qs}
    with pytest.raises(InsufficientPool) as info:
        build_benchmark(labelled, {"constrained": {"hard": 10**6}})
    assert ("constrained", "hard") in info.value.deficits


def test_overlapping_splits_rejected(query_pool):
    with pytest.raises(ValueError, match="appears in both"):
        check_disjoint({"a": query_pool[:3], "b": query_pool[2:5]})


def test_query_file_round_trip(tmp_path, query_pool):
    assert write_queries(query_pool[:10], tmp_path / "q.jsonl") == 10
    assert read_queries(tmp_path / "q.jsonl") == query_pool[:10]
    (tmp_path / "bad.jsonl").write_text('{"id": "x"}\n')
    with pytest.raises(ValueError, match="bad.jsonl:1"):
        read_queries(tmp_path / "bad.jsonl")


@pytest.fixture(scope="module")
def small_dataset(world, tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    spec = parse_splits("constrained=4/2/5,unconstrained=4/1/3,train=6,val=3")
    return spec, generate_dataset(world, spec, out, k=4)


def test_generate_dataset_counts(small_dataset):
    spec, report = small_dataset
    assert report.counts["benchmark_constrained"] == {"easy": 4, "medium": 2, "hard": 5}
    assert report.counts["benchmark_unconstrained"] == {"easy": 4, "medium": 1, "hard": 3}
    assert report.counts["train"] == {"unrated": 6} and report.counts["val"] == {"unrated": 3}
    files = {name: read_queries(path) for name, path in report.files.items()}
    assert all(q.constrained for q in files["benchmark_constrained"])
    assert not any(q.constrained for q in files["benchmark_unconstrained"])
    ids = [q.id for qs in files.values() for q in qs]
    assert len(ids) == len(set(ids))


def test_generated_queries_are_feasible(world, small_dataset):
    _, report = small_dataset
    for path in report.files.values():
        assert all(feasibility_witness(world, q) is not None for q in read_queries(path))


def test_manifest_verifies_and_detects_tampering(small_dataset, tmp_path):
    import shutil
    _, report = small_dataset
    assert verify_manifest(report.manifest) == []
    manifest = json.loads(report.manifest.read_text())
    assert manifest["world_seed"] == 7 and len(manifest["config_digest"]) == 64
    copy = tmp_path / "copy"
    shutil.copytree(report.manifest.parent, copy)
    lines = (copy / "train.jsonl").read_text().splitlines()
    (copy / "train.jsonl").write_text("\n".join(lines[:-1]) + "\n")
    assert any("sha256" in p for p in verify_manifest(copy / "manifest.json"))


def test_generation_is_deterministic(world, small_dataset, tmp_path):
    spec, report = small_dataset
    again = generate_dataset(world, spec, tmp_path, k=4)
    for name, path in report.files.items():
        assert again.files[name].read_bytes() == path.read_bytes()


def test_empty_spec_writes_nothing(world, tmp_path):
    report = generate_dataset(world, SplitSpec(), tmp_path / "none")
    assert report.files == {} and not (tmp_path / "none").exists()


def test_insufficient_pool_lists_cells(pair_world, tmp_path):
    cfg = CombinatoricsConfig(dates=tuple(pair_world.dates[:2]), trip_lengths=(2,), **BARE)
    with pytest.raises(InsufficientPool) as info:
        generate_dataset(pair_world, parse_splits("unconstrained=50/0/0,train=2"), tmp_path, k=2,
                         combinatorics=cfg)
    assert ("unconstrained", "easy") in info.value.deficits


# -- distillation -------------------------------------------------------------------------


def test_distillation_yield_and_reverification(world, feasible_queries):
    sb = Sandbox(world)
    traces = distill_cold_start(OracleAgent(), feasible_queries[:30], sb)
    assert len(traces) == 30
    by_id = {q.id: q for q in feasible_queries[:30]}
    assert all(Verifier().joint_reward(by_id[t.query_id], t).r == 1 for t in traces)


def test_filters_drop_broken_and_failed(world, oracle_runs):
    q, t = oracle_runs[0]
    broken = parse_trajectory(mutations(t, random.Random(0))["tag_swap"], q.id)
    impossible = synthesize_query(intent_set(origin=q.origin, destination=q.destination, depart_date=q.depart_date,
                                             trip_length_days=q.slot("trip_length_days"), budget_total=1))
    assert render_trajectory(t)
    kept = filter_teacher_traces([(q, t), (q, broken), (impossible, t)])
    assert kept == [t]
