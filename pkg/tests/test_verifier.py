from __future__ import annotations

import itertools
import json
import random
import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deeptravel.domain import AtomicIntent, HotelStay, Itinerary, Leg, Query, intent_set, render_block
from deeptravel.policy import OracleAgent
from deeptravel.protocol import EpisodeLimits, Environment, SegmentKind, Trajectory, build_segments, run_episode
from deeptravel.verifier import (
    RUBRICS, Conclusion, RubricResult, Verifier, call_logic_problems, check_rubrics, conclude, save_rewards,
)

from helpers import block_ids, mixed_trajectories, with_answer

K = SegmentKind


def answer_only(query: Query, itinerary: Itinerary, tips: bool = True) -> Trajectory:
    text = "Plan:\n" + render_block(itinerary) + ("\nFriendly Tips: keep a backup." if tips else "")
    return Trajectory(query.id, build_segments([(K.THINK, "plan"), (K.ANSWER, text)]), "answered")


def _q(**extra) -> Query:
    base = dict(origin="Shanghai", destination="Beijing", depart_date="2025-07-01", trip_length_days=3)
    base.update(extra)
    return Query.from_intents(intent_set(**base))


@pytest.fixture(scope="module")
def oracle_trace(world):
    from deeptravel.sandbox import Sandbox
    q = _q()
    t = run_episode(OracleAgent(), Environment(Sandbox(world)), q, EpisodeLimits(), random.Random(0))
    return q, t


# -- trajectory level --------------------------------------------------------------------


def test_oracle_unconstrained_passes(oracle_trace):
    q, t = oracle_trace
    verdict = Verifier().verify_trajectory(q, t)
    assert verdict.conclusion in (Conclusion.VERY_SATISFIED, Conclusion.SATISFIED_NO_CONTINGENCY)
    rec = Verifier().joint_reward(q, t)
    assert rec.r == 1 and len(rec.turn_verdicts) == t.tool_calls


def test_return_before_arrival_is_illogical():
    q = _q(trip_length_days=1)
    out = Leg("MU1", "flight", "Shanghai", "Beijing", "2025-07-01", 600, 720, False, 50_000)
    ret = Leg("MU2", "flight", "Beijing", "Shanghai", "2025-07-01", 700, 820, False, 50_000)
    verdict = Verifier().verify_trajectory(q, answer_only(q, Itinerary.assemble([out], None, [ret])))
    assert verdict.conclusion is Conclusion.LOGIC_UNREASONABLE
    assert verdict.rubric("complete").passed and verdict.rubric("main_requirement").passed


def test_budget_overrun_is_basic_constraint_miss():
    q = _q(trip_length_days=4, budget_total=100_000)
    out = Leg("MU1", "flight", "Shanghai", "Beijing", "2025-07-01", 600, 720, False, 30_000)
    ret = Leg("MU2", "flight", "Beijing", "Shanghai", "2025-07-04", 900, 1020, False, 20_000)
    stay = HotelStay("H1", "Atour", "Beijing", "2025-07-01", "2025-07-04", 90_000, ())
    itin = Itinerary.assemble([out], stay, [ret])
    assert itin.total_cost == 140_000
    rec = Verifier().joint_reward(q, answer_only(q, itin))
    assert rec.trajectory_verdict.conclusion is Conclusion.BASIC_CONSTRAINT_MISS
    assert rec.r == 0 and rec.turn_verdicts == ()
    assert not rec.trajectory_verdict.rubric("other_constraints").passed


def test_missing_hotel_is_incomplete():
    q = _q()
    out = Leg("MU1", "flight", "Shanghai", "Beijing", "2025-07-01", 600, 720, False, 30_000)
    ret = Leg("MU2", "flight", "Beijing", "Shanghai", "2025-07-03", 900, 1020, False, 20_000)
    verdict = Verifier().verify_trajectory(q, answer_only(q, Itinerary.assemble([out], None, [ret])))
    assert verdict.conclusion is Conclusion.INCOMPLETE_ANSWER


def test_wrong_date_is_misread():
    q = _q(trip_length_days=1)
    out = Leg("MU1", "flight", "Shanghai", "Beijing", "2025-07-02", 600, 720, False, 30_000)
    ret = Leg("MU2", "flight", "Beijing", "Shanghai", "2025-07-01", 900, 1020, False, 20_000)
    verdict = Verifier().verify_trajectory(q, answer_only(q, Itinerary.assemble([out], None, [ret])))
    assert verdict.conclusion is Conclusion.MAIN_REQUIREMENT_MISREAD


def test_unanswered_is_incomplete_and_short_circuits(oracle_trace):
    q, t = oracle_trace
    cut = Trajectory(t.query_id, t.segments[:-1], "turn_limit")
    v = Verifier()
    rec = v.joint_reward(q, cut)
    assert rec.trajectory_verdict.conclusion is Conclusion.INCOMPLETE_ANSWER
    assert rec.r == 0 and rec.turn_verdicts == () and v.turn_calls == 0


def test_contingency_is_soft(oracle_trace):
    q, t = oracle_trace
    plain = with_answer(t, t.answer.split("Friendly Tips")[0])
    rec = Verifier().joint_reward(q, plain)
    assert rec.trajectory_verdict.conclusion is Conclusion.SATISFIED_NO_CONTINGENCY
    assert rec.r == 1


def _conclusion_oracle(flags: dict[str, bool]) -> Conclusion:
    if not flags["complete"]:
        return Conclusion.INCOMPLETE_ANSWER
    if not flags["main_requirement"]:
        return Conclusion.MAIN_REQUIREMENT_MISREAD
    if not flags["logic"]:
        return Conclusion.LOGIC_UNREASONABLE
    if not (flags["other_constraints"] and flags["specific_requirements"]):
        return Conclusion.BASIC_CONSTRAINT_MISS
    return Conclusion.VERY_SATISFIED if flags["contingency"] else Conclusion.SATISFIED_NO_CONTINGENCY


def test_conclusion_matches_rubrics_for_every_combination():
    for bits in itertools.product((False, True), repeat=len(RUBRICS)):
        flags = dict(zip(RUBRICS, bits))
        got = conclude(RubricResult(n, b) for n, b in flags.items())
        assert got is _conclusion_oracle(flags)
        assert got.passed == all(bits[:5])


# -- turn level ----------------------------------------------------------------------------


def test_cited_ids_match_responses(oracle_trace):
    q, t = oracle_trace
    rec = Verifier().joint_reward(q, t)
    assert all(v.consistency_ok and v.call_logic_ok for v in rec.turn_verdicts)


def test_fabricated_id_fails_at_attributing_turn(oracle_trace):
    q, t = oracle_trace
    real = block_ids(t.answer)[0]
    mode = "flight" if re.search(rf"id={real}; mode=flight", t.answer) else "train"
    fake = t.answer.replace(real, "ZZ9999")
    rec = Verifier().joint_reward(q, with_answer(t, fake))
    assert rec.trajectory_verdict.passed and rec.r == 0
    tool = f"{mode}_search("
    expected = max(i for i, body, _ in t.turns() if body.startswith(tool))
    failed = [v for v in rec.turn_verdicts if not v.consistency_ok]
    assert [v.turn_index for v in failed] == [expected]
    assert "ZZ9999" in failed[0].diagnostics


def test_price_mismatch_fails_consistency(oracle_trace):
    q, t = oracle_trace
    m = re.search(r"^outbound: .*price=(\d+)$", t.answer, re.M)
    price = int(m.group(1))
    total = int(re.search(r"^total_cost: (\d+)$", t.answer, re.M).group(1))
    edited = t.answer.replace(m.group(0), m.group(0)[: -len(m.group(1))] + str(price - 100))
    edited = edited.replace(f"total_cost: {total}", f"total_cost: {total - 100}")
    rec = Verifier().joint_reward(q, with_answer(t, edited))
    assert rec.trajectory_verdict.passed and rec.r == 0
    assert sum(not v.consistency_ok for v in rec.turn_verdicts) == 1


def test_no_tool_calls_fails_consistency():
    q = _q(trip_length_days=1)
    out = Leg("MU1", "flight", "Shanghai", "Beijing", "2025-07-01", 600, 720, False, 30_000)
    ret = Leg("MU2", "flight", "Beijing", "Shanghai", "2025-07-01", 900, 1020, False, 20_000)
    rec = Verifier().joint_reward(q, answer_only(q, Itinerary.assemble([out], None, [ret])))
    assert rec.trajectory_verdict.passed and rec.r == 0
    assert [v.turn_index for v in rec.turn_verdicts] == [-1]


def test_inverted_hotel_dates_fail_call_logic():
    q = _q()
    ok = json.dumps({"tool": "hotel_search", "status": "ok", "results": []})
    problems = call_logic_problems(q, 'hotel_search("Beijing", "2025-07-03", "2025-07-01")', ok)
    assert "checkout is not after checkin" in problems
    assert call_logic_problems(q, 'hotel_search("Beijing", "2025-07-01", "2025-07-03")', ok) == []


@pytest.mark.parametrize("body,fragment", [
    ('flight_search("Shanghai", "Wuhan", "2025-07-01")', "not a trip leg"),
    ('flight_search("Shanghai", "Beijing", "2025-07-09")', "not a travel day"),
    ('hotel_search("Wuhan", "2025-07-01", "2025-07-03")', "not the destination"),
    ('hotel_search("Beijing", "2025-06-28", "2025-07-03")', "outside the trip"),
    ('poi_search("The Bund", "Wuhan")', "not a trip city"),
    ('fly_search("Shanghai")', "unknown_tool"),
])
def test_call_logic_problems(body, fragment):
    ok = json.dumps({"status": "ok", "results": []})
    assert any(fragment in p for p in call_logic_problems(_q(), body, ok))


def test_transient_error_is_not_a_logic_error():
    transient = json.dumps({"status": "error", "code": "transient", "error": "try again"})
    assert call_logic_problems(_q(), 'web_search("Beijing")', transient) == []
    failed = json.dumps({"status": "error", "code": "bad_args", "error": "nope"})
    assert call_logic_problems(_q(), 'web_search("Beijing")', failed)


# -- joint reward ------------------------------------------------------------------------


def test_short_circuit_and_conjunction(world, oracle_runs):
    v = Verifier()
    passes = turns = 0
    for q, t in mixed_trajectories(world, oracle_runs, 200):
        rec = v.joint_reward(q, t)
        assert rec.r in (0, 1) and not rec.verifier_failed
        verdict = rec.trajectory_verdict
        if not verdict.passed:
            assert rec.turn_verdicts == () and rec.r == 0
            continue
        passes += 1
        turns += len(t.turns())
        assert rec.r == int(all(tv.passed for tv in rec.turn_verdicts))
    assert passes > 0
    assert v.turn_stage_calls == v.trajectory_passes == passes
    assert v.turn_calls == turns


def test_reward_matches_independent_reevaluation(world, oracle_runs):
    v = Verifier()
    for q, t in mixed_trajectories(world, oracle_runs, 80, seed=3):
        rec = v.joint_reward(q, t)
        rubrics, extraction = check_rubrics(q, t)
        expected = conclude(rubrics).passed
        if expected:
            per_turn = [v.verify_turn(q, t, i, extraction.itinerary) for i, _, _ in t.turns()]
            # an answer with no tool calls cites facts no response can back
            expected = bool(t.turns()) and all(tv.passed for tv in per_turn)
        assert rec.r == int(expected)


_EXTRA = st.sampled_from([
    ("budget_total", 1), ("budget_total", 100_000), ("budget_total", 10**8),
    ("arrival_deadline", 0), ("arrival_deadline", 720), ("arrival_deadline", 1439),
    ("hotel_preference", "riverside"), ("hotel_preference", "quiet"),
    ("transport_mode_preference", "flight"), ("transport_mode_preference", "train"),
    ("poi_requirement", "The Great Wall"), ("poi_requirement", "The Bund"),
])


@settings(max_examples=120, deadline=None)
@given(index=st.integers(0, 59), extra=_EXTRA)
def test_adding_a_constraint_never_raises_reward(oracle_runs, index, extra):
    q, t = oracle_runs[index % len(oracle_runs)]
    slot, value = extra
    if q.slot(slot) is not None:
        return
    tighter = Query.from_intents(q.intents | {AtomicIntent(slot, value)})
    assert Verifier().joint_reward(tighter, t).r <= Verifier().joint_reward(q, t).r


def test_oracle_soundness(oracle_runs):
    v = Verifier()
    for q, t in oracle_runs:
        assert v.joint_reward(q, t).r == 1, q.text


# -- switches and failure handling ------------------------------------------------------------


def test_skip_trajectory_runs_turn_stage(oracle_trace):
    q, t = oracle_trace
    broken = with_answer(t, "no plan at all")
    v = Verifier(skip_trajectory=True)
    rec = v.joint_reward(q, broken)
    assert rec.trajectory_verdict.passed and v.turn_stage_calls == 1


def test_skip_turn_ignores_fabrication(oracle_trace):
    q, t = oracle_trace
    fake = with_answer(t, t.answer.replace(block_ids(t.answer)[0], "ZZ9999"))
    v = Verifier(skip_turn=True)
    assert v.joint_reward(q, fake).r == 1 and v.turn_calls == 0


def test_injected_failures(oracle_trace):
    q, t = oracle_trace
    always = Verifier(failure_rate=1.0)
    rec = always.joint_reward(q, t)
    assert rec.verifier_failed and rec.r == 0 and rec.trajectory_verdict is None
    sometimes = Verifier(failure_rate=0.3, seed=5)
    failed = [sometimes.joint_reward(q, t).verifier_failed for _ in range(2000)]
    assert abs(sum(failed) / len(failed) - 0.3) < 0.04
    again = Verifier(failure_rate=0.3, seed=5)
    assert [again.joint_reward(q, t).verifier_failed for _ in range(2000)] == failed


def test_latency_recorded(oracle_trace):
    q, t = oracle_trace
    assert Verifier().joint_reward(q, t).verifier_latency >= 0


def test_save_rewards(tmp_path, oracle_trace):
    q, t = oracle_trace
    recs = [Verifier().joint_reward(q, t), Verifier(failure_rate=1.0).joint_reward(q, t)]
    save_rewards(recs, tmp_path / "r.jsonl")
    rows = [json.loads(line) for line in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert [r["r"] for r in rows] == [1, 0] and rows[1]["verifier_failed"]
    assert rows[0]["trajectory_verdict"]["conclusion"] in ("VerySatisfied", "SatisfiedNoContingency")
