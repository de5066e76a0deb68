from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deeptravel.domain import (
    AtomicIntent, DayPlan, HotelStay, Itinerary, ItineraryFormatError, Leg, Query, QueryError, canonical_text,
    constraint_violations, fmt_clock, fmt_money, intent_set, itinerary_cost, parse_block, parse_clock, parse_money,
    parse_query_text, plan_violations, render_block, Visit,
)

CITIES = ["Beijing", "Shanghai", "Suzhou", "Wuhan", "Hangzhou", "Xi'an"]


def leg(rid="MU1", mode="flight", a="Shanghai", b="Beijing", date="2025-07-01", dep=600, arr=720, nd=False,
        price=50_000):
    return Leg(rid, mode, a, b, date, dep, arr, nd, price)


def stay(checkin="2025-07-01", checkout="2025-07-04", total=90_000, tags=("riverside",)):
    return HotelStay("H1", "Atour Beijing Central", "Beijing", checkin, checkout, total, tags)


@st.composite
def intent_sets(draw):
    origin, dest = draw(st.lists(st.sampled_from(CITIES), min_size=2, max_size=2, unique=True))
    day = draw(st.integers(1, 20))
    slots = dict(origin=origin, destination=dest, depart_date=f"2025-07-{day:02d}",
                 trip_length_days=draw(st.integers(1, 12)))
    slots["budget_total"] = draw(st.none() | st.integers(1, 10**8))
    slots["arrival_deadline"] = draw(st.none() | st.integers(0, 1439))
    slots["hotel_preference"] = draw(st.none() | st.sampled_from(["riverside", "quiet", "near-station"]))
    slots["transport_mode_preference"] = draw(st.none() | st.sampled_from(["flight", "train"]))
    slots["poi_requirement"] = draw(st.none() | st.sampled_from(["The Great Wall", "Humble Administrator's Garden"]))
    return intent_set(**slots)


def test_definition_example_text():
    q = Query.from_intents(intent_set(origin="Shanghai", destination="Beijing", depart_date="2025-07-01",
                                      trip_length_days=3, transport_mode_preference="flight"))
    assert q.text.startswith("Please help schedule a three day's airport trip from Shanghai to Beijing")
    assert q.constrained


def test_same_intents_same_text():
    a = intent_set(origin="Shanghai", destination="Beijing", depart_date="2025-07-01", trip_length_days=3)
    assert canonical_text(a) == canonical_text(set(a))


def test_budget_changes_text():
    base = dict(origin="Shanghai", destination="Beijing", depart_date="2025-07-01", trip_length_days=3)
    assert canonical_text(intent_set(**base, budget_total=100_000)) != canonical_text(intent_set(**base,
                                                                                                 budget_total=200_000))


@settings(max_examples=300, deadline=None)
@given(intent_sets())
def test_text_round_trip(intents):
    assert parse_query_text(canonical_text(intents)) == intents


@settings(max_examples=200, deadline=None)
@given(intent_sets())
def test_query_invariants(intents):
    q = Query.from_intents(intents)
    assert q.origin != q.destination
    assert q.constrained == any(i.slot in ("budget_total", "arrival_deadline", "hotel_preference",
                                           "transport_mode_preference", "poi_requirement") for i in intents)
    assert Query.from_dict(q.to_dict()) == q
    assert q.nights == q.slot("trip_length_days") - 1


@pytest.mark.parametrize("slots,message", [
    (dict(origin="Beijing", depart_date="2025-07-01", trip_length_days=2), "missing required"),
    (dict(origin="Beijing", destination="Beijing", depart_date="2025-07-01", trip_length_days=2), "must differ"),
    (dict(origin="A", destination="B", depart_date="2025-07-01", trip_length_days=0), ">= 1"),
    (dict(origin="A", destination="B", depart_date="2025-07-01", trip_length_days=2, budget_total=-5), "positive"),
    (dict(origin="A", destination="B", depart_date="2025-07-01", trip_length_days=2,
          transport_mode_preference="boat"), "mode"),
    (dict(origin="A", destination="B", depart_date="2025-07-01"), "trip_length_days or return_date"),
])
def test_invalid_intents_rejected(slots, message):
    with pytest.raises(QueryError, match=message):
        Query.from_intents(intent_set(**slots))


def test_slot_type_checked():
    with pytest.raises(QueryError):
        AtomicIntent("budget_total", "lots")
    with pytest.raises(QueryError):
        AtomicIntent("favourite_colour", "red")


def test_constrained_flag_must_agree():
    intents = intent_set(origin="A", destination="B", depart_date="2025-07-01", trip_length_days=2)
    with pytest.raises(QueryError):
        Query("q1", "text", intents, constrained=True)


# -- money and clocks -------------------------------------------------------------


@given(st.integers(0, 10**9))
def test_money_round_trip(cents):
    assert parse_money(fmt_money(cents)) == cents


@given(st.integers(0, 1439))
def test_clock_round_trip(minute):
    assert parse_clock(fmt_clock(minute)) == minute


# -- itinerary -------------------------------------------------------------------


def test_cost_of_empty_itinerary_is_zero():
    assert itinerary_cost(Itinerary()) == 0


def test_cost_hand_sum():
    itin = Itinerary.assemble([leg(price=50_000)], stay(total=3 * 30_000), [])
    assert itinerary_cost(itin) == 140_000 == itin.total_cost


def test_cost_mismatch_flagged():
    itin = Itinerary((leg(price=50_000),), None, (), (), 1)
    assert not itin.cost_consistent
    assert any("total_cost" in v for v in itin.invariant_violations())


def test_return_before_outbound_arrival_flagged():
    out = leg(dep=600, arr=720)
    ret = leg("MU2", a="Beijing", b="Shanghai", dep=700, arr=800)
    problems = Itinerary.assemble([out], None, [ret]).invariant_violations()
    assert any("return departs before" in p for p in problems)


def test_checkout_before_checkin_flagged():
    itin = Itinerary.assemble([leg()], stay("2025-07-04", "2025-07-01"), [])
    assert "hotel checkout is not after checkin" in itin.invariant_violations()


def test_unordered_visits_flagged():
    plan = (DayPlan("2025-07-02", (Visit(900, "A"), Visit(600, "B"))),)
    assert any("time-ordered" in p for p in Itinerary.assemble([], None, [], plan).invariant_violations())


def test_plan_violations():
    out = leg(arr=720)
    ret = leg("MU2", a="Beijing", b="Shanghai", date="2025-07-03", dep=1000, arr=1100)
    plan = (DayPlan("2025-07-01", (Visit(700, "Early"),)), DayPlan("2025-07-02", (Visit(1300, "Late"),)),
            DayPlan("2025-07-03", (Visit(990, "Rushed"),)), DayPlan("2025-07-05", (Visit(600, "After"),)))
    problems = plan_violations(Itinerary.assemble([out], None, [ret], plan), 60)
    assert any("Early" in p and "before arrival" in p for p in problems)
    assert any("Late" in p and "opening hours" in p for p in problems)
    assert any("Rushed" in p and "after the return" in p for p in problems)
    assert any("follows the return" in p for p in problems)


def _query(**extra):
    return Query.from_intents(intent_set(origin="Shanghai", destination="Beijing", depart_date="2025-07-01",
                                         trip_length_days=3, **extra))


def test_constraint_violations():
    itin = Itinerary.assemble([leg(arr=800, price=80_000)], stay(total=90_000, tags=("quiet",)),
                              [leg("G2", "train", "Beijing", "Shanghai", "2025-07-03", 900, 1200)],
                              (DayPlan("2025-07-02", (Visit(600, "Summer Palace"),)),))
    assert constraint_violations(_query(), itin) == []
    slots = {s for s, _ in constraint_violations(
        _query(budget_total=100_000, arrival_deadline=720, transport_mode_preference="flight",
               hotel_preference="riverside", poi_requirement="The Great Wall"), itin)}
    assert slots == {"budget_total", "arrival_deadline", "transport_mode_preference", "hotel_preference",
                     "poi_requirement"}


legs = st.builds(Leg, st.sampled_from(["MU1", "G12", "CA99"]), st.sampled_from(["flight", "train"]),
                 st.sampled_from(CITIES), st.sampled_from(CITIES), st.sampled_from(["2025-07-01", "2025-07-03"]),
                 st.integers(0, 1439), st.integers(0, 1439), st.booleans(), st.integers(1, 10**7))
stays = st.builds(HotelStay, st.just("H3"), st.sampled_from(["Atour Beijing", "Ji Hotel Riverside"]),
                  st.sampled_from(CITIES), st.just("2025-07-01"), st.just("2025-07-03"), st.integers(1, 10**7),
                  st.lists(st.sampled_from(["quiet", "riverside", "business"]), unique=True).map(tuple))
days = st.builds(DayPlan, st.sampled_from(["2025-07-01", "2025-07-02"]),
                 st.lists(st.builds(Visit, st.integers(0, 1439), st.sampled_from(["The Bund", "Yu Garden"])),
                          max_size=3).map(tuple))


@settings(max_examples=200, deadline=None)
@given(st.lists(legs, max_size=2), st.none() | stays, st.lists(legs, max_size=2), st.lists(days, max_size=3))
def test_block_round_trip(outbound, hotel, returns, plan):
    itin = Itinerary.assemble(outbound, hotel, returns, plan)
    assert parse_block("Here is the plan:\n" + render_block(itin) + "\nEnjoy!") == itin
    assert Itinerary.from_dict(itin.to_dict()) == itin


@pytest.mark.parametrize("text", [
    "just prose, no block",
    "```itinerary\noutbound: id=X\n```",
    "```itinerary\nspaceship: id=1\ntotal_cost: 0\n```",
    "```itinerary\nday: date=2025-07-01; visits=\n```",
])
def test_bad_block_rejected(text):
    with pytest.raises(ItineraryFormatError):
        parse_block(text)
