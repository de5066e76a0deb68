from __future__ import annotations

import random

import pytest

from deeptravel.datagen import CombinatoricsConfig, enumerate_intents, feasibility_witness, synthesize_query
from deeptravel.policy import OracleAgent
from deeptravel.protocol import EpisodeLimits, Environment, run_episode
from deeptravel.sandbox import Sandbox
from deeptravel.world import WorldConfig, generate_world


@pytest.fixture(scope="session")
def world():
    return generate_world(7, WorldConfig(n_cities=6))


@pytest.fixture
def sandbox(world):
    return Sandbox(world)


@pytest.fixture(scope="session")
def query_pool(world):
    """Shuffled sample of enumerated queries, fixed by seed."""
    combos = list(enumerate_intents(world, CombinatoricsConfig(trip_lengths=(2, 3))))
    random.Random(11).shuffle(combos)
    return [synthesize_query(c) for c in combos[:400]]


@pytest.fixture(scope="session")
def feasible_queries(world, query_pool):
    return [q for q in query_pool if feasibility_witness(world, q) is not None][:120]


@pytest.fixture(scope="session")
def oracle_runs(world, feasible_queries):
    """(query, trajectory) pairs from the greedy oracle on feasible queries."""
    sb = Sandbox(world)
    agent = OracleAgent()
    out = []
    for i, q in enumerate(feasible_queries[:60]):
        t = run_episode(agent, Environment(sb), q, EpisodeLimits(), random.Random(i))
        out.append((q, t))
    return out


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_RESULTS
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
