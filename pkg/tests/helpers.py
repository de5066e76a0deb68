"""Generators of well-formed trajectories and their strict-format mutations."""
from __future__ import annotations

import random
import re

from deeptravel.protocol import SegmentKind, Trajectory, build_segments

K = SegmentKind
_TAG_RE = re.compile(r"</?[A-Za-z_][A-Za-z0-9_]*>")
_ALPHABET = "abcdefghij klmnopqrstuvwxyz0123456789{}[]\":,.()'<>=/_-\n"
_CALLS = (
    'flight_search("Beijing", "Shanghai", "2025-07-02")',
    "train_search(depart_station=\"Suzhou\", arrive_station=\"Wuhan\", depart_date=\"2025-06-26\", is_transfer=0)",
    'hotel_search("Beijing", "2025-07-02", "2025-07-05")',
    'poi_search("The Great Wall", "Beijing")',
    'route_planning("National Palace Museum", "The Great Wall", "Beijing")',
    'web_search("Introduction to Beijing")',
)


def random_body(rng: random.Random, max_len: int = 30) -> str:
    """Random text that never contains a tag delimiter."""
    while True:
        body = "".join(rng.choice(_ALPHABET) for _ in range(rng.randrange(max_len + 1)))
        if not _TAG_RE.search(body):
            return body


def random_trajectory(rng: random.Random, max_turns: int = 8, answered: bool | None = None) -> Trajectory:
    pairs: list[tuple[SegmentKind, str]] = []
    if rng.random() < 0.8:
        pairs.append((K.THINK, random_body(rng)))
    for _ in range(rng.randrange(max_turns + 1)):
        if rng.random() < 0.7:
            pairs.append((rng.choice((K.THINK, K.TOOL_CALL_THINKING)), random_body(rng)))
        pairs.append((K.TOOL_CALL, rng.choice(_CALLS)))
        pairs.append((K.TOOL_RESPONSE, random_body(rng, 60)))
        if rng.random() < 0.7:
            pairs.append((K.TOOL_RESPONSE_THINKING, random_body(rng)))
    finish = rng.random() < 0.85 if answered is None else answered
    if finish:
        if rng.random() < 0.5:
            pairs.append((K.THINK, random_body(rng)))
        pairs.append((K.ANSWER, random_body(rng, 80)))
    return Trajectory("q", build_segments(pairs), "answered" if finish else "turn_limit")


def render_pairs(pairs) -> str:
    return "".join(f"<{k.value}>{b}</{k.value}>" for k, b in pairs)


def mutations(trajectory: Trajectory, rng: random.Random) -> dict[str, str]:
    """Rendered strict-format violations derived from an answered trajectory with a tool call."""
    pairs = [(s.kind, s.body) for s in trajectory.segments]
    call_at = [i for i, (k, _) in enumerate(pairs) if k is K.TOOL_CALL]
    i = rng.choice(call_at)
    swapped = list(pairs)
    swapped[i], swapped[i + 1] = (K.TOOL_RESPONSE, pairs[i][1]), (K.TOOL_CALL, pairs[i + 1][1])
    orphan = pairs[:i] + pairs[i + 1:]
    double = pairs + [(K.ANSWER, "second answer")]
    return {
        "tag_swap": render_pairs(swapped),
        "orphan_response": render_pairs(orphan),
        "double_answer": render_pairs(double),
    }


# -- toy policy for surrogate checks ---------------------------------------------------

TOY_KEYS = [("act", (0,)), ("act", (1,)), ("sel", (0,))]
_PARTIAL = (True, True, False, True, True, True, True)


def toy_trajectory(choices: tuple[int, int, int]) -> Trajectory:
    """Three visited buckets plus one bucket reached only through a masked record."""
    from deeptravel.protocol import DecisionRecord
    recs = (
        DecisionRecord("act", (0,), (True,) * 7, choices[0]),
        DecisionRecord("act", (1,), _PARTIAL, choices[1]),
        DecisionRecord("sel", (0,), (True,) * 4, choices[2]),
        DecisionRecord("obs", (2,), (True,) * 3, 0, masked=True),
    )
    return Trajectory("toy", (), "answered", recs)


TOY = [toy_trajectory((0, 1, 2)), toy_trajectory((3, 6, 0)), toy_trajectory((5, 0, 3)),
       toy_trajectory((2, 4, 1))]
TOY_ADV = [1.5, -0.5, -0.5, -0.5]


def surrogate_fd_error(theta, old, ref, groups, eps, beta, h=1e-5):
    """(result, relative error of the analytic gradient against central differences)."""
    import numpy as np
    from deeptravel.policy import HEAD_SIZES
    from deeptravel.trainer import surrogate_loss
    res = surrogate_loss(theta, old, ref, groups, eps, beta)
    vec = theta.to_vector(TOY_KEYS)
    analytic = np.concatenate([res.grad.get(k, np.zeros(HEAD_SIZES[k[0]])) for k in TOY_KEYS])
    numeric = np.zeros_like(vec)
    for i in range(len(vec)):
        up, down = vec.copy(), vec.copy()
        up[i] += h
        down[i] -= h
        numeric[i] = (surrogate_loss(theta.with_vector(TOY_KEYS, up), old, ref, groups, eps, beta).loss
                      - surrogate_loss(theta.with_vector(TOY_KEYS, down), old, ref, groups, eps, beta).loss) / (2 * h)
    return res, float(np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric))


# -- mixed trajectories for reward checks -------------------------------------------------


def with_answer(t: Trajectory, answer: str) -> Trajectory:
    from deeptravel.protocol import Segment
    last = t.segments[-1]
    assert last.kind is K.ANSWER
    return Trajectory(t.query_id, t.segments[:-1] + (Segment(K.ANSWER, answer, last.turn_index),), t.terminal,
                      t.decisions, t.error)


def block_ids(answer: str) -> list[str]:
    return re.findall(r"^(?:outbound|return): id=([^;]+);", answer, re.M)


def mixed_trajectories(world, oracle_runs, n: int, seed: int = 0):
    """(query, trajectory) pairs: oracle, oracle with a fabricated id, untrained policy, synthetic."""
    from deeptravel.policy import PolicyParams, SoftmaxAgent
    from deeptravel.protocol import EpisodeLimits, Environment, run_episode
    from deeptravel.sandbox import Sandbox
    rng = random.Random(seed)
    sb = Sandbox(world)
    agent = SoftmaxAgent(PolicyParams())
    out = []
    for i in range(n):
        q, t = oracle_runs[i % len(oracle_runs)]
        kind = i % 4
        if kind == 1:
            ids = block_ids(t.answer)
            t = with_answer(t, t.answer.replace(rng.choice(ids), "XX0000")) if ids else t
        elif kind == 2:
            t = run_episode(agent, Environment(sb), q, EpisodeLimits(), random.Random(f"mixed:{seed}:{i}"))
        elif kind == 3:
            t = random_trajectory(rng)
        out.append((q, t))
    return out


# -- acceptance reporting ---------------------------------------------------------------

ACCEPTANCE_RESULTS: dict[int, str] = {}


def report(number: int, title: str, ok: bool, detail: str) -> None:
    """Record and print one acceptance line, then fail the test if the criterion failed."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {title} ({detail})"
    ACCEPTANCE_RESULTS[number] = line
    print(line)
    assert ok, line
