"""Agentic RL for travel planning on a deterministic tool sandbox."""
from __future__ import annotations

from .domain import AtomicIntent, Itinerary, Query, intent_set
from .policy import OracleAgent, PolicyParams, SoftmaxAgent, behavior_clone
from .protocol import EpisodeLimits, Environment, Trajectory, parse_trajectory, render_trajectory, run_episode
from .sandbox import Sandbox
from .trainer import TrainerConfig, evaluate, train
from .verifier import Verifier
from .world import WorldConfig, generate_world

__all__ = [
    "AtomicIntent", "EpisodeLimits", "Environment", "Itinerary", "OracleAgent", "PolicyParams", "Query", "Sandbox",
    "SoftmaxAgent", "TrainerConfig", "Trajectory", "Verifier", "WorldConfig", "behavior_clone", "evaluate",
    "generate_world", "intent_set", "parse_trajectory", "render_trajectory", "run_episode", "train",
]
__version__ = "0.1.0"
