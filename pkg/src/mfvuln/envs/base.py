"""Shared environment plumbing.

All environments expose the same surface:

    env.reset(seed) -> Snapshot
    env.step(snapshot, actions) -> StepResult
    env.observation_graph(snapshot, radius=None) -> (N, N) bool adjacency

Snapshots are passed explicitly so rollouts stay replayable; the snapshot
owns the stream of process noise (single writer, do not step one snapshot
from two threads).  Initial agent layout is fixed by the config, not the
reset seed, so agent identities keep their meaning across episodes of one
experiment.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from ..core import MeanFieldAction, MeanFieldState, empirical_mean_field_action, empirical_mean_field_state
from ..errors import InvalidConfigError, InvalidInputError


@dataclass
class Snapshot:
    t: int
    states: np.ndarray
    rng: np.random.Generator
    pos: Optional[np.ndarray] = None        # continuous (Vicsek) or cell coords (Taxi)
    headings: Optional[np.ndarray] = None   # Vicsek only

    @property
    def n_agents(self) -> int:
        return self.states.size


@dataclass
class StepResult:
    snapshot: Snapshot
    states: np.ndarray
    reward: float
    mu: MeanFieldState
    nu: MeanFieldAction


class MeanFieldEnv:
    """Base class; subclasses fill in reset/step and a distance metric."""

    config = None

    @property
    def n_agents(self) -> int:
        return self.config.n_agents

    @property
    def n_actions(self) -> int:
        return self.config.n_actions

    @property
    def gamma(self) -> float:
        return self.config.gamma

    @property
    def horizon(self) -> int:
        return self.config.horizon

    n_states = 0

    def reset(self, seed=None) -> Snapshot:
        raise NotImplementedError

    def step(self, snapshot: Snapshot, actions) -> StepResult:
        raise NotImplementedError

    def mean_field(self, snapshot: Snapshot) -> MeanFieldState:
        return empirical_mean_field_state(snapshot.states, self.n_states)

    def _pairwise_distances(self, snapshot: Snapshot) -> np.ndarray:
        raise NotImplementedError

    def observation_graph(self, snapshot: Snapshot, radius=None) -> np.ndarray:
        """Symmetric boolean adjacency: within radius, no self loops."""
        r = self.config.comm_radius if radius is None else radius
        if r < 0:
            raise InvalidInputError(f"radius must be non-negative, got {r}")
        d = self._pairwise_distances(snapshot)
        adj = d <= r
        np.fill_diagonal(adj, False)
        return adj

    def _check_actions(self, snapshot: Snapshot, actions) -> np.ndarray:
        actions = np.asarray(actions, dtype=int)
        if actions.shape != (self.n_agents,):
            raise InvalidInputError(
                f"expected {self.n_agents} actions, got shape {actions.shape}")
        if np.any(actions < 0) or np.any(actions >= self.n_actions):
            raise InvalidInputError("action index out of range")
        return actions

    def _finish_step(self, snapshot: Snapshot, actions, reward: float) -> StepResult:
        mu = empirical_mean_field_state(snapshot.states, self.n_states)
        nu = empirical_mean_field_action(actions, self.n_actions)
        return StepResult(snapshot, snapshot.states, float(reward), mu, nu)


def torus_delta(diff, length: float) -> np.ndarray:
    """Minimal-image displacement on a periodic interval of given length."""
    return (np.asarray(diff) + length / 2.0) % length - length / 2.0


def torus_pairwise(pos, length: float) -> np.ndarray:
    """Euclidean pairwise distances on a square torus; pos is (N, 2)."""
    d = torus_delta(pos[:, None, :] - pos[None, :, :], length)
    return np.sqrt((d ** 2).sum(axis=2))


def agent_layout(n_agents: int):
    """(rows, cols) grid used to arrange per-agent exports, rows <= cols."""
    rows = int(np.floor(np.sqrt(n_agents)))
    while rows > 1 and n_agents % rows:
        rows -= 1
    return rows, n_agents // rows


def wrap_angle(theta):
    """Map angles to [-pi, pi)."""
    return (np.asarray(theta) + np.pi) % (2.0 * np.pi) - np.pi


def build_config(cls, raw: dict):
    """Strict dataclass construction: unknown keys are config errors."""
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise InvalidConfigError(f"unknown config key(s) for {cls.__name__}: {', '.join(unknown)}")
    cfg = cls(**raw)
    cfg.validate()
    return cfg
