"""Adversarial policy training against a frozen victim.

After selection fixes who is corrupted, the adversary learns what the
corrupted agents should do: Q-learning on the negated shared reward, with
every attacked agent executing the per-decision mixture
eps_i * adversary + (1 - eps_i) * victim.  One shared adversary model
serves all attacked agents.

The learner is black-box: its update uses only the corrupted agents'
(state, mean-field, action, reward) stream, bootstrapping on the action
actually executed at the next step (SARSA), so the victim's distributions
enter training only through the environment's realized behaviour.  The
victim's parameters are never written; training and evaluation checksum
the victim before and after and refuse to return silently if it moved.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (BudgetVector, empirical_mean_field_state, mix_policy_matrix,
                   sample_actions, seed_rng)
from .errors import InvalidConfigError, InvalidInputError
from .qlearn import (BoltzmannPolicy, MeanFieldBinner, QModel, evaluate_policy,
                     softmax_rows)


def policy_checksum(policy) -> str:
    """Digest of a policy's learnable state; stable across calls when frozen."""
    h = hashlib.sha256()
    h.update(type(policy).__name__.encode())
    model = getattr(policy, "model", None)
    if model is not None:
        for arr in (getattr(model, "table", None), getattr(model, "weights", None),
                    getattr(model, "nu_hat", None)):
            if arr is not None:
                h.update(np.ascontiguousarray(arr, dtype=float).tobytes())
    table = getattr(policy, "table", None)
    if table is not None:
        h.update(np.ascontiguousarray(table, dtype=float).tobytes())
    return h.hexdigest()


@dataclass
class AdversaryConfig:
    episodes: int = 300
    lr: float = 0.2
    lr_decay: float = 0.0
    temperature: float = 0.1
    eps_start: float = 1.0
    eps_final: float = 0.05
    eps_fraction: float = 0.5
    mu_bins: int = 1
    nu_bins: int = 1
    bin_levels: int = 4
    backend: str = "tabular"
    seed: int = 0

    def validate(self):
        if self.episodes < 1:
            raise InvalidConfigError("episodes must be >= 1")
        if self.lr <= 0 or self.temperature <= 0:
            raise InvalidConfigError("lr and temperature must be positive")
        if not (0 <= self.eps_final <= self.eps_start <= 1):
            raise InvalidConfigError("exploration schedule must satisfy 0 <= final <= start <= 1")
        if not (0 < self.eps_fraction <= 1):
            raise InvalidConfigError("eps_fraction must be in (0, 1]")


def _explore_at(cfg: AdversaryConfig, episode: int) -> float:
    cut = max(1, int(cfg.episodes * cfg.eps_fraction))
    frac = min(1.0, episode / cut)
    return cfg.eps_start + frac * (cfg.eps_final - cfg.eps_start)


def train_adversary(env, victim_policy, budgets: BudgetVector, cfg: AdversaryConfig):
    """Fit the corruption policy; returns (model, policy, episode returns).

    Episode returns are the adversary's objective (negated shared reward,
    discounted), so the curve should rise as the attack improves.  An
    all-zero budget vector warns and returns an untrained (no-op) adversary:
    with nothing corrupted there is no transition that carries signal.
    """
    cfg.validate()
    if budgets.n_agents != env.n_agents:
        raise InvalidInputError("budget vector length does not match the population")
    attacked = budgets.eps > 0
    model = QModel(env.n_states, env.n_actions, env.gamma, backend=cfg.backend,
                   mu_binner=MeanFieldBinner(cfg.mu_bins, cfg.bin_levels),
                   nu_binner=MeanFieldBinner(cfg.nu_bins, cfg.bin_levels))
    if not attacked.any():
        warnings.warn("empty attack set: returning a no-op adversary", stacklevel=2)
        return model, BoltzmannPolicy(model, cfg.temperature), np.empty(0)
    frozen = policy_checksum(victim_policy)

    episode_seeds = np.random.SeedSequence((cfg.seed, 0xad)).spawn(cfg.episodes)
    act_rng = seed_rng(cfg.seed, salt="adversary-actions")
    curve = np.empty(cfg.episodes)

    for ep in range(cfg.episodes):
        snap = env.reset(seed=episode_seeds[ep])
        explore = _explore_at(cfg, ep)
        ret, disc = 0.0, 1.0
        prev = None
        for t in range(env.horizon):
            mu = empirical_mean_field_state(snap.states, env.n_states).probs
            victim = victim_policy.action_dists(snap)
            q = model.values(snap.states, mu, model.nu_hat)
            adv = (1 - explore) * softmax_rows(q / cfg.temperature) \
                + explore / env.n_actions
            behavior = mix_policy_matrix(adv, victim, budgets.eps)
            actions = sample_actions(behavior, act_rng)
            nu = np.bincount(actions, minlength=env.n_actions) / env.n_agents

            if prev is not None:
                p_states, p_actions, p_reward, p_mu, p_nu = prev
                q_here = model.values(snap.states, mu, nu)
                boot = q_here[np.arange(env.n_agents), actions]
                targets = -p_reward + env.gamma * boot
                model.td_update(p_states[attacked], p_actions[attacked], p_mu,
                                p_nu, targets[attacked], cfg.lr, cfg.lr_decay)

            res = env.step(snap, actions)
            prev = (snap.states, actions, res.reward, mu, res.nu.probs)
            model.observe_nu(res.nu.probs)
            ret += disc * (-res.reward)
            disc *= env.gamma
            snap = res.snapshot
        curve[ep] = ret

    if policy_checksum(victim_policy) != frozen:
        raise RuntimeError("victim policy changed during adversarial training")
    return model, BoltzmannPolicy(model, cfg.temperature), curve


@dataclass
class AttackEvalReport:
    """Victim returns under a fixed attack, with the matching clean baseline."""

    returns: np.ndarray
    baseline_returns: np.ndarray
    budgets: BudgetVector
    victim_checksum: str

    def __post_init__(self):
        if self.returns.size < 1:
            raise InvalidInputError("report needs at least one episode")

    @property
    def episodes(self) -> int:
        return self.returns.size

    @property
    def mean_return(self) -> float:
        return float(self.returns.mean())

    @property
    def std_return(self) -> float:
        return float(self.returns.std(ddof=1)) if self.returns.size > 1 else 0.0

    @property
    def baseline_mean(self) -> float:
        return float(self.baseline_returns.mean())

    @property
    def n_attacked(self) -> int:
        return int(np.count_nonzero(self.budgets.eps))


def evaluate_attack(env, victim_policy, budgets: BudgetVector, episodes: int,
                    seed, adversary_policy=None) -> AttackEvalReport:
    """Discounted victim returns under a fixed attack; victim stays frozen.

    The cooperative baseline is computed with the identical episode seeds
    and zero budgets.  An all-zero budget vector (or a missing adversary)
    is allowed but pointless, so it warns and the attacked returns simply
    repeat the baseline.
    """
    if budgets.n_agents != env.n_agents:
        raise InvalidInputError("budget vector length does not match the population")
    if episodes < 1:
        raise InvalidInputError("episodes must be >= 1")
    before = policy_checksum(victim_policy)
    baseline = evaluate_policy(env, victim_policy, episodes, seed)
    active = bool(np.any(budgets.eps > 0)) and adversary_policy is not None
    if not active:
        warnings.warn("attack evaluation with no active corruption; "
                      "returns equal the clean baseline", stacklevel=2)
        returns = baseline.copy()
    else:
        returns = evaluate_policy(env, victim_policy, episodes, seed,
                                  adversary_policy=adversary_policy, budgets=budgets)
    after = policy_checksum(victim_policy)
    if after != before:
        raise RuntimeError("victim policy changed during attack evaluation")
    return AttackEvalReport(returns=returns, baseline_returns=baseline,
                            budgets=budgets, victim_checksum=after)


def pooled_std(groups) -> float:
    """Classic pooled standard deviation across result groups."""
    groups = [np.asarray(g, dtype=float) for g in groups if len(g) > 1]
    if not groups:
        return 0.0
    num = sum((g.size - 1) * g.var(ddof=1) for g in groups)
    den = sum(g.size - 1 for g in groups)
    return float(np.sqrt(num / den))
