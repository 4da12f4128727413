"""Experiment harness: strict config, staged pipeline, append-only results.

A run owns one output directory.  Three stages execute in order per seed:
train the cooperative victim, fit the budget-conditioned value model on its
rollouts, then select attack sets and train/evaluate adversaries for each
configured method.  Every stage writes a checkpoint and is skipped when its
artifact already exists, so a rerun with the same config touches nothing
and leaves the ledger byte-identical.

The ledger is an append-only CSV keyed by a hash of the config; analysis
helpers (Pearson correlation of predicted vs realized attack damage, and
per-agent vulnerability heatmaps) live here too.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import warnings
from dataclasses import dataclass, field, fields as dc_fields, replace
from typing import Optional

import numpy as np
import yaml

from .attack import AdversaryConfig, evaluate_attack, train_adversary
from .core import BudgetVector, empirical_mean_field_state, seed_rng
from .envs import make_env
from .envs.base import agent_layout
from .errors import (ConfigParseError, InvalidConfigError, InvalidInputError,
                     StageDependencyError, UndefinedCorrelationError)
from .qlearn import (BoltzmannPolicy, TrainConfig, UniformPolicy,
                     evaluate_policy, rollout, train_victim)
from .robust import (FitConfig, RobustValueModel, fit_cooperative_q,
                     fit_robust_value)
from .selection import (AttackSet, SelectorRLConfig, load_attack_set,
                        predicted_drop, save_attack_set, select_bruteforce,
                        select_degree_centrality, select_greedy, select_random,
                        select_rl)

FLOAT_FMT = "%.9g"
SELECTION_METHODS = ("greedy", "rl", "random", "dc", "brute")


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return FLOAT_FMT % value
    return str(value)


def _build_section(dc_cls, raw, section: str):
    raw = {} if raw is None else dict(raw)
    known = {f.name for f in dc_fields(dc_cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigParseError(
            f"unknown key '{unknown[0]}' in config section '{section}'")
    try:
        obj = dc_cls(**raw)
    except TypeError as exc:
        raise ConfigParseError(f"bad section '{section}': {exc}") from exc
    if hasattr(obj, "validate"):
        obj.validate()
    return obj


@dataclass
class ValueStageConfig(FitConfig):
    rollouts: int = 80

    def validate(self):
        # yaml spells the norm order as .inf / 1 / 2; strings also accepted
        if isinstance(self.p, str):
            self.p = np.inf if self.p in ("inf", ".inf") else float(self.p)
        super().validate()
        if self.rollouts < 1:
            raise InvalidConfigError("rollouts must be >= 1")

    def fit_config(self, seed: int) -> FitConfig:
        kwargs = {f.name: getattr(self, f.name) for f in dc_fields(FitConfig)}
        kwargs["seed"] = seed
        return FitConfig(**kwargs)


@dataclass
class SelectionStageConfig:
    methods: list = field(default_factory=lambda: ["greedy", "rl", "random", "dc"])
    k: int = 2
    eps: float = 1.0
    rl_episodes: int = 200
    rl_lr: float = 0.05
    rl_gamma: float = 0.95
    brute_cap: int = 3000

    def validate(self):
        unknown = [m for m in self.methods if m not in SELECTION_METHODS]
        if unknown:
            raise InvalidConfigError(f"unknown selection method: {unknown[0]}")
        if not self.methods:
            raise InvalidConfigError("at least one selection method is required")
        if self.k < 0:
            raise InvalidConfigError("k must be >= 0")
        if not (0.0 < self.eps <= 1.0):
            raise InvalidConfigError("eps must be in (0, 1]")

    def rl_config(self, seed: int) -> SelectorRLConfig:
        return SelectorRLConfig(episodes=self.rl_episodes, lr=self.rl_lr,
                                gamma=self.rl_gamma, seed=seed)


@dataclass
class AdversaryStageConfig(AdversaryConfig):
    eval_episodes: int = 20

    def validate(self):
        super().validate()
        if self.eval_episodes < 1:
            raise InvalidConfigError("eval_episodes must be >= 1")

    def adversary_config(self, seed: int) -> AdversaryConfig:
        kwargs = {f.name: getattr(self, f.name) for f in dc_fields(AdversaryConfig)}
        kwargs["seed"] = seed
        return AdversaryConfig(**kwargs)


@dataclass
class CorrelationStageConfig:
    n_subsets: int = 20
    k_min: int = 1
    k_max: int = 0          # 0 means N // 2
    episodes: int = 10
    adv_episodes: int = 150

    def validate(self):
        if self.n_subsets < 10:
            raise InvalidConfigError("correlation needs at least 10 subsets")
        if self.k_min < 1 or (self.k_max and self.k_max < self.k_min):
            raise InvalidConfigError("bad subset size range")
        if self.episodes < 1 or self.adv_episodes < 1:
            raise InvalidConfigError("episode counts must be >= 1")


@dataclass
class HeatmapStageConfig:
    mode: str = "per-agent-eps"

    def validate(self):
        if self.mode not in ("per-agent-eps", "single-adversary-xi"):
            raise InvalidConfigError(f"unknown heatmap mode: {self.mode}")


@dataclass
class ExperimentConfig:
    raw: dict
    name: str
    env: dict
    victim: TrainConfig
    value: ValueStageConfig
    selection: SelectionStageConfig
    adversary: AdversaryStageConfig
    correlation: CorrelationStageConfig
    heatmap: HeatmapStageConfig
    seeds: list
    out_dir: str


_TOP_KEYS = ("name", "env", "victim", "value", "selection", "adversary",
             "correlation", "heatmap", "seeds", "out_dir")


def parse_experiment_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigParseError("config root must be a mapping")
    unknown = sorted(set(raw) - set(_TOP_KEYS))
    if unknown:
        raise ConfigParseError(f"unknown key '{unknown[0]}' at config top level")
    env_raw = raw.get("env")
    if not isinstance(env_raw, dict) or "env_name" not in env_raw:
        raise ConfigParseError("config section 'env' with an env_name is required")
    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, (list, tuple)) or not seeds \
            or not all(isinstance(s, int) for s in seeds):
        raise ConfigParseError("'seeds' must be a non-empty list of integers")
    cfg = ExperimentConfig(
        raw=raw,
        name=str(raw.get("name", "experiment")),
        env=dict(env_raw),
        victim=_build_section(TrainConfig, raw.get("victim"), "victim"),
        value=_build_section(ValueStageConfig, raw.get("value"), "value"),
        selection=_build_section(SelectionStageConfig, raw.get("selection"), "selection"),
        adversary=_build_section(AdversaryStageConfig, raw.get("adversary"), "adversary"),
        correlation=_build_section(CorrelationStageConfig, raw.get("correlation"),
                                   "correlation"),
        heatmap=_build_section(HeatmapStageConfig, raw.get("heatmap"), "heatmap"),
        seeds=list(seeds),
        out_dir=str(raw.get("out_dir", "runs")),
    )
    env = make_env(cfg.env)   # validates the env section before any compute
    if cfg.selection.k > env.n_agents:
        raise InvalidConfigError(
            f"selection k={cfg.selection.k} exceeds population size {env.n_agents}")
    return cfg


def load_experiment_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigParseError(f"cannot parse config {path}: {exc}") from exc
    return parse_experiment_config(raw)


def experiment_id(cfg: ExperimentConfig) -> str:
    canon = json.dumps(cfg.raw, sort_keys=True, default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


# -- results ledger --------------------------------------------------------------


class ResultsLedger:
    """Append-only CSV of experiment metrics; rows are never rewritten."""

    COLUMNS = ("experiment_id", "stage", "method", "seed", "metric", "value")

    def __init__(self, path):
        self.path = path
        if not os.path.exists(path):
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.COLUMNS)

    def append(self, experiment: str, stage: str, method: str, seed, metric: str,
               value):
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([experiment, stage, method, str(seed),
                                     metric, _fmt(value)])

    def rows(self):
        with open(self.path, newline="") as fh:
            return list(csv.DictReader(fh))

    def has(self, experiment: str, stage: str, seed=None, method: Optional[str] = None) -> bool:
        for row in self.rows():
            if row["experiment_id"] != experiment or row["stage"] != stage:
                continue
            if seed is not None and row["seed"] != str(seed):
                continue
            if method is not None and row["method"] != method:
                continue
            return True
        return False


# -- analyses --------------------------------------------------------------------


def pearson(xs, ys) -> float:
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.ndim != 1 or xs.shape != ys.shape:
        raise InvalidInputError("pearson needs two equal-length vectors")
    if xs.size < 2:
        raise InvalidInputError("pearson needs at least two samples")
    xc = xs - xs.mean()
    yc = ys - ys.mean()
    vx = float(xc @ xc)
    vy = float(yc @ yc)
    if vx <= 0.0 or vy <= 0.0:
        raise UndefinedCorrelationError("zero variance in correlation input")
    r = float(xc @ yc) / np.sqrt(vx * vy)
    return float(np.clip(r, -1.0, 1.0))


def sample_attack_subsets(n_agents: int, n_subsets: int, seed, eps: float = 1.0,
                          k_min: int = 1, k_max: Optional[int] = None):
    """Distinct random subsets with sizes cycling over [k_min, k_max].

    Cycling sizes guarantees the predicted drops span a real range instead
    of clustering at one subset size.
    """
    k_max = max(k_min, n_agents // 2) if not k_max else k_max
    if k_max > n_agents:
        raise InvalidInputError("k_max exceeds population size")
    rng = seed_rng(seed, salt="attack-subsets")
    subsets, seen = [], set()
    sizes = [k_min + (i % (k_max - k_min + 1)) for i in range(n_subsets)]
    for k in sizes:
        for _ in range(1000):
            ids = tuple(sorted(rng.choice(n_agents, size=k, replace=False).tolist()))
            if ids not in seen:
                seen.add(ids)
                subsets.append(AttackSet(np.array(ids, dtype=int), eps, "random"))
                break
        else:
            raise InvalidInputError("could not sample enough distinct subsets")
    return subsets


def correlate_prediction_vs_attack(value_model, env, victim_policy, subsets,
                                   adv_cfg: AdversaryConfig, episodes: int, seed,
                                   out_csv=None):
    """Pair predicted drops with realized attacked returns; returns (r, rows).

    Each subset gets its own adversary trained against the frozen victim;
    the Pearson correlation is between the value model's predicted drop and
    the realized attacked return (damaging subsets should sit low, so a
    faithful model shows strongly negative r).
    """
    if len(subsets) < 10:
        raise InvalidInputError("need at least 10 attack subsets")
    snap0 = env.reset(seed=seed)
    states0 = snap0.states
    mu0 = empirical_mean_field_state(states0, env.n_states).probs
    rows = []
    for j, attack in enumerate(subsets):
        budgets = attack.budgets(env.n_agents)
        pred = predicted_drop(value_model, states0, mu0, budgets)
        _, adv_policy, _ = train_adversary(env, victim_policy, budgets,
                                           replace(adv_cfg, seed=adv_cfg.seed + 7919 * j))
        report = evaluate_attack(env, victim_policy, budgets, episodes,
                                 seed=(seed, 4, j), adversary_policy=adv_policy)
        rows.append((pred, report.mean_return))
    r = pearson([p for p, _ in rows], [m for _, m in rows])
    if out_csv:
        with open(out_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["predicted_drop", "realized_return"])
            for p, m in rows:
                w.writerow([_fmt(p), _fmt(m)])
    return r, rows


def export_heatmap(value_model, env, snapshot, mode: str, out_csv=None) -> np.ndarray:
    """Per-agent vulnerability grid shaped by the population layout.

    per-agent-eps: drop from fully corrupting each agent alone (eps 0 -> 1,
    xi pinned at 0).  single-adversary-xi: drop every agent suffers when one
    anonymous adversary joins the population (xi 0 -> 1/N).
    """
    states0 = snapshot.states
    n = states0.size
    mu0 = empirical_mean_field_state(states0, env.n_states).probs
    zero = np.zeros(n)
    v00 = value_model.values(states0, mu0, zero, 0.0)
    if mode == "per-agent-eps":
        v1 = value_model.values(states0, mu0, np.ones(n), 0.0)
    elif mode == "single-adversary-xi":
        v1 = value_model.values(states0, mu0, zero, 1.0 / n)
    else:
        raise InvalidInputError(f"unknown heatmap mode: {mode}")
    drops = v00 - v1
    rows, cols = agent_layout(n)
    grid = drops.reshape(rows, cols)
    if out_csv:
        with open(out_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            for row in grid:
                w.writerow([_fmt(v) for v in row])
    return grid


# -- staged pipeline --------------------------------------------------------------


class RunPaths:
    def __init__(self, out_dir):
        self.out_dir = out_dir

    def _p(self, name):
        return os.path.join(self.out_dir, name)

    def ledger(self):
        return self._p("ledger.csv")

    def victim_policy(self, seed):
        return self._p(f"victim_s{seed}.policy")

    def trajectories(self, seed):
        return self._p(f"trajectories_s{seed}.csv")

    def value_model(self, seed):
        return self._p(f"value_s{seed}.robust")

    def attack_set(self, seed, method):
        return self._p(f"attack_{method}_s{seed}.txt")

    def adversary(self, seed, method):
        return self._p(f"adversary_{method}_s{seed}.policy")

    def brute_scores(self, seed):
        return self._p(f"brute_scores_s{seed}.csv")

    def correlation(self, seed):
        return self._p(f"correlation_s{seed}.csv")

    def heatmap(self, seed, mode):
        return self._p(f"heatmap_{mode}_s{seed}.csv")


def write_trajectories_csv(path, trajectories):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "t", "reward", "states", "actions"])
        for ep, traj in enumerate(trajectories):
            for st in traj.steps:
                w.writerow([ep, st.t, _fmt(st.reward),
                            ";".join(str(s) for s in st.states),
                            ";".join(str(a) for a in st.actions)])


def load_victim(paths: RunPaths, seed) -> BoltzmannPolicy:
    path = paths.victim_policy(seed)
    if not os.path.exists(path):
        raise StageDependencyError(
            f"missing victim checkpoint {path}; run train-victim first")
    return BoltzmannPolicy.load(path)


def load_value_model(paths: RunPaths, seed) -> RobustValueModel:
    path = paths.value_model(seed)
    if not os.path.exists(path):
        raise StageDependencyError(
            f"missing value checkpoint {path}; run fit-value first")
    return RobustValueModel.load(path)


def stage_train_victim(cfg: ExperimentConfig, env, seed: int, paths: RunPaths,
                       ledger: ResultsLedger, exp: str):
    path = paths.victim_policy(seed)
    vcfg = replace(cfg.victim, seed=seed)
    if os.path.exists(path):
        policy = BoltzmannPolicy.load(path)
    else:
        _, policy, _ = train_victim(env, vcfg)
        policy.save(path)
    if not ledger.has(exp, "victim", seed=seed):
        trained = evaluate_policy(env, policy, vcfg.eval_episodes, seed=(seed, 1))
        uniform = evaluate_policy(env, UniformPolicy(env.n_actions),
                                  vcfg.eval_episodes, seed=(seed, 1))
        ledger.append(exp, "victim", "mfq", seed, "victim_return",
                      float(trained.mean()))
        ledger.append(exp, "victim", "mfq", seed, "victim_std",
                      float(trained.std(ddof=1)))
        ledger.append(exp, "victim", "uniform", seed, "victim_return",
                      float(uniform.mean()))
    return policy


def stage_fit_value(cfg: ExperimentConfig, env, victim_policy, seed: int,
                    paths: RunPaths, ledger: ResultsLedger, exp: str):
    path = paths.value_model(seed)
    if os.path.exists(path):
        vmodel = RobustValueModel.load(path)
    else:
        if victim_policy is None:
            victim_policy = load_victim(paths, seed)
        corpus_seeds = np.random.SeedSequence((seed, 2)).spawn(cfg.value.rollouts)
        trajs = [rollout(env, victim_policy, s) for s in corpus_seeds]
        write_trajectories_csv(paths.trajectories(seed), trajs)
        fit_cfg = cfg.value.fit_config(seed)
        q_model = fit_cooperative_q(trajs, env.n_states, env.n_actions,
                                    env.gamma, fit_cfg)
        vmodel = fit_robust_value(q_model, trajs, fit_cfg)
        vmodel.save(path)
    if not ledger.has(exp, "value", seed=seed):
        snap0 = env.reset(seed=seed)
        mu0 = empirical_mean_field_state(snap0.states, env.n_states).probs
        v0 = vmodel.values(snap0.states, mu0, np.zeros(env.n_agents), 0.0)
        ledger.append(exp, "value", vmodel.backend, seed, "v0_mean",
                      float(v0.mean()))
    return vmodel


def _run_selector(method: str, cfg: ExperimentConfig, env, victim_policy, vmodel,
                  states0, mu0, seed: int, paths: RunPaths):
    sel = cfg.selection
    if method == "greedy":
        return select_greedy(vmodel, states0, mu0, sel.k, sel.eps)
    if method == "rl":
        attack, _ = select_rl(vmodel, states0, mu0, sel.k, sel.rl_config(seed),
                              sel.eps)
        return attack
    if method == "random":
        return select_random(env.n_agents, sel.k, seed, sel.eps)
    if method == "dc":
        return select_degree_centrality(env, env.reset(seed=seed), sel.k, sel.eps)
    if method == "brute":
        acfg = cfg.adversary.adversary_config(seed)

        def evaluate_subset(subset):
            budgets = BudgetVector.from_set(env.n_agents, subset, sel.eps)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                _, adv, _ = train_adversary(env, victim_policy, budgets, acfg)
                report = evaluate_attack(env, victim_policy, budgets,
                                         cfg.adversary.eval_episodes,
                                         seed=(seed, 5), adversary_policy=adv)
            return report.mean_return

        attack, table = select_bruteforce(evaluate_subset, env.n_agents, sel.k,
                                          sel.eps, cap=sel.brute_cap)
        with open(paths.brute_scores(seed), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subset", "victim_return"])
            for subset, ret in table:
                w.writerow([";".join(str(i) for i in subset), _fmt(ret)])
        return attack
    raise InvalidConfigError(f"unknown selection method: {method}")


def stage_select(cfg: ExperimentConfig, env, victim_policy, vmodel, seed: int,
                 paths: RunPaths, ledger: ResultsLedger, exp: str):
    snap0 = env.reset(seed=seed)
    states0 = snap0.states
    mu0 = empirical_mean_field_state(states0, env.n_states).probs
    attacks = {}
    for method in cfg.selection.methods:
        apath = paths.attack_set(seed, method)
        if os.path.exists(apath):
            attack = load_attack_set(apath)
        else:
            attack = _run_selector(method, cfg, env, victim_policy, vmodel,
                                   states0, mu0, seed, paths)
            save_attack_set(attack, apath, seed=seed)
        if not ledger.has(exp, "select", seed=seed, method=method):
            pred = attack.predicted_drop
            if pred is None:
                pred = predicted_drop(vmodel, states0, mu0,
                                      attack.budgets(env.n_agents))
            ledger.append(exp, "select", method, seed, "predicted_drop", pred)
        attacks[method] = attack
    return attacks


def stage_attack(cfg: ExperimentConfig, env, victim_policy, seed: int,
                 paths: RunPaths, ledger: ResultsLedger, exp: str):
    policies = {}
    for method in cfg.selection.methods:
        apath = paths.attack_set(seed, method)
        if not os.path.exists(apath):
            raise StageDependencyError(
                f"missing attack set {apath}; run select first")
        attack = load_attack_set(apath)
        advpath = paths.adversary(seed, method)
        if os.path.exists(advpath):
            adv_policy = BoltzmannPolicy.load(advpath)
        else:
            _, adv_policy, _ = train_adversary(env, victim_policy,
                                               attack.budgets(env.n_agents),
                                               cfg.adversary.adversary_config(seed))
            adv_policy.save(advpath)
        policies[method] = adv_policy
    return policies


def stage_evaluate(cfg: ExperimentConfig, env, victim_policy, seed: int,
                   paths: RunPaths, ledger: ResultsLedger, exp: str):
    for method in cfg.selection.methods:
        apath = paths.attack_set(seed, method)
        advpath = paths.adversary(seed, method)
        if not os.path.exists(apath):
            raise StageDependencyError(
                f"missing attack set {apath}; run select first")
        if not os.path.exists(advpath):
            raise StageDependencyError(
                f"missing adversary checkpoint {advpath}; run attack first")
        if ledger.has(exp, "attack", seed=seed, method=method):
            continue
        attack = load_attack_set(apath)
        adv_policy = BoltzmannPolicy.load(advpath)
        report = evaluate_attack(env, victim_policy, attack.budgets(env.n_agents),
                                 cfg.adversary.eval_episodes, seed=(seed, 3),
                                 adversary_policy=adv_policy)
        ledger.append(exp, "attack", method, seed, "attacked_return",
                      report.mean_return)
        ledger.append(exp, "attack", method, seed, "attacked_std",
                      report.std_return)
        ledger.append(exp, "attack", method, seed, "coop_return",
                      report.baseline_mean)


def run_pipeline(config, out_dir=None, seeds=None) -> str:
    """Execute all stages for every seed; returns the results directory."""
    if isinstance(config, (str, os.PathLike)):
        config = load_experiment_config(config)
    if out_dir is not None:
        config = replace(config, out_dir=str(out_dir))
    if seeds is not None:
        config = replace(config, seeds=list(seeds))
    os.makedirs(config.out_dir, exist_ok=True)
    exp = experiment_id(config)
    paths = RunPaths(config.out_dir)
    ledger = ResultsLedger(paths.ledger())
    env = make_env(config.env)
    for seed in config.seeds:
        victim = stage_train_victim(config, env, seed, paths, ledger, exp)
        vmodel = stage_fit_value(config, env, victim, seed, paths, ledger, exp)
        stage_select(config, env, victim, vmodel, seed, paths, ledger, exp)
        stage_attack(config, env, victim, seed, paths, ledger, exp)
        stage_evaluate(config, env, victim, seed, paths, ledger, exp)
    return config.out_dir
