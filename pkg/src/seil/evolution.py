"""Self-evolution loop (train -> record -> select -> train) and ablation harnesses."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence


from . import microsim as sim
from . import selector as sel
from .nn import ParamSet
from .policy import MLPPolicy, SRReport, evaluate, init_policy, run_rollouts, train_bc
from .rng import (
    TAG_BASE,
    TAG_EMA,
    TAG_EXPERT,
    TAG_HOLDOUT,
    TAG_POLICY,
    TAG_SELECT,
    TAG_SELECTOR,
    SplitMix64,
    derive_seed,
)

log = logging.getLogger(__name__)

POOL_LABELS = ("P1", "P2", "P3", "P4", "P5")


@dataclass
class ExperimentConfig:
    master_seed: int = 0
    shots: int = 8
    rollouts: int = 25
    select_k: int = 15
    tau: float = 0.999
    delta: float = 0.05
    max_rounds: int = 5
    eval_episodes: int = 50
    m_aug: bool = True
    e_aug: bool = True
    use_selector: bool = True
    scheme: str = "ascending"
    retrain_from_scratch: bool = False
    sequence_only_selector: bool = False
    retrain_selector: bool = False
    pool_filter: Optional[list] = None
    expert_aug: bool = True
    base_steps: int = 3000
    round_steps: int = 1500
    round_lr: float = 1e-3
    patience: int = 2
    min_delta: float = 0.005
    selector_epochs: int = 80
    threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.shots < 1:
            raise ValueError("shots must be >= 1")
        if self.rollouts < 0:
            raise ValueError("rollouts must be >= 0")
        if not 0 <= self.select_k <= 2 * self.rollouts:
            raise ValueError(f"select_k must lie in [0, 2*rollouts], got {self.select_k}")
        if not 0.0 <= self.tau < 1.0:
            raise ValueError("tau must lie in [0, 1)")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.max_rounds < 0 or self.eval_episodes < 1:
            raise ValueError("max_rounds must be >= 0 and eval_episodes >= 1")
        if self.scheme not in sel.SCHEMES:
            raise ValueError(f"scheme must be one of {sel.SCHEMES}")
        if self.pool_filter is not None:
            bad = set(self.pool_filter) - set(POOL_LABELS)
            if bad or not self.pool_filter:
                raise ValueError(f"pool_filter entries must be drawn from {POOL_LABELS}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def selector_spec(self) -> sel.SelectorSpec:
        return sel.SelectorSpec(sequence_only=self.sequence_only_selector, epochs=self.selector_epochs)


@dataclass
class DemoPool:
    expert: list
    recorded: list = field(default_factory=list)

    def extend(self, demos: Sequence[sim.Trajectory]) -> None:
        bad = [d.demo_id for d in demos if not d.success]
        if bad:
            raise ValueError(f"refusing failed trajectories in pool: {bad[:3]}")
        self.recorded.extend(demos)

    def training_set(self) -> list:
        return list(self.expert) + list(self.recorded)

    def __len__(self) -> int:
        return len(self.expert) + len(self.recorded)


@dataclass
class RoundReport:
    round: int
    base: SRReport
    ema: SRReport
    pool_size: int
    recorded: int = 0
    selected: int = 0
    converged: bool = False


@dataclass
class EvolutionReport:
    config: dict
    rounds: list = field(default_factory=list)
    convergence_round: Optional[int] = None
    scored: list = field(default_factory=list)  # (round, ScoredDemo, selected)
    final_policy: Optional[ParamSet] = field(default=None, repr=False)

    def base_history(self) -> list[float]:
        return [r.base.mean for r in self.rounds]

    @property
    def growth_rate(self) -> Optional[float]:
        h = self.base_history()
        return growth_rate(h[0], max(h)) if h else None


def check_convergence(history: Sequence[float], patience: int = 2, min_delta: float = 0.005) -> bool:
    """True once the best SR has failed to improve by more than ``min_delta`` for ``patience`` rounds."""
    if not history:
        raise ValueError("empty history")
    best, stale = history[0], 0
    for x in history[1:]:
        if x > best + min_delta:
            stale = 0
        else:
            stale += 1
        best = max(best, x)
    return stale >= patience


def growth_rate(baseline: float, final: float) -> Optional[float]:
    """Relative improvement in percent; ``None`` when the baseline is not positive."""
    if baseline <= 0:
        return None
    return 100.0 * (final - baseline) / baseline


# ---------------------------------------------------------------------------
# stages


def expert_demos(config: ExperimentConfig, suite: sim.TaskSuite) -> list[sim.Trajectory]:
    aug = sim.EnvAugConfig(config.expert_aug, config.delta)
    out = []
    for task in suite.tasks:
        for i in range(config.shots):
            seed = derive_seed(config.master_seed, 0, TAG_EXPERT, task.task_id, i)
            out.append(sim.expert_rollout(task, seed, aug, rollout_idx=i))
    return out


def holdout_demos(config: ExperimentConfig, suite: sim.TaskSuite, n: int = 20) -> list[sim.Trajectory]:
    """Unseen expert demos; task ids cycle through the suite."""
    aug = sim.EnvAugConfig(config.expert_aug, config.delta)
    out = []
    for i in range(n):
        task = suite.tasks[i % len(suite)]
        seed = derive_seed(config.master_seed, 0, TAG_HOLDOUT, task.task_id, i)
        out.append(sim.expert_rollout(task, seed, aug, rollout_idx=i))
    return out


def _record(policy, tag: int, source: str, suite, config: ExperimentConfig, round_idx: int, e_aug: bool, first_idx: int = 0):
    aug = sim.EnvAugConfig(e_aug, config.delta)
    jobs = [
        (policy, task, derive_seed(config.master_seed, round_idx, tag, task.task_id, i), aug, source, round_idx, i)
        for task in suite.tasks
        for i in range(first_idx, first_idx + config.rollouts)
    ]
    return run_rollouts(jobs, config.threads)


def split_pools(base_trajs, ema_trajs, ema_aug_trajs=()) -> dict[str, list]:
    """Partition same-start base/EMA rollouts by who succeeded; P5 = EMA successes under env augmentation.

    P1 base only, P2 base where EMA also succeeded, P3 EMA where base also
    succeeded, P4 EMA only.
    """
    pools = {k: [] for k in POOL_LABELS}
    ema_by_key = {(t.task_id, t.rollout_idx): t for t in ema_trajs}
    base_by_key = {(t.task_id, t.rollout_idx): t for t in base_trajs}
    for key, b in base_by_key.items():
        e = ema_by_key.get(key)
        if b.success and not (e and e.success):
            pools["P1"].append(b)
        elif b.success:
            pools["P2"].append(b)
    for key, e in ema_by_key.items():
        b = base_by_key.get(key)
        if e.success and b is not None and b.success:
            pools["P3"].append(e)
        elif e.success:
            pools["P4"].append(e)
    pools["P5"] = [t for t in ema_aug_trajs if t.success]
    return pools


def record_round(base_params, ema_params, suite: sim.TaskSuite, config: ExperimentConfig, round_idx: int) -> list[sim.Trajectory]:
    """Roll out the base (and, with m_aug, the EMA) policy R times per task; keep successes."""
    if round_idx < 1:
        raise ValueError("recording rounds start at 1")
    base_pol = MLPPolicy(base_params)
    ema_pol = MLPPolicy(ema_params)
    if config.pool_filter:
        base = _record(base_pol, TAG_BASE, "base", suite, config, round_idx, False)
        ema = _record(ema_pol, TAG_EMA, "ema", suite, config, round_idx, False)
        ema_aug = []
        if "P5" in config.pool_filter:
            # indices R..2R-1 keep derivation tuples distinct from the same-start pass
            ema_aug = _record(ema_pol, TAG_EMA, "ema", suite, config, round_idx, True, first_idx=config.rollouts)
        pools = split_pools(base, ema, ema_aug)
        kept = [t for label in POOL_LABELS if label in config.pool_filter for t in pools[label]]
        return sorted(kept, key=lambda t: (t.task_id, t.order_key))
    trajs = _record(base_pol, TAG_BASE, "base", suite, config, round_idx, config.e_aug)
    if config.m_aug:
        trajs += _record(ema_pol, TAG_EMA, "ema", suite, config, round_idx, config.e_aug)
    return [t for t in trajs if t.success]


def curate(recorded, selector_params, config: ExperimentConfig, round_idx: int, scored_log: Optional[list] = None):
    """Per-task selection of ``k`` recorded demos (or all of them without a selector)."""
    if not config.use_selector:
        return list(recorded)
    scored = sel.score_pool(selector_params, recorded, config.selector_spec) if recorded else []
    chosen = []
    for task_id in range(sim.N_TASKS):
        mine = [s for s in scored if s.demo.task_id == task_id]
        rng = SplitMix64(derive_seed(config.master_seed, round_idx, TAG_SELECT, task_id, 0))
        picked = sel.select(mine, config.select_k, config.scheme, rng)
        ids = {id(s) for s in picked}
        if scored_log is not None:
            scored_log.extend((round_idx, s, id(s) in ids) for s in sorted(mine, key=lambda s: s.key))
        chosen.extend(s.demo for s in picked)
    return chosen


def _eval_pair(ps: ParamSet, suite, config: ExperimentConfig, round_idx: int):
    base = evaluate(ps.params, suite, config.eval_episodes, config.delta, "base", round_idx, config.threads)
    ema = evaluate(ps.ema, suite, config.eval_episodes, config.delta, "ema", round_idx, config.threads)
    return base, ema


def train_initial_policy(config: ExperimentConfig, demos) -> ParamSet:
    ps = init_policy(derive_seed(config.master_seed, 0, TAG_POLICY, 0, 0))
    ps.init_ema()
    return train_bc(ps, demos, config.base_steps, config.tau, derive_seed(config.master_seed, 0, TAG_POLICY, 1, 0))


def train_selector_for(config: ExperimentConfig, demos) -> ParamSet:
    return sel.train_selector(demos, derive_seed(config.master_seed, 0, TAG_SELECTOR, 0, 0), config.selector_spec)


def run_seil(
    config: ExperimentConfig,
    selector_params: Optional[ParamSet] = None,
    initial_policy: Optional[ParamSet] = None,
    on_round: Optional[Callable[[RoundReport], None]] = None,
) -> EvolutionReport:
    """Full self-evolution run.

    ``selector_params`` / ``initial_policy`` let callers reuse stages that
    depend only on (master_seed, shots); they must have been produced from
    the same config values.  ``on_round`` is called after every round, so
    partial results survive a later abort.
    """
    config.validate()
    suite = sim.TaskSuite(config.master_seed)
    report = EvolutionReport(config.to_dict())
    experts = expert_demos(config, suite)
    pool = DemoPool(experts)

    ps = initial_policy.copy() if initial_policy is not None else train_initial_policy(config, experts)
    base, ema = _eval_pair(ps, suite, config, 0)
    rr = RoundReport(0, base, ema, len(pool))
    report.rounds.append(rr)
    if on_round:
        on_round(rr)

    selector = None
    if config.use_selector and config.max_rounds > 0:
        selector = selector_params if selector_params is not None else train_selector_for(config, experts)

    for r in range(1, config.max_rounds + 1):
        recorded = record_round(ps.params, ps.ema, suite, config, r)
        if config.use_selector and config.retrain_selector and r > 1:
            selector = sel.train_selector(pool.training_set(), derive_seed(config.master_seed, r, TAG_SELECTOR, 0, 0), config.selector_spec)
        chosen = curate(recorded, selector, config, r, report.scored)
        pool.extend(chosen)
        train_seed = derive_seed(config.master_seed, r, TAG_POLICY, 1, 0)
        if config.retrain_from_scratch:
            ps = init_policy(derive_seed(config.master_seed, r, TAG_POLICY, 0, 0))
            ps.init_ema()
            train_bc(ps, pool.training_set(), config.base_steps, config.tau, train_seed)
        else:
            train_bc(ps, pool.training_set(), config.round_steps, config.tau, train_seed, lr=config.round_lr)
        base, ema = _eval_pair(ps, suite, config, r)
        rr = RoundReport(r, base, ema, len(pool), len(recorded), len(chosen))
        report.rounds.append(rr)
        log.info("round %d: recorded %d selected %d pool %d | SR base %.3f ema %.3f",
                 r, len(recorded), len(chosen), len(pool), base.mean, ema.mean)
        if check_convergence(report.base_history(), config.patience, config.min_delta):
            rr.converged = True
            report.convergence_round = r
        if on_round:
            on_round(rr)
        if rr.converged:
            break
    report.final_policy = ps
    return report


# ---------------------------------------------------------------------------
# ablation harnesses

STUDIES = ("components", "rollouts", "selection", "pools", "selector_inputs")

COMPONENT_ROWS = (
    ("baseline", dict(evolve=False, m_aug=False, e_aug=False, use_selector=False)),
    ("evolve", dict(evolve=True, m_aug=False, e_aug=False, use_selector=False)),
    ("evolve+m_aug", dict(evolve=True, m_aug=True, e_aug=False, use_selector=False)),
    ("evolve+e_aug", dict(evolve=True, m_aug=False, e_aug=True, use_selector=False)),
    ("evolve+m_aug+e_aug", dict(evolve=True, m_aug=True, e_aug=True, use_selector=False)),
    ("evolve+m_aug+e_aug+selector", dict(evolve=True, m_aug=True, e_aug=True, use_selector=True)),
)
ROLLOUT_BUDGETS = (10, 20, 50, 100)
POOL_COMBOS = ("P1+P2", "P3+P4", "P1+P2+P3+P4", "P1+P2+P4", "P1+P3+P4", "P1+P2+P5")
SELECTOR_SHOTS = (1, 2, 4, 8)

_NO_STOP = 10**9


class StageCache:
    """Initial policy and selector depend only on (master_seed, shots, ...); share them across rows."""

    def __init__(self):
        self.policies: dict = {}
        self.selectors: dict = {}

    def policy(self, cfg: ExperimentConfig) -> ParamSet:
        key = (cfg.master_seed, cfg.shots, cfg.expert_aug, cfg.delta, cfg.base_steps, cfg.tau)
        if key not in self.policies:
            suite = sim.TaskSuite(cfg.master_seed)
            self.policies[key] = train_initial_policy(cfg, expert_demos(cfg, suite))
        return self.policies[key]

    def selector(self, cfg: ExperimentConfig) -> ParamSet:
        key = (cfg.master_seed, cfg.shots, cfg.expert_aug, cfg.delta, cfg.sequence_only_selector, cfg.selector_epochs)
        if key not in self.selectors:
            suite = sim.TaskSuite(cfg.master_seed)
            self.selectors[key] = train_selector_for(cfg, expert_demos(cfg, suite))
        return self.selectors[key]

    def run(self, cfg: ExperimentConfig) -> EvolutionReport:
        selector = self.selector(cfg) if cfg.use_selector and cfg.max_rounds > 0 else None
        return run_seil(cfg, selector_params=selector, initial_policy=self.policy(cfg))


def _sr(report: EvolutionReport, r: int) -> Optional[float]:
    return report.rounds[r].base.mean if r < len(report.rounds) else None


def run_ablation(study: str, config: ExperimentConfig, cache: Optional[StageCache] = None) -> list[dict]:
    """One row per configuration of the requested study."""
    if study not in STUDIES:
        raise ValueError(f"unknown study {study!r}; valid studies: {', '.join(STUDIES)}")
    cache = cache or StageCache()
    rows = []
    if study == "components":
        for name, flags in COMPONENT_ROWS:
            flags = dict(flags)
            evolve = flags.pop("evolve")
            cfg = dataclasses.replace(config, max_rounds=4 if evolve else 0, patience=_NO_STOP, **flags)
            rep = cache.run(cfg)
            sr0 = _sr(rep, 0)
            rows.append(dict(row=name, SR0=sr0, SR1=_sr(rep, 1) if evolve else sr0, SR4=_sr(rep, 4) if evolve else sr0,
                             EMA_SR4=rep.rounds[-1].ema.mean))
    elif study == "rollouts":
        for R in ROLLOUT_BUDGETS:
            cfg = dataclasses.replace(config, rollouts=R, m_aug=False, e_aug=True, use_selector=False,
                                      select_k=min(config.select_k, 2 * R))
            rep = cache.run(cfg)
            row = dict(rollouts=R, baseline=_sr(rep, 0))
            for r in range(1, config.max_rounds + 1):
                row[f"round{r}"] = _sr(rep, r)
            rows.append(row)
    elif study == "selection":
        for scheme in sel.SCHEMES:
            cfg = dataclasses.replace(config, rollouts=50, select_k=20, m_aug=True, use_selector=True,
                                      scheme=scheme, max_rounds=1, patience=_NO_STOP)
            rep = cache.run(cfg)
            rows.append(dict(scheme=scheme, baseline=_sr(rep, 0), SR=_sr(rep, 1), EMA_SR=rep.rounds[-1].ema.mean,
                             selected=rep.rounds[-1].selected))
    elif study == "pools":
        for combo in POOL_COMBOS:
            cfg = dataclasses.replace(config, pool_filter=combo.split("+"), use_selector=False,
                                      max_rounds=1, patience=_NO_STOP)
            rep = cache.run(cfg)
            rows.append(dict(pools=combo, demos=rep.rounds[-1].recorded, baseline=_sr(rep, 0),
                             base_SR=_sr(rep, 1), ema_SR=rep.rounds[-1].ema.mean))
    else:
        suite = sim.TaskSuite(config.master_seed)
        for shots in SELECTOR_SHOTS:
            row = dict(shots=shots)
            for label, seq_only in (("sequence", True), ("img_sequence", False)):
                cfg = dataclasses.replace(config, shots=shots, sequence_only_selector=seq_only)
                held = holdout_demos(cfg, suite)
                row[label] = sel.accuracy(cache.selector(cfg), held, cfg.selector_spec)
            rows.append(row)
    return rows
