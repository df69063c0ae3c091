"""Behavior-cloning MLP policy, its training loop, and success-rate evaluation."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import microsim as sim
from .nn import MLPSpec, ParamSet, adam_step, ema_update, init_params, loss_and_grads
from .rng import SplitMix64

log = logging.getLogger(__name__)

POLICY_NET = MLPSpec((sim.OBS_DIM, 128, 128, sim.ACT_DIM), prefix="pi")
LR = 1e-3
BATCH = 64


def init_policy(seed: int) -> ParamSet:
    ps = init_params(POLICY_NET.layers(), seed)
    ps.init_adam()
    return ps


def _weights(params) -> dict:
    return params.params if isinstance(params, ParamSet) else params


class MLPPolicy:
    """Frozen observation -> action callable over a snapshot of the weights."""

    def __init__(self, params):
        p = _weights(params)
        n = len(POLICY_NET.sizes) - 1
        self.layers = [(p[f"pi.{i}.W"].copy(), p[f"pi.{i}.b"].copy()) for i in range(n)]

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        h = np.asarray(obs, dtype=np.float32)
        last = len(self.layers) - 1
        for i, (W, b) in enumerate(self.layers):
            h = h @ W + b
            if i < last:
                h = np.maximum(h, 0)
        return np.clip(h, -1.0, 1.0)


def predict(params, obs: np.ndarray) -> np.ndarray:
    return MLPPolicy(params)(obs)


def demo_arrays(demos: Sequence[sim.Trajectory]) -> tuple[np.ndarray, np.ndarray]:
    X = np.concatenate([d.observations for d in demos]).astype(np.float32)
    Y = np.concatenate([d.actions for d in demos]).astype(np.float32)
    return X, Y


def bc_loss(params, demos) -> float:
    X, Y = demo_arrays(demos)
    out, _ = POLICY_NET.forward(_weights(params), X)
    return float(np.mean(np.square(out - Y, dtype=np.float64)))


def train_bc(
    ps: ParamSet,
    demos: Sequence[sim.Trajectory],
    steps: int,
    tau: float,
    seed: int,
    lr: float = LR,
    batch_size: int = BATCH,
    on_step: Optional[Callable[[ParamSet], None]] = None,
) -> ParamSet:
    """Run exactly ``steps`` Adam updates on the pooled (obs, action) pairs.

    The EMA shadow is updated after every optimizer step and created from the
    current weights if absent.  Mini-batches come from a per-epoch shuffle
    driven by ``seed``; the last partial batch of an epoch is kept.
    """
    if not demos:
        raise ValueError("train_bc needs at least one demonstration")
    if ps.adam_m is None:
        ps.init_adam()
    if ps.ema is None:
        ps.init_ema()
    X, Y = demo_arrays(demos)
    n = len(X)
    rng = SplitMix64(seed)
    done = 0
    epoch = 0
    while done < steps:
        order = np.asarray(rng.permutation(n))
        for start in range(0, n, batch_size):
            if done >= steps:
                break
            idx = order[start:start + batch_size]
            _, grads = loss_and_grads(POLICY_NET, ps.params, (X[idx], Y[idx]), "mse", batch_id=(epoch, start))
            adam_step(ps, grads, lr)
            ema_update(ps, tau)
            done += 1
            if on_step is not None:
                on_step(ps)
        epoch += 1
    return ps


@dataclass
class SRReport:
    model: str
    round: int
    episodes: int
    successes: list[int] = field(default_factory=list)

    @property
    def per_task(self) -> list[float]:
        return [s / self.episodes for s in self.successes]

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_task)) if self.successes else 0.0


def run_rollouts(jobs: Sequence[tuple], threads: int = 1) -> list[sim.Trajectory]:
    """Execute ``sim.rollout(*job)`` for every job; output order equals job order."""
    if threads <= 1 or len(jobs) < 2:
        return [sim.rollout(*job) for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda job: sim.rollout(*job), jobs))


def evaluate(
    policy,
    suite: sim.TaskSuite,
    episodes: int,
    delta: float = 0.05,
    model: str = "base",
    round_idx: int = 0,
    threads: int = 1,
) -> SRReport:
    """Success rate over ``episodes`` perturbed-start rollouts per task on the suite's fixed seeds.

    ``policy`` is either a weight dict / ParamSet or any observation -> action callable.
    """
    if episodes < 1:
        raise ValueError("need at least one evaluation episode")
    if not callable(policy):
        policy = MLPPolicy(policy)
    aug = sim.EnvAugConfig(True, delta)
    jobs = [
        (policy, task, suite.eval_seed(task.task_id, i), aug, model, round_idx, i)
        for task in suite.tasks
        for i in range(episodes)
    ]
    trajs = run_rollouts(jobs, threads)
    counts = [0] * len(suite)
    for tr in trajs:
        counts[tr.task_id] += int(tr.success)
    return SRReport(model, round_idx, episodes, counts)


def evaluate_expert(suite: sim.TaskSuite, episodes: int, delta: float = 0.05) -> SRReport:
    aug = sim.EnvAugConfig(True, delta)
    counts = [0] * len(suite)
    for task in suite.tasks:
        for i in range(episodes):
            tr = sim.expert_rollout(task, suite.eval_seed(task.task_id, i), aug)
            counts[task.task_id] += int(tr.success)
    return SRReport("expert", 0, episodes, counts)
