"""Deterministic 2-D tabletop pick-and-place world.

Four blocks, two drop zones, one end effector (EE) with a binary gripper.
A task asks for one block to end up, released, inside one zone; with 4
blocks and 2 zones there are 8 tasks.  Dynamics are purely kinematic and
every function here is pure, so a trajectory is fully determined by its
initial state and action sequence.

Coordinates live in the unit square.  Observations are 20-vectors::

    [ee_x, ee_y, grip_closed, holding, b0x, b0y, ..., b3x, b3y, onehot(task) x 8]
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .rng import EVAL_ROUND, TAG_EVAL, SplitMix64, derive_seed, sm64

HORIZON = 80
MAX_STEP = 0.05
GRASP_RADIUS = 0.03
RELEASE_RADIUS = 0.03
SUCCESS_EPS = 0.08
EXPERT_NOISE = 0.2
EXPERT_SPEED = 0.5
EXPERT_GAIN = 0.25
GRIP_RAMP = 10.0
AUG_CLIP = (0.05, 0.95)
RASTER = 16

N_BLOCKS = 4
EE_START = (0.5, 0.1)
CANONICAL_BLOCKS = ((0.3, 0.3), (0.5, 0.3), (0.7, 0.3), (0.5, 0.5))
ZONES = ((0.2, 0.8), (0.8, 0.8))
ZONE_NAMES = ("A", "B")
ZONE_CHANNEL = (0, 2)
ZONE_TINT = 0.3
BLOCK_COLORS = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0), (1.0, 1.0, 0.0))

N_TASKS = N_BLOCKS * len(ZONES)
OBS_DIM = 4 + 2 * N_BLOCKS + N_TASKS
ACT_DIM = 3

Policy = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Task:
    task_id: int
    target_block: int
    target_zone: int
    name: str


def make_tasks() -> list[Task]:
    tasks = []
    for b in range(N_BLOCKS):
        for z in range(len(ZONES)):
            tid = b * len(ZONES) + z
            tasks.append(Task(tid, b, z, f"block{b}-to-zone{ZONE_NAMES[z]}"))
    return tasks


@dataclass(frozen=True)
class SimState:
    ee_pos: tuple[float, float]
    grip_closed: bool
    held_block: Optional[int]
    block_pos: tuple[tuple[float, float], ...]
    step_count: int = 0


@dataclass(frozen=True)
class EnvAugConfig:
    enabled: bool = False
    delta: float = 0.05

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")


@dataclass
class Trajectory:
    """A recorded episode.  ``observations[t]`` is seen before ``actions[t]``."""

    task_id: int
    env_seed: int
    init_state: SimState
    observations: np.ndarray
    actions: np.ndarray
    first_frame: np.ndarray
    success: bool
    source: str = "expert"
    round: int = 0
    env_augmented: bool = False
    rollout_idx: int = 0

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def demo_id(self) -> str:
        return f"{self.source}-r{self.round}-t{self.task_id}-i{self.rollout_idx}"

    @property
    def order_key(self) -> tuple:
        return (self.source, self.round, self.task_id, self.rollout_idx)


@dataclass
class TaskSuite:
    """Task definitions plus the fixed evaluation seeds of one experiment."""

    master_seed: int
    tasks: list[Task] = field(default_factory=make_tasks)

    def __len__(self) -> int:
        return len(self.tasks)

    def eval_seed(self, task_id: int, idx: int) -> int:
        return derive_seed(self.master_seed, EVAL_ROUND, TAG_EVAL, task_id, idx)


def _clip(v: float, lo: float, hi: float) -> float:
    return lo if v < lo else hi if v > hi else v


def _dist(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def perturb_position(pos: tuple[float, float, float], rng: SplitMix64, delta: float) -> tuple[float, float, float]:
    """Offset x and y by independent uniform draws in [-delta, delta]; z is returned untouched."""
    x, y, z = pos
    x = _clip(x + rng.symmetric(delta), *AUG_CLIP)
    y = _clip(y + rng.symmetric(delta), *AUG_CLIP)
    return (x, y, z)


def reset_with_aug(task: Task, env_seed: int, aug: EnvAugConfig) -> SimState:
    blocks = CANONICAL_BLOCKS
    if aug.enabled:
        rng = SplitMix64(env_seed)
        blocks = tuple(perturb_position((x, y, 0.0), rng, aug.delta)[:2] for x, y in CANONICAL_BLOCKS)
    return SimState(ee_pos=EE_START, grip_closed=False, held_block=None, block_pos=tuple(blocks))


def clamp_action(action) -> np.ndarray:
    a = np.asarray(action, dtype=np.float64).reshape(ACT_DIM)
    return np.clip(a, -1.0, 1.0).astype(np.float32)


def step(state: SimState, action) -> SimState:
    """Advance one step.  The gripper command acts at the current EE position, then the EE moves."""
    if state.step_count >= HORIZON:
        raise ValueError("episode already at horizon")
    dx, dy, g = (float(v) for v in clamp_action(action))
    grip, held = state.grip_closed, state.held_block
    if g > 0.5:
        # closing with no free block in reach is a failed grasp: the gripper stays as it was
        if held is None:
            best = None
            for i, p in enumerate(state.block_pos):
                d = _dist(p, state.ee_pos)
                if d <= GRASP_RADIUS and (best is None or d < best[0]):
                    best = (d, i)
            if best is not None:
                grip, held = True, best[1]
    elif g < -0.5:
        grip, held = False, None

    ee = (_clip(state.ee_pos[0] + MAX_STEP * dx, 0.0, 1.0), _clip(state.ee_pos[1] + MAX_STEP * dy, 0.0, 1.0))
    blocks = state.block_pos
    if held is not None:
        blocks = blocks[:held] + (ee,) + blocks[held + 1:]
    return SimState(ee, grip, held, blocks, state.step_count + 1)


def is_success(state: SimState, task: Task) -> bool:
    if state.held_block is not None:
        return False
    return _dist(state.block_pos[task.target_block], ZONES[task.target_zone]) <= SUCCESS_EPS


def observe(state: SimState, task_id: int) -> np.ndarray:
    obs = np.zeros(OBS_DIM, dtype=np.float32)
    obs[0], obs[1] = state.ee_pos
    obs[2] = 1.0 if state.grip_closed else 0.0
    obs[3] = 1.0 if state.held_block is not None else 0.0
    obs[4:4 + 2 * N_BLOCKS] = [c for p in state.block_pos for c in p]
    obs[4 + 2 * N_BLOCKS + task_id] = 1.0
    return obs


def _cell(v: float) -> int:
    return min(max(int(math.floor(RASTER * v)), 0), RASTER - 1)


def render_frame(state: SimState) -> np.ndarray:
    """16x16x3 raster indexed ``frame[y_cell, x_cell, channel]``."""
    frame = np.zeros((RASTER, RASTER, 3), dtype=np.float32)
    for (zx, zy), ch in zip(ZONES, ZONE_CHANNEL):
        cx, cy = round(RASTER * zx), round(RASTER * zy)
        for iy in (cy - 1, cy):
            for ix in (cx - 1, cx):
                frame[min(max(iy, 0), RASTER - 1), min(max(ix, 0), RASTER - 1), ch] = ZONE_TINT
    for (bx, by), color in zip(state.block_pos, BLOCK_COLORS):
        frame[_cell(by), _cell(bx)] = color
    frame[_cell(state.ee_pos[1]), _cell(state.ee_pos[0])] = 1.0
    return frame


def scripted_expert_action(state: SimState, task: Task, rng: SplitMix64) -> np.ndarray:
    """Waypoint controller: go to the target block, close, carry to the zone, open.

    Motion is proportional (gain EXPERT_GAIN per step, saturated at
    EXPERT_SPEED) plus uniform noise of +-EXPERT_NOISE on dx and dy; two
    draws are consumed per call.  Outside the grasp/release radius the grip
    channel ramps linearly with distance inside the hold band, so its target
    is a smooth function of the observation instead of a one-step spike.
    """
    nx, ny = rng.symmetric(EXPERT_NOISE), rng.symmetric(EXPERT_NOISE)
    ee = state.ee_pos
    if state.held_block == task.target_block:
        target = ZONES[task.target_zone]
        d = _dist(ee, target)
        g = -1.0 if d <= RELEASE_RADIUS else _clip(-0.5 + GRIP_RAMP * (d - RELEASE_RADIUS), -0.5, 1.0)
    elif state.held_block is not None:
        return clamp_action((nx, ny, -1.0))
    else:
        target = state.block_pos[task.target_block]
        d = _dist(ee, target)
        g = 1.0 if d <= GRASP_RADIUS else _clip(0.5 - GRIP_RAMP * (d - GRASP_RADIUS), -1.0, 0.5)
    k = EXPERT_GAIN / MAX_STEP
    dx = _clip(k * (target[0] - ee[0]), -EXPERT_SPEED, EXPERT_SPEED) + nx
    dy = _clip(k * (target[1] - ee[1]), -EXPERT_SPEED, EXPERT_SPEED) + ny
    return clamp_action((dx, dy, g))


def state_from_obs(obs: np.ndarray) -> tuple[SimState, int]:
    """Rebuild (approximately, at float32 precision) the state and task id from an observation."""
    ee = (float(obs[0]), float(obs[1]))
    blocks = tuple((float(obs[4 + 2 * i]), float(obs[5 + 2 * i])) for i in range(N_BLOCKS))
    held = None
    if obs[3] > 0.5:
        held = min(range(N_BLOCKS), key=lambda i: _dist(blocks[i], ee))
    task_id = int(np.argmax(obs[4 + 2 * N_BLOCKS:]))
    return SimState(ee, bool(obs[2] > 0.5), held, blocks), task_id


class ExpertPolicy:
    """Scripted expert as an observation -> action callable with its own noise stream."""

    def __init__(self, seed: int, tasks: Optional[list[Task]] = None):
        self.rng = SplitMix64(seed)
        self.tasks = tasks or make_tasks()

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        state, task_id = state_from_obs(obs)
        return scripted_expert_action(state, self.tasks[task_id], self.rng)


def expert_noise_seed(env_seed: int) -> int:
    return sm64(env_seed ^ 0x5EED)


def zero_policy(obs: np.ndarray) -> np.ndarray:
    return np.zeros(ACT_DIM, dtype=np.float32)


def rollout(
    policy: Policy,
    task: Task,
    env_seed: int,
    aug: EnvAugConfig,
    source: str = "base",
    round_idx: int = 0,
    rollout_idx: int = 0,
) -> Trajectory:
    state = reset_with_aug(task, env_seed, aug)
    init = state
    frame = render_frame(state)
    obs_list, act_list = [], []
    success = False
    while state.step_count < HORIZON:
        obs = observe(state, task.task_id)
        act = clamp_action(policy(obs))
        obs_list.append(obs)
        act_list.append(act)
        state = step(state, act)
        if is_success(state, task):
            success = True
            break
    return Trajectory(
        task_id=task.task_id,
        env_seed=env_seed,
        init_state=init,
        observations=np.stack(obs_list),
        actions=np.stack(act_list),
        first_frame=frame,
        success=success,
        source=source,
        round=round_idx,
        env_augmented=aug.enabled,
        rollout_idx=rollout_idx,
    )


def expert_rollout(task: Task, env_seed: int, aug: EnvAugConfig, **kw) -> Trajectory:
    kw.setdefault("source", "expert")
    return rollout(ExpertPolicy(expert_noise_seed(env_seed)), task, env_seed, aug, **kw)


def replay_check(traj: Trajectory, tasks: Optional[list[Task]] = None) -> bool:
    """Re-simulate ``traj`` from its initial state and compare bit-for-bit."""
    task = (tasks or make_tasks())[traj.task_id]
    if len(traj.observations) != len(traj.actions) or len(traj.actions) == 0:
        return False
    if not np.array_equal(render_frame(traj.init_state), traj.first_frame):
        return False
    state = traj.init_state
    for t, (obs, act) in enumerate(zip(traj.observations, traj.actions)):
        if not np.array_equal(observe(state, traj.task_id), obs):
            return False
        state = step(state, act)
        done = is_success(state, task)
        if done and t != len(traj.actions) - 1:
            return False
    return is_success(state, task) == traj.success


def with_state(state: SimState, **changes) -> SimState:
    return replace(state, **changes)
