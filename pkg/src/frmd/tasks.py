"""Synthetic 2-D manipulation-style tasks, analytic experts, and rollouts.

Three task kinds stand in for easy/medium/hard benchmark tiers:

- reach: move from start to goal.
- via_point: pass a waypoint (given in the observation) before the goal.
- bimodal_via: two mirror-symmetric waypoints, neither revealed in the
  observation; the data contains both branches, so a policy must commit to
  one of them from noise.

Experts are minimum-jerk quintics sampled at the control rate.  Rollouts are
receding-horizon: a fresh plan from the measured boundary state every
``replan_every`` ticks, executed through a first-order tracking plant.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EnvConfig",
    "TaskInstance",
    "Demonstration",
    "DatasetWindow",
    "EpisodeResult",
    "OBS_DIM",
    "TASK_KINDS",
    "make_task",
    "expert_demo",
    "slice_dataset",
    "rollout",
]

OBS_DIM = 7  # agent xy, goal xy, via xy (or zeros), via-visited flag
TASK_KINDS = ("reach", "via_point", "bimodal_via")


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 0.05
    max_steps: int = 96
    horizon: int = 12
    obs_history: int = 3
    replan_every: int = 8
    success_radius: float = 0.05
    via_radius: float = 0.08
    plant_gain: float = 0.8
    min_separation: float = 0.5
    sample_range: float = 0.8  # start/goal drawn from [-r, r]^2
    hold_steps: int = 20
    bimodal_offset: float = 0.45

    def __post_init__(self) -> None:
        if self.replan_every > self.horizon:
            raise ValueError("replan_every must not exceed the planning horizon")


@dataclass(frozen=True)
class TaskInstance:
    kind: str
    start: np.ndarray
    goal: np.ndarray
    via: np.ndarray | None  # (2,) for via_point, (2, 2) for bimodal_via
    success_radius: float = 0.05
    via_radius: float = 0.08
    max_steps: int = 96
    seed: int = 0


@dataclass
class Demonstration:
    task: TaskInstance
    obs_seq: np.ndarray  # (length, OBS_DIM)
    actions: np.ndarray  # (length, 2) per-step target positions
    dt: float = 0.05
    seed: int = 0

    @property
    def length(self) -> int:
        return len(self.actions)


@dataclass
class DatasetWindow:
    obs_window: np.ndarray  # (m, OBS_DIM)
    action_window: np.ndarray  # (n, 2)
    bc_pos: np.ndarray  # (2,) expert position at the prediction instant
    bc_vel: np.ndarray  # (2,) finite-difference velocity there


@dataclass
class EpisodeResult:
    trace: np.ndarray  # (steps+1, 2) executed positions, starting pose first
    commanded: np.ndarray  # (steps, 2)
    success: bool
    steps_used: int
    inference_calls: int
    per_call_latency_ms: list[float]
    bc_residual: float = float("nan")  # max |plan(t_b) - measured| for MP policies


def _sample_point(rng: np.random.Generator, r: float) -> np.ndarray:
    return rng.uniform(-r, r, 2)


def make_task(kind: str, seed: int, env: EnvConfig = EnvConfig()) -> TaskInstance:
    """Deterministic task generation with pairwise separation >= min_separation."""
    if kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {kind!r}; expected one of {TASK_KINDS}")
    rng = np.random.default_rng(seed)
    sep = env.min_separation
    for _ in range(10_000):
        start = _sample_point(rng, env.sample_range)
        goal = _sample_point(rng, env.sample_range)
        if np.linalg.norm(goal - start) < sep:
            continue
        if kind == "reach":
            via = None
        elif kind == "via_point":
            via = _sample_point(rng, env.sample_range)
            if min(np.linalg.norm(via - start), np.linalg.norm(via - goal)) < sep:
                continue
        else:  # bimodal_via: mirror pair across the start-goal axis
            direction = goal - start
            normal = np.array([-direction[1], direction[0]]) / np.linalg.norm(direction)
            mid = (start + goal) / 2.0
            via = np.stack([mid + env.bimodal_offset * normal, mid - env.bimodal_offset * normal])
            if np.abs(via).max() > 0.95:
                continue
        return TaskInstance(
            kind,
            start,
            goal,
            via,
            success_radius=env.success_radius,
            via_radius=env.via_radius,
            max_steps=env.max_steps,
            seed=seed,
        )
    raise RuntimeError(f"could not place task {kind!r} for seed {seed}")


def _minjerk(p0: np.ndarray, p1: np.ndarray, n_steps: int) -> np.ndarray:
    """Quintic blend from p0 to p1 over n_steps samples, rest-to-rest."""
    s = np.linspace(0.0, 1.0, n_steps)
    blend = 10.0 * s**3 - 15.0 * s**4 + 6.0 * s**5
    return p0[None, :] + (p1 - p0)[None, :] * blend[:, None]


def _task_waypoints(task: TaskInstance, rng: np.random.Generator) -> list[np.ndarray]:
    if task.kind == "reach":
        return [task.start, task.goal]
    if task.kind == "via_point":
        return [task.start, task.via, task.goal]
    branch = int(rng.integers(0, 2))
    return [task.start, task.via[branch], task.goal]


def _observe(task: TaskInstance, pos: np.ndarray, visited: bool) -> np.ndarray:
    via_slot = task.via if task.kind == "via_point" else np.zeros(2)
    return np.concatenate([pos, task.goal, via_slot, [float(visited)]])


def _near_via(task: TaskInstance, pos: np.ndarray) -> bool:
    if task.kind == "reach":
        return False
    vias = task.via if task.via.ndim == 2 else task.via[None, :]
    return bool(np.min(np.linalg.norm(vias - pos[None, :], axis=1)) <= task.via_radius)


def expert_demo(task: TaskInstance, seed: int, env: EnvConfig = EnvConfig()) -> Demonstration:
    """Minimum-jerk expert path sampled at the control rate.

    Segments stop at each waypoint (rest-to-rest quintics) and the final
    samples hold the goal pose.  On bimodal tasks the seed picks the branch.
    """
    rng = np.random.default_rng(seed)
    points = _task_waypoints(task, rng)
    move_steps = env.max_steps - env.hold_steps
    n_seg = len(points) - 1
    seg_steps = [move_steps // n_seg] * n_seg
    seg_steps[-1] += move_steps - sum(seg_steps)
    pieces = []
    for i, steps in enumerate(seg_steps):
        seg = _minjerk(points[i], points[i + 1], steps + 1)
        pieces.append(seg[:-1] if i < n_seg - 1 else seg)
    path = np.concatenate(pieces + [np.tile(points[-1], (env.hold_steps - 1, 1))])
    assert len(path) == env.max_steps

    visited = False
    obs_seq = np.empty((len(path), OBS_DIM))
    for i, pos in enumerate(path):
        visited = visited or _near_via(task, pos)
        obs_seq[i] = _observe(task, pos, visited)
    return Demonstration(task, obs_seq, path.copy(), dt=env.dt, seed=seed)


def slice_dataset(demos: list[Demonstration], n: int, m: int) -> list[DatasetWindow]:
    """Stride-1 sliding windows of m observations and the n following actions.

    The boundary state is the expert's position at the last observed step and
    its backward finite-difference velocity; demos shorter than n + m are
    skipped with one counted warning.
    """
    windows: list[DatasetWindow] = []
    skipped = 0
    for demo in demos:
        if demo.length < n + m:
            skipped += 1
            continue
        dt = demo.dt
        for j in range(demo.length - n - m + 1):
            anchor = j + m - 1
            prev = max(anchor - 1, 0)
            vel = (demo.actions[anchor] - demo.actions[prev]) / dt if anchor > 0 else np.zeros(2)
            windows.append(
                DatasetWindow(
                    demo.obs_seq[j : j + m].copy(),
                    demo.actions[j + m : j + m + n].copy(),
                    demo.actions[anchor].copy(),
                    vel,
                )
            )
    if skipped:
        warnings.warn(f"skipped {skipped} demonstrations shorter than n + m", stacklevel=2)
    return windows


def _is_success(task: TaskInstance, pos: np.ndarray, visited: bool) -> bool:
    at_goal = np.linalg.norm(pos - task.goal) <= task.success_radius
    needs_via = task.kind != "reach"
    return at_goal and (visited or not needs_via)


def rollout(
    policy,
    task: TaskInstance,
    rng: np.random.Generator,
    env: EnvConfig = EnvConfig(),
    replan_every: int | None = None,
) -> EpisodeResult:
    """Receding-horizon episode with a first-order position-tracking plant.

    ``policy`` exposes sample(obs_window, bc_pos, bc_vel, rng) -> (horizon, 2)
    workspace position targets.  Terminates on success or after max_steps.
    """
    replan = env.replan_every if replan_every is None else replan_every
    if replan > env.horizon:
        raise ValueError("replan_every must not exceed the planning horizon")
    pos = task.start.astype(float).copy()
    vel = np.zeros(2)
    visited = _near_via(task, pos)
    history = [_observe(task, pos, visited)] * env.obs_history

    trace = [pos.copy()]
    commanded = []
    latencies: list[float] = []
    calls = 0
    plan = None
    plan_idx = 0
    success = False
    steps_used = 0
    bc_residual = float("nan")

    for step in range(task.max_steps):
        if step % replan == 0:
            obs_window = np.stack(history[-env.obs_history :])
            t0 = time.perf_counter()
            plan = np.asarray(policy.sample(obs_window, pos, vel, rng), dtype=float)
            latencies.append((time.perf_counter() - t0) * 1e3)
            calls += 1
            if plan.shape != (env.horizon, 2):
                raise RuntimeError(f"policy returned plan of shape {plan.shape}, expected {(env.horizon, 2)}")
            plan_idx = 0
            res = getattr(policy, "last_boundary_residual", None)
            if res is not None:
                bc_residual = res if np.isnan(bc_residual) else max(bc_residual, res)
        cmd = plan[plan_idx]
        plan_idx += 1
        new_pos = pos + env.plant_gain * (cmd - pos)
        vel = (new_pos - pos) / env.dt
        pos = new_pos
        visited = visited or _near_via(task, pos)
        trace.append(pos.copy())
        commanded.append(cmd.copy())
        history.append(_observe(task, pos, visited))
        steps_used = step + 1
        if _is_success(task, pos, visited):
            success = True
            break

    return EpisodeResult(
        np.array(trace),
        np.array(commanded),
        success,
        steps_used,
        calls,
        latencies,
        bc_residual,
    )
