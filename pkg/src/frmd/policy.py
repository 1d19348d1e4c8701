"""Rollout-facing policy wrappers.

A policy exposes sample(obs_window, bc_pos, bc_vel, rng) -> (horizon, 2)
workspace position targets.  The diffusion wrappers handle normalization in
both directions and record the decoded position at the boundary time so
rollouts can assert plan/measurement continuity.
"""

from __future__ import annotations

import numpy as np

from .consistency import StudentModel, sample_student
from .diffusion import TeacherModel, sample_teacher
from .mp import BoundaryState
from .tasks import Demonstration

__all__ = ["TeacherPolicy", "StudentPolicy", "ExpertReplayPolicy", "HoldPolicy"]


def _boundary_residual(model: TeacherModel, bc_pos_raw) -> float | None:
    """Distance between the plan's decoded boundary-time position and the
    measured position the plan was conditioned on (MP head only)."""
    if model.head != "mp" or model.last_boundary is None:
        return None
    start = model.normalizer.denorm_pos(model.last_boundary[0])
    return float(np.abs(start - np.asarray(bc_pos_raw, dtype=float)).max())


class TeacherPolicy:
    """Multi-step PF-ODE sampling at every replanning instant."""

    def __init__(self, model: TeacherModel, steps: int = 10, heun: bool | None = None) -> None:
        self.model = model
        self.steps = steps
        self.heun = heun
        self.last_boundary_residual: float | None = None

    def sample(self, obs_window, bc_pos, bc_vel, rng) -> np.ndarray:
        norm = self.model.normalizer
        obs_n = norm.norm_obs(obs_window)
        bc = BoundaryState(0.0, norm.norm_pos(bc_pos), norm.norm_vel(bc_vel))
        traj = sample_teacher(self.model, obs_n, bc, self.steps, rng, heun=self.heun)
        self.last_boundary_residual = _boundary_residual(self.model, bc_pos)
        return norm.denorm_pos(traj.positions)


class StudentPolicy:
    """Single consistency evaluation at every replanning instant."""

    def __init__(self, student: StudentModel) -> None:
        self.student = student
        self.last_boundary_residual: float | None = None

    def sample(self, obs_window, bc_pos, bc_vel, rng) -> np.ndarray:
        model = self.student.deployed
        norm = model.normalizer
        obs_n = norm.norm_obs(obs_window)
        bc = BoundaryState(0.0, norm.norm_pos(bc_pos), norm.norm_vel(bc_vel))
        traj = sample_student(self.student, obs_n, bc, rng)
        self.last_boundary_residual = _boundary_residual(model, bc_pos)
        return norm.denorm_pos(traj.positions)


class ExpertReplayPolicy:
    """Plays back a demonstration's action sequence, horizon steps at a time."""

    def __init__(self, demo: Demonstration, horizon: int, replan_every: int) -> None:
        self.demo = demo
        self.horizon = horizon
        self.replan_every = replan_every
        self._tick = 0

    def sample(self, obs_window, bc_pos, bc_vel, rng) -> np.ndarray:
        actions = self.demo.actions
        idx = np.minimum(np.arange(self._tick + 1, self._tick + 1 + self.horizon), len(actions) - 1)
        self._tick += self.replan_every
        return actions[idx]


class HoldPolicy:
    """Commands the current position forever; the plant never moves."""

    def __init__(self, horizon: int) -> None:
        self.horizon = horizon

    def sample(self, obs_window, bc_pos, bc_vel, rng) -> np.ndarray:
        return np.tile(np.asarray(bc_pos, dtype=float), (self.horizon, 1))
