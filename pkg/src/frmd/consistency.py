"""One-step student trained by consistency distillation.

The student learns the solution map of the teacher's probability-flow ODE:
its output at a noisier level must match a frozen target network's output at
the level the teacher's solver steps down to.  A skip parametrization pins
the map to the identity at zero noise, and the target network trails the
online network by an exponential moving average.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nets
from .diffusion import NoiseSchedule, TeacherModel, WindowArrays, ode_step
from .errors import ConfigError, TrainingError
from .mp import BoundaryState, Trajectory
from .nets import OptimizerHyper

__all__ = [
    "ConsistencyConfig",
    "StudentModel",
    "c_skip",
    "c_out",
    "consistency_f",
    "distill_step",
    "ema_update",
    "distill",
    "sample_student",
]


@dataclass(frozen=True)
class ConsistencyConfig:
    """Distillation hyperparameters.

    k: how many schedule levels the teacher solver spans per target.
    mu: EMA rate of the target network.
    gamma_d / beta: skip-parametrization balance and scaling values.
    """

    k: int = 1
    mu: float = 0.95
    gamma_d: float = 0.5
    beta: float = 1.0
    metric: str = "squared_l2"
    lambda_weight: str = "uniform"
    steps: int = 3000
    batch_size: int = 128
    lr: float = 1e-4
    weight_decay: float = 1e-6
    warmup_steps: int = 500
    deploy: str = "target"

    def validate(self, schedule: NoiseSchedule) -> None:
        if not 0.0 <= self.mu < 1.0:
            raise ConfigError(f"mu must be in [0, 1), got {self.mu}")
        if self.k < 1 or self.k >= schedule.n_levels:
            raise ConfigError(f"k must be in [1, n_levels), got {self.k}")
        if self.gamma_d <= 0.0 or self.beta <= 0.0:
            raise ConfigError("gamma_d and beta must be positive")
        if self.metric != "squared_l2":
            raise ConfigError(f"unsupported metric {self.metric!r}")
        if self.lambda_weight != "uniform":
            raise ConfigError(f"unsupported weighting {self.lambda_weight!r}")
        if self.deploy not in ("target", "online"):
            raise ConfigError(f"deploy must be 'target' or 'online', got {self.deploy!r}")


def c_skip(t: float | np.ndarray, cfg: ConsistencyConfig) -> float | np.ndarray:
    return cfg.gamma_d**2 / (cfg.beta**2 * np.square(t) + cfg.gamma_d**2)


def c_out(t: float | np.ndarray, cfg: ConsistencyConfig) -> float | np.ndarray:
    return cfg.beta * t / np.sqrt(cfg.beta**2 * np.square(t) + cfg.gamma_d**2)


class StudentModel:
    """Online/target denoiser pair sharing the teacher's decoder and schedule."""

    def __init__(self, teacher: TeacherModel, config: ConsistencyConfig) -> None:
        config.validate(teacher.schedule)
        self.config = config
        self.online = TeacherModel(
            teacher.net.copy(),
            teacher.tables,
            teacher.schedule,
            teacher.normalizer,
            teacher.action_times,
            head=teacher.head,
            mp_head_scale=teacher.mp_head_scale,
        )
        self.target = TeacherModel(
            teacher.net.copy(),
            teacher.tables,
            teacher.schedule,
            teacher.normalizer,
            teacher.action_times,
            head=teacher.head,
            mp_head_scale=teacher.mp_head_scale,
        )

    @property
    def schedule(self) -> NoiseSchedule:
        return self.online.schedule

    @property
    def deployed(self) -> TeacherModel:
        return self.target if self.config.deploy == "target" else self.online

    def branch(self, which: str) -> TeacherModel:
        if which == "online":
            return self.online
        if which == "target":
            return self.target
        raise ValueError(f"unknown branch {which!r}")


def consistency_f(
    student: StudentModel,
    noisy_traj: np.ndarray,
    obs: np.ndarray,
    t: float,
    bc: BoundaryState,
    which: str = "target",
) -> np.ndarray:
    """Skip-weighted map to the clean trajectory; exactly identity at t = 0."""
    noisy_traj = np.asarray(noisy_traj, dtype=float)
    if t == 0.0:
        return noisy_traj.copy()
    model = student.branch(which)
    denoised = model.denoise(noisy_traj, np.asarray(obs, dtype=float), t, bc)
    return c_skip(t, student.config) * noisy_traj + c_out(t, student.config) * denoised


def _consistency_batch(
    student: StudentModel,
    which: str,
    noisy: np.ndarray,
    obs: np.ndarray,
    t: float,
    bc_pos: np.ndarray,
    bc_vel: np.ndarray,
) -> tuple[np.ndarray, nets.Tape]:
    model = student.branch(which)
    denoised, tape, _ = model.denoise_batch(noisy, obs, t, bc_pos, bc_vel)
    return c_skip(t, student.config) * noisy + c_out(t, student.config) * denoised, tape


def distill_step(
    teacher: TeacherModel,
    student: StudentModel,
    batch: WindowArrays,
    rng: np.random.Generator,
) -> tuple[float, dict[str, np.ndarray]]:
    """One distillation loss evaluation with gradients for the online net.

    Draws a random adjacent-level pair (k levels apart), noises the clean
    actions to the higher level, steps the teacher's ODE solver down to the
    lower one, and penalizes the squared distance between the online output
    at the high level and the frozen target output at the low level.  The
    target branch contributes no gradients (stop-gradient).
    """
    if teacher.schedule is not student.schedule and not np.array_equal(
        teacher.schedule.levels, student.schedule.levels
    ):
        raise ConfigError("teacher and student must share a noise schedule")
    levels = student.schedule.levels
    k = student.config.k
    n = len(batch)
    a = int(rng.integers(0, len(levels) - k))
    t_hi = levels[a]
    t_lo = levels[a + k]
    noisy_hi = batch.actions + t_hi * rng.standard_normal(batch.actions.shape)

    # teacher k-step solve toward the lower level, one level at a time
    stepped = noisy_hi
    bc_batch = _BatchBC(batch.bc_pos, batch.bc_vel)
    for j in range(k):
        stepped = ode_step(_BatchDenoiser(teacher), stepped, levels[a + j], levels[a + j + 1], batch.obs, bc_batch)

    target_out, _ = _consistency_batch(student, "target", stepped, batch.obs, t_lo, batch.bc_pos, batch.bc_vel)
    online_out, tape = _consistency_batch(student, "online", noisy_hi, batch.obs, t_hi, batch.bc_pos, batch.bc_vel)

    diff = online_out - target_out
    loss = float(np.mean(np.sum(diff**2, axis=(1, 2))))
    if not np.isfinite(loss):
        raise TrainingError("non-finite distillation loss")
    grad_f = 2.0 * diff / n
    grad_out = student.online._head_grad(c_out(t_hi, student.config) * grad_f)
    grads = nets.backward(student.online.net, tape, grad_out)
    return loss, grads


class _BatchBC:
    """Boundary container so batched arrays ride through the denoiser protocol."""

    def __init__(self, pos: np.ndarray, vel: np.ndarray) -> None:
        self.pos = pos
        self.vel = vel


class _BatchDenoiser:
    def __init__(self, model: TeacherModel) -> None:
        self.model = model

    def denoise(self, traj, obs, t, bc):
        clean, _, _ = self.model.denoise_batch(traj, obs, t, bc.pos, bc.vel)
        return clean


def ema_update(student: StudentModel, mu: float | None = None) -> None:
    """target <- mu * target + (1 - mu) * online, elementwise."""
    mu = student.config.mu if mu is None else mu
    for key, p_online in student.online.net.params.items():
        p_target = student.target.net.params[key]
        p_target *= mu
        p_target += (1.0 - mu) * p_online


def distill(
    teacher: TeacherModel,
    windows: WindowArrays,
    config: ConsistencyConfig,
    rng: np.random.Generator,
) -> tuple[StudentModel, dict]:
    """Run the full distillation loop from teacher-initialized weights."""
    student = StudentModel(teacher, config)
    hyper = OptimizerHyper(
        lr=config.lr,
        weight_decay=config.weight_decay,
        warmup_steps=config.warmup_steps,
        total_steps=config.steps,
    )
    state = nets.init_optimizer(student.online.net)
    log: list[tuple[int, float, float]] = []
    for step in range(1, config.steps + 1):
        idx = rng.integers(0, len(windows), config.batch_size)
        loss, grads = distill_step(teacher, student, windows.take(idx), rng)
        if not np.isfinite(loss):
            raise TrainingError(f"distillation diverged at step {step}")
        lr = nets.optimizer_step(student.online.net, grads, state, hyper)
        ema_update(student)
        if step % 50 == 0 or step == 1 or step == config.steps:
            log.append((step, loss, lr))
    return student, {"log": log}


def sample_student(
    student: StudentModel, obs: np.ndarray, bc: BoundaryState, rng: np.random.Generator
) -> Trajectory:
    """One-step generation: a single consistency evaluation at t_max."""
    model = student.deployed
    lay = model.net.layout
    t_max = student.schedule.t_max
    noise = rng.standard_normal((lay.traj_len, lay.dof)) * t_max
    clean = consistency_f(student, noise, obs, t_max, bc, which=student.config.deploy)
    return Trajectory(model.action_times, clean)
