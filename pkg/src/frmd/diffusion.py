"""Score-based diffusion teacher over movement-primitive weights.

The noise level doubles as the time variable (sigma(t) = t, variance
exploding), so the probability-flow ODE is d(tau)/dt = (tau - D(tau, t)) / t
with D the denoiser.  The denoiser is an MLP that maps (noisy action
sequence, observation window, noise embedding) to a weight matrix, decoded
through the movement-primitive tables so every prediction meets the boundary
condition; a raw head that emits waypoints directly is kept as the
smoothness baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nets
from .errors import ConfigError, LayoutError, TrainingError
from .mp import BasisTables, BoundaryState, Trajectory, decode_operator
from .nets import DenoiserNet, NetLayout, OptimizerHyper

__all__ = [
    "NoiseSchedule",
    "ActionNormalizer",
    "WindowArrays",
    "TeacherModel",
    "TeacherTrainConfig",
    "karras_levels",
    "add_noise",
    "denoise_F",
    "score_estimate",
    "teacher_loss",
    "ode_step",
    "sample_teacher",
    "train_teacher",
]

MP_HEAD_SCALE = 10.0


@dataclass(frozen=True)
class NoiseSchedule:
    """Strictly decreasing noise levels from t_max down to epsilon."""

    levels: np.ndarray
    epsilon: float
    t_max: float
    rho: float

    @property
    def n_levels(self) -> int:
        return len(self.levels)


def karras_levels(n: int, epsilon: float = 0.002, t_max: float = 10.0, rho: float = 7.0) -> NoiseSchedule:
    """Power-law interpolation between t_max and epsilon in 1/rho space."""
    if n < 2:
        raise ConfigError(f"need at least 2 levels, got {n}")
    if not (0.0 < epsilon < t_max):
        raise ConfigError(f"need 0 < epsilon < t_max, got {epsilon}, {t_max}")
    if rho < 1.0:
        raise ConfigError(f"rho must be >= 1, got {rho}")
    i = np.arange(n)
    inv = t_max ** (1.0 / rho) + i / (n - 1) * (epsilon ** (1.0 / rho) - t_max ** (1.0 / rho))
    levels = inv**rho
    levels[0] = t_max
    levels[-1] = epsilon
    return NoiseSchedule(levels, epsilon, t_max, rho)


def add_noise(traj: np.ndarray, t: float | np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """traj + t * standard normal; t = 0 passes the input through."""
    traj = np.asarray(traj, dtype=float)
    t = np.asarray(t, dtype=float)
    if t.ndim == 1:  # per-element level for a batched trajectory
        t = t.reshape((-1,) + (1,) * (traj.ndim - 1))
    return traj + t * rng.standard_normal(traj.shape)


@dataclass(frozen=True)
class ActionNormalizer:
    """Per-dimension affine map between workspace and model coordinates."""

    offset: np.ndarray  # (dof,)
    scale: np.ndarray  # (dof,) half-ranges, strictly positive

    @classmethod
    def fit(cls, actions: np.ndarray, min_scale: float = 1e-3) -> "ActionNormalizer":
        """Fit so the given (n, dof) action samples map into [-1, 1]."""
        actions = np.asarray(actions, dtype=float).reshape(-1, actions.shape[-1])
        lo = actions.min(axis=0)
        hi = actions.max(axis=0)
        return cls((hi + lo) / 2.0, np.maximum((hi - lo) / 2.0, min_scale))

    def norm_pos(self, p: np.ndarray) -> np.ndarray:
        return (np.asarray(p, dtype=float) - self.offset) / self.scale

    def denorm_pos(self, p: np.ndarray) -> np.ndarray:
        return np.asarray(p, dtype=float) * self.scale + self.offset

    def norm_vel(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=float) / self.scale

    def norm_obs(self, obs: np.ndarray) -> np.ndarray:
        """Normalize the leading position-valued observation slots.

        Observations are laid out as up to three position blocks (agent,
        goal, via) followed by scalar flags; each block shares the action
        normalization.
        """
        obs = np.array(obs, dtype=float)
        dof = len(self.offset)
        n_blocks = min(3, obs.shape[-1] // dof)
        for j in range(n_blocks):
            sl = slice(j * dof, (j + 1) * dof)
            obs[..., sl] = (obs[..., sl] - self.offset) / self.scale
        return obs


@dataclass
class WindowArrays:
    """Stacked, normalized training windows."""

    actions: np.ndarray  # (N, n, dof)
    obs: np.ndarray  # (N, m, obs_dim)
    bc_pos: np.ndarray  # (N, dof)
    bc_vel: np.ndarray  # (N, dof)

    def __len__(self) -> int:
        return len(self.actions)

    def take(self, idx: np.ndarray) -> "WindowArrays":
        return WindowArrays(self.actions[idx], self.obs[idx], self.bc_pos[idx], self.bc_vel[idx])


class TeacherModel:
    """Denoiser net + movement-primitive decoder + noise schedule."""

    def __init__(
        self,
        net: DenoiserNet,
        tables: BasisTables,
        schedule: NoiseSchedule,
        normalizer: ActionNormalizer,
        action_times: np.ndarray,
        head: str = "mp",
        mp_head_scale: float = MP_HEAD_SCALE,
        heun: bool = False,
    ) -> None:
        if head not in ("mp", "raw"):
            raise ConfigError(f"unknown head mode {head!r}")
        if head == "mp" and net.layout.output_dim != tables.config.dof * tables.config.n_weights:
            raise LayoutError("mp head requires output size dof * n_weights")
        if head == "raw" and net.layout.output_dim != net.layout.traj_len * net.layout.dof:
            raise LayoutError("raw head requires output size traj_len * dof")
        self.net = net
        self.tables = tables
        self.schedule = schedule
        self.normalizer = normalizer
        self.action_times = np.asarray(action_times, dtype=float)
        self.head = head
        self.mp_head_scale = mp_head_scale
        self.heun = heun
        op = decode_operator(tables, 0.0, self.action_times)
        self._pos_w = op["pos_w"]  # (n, n_weights)
        self._pos_bc = op["pos_bc"]  # (n, 2)
        op0 = decode_operator(tables, 0.0, np.array([0.0]))
        self._pos_w0 = op0["pos_w"][0]
        self._pos_bc0 = op0["pos_bc"][0]
        #: diagnostic: decoded position at t_b for the most recent MP-head
        #: denoise call (must reproduce the boundary state)
        self.last_boundary: np.ndarray | None = None

    # -- head application -------------------------------------------------

    def _apply_head(
        self, out: np.ndarray, bc_pos: np.ndarray, bc_vel: np.ndarray
    ) -> np.ndarray:
        lay = self.net.layout
        batch = out.shape[0]
        if self.head == "raw":
            return out.reshape(batch, lay.traj_len, lay.dof)
        w = out.reshape(batch, lay.dof, lay.n_weights) * self.mp_head_scale
        bc_stack = np.stack([bc_pos, bc_vel], axis=1)  # (B, 2, dof)
        self.last_boundary = np.einsum("j,bdj->bd", self._pos_w0, w) + np.einsum(
            "k,bkd->bd", self._pos_bc0, bc_stack
        )
        return np.einsum("nj,bdj->bnd", self._pos_w, w) + np.einsum(
            "nk,bkd->bnd", self._pos_bc, bc_stack
        )

    def _head_grad(self, grad_traj: np.ndarray) -> np.ndarray:
        """Pull a (B, n, dof) trajectory gradient back to the net output."""
        batch = grad_traj.shape[0]
        if self.head == "raw":
            return grad_traj.reshape(batch, -1)
        gw = np.einsum("bnd,nj->bdj", grad_traj, self._pos_w) * self.mp_head_scale
        return gw.reshape(batch, -1)

    # -- denoising ---------------------------------------------------------

    def denoise_batch(
        self,
        noisy: np.ndarray,
        obs: np.ndarray,
        t: np.ndarray | float,
        bc_pos: np.ndarray,
        bc_vel: np.ndarray,
    ) -> tuple[np.ndarray, nets.Tape, np.ndarray]:
        out, tape = nets.forward(self.net, noisy, obs, t)
        out = np.atleast_2d(out)
        clean = self._apply_head(out, np.atleast_2d(bc_pos), np.atleast_2d(bc_vel))
        return clean, tape, out

    def denoise(self, noisy: np.ndarray, obs: np.ndarray, t: float, bc: BoundaryState) -> np.ndarray:
        """Single-sample denoiser conforming to the sampler protocol."""
        clean, _, _ = self.denoise_batch(noisy[None], obs[None], t, bc.pos[None], bc.vel[None])
        return clean[0]


def denoise_F(
    model: TeacherModel, noisy_traj: np.ndarray, obs: np.ndarray, t: float, bc: BoundaryState
) -> np.ndarray:
    """Predicted clean trajectory for one noisy sample (n, dof)."""
    if not t > 0.0:
        raise ValueError(f"noise level must be positive, got {t}")
    return model.denoise(np.asarray(noisy_traj, dtype=float), np.asarray(obs, dtype=float), t, bc)


def score_estimate(
    model: TeacherModel, noisy_traj: np.ndarray, obs: np.ndarray, t: float, bc: BoundaryState
) -> np.ndarray:
    """(denoised - noisy) / t^2, the conditional score at noise level t."""
    if t == 0.0:
        raise ZeroDivisionError("score is undefined at t = 0")
    noisy_traj = np.asarray(noisy_traj, dtype=float)
    return (denoise_F(model, noisy_traj, obs, t, bc) - noisy_traj) / t**2


def ode_step(denoiser, traj, t_from: float, t_to: float, obs, bc, heun: bool = False):
    """One probability-flow step from a higher to a lower noise level.

    Euler by default; with heun=True the slope is re-evaluated at t_to and
    averaged.  ``denoiser`` is anything exposing .denoise(traj, obs, t, bc).
    """
    if not (t_from > t_to > 0.0):
        raise ValueError(f"need t_from > t_to > 0, got {t_from} -> {t_to}")
    traj = np.asarray(traj, dtype=float)
    d1 = (traj - denoiser.denoise(traj, obs, t_from, bc)) / t_from
    stepped = traj + (t_to - t_from) * d1
    if heun:
        d2 = (stepped - denoiser.denoise(stepped, obs, t_to, bc)) / t_to
        stepped = traj + (t_to - t_from) * 0.5 * (d1 + d2)
    return stepped


def sample_teacher(
    model: TeacherModel,
    obs: np.ndarray,
    bc: BoundaryState,
    steps: int,
    rng: np.random.Generator,
    heun: bool | None = None,
) -> Trajectory:
    """Draw pure noise at t_max and integrate the PF-ODE down the schedule.

    The final step applies the denoiser at the last level, so an MP-head
    sample always satisfies the boundary condition exactly.  Uses ``steps``
    network evaluations with the Euler stepper.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    heun = model.heun if heun is None else heun
    sched = model.schedule
    lay = model.net.layout
    traj = rng.standard_normal((lay.traj_len, lay.dof)) * sched.t_max
    if steps == 1:
        levels = np.array([sched.t_max])
    else:
        levels = karras_levels(steps, sched.epsilon, sched.t_max, sched.rho).levels
    for t_from, t_to in zip(levels[:-1], levels[1:]):
        traj = ode_step(model, traj, t_from, t_to, obs, bc, heun=heun)
    clean = model.denoise(traj, obs, levels[-1], bc)
    return Trajectory(model.action_times, clean)


def sample_t_loguniform(rng: np.random.Generator, n: int, epsilon: float, t_max: float) -> np.ndarray:
    return np.exp(rng.uniform(math.log(epsilon), math.log(t_max), n))


def teacher_loss(
    model: TeacherModel,
    batch: WindowArrays,
    rng: np.random.Generator,
    t: np.ndarray | None = None,
    noise: np.ndarray | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Denoising regression: E[ ||F(tau + t*eps, o, t) - tau||^2 / t^2 ].

    Equivalent (up to a constant independent of the parameters) to matching
    the model score against the Gaussian corruption score; noise levels are
    sampled log-uniformly over the schedule span.  Explicit ``t``/``noise``
    override the random draws (reproducibility hooks).
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    n = len(batch)
    if t is None:
        t = sample_t_loguniform(rng, n, model.schedule.epsilon, model.schedule.t_max)
    if noise is None:
        noisy = add_noise(batch.actions, t, rng)
    else:
        noisy = batch.actions + t[:, None, None] * noise
    clean_hat, tape, _ = model.denoise_batch(noisy, batch.obs, t, batch.bc_pos, batch.bc_vel)
    resid = clean_hat - batch.actions
    weights = 1.0 / t**2
    loss = float(np.mean(np.sum(resid**2, axis=(1, 2)) * weights))
    if not np.isfinite(loss):
        raise TrainingError("non-finite teacher loss")
    grad_traj = 2.0 * resid * weights[:, None, None] / n
    grads = nets.backward(model.net, tape, model._head_grad(grad_traj))
    return loss, grads


@dataclass(frozen=True)
class TeacherTrainConfig:
    steps: int = 6000
    batch_size: int = 128
    lr: float = 1e-4
    weight_decay: float = 1e-6
    warmup_steps: int = 500
    hidden_sizes: tuple[int, ...] = (256, 256, 256)
    log_every: int = 50
    val_fraction: float = 0.1
    sample_steps: int = 10
    heun: bool = False


def _val_loss(model: TeacherModel, val: WindowArrays, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    n = len(val)
    t = sample_t_loguniform(rng, n, model.schedule.epsilon, model.schedule.t_max)
    noisy = add_noise(val.actions, t, rng)
    clean_hat, _, _ = model.denoise_batch(noisy, val.obs, t, val.bc_pos, val.bc_vel)
    return float(np.mean(np.sum((clean_hat - val.actions) ** 2, axis=(1, 2)) / t**2))


def train_teacher(
    model: TeacherModel,
    windows: WindowArrays,
    cfg: TeacherTrainConfig,
    rng: np.random.Generator,
) -> dict:
    """Optimize the denoiser in place; returns the training history.

    History: {"log": [(step, loss, lr)], "val_initial": .., "val_final": ..}.
    """
    if len(windows) == 0:
        raise ValueError("empty training set")
    n_val = max(int(len(windows) * cfg.val_fraction), 1)
    perm = rng.permutation(len(windows))
    val = windows.take(perm[:n_val])
    train = windows.take(perm[n_val:])

    hyper = OptimizerHyper(
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        warmup_steps=cfg.warmup_steps,
        total_steps=cfg.steps,
    )
    state = nets.init_optimizer(model.net)
    log: list[tuple[int, float, float]] = []
    val_initial = _val_loss(model, val)
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(train), cfg.batch_size)
        loss, grads = teacher_loss(model, train.take(idx), rng)
        if not np.isfinite(loss):
            raise TrainingError(f"teacher training diverged at step {step}")
        lr = nets.optimizer_step(model.net, grads, state, hyper)
        if step % cfg.log_every == 0 or step == 1 or step == cfg.steps:
            log.append((step, loss, lr))
    return {"log": log, "val_initial": val_initial, "val_final": _val_loss(model, val)}
