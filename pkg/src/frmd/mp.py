"""Movement-primitive trajectory representation.

A trajectory per degree of freedom is the solution of the critically damped
second-order ODE

    y'' + 2*lam*y' + lam^2*y = lam^2 * (b(t) . w)

with lam = alpha / (2 * tau_s).  The homogeneous part absorbs the boundary
condition (position and velocity at t_b); the forced part is a weighted sum
of precomputed basis columns, one per radial basis function plus a final
goal-attractor column.  Decoding a weight matrix into positions/velocities
is therefore a cheap affine map, with no integration at plan time.

Construction does the expensive work once: the complementary functions
y1 = exp(-lam*t), y2 = t*exp(-lam*t) and the variation-of-parameters
integrals are tabulated on a dense grid and interpolated afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError

__all__ = [
    "MPConfig",
    "BasisTables",
    "BoundaryState",
    "Trajectory",
    "build_basis",
    "solve_boundary",
    "decode",
    "decode_affine_map",
    "decode_operator",
    "reference_integrate",
    "phase",
    "forcing_basis",
]


@dataclass(frozen=True)
class MPConfig:
    """Static parameters of the primitive representation.

    dof: number of degrees of freedom (weight rows).
    n_basis: radial basis functions per DoF (goal column comes on top).
    alpha: spring constant of the underlying ODE; damping is alpha and
        stiffness alpha/4 so the system is always critically damped.
    tau_s: motion duration in seconds; the basis grid spans [0, tau_s].
    alpha_x: decay rate of the phase variable x(t) = exp(-alpha_x*t/tau_s).
    grid_points: dense precomputation grid size.
    """

    dof: int = 2
    n_basis: int = 8
    alpha: float = 25.0
    tau_s: float = 2.0
    alpha_x: float = 2.0
    grid_points: int = 200

    def __post_init__(self) -> None:
        if self.dof < 1 or self.n_basis < 1:
            raise ConfigError(f"dof and n_basis must be positive, got {self.dof}, {self.n_basis}")
        for name in ("alpha", "tau_s", "alpha_x"):
            if not getattr(self, name) > 0.0:
                raise ConfigError(f"{name} must be strictly positive, got {getattr(self, name)}")
        if self.grid_points < 3:
            raise ConfigError(f"grid_points must be >= 3, got {self.grid_points}")

    @property
    def lam(self) -> float:
        """Repeated root of the characteristic polynomial."""
        return self.alpha / (2.0 * self.tau_s)

    @property
    def n_weights(self) -> int:
        """Columns of the weight matrix: n_basis RBFs plus the goal."""
        return self.n_basis + 1


@dataclass(frozen=True)
class BoundaryState:
    """Position/velocity constraint the decoded trajectory meets exactly.

    t_b lies in [0, tau_s); pos and vel are length-dof vectors.
    """

    t_b: float
    pos: np.ndarray
    vel: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "pos", np.asarray(self.pos, dtype=float))
        object.__setattr__(self, "vel", np.asarray(self.vel, dtype=float))
        if not (np.all(np.isfinite(self.pos)) and np.all(np.isfinite(self.vel))):
            raise ValueError("boundary position/velocity must be finite")


@dataclass
class Trajectory:
    """Sampled trajectory: times (n,), positions (n, dof), optional velocities."""

    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray | None = None


class BasisTables:
    """Precomputed complementary functions and basis matrices on a dense grid.

    Immutable after construction; safe to share between threads.  Columns of
    ``pos_basis`` are the forced responses to each unit basis weight, the last
    column being the goal attractor.  ``vel_basis`` holds their exact time
    derivatives.
    """

    def __init__(
        self,
        config: MPConfig,
        grid: np.ndarray,
        y1: np.ndarray,
        y2: np.ndarray,
        dy1: np.ndarray,
        dy2: np.ndarray,
        pos_basis: np.ndarray,
        vel_basis: np.ndarray,
    ) -> None:
        self.config = config
        self.grid = grid
        self.y1 = y1
        self.y2 = y2
        self.dy1 = dy1
        self.dy2 = dy2
        self.pos_basis = pos_basis
        self.vel_basis = vel_basis
        for arr in (grid, y1, y2, dy1, dy2, pos_basis, vel_basis):
            arr.setflags(write=False)

    def interp(self, times: np.ndarray) -> dict[str, np.ndarray]:
        """Linearly interpolate every table at the given times."""
        times = np.asarray(times, dtype=float)
        if times.size and (times.min() < self.grid[0] - 1e-12 or times.max() > self.grid[-1] + 1e-12):
            raise ValueError(
                f"times span [{times.min():g}, {times.max():g}] outside basis grid "
                f"[{self.grid[0]:g}, {self.grid[-1]:g}]"
            )
        out = {
            name: np.interp(times, self.grid, getattr(self, name))
            for name in ("y1", "y2", "dy1", "dy2")
        }
        # np.interp is 1-d; interpolate basis matrices column-block via searchsorted.
        idx = np.clip(np.searchsorted(self.grid, times) - 1, 0, len(self.grid) - 2)
        t0 = self.grid[idx]
        frac = ((times - t0) / (self.grid[idx + 1] - t0))[:, None]
        for name in ("pos_basis", "vel_basis"):
            tab = getattr(self, name)
            out[name] = tab[idx] * (1.0 - frac) + tab[idx + 1] * frac
        return out


def phase(config: MPConfig, t: np.ndarray) -> np.ndarray:
    """Exponentially decaying phase variable on [0, tau_s]."""
    return np.exp(-config.alpha_x * np.asarray(t, dtype=float) / config.tau_s)


def _rbf_centers_width(config: MPConfig) -> tuple[np.ndarray, float]:
    x_end = float(np.exp(-config.alpha_x))
    centers = np.linspace(x_end, 1.0, config.n_basis)
    spacing = (1.0 - x_end) / (config.n_basis - 1) if config.n_basis > 1 else (1.0 - x_end)
    return centers, 0.5 * spacing


def forcing_basis(config: MPConfig, t: np.ndarray) -> np.ndarray:
    """Forcing-term basis values, shape (len(t), n_basis + 1).

    RBF columns are normalized Gaussian bumps over the phase variable,
    multiplied by the phase itself (so the learned forcing dies out as the
    motion completes) and divided by tau_s^2, the classic transformation-
    system scaling.  The final column is lam^2: unit static gain for the
    goal attractor.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    x = phase(config, t)
    centers, width = _rbf_centers_width(config)
    bumps = np.exp(-0.5 * ((x[:, None] - centers[None, :]) / width) ** 2)
    bumps /= bumps.sum(axis=1, keepdims=True)
    cols = np.empty((t.size, config.n_weights))
    cols[:, : config.n_basis] = bumps * (x / config.tau_s**2)[:, None]
    cols[:, -1] = config.lam**2
    return cols


#: Each table-grid cell is split into this many quadrature subcells; the
#: tabulated values stay on the requested grid but the integrals converge
#: one order of magnitude tighter.
_QUAD_OVERSAMPLE = 4


def _exp_weighted_cumint(grid: np.ndarray, lam: float, values: np.ndarray, order: int) -> np.ndarray:
    """Cumulative integral of exp(lam*s) * s^order_part * values(s) on the grid.

    Trapezoidal in ``values`` (piecewise linear) with the exponential kernel
    integrated exactly per cell; plain trapezoid misbehaves because
    exp(lam*s) curves sharply relative to the grid spacing.  ``order`` 0
    integrates exp(lam*s)*v, order 1 integrates s*exp(lam*s)*v.
    """
    h = np.diff(grid)
    lh = lam * h
    elh = np.exp(lh)
    # Moments of u^k * exp(lam*u) over one cell [0, h].
    m0 = np.expm1(lh) / lam
    m1 = (elh * (lh - 1.0) + 1.0) / lam**2
    m2 = (elh * (lh * lh - 2.0 * lh + 2.0) - 2.0) / lam**3
    v0, v1 = values[:-1], values[1:]
    slope = (v1 - v0) / h[:, None]
    if order == 0:
        cell = v0 * m0[:, None] + slope * m1[:, None]
    else:
        s0 = grid[:-1][:, None]
        cell = (s0 * v0) * m0[:, None] + (v0 + s0 * slope) * m1[:, None] + slope * m2[:, None]
    cell *= np.exp(lam * grid[:-1])[:, None]
    out = np.zeros((len(grid), values.shape[1]))
    np.cumsum(cell, axis=0, out=out[1:])
    return out


def build_basis(config: MPConfig) -> BasisTables:
    """Tabulate complementary functions and basis matrices on the dense grid.

    The forced-response columns come from variation of parameters:
    pos_basis = y2 * I1 - y1 * I2 with I1 = cumint(y1*b/W), I2 = cumint(y2*b/W)
    and Wronskian W = exp(-2*lam*t), so the integrands reduce to
    exp(lam*s)*b(s) and s*exp(lam*s)*b(s).
    """
    lam = config.lam
    grid = np.linspace(0.0, config.tau_s, config.grid_points)
    decay = np.exp(-lam * grid)
    y1 = decay
    y2 = grid * decay
    dy1 = -lam * decay
    dy2 = (1.0 - lam * grid) * decay

    fine = np.linspace(0.0, config.tau_s, (config.grid_points - 1) * _QUAD_OVERSAMPLE + 1)
    b = forcing_basis(config, fine)
    i1 = _exp_weighted_cumint(fine, lam, b, order=0)[:: _QUAD_OVERSAMPLE]  # integral of y1*b/W
    i2 = _exp_weighted_cumint(fine, lam, b, order=1)[:: _QUAD_OVERSAMPLE]  # integral of y2*b/W
    pos_basis = y2[:, None] * i1 - y1[:, None] * i2
    vel_basis = dy2[:, None] * i1 - dy1[:, None] * i2

    for name, tab in (("pos_basis", pos_basis), ("vel_basis", vel_basis)):
        bad = ~np.isfinite(tab)
        if bad.any():
            col = int(np.argwhere(bad.any(axis=0))[0])
            raise NumericalError(f"{name} column {col} is non-finite after quadrature")
    return BasisTables(config, grid, y1, y2, dy1, dy2, pos_basis, vel_basis)


def _check_weights(tables: BasisTables, w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    cfg = tables.config
    if w.shape != (cfg.dof, cfg.n_weights):
        raise ValueError(f"weights must have shape {(cfg.dof, cfg.n_weights)}, got {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    return w


def _boundary_system(tables: BasisTables, t_b: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Homogeneous 2x2 system and basis rows at the boundary time."""
    at = tables.interp(np.array([t_b]))
    m = np.array([[at["y1"][0], at["y2"][0]], [at["dy1"][0], at["dy2"][0]]])
    return m, at["pos_basis"][0], at["vel_basis"][0]


def solve_boundary(tables: BasisTables, bc: BoundaryState, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-DoF coefficients (c1, c2) matching position and velocity at t_b."""
    w = _check_weights(tables, w)
    if not (0.0 <= bc.t_b < tables.config.tau_s):
        raise ValueError(f"t_b={bc.t_b} outside [0, tau_s)")
    m, pos_row, vel_row = _boundary_system(tables, bc.t_b)
    det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    if abs(det) < 1e-280:
        raise NumericalError(f"singular boundary system at t_b={bc.t_b}")
    rhs_pos = bc.pos - w @ pos_row
    rhs_vel = bc.vel - w @ vel_row
    c1 = (m[1, 1] * rhs_pos - m[0, 1] * rhs_vel) / det
    c2 = (m[0, 0] * rhs_vel - m[1, 0] * rhs_pos) / det
    return c1, c2


def decode_operator(tables: BasisTables, t_b: float, times: np.ndarray) -> dict[str, np.ndarray]:
    """Per-DoF affine decode pieces shared by every weight matrix.

    positions[:, d] = pos_w @ w[d] + pos_bc @ [pos_d, vel_d], and likewise for
    velocities.  This is the hot path for batched decoding and the exact
    Jacobian of decode with respect to the weights.
    """
    times = np.asarray(times, dtype=float)
    if times.size and times.min() < t_b - 1e-12:
        raise ValueError(f"decode times start at {times.min():g}, before t_b={t_b:g}")
    m, pos_row, vel_row = _boundary_system(tables, t_b)
    det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    if abs(det) < 1e-280:
        raise NumericalError(f"singular boundary system at t_b={t_b}")
    minv = np.array([[m[1, 1], -m[0, 1]], [-m[1, 0], m[0, 0]]]) / det
    at = tables.interp(times)
    comp = np.stack([at["y1"], at["y2"]], axis=1) @ minv  # (n, 2)
    dcomp = np.stack([at["dy1"], at["dy2"]], axis=1) @ minv
    bound = np.stack([pos_row, vel_row], axis=0)  # (2, n_weights)
    return {
        "pos_w": at["pos_basis"] - comp @ bound,
        "vel_w": at["vel_basis"] - dcomp @ bound,
        "pos_bc": comp,
        "vel_bc": dcomp,
    }


def decode(
    tables: BasisTables,
    bc: BoundaryState,
    w: np.ndarray,
    times: np.ndarray,
    with_velocities: bool = True,
) -> Trajectory:
    """Evaluate the primitive at the given times.

    Affine in w for fixed (tables, bc, times); position and velocity at t_b
    reproduce the boundary state exactly.
    """
    w = _check_weights(tables, w)
    op = decode_operator(tables, bc.t_b, np.asarray(times, dtype=float))
    bc_stack = np.stack([bc.pos, bc.vel], axis=0)  # (2, dof)
    positions = op["pos_w"] @ w.T + op["pos_bc"] @ bc_stack
    velocities = op["vel_w"] @ w.T + op["vel_bc"] @ bc_stack if with_velocities else None
    return Trajectory(np.asarray(times, dtype=float), positions, velocities)


def decode_affine_map(
    tables: BasisTables, bc: BoundaryState, times: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Full affine map: decode(w).positions.ravel() == H @ w.ravel() + b.

    H doubles as the exact gradient of the decoded positions with respect to
    the weights.  Rows follow the (time, dof) raveling of the position matrix,
    columns the (dof, basis) raveling of the weight matrix.
    """
    op = decode_operator(tables, bc.t_b, np.asarray(times, dtype=float))
    dof = tables.config.dof
    n_w = tables.config.n_weights
    n = len(np.atleast_1d(times))
    h = np.zeros((n * dof, dof * n_w))
    for d in range(dof):
        h[d :: dof, d * n_w : (d + 1) * n_w] = op["pos_w"]
    b = (op["pos_bc"] @ np.stack([bc.pos, bc.vel], axis=0)).ravel()
    return h, b


def reference_integrate(
    config: MPConfig, bc: BoundaryState, w: np.ndarray, times: np.ndarray
) -> Trajectory:
    """Brute-force RK4 integration of the underlying forced ODE.

    Kept as the independent oracle for decode; step size <= tau_s/2000.
    """
    times = np.asarray(times, dtype=float)
    lam = config.lam
    w = np.asarray(w, dtype=float)

    def rhs(t: float, state: np.ndarray) -> np.ndarray:
        y, v = state[0], state[1]
        force = forcing_basis(config, np.array([t]))[0] @ w.T
        return np.stack([v, -2.0 * lam * v - lam**2 * y + force])

    t_end = max(float(times.max()), bc.t_b) if times.size else bc.t_b
    n_steps = max(int(np.ceil((t_end - bc.t_b) / (config.tau_s / 2000.0))), 1)
    grid = np.linspace(bc.t_b, t_end, n_steps + 1)
    h = grid[1] - grid[0] if n_steps else 0.0
    state = np.stack([bc.pos, bc.vel])
    states = np.empty((n_steps + 1,) + state.shape)
    states[0] = state
    for i in range(n_steps):
        t = grid[i]
        k1 = rhs(t, state)
        k2 = rhs(t + h / 2.0, state + h / 2.0 * k1)
        k3 = rhs(t + h / 2.0, state + h / 2.0 * k2)
        k4 = rhs(t + h, state + h * k3)
        state = state + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        states[i + 1] = state
    positions = np.stack([np.interp(times, grid, states[:, 0, d]) for d in range(config.dof)], axis=1)
    velocities = np.stack([np.interp(times, grid, states[:, 1, d]) for d in range(config.dof)], axis=1)
    return Trajectory(times, positions, velocities)
