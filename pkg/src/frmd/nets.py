"""MLP denoiser with hand-rolled reverse-mode gradients and AdamW.

Everything is float64 numpy, deterministic under a fixed seed.  The tape
caches layer inputs and pre-activations during forward; backward replays
them in reverse for exact gradients.  No broadcasting framework, no graph:
the network is a fixed stack of dense layers with GELU in between.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, LayoutError, TrainingError

__all__ = [
    "NetLayout",
    "DenoiserNet",
    "Tape",
    "OptimizerHyper",
    "OptimizerState",
    "init_net",
    "init_optimizer",
    "embed_time",
    "forward",
    "backward",
    "optimizer_step",
    "lr_at",
]

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@dataclass(frozen=True)
class NetLayout:
    """Input/output layout of the denoiser.

    Input is the concatenation of the flattened noisy action sequence
    (traj_len * dof), the flattened observation window (obs_history *
    obs_dim), and a sinusoidal embedding of log(noise level).  The MP head
    emits one weight vector per DoF; the raw head emits waypoints directly.
    """

    traj_len: int
    dof: int
    obs_history: int
    obs_dim: int
    n_weights: int
    head: str = "mp"
    time_embed_dim: int = 16

    def __post_init__(self) -> None:
        if self.head not in ("mp", "raw"):
            raise ConfigError(f"unknown head mode {self.head!r}")
        if self.time_embed_dim % 2 != 0 or self.time_embed_dim < 2:
            raise ConfigError("time_embed_dim must be a positive even number")
        if min(self.traj_len, self.dof, self.obs_history, self.obs_dim, self.n_weights) < 1:
            raise ConfigError("layout sizes must be positive")

    @property
    def input_dim(self) -> int:
        return self.traj_len * self.dof + self.obs_history * self.obs_dim + self.time_embed_dim

    @property
    def output_dim(self) -> int:
        return self.dof * self.n_weights if self.head == "mp" else self.traj_len * self.dof


@dataclass
class DenoiserNet:
    layout: NetLayout
    hidden_sizes: tuple[int, ...]
    params: dict[str, np.ndarray]
    forward_count: int = 0

    @property
    def n_layers(self) -> int:
        return len(self.hidden_sizes) + 1

    def copy(self) -> "DenoiserNet":
        return DenoiserNet(self.layout, self.hidden_sizes, {k: v.copy() for k, v in self.params.items()})


@dataclass
class Tape:
    """Cached intermediates of one forward pass; consumed by backward."""

    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)
    consumed: bool = False


def init_net(layout: NetLayout, hidden_sizes: tuple[int, ...], seed: int) -> DenoiserNet:
    """Scaled-uniform fan-in init; the output layer starts at zero.

    Zeroing the head makes a freshly initialized model predict the neutral
    weight vector, so untrained checkpoints decode to plain boundary
    relaxations instead of arbitrary forcing.
    """
    hidden_sizes = tuple(int(h) for h in hidden_sizes)
    if len(hidden_sizes) == 0:
        raise ConfigError("at least one hidden layer is required")
    if any(h < 1 for h in hidden_sizes):
        raise ConfigError(f"hidden sizes must be positive, got {hidden_sizes}")
    rng = np.random.default_rng(seed)
    sizes = (layout.input_dim,) + hidden_sizes + (layout.output_dim,)
    params: dict[str, np.ndarray] = {}
    last = len(sizes) - 2
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        if i == last:
            params[f"w{i}"] = np.zeros((fan_in, fan_out))
            params[f"b{i}"] = np.zeros(fan_out)
        else:
            bound = 1.0 / math.sqrt(fan_in)
            params[f"w{i}"] = rng.uniform(-bound, bound, (fan_in, fan_out))
            params[f"b{i}"] = rng.uniform(-bound, bound, fan_out)
    return DenoiserNet(layout, hidden_sizes, params)


def _gelu(z: np.ndarray) -> np.ndarray:
    return 0.5 * z * (1.0 + np.tanh(_GELU_C * (z + _GELU_A * z**3)))


def _gelu_grad(z: np.ndarray) -> np.ndarray:
    u = _GELU_C * (z + _GELU_A * z**3)
    t = np.tanh(u)
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t**2) * _GELU_C * (1.0 + 3.0 * _GELU_A * z**2)


def embed_time(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of log(t) at geometrically spaced frequencies."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t <= 0.0):
        raise ValueError("noise level t must be strictly positive")
    half = dim // 2
    freqs = np.exp(np.linspace(math.log(0.25), math.log(16.0), half))
    angles = np.log(t)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _assemble_input(net: DenoiserNet, noisy: np.ndarray, obs: np.ndarray, t: np.ndarray) -> np.ndarray:
    lay = net.layout
    if noisy.shape[-2:] != (lay.traj_len, lay.dof):
        raise LayoutError(f"noisy trajectory shape {noisy.shape} does not match layout "
                          f"(.., {lay.traj_len}, {lay.dof})")
    if obs.shape[-2:] != (lay.obs_history, lay.obs_dim):
        raise LayoutError(f"observation shape {obs.shape} does not match layout "
                          f"(.., {lay.obs_history}, {lay.obs_dim})")
    batch = noisy.shape[0]
    t = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=float)), (batch,))
    return np.concatenate(
        [noisy.reshape(batch, -1), obs.reshape(batch, -1), embed_time(t, lay.time_embed_dim)],
        axis=1,
    )


def forward(
    net: DenoiserNet, noisy: np.ndarray, obs: np.ndarray, t: np.ndarray | float
) -> tuple[np.ndarray, Tape]:
    """Run the denoiser on a batch (leading axis) or a single sample.

    Returns the raw head output and the tape for backward.  Single-sample
    inputs (traj_len, dof) come back as a 1-d output vector.
    """
    noisy = np.asarray(noisy, dtype=float)
    obs = np.asarray(obs, dtype=float)
    single = noisy.ndim == 2
    if single:
        noisy = noisy[None]
        obs = obs[None]
    x = _assemble_input(net, noisy, obs, t)
    net.forward_count += 1
    tape = Tape()
    h = x
    for i in range(net.n_layers):
        tape.inputs.append(h)
        z = h @ net.params[f"w{i}"] + net.params[f"b{i}"]
        if i < net.n_layers - 1:
            tape.preacts.append(z)
            h = _gelu(z)
        else:
            h = z
    return (h[0] if single else h), tape


def backward(net: DenoiserNet, tape: Tape, grad_out: np.ndarray) -> dict[str, np.ndarray]:
    """Exact reverse-mode parameter gradients for a recorded forward pass."""
    if tape.consumed:
        raise TrainingError("tape already consumed; rerun forward before backward")
    tape.consumed = True
    g = np.atleast_2d(np.asarray(grad_out, dtype=float))
    grads: dict[str, np.ndarray] = {}
    for i in reversed(range(net.n_layers)):
        h = tape.inputs[i]
        grads[f"w{i}"] = h.T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        if i > 0:
            g = (g @ net.params[f"w{i}"].T) * _gelu_grad(tape.preacts[i - 1])
    return grads


@dataclass(frozen=True)
class OptimizerHyper:
    lr: float = 1e-4
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 500
    total_steps: int = 10000


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_optimizer(net: DenoiserNet) -> OptimizerState:
    zeros = lambda: {k: np.zeros_like(p) for k, p in net.params.items()}
    return OptimizerState(zeros(), zeros())


def lr_at(step: int, hyper: OptimizerHyper) -> float:
    """Linear warm-up to the base rate, then cosine decay to zero."""
    if hyper.warmup_steps > 0 and step <= hyper.warmup_steps:
        return hyper.lr * step / hyper.warmup_steps
    span = max(hyper.total_steps - hyper.warmup_steps, 1)
    progress = min((step - hyper.warmup_steps) / span, 1.0)
    return hyper.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def optimizer_step(
    net: DenoiserNet,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    hyper: OptimizerHyper,
) -> float:
    """One decoupled-weight-decay adaptive update, in place.  Returns the lr used."""
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter block {key!r}")
    state.step += 1
    lr = lr_at(state.step, hyper)
    b1, b2 = hyper.beta1, hyper.beta2
    bias1 = 1.0 - b1**state.step
    bias2 = 1.0 - b2**state.step
    for key, p in net.params.items():
        g = grads[key]
        m = state.m[key]
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bias1) / (np.sqrt(v / bias2) + hyper.eps)
        p -= lr * (update + hyper.weight_decay * p)
    return lr
