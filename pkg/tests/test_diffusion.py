import numpy as np
import pytest

from frmd.diffusion import (
    ActionNormalizer,
    NoiseSchedule,
    TeacherModel,
    TeacherTrainConfig,
    WindowArrays,
    add_noise,
    denoise_F,
    karras_levels,
    ode_step,
    sample_teacher,
    score_estimate,
    teacher_loss,
    train_teacher,
)
from frmd.errors import ConfigError
from frmd.metrics import nonsmooth_count
from frmd.mp import BoundaryState, MPConfig, build_basis, decode
from frmd.nets import NetLayout, init_net

ACTION_TIMES = 0.05 * np.arange(1, 13)


def identity_normalizer(dof=2):
    return ActionNormalizer(np.zeros(dof), np.ones(dof))


def make_model(seed=0, head="mp", hidden=(24, 24), randomize=False, n_levels=40):
    tables = build_basis(MPConfig())
    layout = NetLayout(traj_len=12, dof=2, obs_history=3, obs_dim=7, n_weights=9, head=head)
    net = init_net(layout, hidden, seed)
    if randomize:
        rng = np.random.default_rng(seed + 500)
        for k in net.params:
            net.params[k] = rng.normal(0.0, 0.25, net.params[k].shape)
    model = TeacherModel(net, tables, karras_levels(n_levels), identity_normalizer(), ACTION_TIMES, head=head)
    return model


def random_batch(rng, size=4):
    return WindowArrays(
        actions=rng.uniform(-0.8, 0.8, (size, 12, 2)),
        obs=rng.uniform(-0.8, 0.8, (size, 3, 7)),
        bc_pos=rng.uniform(-0.8, 0.8, (size, 2)),
        bc_vel=rng.uniform(-0.5, 0.5, (size, 2)),
    )


# -- schedule ---------------------------------------------------------------


def test_karras_two_levels_are_endpoints():
    sched = karras_levels(2, epsilon=0.002, t_max=10.0, rho=7.0)
    assert sched.levels[0] == 10.0 and sched.levels[-1] == 0.002


def test_karras_rho_one_is_linear():
    sched = karras_levels(5, epsilon=1.0, t_max=5.0, rho=1.0)
    assert np.allclose(sched.levels, [5.0, 4.0, 3.0, 2.0, 1.0])


def test_karras_default_monotone():
    sched = karras_levels(40, 0.002, 10.0, 7.0)
    assert sched.levels[0] == 10.0 and sched.levels[-1] == 0.002
    assert np.all(np.diff(sched.levels) < 0.0)


def test_karras_validation():
    with pytest.raises(ConfigError):
        karras_levels(1)
    with pytest.raises(ConfigError):
        karras_levels(10, epsilon=2.0, t_max=1.0)
    with pytest.raises(ConfigError):
        karras_levels(10, rho=0.5)


# -- noising ----------------------------------------------------------------


def test_add_noise_zero_level_passthrough():
    rng = np.random.default_rng(0)
    traj = rng.normal(size=(12, 2))
    assert np.array_equal(add_noise(traj, 0.0, rng), traj)


def test_add_noise_std_moment():
    rng = np.random.default_rng(1)
    traj = np.zeros((100_000, 1))
    noisy = add_noise(traj, 2.0, rng)
    assert abs(noisy.std() - 2.0) < 0.02


def test_add_noise_seeded_reproducible():
    traj = np.ones((12, 2))
    a = add_noise(traj, 1.5, np.random.default_rng(42))
    b = add_noise(traj, 1.5, np.random.default_rng(42))
    assert np.array_equal(a, b)


# -- denoiser pipeline --------------------------------------------------------


def test_denoise_zero_net_is_homogeneous_decode():
    model = make_model(head="mp")
    for k in model.net.params:
        model.net.params[k] = np.zeros_like(model.net.params[k])
    rng = np.random.default_rng(2)
    bc = BoundaryState(0.0, rng.uniform(-1, 1, 2), rng.uniform(-0.5, 0.5, 2))
    noisy = rng.normal(size=(12, 2))
    obs = rng.normal(size=(3, 7))
    out = denoise_F(model, noisy, obs, 1.0, bc)
    expected = decode(model.tables, bc, np.zeros((2, 9)), ACTION_TIMES).positions
    assert np.abs(out - expected).max() < 1e-12


def test_denoise_boundary_exact_for_any_params():
    model = make_model(randomize=True)
    rng = np.random.default_rng(3)
    for _ in range(5):
        bc = BoundaryState(0.0, rng.uniform(-1, 1, 2), rng.uniform(-0.5, 0.5, 2))
        noisy = rng.normal(0.0, 5.0, (12, 2))
        obs = rng.normal(size=(3, 7))
        out = denoise_F(model, noisy, obs, 2.0, bc)
        # decode the predicted weights at the boundary instant itself
        lay = model.net.layout
        w = (model.last_boundary is not None) and model.last_boundary[0]
        assert np.abs(model.last_boundary[0] - bc.pos).max() < 1e-9
        # velocity side: reconstruct weights and decode at t_b
        from frmd import nets

        raw, _ = nets.forward(model.net, noisy, obs, 2.0)
        weights = raw.reshape(2, 9) * model.mp_head_scale
        traj0 = decode(model.tables, bc, weights, np.array([0.0]))
        assert np.abs(traj0.positions[0] - bc.pos).max() < 1e-9
        assert np.abs(traj0.velocities[0] - bc.vel).max() < 1e-9


def test_denoise_requires_positive_t():
    model = make_model()
    rng = np.random.default_rng(4)
    bc = BoundaryState(0.0, np.zeros(2), np.zeros(2))
    with pytest.raises(ValueError):
        denoise_F(model, rng.normal(size=(12, 2)), rng.normal(size=(3, 7)), 0.0, bc)


def test_score_identity_and_domain():
    model = make_model(randomize=True)
    rng = np.random.default_rng(5)
    bc = BoundaryState(0.0, np.zeros(2), np.zeros(2))
    noisy = rng.normal(size=(12, 2))
    obs = rng.normal(size=(3, 7))
    t = 1.7
    score = score_estimate(model, noisy, obs, t, bc)
    denoised = denoise_F(model, noisy, obs, t, bc)
    assert np.abs(score * t**2 + noisy - denoised).max() < 1e-12
    with pytest.raises(ZeroDivisionError):
        score_estimate(model, noisy, obs, 0.0, bc)


def test_perfect_gaussian_score():
    # a denoiser that always returns the data mean has the exact score of
    # N(mu, t^2) around that mean
    mu = np.full((12, 2), 0.3)

    class Perfect:
        def denoise(self, traj, obs, t, bc):
            return mu

    rng = np.random.default_rng(6)
    noisy = rng.normal(size=(12, 2))
    t = 0.9
    score = (Perfect().denoise(noisy, None, t, None) - noisy) / t**2
    assert np.allclose(score, (mu - noisy) / t**2)


# -- PF-ODE stepping ----------------------------------------------------------


class IdentityDenoiser:
    def denoise(self, traj, obs, t, bc):
        return traj


class DeltaGaussianDenoiser:
    """Exact denoiser for a point mass at mu."""

    def __init__(self, mu):
        self.mu = mu

    def denoise(self, traj, obs, t, bc):
        return np.broadcast_to(self.mu, np.shape(traj)).copy()


class WideGaussianDenoiser:
    """Exact posterior mean for data N(mu, s^2 I) under noise level t."""

    def __init__(self, mu, s):
        self.mu = mu
        self.s = s

    def denoise(self, traj, obs, t, bc):
        s2 = self.s**2
        return (s2 * np.asarray(traj) + t**2 * self.mu) / (s2 + t**2)


def test_ode_step_identity_fixed_point():
    rng = np.random.default_rng(7)
    traj = rng.normal(size=(12, 2))
    out = ode_step(IdentityDenoiser(), traj, 2.0, 1.0, None, None)
    assert np.array_equal(out, traj)


def test_ode_step_ordering():
    with pytest.raises(ValueError):
        ode_step(IdentityDenoiser(), np.zeros(3), 1.0, 2.0, None, None)
    with pytest.raises(ValueError):
        ode_step(IdentityDenoiser(), np.zeros(3), 1.0, 0.0, None, None)


def test_delta_gaussian_euler_is_exact():
    mu = 0.4
    den = DeltaGaussianDenoiser(mu)
    t_hi, t_lo = 5.0, 2.0
    x = np.array([3.0])
    stepped = ode_step(den, x, t_hi, t_lo, None, None)
    assert np.allclose(stepped, mu + (x - mu) * t_lo / t_hi)
    # full 40-step descent matches the closed-form linear contraction
    levels = karras_levels(40, 0.002, 10.0, 7.0).levels
    x = np.array([7.0])
    x0 = x.copy()
    for a, b in zip(levels[:-1], levels[1:]):
        x = ode_step(den, x, a, b, None, None)
    closed = mu + (x0 - mu) * levels[-1] / levels[0]
    assert np.abs(x - closed).max() < 1e-12


def test_wide_gaussian_euler_converges_to_closed_form():
    # nondegenerate data: Euler is first order globally; verify convergence
    # toward the closed-form solution and the per-step O(dt^2) Euler/Heun gap
    mu, s = -0.2, 0.5
    den = WideGaussianDenoiser(mu, s)
    t_max, eps = 10.0, 0.002
    x_start = np.array([4.0])

    def run(n_steps):
        levels = karras_levels(n_steps, eps, t_max, 7.0).levels
        x = x_start.copy()
        for a, b in zip(levels[:-1], levels[1:]):
            x = ode_step(den, x, a, b, None, None)
        return x

    closed = mu + (x_start - mu) * np.sqrt((s**2 + eps**2) / (s**2 + t_max**2))
    err40 = np.abs(run(40) - closed).max()
    err160 = np.abs(run(160) - closed).max()
    assert err40 < 2e-2
    assert err40 / err160 >= 3.0  # first-order global accuracy

    def one_step_gap(dt):
        e = ode_step(den, x_start, 5.0, 5.0 - dt, None, None, heun=False)
        h = ode_step(den, x_start, 5.0, 5.0 - dt, None, None, heun=True)
        return np.abs(h - e).max()

    assert one_step_gap(1.0) / one_step_gap(0.5) >= 3.0
    assert one_step_gap(0.5) / one_step_gap(0.25) >= 3.0


# -- losses and training -------------------------------------------------------


def test_teacher_loss_gradients_match_fd():
    model = make_model(seed=1, hidden=(6, 5), randomize=True)
    rng = np.random.default_rng(8)
    batch = random_batch(rng, size=2)
    t = np.array([0.5, 3.0])
    noise = rng.normal(size=batch.actions.shape)
    loss, grads = teacher_loss(model, batch, rng, t=t, noise=noise)

    step = 1e-4
    for key in ("w0", "b1", f"w{model.net.n_layers - 1}"):
        p = model.net.params[key]
        fd = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + step
            hi, _ = teacher_loss(model, batch, rng, t=t, noise=noise)
            p[idx] = orig - step
            lo, _ = teacher_loss(model, batch, rng, t=t, noise=noise)
            p[idx] = orig
            fd[idx] = (hi - lo) / (2.0 * step)
        denom = max(np.abs(grads[key]).max(), np.abs(fd).max(), 1e-8)
        assert np.abs(grads[key] - fd).max() / denom < 1e-4, key


def test_teacher_loss_permutation_invariant():
    model = make_model(seed=2, randomize=True)
    rng = np.random.default_rng(9)
    batch = random_batch(rng, size=6)
    t = np.exp(rng.uniform(-3, 2, 6))
    noise = rng.normal(size=batch.actions.shape)
    loss, _ = teacher_loss(model, batch, rng, t=t, noise=noise)
    perm = rng.permutation(6)
    shuffled = WindowArrays(batch.actions[perm], batch.obs[perm], batch.bc_pos[perm], batch.bc_vel[perm])
    loss_p, _ = teacher_loss(model, shuffled, rng, t=t[perm], noise=noise[perm])
    assert loss == pytest.approx(loss_p, rel=1e-12)


def test_teacher_loss_identity_plugin_finite():
    # zero-weight raw-head model at the smallest level: loss ~ ||eps||^2 scale
    model = make_model(head="raw")
    rng = np.random.default_rng(10)
    batch = random_batch(rng, size=3)
    t = np.full(3, model.schedule.epsilon)
    loss, _ = teacher_loss(model, batch, rng, t=t)
    assert np.isfinite(loss)


def test_single_mode_memorization():
    # one repeated window: the denoiser must reproduce it at small t
    model = make_model(seed=3, hidden=(48, 48))
    rng = np.random.default_rng(11)
    base = random_batch(rng, size=1)
    window = WindowArrays(
        np.repeat(base.actions, 64, axis=0),
        np.repeat(base.obs, 64, axis=0),
        np.repeat(base.bc_pos, 64, axis=0),
        np.repeat(base.bc_vel, 64, axis=0),
    )
    cfg = TeacherTrainConfig(steps=400, batch_size=64, lr=3e-3, warmup_steps=20, log_every=100)
    train_teacher(model, window, cfg, np.random.default_rng(12))
    bc = BoundaryState(0.0, base.bc_pos[0], base.bc_vel[0])
    noisy = base.actions[0] + 0.01 * np.random.default_rng(13).standard_normal((12, 2))
    rec = denoise_F(model, noisy, base.obs[0], 0.01, bc)
    rms = np.sqrt(np.mean((rec - base.actions[0]) ** 2))
    scale = np.sqrt(np.mean(base.actions[0] ** 2))
    assert rms < 0.02 * max(scale, 1.0)


def test_train_teacher_progress_and_determinism():
    rng = np.random.default_rng(14)
    batch = random_batch(rng, size=40)
    runs = []
    for _ in range(2):
        model = make_model(seed=4, hidden=(32, 32))
        cfg = TeacherTrainConfig(steps=150, batch_size=16, lr=1e-3, warmup_steps=10, log_every=25)
        hist = train_teacher(model, batch, cfg, np.random.default_rng(99))
        runs.append(hist)
        assert all(np.isfinite(l) for _, l, _ in hist["log"])
    assert runs[0]["log"] == runs[1]["log"]


# -- sampling -------------------------------------------------------------------


def test_sample_teacher_deterministic():
    model = make_model(randomize=True)
    rng = np.random.default_rng(15)
    obs = rng.normal(size=(3, 7))
    bc = BoundaryState(0.0, np.array([0.2, -0.1]), np.zeros(2))
    a = sample_teacher(model, obs, bc, 10, np.random.default_rng(7))
    b = sample_teacher(model, obs, bc, 10, np.random.default_rng(7))
    assert np.array_equal(a.positions, b.positions)


def test_sample_teacher_steps_one_single_eval():
    model = make_model()
    rng = np.random.default_rng(16)
    obs = rng.normal(size=(3, 7))
    bc = BoundaryState(0.0, np.zeros(2), np.zeros(2))
    before = model.net.forward_count
    sample_teacher(model, obs, bc, 1, rng)
    assert model.net.forward_count == before + 1
    before = model.net.forward_count
    sample_teacher(model, obs, bc, 10, rng)
    assert model.net.forward_count == before + 10


def test_sampled_trajectories_meet_bc_and_smoothness():
    # structural guarantee for random untrained checkpoints
    from frmd.tasks import make_task

    count = 0
    for model_seed in range(10):
        model = make_model(seed=model_seed)
        for noise_seed in range(10):
            task = make_task("reach", 1000 + model_seed * 10 + noise_seed)
            obs = np.tile(np.concatenate([task.start, task.goal, np.zeros(2), [0.0]]), (3, 1))
            bc = BoundaryState(0.0, task.start, np.zeros(2))
            traj = sample_teacher(model, obs, bc, 5, np.random.default_rng(noise_seed))
            assert np.abs(model.last_boundary[0] - bc.pos).max() < 1e-9
            assert nonsmooth_count(traj.positions).nonsmooth_count == 0
            count += 1
    assert count == 100
