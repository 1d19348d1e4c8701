import numpy as np
import pytest

from frmd.mp import (
    MPConfig,
    BoundaryState,
    build_basis,
    decode,
    decode_affine_map,
    reference_integrate,
    solve_boundary,
)
from frmd.errors import ConfigError
from frmd.metrics import nonsmooth_count


@pytest.fixture(scope="module")
def tables():
    return build_basis(MPConfig())


def random_weights(rng, cfg, rbf_scale=20.0):
    w = rng.uniform(-rbf_scale, rbf_scale, (cfg.dof, cfg.n_weights))
    w[:, -1] = rng.uniform(-1.0, 1.0, cfg.dof)
    return w


def test_basis_shapes(tables):
    assert tables.pos_basis.shape == (200, 9)
    assert tables.vel_basis.shape == (200, 9)
    assert len(tables.grid) == 200 and tables.grid[0] == 0.0


def test_complementary_values_at_zero(tables):
    assert tables.y1[0] == 1.0
    assert tables.y2[0] == 0.0
    assert tables.dy2[0] == 1.0
    assert tables.dy1[0] == -tables.config.lam


def test_config_validation():
    with pytest.raises(ConfigError):
        MPConfig(alpha=-1.0)
    with pytest.raises(ConfigError):
        MPConfig(grid_points=1)
    with pytest.raises(ConfigError):
        MPConfig(n_basis=0)


def test_basis_matches_refined_quadrature(tables):
    # independent oracle: same integrals on a 10x denser grid; every 10th
    # point of the fine table coincides with the coarse grid
    cfg = tables.config
    fine = build_basis(MPConfig(grid_points=(cfg.grid_points - 1) * 10 + 1))
    assert np.abs(tables.pos_basis - fine.pos_basis[::10]).max() < 1e-4
    assert np.abs(tables.vel_basis - fine.vel_basis[::10]).max() < 1e-4


def test_vel_basis_is_derivative_of_pos_basis(tables):
    # centered differences of pos_basis approach vel_basis at O(h^2):
    # doubling the grid density must shrink the residual ~4x
    errs = []
    for gp in (200, 400):
        tab = build_basis(MPConfig(grid_points=gp))
        g = tab.grid
        fd = (tab.pos_basis[2:] - tab.pos_basis[:-2]) / (g[2:] - g[:-2])[:, None]
        errs.append(np.abs(fd - tab.vel_basis[1:-1]).max())
    assert errs[0] < 1e-2
    assert errs[0] / errs[1] >= 3.5


def test_wronskian_nonzero(tables):
    w = tables.y1 * tables.dy2 - tables.y2 * tables.dy1
    assert np.all(np.abs(w) > 0.0)
    lam = tables.config.lam
    assert np.allclose(w, np.exp(-2.0 * lam * tables.grid))


def test_solve_boundary_zero_case(tables):
    bc = BoundaryState(0.0, np.zeros(2), np.zeros(2))
    c1, c2 = solve_boundary(tables, bc, np.zeros((2, 9)))
    assert np.allclose(c1, 0.0) and np.allclose(c2, 0.0)


def test_solve_boundary_unit_position(tables):
    lam = tables.config.lam
    bc = BoundaryState(0.0, np.ones(2), np.zeros(2))
    c1, c2 = solve_boundary(tables, bc, np.zeros((2, 9)))
    assert np.allclose(c1, 1.0)
    assert np.allclose(c2, lam)


def test_boundary_exactness(tables):
    # substitute the solved coefficients back through decode at t_b
    for seed in range(20):
        rng = np.random.default_rng(seed)
        cfg = tables.config
        bc = BoundaryState(rng.uniform(0.0, 1.5), rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2))
        w = random_weights(rng, cfg)
        traj = decode(tables, bc, w, np.array([bc.t_b]))
        assert np.abs(traj.positions[0] - bc.pos).max() < 1e-9
        assert np.abs(traj.velocities[0] - bc.vel).max() < 1e-9


def test_decode_zero_weights_is_homogeneous(tables):
    bc = BoundaryState(0.0, np.array([0.7, -0.4]), np.zeros(2))
    times = tables.grid[::4]  # table values are exact at nodes
    traj = decode(tables, bc, np.zeros((2, 9)), times)
    assert np.allclose(traj.positions[0], bc.pos)
    lam = tables.config.lam
    expected = bc.pos[None, :] * ((1.0 + lam * times) * np.exp(-lam * times))[:, None]
    assert np.abs(traj.positions - expected).max() < 1e-12
    # settles toward the origin attractor
    assert np.abs(traj.positions[-1]).max() < 0.05


def test_decode_affinity(tables):
    rng = np.random.default_rng(3)
    cfg = tables.config
    bc = BoundaryState(0.2, rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2))
    times = np.linspace(0.2, 1.9, 25)
    w1 = random_weights(rng, cfg)
    w2 = random_weights(rng, cfg)
    zero = np.zeros((2, 9))
    resid = (
        decode(tables, bc, w1 + w2, times).positions
        - decode(tables, bc, w1, times).positions
        - decode(tables, bc, w2, times).positions
        + decode(tables, bc, zero, times).positions
    )
    assert np.abs(resid).max() < 1e-10


def test_decode_matches_rk4_oracle(tables):
    cfg = tables.config
    times = np.linspace(0.05, 0.6, 12)
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        w = random_weights(rng, cfg, rbf_scale=25.0)
        bc = BoundaryState(0.0, rng.uniform(-1, 1, 2), rng.uniform(-0.6, 0.6, 2))
        dec = decode(tables, bc, w, times)
        ref = reference_integrate(cfg, bc, w, times)
        worst = max(worst, np.abs(dec.positions - ref.positions).max())
    assert worst < 1e-3


def test_decode_times_outside_span(tables):
    bc = BoundaryState(0.5, np.zeros(2), np.zeros(2))
    with pytest.raises(ValueError):
        decode(tables, bc, np.zeros((2, 9)), np.array([0.1]))  # before t_b
    with pytest.raises(ValueError):
        decode(tables, bc, np.zeros((2, 9)), np.array([5.0]))  # past tau_s


def test_decode_rejects_bad_weights(tables):
    bc = BoundaryState(0.0, np.zeros(2), np.zeros(2))
    with pytest.raises(ValueError):
        decode(tables, bc, np.zeros((3, 9)), np.array([0.5]))
    bad = np.zeros((2, 9))
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        decode(tables, bc, bad, np.array([0.5]))


def test_affine_map_matches_decode(tables):
    rng = np.random.default_rng(11)
    cfg = tables.config
    bc = BoundaryState(0.1, rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2))
    times = np.linspace(0.1, 1.5, 14)
    h, b = decode_affine_map(tables, bc, times)
    for _ in range(10):
        w = random_weights(rng, cfg)
        direct = decode(tables, bc, w, times).positions.ravel()
        assert np.abs(h @ w.ravel() + b - direct).max() < 1e-12


def test_affine_map_offset_and_columns(tables):
    times = np.linspace(0.0, 1.0, 8)
    zero_bc = BoundaryState(0.0, np.zeros(2), np.zeros(2))
    h, b = decode_affine_map(tables, zero_bc, times)
    zero_traj = decode(tables, zero_bc, np.zeros((2, 9)), times).positions.ravel()
    assert np.abs(b - zero_traj).max() < 1e-12  # == 0 here
    for j in (0, 5, 17):
        e = np.zeros(18)
        e[j] = 1.0
        col_traj = decode(tables, zero_bc, e.reshape(2, 9), times).positions.ravel()
        assert np.abs(h[:, j] - (col_traj - zero_traj)).max() < 1e-12


def test_reference_integrate_trivial_cases():
    cfg = MPConfig()
    times = np.linspace(0.0, 1.9, 30)
    zero = reference_integrate(cfg, BoundaryState(0.0, np.zeros(2), np.zeros(2)), np.zeros((2, 9)), times)
    assert np.abs(zero.positions).max() == 0.0

    w = np.zeros((2, 9))
    w[:, -1] = [0.5, -0.3]
    traj = reference_integrate(cfg, BoundaryState(0.0, np.zeros(2), np.zeros(2)), w, np.array([cfg.tau_s]))
    assert np.abs(traj.positions[-1] - w[:, -1]).max() < 0.05 * np.abs(w[:, -1]).min()


def test_velocity_consistency_fd_convergence(tables):
    # sample on grid-aligned times so table interpolation is exact, then
    # halve the step: centered differences must tighten ~4x (>=3.5x)
    rng = np.random.default_rng(5)
    w = random_weights(rng, tables.config)
    bc = BoundaryState(0.0, rng.uniform(-1, 1, 2), rng.uniform(-0.5, 0.5, 2))
    errs = []
    for stride in (2, 1):
        times = tables.grid[::stride]
        traj = decode(tables, bc, w, times)
        dt = times[2:] - times[:-2]
        fd = (traj.positions[2:] - traj.positions[:-2]) / dt[:, None]
        errs.append(np.abs(fd - traj.velocities[1:-1]).max())
    assert errs[0] / errs[1] >= 3.5


def test_bounded_weight_decodes_are_smooth(tables):
    # reach-task geometry: start at rest, goal attractor separated >= 0.5
    times = 0.05 * np.arange(1, 13)
    rng = np.random.default_rng(0)
    for _ in range(200):
        while True:
            start = rng.uniform(-0.8, 0.8, 2)
            goal = rng.uniform(-0.8, 0.8, 2)
            if np.linalg.norm(goal - start) >= 0.5:
                break
        w = rng.uniform(-1.0, 1.0, (2, 9))
        w[:, -1] = goal
        traj = decode(tables, BoundaryState(0.0, start, np.zeros(2)), w, times, with_velocities=False)
        assert nonsmooth_count(traj.positions).nonsmooth_count == 0
