import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fbsdelab.containers import path_bundle_bytes, path_bundle_from_bytes, path_sample_csv
from fbsdelab.errors import PathEscape
from fbsdelab.fbsde import (bsde_residual, decouple_paths, girsanov_weight, simulate_forward,
                            solve_fbsde, translate)
from fbsdelab.model import FbsdeSpec
from fbsdelab.presets import build_preset
from fbsdelab.rng import normals
from fbsdelab.solver import Grid, GridSolution, solve

from conftest import scalar_spec, unit_sigma
from oracles import heat_gradient


def no_drift(t, x, y, z):
    return np.zeros((len(t), x.shape[1]))


def no_generator(n):
    return lambda t, x, y, z: np.zeros((len(t), n))


def heat_fbsde(terminal=np.sin):
    return FbsdeSpec(1, 1, 1.0, no_drift, unit_sigma, no_generator(1), terminal)


def cole_hopf_fbsde():
    return FbsdeSpec(1, 1, 1.0, no_drift, unit_sigma, lambda t, x, y, z: 0.5 * z[:, :, 0] ** 2, np.sin)


def heat_grid(dx, dt=None):
    return Grid.make((-6.0,), (6.0,), dx, 1.0, dt)


@pytest.fixture(scope="module")
def brownian(heat):
    data, _, sol = heat
    return simulate_forward(sol, data.spec, (0.0, (0.0,)), 100_000, seed=7)


class TestTranslate:
    def test_drift_free(self):
        gen = lambda t, x, y, z: z[:, :, 0] * 3.0 + y
        fb = FbsdeSpec(1, 1, 1.0, no_drift, lambda t, x, y: np.full((len(t), 1, 1), 1.5), gen, np.sin)
        spec = translate(fb)
        t, x, u = np.zeros(4), np.zeros((4, 1)), np.ones((4, 1))
        p = np.linspace(-1, 1, 4).reshape(4, 1, 1)
        np.testing.assert_allclose(spec.eval_driver(t, x, u, p), 4.5 * p[:, :, 0] + 1.0)

    def test_identity_diffusion(self):
        drift = lambda t, x, y, z: np.stack([np.sin(z[:, 0, 0]), z[:, 0, 1] ** 2], axis=1)
        fb = FbsdeSpec(2, 1, 1.0, drift, unit_sigma, no_generator(1), lambda x: x[:, :1], x0=(0.0, 0.0))
        rng = np.random.default_rng(3)
        p = rng.normal(size=(50, 1, 2))
        f = translate(fb).eval_driver(np.zeros(50), rng.normal(size=(50, 2)), np.zeros((50, 1)), p)
        expect = p[:, 0, 0] * np.sin(p[:, 0, 0]) + p[:, 0, 1] * p[:, 0, 1] ** 2
        np.testing.assert_allclose(f[:, 0], expect)

    def test_scaled_diffusion_hand_value(self):
        fb = FbsdeSpec(2, 1, 1.0, no_drift, lambda t, x, y: 2 * unit_sigma(t, x, y),
                       lambda t, x, y, z: z[:, :, 0], lambda x: x[:, :1], x0=(0.0, 0.0))
        p = np.array([[[1.0, 0.0]]])
        f = translate(fb).eval_driver(np.zeros(1), np.zeros((1, 2)), np.zeros((1, 1)), p)
        assert f[0, 0] == 2.0


class TestForward:
    def test_brownian_moments(self, brownian):
        xt = brownian.x_paths[:, -1, 0]
        se = xt.std() / np.sqrt(len(xt))
        assert abs(xt.mean()) <= 3 * se
        assert abs(xt.var() - 1.0) <= 0.05

    def test_gaussian_absolute_increment(self, brownian):
        k_s, k_tau = len(brownian.t_nodes) - 1, len(brownian.t_nodes) // 2
        gap = brownian.t_nodes[k_s] - brownian.t_nodes[k_tau]
        inc = np.abs(brownian.x_paths[:, k_s, 0] - brownian.x_paths[:, k_tau, 0])
        assert abs(inc.mean() - np.sqrt(2 * gap / np.pi)) <= 3 * inc.std() / np.sqrt(len(inc))

    def test_increment_covariance(self, brownian):
        db = brownian.brownian_increments[:, :, 0]
        assert abs(db.mean()) <= 3 * np.sqrt(brownian.dt / db.size)
        assert abs(db.var() / brownian.dt - 1) <= 0.01

    def test_heat_martingale(self, brownian):
        gap = brownian.y_paths[:, -1, 0] - brownian.y_paths[:, 0, 0]
        assert abs(gap.mean()) <= 3 * gap.std() / np.sqrt(len(gap)) + 1e-5
        for k in range(0, len(brownian.t_nodes), 32):
            g = brownian.y_paths[:, k, 0] - brownian.y_paths[:, 0, 0]
            assert abs(g.mean()) <= 3 * g.std() / np.sqrt(len(g)) + 1e-5

    def test_escape_raises(self):
        spec = scalar_spec()
        sol = solve(spec, Grid.make((-0.5,), (0.5,), 2 ** -4, 1.0))
        with pytest.raises(PathEscape):
            simulate_forward(sol, spec, (0.0, (0.0,)), 1000, seed=1)

    def test_start_validation(self, heat):
        data, _, sol = heat
        with pytest.raises(ValueError):
            simulate_forward(sol, data.spec, (0.0, (7.5,)), 10, seed=1)
        with pytest.raises(ValueError):
            simulate_forward(sol, data.spec, (0.3333, (0.0,)), 10, seed=1)

    def test_late_start(self, heat):
        data, grid, sol = heat
        b = simulate_forward(sol, data.spec, (0.5, (1.0,)), 200, seed=3)
        k0 = b.start_index
        assert grid.t_nodes[k0] == 0.5
        assert np.all(b.x_paths[:, :k0 + 1] == 1.0)
        assert np.all(b.brownian_increments[:, :k0] == 0.0)


class TestDecouple:
    def test_affine(self):
        spec = scalar_spec(terminal=lambda x: x)
        grid = heat_grid(2 ** -5)
        u = GridSolution.from_function(grid, lambda t, x: x.copy())
        b = simulate_forward(u, spec, (0.0, (0.0,)), 500, seed=2)
        np.testing.assert_allclose(b.y_paths, b.x_paths, atol=1e-12)
        np.testing.assert_allclose(b.z_paths, 1.0, atol=1e-12)

    def test_constant(self):
        spec = scalar_spec(terminal=lambda x: np.full_like(x, 2.0))
        grid = heat_grid(2 ** -5)
        u = GridSolution.from_function(grid, lambda t, x: np.full((len(t), 1), 2.0))
        b = simulate_forward(u, spec, (0.0, (0.0,)), 500, seed=2)
        assert np.all(b.z_paths == 0.0) and np.all(b.y_paths == 2.0)

    def test_heat_z(self, brownian):
        b = brownian
        sub = slice(0, 5000)
        t = b.t_nodes[None, :]
        exact = heat_gradient(t, b.x_paths[sub, :, 0])
        assert np.max(np.abs(b.z_paths[sub, :, 0, 0] - exact)) <= 1e-3

    def test_redecouple_is_idempotent(self, heat, brownian):
        data, _, sol = heat
        again = decouple_paths(sol, data.spec, brownian.replace(y_paths=None, z_paths=None))
        np.testing.assert_array_equal(again.y_paths, brownian.y_paths)


class TestResidual:
    def test_telescoping_roundoff(self):
        fb = heat_fbsde(terminal=lambda x: x)
        spec = translate(fb)
        u = GridSolution.from_function(heat_grid(2 ** -5), lambda t, x: x.copy())
        b = simulate_forward(u, spec, (0.0, (0.0,)), 2000, seed=5)
        assert bsde_residual(b, fb).residual_l2 <= 1e-12

    def test_heat_strong_order_half(self):
        fb = heat_fbsde()
        res = []
        for dt in (2 ** -5, 2 ** -6, 2 ** -7):
            r = solve_fbsde(fb, heat_grid(dt), 10_000, seed=11)
            res.append(r.residual.residual_l2)
        assert res[0] > res[1] > res[2]
        assert 1.2 <= res[1] / res[2] <= 2.5

    def test_requires_decoupled(self, brownian):
        with pytest.raises(ValueError):
            bsde_residual(brownian.replace(y_paths=None), heat_fbsde())

    def test_cole_hopf_tolerance(self):
        r = solve_fbsde(cole_hopf_fbsde(), Grid.make((-6.0,), (6.0,), 2 ** -9, 1.0), 10_000, seed=42)
        assert r.residual.residual_l2 <= 0.05
        assert r.bundle.escape_fraction < 0.01


class TestGirsanov:
    def test_zero_drift(self, brownian):
        w = girsanov_weight(brownian, lambda t, x: np.zeros_like(x)).weights()
        assert np.all(w == 1.0)

    def test_constant_drift_mean_shift(self, brownian):
        a = 0.4
        w = girsanov_weight(brownian, lambda t, x: np.full_like(x, a)).weights()
        n = len(w)
        assert np.all(w > 0)
        assert abs(w.mean() - 1) <= 3 * w.std() / np.sqrt(n)
        wx = w * brownian.x_paths[:, -1, 0]
        assert abs(wx.mean() - a * 1.0) <= 3 * wx.std() / np.sqrt(n)

    def test_indicator_variance(self, brownian):
        c = 0.8
        b = girsanov_weight(brownian, lambda t, x: np.where(t[:, None] < 0.5, c, 0.0))
        assert abs(np.var(b.girsanov_logweight) / (c * c * 0.5) - 1) <= 0.05


class TestSolveFbsde:
    def test_heat_composition(self):
        sol, b, res = solve_fbsde(heat_fbsde(), heat_grid(2 ** -7), 5000, seed=1)
        assert res.residual_l2 <= 0.05
        t = b.t_nodes[None, :]
        assert np.max(np.abs(b.z_paths[:, :, 0, 0] - heat_gradient(t, b.x_paths[:, :, 0]))) <= 1e-3

    def test_constant_terminal(self):
        fb = heat_fbsde(terminal=lambda x: np.full_like(x, -0.25))
        sol, b, res = solve_fbsde(fb, heat_grid(2 ** -5), 1000, seed=1)
        np.testing.assert_allclose(b.y_paths, -0.25, atol=1e-14)
        assert np.max(np.abs(b.z_paths)) <= 1e-13
        assert res.residual_l2 <= 1e-12

    def test_quadratic_preset(self):
        data = build_preset("fbsde-quadratic")
        grid = Grid.from_box(data.box, 2 ** -8, 1.0)
        res = solve_fbsde(data.fbsde, grid, 10_000, seed=42).residual
        assert res.residual_l2 <= 0.05


class TestDeterminism:
    def test_worker_independence(self, heat):
        data, _, sol = heat
        one = simulate_forward(sol, data.spec, (0.0, (0.0,)), 10_000, seed=9, workers=1)
        four = simulate_forward(sol, data.spec, (0.0, (0.0,)), 10_000, seed=9, workers=4)
        assert path_bundle_bytes(one) == path_bundle_bytes(four)

    def test_seed_changes_paths(self, heat):
        data, _, sol = heat
        a = simulate_forward(sol, data.spec, (0.0, (0.0,)), 100, seed=1)
        b = simulate_forward(sol, data.spec, (0.0, (0.0,)), 100, seed=2)
        assert not np.array_equal(a.x_paths, b.x_paths)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 63), st.integers(0, 1000), st.integers(1, 200), st.integers(1, 4))
    def test_rng_partition_invariance(self, seed, step, cut, dim):
        whole = normals(seed, step, 0, 201, dim)
        parts = np.vstack([normals(seed, step, 0, cut, dim), normals(seed, step, cut, 201, dim)])
        np.testing.assert_array_equal(whole, parts)

    def test_rng_rejects_wide(self):
        with pytest.raises(ValueError):
            normals(0, 0, 0, 3, 5)


class TestPathContainer:
    def test_roundtrip(self, heat):
        data, _, sol = heat
        b = simulate_forward(sol, data.spec, (0.25, (0.5,)), 50, seed=2 ** 63 + 5)
        b = girsanov_weight(b, lambda t, x: np.sin(x))
        raw = path_bundle_bytes(b)
        assert raw[:8] == b"PATHBND1"
        back = path_bundle_from_bytes(raw)
        assert back.seed == b.seed and back.start_index == b.start_index
        for name in ("t_nodes", "x_paths", "brownian_increments", "escaped", "y_paths", "z_paths",
                     "girsanov_logweight"):
            np.testing.assert_array_equal(getattr(back, name), getattr(b, name))

    def test_sample_csv(self, heat):
        data, grid, sol = heat
        b = simulate_forward(sol, data.spec, (0.0, (0.0,)), 20, seed=2)
        lines = path_sample_csv(b, 3).splitlines()
        assert lines[0] == "path,t,x1,y1,escaped"
        assert len(lines) == 1 + 3 * (grid.steps + 1)
