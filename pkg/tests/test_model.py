import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fbsdelab.errors import CallbackFailure, DimensionMismatch, QuadratureBudgetExceeded
from fbsdelab.model import (HypothesisConstants, Mode, ProblemSpec, SamplingBox, bump_rule,
                            mollify_driver, project_ball, truncate_driver, validate_spec)

from conftest import scalar_spec, unit_sigma, zero_driver


def identity_driver(t, x, u, p):
    return p[:, :, 0]


def _eval(spec, p):
    p = np.atleast_2d(np.asarray(p, float))
    n = len(p)
    return spec.eval_driver(np.zeros(n), np.zeros((n, 1)), np.zeros((n, p.shape[1])),
                            p[:, :, None])


class TestTruncation:
    def test_inside_ball_identity(self):
        spec = ProblemSpec(1, 2, 1.0, unit_sigma, identity_driver, lambda x: np.hstack([x, x]))
        np.testing.assert_array_equal(_eval(truncate_driver(spec, 2.0), [1.0, 0.0]), [[1.0, 0.0]])

    def test_outside_ball_projects(self):
        spec = ProblemSpec(1, 2, 1.0, unit_sigma, identity_driver, lambda x: np.hstack([x, x]))
        np.testing.assert_allclose(_eval(truncate_driver(spec, 2.0), [4.0, 0.0]), [[2.0, 0.0]])

    def test_nonexpansive_random_pairs(self):
        rng = np.random.default_rng(7)
        p = rng.normal(scale=3.0, size=(10_000, 2, 2))
        q = rng.normal(scale=3.0, size=(10_000, 2, 2))
        lhs = np.linalg.norm((project_ball(p, 2.0) - project_ball(q, 2.0)).reshape(10_000, -1), axis=1)
        rhs = np.linalg.norm((p - q).reshape(10_000, -1), axis=1)
        assert np.all(lhs <= rhs * (1 + 1e-12) + 1e-15)

    @given(st.floats(0.1, 10), st.floats(0.0, 5.0), st.lists(st.floats(-5, 5), min_size=2, max_size=2))
    def test_idempotent_for_larger_levels(self, k, extra, vec):
        p = np.array(vec, float).reshape(1, 2, 1)
        once = project_ball(p, k)
        np.testing.assert_array_equal(project_ball(once, k + extra), once)

    def test_sigma_and_terminal_untouched(self):
        spec = scalar_spec(lambda t, x, u, p: p[:, :, 0] ** 2)
        tr = truncate_driver(spec, 1.0)
        assert tr.sigma is spec.sigma and tr.terminal is spec.terminal

    def test_rejects_nonpositive_level(self):
        with pytest.raises(ValueError):
            truncate_driver(scalar_spec(), 0.0)


class TestMollification:
    def test_constant_preserved(self):
        spec = scalar_spec(lambda t, x, u, p: np.full((len(t), 1), 3.0))
        m = mollify_driver(spec, 0.1)
        np.testing.assert_allclose(_eval(m, [[0.3]]), [[3.0]], rtol=0, atol=1e-13)

    def test_affine_exact_at_center(self):
        spec = scalar_spec(lambda t, x, u, p: 2.0 * p[:, :, 0] + 1.0)
        m = mollify_driver(spec, 0.1)
        np.testing.assert_allclose(_eval(m, [[0.0]]), [[1.0]], atol=1e-13)
        np.testing.assert_allclose(_eval(m, [[0.7]]), [[2.4]], atol=1e-12)

    def test_quadratic_error_decreases(self):
        spec = scalar_spec(lambda t, x, u, p: p[:, :, 0] ** 2)
        probes = np.linspace(-2, 2, 9)[:, None]
        errs = [np.max(np.abs(_eval(mollify_driver(spec, e), probes) - probes ** 2))
                for e in (0.1, 0.05, 0.025)]
        assert errs[0] > errs[1] > errs[2]

    def test_growth_class_preserved(self):
        spec = scalar_spec(lambda t, x, u, p: 1.0 + p[:, :, 0] ** 2)
        eps = 0.1
        m = mollify_driver(spec, eps)
        p = np.linspace(-3, 3, 61)[:, None]
        assert np.all(np.abs(_eval(m, p)) <= (1 + eps) ** 2 * (1 + p ** 2))

    def test_time_clamped_outside_horizon(self):
        spec = scalar_spec(lambda t, x, u, p: t[:, None].copy())
        m = mollify_driver(spec, 0.2)
        out = m.eval_driver(np.array([0.0]), np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1, 1)))
        assert 0.0 < out[0, 0] < 0.2

    def test_budget(self):
        with pytest.raises(QuadratureBudgetExceeded):
            bump_rule(9, nodes_per_axis=5, node_budget=1000)

    def test_rule_normalised(self):
        nodes, w = bump_rule(3)
        assert abs(w.sum() - 1.0) < 1e-14
        assert np.all(np.linalg.norm(nodes, axis=1) < 1.0)

    @pytest.mark.parametrize("eps", [0.0, 1.0, -0.1])
    def test_eps_range(self, eps):
        with pytest.raises(ValueError):
            mollify_driver(scalar_spec(), eps)


class TestValidation:
    def test_identity_passes(self, small_box):
        rep = validate_spec(scalar_spec(), small_box, HypothesisConstants(c_sigma=1.0))
        assert rep.ok and rep.issues == ()

    def test_zero_sigma_flagged(self, small_box):
        spec = scalar_spec(sigma=lambda t, x, u: np.zeros((len(t), 1, 1)))
        rep = validate_spec(spec, small_box, HypothesisConstants())
        assert not rep.ok and "ellipticity" in rep.kinds()

    def test_growing_sigma_flagged_at_box_corner(self):
        spec = scalar_spec(sigma=lambda t, x, u: (1.0 + np.abs(u[:, 0])).reshape(-1, 1, 1))
        box = SamplingBox((-1.0,), (1.0,), u_radius=1.0)
        rep = validate_spec(spec, box, HypothesisConstants(c_sigma=2.0))
        assert "ellipticity" in rep.kinds()
        worst = [i for i in rep.issues if i.kind == "ellipticity"]
        assert any(abs(abs(i.point["u"][0]) - 1.0) < 1e-12 for i in worst if i.point)

    def test_nan_flagged(self, small_box):
        spec = scalar_spec(lambda t, x, u, p: np.where(x > 0.5, np.nan, 0.0))
        assert "nonfinite" in validate_spec(spec, small_box).kinds()

    def test_dimension_flagged(self, small_box):
        spec = scalar_spec(lambda t, x, u, p: np.zeros((len(t), 3)))
        assert "dimension" in validate_spec(spec, small_box).kinds()

    def test_raising_callback_echoes_input(self, small_box):
        def bad(t, x, u, p):
            raise RuntimeError("boom")
        with pytest.raises(CallbackFailure) as info:
            validate_spec(scalar_spec(bad), small_box)
        assert info.value.point is not None

    def test_pure(self, small_box):
        spec = scalar_spec(lambda t, x, u, p: p[:, :, 0] ** 2)
        a = validate_spec(spec, small_box, HypothesisConstants()).to_dict()
        b = validate_spec(spec, small_box, HypothesisConstants()).to_dict()
        assert a == b


class TestTypes:
    def test_system2_requires_scalar_space(self):
        with pytest.raises((ValueError, DimensionMismatch)):
            ProblemSpec(2, 1, 1.0, lambda t, x, u, p: np.ones(len(t)), zero_driver(1),
                        lambda x: x[:, :1], Mode.SYSTEM2)

    @pytest.mark.parametrize("kw", [{"epsilon_bf": 1.0}, {"alpha0": 0.0}, {"c_sigma": 0.5},
                                    {"c_f": -1.0}])
    def test_constants_validated(self, kw):
        with pytest.raises(ValueError):
            HypothesisConstants(**kw)

    def test_box_invariants(self):
        with pytest.raises(ValueError):
            SamplingBox((1.0,), (0.0,))
        with pytest.raises(ValueError):
            SamplingBox((0.0,), (1.0,), x_count=1)

    def test_box_points_deterministic(self):
        box = SamplingBox((-1.0, -1.0), (1.0, 1.0))
        a, b = box.points(2, 1.0), box.points(2, 1.0)
        np.testing.assert_array_equal(a.p, b.p)
        np.testing.assert_array_equal(a.x, b.x)
        assert np.all(np.abs(a.x) <= 1.0)
