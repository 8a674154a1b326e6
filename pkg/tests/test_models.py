"""Model interface: derivative suppliers, finite differences, built-ins."""

import math
from fractions import Fraction

import numpy as np
import pytest

from orthomom.models import (
    DerivativeFallbackWarning,
    DerivativeTensor,
    ModelSpec,
    Polynomial,
    builtin_generated_regressor,
    builtin_heterocoef,
    builtin_linear_iv,
    builtin_neyman_scott,
    fd_derivative,
    get_model,
    slot_asymmetry,
    zeros_tensor,
)
from orthomom.verification import (
    dgp_generated_regressor,
    dgp_heterocoef,
    dgp_linear_iv,
    dgp_neyman_scott,
    get_fixture,
)


class TestPolynomial:
    def test_from_taylor(self):
        p = Polynomial.from_taylor(Fraction(1, 2), [1, 2, 6])
        assert p.derivative(Fraction(1, 2), 0) == 1
        assert p.derivative(Fraction(1, 2), 1) == 2
        assert p.derivative(Fraction(1, 2), 2) == 6
        assert p.derivative(Fraction(1, 2), 3) == 0

    def test_horner_matches_numpy(self):
        p = Polynomial((1.0, -2.0, 0.5, 3.0))
        for u in (-1.3, 0.0, 0.7):
            assert p(u) == pytest.approx(np.polynomial.polynomial.polyval(u, p.coefficients))


def _random_inputs(rng, model, scale=1.0):
    obs = tuple(rng.uniform(-1, 2) for _ in range(model.obs_dim))
    theta = tuple(rng.uniform(-0.5, 0.5) for _ in range(model.d_theta))
    eta = tuple(rng.uniform(-scale, scale) for _ in range(model.d_eta))
    return obs, theta, eta


class TestFiniteDifferences:
    def test_affine_g_second_derivative_vanishes(self, rng):
        model = builtin_linear_iv(2)
        obs, theta, eta = _random_inputs(rng, model)
        fd = fd_derivative(model, "g", obs, theta, eta, 2)
        assert np.max(np.abs(fd.entries)) < 1e-8

    def test_quadratic_form_hessian(self):
        d = 3
        dmat = [[0] * d for _ in range(d)]
        dmat[1][1] = 1
        model = builtin_heterocoef(d, target="second_moment", d_matrix=dmat)
        fd = fd_derivative(model, "m", (0.0,) * 4, (0.0,), (0.1, -0.2, 0.3), 2)
        expected = np.zeros((1, d, d))
        expected[0, 1, 1] = 2.0
        assert np.max(np.abs(fd.entries - expected)) < 1e-7

    def test_exponential_third_derivative(self):
        def m_deriv(obs, theta, eta, order):
            out = math.exp(eta[0])
            for _ in range(order):
                out = [out]
            return out

        model = ModelSpec(
            name="exp-target",
            d_eta=1,
            d_g=1,
            d_lambda=1,
            d_theta=1,
            obs_dim=1,
            g_deriv=lambda obs, theta, eta, order: [obs[0] - eta[0]]
            if order == 0
            else ([[-1]] if order == 1 else zeros_tensor((1,) + (1,) * order)),
            m_deriv=m_deriv,
            lambda_map=lambda lam: [[lam[0]]],
            max_order=0,
        )
        fd = fd_derivative(model, "m", (0.0,), (0.0,), (0.0,), 3)
        assert fd.entries[0, 0, 0, 0] == pytest.approx(1.0, abs=1e-5)

    def test_depth_cap(self):
        model = builtin_linear_iv(1)
        with pytest.raises(ValueError):
            fd_derivative(model, "g", (0.0,) * 4, (0.0,), (0.0,), 5)

    def test_symmetry_of_fd_tensor(self, rng):
        f = Polynomial((0.0, 0.3, -0.7, 0.2, 0.05))
        model = builtin_generated_regressor(f, d_eta=2)
        obs, theta, eta = _random_inputs(rng, model)
        fd = fd_derivative(model, "m", obs, theta, eta, 3)
        assert fd.max_asymmetry() == 0.0
        assert fd.order == 3 and fd.output_dim == 1

    @pytest.mark.parametrize(
        "maker,dgp_maker",
        [
            (lambda: builtin_linear_iv(1), lambda: dgp_linear_iv(1)),
            (
                lambda: builtin_generated_regressor(
                    Polynomial((0, 1, Fraction(1, 2), Fraction(1, 6), Fraction(1, 24), Fraction(1, 120)))
                ),
                lambda: dgp_generated_regressor(
                    Polynomial((0, 1, Fraction(1, 2), Fraction(1, 6), Fraction(1, 24), Fraction(1, 120)))
                ),
            ),
            (
                lambda: builtin_neyman_scott(Polynomial((0, 0, 1, Fraction(1, 3), Fraction(1, 12), Fraction(1, 60)))),
                lambda: dgp_neyman_scott(Polynomial((0, 0, 1, Fraction(1, 3), Fraction(1, 12), Fraction(1, 60)))),
            ),
            (
                lambda: builtin_heterocoef(1, target="second_moment"),
                dgp_heterocoef,
            ),
        ],
    )
    def test_analytic_matches_fd_all_orders(self, rng, maker, dgp_maker):
        model = maker()
        dgp = dgp_maker()
        obs = tuple(float(v) for v in dgp.atoms[0][0])
        theta = tuple(float(v) for v in dgp.theta0)
        eta = tuple(0.9 * float(v) for v in dgp.eta0)
        for which in ("g", "m"):
            supplier = model.g_derivative if which == "g" else model.m_derivative
            for order in range(1, 5):
                analytic = np.asarray(supplier(obs, theta, eta, order), dtype=float)
                fd = fd_derivative(model, which, obs, theta, eta, order).entries
                if which == "m":
                    fd = fd[0]
                scale = max(1.0, float(np.max(np.abs(analytic))))
                assert np.max(np.abs(analytic - fd)) / scale < 1e-5, (
                    model.name,
                    which,
                    order,
                )


class TestBuiltins:
    def test_linear_iv_lambda_truth(self):
        dgp = dgp_linear_iv(1)
        model = builtin_linear_iv(1)
        dgp.validate(model)
        exx = sum(p * obs[3] ** 2 for obs, p in dgp.atoms)
        assert dgp.lam0 == (-1 / exx,)

    def test_linear_iv_regression_special_case(self):
        # z == d drops to ordinary regression; the same truths still validate
        dgp = dgp_linear_iv(1)
        atoms = tuple(
            ((obs[0], obs[1], obs[1], obs[3]), p) for obs, p in dgp.atoms
        )
        from orthomom.verification import DiscreteDGP

        reg = DiscreteDGP(
            atoms=atoms, theta0=dgp.theta0, eta0=dgp.eta0, lam0=dgp.lam0
        )
        reg.validate(builtin_linear_iv(1))

    def test_linear_iv_jacobian_constant_in_eta(self, rng):
        model = builtin_linear_iv(2)
        obs, theta, _ = _random_inputs(rng, model)
        j1 = model.g_deriv(obs, theta, (0.0, 0.0), 1)
        j2 = model.g_deriv(obs, theta, (1.3, -0.4), 1)
        assert j1 == j2
        assert model.g_deriv(obs, theta, (0.1, 0.2), 3) == zeros_tensor((2, 2, 2, 2))

    def test_generated_regressor(self):
        ident = Polynomial((0, 1))
        model = builtin_generated_regressor(ident)
        assert model.m_deriv((1.0, 2.0), (0.0,), (0.3,), 2) == [[0]]
        square = Polynomial((0, 0, 1))
        model2 = builtin_generated_regressor(square, d_eta=2)
        obs = (1.0, 0.5, -1.0)
        hess = model2.m_deriv(obs, (0.0,), (0.2, 0.1), 2)
        x = obs[1:]
        for a in range(2):
            for b in range(2):
                assert hess[a][b] == pytest.approx(2 * x[a] * x[b])
        dgp = dgp_generated_regressor(square)
        dgp.validate(builtin_generated_regressor(square))

    def test_heterocoef_targets(self):
        model = builtin_heterocoef(2, target="second_moment", component=1)
        eta = (0.3, -0.5)
        assert model.m_deriv((0,) * 3, (0.0,), eta, 0) == pytest.approx(0.25)
        grad = model.m_deriv((0,) * 3, (0.0,), eta, 1)
        assert grad == [0, -1.0]
        dgp = dgp_heterocoef()
        dgp.validate(builtin_heterocoef(1, target="second_moment"))

    def test_neyman_scott_lambda_known(self):
        model = builtin_neyman_scott(Polynomial((0, 0, 1)))
        assert model.lambda_known == (-1,)
        dgp = dgp_neyman_scott(Polynomial((0, 0, 1)))
        dgp.validate(model)

    def test_get_model(self):
        assert get_model("heterocoef").name == "heterocoef"
        assert get_model("linear-iv", n_controls=2).d_eta == 2
        with pytest.raises(ValueError):
            get_model("nope")

    def test_d_g_at_least_d_eta_enforced(self):
        with pytest.raises(ValueError):
            ModelSpec(
                name="bad",
                d_eta=2,
                d_g=1,
                d_lambda=2,
                d_theta=1,
                obs_dim=1,
                g_deriv=lambda *a: [0],
                m_deriv=lambda *a: 0,
                lambda_map=lambda lam: [[lam[0]]],
                max_order=1,
            )

    def test_fallback_warning(self):
        m = Polynomial((0, 0, 1))
        model = builtin_neyman_scott(m)  # max_order = 2
        with pytest.warns(DerivativeFallbackWarning):
            model.m_derivative((0.0,), (0.0,), (0.1,), 3)


class TestDerivativeTensorChecks:
    def test_slot_asymmetry_detects(self):
        bad = np.zeros((1, 2, 2))
        bad[0, 0, 1] = 1.0
        assert slot_asymmetry(bad) == 1.0
        good = np.ones((1, 2, 2))
        assert slot_asymmetry(good) == 0.0

    def test_fixture_models_symmetric(self, rng):
        for name in ("scalar-quadratic", "bivariate-quadratic"):
            model, dgp = get_fixture(name)
            obs = tuple(float(v) for v in dgp.atoms[0][0])
            eta = tuple(float(v) * 1.1 for v in dgp.eta0)
            for order in (2, 3):
                t = np.asarray(
                    model.g_derivative(obs, (0.0,), eta, order), dtype=float
                )
                assert slot_asymmetry(t) == 0.0
