"""Moment engine: kernels, assembly, explicit oracles, determinant transforms."""

import warnings
from fractions import Fraction

import pytest

from conftest import LEAF, tree
from orthomom.engine import (
    NonAffineModelWarning,
    assemble_psi,
    assemble_psi_affine,
    canonical_assignment,
    det_transform_exact,
    det_transform_overid,
    evaluate_kernel,
    explicit_psi,
    mat_vec,
    contract,
)
from orthomom.models import (
    Polynomial,
    builtin_generated_regressor,
    builtin_heterocoef,
    builtin_linear_iv,
    builtin_neyman_scott,
)
from orthomom.verification import (
    DiscreteDGP,
    get_fixture,
    orthogonality_check,
    _mean_g_tensor,
)


def random_inputs(rng, model, n_copies):
    copies = [
        tuple(rng.uniform(-1, 2) for _ in range(model.obs_dim))
        for _ in range(n_copies)
    ]
    theta = tuple(rng.uniform(-0.5, 0.5) for _ in range(model.d_theta))
    eta = tuple(rng.uniform(-0.8, 0.8) for _ in range(model.d_eta))
    lam = tuple(rng.uniform(-1.2, -0.3) for _ in range(model.d_lambda))
    return copies, theta, eta, lam


ORACLE_MODELS = [
    builtin_linear_iv(1),
    builtin_linear_iv(2),
    builtin_generated_regressor(Polynomial((0, 1, 0.5, -0.2, 0.1))),
    builtin_heterocoef(2, target="second_moment"),
    builtin_neyman_scott(Polynomial((0.0, 1.0, 0.4, -0.3, 0.2, 0.05))),
    get_fixture("scalar-quadratic")[0],
    get_fixture("scalar-cubic")[0],
    get_fixture("bivariate-quadratic")[0],
]


class TestKernels:
    def test_single_node_is_m(self, rng):
        model = get_fixture("scalar-quadratic")[0]
        copies, theta, eta, lam = random_inputs(rng, model, 1)
        val = evaluate_kernel(LEAF, copies, (0,), theta, eta, lam, model)
        assert val == model.m_deriv(copies[0], theta, eta, 0)

    def test_root_leaf_is_gradient_contraction(self, rng):
        model = get_fixture("scalar-quadratic")[0]
        copies, theta, eta, lam = random_inputs(rng, model, 2)
        val = evaluate_kernel(tree(LEAF), copies, (0, 1), theta, eta, lam, model)
        lam_matrix = model.lambda_map(lam)
        expected = contract(
            model.m_deriv(copies[0], theta, eta, 1),
            [mat_vec(lam_matrix, model.g_deriv(copies[1], theta, eta, 0))],
        )
        assert val == pytest.approx(expected, rel=1e-14)

    def test_balanced_correction_kernel(self, rng):
        # depth-3 balanced tree against its fully hand-coded contraction
        model = get_fixture("bivariate-quadratic")[0]
        t = tree(tree(tree(LEAF, LEAF), tree(LEAF, LEAF)))
        copies, theta, eta, lam = random_inputs(rng, model, 8)
        val = evaluate_kernel(
            t, copies, tuple(range(8)), theta, eta, lam, model
        )
        Lam = model.lambda_map(lam)

        def Lg(i):
            return mat_vec(Lam, model.g_deriv(copies[i], theta, eta, 0))

        def LG2(i, v1, v2):
            t2 = model.g_deriv(copies[i], theta, eta, 2)
            return mat_vec(
                Lam, [contract(t2[k], [v1, v2]) for k in range(model.d_g)]
            )

        inner_a = LG2(2, Lg(3), Lg(4))
        inner_b = LG2(5, Lg(6), Lg(7))
        expected = contract(
            model.m_deriv(copies[0], theta, eta, 1), [LG2(1, inner_a, inner_b)]
        )
        assert val == pytest.approx(expected, rel=1e-13)

    def test_child_permutation_invariance(self, rng):
        model = get_fixture("bivariate-quadratic")[0]
        t = tree(LEAF, LEAF)
        copies, theta, eta, lam = random_inputs(rng, model, 3)
        a = evaluate_kernel(t, copies, (0, 1, 2), theta, eta, lam, model)
        b = evaluate_kernel(t, copies, (0, 2, 1), theta, eta, lam, model)
        assert a == pytest.approx(b, rel=1e-14)

    def test_missing_copy_errors(self, rng):
        model = get_fixture("scalar-quadratic")[0]
        copies, theta, eta, lam = random_inputs(rng, model, 1)
        with pytest.raises(ValueError):
            evaluate_kernel(tree(LEAF), copies, (0, 1), theta, eta, lam, model)


class TestAssembly:
    def test_term_counts(self):
        model = get_fixture("scalar-quadratic")[0]
        affine_model = get_fixture("scalar-affine")[0]
        for q, count in ((0, 1), (1, 2), (2, 5), (3, 13), (4, 40)):
            assert len(assemble_psi(q, model).terms) == count
        assert len(assemble_psi_affine(4, affine_model).terms) == 12

    def test_copy_counts(self):
        model = get_fixture("scalar-quadratic")[0]
        affine_model = get_fixture("scalar-affine")[0]
        assert assemble_psi(0, model).copies_required == 1
        assert assemble_psi(2, model).copies_required == 4
        assert assemble_psi(4, model).copies_required == 8
        for q in (1, 2, 3, 4, 5):
            assert assemble_psi_affine(q, affine_model).copies_required == q + 1
            assert assemble_psi(q, model).copies_required <= max(2 * q, q + 1)

    def test_copy_discipline(self):
        model = get_fixture("bivariate-quadratic")[0]
        psi = assemble_psi(3, model)
        for term in psi.terms:
            assert term.assignment[0] == 0
            assert len(set(term.assignment)) == len(term.assignment)
            assert max(term.assignment) < psi.copies_required
            # prefix sharing: the term touches exactly the first copies
            assert sorted(term.assignment) == list(range(term.tree.size + 1))

    def test_assignment_is_preorder(self):
        t = tree(tree(LEAF, LEAF), LEAF)
        assert canonical_assignment(t) == (0, 1, 2, 3, 4)
        assert canonical_assignment(t, block_size=2) == (0, 1, 3, 5, 7)

    def test_q0_is_target(self, rng):
        model = get_fixture("scalar-affine")[0]
        psi = assemble_psi(0, model)
        copies, theta, eta, lam = random_inputs(rng, model, 1)
        assert psi.evaluate(copies, theta, eta, lam) == model.m_deriv(
            copies[0], theta, eta, 0
        )

    def test_affine_warning(self):
        model = get_fixture("scalar-quadratic")[0]
        with pytest.warns(NonAffineModelWarning):
            assemble_psi_affine(2, model)


class TestExplicitOracle:
    @pytest.mark.parametrize("q", [1, 2, 3])
    @pytest.mark.parametrize("model", ORACLE_MODELS, ids=lambda m: m.name)
    def test_assembled_matches_explicit(self, rng, q, model):
        psi = assemble_psi(q, model)
        oracle = explicit_psi(q, model)
        assert psi.copies_required == oracle.copies_required
        for _ in range(20):
            copies, theta, eta, lam = random_inputs(rng, model, psi.copies_required)
            a = float(psi.evaluate(copies, theta, eta, lam))
            b = float(oracle.evaluate(copies, theta, eta, lam))
            assert abs(a - b) <= 1e-12 * max(1.0, abs(b))

    def test_unsupported_q(self):
        model = get_fixture("scalar-affine")[0]
        with pytest.raises(ValueError):
            explicit_psi(4, model)

    def test_q1_equals_affine_q1_even_for_nonlinear_g(self, rng):
        model = get_fixture("scalar-quadratic")[0]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NonAffineModelWarning)
            aff = assemble_psi_affine(1, model)
        full = assemble_psi(1, model)
        copies, theta, eta, lam = random_inputs(rng, model, 2)
        assert full.evaluate(copies, theta, eta, lam) == aff.evaluate(
            copies, theta, eta, lam
        )


class TestAffineCollapse:
    @pytest.mark.parametrize("q", [2, 3, 4, 5])
    def test_corrections_vanish_for_affine_models(self, rng, q):
        model = get_fixture("scalar-affine")[0]
        full = assemble_psi(q, model)
        affine = assemble_psi_affine(q, model)
        for _ in range(5):
            copies, theta, eta, lam = random_inputs(rng, model, full.copies_required)
            a = full.evaluate(copies, theta, eta, lam)
            b = affine.evaluate(copies, theta, eta, lam)
            assert a == pytest.approx(b, rel=1e-14, abs=1e-14)


class TestDeterminantTransforms:
    def test_exact_case_moments(self):
        model, dgp = get_fixture("bivariate-affine")
        tm = det_transform_exact(model)
        th, et, _ = dgp.truth()
        detj = Fraction(9, 4) * Fraction(7, 8)
        assert _mean_g_tensor(tm, dgp, th, et, 0) == [0, 0]
        assert _mean_g_tensor(tm, dgp, th, et, 1) == [[detj, 0], [0, detj]]

    def test_exact_case_affine_copy_count(self):
        model, _ = get_fixture("bivariate-affine")
        tm = det_transform_exact(model)
        for q in (1, 2, 3):
            assert assemble_psi_affine(q, tm).copies_required == 1 + q * model.d_eta

    def test_scalar_det_is_identity(self, rng):
        model, _ = get_fixture("scalar-affine")
        tm = det_transform_exact(model)
        assert tm.g_block_size == 1
        obs = (1.3, 0.4)
        for order in (0, 1, 2):
            assert tm.g_deriv((obs,), (0.0,), (0.5,), order) == model.g_deriv(
                obs, (0.0,), (0.5,), order
            )

    def test_exact_case_orthogonality_scalar_lambda(self):
        model, dgp = get_fixture("bivariate-affine")
        tm = det_transform_exact(model)
        detj = Fraction(9, 4) * Fraction(7, 8)
        dgp_t = DiscreteDGP(
            atoms=dgp.atoms,
            theta0=dgp.theta0,
            eta0=dgp.eta0,
            lam0=(1 / detj,),
            name="bivariate-affine-det",
        )
        dgp_t.validate(tm)
        report = orthogonality_check(tm, dgp_t, q=2)
        assert report.passed
        assert report.max_by_order()[3] > 1e-3

    def test_overid_moments_and_orthogonality(self):
        model, dgp = get_fixture("scalar-overid")
        tm = det_transform_overid(model)
        th, et, _ = dgp.truth()
        jtj = Fraction(5, 4) ** 2 + Fraction(5, 4) ** 2
        assert _mean_g_tensor(tm, dgp, th, et, 0) == [0]
        assert _mean_g_tensor(tm, dgp, th, et, 1) == [[jtj]]
        dgp_t = DiscreteDGP(
            atoms=dgp.atoms,
            theta0=dgp.theta0,
            eta0=dgp.eta0,
            lam0=(1 / jtj,),
            name="scalar-overid-det",
        )
        dgp_t.validate(tm)
        report = orthogonality_check(tm, dgp_t, q=2)
        assert report.passed

    def test_dimension_preconditions(self):
        square_model, _ = get_fixture("bivariate-affine")
        overid_model, _ = get_fixture("scalar-overid")
        with pytest.raises(ValueError):
            det_transform_exact(overid_model)
        with pytest.raises(ValueError):
            det_transform_overid(square_model)
