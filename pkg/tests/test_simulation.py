"""Simulation study: data generation, fast estimators, reproducibility, demo."""

import itertools
import math

import numpy as np
import pytest

from orthomom.estimation import DirichletRegularizer, SplitPlan, orth_estimate
from orthomom.models import Polynomial, builtin_heterocoef
from orthomom.simulation import (
    CallbackPanel,
    SimConfig,
    _CELL_X,
    _cell_outcome_counts,
    generate_panel,
    neyman_scott_demo,
    ns_unit_estimate,
    ols_estimates,
    orth2_estimates,
    population_truths,
    run_study,
    write_results_csv,
    write_summary_json,
)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            SimConfig(N=0)
        with pytest.raises(ValueError):
            SimConfig(T_grid=(3,))  # orth2 needs T >= 4
        with pytest.raises(ValueError):
            SimConfig(estimators=("ols", "bogus"))
        with pytest.raises(ValueError):
            SimConfig(regularizations=("ridge",))
        SimConfig(T_grid=(2,), estimators=("ols",))  # fine without orth2


class TestGeneratePanel:
    def test_deterministic(self):
        cfg = SimConfig(N=5, T_grid=(10,), reps=1, seed=4)
        a = generate_panel(cfg, rep=0)
        b = generate_panel(cfg, rep=0)
        assert np.array_equal(a.cells, b.cells)
        assert np.array_equal(a.y, b.y)
        c = generate_panel(cfg, rep=1)
        assert not np.array_equal(a.y, c.y)

    def test_prefix_stability(self):
        cfg = SimConfig(N=4, T_grid=(6, 12), reps=1, seed=9)
        small = generate_panel(cfg, rep=0, T=6)
        large = generate_panel(cfg, rep=0, T=12)
        assert np.array_equal(small.cells, large.cells[:, :6])
        assert np.array_equal(small.y, large.y[:, :6])
        assert np.array_equal(small.beta, large.beta)
        assert np.array_equal(large.prefix(6).cells, small.cells)

    def test_design_marginals(self):
        cfg = SimConfig(N=4000, T_grid=(8,), reps=1, seed=2)
        panel = generate_panel(cfg, rep=0)
        assert set(np.unique(panel.z)) == {1, 2}
        assert abs(np.mean(panel.z == 1) - 0.5) < 0.05
        # cell frequencies averaged over firm types: 1/4 each
        freqs = np.bincount(panel.cells.ravel(), minlength=4) / panel.cells.size
        assert np.max(np.abs(freqs - 0.25)) < 0.02
        # within type 1, the concordant cells carry probability 3/8
        f1 = np.bincount(
            panel.cells[panel.z == 1].ravel(), minlength=4
        ) / panel.cells[panel.z == 1].size
        assert abs(f1[0] - 3 / 8) < 0.03 and abs(f1[3] - 3 / 8) < 0.03
        assert abs(panel.beta.mean() - 1.5) < 0.05

    def test_eta_truth_matches_large_sample_ols(self):
        cfg = SimConfig(N=3, T_grid=(4,), reps=1, seed=6)
        panel = generate_panel(cfg, rep=0, T=40000)
        for i in range(panel.N):
            X = _CELL_X[panel.cells[i]]
            eta_hat = np.linalg.solve(X.T @ X, X.T @ panel.y[i])
            assert np.max(np.abs(eta_hat - panel.eta_true[i])) < 0.05


class TestFastEstimators:
    def _panel(self, seed=3, N=6, T=14):
        cfg = SimConfig(N=N, T_grid=(T,), reps=1, seed=seed)
        return generate_panel(cfg, rep=0, T=T)

    def test_ols_matches_direct(self):
        panel = self._panel()
        res = ols_estimates(panel)
        vals = []
        for i in range(panel.N):
            X = _CELL_X[panel.cells[i]]
            vals.append(np.linalg.solve(X.T @ X, X.T @ panel.y[i])[1])
        assert res["theta1"] == pytest.approx(np.mean(vals), rel=1e-12)
        assert res["theta2"] == pytest.approx(np.mean(np.square(vals)), rel=1e-12)

    @pytest.mark.parametrize("regularized", [False, True])
    def test_orth2_matches_generic_engine(self, regularized):
        panel = self._panel()
        reg = None
        nuisance = None
        if regularized:
            counts = _cell_outcome_counts(panel).sum(axis=2)
            reg = DirichletRegularizer.fit(counts, panel.T)
            nuisance = reg.nuisance
        fast = orth2_estimates(panel, reg)
        gpanel = panel.to_panel()
        for target, key in (("mean", "theta1"), ("second_moment", "theta2")):
            model = builtin_heterocoef(3, target=target, component=1)
            res = orth_estimate(
                gpanel,
                model,
                2,
                SplitPlan.leave_tuple_out(),
                nuisance_estimator=nuisance,
            )
            assert list(res.included) == list(fast["included"])
            assert res.theta_hat[0] == pytest.approx(fast[key], abs=1e-12)

    def test_monotone_exclusions_in_T(self):
        cfg = SimConfig(N=60, T_grid=(8, 12, 16, 24), reps=1, seed=8)
        full = generate_panel(cfg, rep=0)
        excl = []
        for T in cfg.T_grid:
            res = orth2_estimates(full.prefix(T))
            excl.append(res["n_excluded"])
        assert all(a >= b for a, b in zip(excl, excl[1:]))


class TestRunStudy:
    GOLDEN = {
        ("ols", "none", "theta1"): ("-0.0079999045072574326", 0),
        ("ols", "none", "theta2"): ("0.064865249135021036", 0),
        ("ols", "dirichlet-eb", "theta1"): ("-0.0042898977023119594", 0),
        ("ols", "dirichlet-eb", "theta2"): ("0.045347851987426448", 0),
        ("orth2", "none", "theta1"): ("-0.13953161545056217", 3),
        ("orth2", "none", "theta2"): ("0.38752373156128872", 3),
        ("orth2", "dirichlet-eb", "theta1"): ("-0.024907306996473824", 0),
        ("orth2", "dirichlet-eb", "theta2"): ("0.03833614216844048", 0),
    }

    def test_golden_regression(self):
        cfg = SimConfig(N=8, T_grid=(12,), reps=1, seed=1)
        res = run_study(cfg)
        assert len(res.rows) == len(self.GOLDEN)
        for row in res.rows:
            key = (row["estimator"], row["regularized"], row["target"])
            pinned_estimate, pinned_excl = self.GOLDEN[key]
            assert format(row["estimate"], ".17g") == pinned_estimate, key
            assert row["n_excluded"] == pinned_excl

    def test_reproducible_and_worker_independent(self, tmp_path):
        cfg = SimConfig(N=5, T_grid=(8, 12), reps=3, seed=11)
        paths = []
        for tag, workers in (("a", 1), ("b", 1), ("c", 2)):
            res = run_study(cfg, workers=workers)
            path = tmp_path / f"{tag}.csv"
            write_results_csv(res, path)
            paths.append(path)
        blobs = [p.read_bytes() for p in paths]
        assert blobs[0] == blobs[1] == blobs[2]
        write_summary_json(run_study(cfg), tmp_path / "s.json")
        assert (tmp_path / "s.json").read_bytes()

    def test_summary_quantiles(self):
        cfg = SimConfig(
            N=10, T_grid=(8,), reps=5, seed=2, estimators=("ols",),
            regularizations=("dirichlet-eb",),
        )
        res = run_study(cfg)
        summary = res.summary()
        entry = summary["ols|dirichlet-eb|T=8|theta1"]
        ests = [
            r["estimate"]
            for r in res.rows
            if r["target"] == "theta1"
        ]
        assert entry["q05"] == pytest.approx(np.quantile(ests, 0.05))
        assert entry["q95"] == pytest.approx(np.quantile(ests, 0.95))
        assert entry["mean_estimate"] == pytest.approx(np.mean(ests))


class TestPopulationTruths:
    def test_close_to_published_values(self):
        t = population_truths(n_units=200000, seed=0)
        assert abs(t["theta1"] - (-0.0844)) < 0.005
        assert abs(t["theta2"] - 0.0177) < 0.003

    def test_deterministic(self):
        a = population_truths(n_units=50000, seed=5)
        b = population_truths(n_units=50000, seed=5)
        assert a == b


class TestNeymanScottDemo:
    def test_identity_target_reduces_to_sample_mean(self, rng):
        m = Polynomial((0.0, 1.0))
        y = np.asarray([rng.uniform(-1, 1) for _ in range(7)])
        for q in (1, 2, 3):
            val = ns_unit_estimate(y, eta_hat=0.37, m=m, q=q)
            assert val == pytest.approx(y.mean(), rel=1e-12)

    def _exact_expectation(self, atoms, probs, n, eta_hat, m, q):
        total = 0.0
        for combo in itertools.product(range(len(atoms)), repeat=n):
            p = math.prod(probs[i] for i in combo)
            y = np.asarray([atoms[i] for i in combo])
            total += p * ns_unit_estimate(y, eta_hat, m, q)
        return total

    def test_square_target_exact_at_q2(self):
        # for m(eta) = eta**2 the q = 2 estimator is exactly unbiased
        m = Polynomial((0.0, 0.0, 1.0))
        eta0 = 0.6
        atoms = [eta0 - 0.5, eta0 + 0.5]
        probs = [0.5, 0.5]
        val = self._exact_expectation(atoms, probs, 4, eta_hat=0.21, m=m, q=2)
        assert val == pytest.approx(eta0**2, abs=1e-12)

    def test_square_target_bias_at_q1(self):
        m = Polynomial((0.0, 0.0, 1.0))
        eta0, eta_hat = 0.6, 0.21
        atoms = [eta0 - 0.5, eta0 + 0.5]
        val = self._exact_expectation(atoms, [0.5, 0.5], 3, eta_hat, m, 1)
        assert val == pytest.approx(eta0**2 - (eta0 - eta_hat) ** 2, abs=1e-12)

    def test_expectation_is_taylor_polynomial(self):
        m = Polynomial((0.3, -1.0, 0.5, 0.25, -0.1))
        eta0, eta_hat = 0.4, 0.1
        atoms = [eta0 - 0.75, eta0, eta0 + 0.5]
        probs = [0.3, 0.3, 0.4]
        probs = [p / sum(probs) for p in probs]
        # recentre noise exactly
        mean_shift = sum(p * a for p, a in zip(probs, atoms)) - eta0
        atoms = [a - mean_shift for a in atoms]
        for q in (1, 2, 3):
            val = self._exact_expectation(atoms, probs, q, eta_hat, m, q)
            taylor = sum(
                m.derivative(eta_hat, k) / math.factorial(k) * (eta0 - eta_hat) ** k
                for k in range(q + 1)
            )
            assert val == pytest.approx(taylor, abs=1e-12)

    def test_demo_runs_and_reports(self):
        m = Polynomial((0.0, 0.0, 1.0))
        rows = neyman_scott_demo(m, q=2, N=60, T=8, seed=3, reps=4)
        assert {r["estimator"] for r in rows} == {"plug-in", "orth-q2"}
        for r in rows:
            assert np.isfinite(r["bias"]) and np.isfinite(r["variance"])
        # the orthogonalized estimator should cut the plug-in bias
        plug = next(r for r in rows if r["estimator"] == "plug-in")
        orth = next(r for r in rows if r["estimator"] == "orth-q2")
        assert abs(orth["bias"]) < abs(plug["bias"])
