"""Monte Carlo study for the grouped callback design, and the normal-means demo.

The study simulates firms that receive job applications carrying two binary
applicant characteristics, with heterogeneous response coefficients across
firms, and compares the plug-in (OLS) estimators of the mean and second
moment of the race coefficient against their second-order orthogonalized
versions, with and without empirical-Bayes regularization of the design
matrix.

Because covariates live on four cells and outcomes are binary, every
leave-two-out quantity depends on the removed pair only through its
(cell, outcome) pair, so the exhaustive pair average collapses to a sum over
at most 64 ordered pair types per unit.  That exact regrouping is what makes
the full study run at desk scale; it is cross-checked against the generic
tuple-level estimator in the test suite.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, ndtri

from .estimation import DirichletRegularizer, Panel, Unit

__all__ = [
    "SimConfig",
    "SimResult",
    "CallbackPanel",
    "generate_panel",
    "run_study",
    "population_truths",
    "neyman_scott_demo",
    "write_results_csv",
    "write_summary_json",
]

SINGULARITY_RTOL = 1e-10

# Design vectors (1, x1, x2) on the four covariate cells, cell = 2*x1 + x2.
_CELL_X = np.array(
    [[1.0, 0.0, 0.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0], [1.0, 1.0, 1.0]]
)
_CELL_OUTER = np.einsum("ci,cj->cij", _CELL_X, _CELL_X)
# Cell probabilities by firm type (type 1 in row 0, type 2 in row 1).
_TYPE_PROBS = np.array([[3 / 8, 1 / 8, 1 / 8, 3 / 8], [1 / 8, 3 / 8, 3 / 8, 1 / 8]])
_TYPE_A = np.einsum("zc,cij->zij", _TYPE_PROBS, _CELL_OUTER)
_TYPE_A_INV = np.linalg.inv(_TYPE_A)


@dataclass(frozen=True)
class SimConfig:
    N: int = 1000
    T_grid: tuple[int, ...] = (20, 40, 60, 80, 100)
    reps: int = 200
    seed: int = 0
    estimators: tuple[str, ...] = ("ols", "orth2")
    regularizations: tuple[str, ...] = ("none", "dirichlet-eb")

    def __post_init__(self):
        if self.N < 1 or self.reps < 1 or min(self.T_grid) < 1:
            raise ValueError("N, reps, and every T must be at least 1")
        if "orth2" in self.estimators and min(self.T_grid) < 4:
            raise ValueError("orth2 requires T >= 4 (leave-two-out plus a pair)")
        bad = set(self.estimators) - {"ols", "orth2"}
        if bad:
            raise ValueError(f"unknown estimators {sorted(bad)}")
        bad = set(self.regularizations) - {"none", "dirichlet-eb"}
        if bad:
            raise ValueError(f"unknown regularizations {sorted(bad)}")


@dataclass
class SimResult:
    config: SimConfig
    rows: list[dict]

    def summary(self) -> dict:
        groups: dict[tuple, list] = {}
        for row in self.rows:
            key = (row["estimator"], row["regularized"], row["T"], row["target"])
            groups.setdefault(key, []).append(row)
        out = {}
        for (est, reg, T, target), rows in sorted(groups.items()):
            estimates = np.asarray([r["estimate"] for r in rows])
            truths = np.asarray([r["truth_subset"] for r in rows])
            out[f"{est}|{reg}|T={T}|{target}"] = {
                "estimator": est,
                "regularized": reg,
                "T": T,
                "target": target,
                "mean_estimate": float(np.mean(estimates)),
                "q05": float(np.quantile(estimates, 0.05)),
                "q95": float(np.quantile(estimates, 0.95)),
                "mean_truth_subset": float(np.mean(truths)),
                "bias": float(np.mean(estimates - truths)),
                "mean_n_excluded": float(
                    np.mean([r["n_excluded"] for r in rows])
                ),
            }
        return out


# ---------------------------------------------------------------------------
# Panel generation
# ---------------------------------------------------------------------------


@dataclass
class CallbackPanel:
    """One simulated dataset: cells, outcomes, and per-unit ground truth."""

    cells: np.ndarray  # (N, T) int in {0,..,3}
    y: np.ndarray  # (N, T) float in {0, 1}
    z: np.ndarray  # (N,) int in {1, 2}
    beta: np.ndarray  # (N, 3)
    eta_true: np.ndarray  # (N, 3)

    @property
    def N(self) -> int:
        return self.cells.shape[0]

    @property
    def T(self) -> int:
        return self.cells.shape[1]

    def prefix(self, T: int) -> "CallbackPanel":
        if T > self.T:
            raise ValueError(f"cannot take T={T} from a panel with T={self.T}")
        return CallbackPanel(
            cells=self.cells[:, :T],
            y=self.y[:, :T],
            z=self.z,
            beta=self.beta,
            eta_true=self.eta_true,
        )

    def to_panel(self) -> Panel:
        """Generic-estimator view: observations (y, 1, x1, x2)."""
        units = []
        for i in range(self.N):
            obs = [
                (
                    float(self.y[i, t]),
                    1.0,
                    float(_CELL_X[self.cells[i, t], 1]),
                    float(_CELL_X[self.cells[i, t], 2]),
                )
                for t in range(self.T)
            ]
            units.append(Unit(observations=obs))
        return Panel(units=units)


def _unit_rng(seed: int, rep: int, unit: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence((seed, rep, unit)))
    )


def generate_panel(cfg: SimConfig, rep: int, T: int | None = None) -> CallbackPanel:
    """Simulate one replication; fully reproducible from (seed, rep).

    Draws are streamed per (seed, rep, unit) and consumed in a fixed order
    (type, coefficients, then per-application cell and shock), so panels at a
    smaller T are exact prefixes of panels at a larger T.  Normal and
    logistic variates come from inverse CDFs of uniforms.
    """
    if T is None:
        T = max(cfg.T_grid)
    N = cfg.N
    cells = np.empty((N, T), dtype=np.int64)
    y = np.empty((N, T))
    z = np.empty(N, dtype=np.int64)
    beta = np.empty((N, 3))
    cumprobs = np.cumsum(_TYPE_PROBS, axis=1)
    for i in range(N):
        u = _unit_rng(cfg.seed, rep, i).random(4 + 2 * T)
        zi = 1 + (u[0] < 0.5)
        z[i] = zi
        beta[i] = zi + ndtri(u[1:4])
        uc = u[4 : 4 + 2 * T : 2]
        ue = u[5 : 4 + 2 * T : 2]
        cells[i] = np.searchsorted(cumprobs[zi - 1], uc, side="right")
        eps = np.log(ue) - np.log1p(-ue)  # standard logistic via inverse CDF
        index = beta[i] @ _CELL_X[cells[i]].T
        y[i] = (eps >= index).astype(float)
    eta_true = _eta_truth(z, beta)
    return CallbackPanel(cells=cells, y=y, z=z, beta=beta, eta_true=eta_true)


def _eta_truth(z: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Population best linear predictor coefficients, unit by unit."""
    py = expit(-(beta @ _CELL_X.T))  # (N, 4)
    pz = _TYPE_PROBS[z - 1]  # (N, 4)
    b = np.einsum("nc,nc,ci->ni", pz, py, _CELL_X)
    return np.einsum("nij,nj->ni", _TYPE_A_INV[z - 1], b)


def population_truths(
    n_units: int = 10**7, seed: int = 0, chunk: int = 10**6
) -> dict:
    """Monte Carlo estimates of the population values of both targets."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, 1))))
    total1 = total2 = 0.0
    done = 0
    while done < n_units:
        m = min(chunk, n_units - done)
        z = 1 + (rng.random(m) < 0.5).astype(np.int64)
        beta = z[:, None] + ndtri(rng.random((m, 3)))
        eta = _eta_truth(z, beta)
        total1 += float(eta[:, 1].sum())
        total2 += float((eta[:, 1] ** 2).sum())
        done += m
    return {
        "theta1": total1 / n_units,
        "theta2": total2 / n_units,
        "n_units": n_units,
        "seed": seed,
    }


# ---------------------------------------------------------------------------
# Fast estimators (pair-type collapse)
# ---------------------------------------------------------------------------


def _cell_outcome_counts(panel: CallbackPanel) -> np.ndarray:
    """(N, 4, 2) counts of observations by (cell, outcome)."""
    N, T = panel.cells.shape
    counts = np.zeros((N, 4, 2))
    flat = (panel.cells * 2 + panel.y.astype(np.int64)).reshape(N, T)
    for a in range(8):
        counts[:, a // 2, a % 2] = (flat == a).sum(axis=1)
    return counts


def _design_sums(counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n_cell = counts.sum(axis=2)  # (N, 4)
    S = np.einsum("nc,cij->nij", n_cell, _CELL_OUTER)
    b = np.einsum("nc,ci->ni", counts[:, :, 1], _CELL_X)
    return S, b


def _sv_ratio_ok(matrices: np.ndarray) -> np.ndarray:
    """Smallest/largest singular-value test on a stack of symmetric matrices."""
    eig = np.abs(np.linalg.eigvalsh(matrices))
    smallest, largest = eig[..., 0], eig[..., -1]
    return (largest > 0) & (smallest >= SINGULARITY_RTOL * largest)


def _masked_inv(matrices: np.ndarray, ok: np.ndarray) -> np.ndarray:
    safe = np.where(ok[..., None, None], matrices, np.eye(3))
    return np.linalg.inv(safe)


def ols_estimates(
    panel: CallbackPanel, regularizer: DirichletRegularizer | None = None
) -> dict:
    """Plug-in estimates of both targets, with exclusions or regularization."""
    counts = _cell_outcome_counts(panel)
    S, b = _design_sums(counts)
    T = panel.T
    if regularizer is None:
        ok = _sv_ratio_ok(S)
        eta = np.einsum("nij,nj->ni", _masked_inv(S, ok), b)
    else:
        M = (S + regularizer.alpha * regularizer.Pi) / (T + regularizer.alpha)
        ok = np.ones(panel.N, dtype=bool)
        eta = np.einsum("nij,nj->ni", np.linalg.inv(M), b / T)
    return _aggregate(eta[:, 1], eta[:, 1] ** 2, ok, panel)


def orth2_estimates(
    panel: CallbackPanel, regularizer: DirichletRegularizer | None = None
) -> dict:
    """Second-order orthogonal estimates via the exhaustive pair average.

    Every ordered pair of applications (s1, s2) contributes the kernel built
    from the leave-(s1,s2)-out nuisances; pairs are grouped by the
    (cell, outcome) type of each removed application, which reproduces the
    exhaustive ordered-pair average exactly.
    """
    N, T = panel.N, panel.T
    if T < 4:
        raise ValueError("orth2 requires T >= 4")
    counts = _cell_outcome_counts(panel)
    S, b = _design_sums(counts)
    m8 = counts.reshape(N, 8)  # type a = 2*cell + outcome

    # ordered pair types (a, b)
    pair_a, pair_b = np.divmod(np.arange(64), 8)
    cell_a, y_a = np.divmod(pair_a, 2)
    cell_b, y_b = np.divmod(pair_b, 2)
    x_a, x_b = _CELL_X[cell_a], _CELL_X[cell_b]  # (64, 3)
    pair_S = _CELL_OUTER[cell_a] + _CELL_OUTER[cell_b]  # (64, 3, 3)
    pair_b_vec = y_a[:, None] * x_a + y_b[:, None] * x_b  # (64, 3)

    count_pair = m8[:, pair_a] * m8[:, pair_b]
    same = pair_a == pair_b
    count_pair[:, same] -= m8[:, pair_a[same]]

    S_minus = S[:, None] - pair_S[None]  # (N, 64, 3, 3)
    b_minus = b[:, None] - pair_b_vec[None]  # (N, 64, 3)

    if regularizer is None:
        pair_ok = _sv_ratio_ok(S_minus)
        ok = ~np.any((count_pair > 0) & ~pair_ok, axis=1)
        inv = _masked_inv(S_minus, pair_ok)
        eta = np.einsum("npij,npj->npi", inv, b_minus)
        lam = -(T - 2) * inv
    else:
        M = (S_minus + regularizer.alpha * regularizer.Pi) / (
            T - 2 + regularizer.alpha
        )
        ok = np.ones(N, dtype=bool)
        inv = np.linalg.inv(M)
        eta = np.einsum("npij,npj->npi", inv, b_minus / (T - 2))
        lam = -inv

    u1 = y_a[None] - np.einsum("npj,pj->np", eta, x_a)
    u2 = y_b[None] - np.einsum("npj,pj->np", eta, x_b)
    lam_x1 = np.einsum("npij,pj->npi", lam, x_a)
    lam_x2 = np.einsum("npij,pj->npi", lam, x_b)
    v1 = lam_x1 * u1[..., None]
    v2 = lam_x2 * u2[..., None]
    corr = 2.0 * v1 + lam_x2 * np.einsum("pj,npj->np", x_b, v1)[..., None]

    k1 = eta[..., 1] - corr[..., 1]
    k2 = eta[..., 1] ** 2 - 2.0 * eta[..., 1] * corr[..., 1] + v2[..., 1] * v1[..., 1]
    denom = T * (T - 1)
    val1 = np.einsum("np,np->n", count_pair, k1) / denom
    val2 = np.einsum("np,np->n", count_pair, k2) / denom
    return _aggregate(val1, val2, ok, panel)


def _aggregate(val1, val2, ok, panel: CallbackPanel) -> dict:
    n_excluded = int((~ok).sum())
    eta1 = panel.eta_true[:, 1]

    def subset_mean(values):
        return float(np.mean(values[ok])) if ok.any() else float("nan")

    return {
        "theta1": subset_mean(val1),
        "theta2": subset_mean(val2),
        "truth1_subset": subset_mean(eta1),
        "truth2_subset": subset_mean(eta1**2),
        "n_excluded": n_excluded,
        "unit_values_theta1": val1,
        "unit_values_theta2": val2,
        "included": ok,
    }


# ---------------------------------------------------------------------------
# Study driver
# ---------------------------------------------------------------------------


def _rep_rows(cfg: SimConfig, rep: int) -> list[dict]:
    rows = []
    full = generate_panel(cfg, rep)
    for T in cfg.T_grid:
        panel = full.prefix(T)
        regs: dict[str, DirichletRegularizer | None] = {}
        for reg_name in cfg.regularizations:
            if reg_name == "none":
                regs[reg_name] = None
            else:
                counts = _cell_outcome_counts(panel).sum(axis=2)
                regs[reg_name] = DirichletRegularizer.fit(counts, T)
        for est in cfg.estimators:
            for reg_name, reg in regs.items():
                res = (
                    ols_estimates(panel, reg)
                    if est == "ols"
                    else orth2_estimates(panel, reg)
                )
                for target in ("theta1", "theta2"):
                    rows.append(
                        {
                            "rep": rep,
                            "estimator": est,
                            "regularized": reg_name,
                            "T": T,
                            "target": target,
                            "estimate": res[target],
                            "truth_subset": res[f"truth{target[-1]}_subset"],
                            "n_excluded": res["n_excluded"],
                        }
                    )
    return rows


def run_study(cfg: SimConfig, workers: int = 1) -> SimResult:
    """Full Monte Carlo study; byte-stable for a given seed and any worker count."""
    rows: list[dict] = []
    if workers <= 1:
        for rep in range(cfg.reps):
            rows.extend(_rep_rows(cfg, rep))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for rep_rows in pool.map(
                _rep_rows, [cfg] * cfg.reps, range(cfg.reps), chunksize=1
            ):
                rows.extend(rep_rows)
    return SimResult(config=cfg, rows=rows)


_CSV_COLUMNS = (
    "rep",
    "estimator",
    "regularized",
    "T",
    "target",
    "estimate",
    "truth_subset",
    "n_excluded",
)


def write_results_csv(result: SimResult, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_CSV_COLUMNS)
        for row in result.rows:
            writer.writerow(
                [
                    row["rep"],
                    row["estimator"],
                    row["regularized"],
                    row["T"],
                    row["target"],
                    format(row["estimate"], ".17g"),
                    format(row["truth_subset"], ".17g"),
                    row["n_excluded"],
                ]
            )


def write_summary_json(result: SimResult, path) -> None:
    payload = {
        "config": {
            "N": result.config.N,
            "T_grid": list(result.config.T_grid),
            "reps": result.config.reps,
            "seed": result.config.seed,
            "estimators": list(result.config.estimators),
            "regularizations": list(result.config.regularizations),
        },
        "summary": result.summary(),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Normal-means demonstrator
# ---------------------------------------------------------------------------


def _elementary_symmetric(values: np.ndarray, depth: int) -> np.ndarray:
    """e_0..e_depth of the sample, by the stable DP recursion."""
    e = np.zeros(depth + 1)
    e[0] = 1.0
    for v in values:
        for j in range(depth, 0, -1):
            e[j] += v * e[j - 1]
    return e


def ns_unit_estimate(y_eval: np.ndarray, eta_hat: float, m, q: int) -> float:
    """Order-q orthogonal estimate of m(eta) for one unit.

    Implements the binomial-weighted polynomial in the products of distinct
    outcomes, averaged over all ordered j-tuples (an exhaustive U-statistic,
    computed through elementary symmetric polynomials).
    """
    n = y_eval.size
    if n < q:
        raise ValueError(f"need at least q={q} evaluation observations, got {n}")
    e = _elementary_symmetric(y_eval, q)
    value = 0.0
    for j in range(q + 1):
        coeff = sum(
            m.derivative(eta_hat, k)
            / math.factorial(k)
            * math.comb(k, j)
            * (-eta_hat) ** (k - j)
            for k in range(j, q + 1)
        )
        mean_prod = e[j] / math.comb(n, j) if j else 1.0
        value += coeff * mean_prod
    return value


def neyman_scott_demo(
    m,
    q: int,
    N: int = 500,
    T: int = 10,
    seed: int = 0,
    reps: int = 50,
    noise=(-1.0, 0.25, 1.0),
    noise_probs=(0.2, 0.5, 0.3),
) -> list[dict]:
    """Bias/variance comparison of plug-in vs order-q orthogonal estimation.

    Outcomes are eta_i + U with discrete non-Gaussian noise U (recentred to
    mean zero); eta_i are standard normal.  Nuisances use the first half of
    each unit's observations, evaluation the second half.
    """
    noise = np.asarray(noise, dtype=float)
    probs = np.asarray(noise_probs, dtype=float)
    probs = probs / probs.sum()
    noise = noise - float(probs @ noise)
    plug, orth, truths = [], [], []
    for rep in range(reps):
        rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence((seed, rep)))
        )
        eta0 = rng.standard_normal(N)
        draws = rng.choice(noise.size, size=(N, T), p=probs)
        y = eta0[:, None] + noise[draws]
        cut = T // 2
        eta_hat = y[:, :cut].mean(axis=1)
        plug_i = np.asarray([m.derivative(e, 0) for e in eta_hat])
        orth_i = np.asarray(
            [ns_unit_estimate(y[i, cut:], float(eta_hat[i]), m, q) for i in range(N)]
        )
        truths.append(float(np.mean([m.derivative(e, 0) for e in eta0])))
        plug.append(float(plug_i.mean()))
        orth.append(float(orth_i.mean()))
    plug, orth, truths = map(np.asarray, (plug, orth, truths))
    rows = []
    for name, vals in (("plug-in", plug), (f"orth-q{q}", orth)):
        rows.append(
            {
                "estimator": name,
                "q": 0 if name == "plug-in" else q,
                "mean_estimate": float(vals.mean()),
                "mean_truth": float(truths.mean()),
                "bias": float((vals - truths).mean()),
                "variance": float(vals.var(ddof=1)) if reps > 1 else 0.0,
            }
        )
    return rows
