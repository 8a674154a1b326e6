"""Estimation: U-statistics over samples, splitting, and grouped-data estimators.

The orthogonal moment function depends on several independent copies of the
data, so its natural sample analogue averages over ordered tuples of distinct
observation indices.  Nuisances are estimated on a held-out subset of each
unit's observations (or, leave-two-out style, on the complement of the
evaluated tuple), which keeps the evaluation copies independent of the
preliminary estimates.

The public entry point for panel data is :func:`orth_estimate`; a thin
scikit-learn style wrapper (:class:`PanelMomentEstimator`) exposes the same
computation through the fit/get_params protocol.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import gammaln
from sklearn.base import BaseEstimator

from .engine import assemble_psi, assemble_psi_affine
from .models import ModelSpec, get_model

__all__ = [
    "Panel",
    "Unit",
    "SplitPlan",
    "UStatConfig",
    "OrthEstimate",
    "SingularDesignError",
    "u_statistic",
    "nuisance_fit",
    "orth_estimate",
    "DirichletRegularizer",
    "PanelMomentEstimator",
    "as_panel",
    "solve_theta",
]

SINGULARITY_RTOL = 1e-10


class SingularDesignError(np.linalg.LinAlgError):
    """Within-unit design too close to singular for nuisance estimation."""


# ---------------------------------------------------------------------------
# Panel data containers
# ---------------------------------------------------------------------------


@dataclass
class Unit:
    observations: list
    covariate: object = None


@dataclass
class Panel:
    units: list[Unit]

    def __post_init__(self):
        if not self.units:
            raise ValueError("panel has no units")

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def T(self) -> int:
        lengths = {len(u.observations) for u in self.units}
        if len(lengths) != 1:
            raise ValueError(f"units have unequal lengths {sorted(lengths)}")
        return lengths.pop()

    def require_equal_T(self, minimum: int = 1) -> int:
        T = self.T
        if T < minimum:
            raise ValueError(f"panel has T={T}, need at least {minimum}")
        return T

    @classmethod
    def from_long(cls, data) -> "Panel":
        """Build a panel from long-format rows (unit, t, y, x1, ..., xk)."""
        arr = np.asarray(data, dtype=float)
        if arr.ndim != 2 or arr.shape[1] < 4:
            raise ValueError(
                "long format needs columns (unit, t, y, x1, ..., xk); got shape "
                f"{arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("long-format data contains non-finite values")
        order = np.lexsort((arr[:, 1], arr[:, 0]))
        arr = arr[order]
        units = []
        for _, rows in itertools.groupby(arr, key=lambda row: row[0]):
            obs = [tuple(row[2:]) for row in rows]
            units.append(Unit(observations=obs))
        return cls(units=units)


def as_panel(X, model: ModelSpec | None = None) -> Panel:
    """Validation helper: accept a Panel or long-format array-like."""
    if isinstance(X, Panel):
        panel = X
    else:
        panel = Panel.from_long(X)
    if model is not None:
        width = len(panel.units[0].observations[0])
        if width != model.obs_dim:
            raise ValueError(
                f"observations have {width} columns but model {model.name!r} "
                f"expects {model.obs_dim}"
            )
    return panel


@dataclass(frozen=True)
class SplitPlan:
    """Within-unit split: nuisances on ``holdout``, evaluation on ``evaluation``.

    ``mode='loo'`` is the leave-out plan in which the held-out set is the
    complement of the evaluated tuple, recomputed tuple by tuple.
    """

    holdout: tuple[int, ...] = ()
    evaluation: tuple[int, ...] = ()
    cross_fit: bool = False
    mode: str = "split"

    def __post_init__(self):
        if self.mode not in ("split", "loo"):
            raise ValueError(f"unknown split mode {self.mode!r}")
        if self.mode == "split":
            if set(self.holdout) & set(self.evaluation):
                raise ValueError("holdout and evaluation sets overlap")

    @classmethod
    def halves(cls, T: int, cross_fit: bool = False) -> "SplitPlan":
        cut = T // 2
        return cls(
            holdout=tuple(range(cut)),
            evaluation=tuple(range(cut, T)),
            cross_fit=cross_fit,
        )

    @classmethod
    def leave_tuple_out(cls) -> "SplitPlan":
        return cls(mode="loo")


@dataclass(frozen=True)
class UStatConfig:
    mode: str = "auto"  # auto | exhaustive | subsample
    max_tuples: int = 1_000_000
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("auto", "exhaustive", "subsample"):
            raise ValueError(f"unknown U-statistic mode {self.mode!r}")
        if self.max_tuples < 1:
            raise ValueError("max_tuples must be positive")


# ---------------------------------------------------------------------------
# U-statistics
# ---------------------------------------------------------------------------


def u_statistic(
    psi,
    observations: Sequence,
    theta,
    eta,
    lam,
    cfg: UStatConfig = UStatConfig(),
) -> float:
    """Average of psi over ordered tuples of distinct observation indices.

    Exhaustive enumeration covers all n!/(n-L)! tuples; subsample mode draws
    ``max_tuples`` tuples (uniformly over ordered tuples) from a seeded
    counter-based generator, so results are reproducible.
    """
    n = len(observations)
    L = psi.copies_required
    if n < L:
        raise ValueError(f"need at least L={L} observations, got {n}")
    n_tuples = math.perm(n, L)
    exhaustive = cfg.mode == "exhaustive" or (
        cfg.mode == "auto" and n_tuples <= cfg.max_tuples
    )
    if exhaustive:
        total = 0.0
        for idx in itertools.permutations(range(n), L):
            copies = [observations[i] for i in idx]
            total += float(psi.evaluate(copies, theta, eta, lam))
        return total / n_tuples
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed)))
    total = 0.0
    remaining = cfg.max_tuples
    while remaining > 0:
        chunk = min(remaining, 8192)
        keys = rng.random((chunk, n))
        picks = np.argsort(keys, axis=1)[:, :L]
        for row in picks:
            copies = [observations[i] for i in row]
            total += float(psi.evaluate(copies, theta, eta, lam))
        remaining -= chunk
    return total / cfg.max_tuples


# ---------------------------------------------------------------------------
# Nuisance estimation
# ---------------------------------------------------------------------------


def _left_inverse(jac: np.ndarray) -> np.ndarray:
    sv = np.linalg.svd(jac, compute_uv=False)
    if sv[-1] < SINGULARITY_RTOL * sv[0] or sv[0] == 0.0:
        raise SingularDesignError(
            f"sample Jacobian is numerically singular (sv ratio "
            f"{0.0 if sv[0] == 0 else sv[-1] / sv[0]:.2e})"
        )
    if jac.shape[0] == jac.shape[1]:
        return np.linalg.inv(jac)
    return np.linalg.solve(jac.T @ jac, jac.T)


def nuisance_fit(
    observations: Sequence,
    model: ModelSpec,
    theta=None,
) -> tuple[tuple, tuple]:
    """Estimate (eta, lambda) from a held-out set of observations.

    Affine models solve the normal equations of the sample mean of g in one
    step; nonlinear models run a damped Newton iteration.  Lambda is the left
    inverse of the sample Jacobian, encoded under the model's lambda
    parametrization.
    """
    if theta is None:
        theta = (0.0,) * model.d_theta
    n = len(observations)
    if n < 1:
        raise ValueError("no observations for nuisance estimation")
    d, dg = model.d_eta, model.d_g

    def mean_g(eta):
        total = np.zeros(dg)
        for obs in observations:
            total += np.asarray(
                model.g_derivative(obs, theta, tuple(eta), 0), dtype=float
            )
        return total / n

    def mean_jac(eta):
        total = np.zeros((dg, d))
        for obs in observations:
            total += np.asarray(
                model.g_derivative(obs, theta, tuple(eta), 1), dtype=float
            )
        return total / n

    if model.g_affine:
        jac = mean_jac(np.zeros(d))
        g0 = mean_g(np.zeros(d))
        eta = -_left_inverse(jac) @ g0
    else:
        eta = np.zeros(d)
        gbar = mean_g(eta)
        for _ in range(100):
            if np.max(np.abs(gbar)) < 1e-12:
                break
            jac = mean_jac(eta)
            step = -_left_inverse(jac) @ gbar
            scale = 1.0
            norm0 = float(np.linalg.norm(gbar))
            while scale > 1e-8:
                trial = eta + scale * step
                gtrial = mean_g(trial)
                if np.linalg.norm(gtrial) < norm0:
                    eta, gbar = trial, gtrial
                    break
                scale /= 2
            else:
                raise SingularDesignError("nuisance Newton iteration stalled")
        if np.max(np.abs(gbar)) > 1e-8:
            raise SingularDesignError("nuisance moment equations did not converge")
        jac = mean_jac(eta)

    if model.lambda_known is not None:
        lam = tuple(model.lambda_known)
    elif model.lambda_encode is not None:
        lam = tuple(model.lambda_encode(jac))
    else:
        lam_matrix = _left_inverse(jac)
        if model.d_lambda != d * dg:
            raise ValueError(
                f"model {model.name!r} has d_lambda={model.d_lambda}; supply "
                "lambda_encode to map the sample Jacobian into lambda"
            )
        lam = tuple(lam_matrix.reshape(-1))
    return tuple(eta), lam


def solve_theta(
    moment: Callable[[tuple], np.ndarray],
    theta0: Sequence,
    omega: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> tuple:
    """Damped Gauss-Newton on the omega-weighted moment norm."""
    theta = np.asarray(theta0, dtype=float)
    d = theta.size

    def val(t):
        return np.atleast_1d(np.asarray(moment(tuple(t)), dtype=float))

    m0 = val(theta)
    if omega is None:
        omega = np.eye(m0.size)

    def norm2(m):
        return float(m @ omega @ m)

    for _ in range(max_iter):
        if math.sqrt(norm2(m0)) < tol:
            break
        h = 1e-6 * max(1.0, float(np.max(np.abs(theta))))
        jac = np.empty((m0.size, d))
        for j in range(d):
            up = theta.copy()
            up[j] += h
            dn = theta.copy()
            dn[j] -= h
            jac[:, j] = (val(up) - val(dn)) / (2 * h)
        try:
            step = np.linalg.solve(jac.T @ omega @ jac, -jac.T @ omega @ m0)
        except np.linalg.LinAlgError as err:
            raise SingularDesignError("singular Jacobian in theta solve") from err
        scale, n0 = 1.0, norm2(m0)
        while scale > 1e-10:
            trial = theta + scale * step
            mt = val(trial)
            if norm2(mt) < n0:
                theta, m0 = trial, mt
                break
            scale /= 2
        else:
            break
    return tuple(theta)


# ---------------------------------------------------------------------------
# Orthogonal estimation over a panel
# ---------------------------------------------------------------------------


@dataclass
class OrthEstimate:
    theta_hat: tuple
    unit_values: list  # per-unit moment value at theta = 0 (shift targets)
    included: list[bool]
    n_excluded: int
    q: int
    cross_fit: bool


def _unit_value_split(
    obs, model, psi, split, cfg, theta_probe, nuisance_estimator
):
    def one_way(hold, ev):
        obs_hold = [obs[i] for i in hold]
        obs_eval = [obs[i] for i in ev]
        if len(obs_eval) < psi.copies_required:
            raise ValueError(
                f"evaluation set of size {len(obs_eval)} is smaller than "
                f"L={psi.copies_required}"
            )
        eta, lam = nuisance_estimator(obs_hold, model, theta_probe)
        return u_statistic(psi, obs_eval, theta_probe, eta, lam, cfg)

    value = one_way(split.holdout, split.evaluation)
    if split.cross_fit:
        value = 0.5 * (value + one_way(split.evaluation, split.holdout))
    return value


def _unit_value_loo(obs, model, psi, cfg, theta_probe, nuisance_estimator):
    if not model.g_affine:
        raise ValueError(
            "leave-tuple-out evaluation is supported for affine models only"
        )
    T = len(obs)
    width = psi.copies_required
    if not model.m_uses_observation:
        width -= 1
    if math.perm(T, width) > cfg.max_tuples:
        raise ValueError(
            f"{math.perm(T, width)} leave-out tuples exceed max_tuples="
            f"{cfg.max_tuples}"
        )
    total, count = 0.0, 0
    for idx in itertools.permutations(range(T), width):
        rest = [obs[t] for t in range(T) if t not in idx]
        eta, lam = nuisance_estimator(rest, model, theta_probe)
        copies = [obs[i] for i in idx]
        if not model.m_uses_observation:
            copies = [copies[0]] + copies  # root copy unused by m
        total += float(psi.evaluate(copies, theta_probe, eta, lam))
        count += 1
    return total / count


def orth_estimate(
    panel: Panel,
    model: ModelSpec,
    q: int,
    split: SplitPlan,
    cfg: UStatConfig = UStatConfig(),
    nuisance_estimator: Callable | None = None,
    affine_path: str = "auto",
) -> OrthEstimate:
    """Per-unit orthogonal moment values and pooled theta estimate.

    Singular within-unit designs are excluded from the unit average; the
    count of exclusions is reported so truths can be recomputed on the same
    surviving subset.
    """
    if model.g_block_size != 1:
        raise ValueError(
            "orth_estimate fits nuisances from single observations; evaluate "
            "block-transformed models through the moment engine instead"
        )
    if nuisance_estimator is None:
        nuisance_estimator = nuisance_fit
    use_affine = model.g_affine if affine_path == "auto" else affine_path == "affine"
    if q == 0:
        psi = assemble_psi(0, model)
    elif use_affine:
        psi = assemble_psi_affine(q, model)
    else:
        psi = assemble_psi(q, model)

    theta_probe = (0.0,) * model.d_theta
    values: list = []
    included: list[bool] = []
    for unit in panel.units:
        obs = unit.observations
        try:
            if q == 0:
                # plug-in: nuisances from the full unit sample
                eta, lam = nuisance_estimator(obs, model, theta_probe)
                value = float(psi.evaluate([obs[0]], theta_probe, eta, lam))
                if model.m_uses_observation:
                    value = float(
                        np.mean(
                            [
                                float(psi.evaluate([o], theta_probe, eta, lam))
                                for o in obs
                            ]
                        )
                    )
            elif split.mode == "loo":
                value = _unit_value_loo(
                    obs, model, psi, cfg, theta_probe, nuisance_estimator
                )
            else:
                value = _unit_value_split(
                    obs, model, psi, split, cfg, theta_probe, nuisance_estimator
                )
            values.append(value)
            included.append(True)
        except SingularDesignError:
            values.append(None)
            included.append(False)

    kept = [v for v in values if v is not None]
    n_excluded = len(values) - len(kept)
    if not kept:
        raise SingularDesignError("every unit was excluded as singular")

    if model.target_is_shift:
        # psi(theta) = psi(0) - theta, so the pooled equation is closed form
        theta_hat = (float(np.mean(kept)),)
    else:
        def pooled(theta):
            total = 0.0
            for unit, ok in zip(panel.units, included):
                if not ok:
                    continue
                obs = unit.observations
                if split.mode == "loo":
                    total += _unit_value_loo(
                        obs, model, psi, cfg, theta, nuisance_estimator
                    )
                else:
                    total += _unit_value_split(
                        obs, model, psi, split, cfg, theta, nuisance_estimator
                    )
            return np.asarray([total / len(kept)])

        theta_hat = solve_theta(pooled, (0.0,) * model.d_theta)

    return OrthEstimate(
        theta_hat=theta_hat,
        unit_values=values,
        included=included,
        n_excluded=n_excluded,
        q=q,
        cross_fit=split.cross_fit,
    )


# ---------------------------------------------------------------------------
# Dirichlet empirical-Bayes regularization (binary two-factor designs)
# ---------------------------------------------------------------------------
#
# Cells are indexed 2*x1 + x2 over the binary covariate pair; the design
# vector is (1, x1, x2).  The second-moment matrix E[X X'] is estimated by
# the posterior mean under a Dirichlet prior on the cell probabilities, with
# the concentration chosen by maximizing the marginal likelihood across
# units at pooled cell frequencies.

_CELL_X = np.array(
    [[1.0, 0.0, 0.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0], [1.0, 1.0, 1.0]]
)
_CELL_OUTER = np.einsum("ci,cj->cij", _CELL_X, _CELL_X)


def cell_index(x1, x2) -> int:
    return int(2 * round(x1) + round(x2))


def _counts_from_observations(observations) -> np.ndarray:
    counts = np.zeros(4)
    for obs in observations:
        x1, x2 = obs[2], obs[3]
        if x1 not in (0, 1) or x2 not in (0, 1):
            raise ValueError(
                "Dirichlet regularization requires binary covariates in "
                "columns (x2, x3) of (y, 1, x1, x2) observations"
            )
        counts[cell_index(x1, x2)] += 1
    return counts


def pooled_pi_matrix(pi: np.ndarray) -> np.ndarray:
    """E[X X'] implied by cell probabilities pi over (x1, x2) in {0,1}^2."""
    return np.einsum("c,cij->ij", pi, _CELL_OUTER)


def marginal_loglik(alpha: float, counts: np.ndarray, pi: np.ndarray, T: int) -> float:
    """Dirichlet-multinomial marginal log likelihood across units at fixed pi."""
    N = counts.shape[0]
    a = pi * alpha
    return float(
        N * (gammaln(alpha) - gammaln(alpha + T))
        + np.sum(gammaln(a[None, :] + counts) - gammaln(a[None, :]))
    )


@dataclass
class DirichletRegularizer:
    """Posterior-mean design regularizer with marginal-likelihood alpha."""

    alpha: float
    pi: np.ndarray
    Pi: np.ndarray
    trace: list = field(default_factory=list)

    @classmethod
    def fit(
        cls,
        counts: np.ndarray,
        T: int,
        alpha_grid: np.ndarray | None = None,
        floor: float | None = None,
    ) -> "DirichletRegularizer":
        """Select alpha on a log grid with bounded refinement.

        ``counts`` is the (N, 4) per-unit cell count matrix.  Pooled cell
        probabilities are clamped below at 1/(2 N T) (then renormalized) so
        empty pooled cells cannot zero out prior mass.  Ties prefer the
        smallest alpha; the (alpha, objective) trace is kept.
        """
        counts = np.asarray(counts, dtype=float)
        N = counts.shape[0]
        if floor is None:
            floor = 1.0 / (2.0 * N * T)
        pi = counts.sum(axis=0) / (N * T)
        pi = np.maximum(pi, floor)
        pi = pi / pi.sum()
        if alpha_grid is None:
            alpha_grid = np.geomspace(1e-2, 1e4, 121)
        objective = np.asarray(
            [marginal_loglik(a, counts, pi, T) for a in alpha_grid]
        )
        best = int(np.flatnonzero(objective == objective.max())[0])
        lo = alpha_grid[max(best - 1, 0)]
        hi = alpha_grid[min(best + 1, len(alpha_grid) - 1)]
        refine = minimize_scalar(
            lambda a: -marginal_loglik(a, counts, pi, T),
            bounds=(float(lo), float(hi)),
            method="bounded",
            options={"xatol": 1e-8},
        )
        alpha = float(refine.x)
        if marginal_loglik(alpha, counts, pi, T) < objective[best]:
            alpha = float(alpha_grid[best])
        trace = list(zip(alpha_grid.tolist(), objective.tolist()))
        return cls(alpha=alpha, pi=pi, Pi=pooled_pi_matrix(pi), trace=trace)

    @classmethod
    def fit_panel(cls, panel: Panel, **kwargs) -> "DirichletRegularizer":
        T = panel.require_equal_T()
        counts = np.stack(
            [_counts_from_observations(u.observations) for u in panel.units]
        )
        return cls.fit(counts, T, **kwargs)

    def second_moment(self, sample_sum: np.ndarray, n_obs: int) -> np.ndarray:
        """Posterior-mean estimate of E[X X'] from a subset design sum."""
        return (sample_sum + self.alpha * self.Pi) / (n_obs + self.alpha)

    def nuisance(self, observations, model: ModelSpec, theta=None):
        """Drop-in replacement for :func:`nuisance_fit` on heterocoef data."""
        obs = list(observations)
        _counts_from_observations(obs)  # validates the binary cell structure
        n = len(obs)
        x = np.asarray([o[1:4] for o in obs], dtype=float)
        y = np.asarray([o[0] for o in obs], dtype=float)
        sample_sum = x.T @ x
        m = self.second_moment(sample_sum, n)
        eta = np.linalg.solve(m, x.T @ y / n)
        lam_matrix = -np.linalg.inv(m)
        return tuple(eta), tuple(lam_matrix.reshape(-1))


# ---------------------------------------------------------------------------
# scikit-learn style wrapper
# ---------------------------------------------------------------------------


class PanelMomentEstimator(BaseEstimator):
    """Orthogonal moment estimation with a fit/get_params interface.

    Parameters
    ----------
    model : str or ModelSpec
        Built-in model name (``linear-iv``, ``generated-regressor``,
        ``heterocoef``, ``neyman-scott``) or an explicit ModelSpec.
    q : int
        Orthogonality order; ``q=0`` is the plug-in estimator.
    target, component : str, int
        Forwarded to the heterocoef builder (``mean`` or ``second_moment``).
    split : str
        ``"loo"`` (leave-tuple-out, affine models) or ``"halves"``.
    cross_fit : bool
        Swap the roles of the two halves and average (split mode only).
    regularize : bool
        Use the Dirichlet posterior-mean design estimate (heterocoef with a
        binary two-factor design and intercept).
    """

    def __init__(
        self,
        model="heterocoef",
        q: int = 2,
        target: str = "mean",
        component: int = 0,
        split: str = "loo",
        cross_fit: bool = False,
        regularize: bool = False,
        max_tuples: int = 1_000_000,
        seed: int = 0,
    ):
        self.model = model
        self.q = q
        self.target = target
        self.component = component
        self.split = split
        self.cross_fit = cross_fit
        self.regularize = regularize
        self.max_tuples = max_tuples
        self.seed = seed

    def _resolve_model(self, panel: Panel) -> ModelSpec:
        if isinstance(self.model, ModelSpec):
            return self.model
        width = len(panel.units[0].observations[0])
        if self.model == "heterocoef":
            return get_model(
                "heterocoef",
                d_eta=width - 1,
                target=self.target,
                component=self.component,
            )
        return get_model(self.model)

    def fit(self, X, y=None):
        panel = as_panel(X)
        model = self._resolve_model(panel)
        panel = as_panel(panel, model)
        if self.split == "loo":
            plan = SplitPlan.leave_tuple_out()
        elif self.split == "halves":
            plan = SplitPlan.halves(panel.require_equal_T(), cross_fit=self.cross_fit)
        else:
            raise ValueError(f"unknown split {self.split!r}")
        nuisance = None
        if self.regularize:
            reg = DirichletRegularizer.fit_panel(panel)
            nuisance = reg.nuisance
            self.regularizer_ = reg
        cfg = UStatConfig(max_tuples=self.max_tuples, seed=self.seed)
        result = orth_estimate(
            panel,
            model,
            self.q,
            plan,
            cfg=cfg,
            nuisance_estimator=nuisance,
        )
        self.model_ = model
        self.result_ = result
        self.theta_ = float(result.theta_hat[0])
        self.unit_values_ = np.asarray(
            [np.nan if v is None else v for v in result.unit_values]
        )
        self.n_excluded_ = result.n_excluded
        return self
