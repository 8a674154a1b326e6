"""Numerical certification of orthogonality on finite-support distributions.

Population expectations under a discrete data distribution are finite sums,
so the orthogonality property can be checked to machine precision, and better:
the shipped fixtures have rational atoms, rational truths, and polynomial
moment functions, so population moments evaluate *exactly* in
``fractions.Fraction`` arithmetic.  The derivative protocol (nested central
differences with Richardson extrapolation over a fixed step ladder) then runs
entirely in exact arithmetic, with zero rounding noise; what remains is pure
truncation, orders of magnitude below the pass threshold.

Plain float evaluation is used automatically for models or distributions that
are not exactly representable.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .engine import MomentFunction, contract, mat_vec
from .models import ModelSpec, zeros_tensor

__all__ = [
    "DiscreteDGP",
    "OrthoReport",
    "PopulationCapError",
    "population_moment",
    "population_moment_mc",
    "orthogonality_check",
    "composition_sum_oracle",
    "hockey_stick_oracle",
    "MultiPolynomial",
    "get_fixture",
    "FIXTURE_NAMES",
    "fixture_scalar_affine",
    "fixture_scalar_quadratic",
    "fixture_scalar_cubic",
    "fixture_bivariate_affine",
    "fixture_bivariate_quadratic",
    "fixture_scalar_overid",
    "dgp_linear_iv",
    "dgp_generated_regressor",
    "dgp_heterocoef",
    "dgp_neyman_scott",
    "load_dgp",
    "save_dgp",
    "solve_eta_truth",
    "DEFAULT_STEP_LADDER",
]

DEFAULT_POPULATION_CAP = 10**7
# Step ladder for the derivative protocol; successive halving enables a
# two-stage Richardson table that cancels the h**2 and h**4 error terms.
DEFAULT_STEP_LADDER = (Fraction(1, 100), Fraction(1, 200), Fraction(1, 400))


class PopulationCapError(ValueError):
    """Exact population sum would exceed the configured term cap.

    Use :func:`population_moment_mc` for a (non-exact) Monte Carlo estimate.
    """


def _is_exact_scalar(x) -> bool:
    return isinstance(x, (int, Fraction)) and not isinstance(x, bool)


@dataclass(frozen=True)
class DiscreteDGP:
    """Finite-support data distribution with pinned true parameter values."""

    atoms: tuple[tuple[tuple, object], ...]  # ((obs tuple, probability), ...)
    theta0: tuple
    eta0: tuple
    lam0: tuple
    name: str = ""

    @property
    def exact(self) -> bool:
        scalars = list(self.theta0) + list(self.eta0) + list(self.lam0)
        for obs, prob in self.atoms:
            scalars.extend(obs)
            scalars.append(prob)
        return all(_is_exact_scalar(s) for s in scalars)

    def truth(self) -> tuple[tuple, tuple, tuple]:
        return self.theta0, self.eta0, self.lam0

    def validate(self, model: ModelSpec, tol: float = 1e-12) -> None:
        """Check probability normalization and the moment conditions at truth."""
        total = sum(prob for _, prob in self.atoms)
        if abs(float(total) - 1.0) > 1e-14:
            raise ValueError(f"probabilities sum to {float(total)}, not 1")
        if any(float(prob) <= 0 for _, prob in self.atoms):
            raise ValueError("atom probabilities must be positive")
        theta, eta, lam = self.truth()
        eg = _mean_g_tensor(model, self, theta, eta, 0)
        em = _mean_m_tensor(model, self, theta, eta, 0)
        if max(abs(float(v)) for v in eg) > tol:
            raise ValueError(f"E[g] = {[float(v) for v in eg]} is not 0 at truth")
        if abs(float(em)) > tol:
            raise ValueError(f"E[m] = {float(em)} is not 0 at truth")
        jac = _mean_g_tensor(model, self, theta, eta, 1)
        lam_matrix = model.lambda_map(lam)
        prod = [
            [
                sum(lam_matrix[i][k] * jac[k][j] for k in range(model.d_g))
                for j in range(model.d_eta)
            ]
            for i in range(model.d_eta)
        ]
        worst = max(
            abs(float(prod[i][j] - (1 if i == j else 0)))
            for i in range(model.d_eta)
            for j in range(model.d_eta)
        )
        if worst > tol:
            raise ValueError(f"Lambda(lam0) E[dg] differs from I by {worst}")


def save_dgp(dgp: DiscreteDGP, path) -> None:
    def enc(x):
        return str(x) if isinstance(x, Fraction) else x

    payload = {
        "name": dgp.name,
        "atoms": [
            {"obs": [enc(v) for v in obs], "prob": enc(p)} for obs, p in dgp.atoms
        ],
        "truth": {
            "theta": [enc(v) for v in dgp.theta0],
            "eta": [enc(v) for v in dgp.eta0],
            "lambda": [enc(v) for v in dgp.lam0],
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def load_dgp(path) -> DiscreteDGP:
    with open(path) as fh:
        payload = json.load(fh)

    def dec(x):
        if isinstance(x, str):
            return Fraction(x)
        if isinstance(x, int):
            return x
        return float(x)

    atoms = tuple(
        (tuple(dec(v) for v in atom["obs"]), dec(atom["prob"]))
        for atom in payload["atoms"]
    )
    truth = payload["truth"]
    return DiscreteDGP(
        atoms=atoms,
        theta0=tuple(dec(v) for v in truth["theta"]),
        eta0=tuple(dec(v) for v in truth["eta"]),
        lam0=tuple(dec(v) for v in truth["lambda"]),
        name=payload.get("name", ""),
    )


# ---------------------------------------------------------------------------
# Exact population moments
# ---------------------------------------------------------------------------


def _tensor_add(a, b):
    if isinstance(a, (list, tuple)):
        return [_tensor_add(x, y) for x, y in zip(a, b)]
    return a + b


def _tensor_scale(a, s):
    if isinstance(a, (list, tuple)):
        return [_tensor_scale(x, s) for x in a]
    return a * s


def _mean_g_tensor(model, dgp, theta, eta, order, cap=DEFAULT_POPULATION_CAP):
    """E[p-th derivative of g], enumerating block tuples when g uses blocks."""
    block = model.g_block_size
    if len(dgp.atoms) ** block > cap:
        raise PopulationCapError(
            f"{len(dgp.atoms)}**{block} block tuples exceed the cap {cap}"
        )
    total = None
    if block == 1:
        for obs, prob in dgp.atoms:
            t = _tensor_scale(model.g_derivative(obs, theta, eta, order), prob)
            total = t if total is None else _tensor_add(total, t)
    else:
        for combo in itertools.product(dgp.atoms, repeat=block):
            obs = tuple(o for o, _ in combo)
            prob = math.prod(p for _, p in combo)
            t = _tensor_scale(model.g_derivative(obs, theta, eta, order), prob)
            total = t if total is None else _tensor_add(total, t)
    return total


def _mean_m_tensor(model, dgp, theta, eta, order):
    total = None
    for obs, prob in dgp.atoms:
        t = _tensor_scale(model.m_derivative(obs, theta, eta, order), prob)
        total = t if total is None else _tensor_add(total, t)
    return total


def _deterministic_kernel(tree, mean_g, mean_m, lam_matrix, d_g):
    """Tree kernel with every node replaced by its expected tensor."""

    def eval_nonroot(node):
        vals = [eval_nonroot(c) for c in node.children]
        p = len(node.children)
        tensor = mean_g[p]
        if p:
            vec = [contract(tensor[k], vals) for k in range(d_g)]
        else:
            vec = tensor
        return mat_vec(lam_matrix, vec)

    vals = [eval_nonroot(c) for c in tree.children]
    r = len(tree.children)
    if r:
        return contract(mean_m[r], vals)
    return mean_m[r]


def _required_orders(psi: MomentFunction) -> tuple[set, set]:
    g_orders, m_orders = {0}, set()
    for term in psi.terms:
        m_orders.add(len(term.tree.children))

        def walk(node):
            for child in node.children:
                g_orders.add(len(child.children))
                walk(child)

        walk(term.tree)
    return g_orders, m_orders


def population_moment(
    psi: MomentFunction,
    dgp: DiscreteDGP,
    theta,
    eta,
    lam,
    mode: str = "factorized",
    cap: int = DEFAULT_POPULATION_CAP,
):
    """Exact expectation of ``psi`` under the product of ``dgp`` copies.

    ``mode='tuples'`` sums psi over all L-tuples of atoms weighted by product
    probabilities (the defining formula; cost s**L).  ``mode='factorized'``
    exploits independence across nodes: the expectation of each multilinear
    tree kernel is the same contraction with every node tensor replaced by
    its expectation.  Both are exact finite sums with identical values.
    """
    if mode == "tuples":
        L = psi.copies_required
        if len(dgp.atoms) ** L > cap:
            raise PopulationCapError(
                f"{len(dgp.atoms)}**{L} tuples exceed the cap {cap}; use "
                "population_moment_mc for a non-exact estimate"
            )
        total = 0
        for combo in itertools.product(dgp.atoms, repeat=L):
            copies = tuple(o for o, _ in combo)
            prob = math.prod(p for _, p in combo)
            total = total + prob * psi.evaluate(copies, theta, eta, lam)
        return total
    if mode != "factorized":
        raise ValueError(f"unknown mode {mode!r}")
    model = psi.model
    g_orders, m_orders = _required_orders(psi)
    mean_g = {
        p: _mean_g_tensor(model, dgp, theta, eta, p, cap=cap) for p in g_orders
    }
    mean_m = {r: _mean_m_tensor(model, dgp, theta, eta, r) for r in m_orders}
    lam_matrix = model.lambda_map(lam)
    total = 0
    for term in psi.terms:
        kern = _deterministic_kernel(term.tree, mean_g, mean_m, lam_matrix, model.d_g)
        total = total + term.coefficient * kern
    return total


def population_moment_mc(
    psi: MomentFunction,
    dgp: DiscreteDGP,
    theta,
    eta,
    lam,
    n_draws: int = 10**5,
    seed: int = 0,
) -> float:
    """Monte Carlo estimate of the population moment (flagged non-exact)."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    probs = np.asarray([float(p) for _, p in dgp.atoms])
    obs = [o for o, _ in dgp.atoms]
    L = psi.copies_required
    total = 0.0
    theta_f = tuple(float(v) for v in theta)
    eta_f = tuple(float(v) for v in eta)
    lam_f = tuple(float(v) for v in lam)
    for _ in range(n_draws):
        idx = rng.choice(len(obs), size=L, p=probs)
        copies = tuple(obs[i] for i in idx)
        total += float(psi.evaluate(copies, theta_f, eta_f, lam_f))
    return total / n_draws


# ---------------------------------------------------------------------------
# Derivative protocol
# ---------------------------------------------------------------------------


def _central_stencil(order: int):
    """Offsets (in half-steps) and weights of the order-``order`` difference."""
    return [
        (Fraction(order - 2 * i, 2), (-1) ** i * math.comb(order, i))
        for i in range(order + 1)
    ]


def _stencil_value(F, x0: tuple, orders: tuple[int, ...], h):
    """Tensor-product central difference of mixed order ``orders`` at x0."""
    axes = [i for i, a in enumerate(orders) if a > 0]
    per_axis = [_central_stencil(orders[i]) for i in axes]
    total = 0
    for combo in itertools.product(*per_axis):
        x = list(x0)
        weight = 1
        for axis, (offset, w) in zip(axes, combo):
            x[axis] = x[axis] + h * offset
            weight *= w
        total = total + weight * F(tuple(x))
    k = sum(orders)
    return total / h**k


def mixed_partial(F, x0: tuple, orders: tuple[int, ...], ladder=DEFAULT_STEP_LADDER):
    """Mixed partial derivative by central differences + Richardson.

    The three-rung ladder (ratio 2) eliminates the h**2 and h**4 truncation
    terms.  Exact inputs give an exact rational result.
    """
    h0, h1, h2 = ladder
    d0 = _stencil_value(F, x0, orders, h0)
    d1 = _stencil_value(F, x0, orders, h1)
    d2 = _stencil_value(F, x0, orders, h2)
    r0 = (4 * d1 - d0) / 3
    r1 = (4 * d2 - d1) / 3
    return (16 * r1 - r0) / 15


def _compositions(total: int, n_axes: int):
    """All tuples of nonnegative ints of length n_axes summing to total."""
    if n_axes == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, n_axes - 1):
            yield (first,) + rest


@dataclass(frozen=True)
class OrthoReport:
    """Derivative magnitudes of the population moment at the truth."""

    q: int
    check_order: int
    value_at_truth: float
    entries: tuple  # ((alpha, beta, magnitude), ...)
    pass_tol: float
    fail_tol: float
    exact: bool
    affine_only: bool = False
    model_name: str = ""
    dgp_name: str = ""

    def max_by_order(self) -> dict[int, float]:
        out: dict[int, float] = {}
        for alpha, beta, mag in self.entries:
            k = sum(alpha) + sum(beta)
            out[k] = max(out.get(k, 0.0), mag)
        return out

    def max_up_to(self, order: int) -> float:
        by_order = self.max_by_order()
        vals = [v for k, v in by_order.items() if k <= order]
        return max(vals) if vals else 0.0

    @property
    def first_nonvanishing_order(self) -> int | None:
        by_order = self.max_by_order()
        hits = [k for k, v in sorted(by_order.items()) if v > self.fail_tol]
        return hits[0] if hits else None

    @property
    def passed(self) -> bool:
        return (
            abs(self.value_at_truth) <= self.pass_tol
            and self.max_up_to(self.q) <= self.pass_tol
        )

    def to_json_dict(self) -> dict:
        return {
            "model": self.model_name,
            "dgp": self.dgp_name,
            "q": self.q,
            "check_order": self.check_order,
            "affine_only": self.affine_only,
            "exact_arithmetic": self.exact,
            "value_at_truth": self.value_at_truth,
            "pass_tol": self.pass_tol,
            "fail_tol": self.fail_tol,
            "max_by_order": {str(k): v for k, v in sorted(self.max_by_order().items())},
            "first_nonvanishing_order": self.first_nonvanishing_order,
            "passed": self.passed,
            "derivatives": [
                {"alpha": list(alpha), "beta": list(beta), "magnitude": mag}
                for alpha, beta, mag in self.entries
            ],
        }


def orthogonality_check(
    model: ModelSpec,
    dgp: DiscreteDGP,
    q: int,
    check_order: int | None = None,
    affine_only: bool = False,
    ladder=DEFAULT_STEP_LADDER,
    pass_tol: float = 1e-7,
    fail_tol: float = 1e-3,
    cap: int = DEFAULT_POPULATION_CAP,
    exact: bool | None = None,
) -> OrthoReport:
    """Differentiate the population moment at the truth, order by order.

    Every mixed (eta, lambda) multi-index with total order between 1 and
    ``check_order`` (default q + 1) is evaluated by nested central
    differences with Richardson extrapolation over ``ladder``; exact rational
    arithmetic is used whenever the distribution and truth allow it.
    """
    from .engine import assemble_psi, assemble_psi_affine

    if check_order is None:
        check_order = q + 1
    if check_order > q + 1:
        raise ValueError(
            f"check_order={check_order} exceeds q+1={q + 1}; derivatives above "
            "q+1 are outside the certification contract"
        )
    if exact is None:
        exact = dgp.exact
    psi = assemble_psi_affine(q, model) if affine_only else assemble_psi(q, model)
    theta0, eta0, lam0 = dgp.truth()
    if not exact:
        theta0 = tuple(float(v) for v in theta0)
        eta0 = tuple(float(v) for v in eta0)
        lam0 = tuple(float(v) for v in lam0)
        ladder = tuple(float(h) for h in ladder)
    d_eta, d_lam = model.d_eta, model.d_lambda

    g_orders, m_orders = _required_orders(psi)
    mean_cache: dict[tuple, tuple] = {}

    def F(x: tuple):
        eta = x[:d_eta]
        lam = x[d_eta:]
        cached = mean_cache.get(eta)
        if cached is None:
            mean_g = {
                p: _mean_g_tensor(model, dgp, theta0, eta, p, cap=cap)
                for p in g_orders
            }
            mean_m = {r: _mean_m_tensor(model, dgp, theta0, eta, r) for r in m_orders}
            cached = (mean_g, mean_m)
            mean_cache[eta] = cached
        mean_g, mean_m = cached
        lam_matrix = model.lambda_map(lam)
        total = 0
        for term in psi.terms:
            kern = _deterministic_kernel(
                term.tree, mean_g, mean_m, lam_matrix, model.d_g
            )
            total = total + term.coefficient * kern
        return total

    x0 = tuple(eta0) + tuple(lam0)
    value_at_truth = float(F(x0))
    entries = []
    for total_order in range(1, check_order + 1):
        for combo in _compositions(total_order, d_eta + d_lam):
            alpha, beta = combo[:d_eta], combo[d_eta:]
            deriv = mixed_partial(F, x0, combo, ladder=ladder)
            entries.append((alpha, beta, abs(float(deriv))))
    return OrthoReport(
        q=q,
        check_order=check_order,
        value_at_truth=value_at_truth,
        entries=tuple(entries),
        pass_tol=pass_tol,
        fail_tol=fail_tol,
        exact=exact,
        affine_only=affine_only,
        model_name=model.name,
        dgp_name=dgp.name,
    )


# ---------------------------------------------------------------------------
# Brute-force oracles for the combinatorial identities
# ---------------------------------------------------------------------------


def composition_sum_oracle(cs: Sequence[int], q: int) -> Fraction:
    """Brute-force weighted composition sum.

    Enumerates every composition (k_1, ..., k_r) of K with k_s >= 1 and
    K <= q, weighting by (-1)**K binom(q, K) prod_s (-1)**c_s binom(k_s, c_s).
    The r = 0 case is the empty-product convention 1.
    """
    r = len(cs)
    if r == 0:
        return Fraction(1)
    total = 0
    for K in range(r, q + 1):
        for comp in _positive_compositions(K, r):
            prod = (-1) ** K * math.comb(q, K)
            for k_s, c_s in zip(comp, cs):
                prod *= (-1) ** c_s * math.comb(k_s, c_s)
            total += prod
    return Fraction(total)


def _positive_compositions(total: int, parts: int):
    if parts == 1:
        if total >= 1:
            yield (total,)
        return
    for first in range(1, total - parts + 2):
        for rest in _positive_compositions(total - first, parts - 1):
            yield (first,) + rest


def hockey_stick_oracle(
    a: Sequence[int], M: int, grid_cap: int = 10**7
) -> tuple[int, int]:
    """Both sides of the multidimensional hockey-stick identity.

    Returns (brute-force sum, closed form); the brute force enumerates every
    nonnegative integer tuple with sum at most M.
    """
    n = len(a)
    if n < 1:
        raise ValueError("need at least one exponent")
    if M < 0:
        raise ValueError("M must be nonnegative")
    grid_points = math.comb(M + n, n)
    if grid_points > grid_cap:
        raise ValueError(f"{grid_points} grid points exceed the cap {grid_cap}")
    brute = 0
    for x in _compositions_at_most(M, n):
        prod = 1
        for xi, ai in zip(x, a):
            prod *= math.comb(xi + ai, ai)
        brute += prod
    s = n + sum(a)
    closed = math.comb(M + s, s)
    return brute, closed


def _compositions_at_most(total: int, n_axes: int):
    for used in range(total + 1):
        yield from _compositions(used, n_axes)


# ---------------------------------------------------------------------------
# Multivariate polynomials with exact coefficients (fixture targets)
# ---------------------------------------------------------------------------


class MultiPolynomial:
    """Polynomial in several variables stored as {exponent tuple: coefficient}."""

    def __init__(self, n_vars: int, terms: dict):
        self.n_vars = n_vars
        self.terms = dict(terms)

    @classmethod
    def taylor_bump(cls, center: Sequence, degree: int, scale=Fraction(1, 2)):
        """sum over |e| <= degree of scale**|e| * prod (x_i - c_i)**e_i.

        All mixed partials at the center through ``degree`` equal
        scale**|e| * prod e_i!, so none vanishes.
        """
        n = len(center)
        terms: dict[tuple, Fraction] = {}
        for total in range(degree + 1):
            for expo in _compositions(total, n):
                coeff = scale**total
                # expand prod (x_i - c_i)**e_i
                pieces = [
                    [
                        (j, math.comb(e, j) * (-center[i]) ** (e - j))
                        for j in range(e + 1)
                    ]
                    for i, e in enumerate(expo)
                ]
                for combo in itertools.product(*pieces):
                    mono = tuple(j for j, _ in combo)
                    weight = coeff
                    for _, w in combo:
                        weight *= w
                    terms[mono] = terms.get(mono, 0) + weight
        return cls(n, terms)

    def partial_value(self, alpha: Sequence[int], x: Sequence):
        """Value of the mixed partial d^alpha at x."""
        total = 0
        for expo, coeff in self.terms.items():
            prod = coeff
            ok = True
            for e, a, xi in zip(expo, alpha, x):
                if a > e:
                    ok = False
                    break
                prod *= math.perm(e, a)
                prod = prod * xi ** (e - a) if e - a else prod
            if ok:
                total += prod
        return total

    def __call__(self, x):
        return self.partial_value((0,) * self.n_vars, x)

    def derivative_tensor(self, x: Sequence, order: int):
        """Symmetric derivative tensor of the given order, as nested lists."""
        n = self.n_vars
        if order == 0:
            return self(x)
        out = zeros_tensor((n,) * order)
        for slots in itertools.product(range(n), repeat=order):
            alpha = [0] * n
            for j in slots:
                alpha[j] += 1
            ref = out
            for j in slots[:-1]:
                ref = ref[j]
            ref[slots[-1]] = self.partial_value(alpha, x)
        return out


# ---------------------------------------------------------------------------
# Shipped fixtures
# ---------------------------------------------------------------------------
#
# Atoms, truths, and coefficients are rational, so every check on these
# fixtures runs in exact arithmetic.  Targets use a full polynomial whose
# derivatives at the truth are k!/2**k (never zero), which makes the
# first-failing-order sharpness visible.


def _mat_inv_exact(matrix):
    n = len(matrix)
    aug = [
        [Fraction(matrix[i][j]) for j in range(n)]
        + [Fraction(1 if i == j else 0) for j in range(n)]
        for i in range(n)
    ]
    for col in range(n):
        pivot = next(r for r in range(col, n) if aug[r][col] != 0)
        aug[col], aug[pivot] = aug[pivot], aug[col]
        factor = aug[col][col]
        aug[col] = [v / factor for v in aug[col]]
        for r in range(n):
            if r != col and aug[r][col] != 0:
                f = aug[r][col]
                aug[r] = [v - f * w for v, w in zip(aug[r], aug[col])]
    return [row[n:] for row in aug]


def _vec(matrix):
    return tuple(v for row in matrix for v in row)


def _fixture_model(
    name: str,
    d_eta: int,
    obs_dim: int,
    g_orders: dict[int, Callable],
    target: MultiPolynomial,
    obs_mean0,
) -> ModelSpec:
    """Model with polynomial g supplied order-by-order and target
    m(w, theta, eta) = P(eta) * (1 + (w[0] - E w[0])) - theta."""
    max_g_order = max(g_orders)

    def g_deriv(obs, theta, eta, order):
        fn = g_orders.get(order)
        if fn is None:
            return zeros_tensor((d_eta,) + (d_eta,) * order)
        return fn(obs, eta)

    def m_deriv(obs, theta, eta, order):
        factor = 1 + (obs[0] - obs_mean0)
        tensor = target.derivative_tensor(eta, order)
        if order == 0:
            return tensor * factor - theta[0]
        return _tensor_scale(tensor, factor)

    from .models import _full_matrix_lambda

    return ModelSpec(
        name=name,
        d_eta=d_eta,
        d_g=d_eta,
        d_lambda=d_eta * d_eta,
        d_theta=1,
        obs_dim=obs_dim,
        g_deriv=g_deriv,
        m_deriv=m_deriv,
        lambda_map=_full_matrix_lambda(d_eta, d_eta),
        max_order=99,
        g_affine=(max_g_order <= 1),
        target_is_shift=True,
        obs_names=tuple(f"w{j+1}" for j in range(obs_dim)),
    )


def fixture_scalar_affine() -> tuple[ModelSpec, DiscreteDGP]:
    """Scalar affine model g = w1 (w2 - eta) on a 3-atom distribution."""
    F = Fraction
    atoms = (
        ((1, F(1, 2)), F(1, 2)),
        ((2, 1), F(1, 4)),
        ((1, 0), F(1, 4)),
    )
    eta0 = F(3, 5)
    j0 = -F(5, 4)
    target = MultiPolynomial.taylor_bump((eta0,), degree=8)
    model = _fixture_model(
        "scalar-affine",
        d_eta=1,
        obs_dim=2,
        g_orders={
            0: lambda obs, eta: [obs[0] * (obs[1] - eta[0])],
            1: lambda obs, eta: [[-obs[0]]],
        },
        target=target,
        obs_mean0=F(5, 4),
    )
    dgp = DiscreteDGP(
        atoms=atoms,
        theta0=(target((eta0,)),),
        eta0=(eta0,),
        lam0=(1 / j0,),
        name="scalar-affine",
    )
    return model, dgp


def _scalar_poly_g_fixture(name, coeffs, eta0, atoms):
    """g = w1 (w2 - sum_k coeffs[k] eta**k); coeffs[1] normalized to 1."""
    F = Fraction

    def g0(obs, eta):
        poly = sum(c * eta[0] ** k for k, c in coeffs.items())
        return [obs[0] * (obs[1] - poly)]

    def make_order(p):
        def gp(obs, eta):
            val = -sum(
                c * math.perm(k, p) * eta[0] ** (k - p)
                for k, c in coeffs.items()
                if k >= p
            )
            out = obs[0] * val
            for _ in range(p):
                out = [out]
            return [out]

        return gp

    g_orders = {0: g0}
    for p in range(1, max(coeffs) + 1):
        g_orders[p] = make_order(p)
    target = MultiPolynomial.taylor_bump((eta0,), degree=8)
    model = _fixture_model(
        name, d_eta=1, obs_dim=2, g_orders=g_orders, target=target,
        obs_mean0=F(5, 4),
    )
    dpoly = sum(c * k * eta0 ** (k - 1) for k, c in coeffs.items() if k >= 1)
    j0 = -F(5, 4) * dpoly
    dgp = DiscreteDGP(
        atoms=atoms,
        theta0=(target((eta0,)),),
        eta0=(eta0,),
        lam0=(1 / j0,),
        name=name,
    )
    return model, dgp


def fixture_scalar_quadratic() -> tuple[ModelSpec, DiscreteDGP]:
    """Nonlinear scalar model g = w1 (w2 - eta - 0.3 eta**2), 3 atoms."""
    F = Fraction
    atoms = (
        ((1, F(1, 4)), F(1, 2)),
        ((2, F(7, 10)), F(1, 4)),
        ((1, F(39, 40)), F(1, 4)),
    )
    return _scalar_poly_g_fixture(
        "scalar-quadratic", {1: 1, 2: F(3, 10)}, F(1, 2), atoms
    )


def fixture_scalar_cubic() -> tuple[ModelSpec, DiscreteDGP]:
    """Nonlinear scalar model with a cubic g term (exercises third g-derivatives)."""
    F = Fraction
    atoms = (
        ((1, F(1, 4)), F(1, 2)),
        ((2, F(7, 10)), F(1, 4)),
        ((1, F(39, 40)), F(1, 4)),
    )
    return _scalar_poly_g_fixture(
        "scalar-cubic", {1: 1, 2: F(1, 4), 3: F(1, 10)}, F(1, 2), atoms
    )


def fixture_bivariate_affine() -> tuple[ModelSpec, DiscreteDGP]:
    """Two-dimensional affine model with a coupled Jacobian, 3 atoms."""
    F = Fraction
    atoms = (
        ((1, F(1, 4), F(1, 4)), F(1, 4)),
        ((1, 1, F(1, 4)), F(1, 4)),
        ((2, F(5, 8), F(7, 16)), F(1, 2)),
    )
    eta0 = (F(1, 2), F(1, 4))
    B = [[1, F(1, 2)], [F(1, 4), 1]]  # g_k = u (y_k - (B eta)_k)

    def g0(obs, eta):
        u, y = obs[0], obs[1:3]
        return [
            u * (y[k] - sum(B[k][j] * eta[j] for j in range(2))) for k in range(2)
        ]

    def g1(obs, eta):
        u = obs[0]
        return [[-u * B[k][j] for j in range(2)] for k in range(2)]

    target = MultiPolynomial.taylor_bump(eta0, degree=5)
    model = _fixture_model(
        "bivariate-affine",
        d_eta=2,
        obs_dim=3,
        g_orders={0: g0, 1: g1},
        target=target,
        obs_mean0=F(3, 2),
    )
    j0 = [[-F(3, 2) * B[k][j] for j in range(2)] for k in range(2)]
    lam0 = _vec(_mat_inv_exact(j0))
    dgp = DiscreteDGP(
        atoms=atoms,
        theta0=(target(eta0),),
        eta0=eta0,
        lam0=lam0,
        name="bivariate-affine",
    )
    return model, dgp


def fixture_bivariate_quadratic() -> tuple[ModelSpec, DiscreteDGP]:
    """Two-dimensional nonlinear model (bilinear and quadratic g terms), 4 atoms."""
    F = Fraction
    atoms = (
        ((1, F(1, 4), F(1, 4)), F(1, 4)),
        ((1, 1, F(1, 4)), F(1, 8)),
        ((2, F(3, 4), F(1, 2)), F(1, 2)),
        ((1, F(3, 10), F(-7, 40)), F(1, 8)),
    )
    eta0 = (F(1, 2), F(1, 4))
    c1, c2 = F(1, 5), F(1, 10)

    # g1 = u (y1 - eta1 - eta2/2 - c1 eta1 eta2)
    # g2 = u (y2 - eta1/4 - eta2 - c2 eta2**2)
    def g0(obs, eta):
        u, y1, y2 = obs[0], obs[1], obs[2]
        e1, e2 = eta
        return [
            u * (y1 - e1 - e2 / 2 - c1 * e1 * e2),
            u * (y2 - e1 / 4 - e2 - c2 * e2 * e2),
        ]

    def g1(obs, eta):
        u = obs[0]
        e1, e2 = eta
        return [
            [u * (-1 - c1 * e2), u * (-F(1, 2) - c1 * e1)],
            [u * (-F(1, 4)), u * (-1 - 2 * c2 * e2)],
        ]

    def g2(obs, eta):
        u = obs[0]
        return [
            [[0, -c1 * u], [-c1 * u, 0]],
            [[0, 0], [0, -2 * c2 * u]],
        ]

    target = MultiPolynomial.taylor_bump(eta0, degree=5)
    model = _fixture_model(
        "bivariate-quadratic",
        d_eta=2,
        obs_dim=3,
        g_orders={0: g0, 1: g1, 2: g2},
        target=target,
        obs_mean0=F(3, 2),
    )
    eu = F(3, 2)
    j0 = [
        [eu * (-1 - c1 * eta0[1]), eu * (-F(1, 2) - c1 * eta0[0])],
        [eu * (-F(1, 4)), eu * (-1 - 2 * c2 * eta0[1])],
    ]
    lam0 = _vec(_mat_inv_exact(j0))
    dgp = DiscreteDGP(
        atoms=atoms,
        theta0=(target(eta0),),
        eta0=eta0,
        lam0=lam0,
        name="bivariate-quadratic",
    )
    return model, dgp


def fixture_scalar_overid() -> tuple[ModelSpec, DiscreteDGP]:
    """Scalar nuisance with a two-dimensional g (overidentified), 3 atoms."""
    F = Fraction
    atoms = (
        ((1, F(1, 2), 1, F(1, 2)), F(1, 2)),
        ((2, F(3, 4), 1, F(1, 4)), F(1, 4)),
        ((1, 0, 2, F(5, 8)), F(1, 4)),
    )
    eta0 = F(1, 2)

    def g0(obs, eta):
        return [obs[0] * (obs[1] - eta[0]), obs[2] * (obs[3] - eta[0])]

    def g1(obs, eta):
        return [[-obs[0]], [-obs[2]]]

    target = MultiPolynomial.taylor_bump((eta0,), degree=8)

    def g_deriv(obs, theta, eta, order):
        if order == 0:
            return g0(obs, eta)
        if order == 1:
            return g1(obs, eta)
        return zeros_tensor((2,) + (1,) * order)

    def m_deriv(obs, theta, eta, order):
        factor = 1 + (obs[0] - F(5, 4))
        tensor = target.derivative_tensor(eta, order)
        if order == 0:
            return tensor * factor - theta[0]
        return _tensor_scale(tensor, factor)

    from .models import _full_matrix_lambda

    model = ModelSpec(
        name="scalar-overid",
        d_eta=1,
        d_g=2,
        d_lambda=2,
        d_theta=1,
        obs_dim=4,
        g_deriv=g_deriv,
        m_deriv=m_deriv,
        lambda_map=_full_matrix_lambda(1, 2),
        max_order=99,
        g_affine=True,
        target_is_shift=True,
    )
    # J0 = (-5/4, -5/4)'; Lambda0 = (J0'J0)^{-1} J0' (identity weight)
    j0 = (-F(5, 4), -F(5, 4))
    denom = j0[0] ** 2 + j0[1] ** 2
    lam0 = (j0[0] / denom, j0[1] / denom)
    dgp = DiscreteDGP(
        atoms=atoms,
        theta0=(target((eta0,)),),
        eta0=(eta0,),
        lam0=lam0,
        name="scalar-overid",
    )
    return model, dgp


_FIXTURES = {
    "scalar-affine": fixture_scalar_affine,
    "scalar-quadratic": fixture_scalar_quadratic,
    "scalar-cubic": fixture_scalar_cubic,
    "bivariate-affine": fixture_bivariate_affine,
    "bivariate-quadratic": fixture_bivariate_quadratic,
    "scalar-overid": fixture_scalar_overid,
}
FIXTURE_NAMES = tuple(sorted(_FIXTURES))


def get_fixture(name: str) -> tuple[ModelSpec, DiscreteDGP]:
    try:
        return _FIXTURES[name]()
    except KeyError:
        raise ValueError(
            f"unknown fixture {name!r}; choose from {FIXTURE_NAMES}"
        ) from None


# ---------------------------------------------------------------------------
# Discrete distributions for the built-in models
# ---------------------------------------------------------------------------


def dgp_linear_iv(n_controls: int = 1) -> DiscreteDGP:
    """Exact-truth distribution for the linear IV model (K = 1 or 2)."""
    F = Fraction
    theta0 = F(1, 3)
    if n_controls == 1:
        eta0 = (F(2, 5),)
        # (d, z, x, u) symmetric in u so that E[xu] = E[zu] = 0
        base = [
            ((1, 1, 1, F(1, 4)), F(1, 4)),
            ((1, 1, 1, F(-1, 4)), F(1, 4)),
            ((0, F(1, 2), 2, F(1, 2)), F(1, 4)),
            ((0, F(1, 2), 2, F(-1, 2)), F(1, 4)),
        ]
        atoms = []
        for (d, z, x, u), p in base:
            y = d * theta0 + x * eta0[0] + u
            atoms.append(((y, d, z, x), p))
        exx = sum(p * obs[3] ** 2 for obs, p in atoms)
        lam0 = (-1 / exx,)
    elif n_controls == 2:
        eta0 = (F(2, 5), F(-1, 4))
        base = [
            ((1, 1, 1, F(1, 2), F(1, 4)), F(1, 4)),
            ((1, 1, 1, F(1, 2), F(-1, 4)), F(1, 4)),
            ((0, F(1, 2), 2, -1, F(1, 2)), F(1, 4)),
            ((0, F(1, 2), 2, -1, F(-1, 2)), F(1, 4)),
        ]
        atoms = []
        for (d, z, x1, x2, u), p in base:
            y = d * theta0 + x1 * eta0[0] + x2 * eta0[1] + u
            atoms.append(((y, d, z, x1, x2), p))
        xs = [(obs[3], obs[4]) for obs, _ in atoms]
        ps = [p for _, p in atoms]
        exx = [
            [sum(p * x[i] * x[j] for x, p in zip(xs, ps)) for j in range(2)]
            for i in range(2)
        ]
        lam0 = _vec(_mat_inv_exact([[-exx[i][j] for j in range(2)] for i in range(2)]))
    else:
        raise ValueError("n_controls must be 1 or 2")
    return DiscreteDGP(
        atoms=tuple(atoms),
        theta0=(theta0,),
        eta0=eta0,
        lam0=lam0,
        name=f"linear-iv-k{n_controls}",
    )


def dgp_generated_regressor(f) -> DiscreteDGP:
    """Exact-truth distribution for the generated-regressor model (d_eta = 1)."""
    F = Fraction
    atoms_rx = [((1, 1), F(1, 2)), ((0, 2), F(1, 4)), ((F(1, 2), 1), F(1, 4))]
    exx = sum(p * obs[1] ** 2 for obs, p in atoms_rx)
    exr = sum(p * obs[0] * obs[1] for obs, p in atoms_rx)
    eta0 = exr / exx
    theta0 = sum(p * f.derivative(obs[1] * eta0, 0) for obs, p in atoms_rx)
    return DiscreteDGP(
        atoms=tuple(atoms_rx),
        theta0=(theta0,),
        eta0=(eta0,),
        lam0=(-1 / exx,),
        name="generated-regressor",
    )


def dgp_heterocoef() -> DiscreteDGP:
    """Exact-truth distribution for the scalar heterogeneous-coefficient model."""
    F = Fraction
    atoms = (((1, 1), F(1, 2)), ((F(1, 2), 2), F(1, 4)), ((0, 1), F(1, 4)))
    exx = sum(p * obs[1] ** 2 for obs, p in atoms)
    exy = sum(p * obs[0] * obs[1] for obs, p in atoms)
    eta0 = exy / exx
    return DiscreteDGP(
        atoms=atoms,
        theta0=(eta0 * eta0,),
        eta0=(eta0,),
        lam0=(-1 / exx,),
        name="heterocoef-scalar",
    )


def dgp_neyman_scott(m, eta0=Fraction(2, 5)) -> DiscreteDGP:
    """Three-atom zero-mean noise around eta0; Lambda = -1 is known."""
    F = Fraction
    noise = ((F(-1, 2), F(3, 8)), (F(0), F(3, 8)), (F(3, 4), F(1, 4)))
    atoms = tuple(((eta0 + u,), p) for u, p in noise)
    return DiscreteDGP(
        atoms=atoms,
        theta0=(m.derivative(eta0, 0),),
        eta0=(eta0,),
        lam0=(-1,),
        name="neyman-scott",
    )


def solve_eta_truth(model: ModelSpec, dgp: DiscreteDGP, eta_start=None, tol=1e-14):
    """Root-find E[g](theta0, eta) = 0 in floats; cross-checks pinned truths."""
    theta = tuple(float(v) for v in dgp.theta0)
    d = model.d_eta
    eta = np.asarray(
        [float(v) for v in (eta_start if eta_start is not None else dgp.eta0)]
    )
    for _ in range(200):
        g = np.asarray(
            [
                float(v)
                for v in _mean_g_tensor(model, dgp, theta, tuple(eta), 0)
            ]
        )
        if np.max(np.abs(g)) < tol:
            break
        jac = np.asarray(
            _mean_g_tensor(model, dgp, theta, tuple(eta), 1), dtype=float
        )
        step = np.linalg.lstsq(jac, -g, rcond=None)[0]
        eta = eta + step
    return tuple(eta)
