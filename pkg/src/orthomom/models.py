"""Model interface: moment functions, derivative suppliers, built-in examples.

A model is a pair of moment functions (g, m) together with suppliers for
their derivative tensors in the nuisance parameter and a parametrization of
the Jacobian left-inverse.  Derivative suppliers use plain Python arithmetic
on nested lists so that they work unchanged with floats and with exact
``fractions.Fraction`` inputs; the latter is what makes machine-precision-free
orthogonality certification possible on discrete data distributions.

Tensor layout conventions:

* ``g_deriv(obs, theta, eta, p)`` returns a nested list of depth ``p + 1``:
  the first index runs over the d_g outputs, the remaining ``p`` indices over
  the d_eta input slots.  ``p = 0`` gives g itself (a flat list).
* ``m_deriv(obs, theta, eta, r)`` returns a nested list of depth ``r`` (a bare
  scalar for ``r = 0``); m is scalar-valued.
* ``lambda_map(lam)`` returns the d_eta x d_g matrix as a list of rows.

All tensors are symmetric in their input slots.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DerivativeTensor",
    "ModelSpec",
    "Polynomial",
    "DerivativeFallbackWarning",
    "fd_derivative",
    "slot_asymmetry",
    "builtin_linear_iv",
    "builtin_generated_regressor",
    "builtin_heterocoef",
    "builtin_neyman_scott",
    "get_model",
    "zeros_tensor",
]

FD_MAX_ORDER = 4


class DerivativeFallbackWarning(UserWarning):
    """Emitted when a derivative beyond the analytic depth is approximated."""


@dataclass(frozen=True)
class DerivativeTensor:
    """Dense symmetric derivative tensor with an explicit output dimension.

    ``entries`` has shape ``(output_dim,) + (d_eta,) * order``; m-derivatives
    carry ``output_dim == 1``.
    """

    entries: np.ndarray

    @property
    def output_dim(self) -> int:
        return self.entries.shape[0]

    @property
    def order(self) -> int:
        return self.entries.ndim - 1

    def max_asymmetry(self) -> float:
        return slot_asymmetry(self.entries)


def slot_asymmetry(entries: np.ndarray) -> float:
    """Largest deviation of a tensor from symmetry in its input slots.

    The first axis is the output dimension and is not permuted.
    """
    arr = np.asarray(entries, dtype=float)
    order = arr.ndim - 1
    worst = 0.0
    for perm in itertools.permutations(range(1, arr.ndim)):
        moved = np.transpose(arr, (0,) + perm)
        worst = max(worst, float(np.max(np.abs(arr - moved))) if arr.size else 0.0)
    return worst


def zeros_tensor(shape: Sequence[int]):
    """Nested list of integer zeros (exact in both float and Fraction mode)."""
    if not shape:
        return 0
    return [zeros_tensor(shape[1:]) for _ in range(shape[0])]


@dataclass(frozen=True)
class ModelSpec:
    """Contract by which a model supplies (g, m), derivatives, and Lambda."""

    name: str
    d_eta: int
    d_g: int
    d_lambda: int
    d_theta: int
    obs_dim: int
    g_deriv: Callable
    m_deriv: Callable
    lambda_map: Callable
    max_order: int
    g_affine: bool = False
    m_uses_observation: bool = True
    target_is_shift: bool = False
    g_block_size: int = 1
    lambda_known: tuple | None = None
    lambda_encode: Callable | None = None
    obs_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.d_g < self.d_eta:
            raise ValueError(
                f"d_g={self.d_g} must be at least d_eta={self.d_eta}"
            )

    def g_derivative(self, obs, theta, eta, order: int, fd_depth: int = FD_MAX_ORDER):
        """g-derivative of any order, falling back to finite differences."""
        if order <= self.max_order:
            return self.g_deriv(obs, theta, eta, order)
        warnings.warn(
            f"model {self.name!r}: g derivative of order {order} approximated "
            f"by finite differences (analytic depth {self.max_order})",
            DerivativeFallbackWarning,
            stacklevel=2,
        )
        return fd_derivative(self, "g", obs, theta, eta, order, depth=fd_depth).entries

    def m_derivative(self, obs, theta, eta, order: int, fd_depth: int = FD_MAX_ORDER):
        """m-derivative of any order, falling back to finite differences."""
        if order <= self.max_order:
            return self.m_deriv(obs, theta, eta, order)
        warnings.warn(
            f"model {self.name!r}: m derivative of order {order} approximated "
            f"by finite differences (analytic depth {self.max_order})",
            DerivativeFallbackWarning,
            stacklevel=2,
        )
        out = fd_derivative(self, "m", obs, theta, eta, order, depth=fd_depth)
        return out.entries[0]


# ---------------------------------------------------------------------------
# Finite-difference fallback
# ---------------------------------------------------------------------------


def fd_derivative(
    model: ModelSpec,
    which: str,
    obs,
    theta,
    eta,
    order: int,
    depth: int = FD_MAX_ORDER,
) -> DerivativeTensor:
    """Central finite-difference derivative tensor of g or m.

    Differences are nested from the base function, with step
    ``h = eps**(1/(order+2)) * max(1, ||eta||)`` and full symmetrization over
    the input slots.
    """
    if which not in ("g", "m"):
        raise ValueError(f"which must be 'g' or 'm', got {which!r}")
    if order < 1:
        raise ValueError("fd_derivative requires order >= 1")
    if order > depth:
        raise ValueError(
            f"requested order {order} exceeds the finite-difference depth {depth}"
        )
    d = model.d_eta
    eta0 = np.asarray([float(v) for v in eta])
    h = float(np.finfo(float).eps ** (1.0 / (order + 2))) * max(
        1.0, float(np.linalg.norm(eta0))
    )

    if which == "g":
        base = lambda e: np.asarray(
            model.g_deriv(obs, theta, tuple(e), 0), dtype=float
        )
        out_dim = model.d_g
    else:
        base = lambda e: np.atleast_1d(
            np.asarray(model.m_deriv(obs, theta, tuple(e), 0), dtype=float)
        )
        out_dim = 1

    cache: dict[tuple, np.ndarray] = {}

    def f_at(offset: tuple) -> np.ndarray:
        val = cache.get(offset)
        if val is None:
            val = base(eta0 + h * np.asarray(offset))
            cache[offset] = val
        return val

    def diff(slots: tuple[int, ...], offset: np.ndarray) -> np.ndarray:
        if not slots:
            return f_at(tuple(offset))
        j, rest = slots[0], slots[1:]
        up = offset.copy()
        up[j] += 1
        dn = offset.copy()
        dn[j] -= 1
        return (diff(rest, up) - diff(rest, dn)) / (2.0 * h)

    # Average each slot-permutation class and write the common value back, so
    # the returned tensor is exactly symmetric.
    tensor = np.zeros((out_dim,) + (d,) * order)
    for slots in itertools.combinations_with_replacement(range(d), order):
        variants = set(itertools.permutations(slots))
        value = sum(diff(v, np.zeros(d, dtype=int)) for v in variants) / len(variants)
        for v in variants:
            tensor[(slice(None),) + v] = value
    return DerivativeTensor(entries=tensor)


# ---------------------------------------------------------------------------
# Smooth scalar functions
# ---------------------------------------------------------------------------


class Polynomial:
    """Univariate polynomial with generic (exact-capable) coefficients."""

    def __init__(self, coefficients: Sequence):
        self.coefficients = tuple(coefficients)

    @classmethod
    def from_taylor(cls, center, values: Sequence) -> "Polynomial":
        """Polynomial with prescribed derivatives ``values[k] = p^(k)(center)``."""
        coeffs = [0] * len(values)
        for k, v in enumerate(values):
            term = Fraction(1, math.factorial(k)) * v
            # expand term * (x - center)**k
            binom_row = [
                math.comb(k, j) * (-center) ** (k - j) for j in range(k + 1)
            ]
            for j, b in enumerate(binom_row):
                coeffs[j] += term * b
        return cls(coeffs)

    def derivative(self, u, order: int = 0):
        coeffs = self.coefficients
        for _ in range(order):
            coeffs = tuple((k + 1) * c for k, c in enumerate(coeffs[1:]))
        value = 0
        for c in reversed(coeffs):
            value = value * u + c
        return value

    def __call__(self, u):
        return self.derivative(u, 0)

    @property
    def degree(self) -> int:
        return len(self.coefficients) - 1


# ---------------------------------------------------------------------------
# Built-in models
# ---------------------------------------------------------------------------
#
# All built-ins take observations as flat tuples and do scalar arithmetic, so
# they evaluate exactly on Fraction inputs.


def _resid_linear_iv(obs, theta, eta, n_controls):
    y, dvar = obs[0], obs[1]
    x = obs[3 : 3 + n_controls]
    return y - dvar * theta[0] - sum(x[j] * eta[j] for j in range(n_controls))


def builtin_linear_iv(n_controls: int = 1) -> ModelSpec:
    """Linear instrumental variables; linear regression when z == d.

    Observation layout: ``(y, d, z, x_1, ..., x_K)``.
    g = X (y - d theta - X' eta),  m = z (y - d theta - X' eta).
    """
    K = n_controls

    def g_deriv(obs, theta, eta, order):
        x = obs[3 : 3 + K]
        if order == 0:
            r = _resid_linear_iv(obs, theta, eta, K)
            return [x[k] * r for k in range(K)]
        if order == 1:
            return [[-(x[k] * x[j]) for j in range(K)] for k in range(K)]
        return zeros_tensor((K,) + (K,) * order)

    def m_deriv(obs, theta, eta, order):
        z = obs[2]
        x = obs[3 : 3 + K]
        if order == 0:
            return z * _resid_linear_iv(obs, theta, eta, K)
        if order == 1:
            return [-(z * x[j]) for j in range(K)]
        return zeros_tensor((K,) * order)

    return ModelSpec(
        name="linear-iv",
        d_eta=K,
        d_g=K,
        d_lambda=K * K,
        d_theta=1,
        obs_dim=3 + K,
        g_deriv=g_deriv,
        m_deriv=m_deriv,
        lambda_map=_full_matrix_lambda(K, K),
        max_order=99,
        g_affine=True,
        obs_names=("y", "d", "z") + tuple(f"x{j+1}" for j in range(K)),
    )


def builtin_generated_regressor(f, d_eta: int = 1, f_max_order: int | None = None) -> ModelSpec:
    """Mean of a nonlinear function of a generated regressor.

    Observation layout: ``(r, x_1, ..., x_d)``.
    g = X (r - X' eta),  m = f(X' eta) - theta.
    """
    d = d_eta
    if f_max_order is None:
        f_max_order = f.degree if isinstance(f, Polynomial) else FD_MAX_ORDER

    def g_deriv(obs, theta, eta, order):
        x = obs[1 : 1 + d]
        if order == 0:
            r = obs[0] - sum(x[j] * eta[j] for j in range(d))
            return [x[k] * r for k in range(d)]
        if order == 1:
            return [[-(x[k] * x[j]) for j in range(d)] for k in range(d)]
        return zeros_tensor((d,) + (d,) * order)

    def m_deriv(obs, theta, eta, order):
        x = obs[1 : 1 + d]
        u = sum(x[j] * eta[j] for j in range(d))
        if order == 0:
            return f.derivative(u, 0) - theta[0]
        fr = f.derivative(u, order)
        out = zeros_tensor((d,) * order)
        for slots in itertools.product(range(d), repeat=order):
            ref = out
            for j in slots[:-1]:
                ref = ref[j]
            prod = fr
            for j in slots:
                prod = prod * x[j]
            ref[slots[-1]] = prod
        return out

    return ModelSpec(
        name="generated-regressor",
        d_eta=d,
        d_g=d,
        d_lambda=d * d,
        d_theta=1,
        obs_dim=1 + d,
        g_deriv=g_deriv,
        m_deriv=m_deriv,
        lambda_map=_full_matrix_lambda(d, d),
        max_order=f_max_order,
        g_affine=True,
        target_is_shift=True,
        obs_names=("r",) + tuple(f"x{j+1}" for j in range(d)),
    )


def builtin_heterocoef(
    d_eta: int,
    target: str = "mean",
    component: int = 0,
    d_matrix=None,
) -> ModelSpec:
    """Grouped-data model with heterogeneous coefficients, single-unit view.

    Observation layout: ``(y, x_1, ..., x_d)``.
    g = X (y - X' eta); m is eta_j - theta (``target='mean'``) or
    eta' D eta - theta (``target='second_moment'``, D defaulting to the
    single-entry matrix selecting component j).
    """
    if d_eta < 1:
        raise ValueError("d_eta must be at least 1")
    d = d_eta
    if target not in ("mean", "second_moment"):
        raise ValueError(f"unknown target {target!r}")
    if d_matrix is None and target == "second_moment":
        d_matrix = [
            [1 if (a == component and b == component) else 0 for b in range(d)]
            for a in range(d)
        ]

    def g_deriv(obs, theta, eta, order):
        x = obs[1 : 1 + d]
        if order == 0:
            r = obs[0] - sum(x[j] * eta[j] for j in range(d))
            return [x[k] * r for k in range(d)]
        if order == 1:
            return [[-(x[k] * x[j]) for j in range(d)] for k in range(d)]
        return zeros_tensor((d,) + (d,) * order)

    if target == "mean":

        def m_deriv(obs, theta, eta, order):
            if order == 0:
                return eta[component] - theta[0]
            if order == 1:
                return [1 if j == component else 0 for j in range(d)]
            return zeros_tensor((d,) * order)

    else:

        def m_deriv(obs, theta, eta, order):
            if order == 0:
                quad = sum(
                    eta[a] * d_matrix[a][b] * eta[b]
                    for a in range(d)
                    for b in range(d)
                )
                return quad - theta[0]
            if order == 1:
                return [
                    sum((d_matrix[a][b] + d_matrix[b][a]) * eta[b] for b in range(d))
                    for a in range(d)
                ]
            if order == 2:
                return [
                    [d_matrix[a][b] + d_matrix[b][a] for b in range(d)]
                    for a in range(d)
                ]
            return zeros_tensor((d,) * order)

    return ModelSpec(
        name="heterocoef",
        d_eta=d,
        d_g=d,
        d_lambda=d * d,
        d_theta=1,
        obs_dim=1 + d,
        g_deriv=g_deriv,
        m_deriv=m_deriv,
        lambda_map=_full_matrix_lambda(d, d),
        max_order=99,
        g_affine=True,
        m_uses_observation=False,
        target_is_shift=True,
        obs_names=("y",) + tuple(f"x{j+1}" for j in range(d)),
    )


def builtin_neyman_scott(m=None) -> ModelSpec:
    """Normal-means model without normality: g = y - eta, Lambda = -1 known.

    Observation layout: ``(y,)``.  ``m`` is a smooth scalar target (default:
    the second moment eta**2); the moment function is m(eta) - theta.
    """
    if m is None:
        m = Polynomial((0, 0, 1))

    def g_deriv(obs, theta, eta, order):
        if order == 0:
            return [obs[0] - eta[0]]
        if order == 1:
            return [[-1]]
        return zeros_tensor((1,) + (1,) * order)

    def m_deriv(obs, theta, eta, order):
        if order == 0:
            return m.derivative(eta[0], 0) - theta[0]
        out = m.derivative(eta[0], order)
        for _ in range(order):
            out = [out]
        return out

    max_order = m.degree if isinstance(m, Polynomial) else FD_MAX_ORDER
    return ModelSpec(
        name="neyman-scott",
        d_eta=1,
        d_g=1,
        d_lambda=1,
        d_theta=1,
        obs_dim=1,
        g_deriv=g_deriv,
        m_deriv=m_deriv,
        lambda_map=lambda lam: [[lam[0]]],
        max_order=max_order,
        g_affine=True,
        m_uses_observation=False,
        target_is_shift=True,
        lambda_known=(-1,),
        obs_names=("y",),
    )


def _full_matrix_lambda(d_eta: int, d_g: int) -> Callable:
    """Lambda(lam) = reshape(lam, (d_eta, d_g)); lam = vec(Lambda) row-major."""

    def lambda_map(lam):
        if len(lam) != d_eta * d_g:
            raise ValueError(
                f"lambda has length {len(lam)}, expected {d_eta * d_g}"
            )
        return [
            [lam[i * d_g + j] for j in range(d_g)] for i in range(d_eta)
        ]

    return lambda_map


_MODEL_BUILDERS = {
    "linear-iv": builtin_linear_iv,
    "generated-regressor": builtin_generated_regressor,
    "heterocoef": builtin_heterocoef,
    "neyman-scott": builtin_neyman_scott,
}


def get_model(name: str, **kwargs) -> ModelSpec:
    """Build a built-in model by CLI name."""
    try:
        builder = _MODEL_BUILDERS[name]
    except KeyError:
        raise ValueError(
            f"unknown model {name!r}; choose from {sorted(_MODEL_BUILDERS)}"
        ) from None
    if name == "generated-regressor" and "f" not in kwargs:
        kwargs["f"] = Polynomial((0, 0, 1))
    if name == "heterocoef" and "d_eta" not in kwargs:
        kwargs["d_eta"] = 1
    return builder(**kwargs)
