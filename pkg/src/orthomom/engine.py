"""Assembly and evaluation of orthogonal moment functions.

A moment function of order q is a weighted sum of tree kernels.  Each kernel
is evaluated bottom-up: leaves carry Lambda g, internal nodes with p children
carry Lambda (p-th g-derivative) contracted against the children, and the
root with r children carries the r-th m-derivative (m itself for r = 0).
Every node is evaluated on its own independent block of data copies.

All contractions are done with plain Python arithmetic over nested lists, so
evaluation is exact when observations, parameters, and model coefficients are
rationals.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from .models import ModelSpec, zeros_tensor
from .trees import RootedTree, affine_trees, coefficient, enumerate_trees

__all__ = [
    "MomentFunction",
    "Term",
    "NonAffineModelWarning",
    "evaluate_kernel",
    "assemble_psi",
    "assemble_psi_affine",
    "explicit_psi",
    "canonical_assignment",
    "det_transform_exact",
    "det_transform_overid",
    "contract",
    "mat_vec",
]


class NonAffineModelWarning(UserWarning):
    """Affine assembly requested for a model whose g is not affine."""


# ---------------------------------------------------------------------------
# Generic small-tensor algebra (nested lists, any scalar type)
# ---------------------------------------------------------------------------


def contract(tensor, vectors: Sequence[Sequence]):
    """Contract the leading input slots of a nested tensor with vectors.

    ``tensor`` has depth ``len(vectors)`` (plus any trailing structure, which
    is preserved); slot order is irrelevant for the symmetric tensors used
    here.
    """
    if not vectors:
        return tensor
    head, rest = vectors[0], vectors[1:]
    total = None
    for j, vj in enumerate(head):
        piece = contract(tensor[j], rest)
        term = _scale(piece, vj)
        total = term if total is None else _add(total, term)
    return total


def _scale(value, scalar):
    if isinstance(value, (list, tuple)):
        return [_scale(v, scalar) for v in value]
    return value * scalar


def _add(a, b):
    if isinstance(a, (list, tuple)):
        return [_add(x, y) for x, y in zip(a, b)]
    return a + b


def mat_vec(matrix, vector):
    return [sum(row[j] * vector[j] for j in range(len(vector))) for row in matrix]


# ---------------------------------------------------------------------------
# Kernel evaluation
# ---------------------------------------------------------------------------


def canonical_assignment(tree: RootedTree, block_size: int = 1) -> tuple[int, ...]:
    """Starting copy index for each node of ``tree`` in preorder.

    The root always gets copy 0 and consumes one observation (it carries m);
    each subsequent non-root node in canonical preorder consumes a block of
    ``block_size`` consecutive copies.
    """
    starts = [0]
    cursor = 1

    def walk(node: RootedTree):
        nonlocal cursor
        for child in node.children:
            starts.append(cursor)
            cursor += block_size
            walk(child)

    walk(tree)
    return tuple(starts)


def copies_required(tree: RootedTree, block_size: int = 1) -> int:
    return 1 + tree.size * block_size


def evaluate_kernel(
    tree: RootedTree,
    copies: Sequence,
    assignment: Sequence[int],
    theta,
    eta,
    lam,
    model: ModelSpec,
    lam_matrix=None,
):
    """Evaluate one tree kernel on explicit data copies.

    ``assignment`` lists, in preorder (root first), the index of the first
    base observation consumed by each node; non-root nodes consume
    ``model.g_block_size`` consecutive observations.
    """
    if lam_matrix is None:
        lam_matrix = model.lambda_map(lam)
    block = model.g_block_size
    need = 1 + tree.size * block
    if len(copies) < need:
        raise ValueError(f"kernel needs {need} copies, got {len(copies)}")
    it = iter(assignment)

    def node_obs(start: int, is_root: bool):
        if is_root or block == 1:
            return copies[start]
        return tuple(copies[start : start + block])

    def eval_nonroot(node: RootedTree):
        start = next(it)
        child_values = [eval_nonroot(c) for c in node.children]
        p = len(node.children)
        tensor = model.g_derivative(node_obs(start, is_root=False), theta, eta, p)
        if p:
            vec = [contract(tensor[k], child_values) for k in range(model.d_g)]
        else:
            vec = tensor
        return mat_vec(lam_matrix, vec)

    root_start = next(it)
    child_values = [eval_nonroot(c) for c in tree.children]
    r = len(tree.children)
    m_tensor = model.m_derivative(node_obs(root_start, is_root=True), theta, eta, r)
    if r:
        return contract(m_tensor, child_values)
    return m_tensor


# ---------------------------------------------------------------------------
# Moment-function assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Term:
    coefficient: Fraction
    tree: RootedTree
    assignment: tuple[int, ...]


@dataclass(frozen=True)
class MomentFunction:
    """An assembled order-q orthogonal moment function."""

    q: int
    model: ModelSpec
    terms: tuple[Term, ...]
    copies_required: int

    def evaluate(self, copies: Sequence, theta, eta, lam):
        lam_matrix = self.model.lambda_map(lam)
        total = 0
        for term in self.terms:
            kernel = evaluate_kernel(
                term.tree,
                copies,
                term.assignment,
                theta,
                eta,
                lam,
                self.model,
                lam_matrix=lam_matrix,
            )
            total = total + term.coefficient * kernel
        return total

    def __call__(self, copies, theta, eta, lam):
        return self.evaluate(copies, theta, eta, lam)


def _assemble(q: int, model: ModelSpec, trees, cap: int) -> MomentFunction:
    block = model.g_block_size
    terms = tuple(
        Term(
            coefficient=coefficient(q, tree),
            tree=tree,
            assignment=canonical_assignment(tree, block),
        )
        for tree in trees
    )
    L = max((copies_required(t.tree, block) for t in terms), default=1)
    return MomentFunction(q=q, model=model, terms=terms, copies_required=L)


def assemble_psi(q: int, model: ModelSpec, cap: int = 10) -> MomentFunction:
    """The full order-q moment function (all trees with d <= q)."""
    if q < 0:
        raise ValueError(f"q must be nonnegative, got {q}")
    return _assemble(q, model, enumerate_trees(q, cap=cap), cap)


def assemble_psi_affine(q: int, model: ModelSpec, cap: int = 10) -> MomentFunction:
    """The affine-path moment function (trees with size == d only).

    Correct on its own only when g is affine in eta; a warning (not an
    error) is raised otherwise, since callers may want the affine part for
    diagnostics.
    """
    if q < 0:
        raise ValueError(f"q must be nonnegative, got {q}")
    if not model.g_affine:
        warnings.warn(
            f"model {model.name!r} does not declare affine g; the affine-path "
            "moment function omits its correction terms",
            NonAffineModelWarning,
            stacklevel=2,
        )
    return _assemble(q, model, affine_trees(q, cap=cap), cap)


# ---------------------------------------------------------------------------
# Hand-coded closed forms for q in {1, 2, 3}
# ---------------------------------------------------------------------------
#
# Used as oracles against the assembled functions.  Copy labels follow the
# canonical preorder assignment (root = copy 0, then preorder), which fixes
# the same labeling the assembler uses; iid copies make any other labeling
# distributionally equivalent.


@dataclass(frozen=True)
class ExplicitMomentFunction:
    q: int
    model: ModelSpec
    copies_required: int

    def evaluate(self, copies, theta, eta, lam):
        mdl = self.model
        if mdl.g_block_size != 1:
            raise ValueError("explicit formulas cover single-copy g only")
        Lam = mdl.lambda_map(lam)

        def g(i, order=0):
            return mdl.g_derivative(copies[i], theta, eta, order)

        def m(order=0):
            return mdl.m_derivative(copies[0], theta, eta, order)

        def Lg(i):
            return mat_vec(Lam, g(i))

        def LJ(i, vec):
            # Lambda @ (dg(W_i) @ vec)
            J = g(i, 1)
            return mat_vec(Lam, [contract(J[k], [vec]) for k in range(mdl.d_g)])

        def LG(i, p, vecs):
            # Lambda @ (p-th g-derivative contracted with vecs)
            t = g(i, p)
            return mat_vec(Lam, [contract(t[k], vecs) for k in range(mdl.d_g)])

        def dot(vec_tensor, vecs):
            return contract(vec_tensor, vecs)

        if self.q == 1:
            return m() - dot(m(1), [Lg(1)])

        if self.q == 2:
            val = m()
            val = val - 2 * dot(m(1), [Lg(1)])
            val = val + dot(m(1), [LJ(1, Lg(2))])
            val = val + Fraction(1, 2) * dot(m(2), [Lg(1), Lg(2)])
            val = val - Fraction(1, 2) * dot(m(1), [LG(1, 2, [Lg(2), Lg(3)])])
            return val

        if self.q == 3:
            # Copy labels follow the canonical preorder, in which children
            # sort by encoding (deeper subtrees come first).
            val = m()
            # affine part
            val = val - 3 * dot(m(1), [Lg(1)])
            val = val + 3 * dot(m(1), [LJ(1, Lg(2))])
            val = val - dot(m(1), [LJ(1, LJ(2, Lg(3)))])
            val = val + Fraction(3, 2) * dot(m(2), [Lg(1), Lg(2)])
            val = val - dot(m(2), [LJ(1, Lg(2)), Lg(3)])
            val = val - Fraction(1, 6) * dot(m(3), [Lg(1), Lg(2), Lg(3)])
            # corrections
            val = val - 2 * dot(m(1), [LG(1, 2, [Lg(2), Lg(3)])])
            val = val + Fraction(1, 2) * dot(
                m(1), [LJ(1, LG(2, 2, [Lg(3), Lg(4)]))]
            )
            val = val + dot(m(1), [LG(1, 2, [LJ(2, Lg(3)), Lg(4)])])
            val = val + Fraction(1, 6) * dot(m(1), [LG(1, 3, [Lg(2), Lg(3), Lg(4)])])
            val = val + Fraction(1, 2) * dot(
                m(2), [LG(1, 2, [Lg(2), Lg(3)]), Lg(4)]
            )
            val = val - Fraction(1, 2) * dot(
                m(1), [LG(1, 2, [LG(2, 2, [Lg(3), Lg(4)]), Lg(5)])]
            )
            return val

        raise ValueError(f"explicit formula not available for q={self.q}")

    def __call__(self, copies, theta, eta, lam):
        return self.evaluate(copies, theta, eta, lam)


def explicit_psi(q: int, model: ModelSpec) -> ExplicitMomentFunction:
    """Hand-coded order-q moment function for q in {1, 2, 3}."""
    if q not in (1, 2, 3):
        raise ValueError(f"explicit formula not available for q={q}")
    L = {1: 2, 2: 4, 3: 6}[q]
    return ExplicitMomentFunction(q=q, model=model, copies_required=L)


# ---------------------------------------------------------------------------
# Determinant-based nuisance reduction
# ---------------------------------------------------------------------------


def _det(matrix):
    n = len(matrix)
    if n == 1:
        return matrix[0][0]
    if n == 2:
        return matrix[0][0] * matrix[1][1] - matrix[0][1] * matrix[1][0]
    total = 0
    for j in range(n):
        minor = [row[:j] + row[j + 1 :] for row in matrix[1:]]
        term = matrix[0][j] * _det(minor)
        total = total + (term if j % 2 == 0 else -term)
    return total


def _slot_assignments(n_targets: int, order: int):
    """All maps from `order` labeled slots to `n_targets` positions."""
    if order == 0:
        yield ()
        return
    for rest in _slot_assignments(n_targets, order - 1):
        for t in range(n_targets):
            yield rest + (t,)


def det_transform_exact(model: ModelSpec) -> ModelSpec:
    """Determinant construction for the exactly identified case (d_g == d_eta).

    The transformed moment function consumes a block of d_eta copies; its
    r-th component is the determinant of the matrix holding g on its own copy
    in column r and the eta_j-partial of g on copy j in every other column j.
    Lambda becomes the scalar family lam * I with true value 1/det(J0).
    """
    if model.d_g != model.d_eta:
        raise ValueError(
            f"exact determinant construction needs d_g == d_eta, got "
            f"d_g={model.d_g}, d_eta={model.d_eta}"
        )
    if model.g_block_size != 1:
        raise ValueError("determinant transform of a block model is not supported")
    d = model.d_eta

    def g_deriv(block, theta, eta, order):
        # block: tuple of d base observations; one per column.
        derivs = {}

        def base_col(c: int, r: int, slots: tuple[int, ...]):
            key = (c, r, slots)
            if key in derivs:
                return derivs[key]
            if c == r:
                t = model.g_derivative(block[c], theta, eta, len(slots))
                col = [_index(t[k], slots) for k in range(d)]
            else:
                t = model.g_derivative(block[c], theta, eta, 1 + len(slots))
                col = [_index(t[k], (c,) + slots) for k in range(d)]
            derivs[key] = col
            return col

        out = zeros_tensor((d,) + (d,) * order)
        for r in range(d):
            for slots in _iter_slots(d, order):
                entry = 0
                for assign in _slot_assignments(d, order):
                    col_slots = [
                        tuple(slots[i] for i in range(order) if assign[i] == c)
                        for c in range(d)
                    ]
                    cols = [base_col(c, r, col_slots[c]) for c in range(d)]
                    matrix = [[cols[c][k] for c in range(d)] for k in range(d)]
                    entry = entry + _det(matrix)
                if order == 0:
                    out[r] = entry
                else:
                    ref = out[r]
                    for j in slots[:-1]:
                        ref = ref[j]
                    ref[slots[-1]] = entry
        return out

    return ModelSpec(
        name=f"{model.name}-det",
        d_eta=d,
        d_g=d,
        d_lambda=1,
        d_theta=model.d_theta,
        obs_dim=model.obs_dim,
        g_deriv=g_deriv,
        m_deriv=model.m_deriv,
        lambda_map=lambda lam: [
            [lam[0] if i == j else 0 for j in range(d)] for i in range(d)
        ],
        max_order=model.max_order - 1 if model.max_order < 99 else 99,
        g_affine=model.g_affine,
        m_uses_observation=model.m_uses_observation,
        target_is_shift=model.target_is_shift,
        g_block_size=d,
        obs_names=model.obs_names,
    )


def det_transform_overid(model: ModelSpec) -> ModelSpec:
    """Determinant construction for the overidentified case (d_g > d_eta).

    Columns are first projected to d_eta dimensions with the transposed
    Jacobian on an independent copy; each evaluation consumes 2 d_eta copies.
    Lambda becomes lam * I with true value 1/det(J0' J0).
    """
    if model.d_g <= model.d_eta:
        raise ValueError(
            f"overidentified determinant construction needs d_g > d_eta, got "
            f"d_g={model.d_g}, d_eta={model.d_eta}"
        )
    if model.g_block_size != 1:
        raise ValueError("determinant transform of a block model is not supported")
    d = model.d_eta
    dg = model.d_g

    def g_deriv(block, theta, eta, order):
        # block: 2 d base observations; column j uses copies (2j, 2j+1).
        def col_entry(c: int, r: int, a_slots, u_slots):
            # A factor: (dg(W_{2c}))' with extra derivative slots a_slots
            ta = model.g_derivative(block[2 * c], theta, eta, 1 + len(a_slots))
            if c == r:
                tu = model.g_derivative(block[2 * c + 1], theta, eta, len(u_slots))
                u = [_index(tu[k], u_slots) for k in range(dg)]
            else:
                tu = model.g_derivative(block[2 * c + 1], theta, eta, 1 + len(u_slots))
                u = [_index(tu[k], (c,) + u_slots) for k in range(dg)]
            return [
                sum(_index(ta[k], (e,) + a_slots) * u[k] for k in range(dg))
                for e in range(d)
            ]

        out = zeros_tensor((d,) + (d,) * order)
        for r in range(d):
            for slots in _iter_slots(d, order):
                entry = 0
                for assign in _slot_assignments(2 * d, order):
                    a_slots = [
                        tuple(slots[i] for i in range(order) if assign[i] == 2 * c)
                        for c in range(d)
                    ]
                    u_slots = [
                        tuple(
                            slots[i] for i in range(order) if assign[i] == 2 * c + 1
                        )
                        for c in range(d)
                    ]
                    cols = [col_entry(c, r, a_slots[c], u_slots[c]) for c in range(d)]
                    matrix = [[cols[c][k] for c in range(d)] for k in range(d)]
                    entry = entry + _det(matrix)
                if order == 0:
                    out[r] = entry
                else:
                    ref = out[r]
                    for j in slots[:-1]:
                        ref = ref[j]
                    ref[slots[-1]] = entry
        return out

    return ModelSpec(
        name=f"{model.name}-det-overid",
        d_eta=d,
        d_g=d,
        d_lambda=1,
        d_theta=model.d_theta,
        obs_dim=model.obs_dim,
        g_deriv=g_deriv,
        m_deriv=model.m_deriv,
        lambda_map=lambda lam: [
            [lam[0] if i == j else 0 for j in range(d)] for i in range(d)
        ],
        max_order=model.max_order - 1 if model.max_order < 99 else 99,
        # column products are bilinear in eta-dependent factors, so the
        # transform stays affine only in the scalar affine case
        g_affine=model.g_affine and d == 1,
        m_uses_observation=model.m_uses_observation,
        target_is_shift=model.target_is_shift,
        g_block_size=2 * d,
        obs_names=model.obs_names,
    )


def _index(nested, slots: tuple[int, ...]):
    for j in slots:
        nested = nested[j]
    return nested


def _iter_slots(d: int, order: int):
    if order == 0:
        yield ()
        return
    yield from itertools.product(range(d), repeat=order)
