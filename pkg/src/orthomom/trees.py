"""Rooted-tree combinatorics underlying the orthogonal moment construction.

A rooted tree indexes one multilinear term of the order-q orthogonal moment
function.  The invariants that matter are

* ``size``: the number of non-root nodes,
* ``d``: the number of non-root nodes with at most one child,
* ``aut``: the order of the group of root-fixing isomorphisms.

The term weight is the exact rational

    (-1)**size / aut * binom(q + size - d, size),

and the index set for order q is every rooted tree with ``d <= q``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Iterable

__all__ = [
    "RootedTree",
    "TreeInvariants",
    "EnumerationCapError",
    "DEFAULT_ENUMERATION_CAP",
    "enumerate_trees",
    "affine_trees",
    "invariants",
    "coefficient",
    "is_affine_tree",
    "tree_from_encoding",
]

# Default bound on the order accepted by :func:`enumerate_trees`.  The set for
# q = 10 already has 110,135 elements; the cap keeps memory bounded.
DEFAULT_ENUMERATION_CAP = 10


class EnumerationCapError(ValueError):
    """Requested order exceeds the configured enumeration cap."""


class RootedTree:
    """Immutable rooted tree in canonical (AHU) form.

    Children are stored sorted by their canonical encoding, so two trees are
    isomorphic as rooted trees exactly when their ``encoding`` strings are
    equal.  Instances are hashable and totally ordered by encoding.
    """

    __slots__ = ("children", "encoding", "num_nodes", "_weight", "_aut")

    def __init__(self, children: Iterable["RootedTree"] = ()):
        kids = tuple(sorted(children, key=lambda t: t.encoding))
        object.__setattr__(self, "children", kids)
        object.__setattr__(
            self, "encoding", "(" + "".join(t.encoding for t in kids) + ")"
        )
        object.__setattr__(self, "num_nodes", 1 + sum(t.num_nodes for t in kids))
        # _weight counts *all* nodes of this subtree with at most one child,
        # including its own root.  When the subtree hangs below some parent,
        # every one of its nodes is a non-root node of the host tree, so d of
        # the host is the sum of the children's weights.
        own = 1 if len(kids) <= 1 else 0
        object.__setattr__(self, "_weight", own + sum(t._weight for t in kids))
        # Automorphism order via the product recursion over isomorphism
        # classes of root subtrees: prod_i n_i! * aut(tau_i)**n_i.
        aut = 1
        for _, group in itertools.groupby(kids, key=lambda t: t.encoding):
            block = list(group)
            aut *= math.factorial(len(block)) * block[0]._aut ** len(block)
        object.__setattr__(self, "_aut", aut)

    def __setattr__(self, name, value):  # pragma: no cover - defensive
        raise AttributeError("RootedTree is immutable")

    # -- identity ---------------------------------------------------------
    def __eq__(self, other):
        return isinstance(other, RootedTree) and self.encoding == other.encoding

    def __hash__(self):
        return hash(self.encoding)

    def __lt__(self, other: "RootedTree"):
        return self.encoding < other.encoding

    def __repr__(self):
        return f"RootedTree({self.encoding!r})"

    # -- invariants -------------------------------------------------------
    @property
    def size(self) -> int:
        """Number of non-root nodes (equivalently, number of edges)."""
        return self.num_nodes - 1

    @property
    def d(self) -> int:
        """Number of non-root nodes with at most one child."""
        return sum(t._weight for t in self.children)

    @property
    def aut(self) -> int:
        """Order of the root-fixing automorphism group."""
        return self._aut

    @property
    def is_affine(self) -> bool:
        """True when every non-root node has at most one child."""
        return self.size == self.d


@dataclass(frozen=True)
class TreeInvariants:
    size: int
    d: int
    aut: int


def invariants(tree: RootedTree) -> TreeInvariants:
    """Return (size, d, aut) for ``tree``."""
    return TreeInvariants(size=tree.size, d=tree.d, aut=tree.aut)


def is_affine_tree(tree: RootedTree) -> bool:
    return tree.is_affine


def tree_from_encoding(encoding: str) -> RootedTree:
    """Parse a canonical parenthesis encoding back into a tree."""
    pos = 0

    def parse() -> RootedTree:
        nonlocal pos
        if pos >= len(encoding) or encoding[pos] != "(":
            raise ValueError(f"malformed encoding at position {pos}: {encoding!r}")
        pos += 1
        kids = []
        while pos < len(encoding) and encoding[pos] == "(":
            kids.append(parse())
        if pos >= len(encoding) or encoding[pos] != ")":
            raise ValueError(f"malformed encoding at position {pos}: {encoding!r}")
        pos += 1
        return RootedTree(kids)

    tree = parse()
    if pos != len(encoding):
        raise ValueError(f"trailing characters in encoding: {encoding!r}")
    return tree


# ---------------------------------------------------------------------------
# Enumeration
# ---------------------------------------------------------------------------
#
# Trees are grown from canonical subtree pools keyed by weight (the subtree's
# contribution to d once attached below a root), choosing children as
# non-decreasing multisets.  Every canonical tree is produced exactly once, so
# no isomorphism filtering is needed.


@lru_cache(maxsize=None)
def _subtree_pool(max_weight: int) -> tuple[tuple[RootedTree, ...], ...]:
    """``pool[w]`` lists canonical trees whose weight is exactly ``w``.

    The weight of a standalone tree counts all of its nodes with at most one
    child, including its own root.
    """
    pool: list[tuple[RootedTree, ...]] = [(), (RootedTree(),)]
    for w in range(2, max_weight + 1):
        level: list[RootedTree] = [RootedTree((t,)) for t in pool[w - 1]]
        for combo in _weighted_multisets(pool, w, min_parts=2):
            level.append(RootedTree(combo))
        level.sort(key=lambda t: (t.size, t.encoding))
        pool.append(tuple(level))
    return tuple(pool)


def _weighted_multisets(
    pool, total: int, min_parts: int
) -> Iterator[tuple[RootedTree, ...]]:
    """Yield non-decreasing tuples of pool trees whose weights sum to ``total``."""

    def rec(remaining: int, min_w: int, min_idx: int, acc: list[RootedTree]):
        if remaining == 0:
            if len(acc) >= min_parts:
                yield tuple(acc)
            return
        for w in range(min_w, remaining + 1):
            start = min_idx if w == min_w else 0
            level = pool[w] if w < len(pool) else ()
            for idx in range(start, len(level)):
                acc.append(level[idx])
                yield from rec(remaining - w, w, idx, acc)
                acc.pop()

    yield from rec(total, 1, 0, [])


@lru_cache(maxsize=None)
def _enumerate_cached(q: int) -> tuple[RootedTree, ...]:
    pool = _subtree_pool(max(q, 1))
    trees: list[RootedTree] = [RootedTree()]
    for total in range(1, q + 1):
        for combo in _weighted_multisets(pool, total, min_parts=1):
            trees.append(RootedTree(combo))
    trees.sort(key=lambda t: (t.size, t.encoding))
    return tuple(trees)


def enumerate_trees(q: int, cap: int = DEFAULT_ENUMERATION_CAP) -> list[RootedTree]:
    """All rooted trees with ``d(tau) <= q``, sorted by (size, encoding).

    Raises :class:`EnumerationCapError` when ``q`` exceeds ``cap``.
    """
    if q < 0:
        raise ValueError(f"q must be nonnegative, got {q}")
    if q > cap:
        raise EnumerationCapError(
            f"q={q} exceeds the enumeration cap {cap}; raise `cap` explicitly "
            "if the memory cost is acceptable"
        )
    return list(_enumerate_cached(q))


def affine_trees(q: int, cap: int = DEFAULT_ENUMERATION_CAP) -> list[RootedTree]:
    """The subset of :func:`enumerate_trees` with ``size == d`` (no branches)."""
    return [t for t in enumerate_trees(q, cap=cap) if t.is_affine]


def coefficient(q: int, tree: RootedTree) -> Fraction:
    """Exact rational weight of ``tree`` in the order-``q`` moment function."""
    if q < 0:
        raise ValueError(f"q must be nonnegative, got {q}")
    if tree.d > q:
        raise ValueError(
            f"tree with d={tree.d} is not in the order-{q} index set"
        )
    num = (-1) ** tree.size * math.comb(q + tree.size - tree.d, tree.size)
    return Fraction(num, tree.aut)
