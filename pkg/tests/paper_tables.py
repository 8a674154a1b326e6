"""Shared hand-transcribed oracle tables for tree invariants and weights.

Trees are written out structurally; the expected tuples are
(size, d, aut, coefficient at q=4) for the order-4 tables and
(size, d, aut) for the d <= 3 figure.
"""

from fractions import Fraction

from orthomom.trees import RootedTree


def tree(*children) -> RootedTree:
    return RootedTree(children)


LEAF = tree()
chain2 = tree(LEAF)
chain3 = tree(chain2)
chain4 = tree(chain3)
star2 = tree(LEAF, LEAF)
star3 = tree(LEAF, LEAF, LEAF)
star4 = tree(LEAF, LEAF, LEAF, LEAF)
b2 = star2  # two-leaf branch used as a subtree

# (size, d, aut) for the 13 trees with d <= 3
FIGURE_D3_ROWS = [
    (LEAF, 0, 0, 1),
    (chain2, 1, 1, 1),
    (chain3, 2, 2, 1),
    (star2, 2, 2, 2),
    (tree(star2), 3, 2, 2),
    (chain4, 3, 3, 1),
    (tree(chain2, LEAF), 3, 3, 1),
    (star3, 3, 3, 6),
    (tree(tree(star2)), 4, 3, 2),
    (tree(tree(chain2, LEAF)), 4, 3, 1),
    (tree(star3), 4, 3, 6),
    (tree(star2, LEAF), 4, 3, 2),
    (tree(tree(star2, LEAF)), 5, 3, 2),
]

# branch-free trees at order 4: tree -> (size, d, aut, coefficient)
Q4_AFFINE_TABLE = {
    tree(): (0, 0, 1, Fraction(1)),
    chain2: (1, 1, 1, Fraction(-4)),
    chain3: (2, 2, 1, Fraction(6)),
    chain4: (3, 3, 1, Fraction(-4)),
    tree(chain4): (4, 4, 1, Fraction(1)),
    star2: (2, 2, 2, Fraction(3)),
    tree(chain2, LEAF): (3, 3, 1, Fraction(-4)),
    tree(chain3, LEAF): (4, 4, 1, Fraction(1)),
    tree(chain2, chain2): (4, 4, 2, Fraction(1, 2)),
    star3: (3, 3, 6, Fraction(-2, 3)),
    tree(chain2, LEAF, LEAF): (4, 4, 2, Fraction(1, 2)),
    star4: (4, 4, 24, Fraction(1, 24)),
}

# trees with at least one branch at order 4
Q4_CORRECTION_TABLE = {
    tree(b2): (3, 2, 2, Fraction(-5)),
    tree(star3): (4, 3, 6, Fraction(5, 6)),
    tree(b2, LEAF): (4, 3, 2, Fraction(5, 2)),
    tree(tree(b2, LEAF)): (5, 3, 2, Fraction(-3)),
    tree(tree(b2)): (4, 3, 2, Fraction(5, 2)),
    tree(tree(chain2, LEAF)): (4, 3, 1, Fraction(5)),
    tree(star4): (5, 4, 24, Fraction(-1, 24)),
    tree(star3, LEAF): (5, 4, 6, Fraction(-1, 6)),
    tree(b2, LEAF, LEAF): (5, 4, 4, Fraction(-1, 4)),
    tree(tree(star3, LEAF)): (6, 4, 6, Fraction(1, 6)),
    tree(tree(b2, LEAF, LEAF)): (6, 4, 4, Fraction(1, 4)),
    tree(tree(b2, LEAF), LEAF): (6, 4, 2, Fraction(1, 2)),
    tree(b2, b2): (6, 4, 8, Fraction(1, 8)),
    tree(tree(tree(b2, LEAF), LEAF)): (7, 4, 2, Fraction(-1, 2)),
    tree(tree(b2, b2)): (7, 4, 8, Fraction(-1, 8)),
    tree(tree(star3)): (5, 4, 6, Fraction(-1, 6)),
    tree(tree(chain2, LEAF, LEAF)): (5, 4, 2, Fraction(-1, 2)),
    tree(chain2, b2): (5, 4, 2, Fraction(-1, 2)),
    tree(tree(b2), LEAF): (5, 4, 2, Fraction(-1, 2)),
    tree(tree(chain2, LEAF), LEAF): (5, 4, 1, Fraction(-1)),
    tree(tree(tree(b2, LEAF))): (6, 4, 2, Fraction(1, 2)),
    tree(tree(b2, chain2)): (6, 4, 2, Fraction(1, 2)),
    tree(tree(tree(b2), LEAF)): (6, 4, 2, Fraction(1, 2)),
    tree(tree(tree(chain2, LEAF), LEAF)): (6, 4, 1, Fraction(1)),
    tree(tree(tree(b2))): (5, 4, 2, Fraction(-1, 2)),
    tree(tree(chain3, LEAF)): (5, 4, 1, Fraction(-1)),
    tree(tree(tree(chain2, LEAF))): (5, 4, 1, Fraction(-1)),
    tree(tree(chain2, chain2)): (5, 4, 2, Fraction(-1, 2)),
}
