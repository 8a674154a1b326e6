import random

import pytest

from orthomom.trees import RootedTree


def tree(*children) -> RootedTree:
    return RootedTree(children)


LEAF = tree()


@pytest.fixture
def rng():
    return random.Random(20240811)
