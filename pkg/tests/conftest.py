import numpy as np
import pytest

from geocloak.geoind import ObfuscationMatrix
from geocloak.tree import TreeConfig, build_synthetic_tree


@pytest.fixture(scope="session")
def line3():
    """Three leaves in a row at unit spacing: d(0,1)=1, d(0,2)=2."""
    return build_synthetic_tree(TreeConfig(branching=3, height=1, cell_size=1.0))


@pytest.fixture(scope="session")
def grid4():
    """2x2 leaf grid with one internal level (branching 2, height 2)."""
    return build_synthetic_tree(TreeConfig(branching=2, height=2, cell_size=1.0))


@pytest.fixture(scope="session")
def grid9():
    """3x3 leaf grid, cell 0.1, two levels."""
    return build_synthetic_tree(TreeConfig(branching=3, height=2, cell_size=0.1))


@pytest.fixture()
def oracle_matrix(line3):
    """The worked 3x3 example used by the reserved-budget oracles."""
    return ObfuscationMatrix(
        level=0,
        node_ids=line3.levels[0],
        entries=np.array(
            [[0.5, 0.3, 0.2], [0.2, 0.3, 0.5], [0.3, 0.4, 0.3]]
        ),
    )


@pytest.fixture(scope="session")
def make_matrix():
    """Build a leaf-level matrix bound to a tree's leaf ids."""

    def build(tree, rows):
        return ObfuscationMatrix(
            level=0, node_ids=tree.levels[0], entries=np.asarray(rows, dtype=float)
        )

    return build
