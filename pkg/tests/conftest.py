import numpy as np
import pytest

from mcfbsde.chain import ChainModel, build_tree

A2 = np.array([[-1.0, 2.0], [1.0, -2.0]])


@pytest.fixture
def model2():
    return ChainModel(2, A2)


@pytest.fixture
def tree2(model2):
    return build_tree(model2, T=1.0, N=8, root_state=0)


@pytest.fixture
def frozen_model():
    return ChainModel(2, np.zeros((2, 2)))
