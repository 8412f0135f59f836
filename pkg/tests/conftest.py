import numpy as np
import pytest

from cplopt.model import ProblemInstance


@pytest.fixture
def toy1():
    """2-variable binary toy: min -x1-x2 s.t. 2x1+2x2 <= 3, x <= 1, x >= 0.

    LP optimum -1.5 on the segment (0.5,1)-(1,0.5); integer optimum -1.
    """
    return ProblemInstance(
        A=np.array([[2.0, 2.0], [1.0, 0.0], [0.0, 1.0]]),
        b=np.array([3.0, 1.0, 1.0]),
        c=np.array([-1.0, -1.0]),
        integer_indices=np.array([0, 1]),
        name="toy1",
        z_star=-1.0,
    )
