"""The numba loop kernels and the numpy fallbacks must agree."""
import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from refdet import kernels
from refdet._accel import HAS_NUMBA

pytestmark = pytest.mark.skipif(not HAS_NUMBA, reason="numba not installed")


def boxes(rng, n):
    xy = rng.uniform(0, 50, (n, 2))
    return np.concatenate([xy, xy + rng.uniform(0, 20, (n, 2))], axis=1)


def test_iou_giou_equivalence(rng):
    a, b = boxes(rng, 13), boxes(rng, 9)
    a[0] = [3, 3, 3, 3]  # zero-area row
    i1, g1 = kernels._iou_giou_loops(a, b)
    i2, g2 = kernels._iou_giou_numpy(a, b)
    np.testing.assert_allclose(i1, i2, atol=1e-12)
    np.testing.assert_allclose(g1, g2, atol=1e-12)


@pytest.mark.parametrize("shape", [(1, 1), (3, 5), (6, 6), (4, 9)])
def test_lsap_equivalence_and_optimality(shape, rng):
    for _ in range(20):
        c = rng.normal(size=shape)
        r1, u1, v1, ok1 = kernels._lsap_loops(np.ascontiguousarray(c))
        r2, u2, v2, ok2 = kernels._lsap_numpy(c)
        assert ok1 and ok2
        rows, cols = linear_sum_assignment(c)
        best = c[rows, cols].sum()
        assert c[np.arange(shape[0]), r1].sum() == pytest.approx(best)
        assert c[np.arange(shape[0]), r2].sum() == pytest.approx(best)
        # dual feasibility
        assert (c - u1[:, None] - v1[None, :] >= -1e-9).all()


def test_affinity_equivalence(rng):
    f = rng.uniform(0, 1, (40, 6))
    np.testing.assert_array_equal(kernels._affinity_loops(f, 0.8, 1e-5), kernels._affinity_numpy(f, 0.8, 1e-5))


def test_greedy_equivalence(rng):
    iou = rng.uniform(0, 1, (15, 7))
    thr = np.arange(0.5, 0.96, 0.05)
    np.testing.assert_array_equal(kernels._greedy_loops(iou, thr), kernels._greedy_numpy(iou, thr))


def test_lsap_rejects_tall():
    with pytest.raises(ValueError):
        kernels.lsap_min(np.zeros((3, 2)))
