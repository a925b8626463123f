import itertools
import math

import numpy as np
import pytest

from robust_ustat import ArityError, Dataset, KernelSpec, PermutationError, block_average, enumerate_tuples, u_statistic
from robust_ustat.covariance import pairwise_kernel, sample_covariance
from robust_ustat.ustat import num_tuples


def scalar_kernel(fn):
    return KernelSpec(arity=2, output_dim=1, evaluate=lambda a, b: np.array([[fn(a[0], b[0])]]))


SQ_DIFF = scalar_kernel(lambda x, y: (x - y) ** 2 / 2)


class TestEnumerateTuples:
    def test_3_2(self):
        assert list(enumerate_tuples(3, 2)) == [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]

    def test_2_2(self):
        assert list(enumerate_tuples(2, 2)) == [(0, 1), (1, 0)]

    def test_5_3_count(self):
        tuples = list(enumerate_tuples(5, 3))
        assert len(tuples) == 60 == num_tuples(5, 3)
        assert len(set(tuples)) == 60
        assert all(len(set(t)) == 3 for t in tuples)

    def test_arity_error(self):
        with pytest.raises(ArityError):
            list(enumerate_tuples(2, 3))
        with pytest.raises(ArityError):
            list(enumerate_tuples(5, 1))


class TestUStatistic:
    def test_scalar_pair(self):
        data = Dataset(samples=np.array([[0.0], [2.0]]))
        assert u_statistic(data, SQ_DIFF)[0, 0] == pytest.approx(2.0, abs=1e-14)

    def test_constant_kernel(self):
        c = np.array([[1.0, 2.0], [2.0, 5.0]])
        kern = KernelSpec(arity=2, output_dim=2, evaluate=lambda a, b: c)
        data = Dataset(samples=np.arange(7.0).reshape(-1, 1))
        assert np.abs(u_statistic(data, kern) - c).max() <= 1e-14

    def test_matches_sample_covariance(self):
        rng = np.random.default_rng(10)
        data = Dataset(samples=rng.standard_normal((10, 3)))
        u = u_statistic(data, pairwise_kernel(3))
        assert np.abs(u - sample_covariance(data)).max() <= 1e-10

    def test_ordered_equals_combinations(self):
        rng = np.random.default_rng(11)
        data = Dataset(samples=rng.standard_normal((7, 2)))
        kern = pairwise_kernel(2)
        fast = u_statistic(data, kern, use_symmetry=True)
        slow = u_statistic(data, kern, use_symmetry=False)
        assert np.abs(fast - slow).max() <= 1e-12

    def test_arity_error(self):
        data = Dataset(samples=np.array([[1.0]]))
        with pytest.raises(ArityError):
            u_statistic(data, SQ_DIFF)

    def test_symmetric_output(self):
        rng = np.random.default_rng(12)
        data = Dataset(samples=rng.standard_normal((9, 4)))
        u = u_statistic(data, pairwise_kernel(4))
        assert np.abs(u - u.T).max() <= 1e-12


class TestBlockAverage:
    def test_n_equals_m(self):
        data = Dataset(samples=np.array([[0.0], [3.0]]))
        out = block_average(data, SQ_DIFF, [0, 1])
        assert out[0, 0] == pytest.approx(4.5)

    def test_identity_permutation(self):
        data = Dataset(samples=np.array([[0.0], [1.0], [5.0], [2.0]]))
        out = block_average(data, SQ_DIFF, [0, 1, 2, 3])
        expected = ((0 - 1) ** 2 / 2 + (5 - 2) ** 2 / 2) / 2
        assert out[0, 0] == pytest.approx(expected)

    def test_permutation_average_recovers_ustat(self):
        rng = np.random.default_rng(13)
        data = Dataset(samples=rng.standard_normal((4, 2)))
        kern = pairwise_kernel(2)
        acc = np.zeros((2, 2))
        perms = list(itertools.permutations(range(4)))
        for perm in perms:
            acc += block_average(data, kern, perm)
        assert np.abs(acc / len(perms) - u_statistic(data, kern)).max() <= 1e-10

    @pytest.mark.parametrize("n", [2, 3, 4, 5, 6])
    def test_permutation_identity_small_n(self, n):
        rng = np.random.default_rng(100 + n)
        data = Dataset(samples=rng.standard_normal((n, 1)))
        acc = np.zeros((1, 1))
        perms = list(itertools.permutations(range(n)))
        for perm in perms:
            acc += block_average(data, SQ_DIFF, perm)
        assert np.abs(acc / len(perms) - u_statistic(data, SQ_DIFF)).max() <= 1e-10

    def test_invalid_permutation(self):
        data = Dataset(samples=np.zeros((4, 1)))
        with pytest.raises(PermutationError):
            block_average(data, SQ_DIFF, [0, 1, 2, 2])
        with pytest.raises(PermutationError):
            block_average(data, SQ_DIFF, [0, 1])


class TestKernelSpec:
    def test_permutation_symmetry_of_pairwise(self):
        rng = np.random.default_rng(14)
        kern = pairwise_kernel(3)
        for _ in range(20):
            a, b = rng.standard_normal(3), rng.standard_normal(3)
            assert np.abs(kern.evaluate(a, b) - kern.evaluate(b, a)).max() <= 1e-12

    def test_batch_matches_single(self):
        rng = np.random.default_rng(15)
        kern = pairwise_kernel(3)
        ys1 = rng.standard_normal((6, 3))
        ys2 = rng.standard_normal((6, 3))
        batch = kern.evaluate_batch(ys1, ys2)
        for i in range(6):
            assert np.abs(batch[i] - kern.evaluate(ys1[i], ys2[i])).max() <= 1e-15

    def test_arity_validation(self):
        with pytest.raises(ArityError):
            KernelSpec(arity=1, output_dim=1, evaluate=lambda x: np.zeros((1, 1)))


class TestDataset:
    def test_requires_finite(self):
        with pytest.raises(Exception):
            Dataset(samples=np.array([[np.inf]]))

    def test_immutable(self):
        data = Dataset(samples=np.ones((2, 2)))
        with pytest.raises(ValueError):
            data.samples[0, 0] = 7.0

    def test_shape_properties(self):
        data = Dataset(samples=np.zeros((4, 3)), seed=99)
        assert (data.n, data.p, data.seed) == (4, 3, 99)
