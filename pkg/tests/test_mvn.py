# tests/test_mvn.py

import os
import sys
import unittest

import numpy as np
from numpy.testing import assert_allclose
from scipy.special import ndtr

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from utils.exceptions import CapacityError, CdfDomainError
from utils.mvn import (CdfConfig, GaussianCdfQuery, bvn_upper, conditional_normal, mvn_cdf,
                       skew_normal_reduce)
from tests.builders import slow


def random_correlation(rng, n):
    A = rng.normal(size=(n, n + 2))
    S = A @ A.T
    d = np.sqrt(np.diag(S))
    return S / np.outer(d, d)


def mc_orthant(upper, cov, draws, rng):
    L = np.linalg.cholesky(cov)
    hits = 0
    chunk = 200_000
    done = 0
    while done < draws:
        n = min(chunk, draws - done)
        x = rng.standard_normal((n, upper.size)) @ L.T
        hits += int(np.sum(np.all(x <= upper, axis=1)))
        done += n
    p = hits / draws
    return p, np.sqrt(max(p * (1 - p), 1e-12) / draws)


class TestMvnCdf(unittest.TestCase):
    def test_univariate_is_analytic(self):
        value, err = mvn_cdf(GaussianCdfQuery(upper=[0.0], mean=[0.0], cov=[[1.0]]))
        self.assertEqual(value, 0.5)
        self.assertEqual(err, 0.0)
        rng = np.random.default_rng(1)
        for _ in range(20):
            u, m, s = rng.normal(), rng.normal(), rng.uniform(0.2, 3.0)
            value, _ = mvn_cdf(GaussianCdfQuery(upper=[u], mean=[m], cov=[[s * s]]))
            self.assertAlmostEqual(value, float(ndtr((u - m) / s)), delta=1e-12)

    def test_bivariate_orthants(self):
        value, _ = mvn_cdf(GaussianCdfQuery(upper=[0, 0], mean=[0, 0], cov=np.eye(2)))
        self.assertAlmostEqual(value, 0.25, delta=1e-12)
        for rho in (-0.9, -0.5, 0.0, 0.5, 0.9):
            value, _ = mvn_cdf(GaussianCdfQuery(upper=[0, 0], mean=[0, 0], cov=[[1, rho], [rho, 1]]))
            self.assertAlmostEqual(value, 0.25 + np.arcsin(rho) / (2 * np.pi), delta=2e-4)

    def test_bvn_upper_limits(self):
        self.assertEqual(bvn_upper(np.inf, 0.0, 0.3), 0.0)
        self.assertAlmostEqual(bvn_upper(-np.inf, 0.5, 0.3), float(ndtr(-0.5)), delta=1e-14)
        self.assertAlmostEqual(bvn_upper(0.3, -0.2, 0.0), float(ndtr(-0.3) * ndtr(0.2)), delta=1e-14)
        # symmetry in the two limits
        self.assertAlmostEqual(bvn_upper(0.3, -1.1, 0.6), bvn_upper(-1.1, 0.3, 0.6), delta=1e-14)

    def test_trivariate_equicorrelated_orthant(self):
        rho = 0.5
        cov = np.full((3, 3), rho) + (1 - rho) * np.eye(3)
        value, err = mvn_cdf(GaussianCdfQuery(upper=np.zeros(3), mean=np.zeros(3), cov=cov))
        expected = 0.125 + 3 * np.arcsin(rho) / (4 * np.pi)
        self.assertAlmostEqual(value, expected, delta=max(3 * err, 2e-4))
        self.assertLess(err, 1e-3)

    def test_independent_coordinates_factorise(self):
        upper = np.array([0.3, -0.5, 1.2, 0.0, 0.7])
        value, _ = mvn_cdf(GaussianCdfQuery(upper=upper, mean=np.zeros(5), cov=np.eye(5)))
        self.assertAlmostEqual(value, float(np.prod(ndtr(upper))), delta=1e-8)

    def test_infinite_limits(self):
        cov = random_correlation(np.random.default_rng(3), 4)
        value, _ = mvn_cdf(GaussianCdfQuery(upper=[0.0, -np.inf, 1.0, 2.0], mean=np.zeros(4), cov=cov))
        self.assertEqual(value, 0.0)
        value, _ = mvn_cdf(GaussianCdfQuery(upper=[0.4, np.inf, np.inf, np.inf], mean=np.zeros(4), cov=cov))
        self.assertAlmostEqual(value, float(ndtr(0.4)), delta=1e-12)

    def test_rank_deficient_covariance(self):
        # X3 = X1 exactly: P(X1 <= 0, X2 <= 0, X3 <= 0) = P(X1 <= 0, X2 <= 0)
        cov = np.array([[1.0, 0.3, 1.0], [0.3, 1.0, 0.3], [1.0, 0.3, 1.0]])
        value, err = mvn_cdf(GaussianCdfQuery(upper=np.zeros(3), mean=np.zeros(3), cov=cov))
        self.assertAlmostEqual(value, 0.25 + np.arcsin(0.3) / (2 * np.pi), delta=max(4 * err, 1e-3))

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(11)
        cov = random_correlation(rng, 6)
        query = GaussianCdfQuery(upper=rng.normal(size=6), mean=np.zeros(6), cov=cov)
        self.assertEqual(mvn_cdf(query, CdfConfig(rng_seed=5)), mvn_cdf(query, CdfConfig(rng_seed=5)))

    def test_fixed_points_mode_is_smooth(self):
        cfg = CdfConfig(adaptive=False, reorder=False, fixed_points=500, randomizations=8)
        rng = np.random.default_rng(4)
        cov = random_correlation(rng, 4)
        upper = rng.normal(size=4)
        values = [mvn_cdf(GaussianCdfQuery(upper=upper + h, mean=np.zeros(4), cov=cov), cfg)[0]
                  for h in (-1e-4, 0.0, 1e-4)]
        # common random numbers: a tiny shift moves the value by a tiny amount
        self.assertLess(abs(values[2] - values[0]), 1e-3)
        self.assertLess(abs(values[1] - values[0]), 1e-3)

    def test_errors(self):
        with self.assertRaises(CapacityError):
            mvn_cdf(GaussianCdfQuery(upper=np.zeros(4), mean=np.zeros(4), cov=np.eye(4)), CdfConfig(max_dim=3))
        bad = np.array([[1.0, 0.9, 0.9], [0.9, 1.0, -0.9], [0.9, -0.9, 1.0]])
        with self.assertRaises(CdfDomainError):
            mvn_cdf(GaussianCdfQuery(upper=np.zeros(3), mean=np.zeros(3), cov=bad))
        with self.assertRaises(CdfDomainError):
            GaussianCdfQuery(upper=np.zeros(2), mean=np.zeros(3), cov=np.eye(2))
        with self.assertRaises(ValueError):
            CdfConfig(max_points=10)

    def test_monotone_in_each_upper_limit(self):
        rng = np.random.default_rng(31)
        cfg = CdfConfig(rng_seed=3)
        for _ in range(20):
            n = int(rng.integers(2, 6))
            cov = random_correlation(rng, n)
            upper = rng.normal(0.3, 1.0, size=n)
            base, base_err = mvn_cdf(GaussianCdfQuery(upper=upper, mean=np.zeros(n), cov=cov), cfg)
            for i in range(n):
                raised = upper.copy()
                raised[i] += abs(rng.normal(0.0, 0.5)) + 0.05
                value, err = mvn_cdf(GaussianCdfQuery(upper=raised, mean=np.zeros(n), cov=cov), cfg)
                # equal up to the reported integration error
                self.assertGreaterEqual(value, base - 3 * (base_err + err) - 1e-10, f"n={n}, coordinate {i}")

    def test_random_instances_against_monte_carlo(self):
        rng = np.random.default_rng(2024)
        oracle_rng = np.random.default_rng(99)
        for n in (3, 5, 8):
            cov = random_correlation(rng, n)
            upper = rng.normal(0.5, 1.0, size=n)
            value, err = mvn_cdf(GaussianCdfQuery(upper=upper, mean=np.zeros(n), cov=cov))
            p, se = mc_orthant(upper, cov, 400_000, oracle_rng)
            self.assertLess(abs(value - p), 4 * np.hypot(se, err) + 1e-4)

    @slow
    def test_fifty_instances_against_large_monte_carlo(self):
        rng = np.random.default_rng(7)
        oracle_rng = np.random.default_rng(77)
        for _ in range(50):
            n = int(rng.integers(3, 13))
            cov = random_correlation(rng, n)
            upper = rng.normal(0.8, 1.0, size=n)
            value, err = mvn_cdf(GaussianCdfQuery(upper=upper, mean=np.zeros(n), cov=cov))
            p, se = mc_orthant(upper, cov, 10_000_000, oracle_rng)
            self.assertLess(abs(value - p), 3 * np.hypot(se, err) + 2e-5)


class TestCdfConfig(unittest.TestCase):
    def test_estimation_settings(self):
        cfg = CdfConfig.estimation()
        self.assertFalse(cfg.adaptive)
        self.assertFalse(cfg.reorder)
        self.assertEqual((cfg.fixed_points, cfg.randomizations), (500, 8))
        self.assertEqual(CdfConfig.estimation(fixed_points=200).fixed_points, 200)
        self.assertEqual(CdfConfig.from_dict({'rng_seed': '4'}, estimation=True),
                         CdfConfig.estimation(rng_seed=4))
        self.assertTrue(CdfConfig.from_dict({}).adaptive)

    def test_boolean_strings(self):
        cfg = CdfConfig.from_dict({'adaptive': 'false', 'reorder': 'no'})
        self.assertFalse(cfg.adaptive)
        self.assertFalse(cfg.reorder)
        cfg = CdfConfig.from_dict({'adaptive': 'True', 'reorder': 'on'}, estimation=True)
        self.assertTrue(cfg.adaptive)
        self.assertTrue(cfg.reorder)
        self.assertFalse(CdfConfig.from_dict({'adaptive': 0}).adaptive)
        with self.assertRaises(ValueError):
            CdfConfig.from_dict({'adaptive': 'maybe'})

    def test_lattice_dimension_cap(self):
        self.assertEqual(CdfConfig(max_dim=128).max_dim, 128)
        for value in (0, 129, 1000):
            with self.subTest(max_dim=value), self.assertRaises(ValueError):
                CdfConfig(max_dim=value)
        with self.assertRaises(ValueError):
            CdfConfig.from_dict({'max_dim': '200'})


class TestGaussianAlgebra(unittest.TestCase):
    def test_conditional_independent_blocks(self):
        cov = np.diag([1.0, 2.0, 3.0])
        mean, c = conditional_normal([1.0, 2.0, 3.0], cov, [2], [10.0])
        assert_allclose(mean, [1.0, 2.0])
        assert_allclose(c, np.diag([1.0, 2.0]))

    def test_conditional_bivariate(self):
        rho = 0.6
        mean, c = conditional_normal([0.0, 0.0], [[1, rho], [rho, 1]], [1], [1.0])
        assert_allclose(mean, [rho])
        assert_allclose(c, [[1 - rho ** 2]])

    def test_conditional_matches_precision_form(self):
        rng = np.random.default_rng(8)
        A = rng.normal(size=(4, 4))
        cov = A @ A.T + 0.5 * np.eye(4)
        mu = rng.normal(size=4)
        y = rng.normal(size=2)
        mean, c = conditional_normal(mu, cov, [1, 3], y)
        Q = np.linalg.inv(cov)
        a, b = [0, 2], [1, 3]
        Qaa = Q[np.ix_(a, a)]
        expected_cov = np.linalg.inv(Qaa)
        expected_mean = mu[a] - expected_cov @ Q[np.ix_(a, b)] @ (y - mu[b])
        assert_allclose(mean, expected_mean, atol=1e-10)
        assert_allclose(c, expected_cov, atol=1e-10)

    def test_skew_normal_identity_against_monte_carlo(self):
        rng = np.random.default_rng(12)
        lambda0, Delta, Lambda = np.array([0.4]), np.array([[0.8]]), np.array([[0.5, -1.2]])
        z = rng.standard_normal((400_000, 2))
        mc = float(np.mean(ndtr((lambda0[0] + z @ Lambda[0]) / np.sqrt(Delta[0, 0]))))
        self.assertAlmostEqual(skew_normal_reduce(lambda0, Delta, Lambda), mc, delta=3e-3)

    def test_skew_normal_identity_bivariate(self):
        lambda0 = np.array([0.2, -0.1])
        Delta = np.eye(2)
        Lambda = np.array([[0.7], [0.7]])
        cov = Delta + Lambda @ Lambda.T
        r = cov[0, 1] / np.sqrt(cov[0, 0] * cov[1, 1])
        expected = bvn_upper(-lambda0[0] / np.sqrt(cov[0, 0]), -lambda0[1] / np.sqrt(cov[1, 1]), r)
        self.assertAlmostEqual(skew_normal_reduce(lambda0, Delta, Lambda), expected, delta=1e-12)


if __name__ == '__main__':
    unittest.main()
