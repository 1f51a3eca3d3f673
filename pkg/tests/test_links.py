# tests/test_links.py

import os
import sys
import unittest

import numpy as np
from numpy.testing import assert_allclose

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from links import (ISplineLink, LinearLink, LinkFactory, LinkParams, LinkSpec, link_inverse, link_jacobian,
                   link_transform, quantile_knots)
from utils.exceptions import LinkDomainError, SchemaError


class TestLinearLink(unittest.TestCase):
    def setUp(self):
        self.spec = LinkSpec(kind='linear')
        self.params = LinkParams([20.0, 4.0])

    def test_transform_and_inverse(self):
        self.assertIsInstance(LinkFactory.get_link(self.spec), LinearLink)
        assert_allclose(link_transform(self.spec, self.params, [20.0, 24.0, 12.0]), [0.0, 1.0, -2.0])
        assert_allclose(link_inverse(self.spec, self.params, [0.0, 1.0, -2.0]), [20.0, 24.0, 12.0])
        assert_allclose(link_jacobian(self.spec, self.params, [1.0, 50.0]), [0.25, 0.25])

    def test_negative_scale_keeps_positive_jacobian(self):
        assert_allclose(link_jacobian(self.spec, [0.0, -2.0], [3.0]), [0.5])

    def test_degenerate_scale(self):
        with self.assertRaises(LinkDomainError):
            link_transform(self.spec, [0.0, 0.0], [1.0])

    def test_parameter_count(self):
        with self.assertRaises(SchemaError):
            link_transform(self.spec, [0.0, 1.0, 2.0], [1.0])


class TestISplineLink(unittest.TestCase):
    def setUp(self):
        self.spec = LinkSpec(kind='ispline', knots=[5.0, 10.0, 20.0], boundary=(0.0, 30.0))
        self.link = LinkFactory.get_link(self.spec, 'mmse')
        self.params = LinkParams([-2.0, 1.0, 0.5, 1.2, 0.8, 0.3])

    def test_basis_is_monotone_from_zero_to_one(self):
        self.assertIsInstance(self.link, ISplineLink)
        y = np.linspace(0.0, 30.0, 301)
        basis = self.link.basis(y)
        self.assertEqual(basis.shape, (301, 5))
        assert_allclose(basis[0], 0.0, atol=1e-12)
        assert_allclose(basis[-1], 1.0, atol=1e-12)
        self.assertTrue(np.all(np.diff(basis, axis=0) >= -1e-12))

    def test_transform_equals_basis_combination(self):
        y = np.array([0.0, 3.0, 7.5, 15.0, 29.0, 30.0])
        expected = self.params.eta[0] + self.link.basis(y) @ (self.params.eta[1:] ** 2)
        assert_allclose(self.link.transform(self.params, y), expected, atol=1e-12)
        lo, hi = self.link.transformed_range(self.params)
        self.assertAlmostEqual(lo, -2.0, places=12)
        self.assertAlmostEqual(hi, -2.0 + float(np.sum(self.params.eta[1:] ** 2)), places=12)

    def test_jacobian_matches_finite_difference(self):
        y = np.array([1.0, 6.0, 12.5, 25.0])
        h = 1e-6
        fd = (self.link.transform(self.params, y + h) - self.link.transform(self.params, y - h)) / (2 * h)
        assert_allclose(self.link.jacobian(self.params, y), fd, rtol=1e-5)

    def test_inverse(self):
        y = np.array([0.5, 8.0, 19.0, 29.5])
        z = self.link.transform(self.params, y)
        assert_allclose(self.link.inverse(self.params, z), y, atol=1e-8)
        self.assertEqual(self.link.inverse(self.params, -2.0), 0.0)

    def test_out_of_range(self):
        with self.assertRaises(LinkDomainError) as ctx:
            self.link.transform(self.params, [31.0])
        self.assertEqual(ctx.exception.marker, 'mmse')
        with self.assertRaises(LinkDomainError):
            self.link.inverse(self.params, [100.0])

    def test_spec_validation(self):
        with self.assertRaises(SchemaError):
            LinkSpec(kind='ispline', knots=[5.0], boundary=None)
        with self.assertRaises(SchemaError):
            LinkSpec(kind='ispline', knots=[10.0, 5.0], boundary=(0.0, 30.0))
        with self.assertRaises(SchemaError):
            LinkSpec(kind='ispline', knots=[0.0, 5.0], boundary=(0.0, 30.0))
        with self.assertRaises(SchemaError):
            LinkSpec(kind='probit')
        self.assertEqual(self.spec.n_params, 6)

    def test_quantile_knots(self):
        values = np.arange(1.0, 101.0)
        assert_allclose(quantile_knots(values, 3), np.quantile(values, [0.25, 0.5, 0.75]))
        with self.assertRaises(SchemaError):
            quantile_knots(np.ones(10), 3)


if __name__ == '__main__':
    unittest.main()
