# links/ispline_link.py

import logging
from typing import Sequence

import numpy as np
from scipy.interpolate import BSpline
from scipy.optimize import brentq

from links.link_function import DEFAULT_ISPLINE_KNOTS, LinkFunction, LinkParams, LinkSpec
from utils.exceptions import LinkDomainError, SchemaError

logger = logging.getLogger(__name__)

DEGREE = 2
INVERSE_TOLERANCE = 1e-10
_EDGE = 1e-12


class ISplineLink(LinkFunction):
    """
    Monotone link H(y) = eta0 + sum_l eta_l^2 I_l(y) built on quadratic I-splines.

    With interior knots k_1 < ... < k_m the family has m + 2 members. Each I_l is the
    tail sum of the quadratic B-splines on the clamped knot vector, so
    I_l(min) = 0 and I_l(max) = 1, and H is a B-spline whose coefficients are
    eta0 plus cumulative sums of the squared weights.
    """

    def __init__(self, spec: LinkSpec, marker: str = 'marker'):
        super().__init__(spec, marker)
        lo, hi = spec.boundary
        self.lower, self.upper = lo, hi
        self.knot_vector = np.concatenate([[lo] * (DEGREE + 1), spec.knots, [hi] * (DEGREE + 1)])
        self.n_basis = len(spec.knots) + DEGREE + 1

    def _check_domain(self, y: np.ndarray):
        span = _EDGE * (self.upper - self.lower)
        outside = (y < self.lower - span) | (y > self.upper + span) | np.isnan(y)
        if np.any(outside):
            bad = float(np.asarray(y)[outside].flat[0])
            raise LinkDomainError(
                f"Value {bad} of marker '{self.marker}' lies outside the link range [{self.lower}, {self.upper}]",
                marker=self.marker, value=bad,
            )
        return np.clip(y, self.lower, self.upper)

    def _spline(self, params: LinkParams) -> BSpline:
        self._check_params(params)
        weights = params.eta[1:] ** 2
        coefs = params.eta[0] + np.concatenate([[0.0], np.cumsum(weights)])
        return BSpline(self.knot_vector, coefs, DEGREE, extrapolate=False)

    def basis(self, y) -> np.ndarray:
        """
        I-spline basis values, one column per member.

        :param y: Raw marker values inside the boundary.
        :return: Array of shape (len(y), m + 2).
        """
        y = self._check_domain(np.atleast_1d(np.asarray(y, dtype=float)))
        design = BSpline.design_matrix(y, self.knot_vector, DEGREE).toarray()
        tails = np.cumsum(design[:, ::-1], axis=1)[:, ::-1]
        return tails[:, 1:]

    def transform(self, params: LinkParams, y) -> np.ndarray:
        y_arr = self._check_domain(np.asarray(y, dtype=float))
        return self._spline(params)(y_arr)

    def jacobian(self, params: LinkParams, y) -> np.ndarray:
        y_arr = self._check_domain(np.asarray(y, dtype=float))
        return np.maximum(self._spline(params).derivative()(y_arr), 0.0)

    def inverse(self, params: LinkParams, z) -> np.ndarray:
        spline = self._spline(params)
        h_lo, h_hi = float(spline(self.lower)), float(spline(self.upper))
        z_arr = np.asarray(z, dtype=float)
        tol = 1e-12 * max(1.0, abs(h_lo), abs(h_hi))
        flat = np.atleast_1d(z_arr)
        out = np.empty(flat.shape)
        for i, value in enumerate(flat):
            if not h_lo - tol <= value <= h_hi + tol:
                raise LinkDomainError(
                    f"Latent value {value} of marker '{self.marker}' is outside the transformed range [{h_lo}, {h_hi}]",
                    marker=self.marker, value=float(value),
                )
            if value <= h_lo:
                out[i] = self.lower
            elif value >= h_hi:
                out[i] = self.upper
            else:
                out[i] = brentq(lambda y: float(spline(y)) - value, self.lower, self.upper,
                                xtol=INVERSE_TOLERANCE, rtol=4 * np.finfo(float).eps)
        return out.reshape(z_arr.shape) if z_arr.ndim else out[0]

    def transformed_range(self, params: LinkParams):
        spline = self._spline(params)
        return float(spline(self.lower)), float(spline(self.upper))


def quantile_knots(values: Sequence[float], n_knots: int = DEFAULT_ISPLINE_KNOTS) -> list:
    """
    Interior knots at equally spaced quantiles of the pooled observations
    (quartiles for the default of 3 knots).

    :param values: All observed values of the marker.
    :param n_knots: Number of interior knots.
    :return: List of knots.
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise SchemaError("Cannot place quantile knots without observations.")
    probs = np.arange(1, n_knots + 1) / (n_knots + 1)
    knots = np.quantile(values, probs)
    if np.any(np.diff(knots) <= 0) or knots[0] <= values.min() or knots[-1] >= values.max():
        raise SchemaError(
            f"Quantile knots {knots.tolist()} are not strictly inside the observed range; declare knots explicitly."
        )
    logger.debug(f"Placed interior knots at {knots.tolist()}")
    return knots.tolist()
