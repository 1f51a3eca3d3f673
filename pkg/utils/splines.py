# utils/splines.py

import numpy as np

from utils.exceptions import SchemaError


def natural_spline_basis(x, knots) -> np.ndarray:
    """
    Natural cubic spline basis without intercept (truncated-power form).

    For knots xi_1 < ... < xi_K the basis has K - 1 columns: x itself and
    d_k(x) - d_{K-1}(x) for k = 1..K-2, where
    d_k(x) = ((x - xi_k)^3_+ - (x - xi_K)^3_+) / (xi_K - xi_k).
    The fit is cubic between the boundary knots and linear beyond them.

    :param x: Evaluation points.
    :param knots: Knot vector, boundary knots first and last.
    :return: Array of shape (len(x), K - 1).
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    knots = np.asarray(knots, dtype=float)
    if knots.size < 2:
        raise SchemaError("A natural spline needs at least two knots.")
    if np.any(np.diff(knots) <= 0):
        raise SchemaError(f"Spline knots must be strictly increasing: {knots.tolist()}")
    last = knots[-1]

    def d(k):
        return (np.maximum(x - knots[k], 0.0) ** 3 - np.maximum(x - last, 0.0) ** 3) / (last - knots[k])

    columns = [x]
    if knots.size > 2:
        d_last = d(knots.size - 2)
        columns.extend(d(k) - d_last for k in range(knots.size - 2))
    return np.column_stack(columns)
