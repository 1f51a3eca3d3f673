# links/linear_link.py

import numpy as np

from links.link_function import LinkFunction, LinkParams
from utils.exceptions import LinkDomainError

MIN_SCALE = 1e-8


class LinearLink(LinkFunction):
    """
    Location-scale link H(y) = (y - eta0) / eta1.
    """

    def _scale(self, params: LinkParams) -> float:
        self._check_params(params)
        scale = params.eta[1]
        if not abs(scale) > MIN_SCALE:
            raise LinkDomainError(
                f"Scale parameter of marker '{self.marker}' is too close to 0: {scale}",
                marker=self.marker, value=float(scale),
            )
        return scale

    def transform(self, params: LinkParams, y) -> np.ndarray:
        scale = self._scale(params)
        return (np.asarray(y, dtype=float) - params.eta[0]) / scale

    def jacobian(self, params: LinkParams, y) -> np.ndarray:
        scale = self._scale(params)
        return np.full(np.shape(y), 1.0 / abs(scale))

    def inverse(self, params: LinkParams, z) -> np.ndarray:
        scale = self._scale(params)
        return params.eta[0] + scale * np.asarray(z, dtype=float)
