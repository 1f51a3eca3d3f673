# links/link_function.py

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from utils.exceptions import SchemaError

LINK_KINDS = ('linear', 'ispline')
DEFAULT_ISPLINE_KNOTS = 3


@dataclass
class LinkSpec:
    """
    Declarative description of a marker's link function.

    :param kind: 'linear' or 'ispline'.
    :param knots: Interior knots (ispline only), strictly increasing and inside ``boundary``.
    :param boundary: (min, max) marker range. Optional for linear links; for linear links
                     a declared boundary is only used to clamp simulated values.
    """
    kind: str = 'linear'
    knots: List[float] = field(default_factory=list)
    boundary: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.kind not in LINK_KINDS:
            raise SchemaError(f"Unknown link kind '{self.kind}'. Expected one of {LINK_KINDS}.")
        self.knots = [float(k) for k in (self.knots or [])]
        if self.boundary is not None:
            lo, hi = (float(v) for v in self.boundary)
            if not lo < hi:
                raise SchemaError(f"Link boundary must satisfy min < max, got {self.boundary}")
            self.boundary = (lo, hi)
        if self.kind == 'ispline':
            if self.boundary is None:
                raise SchemaError("An ispline link needs a boundary (min, max).")
            if not self.knots:
                raise SchemaError("An ispline link needs interior knots.")
            knots = np.asarray(self.knots)
            if np.any(np.diff(knots) <= 0):
                raise SchemaError(f"Interior knots must be strictly increasing: {self.knots}")
            if knots[0] <= self.boundary[0] or knots[-1] >= self.boundary[1]:
                raise SchemaError(f"Interior knots {self.knots} must lie strictly inside {self.boundary}")
        elif self.knots:
            raise SchemaError("Knots are only meaningful for ispline links.")

    @property
    def n_params(self) -> int:
        return 2 if self.kind == 'linear' else len(self.knots) + 3

    def to_dict(self) -> Dict[str, Any]:
        out = {'kind': self.kind}
        if self.knots:
            out['knots'] = list(self.knots)
        if self.boundary is not None:
            out['boundary'] = list(self.boundary)
        return out


@dataclass
class LinkParams:
    """Unconstrained link parameters; for ispline links entries past the first enter squared."""
    eta: np.ndarray

    def __post_init__(self):
        self.eta = np.atleast_1d(np.asarray(self.eta, dtype=float))


class LinkFunction(ABC):
    """
    Abstract base class for monotone link functions H mapping a raw marker to the latent scale.
    """

    def __init__(self, spec: LinkSpec, marker: str = 'marker'):
        """
        :param spec: Link specification.
        :param marker: Marker name used in error messages.
        """
        self.spec = spec
        self.marker = marker

    @property
    def n_params(self) -> int:
        return self.spec.n_params

    def _check_params(self, params: LinkParams):
        if params.eta.size != self.n_params:
            raise SchemaError(
                f"Link of marker '{self.marker}' expects {self.n_params} parameters, got {params.eta.size}"
            )

    @abstractmethod
    def transform(self, params: LinkParams, y) -> np.ndarray:
        """
        Apply H to raw marker values.

        :param params: Link parameters.
        :param y: Scalar or array of raw marker values.
        :return: Transformed values.
        """
        pass

    @abstractmethod
    def jacobian(self, params: LinkParams, y) -> np.ndarray:
        """
        Derivative dH/dy at raw marker values (nonnegative).
        """
        pass

    @abstractmethod
    def inverse(self, params: LinkParams, z) -> np.ndarray:
        """
        Map latent-scale values back to the raw marker scale.
        """
        pass
