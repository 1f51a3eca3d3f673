# utils/parameters.py

"""
Flat parameter vector, its layout, and the random-effect covariance matrix.

The layout follows the model description: per domain the fixed effects, then
per marker the link parameters and the error SD (and the Brownian SD when
present); then the SDs and transformed correlations of the random effects;
then per endpoint its threshold and its domain contributions.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from utils.exceptions import SchemaError
from utils.model_spec import ModelSpec

logger = logging.getLogger(__name__)

PD_TOLERANCE = 1e-10


def term_label(term: str) -> str:
    return 'intercept' if term == '1' else term


@dataclass
class Block:
    name: str
    start: int
    labels: List[str]
    fixed: Dict[int, float]

    @property
    def size(self) -> int:
        return len(self.labels)

    @property
    def slice(self) -> slice:
        return slice(self.start, self.start + self.size)


class ParameterLayout:
    """
    Ordered named blocks of the parameter vector with their identifiability constraints.
    """

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.blocks: Dict[str, Block] = {}
        self._size = 0
        for domain in spec.domains:
            self._add(f"{domain.name}.beta",
                      [f"{domain.name}.beta[{term_label(t)}]" for t in domain.fixed_terms], {0: 0.0})
            for marker in domain.markers:
                self._add(f"{domain.name}.{marker.name}.eta",
                          [f"{domain.name}.{marker.name}.eta[{j}]" for j in range(marker.n_params)])
                self._add(f"{domain.name}.{marker.name}.sigma", [f"{domain.name}.{marker.name}.sigma"])
            if domain.brownian:
                self._add(f"{domain.name}.sigma_w", [f"{domain.name}.sigma_w"])

        self.random_labels = [f"{d.name}:{term_label(t)}" for d in spec.domains for t in d.random]
        intercepts, offset = {}, 0
        for d in spec.domains:
            intercepts[offset] = 1.0
            offset += len(d.random)
        self._add('B.sigma', [f"B.sigma[{r}]" for r in self.random_labels], intercepts)
        q = len(self.random_labels)
        self._add('B.rho', [f"B.rho[{self.random_labels[i]}~{self.random_labels[j]}]"
                            for i in range(1, q) for j in range(i)])

        for process in spec.diagnoses:
            self._endpoint_blocks(process, 'gamma', [])
        if spec.death is not None:
            self._endpoint_blocks(spec.death, 'delta', spec.death.spline_labels)

        self.labels = [label for block in self.blocks.values() for label in block.labels]
        self.fixed_mask = np.zeros(self._size, dtype=bool)
        self.fixed_values = np.full(self._size, np.nan)
        for block in self.blocks.values():
            for index, value in block.fixed.items():
                self.fixed_mask[block.start + index] = True
                self.fixed_values[block.start + index] = value

    def _endpoint_blocks(self, endpoint, weight: str, spline_labels: List[str]):
        name = endpoint.name
        self._add(f"{name}.zeta", [f"{name}.zeta[intercept]"]
                  + [f"{name}.zeta[{s}]" for s in spline_labels]
                  + [f"{name}.zeta[{t}]" for t in endpoint.threshold])
        for domain in self.spec.domains:
            terms = self.spec.contribution_terms(endpoint, domain.name)
            self._add(f"{name}.{weight}.{domain.name}",
                      [f"{name}.{weight}[{domain.name}]" if t == '1' else f"{name}.{weight}[{domain.name}:{t}]"
                       for t in terms])

    def _add(self, name: str, labels: List[str], fixed: Optional[Dict[int, float]] = None):
        self.blocks[name] = Block(name, self._size, labels, dict(fixed or {}))
        self._size += len(labels)

    @property
    def size(self) -> int:
        return self._size

    @property
    def n_free(self) -> int:
        return int((~self.fixed_mask).sum())

    @property
    def free_labels(self) -> List[str]:
        return [label for label, fixed in zip(self.labels, self.fixed_mask) if not fixed]

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise SchemaError(f"Unknown parameter '{label}'")

    def block(self, name: str) -> Block:
        try:
            return self.blocks[name]
        except KeyError:
            raise SchemaError(f"Unknown parameter block '{name}'")


@dataclass
class ParameterVector:
    theta: np.ndarray
    layout: ParameterLayout

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).copy()
        if self.theta.size != self.layout.size:
            raise SchemaError(f"Parameter vector has length {self.theta.size}, layout expects {self.layout.size}")
        self.theta[self.layout.fixed_mask] = self.layout.fixed_values[self.layout.fixed_mask]

    @property
    def fixed_mask(self) -> np.ndarray:
        return self.layout.fixed_mask

    @property
    def free(self) -> np.ndarray:
        return self.theta[~self.layout.fixed_mask].copy()

    def with_free(self, values) -> "ParameterVector":
        values = np.asarray(values, dtype=float)
        if values.size != self.layout.n_free:
            raise SchemaError(f"Expected {self.layout.n_free} free parameters, got {values.size}")
        theta = self.theta.copy()
        theta[~self.layout.fixed_mask] = values
        return ParameterVector(theta, self.layout)

    def block(self, name: str) -> np.ndarray:
        return self.theta[self.layout.block(name).slice]

    def get(self, label: str) -> float:
        return float(self.theta[self.layout.index(label)])

    def by_label(self) -> Dict[str, float]:
        return dict(zip(self.layout.labels, self.theta.tolist()))

    def updated(self, values: Mapping[str, float]) -> "ParameterVector":
        theta = self.theta.copy()
        for label, value in values.items():
            theta[self.layout.index(label)] = float(value)
        return ParameterVector(theta, self.layout)

    @classmethod
    def from_labels(cls, layout: ParameterLayout, values: Mapping[str, float],
                    default: Optional[float] = None) -> "ParameterVector":
        """
        Build a vector from a label -> value map.

        :param default: Value for free labels absent from ``values``; None makes them an error.
        """
        theta = np.where(layout.fixed_mask, layout.fixed_values, np.nan if default is None else default)
        unknown = set(values) - set(layout.labels)
        if unknown:
            raise SchemaError(f"Unknown parameters: {sorted(unknown)}")
        for label, value in values.items():
            theta[layout.index(label)] = float(value)
        missing = [label for label, v in zip(layout.labels, theta) if np.isnan(v)]
        if missing:
            raise SchemaError(f"Missing values for parameters: {missing}")
        return cls(theta, layout)


def pack(layout: ParameterLayout, params: Mapping[str, np.ndarray]) -> ParameterVector:
    """
    Structured parameters (block name -> values) to a ParameterVector.

    Fixed entries are restored from the layout constants whatever ``params`` holds.
    """
    theta = np.empty(layout.size)
    missing = [name for name in layout.blocks if name not in params]
    if missing:
        raise SchemaError(f"Missing parameter blocks: {missing}")
    for name, block in layout.blocks.items():
        values = np.atleast_1d(np.asarray(params[name], dtype=float))
        if values.size != block.size:
            raise SchemaError(f"Block '{name}' has length {values.size}, expected {block.size}")
        theta[block.slice] = values
    return ParameterVector(theta, layout)


def unpack(layout: ParameterLayout, theta: Union[ParameterVector, np.ndarray]) -> Dict[str, np.ndarray]:
    """
    ParameterVector (or raw full-length array) to structured parameters.
    """
    vector = theta if isinstance(theta, ParameterVector) else ParameterVector(theta, layout)
    return {name: vector.theta[block.slice].copy() for name, block in layout.blocks.items()}


@dataclass
class CovarianceB:
    """SD parameters (variance = sigma^2) and transformed correlation parameters, lower triangle row-wise."""
    sigmas: np.ndarray
    rhos: np.ndarray

    def __post_init__(self):
        self.sigmas = np.atleast_1d(np.asarray(self.sigmas, dtype=float))
        self.rhos = np.atleast_1d(np.asarray(self.rhos, dtype=float))
        q = self.sigmas.size
        if self.rhos.size != q * (q - 1) // 2:
            raise SchemaError(f"{q} random effects need {q * (q - 1) // 2} correlation parameters, got {self.rhos.size}")


def correlation_from_rho(rho):
    """(exp(rho) - 1) / (1 + exp(rho)), i.e. tanh(rho / 2)."""
    return np.tanh(np.asarray(rho, dtype=float) / 2.0)


def rho_from_correlation(corr):
    return 2.0 * np.arctanh(np.asarray(corr, dtype=float))


def build_B(cov: CovarianceB) -> Tuple[np.ndarray, bool]:
    """
    Random-effect covariance matrix and a positive-semidefiniteness flag.

    :param cov: SD and correlation parameters.
    :return: (B, pd_flag) where pd_flag is False when the smallest eigenvalue is below -1e-10.
    """
    q = cov.sigmas.size
    corr = np.eye(q)
    rows, cols = np.tril_indices(q, -1)  # row-major: (1,0), (2,0), (2,1), ...
    corr[rows, cols] = correlation_from_rho(cov.rhos)
    corr[cols, rows] = corr[rows, cols]
    B = np.outer(cov.sigmas, cov.sigmas) * corr
    np.fill_diagonal(B, cov.sigmas ** 2)
    pd_flag = bool(np.linalg.eigvalsh(B)[0] >= -PD_TOLERANCE) if q else True
    return B, pd_flag


def B_from_vector(theta: ParameterVector) -> Tuple[np.ndarray, bool]:
    return build_B(CovarianceB(theta.block('B.sigma'), theta.block('B.rho')))
