# tasks/predict.py

"""
Predicted degradation trajectories of a fitted model.

For a covariate profile the expected degradation of an endpoint process is
recentered on its threshold, so that 0 marks the level above which the
endpoint becomes positive. Confidence bands come from Monte Carlo draws of the
free parameters around the estimate.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from utils.designs import threshold_row
from utils.exceptions import SchemaError
from utils.model_spec import ModelSpec, evaluate_term
from utils.parameters import ParameterVector
from utils.subject import SubjectData

logger = logging.getLogger(__name__)


@dataclass
class PredictRequest:
    spec: ModelSpec
    theta: ParameterVector
    covariance: Optional[np.ndarray]
    profile: Dict[str, float] = field(default_factory=dict)
    time_grid: Sequence[float] = ()
    mc_draws: int = 2000
    band_level: float = 0.95
    seed: int = 20240601
    process: Optional[str] = None
    time_support: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        self.time_grid = np.asarray(self.time_grid, dtype=float)
        if self.time_grid.size == 0:
            raise SchemaError("The prediction grid is empty")
        if np.any(np.diff(self.time_grid) <= 0):
            raise SchemaError("The prediction grid must be strictly ascending")
        if self.time_support is not None:
            lo, hi = self.time_support
            if self.time_grid[0] < lo or self.time_grid[-1] > hi:
                raise SchemaError(f"Prediction grid [{self.time_grid[0]}, {self.time_grid[-1]}] "
                                  f"leaves the observed time range [{lo}, {hi}]")
        if self.mc_draws < 1:
            raise SchemaError(f"mc_draws must be positive, got {self.mc_draws}")
        if not 0.0 < self.band_level < 1.0:
            raise SchemaError(f"band_level must lie in (0, 1), got {self.band_level}")
        n_free = self.theta.layout.n_free
        if self.covariance is not None:
            self.covariance = np.asarray(self.covariance, dtype=float)
            if self.covariance.shape != (n_free, n_free):
                raise SchemaError(f"Covariance has shape {self.covariance.shape}, expected ({n_free}, {n_free})")
        missing = set(self.spec.covariates) - set(self.profile)
        if missing:
            raise SchemaError(f"Profile lacks covariates {sorted(missing)}")
        if self.process is None:
            endpoints = self._endpoints()
            if not endpoints:
                raise SchemaError("The model has no endpoint process to predict")
            self.process = endpoints[0].name

    def _endpoints(self):
        return list(self.spec.diagnoses) + ([self.spec.death] if self.spec.death is not None else [])

    @property
    def endpoint(self):
        for endpoint in self._endpoints():
            if endpoint.name == self.process:
                return endpoint
        raise SchemaError(f"Unknown endpoint process '{self.process}'")


def degradation_curve(spec: ModelSpec, theta: ParameterVector, endpoint, profile: Dict[str, float],
                      times_years: np.ndarray) -> np.ndarray:
    """
    Expected degradation minus threshold at each time for one covariate profile.
    """
    weight = 'delta' if endpoint is spec.death else 'gamma'
    t = spec.time.to_model(times_years)
    curve = np.zeros(t.size)
    for domain in spec.domains:
        fixed = np.column_stack([evaluate_term(term, t, profile) for term in domain.fixed_terms])
        mean = fixed @ theta.block(f"{domain.name}.beta")
        terms = spec.contribution_terms(endpoint, domain.name)
        w = np.array([evaluate_term(term, 0.0, profile)[0] for term in terms])
        curve += float(w @ theta.block(f"{endpoint.name}.{weight}.{domain.name}")) * mean

    subj = SubjectData(id='profile', covariates=dict(profile))
    spline = spec.death.spline_rows(times_years, spec.time) if weight == 'delta' else None
    zeta = theta.block(f"{endpoint.name}.zeta")
    for k, tk in enumerate(t):
        row = threshold_row(endpoint.threshold, float(tk), subj, None if spline is None else spline[k])
        curve[k] -= row @ zeta
    return curve


def _draws(req: PredictRequest) -> np.ndarray:
    """Free-parameter draws; the estimate is the first one."""
    estimate = req.theta.free
    draws = np.empty((req.mc_draws, estimate.size))
    draws[0] = estimate
    if req.mc_draws > 1:
        rng = np.random.Generator(np.random.Philox(req.seed))
        draws[1:] = rng.multivariate_normal(estimate, req.covariance, size=req.mc_draws - 1, method='eigh')
    return draws


def predict_trajectory(req: PredictRequest) -> pd.DataFrame:
    """
    Recentered degradation on ``req.time_grid`` with a Monte Carlo confidence band.

    :param req: Prediction request.
    :return: DataFrame with columns time, estimate, lower, upper. The band is NaN
        when the covariance of the estimates is unavailable.
    """
    endpoint = req.endpoint
    grid = req.time_grid
    estimate = degradation_curve(req.spec, req.theta, endpoint, req.profile, grid)
    lower = upper = np.full(grid.size, np.nan)

    cov = req.covariance
    if cov is None or not np.all(np.isfinite(cov)):
        logger.warning("No usable covariance of the estimates; confidence bands omitted")
    else:
        curves = np.vstack([degradation_curve(req.spec, req.theta.with_free(x), endpoint, req.profile, grid)
                            for x in _draws(req)])
        alpha = 1.0 - req.band_level
        lower, upper = np.quantile(curves, [alpha / 2.0, 1.0 - alpha / 2.0], axis=0)
        logger.info(f"Prediction of '{endpoint.name}' over {grid.size} times with {req.mc_draws} draws")
    return pd.DataFrame({'time': grid, 'estimate': estimate, 'lower': lower, 'upper': upper})
