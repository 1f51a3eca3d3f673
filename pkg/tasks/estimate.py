# tasks/estimate.py

"""
Maximum-likelihood estimation.

A Marquardt-Levenberg ascent on the total log-likelihood with central
finite-difference gradients and Hessians, convergence declared on parameter
change, log-likelihood change and the relative distance to the maximum, and
standard errors from the inverse negative Hessian. Starting values come from a
staged initialization: marker submodels domain by domain, then jointly, then
the endpoint thresholds set from the observed event proportions.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.optimize import brentq
from scipy.special import ndtr, ndtri
from scipy.stats import chi2, norm

from tasks.likelihood import LikelihoodDiagnostics, LikelihoodEvaluator
from utils.designs import death_follow_up
from utils.exceptions import InitializationError, JointModelError, NumericalError, SchemaError
from utils.model_spec import ModelSpec
from utils.mvn import CdfConfig
from utils.parameters import ParameterLayout, ParameterVector
from utils.retry_handler import NonFiniteEvaluation, retry
from utils.subject import SubjectData, marker_values

logger = logging.getLogger(__name__)

ObjectiveMany = Callable[[Sequence[np.ndarray]], Sequence[float]]

CONDITION_WARNING = 1e10
EIGEN_TOLERANCE = 1e-10


@dataclass
class OptimizerConfig:
    param_tol: float = 1e-4
    ll_tol: float = 1e-4
    rdm_tol: float = 1e-3
    max_iter: int = 100
    fd_step: float = 1e-4
    marquardt_inflation: float = 10.0
    nu_init: float = 0.01
    nu_max: float = 1e12

    def __post_init__(self):
        for name in ('param_tol', 'll_tol', 'rdm_tol'):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.max_iter < 0:
            raise ValueError(f"max_iter must be >= 0, got {self.max_iter}")
        if not self.fd_step > 0:
            raise ValueError(f"fd_step must be > 0, got {self.fd_step}")
        if not self.marquardt_inflation > 1:
            raise ValueError(f"marquardt_inflation must be > 1, got {self.marquardt_inflation}")

    @classmethod
    def from_dict(cls, values: Optional[Dict[str, Any]]) -> "OptimizerConfig":
        values = values or {}
        known = {k: v for k, v in values.items() if k in cls.__dataclass_fields__}
        return cls(**{k: (int(v) if k == 'max_iter' else float(v)) for k, v in known.items()})


@dataclass
class IterationRecord:
    iteration: int
    loglik: float
    param_change: float
    ll_change: float
    rdm: float
    nu: float


@dataclass
class MarquardtResult:
    x: np.ndarray
    loglik: float
    gradient: np.ndarray
    hessian: np.ndarray
    converged: bool
    iterations: int
    rdm: float
    trace: List[IterationRecord] = field(default_factory=list)
    message: str = ''


@dataclass
class FitResult:
    theta: ParameterVector
    se: np.ndarray
    covariance: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    rdm: float
    trace: List[IterationRecord] = field(default_factory=list)
    diagnostics: LikelihoodDiagnostics = field(default_factory=LikelihoodDiagnostics)
    condition_number: float = np.nan
    message: str = ''

    @property
    def layout(self) -> ParameterLayout:
        return self.theta.layout

    @property
    def n_free(self) -> int:
        return self.layout.n_free

    @property
    def aic(self) -> float:
        return -2.0 * self.loglik + 2.0 * self.n_free

    def estimates_table(self) -> pd.DataFrame:
        """One row per parameter with estimate, SE, Wald z and two-sided p-value; fixed rows have NaN SE."""
        z = self.theta.theta / self.se
        return pd.DataFrame({
            'label': self.layout.labels,
            'estimate': self.theta.theta,
            'se': self.se,
            'z': z,
            'p': 2.0 * norm.sf(np.abs(z)),
            'fixed': self.layout.fixed_mask,
        })

    def free_covariance(self, labels: Sequence[str]) -> np.ndarray:
        free = self.layout.free_labels
        try:
            idx = [free.index(label) for label in labels]
        except ValueError:
            raise SchemaError(f"Wald tests need free parameters, got {list(labels)}")
        return self.covariance[np.ix_(idx, idx)]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'labels': list(self.layout.labels),
            'theta': self.theta.theta.tolist(),
            'se': [None if not np.isfinite(v) else float(v) for v in self.se],
            'covariance': np.where(np.isfinite(self.covariance), self.covariance, np.nan).tolist(),
            'loglik': float(self.loglik),
            'aic': float(self.aic),
            'converged': bool(self.converged),
            'iterations': int(self.iterations),
            'rdm': float(self.rdm) if np.isfinite(self.rdm) else None,
            'trace': [asdict(r) for r in self.trace],
        }


@dataclass
class WaldTest:
    statistic: float
    df: int
    p_value: float


def _steps(x: np.ndarray, step: float) -> np.ndarray:
    return step * np.maximum(np.abs(x), 1.0)


def _stencil(x: np.ndarray, h: np.ndarray, hessian: bool) -> List[np.ndarray]:
    n = x.size
    points = [x.copy()]
    for i in range(n):
        for sign in (1.0, -1.0):
            p = x.copy()
            p[i] += sign * h[i]
            points.append(p)
    if hessian:
        for i in range(n):
            for j in range(i):
                for si, sj in ((1, 1), (-1, -1), (1, -1), (-1, 1)):
                    p = x.copy()
                    p[i] += si * h[i]
                    p[j] += sj * h[j]
                    points.append(p)
    return points


@retry(max_attempts=5, backoff=0.5, step_arg='step')
def _fd_kernel(objective_many: ObjectiveMany, x: np.ndarray, hessian: bool, step: float):
    h = _steps(x, step)
    values = np.asarray(objective_many(_stencil(x, h, hessian)), dtype=float)
    if not np.all(np.isfinite(values)):
        raise NonFiniteEvaluation(f"{int(np.sum(~np.isfinite(values)))} non-finite evaluations at step {step:.3g}")
    n = x.size
    f0 = values[0]
    plus, minus = values[1:2 * n + 1:2], values[2:2 * n + 1:2]
    gradient = (plus - minus) / (2.0 * h)
    if not hessian:
        return f0, gradient, None
    H = np.diag((plus - 2.0 * f0 + minus) / h ** 2)
    k = 2 * n + 1
    for i in range(n):
        for j in range(i):
            pp, mm, pm, mp = values[k:k + 4]
            k += 4
            H[i, j] = H[j, i] = (pp + mm - pm - mp) / (4.0 * h[i] * h[j])
    return f0, gradient, 0.5 * (H + H.T)


def fd_derivatives(objective_many: ObjectiveMany, x, step: float = 1e-4,
                   hessian: bool = True) -> Tuple[float, np.ndarray, Optional[np.ndarray]]:
    """
    Objective, central-difference gradient and (optionally) Hessian from one batch of evaluations.

    Steps are ``step * max(|x_i|, 1)``; they are halved when an evaluation is not finite,
    and a NumericalError is raised after five failed attempts.

    :param objective_many: Callable evaluating the objective at a list of points.
    :param x: Point.
    :param step: Relative step.
    :return: (f(x), gradient, Hessian or None).
    """
    return _fd_kernel(objective_many, np.asarray(x, dtype=float), hessian, step=step)


def _batched(objective: Callable[[np.ndarray], float]) -> ObjectiveMany:
    return lambda points: [objective(p) for p in points]


def fd_gradient(objective: Callable[[np.ndarray], float], x, step: float = 1e-4) -> np.ndarray:
    return fd_derivatives(_batched(objective), x, step, hessian=False)[1]


def fd_hessian(objective: Callable[[np.ndarray], float], x, step: float = 1e-4) -> np.ndarray:
    """Symmetric central-difference Hessian."""
    return fd_derivatives(_batched(objective), x, step, hessian=True)[2]


def _damping(M: np.ndarray) -> np.ndarray:
    diag = np.abs(np.diag(M))
    scale = (1.0 - 0.01) * diag + 0.01 * np.sum(diag) / max(M.shape[0], 1)
    return np.where(scale > 0, scale, 1.0)


def relative_distance_to_maximum(gradient: np.ndarray, M: np.ndarray) -> float:
    """g' M^-1 g / n; infinite when M is not positive definite."""
    n = gradient.size
    if n == 0:
        return 0.0
    try:
        factor = linalg.cho_factor(M, lower=True)
    except linalg.LinAlgError:
        return np.inf
    return float(gradient @ linalg.cho_solve(factor, gradient)) / n


def marquardt(objective_many: ObjectiveMany, x0, cfg: Optional[OptimizerConfig] = None) -> MarquardtResult:
    """
    Maximize an objective with the Marquardt-Levenberg algorithm.

    :param objective_many: Callable evaluating the objective at a list of points.
    :param x0: Starting point.
    :param cfg: Optimizer settings.
    :return: MarquardtResult.
    :raises InitializationError: When the objective is not finite at ``x0``.
    """
    cfg = cfg or OptimizerConfig()
    x = np.asarray(x0, dtype=float).copy()
    n = x.size
    f = float(objective_many([x])[0])
    if not np.isfinite(f):
        raise InitializationError(f"Log-likelihood is not finite at the starting point ({f})")
    if cfg.max_iter == 0:
        return MarquardtResult(x=x, loglik=f, gradient=np.full(n, np.nan), hessian=np.full((n, n), np.nan),
                               converged=False, iterations=0, rdm=np.nan, message='max_iter is 0')

    f, g, H = fd_derivatives(objective_many, x, cfg.fd_step)
    nu = cfg.nu_init
    trace, converged, message = [], False, 'maximum number of iterations reached'
    rdm = relative_distance_to_maximum(g, -H)
    iteration = 0
    for iteration in range(1, cfg.max_iter + 1):
        M = -H
        damping = _damping(M)
        accepted = False
        while nu <= cfg.nu_max:
            try:
                factor = linalg.cho_factor(M + nu * np.diag(damping), lower=True)
            except linalg.LinAlgError:
                nu *= cfg.marquardt_inflation
                continue
            step = linalg.cho_solve(factor, g)
            f_new = float(objective_many([x + step])[0])
            if np.isfinite(f_new) and f_new >= f:
                accepted = True
                nu = max(nu / cfg.marquardt_inflation, 1e-12)
                break
            nu *= cfg.marquardt_inflation
        if not accepted:
            # only the rdm criterion can hold here: the step criteria are never met
            if rdm <= cfg.rdm_tol:
                message = "no further ascent (rdm criterion met, step criteria not met)"
            else:
                message = f"no ascent step found (damping exceeded {cfg.nu_max:.0e})"
            logger.warning(f"Iteration {iteration}: {message}")
            break

        param_change = float(np.max(np.abs(step))) if n else 0.0
        ll_change = abs(f_new - f)
        x = x + step
        f, g, H = fd_derivatives(objective_many, x, cfg.fd_step)
        rdm = relative_distance_to_maximum(g, -H)
        record = IterationRecord(iteration, f, param_change, ll_change, rdm, nu)
        trace.append(record)
        logger.info(f"Iteration {iteration}: loglik={f:.6f} |dtheta|={param_change:.2e} "
                    f"|dll|={ll_change:.2e} rdm={rdm:.2e} nu={nu:.1e}")
        if param_change <= cfg.param_tol and ll_change <= cfg.ll_tol and rdm <= cfg.rdm_tol:
            converged, message = True, 'converged'
            break

    return MarquardtResult(x=x, loglik=f, gradient=g, hessian=H, converged=converged,
                           iterations=len(trace), rdm=rdm, trace=trace, message=message)


def standard_errors(M: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Standard errors and covariance from the negative Hessian ``M``.

    When ``M`` is not positive definite the covariance is the pseudo-inverse on its positive
    eigenspace and the parameters loading on the remaining directions get NaN.

    :return: (se, covariance).
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    if n == 0:
        return np.zeros(0), np.zeros((0, 0))
    if not np.all(np.isfinite(M)):
        return np.full(n, np.nan), np.full((n, n), np.nan)
    eigenvalues, vectors = linalg.eigh(0.5 * (M + M.T))
    positive = eigenvalues > EIGEN_TOLERANCE * max(abs(eigenvalues[-1]), 1.0)
    cov = (vectors[:, positive] / eigenvalues[positive]) @ vectors[:, positive].T
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    if not np.all(positive):
        affected = np.any(np.abs(vectors[:, ~positive]) > 1e-8, axis=1)
        se[affected] = np.nan
        cov[affected, :] = np.nan
        cov[:, affected] = np.nan
        logger.warning(f"Negative Hessian is not positive definite; "
                       f"{int(affected.sum())} standard errors are undefined")
    return se, cov


def inverse_hessian(hessian: np.ndarray) -> np.ndarray:
    """Covariance estimate from the Hessian of the log-likelihood."""
    return standard_errors(-np.asarray(hessian, dtype=float))[1]


def wald_test(fit: FitResult, labels: Sequence[str], values: Optional[Sequence[float]] = None) -> WaldTest:
    """
    Multivariate Wald test of ``theta[labels] == values`` (zero by default).
    """
    labels = list(labels)
    estimate = np.array([fit.theta.get(label) for label in labels])
    target = np.zeros(len(labels)) if values is None else np.asarray(values, dtype=float)
    cov = fit.free_covariance(labels)
    if not np.all(np.isfinite(cov)):
        raise NumericalError(f"Covariance of {labels} is undefined")
    diff = estimate - target
    statistic = float(diff @ linalg.solve(cov, diff, assume_a='pos'))
    return WaldTest(statistic=statistic, df=len(labels), p_value=float(chi2.sf(statistic, len(labels))))


def marquardt_fit(evaluator: LikelihoodEvaluator, theta0: ParameterVector,
                  cfg: Optional[OptimizerConfig] = None) -> FitResult:
    """
    Fit the free parameters of ``theta0`` by maximum likelihood.

    :param evaluator: Likelihood evaluator of the dataset.
    :param theta0: Starting values; fixed entries stay at their constants.
    :param cfg: Optimizer settings.
    :return: FitResult with standard errors from the Hessian at the estimate.
    """
    cfg = cfg or OptimizerConfig()
    layout = theta0.layout

    def objective_many(points):
        return evaluator.total_many([theta0.with_free(p).theta for p in points])

    result = marquardt(objective_many, theta0.free, cfg)
    theta = theta0.with_free(result.x)
    se_full = np.full(layout.size, np.nan)
    n_free = layout.n_free
    if np.all(np.isfinite(result.hessian)):
        M = -result.hessian
        se, cov = standard_errors(M)
        eigenvalues = np.abs(linalg.eigvalsh(M)) if n_free else np.ones(1)
        condition = float(eigenvalues.max() / max(eigenvalues.min(), np.finfo(float).tiny))
        if condition > CONDITION_WARNING:
            logger.warning(f"Hessian condition number {condition:.2e}: some parameters are weakly identified")
    else:
        se, cov, condition = np.full(n_free, np.nan), np.full((n_free, n_free), np.nan), np.nan
    se_full[~layout.fixed_mask] = se

    if result.converged:
        logger.info(f"Converged after {result.iterations} iterations, loglik={result.loglik:.4f}")
    else:
        logger.warning(f"Not converged after {result.iterations} iterations: {result.message}")
    if evaluator.diagnostics.floored_differences or evaluator.diagnostics.non_psd_rejections:
        logger.info(f"Likelihood diagnostics: {evaluator.diagnostics.summary()}")
    return FitResult(theta=theta, se=se_full, covariance=cov, loglik=result.loglik, converged=result.converged,
                     iterations=result.iterations, rdm=result.rdm, trace=result.trace,
                     diagnostics=evaluator.diagnostics, condition_number=condition, message=result.message)


def _threshold_start(counts: Sequence[int], proportion: float, name: str) -> float:
    """
    Intercept zeta0 solving mean_i(1 - Phi(zeta0)^n_i) = proportion.
    """
    if proportion <= 0.0:
        logger.warning(f"No positive outcome for '{name}'; threshold intercept set to Phi^-1(0.999)")
        return float(ndtri(0.999))
    if proportion >= 1.0:
        logger.warning(f"Every subject is positive for '{name}'; threshold intercept set to Phi^-1(0.001)")
        return float(ndtri(0.001))
    counts = np.asarray(counts, dtype=float)

    def gap(z):
        return float(np.mean(1.0 - ndtr(z) ** counts)) - proportion

    return float(brentq(gap, -10.0, 10.0, xtol=1e-8))


def default_parameters(spec: ModelSpec, subjects: Sequence[SubjectData]) -> ParameterVector:
    """
    Neutral starting values: zero fixed effects and contributions, unit SDs, no correlation,
    links standardizing the observed markers, and threshold intercepts matching the
    observed proportions of positive outcomes.
    """
    layout = ParameterLayout(spec)
    values = {}
    observed = marker_values(subjects)
    for _, domain_name, marker in spec.markers:
        prefix = f"{domain_name}.{marker.name}"
        y = observed.get(marker.name, np.zeros(0))
        if marker.kind == 'linear':
            mean = float(np.mean(y)) if y.size else 0.0
            sd = float(np.std(y, ddof=1)) if y.size > 1 else 1.0
            eta = [mean, (sd if sd > 0 else 1.0) / np.sqrt(2.0)]
        else:
            n = marker.n_params
            eta = [-2.0 * np.sqrt(2.0)] + [np.sqrt(4.0 * np.sqrt(2.0) / (n - 1))] * (n - 1)
        for j, v in enumerate(eta):
            values[f"{prefix}.eta[{j}]"] = v
        values[f"{prefix}.sigma"] = 1.0
    for domain in spec.domains:
        if domain.brownian:
            values[f"{domain.name}.sigma_w"] = 0.5
    for label in layout.block('B.sigma').labels:
        values[label] = 1.0

    for process in spec.diagnoses:
        counts, positives = [], 0
        for subj in subjects:
            visits = subj.visits(process.name)
            if visits:
                counts.append(len(visits))
                positives += int(visits[-1].status == 1)
        proportion = positives / len(counts) if counts else 0.0
        values[f"{process.name}.zeta[intercept]"] = _threshold_start(counts or [1], proportion, process.name)
    if spec.death is not None:
        counts, events = [], 0
        for subj in subjects:
            follow_up = death_follow_up(spec, subj)
            counts.append(max(follow_up.last - follow_up.first + 1, 1))
            events += int(follow_up.is_event)
        proportion = events / len(counts) if counts else 0.0
        values[f"{spec.death.name}.zeta[intercept]"] = _threshold_start(counts or [1], proportion, spec.death.name)
    return ParameterVector.from_labels(layout, values, default=0.0)


def _marker_only(subjects: Sequence[SubjectData], domain_names: Sequence[str]) -> List[SubjectData]:
    keep = set(domain_names)
    return [SubjectData(id=s.id, covariates=dict(s.covariates),
                        marker_obs=[o for o in s.marker_obs if o.domain in keep], entry_time=s.entry_time)
            for s in subjects]


def _transfer(target: ParameterVector, source: ParameterVector) -> ParameterVector:
    shared = {label: value for label, value in source.by_label().items() if label in target.layout.labels}
    return target.updated(shared)


def _run_stage(name: str, spec: ModelSpec, subjects, start: ParameterVector, opt_cfg, cdf_cfg, threads):
    try:
        with LikelihoodEvaluator(spec, subjects, cdf_cfg, threads) as evaluator:
            fit = marquardt_fit(evaluator, _transfer(ParameterVector.from_labels(
                ParameterLayout(spec), {}, default=0.0), start), opt_cfg)
    except JointModelError as e:
        logger.warning(f"Initialization stage '{name}' failed ({e}); keeping the previous values")
        return None
    if not fit.converged:
        logger.warning(f"Initialization stage '{name}' did not converge; using its last iterate")
    return fit.theta


def staged_init(spec: ModelSpec, subjects: Sequence[SubjectData], opt_cfg: Optional[OptimizerConfig] = None,
                cdf_cfg: Optional[CdfConfig] = None, threads: int = 1) -> ParameterVector:
    """
    Starting values for the full model.

    Each domain's marker submodel is fitted alone, then all marker submodels jointly
    (estimating the cross-domain random-effect correlations), and the endpoint thresholds
    start from the observed proportions with zero contributions.

    :return: ParameterVector for ``spec``.
    """
    theta = default_parameters(spec, subjects)
    if len(spec.domains) > 1:
        for domain in spec.domains:
            sub = spec.subset([domain.name])
            fitted = _run_stage(f"markers[{domain.name}]", sub, _marker_only(subjects, [domain.name]),
                                theta, opt_cfg, cdf_cfg, threads)
            if fitted is not None:
                theta = _transfer(theta, fitted)
    if spec.endpoint_kind != 'none':
        sub = spec.subset(spec.domain_names)
        fitted = _run_stage('markers', sub, _marker_only(subjects, spec.domain_names), theta, opt_cfg, cdf_cfg, threads)
        if fitted is not None:
            theta = _transfer(theta, fitted)
    return theta


def fit_model(spec: ModelSpec, subjects: Sequence[SubjectData], theta0: Optional[ParameterVector] = None,
              opt_cfg: Optional[OptimizerConfig] = None, cdf_cfg: Optional[CdfConfig] = None,
              threads: int = 1) -> FitResult:
    """
    Staged initialization (unless ``theta0`` is given) followed by the full Marquardt fit.
    """
    if theta0 is None:
        theta0 = staged_init(spec, subjects, opt_cfg, cdf_cfg, threads)
    with LikelihoodEvaluator(spec, subjects, cdf_cfg, threads) as evaluator:
        return marquardt_fit(evaluator, theta0, opt_cfg)
