# tasks/likelihood.py

"""
Exact per-subject log-likelihood of the joint latent-process model.

For a subject the log-likelihood splits into the Gaussian density of the
transformed markers (with the Jacobian of the links), the probability of the
observed endpoint pattern given the markers, and, under delayed entry, minus the
log-probability of being at risk at entry. The endpoint term is a difference of
multivariate normal CDFs obtained by integrating the latent processes out in
closed form.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from links import LinkFactory, LinkParams
from utils.designs import DEATH, DIAG, DesignBundle, EndpointCoordinates, assemble_designs
from utils.exceptions import NumericalError
from utils.model_spec import ModelSpec
from utils.mvn import CdfConfig, GaussianCdfQuery, conditional_normal, mvn_cdf
from utils.parameters import B_from_vector, ParameterLayout, ParameterVector
from utils.subject import SubjectData

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-300
_LOG_2PI = np.log(2 * np.pi)


@dataclass
class LikelihoodDiagnostics:
    floored_differences: int = 0
    non_psd_rejections: int = 0
    offending_subject: Optional[str] = None

    def merge(self, other: "LikelihoodDiagnostics"):
        self.floored_differences += other.floored_differences
        self.non_psd_rejections += other.non_psd_rejections
        if other.offending_subject is not None:
            self.offending_subject = other.offending_subject

    def summary(self) -> str:
        return (f"floored CDF differences: {self.floored_differences}, "
                f"non-PSD rejections: {self.non_psd_rejections}")


@dataclass
class LikelihoodWorkspace:
    mu_HY: np.ndarray
    V_HY: np.ndarray
    log_jacobian: float
    marker_ll: float
    mu_Lambda: np.ndarray
    V_Lambda: np.ndarray
    prior_mu_Lambda: np.ndarray
    prior_V_Lambda: np.ndarray
    Gamma: np.ndarray
    zeta: np.ndarray
    coords: EndpointCoordinates


@dataclass
class SubjectLogLik:
    marginal_marker_ll: float
    endpoint_ll: float
    entry_correction: float

    @property
    def total(self) -> float:
        return self.marginal_marker_ll + self.endpoint_ll - self.entry_correction


@dataclass
class ThetaContext:
    """Quantities shared by every subject for one parameter value."""
    theta: ParameterVector
    beta: np.ndarray
    B: np.ndarray
    valid: bool
    link_params: List[LinkParams]
    sigma2: np.ndarray
    sigma_w2: np.ndarray
    origins: np.ndarray
    weights: Dict[str, np.ndarray] = field(default_factory=dict)


def prepare_theta(spec: ModelSpec, theta: ParameterVector) -> ThetaContext:
    """
    Unpack the parameter blocks used by every subject.

    :return: ThetaContext; ``valid`` is False when B is not positive semidefinite or a
             linear link scale is degenerate.
    """
    beta = np.concatenate([theta.block(f"{d.name}.beta") for d in spec.domains])
    B, pd_flag = B_from_vector(theta)
    link_params, sigma2, valid = [], [], pd_flag
    for _, domain_name, marker in spec.markers:
        params = LinkParams(theta.block(f"{domain_name}.{marker.name}.eta"))
        if marker.kind == 'linear' and not abs(params.eta[1]) > 1e-8:
            valid = False
        link_params.append(params)
        sigma2.append(theta.block(f"{domain_name}.{marker.name}.sigma")[0] ** 2)
    sigma_w2 = np.array([theta.block(f"{d.name}.sigma_w")[0] ** 2 if d.brownian else 0.0 for d in spec.domains])
    origins = np.array([spec.brownian_origin(d) for d in spec.domains])
    weights = {}
    for process in spec.diagnoses:
        weights[f"{process.name}.zeta"] = theta.block(f"{process.name}.zeta")
        for d in spec.domains:
            weights[(process.name, d.name)] = theta.block(f"{process.name}.gamma.{d.name}")
    if spec.death is not None:
        weights[f"{spec.death.name}.zeta"] = theta.block(f"{spec.death.name}.zeta")
        for d in spec.domains:
            weights[(spec.death.name, d.name)] = theta.block(f"{spec.death.name}.delta.{d.name}")
    return ThetaContext(theta=theta, beta=beta, B=B, valid=valid, link_params=link_params,
                        sigma2=np.array(sigma2), sigma_w2=sigma_w2, origins=origins, weights=weights)


def _brownian(times_a, dom_a, times_b, dom_b, ctx: ThetaContext) -> np.ndarray:
    if not np.any(ctx.sigma_w2 > 0) or times_a.size == 0 or times_b.size == 0:
        return np.zeros((times_a.size, times_b.size))
    shifted_a = times_a - ctx.origins[dom_a]
    shifted_b = times_b - ctx.origins[dom_b]
    same = dom_a[:, None] == dom_b[None, :]
    return same * ctx.sigma_w2[dom_a][:, None] * np.minimum(shifted_a[:, None], shifted_b[None, :])


def build_workspace(spec: ModelSpec, ctx: ThetaContext, design: DesignBundle, links,
                    diagnostics: Optional[LikelihoodDiagnostics] = None) -> Optional[LikelihoodWorkspace]:
    """
    Marker marginal moments, conditional latent moments at the endpoint coordinates,
    thresholds and contribution matrix for one subject.

    :return: The workspace, or None when a covariance is not positive definite.
    """
    diagnostics = diagnostics if diagnostics is not None else LikelihoodDiagnostics()
    n_obs = design.n_obs
    H = np.empty(n_obs)
    log_jac = 0.0
    for k in np.unique(design.obs_marker):
        rows = design.obs_marker == k
        values = design.obs_value[rows]
        H[rows] = links[k].transform(ctx.link_params[k], values)
        jac = links[k].jacobian(ctx.link_params[k], values)
        if np.any(jac <= 0):
            diagnostics.non_psd_rejections += 1
            return None
        log_jac += float(np.sum(np.log(jac)))

    mu_HY = design.X @ ctx.beta
    V_HY = (design.Z @ ctx.B @ design.Z.T
            + _brownian(design.obs_time, design.obs_domain, design.obs_time, design.obs_domain, ctx)
            + np.diag(ctx.sigma2[design.obs_marker]))
    marker_ll = 0.0
    if n_obs:
        try:
            factor = linalg.cho_factor(V_HY, lower=True, check_finite=False)
        except linalg.LinAlgError:
            diagnostics.non_psd_rejections += 1
            return None
        resid = H - mu_HY
        quad = float(resid @ linalg.cho_solve(factor, resid, check_finite=False))
        log_det = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
        marker_ll = -0.5 * (n_obs * _LOG_2PI + log_det + quad) + log_jac

    coords = design.coords
    n_e, D = coords.size, len(spec.domains)
    times_L = np.tile(coords.times, D)
    dom_L = np.repeat(np.arange(D), n_e)
    prior_mu = design.X_tilde @ ctx.beta
    prior_V = design.Z_tilde @ ctx.B @ design.Z_tilde.T + _brownian(times_L, dom_L, times_L, dom_L, ctx)
    if n_e and n_obs:
        cross = design.Z_tilde @ ctx.B @ design.Z.T + _brownian(times_L, dom_L, design.obs_time, design.obs_domain, ctx)
        joint_mean = np.concatenate([prior_mu, mu_HY])
        joint_cov = np.block([[prior_V, cross], [cross.T, V_HY]])
        observed = np.arange(prior_mu.size, prior_mu.size + n_obs)
        mu_L, V_L = conditional_normal(joint_mean, joint_cov, observed, H)
    else:
        mu_L, V_L = prior_mu.copy(), prior_V.copy()

    Gamma = np.zeros((n_e, D * n_e))
    zeta = np.zeros(n_e)
    for c in range(n_e):
        process = coords.processes[c]
        zeta[c] = coords.zeta_rows[c] @ ctx.weights[f"{process}.zeta"]
        for d, domain in enumerate(spec.domains):
            Gamma[c, d * n_e + c] = design.contrib_rows[(process, domain.name)] @ ctx.weights[(process, domain.name)]

    return LikelihoodWorkspace(mu_HY=mu_HY, V_HY=V_HY, log_jacobian=log_jac, marker_ll=marker_ll,
                               mu_Lambda=mu_L, V_Lambda=V_L, prior_mu_Lambda=prior_mu, prior_V_Lambda=prior_V,
                               Gamma=Gamma, zeta=zeta, coords=coords)


def orthant_probability(ws: LikelihoodWorkspace, idx: Sequence[int], cfg: Optional[CdfConfig] = None,
                        prior: bool = False) -> Tuple[float, float]:
    """
    Probability that every coordinate in ``idx`` is negative.

    :param prior: Use the prior latent moments instead of the marker-conditional ones.
    :return: (probability, CDF error estimate).
    """
    idx = np.asarray(idx, dtype=int)
    if idx.size == 0:
        return 1.0, 0.0
    mu = ws.prior_mu_Lambda if prior else ws.mu_Lambda
    V = ws.prior_V_Lambda if prior else ws.V_Lambda
    A = ws.Gamma[idx]
    upper = ws.zeta[idx] - A @ mu
    cov = np.eye(idx.size) + A @ V @ A.T
    cov = 0.5 * (cov + cov.T)
    return mvn_cdf(GaussianCdfQuery(upper=upper, mean=np.zeros(idx.size), cov=cov), cfg)


def pattern_probability(ws: LikelihoodWorkspace, negative_idx: Sequence[int], positive_idx: Sequence[int],
                        cfg: Optional[CdfConfig] = None) -> Tuple[float, float]:
    """
    P(coordinates in ``negative_idx`` negative and those in ``positive_idx`` positive) given
    the markers, by inclusion-exclusion over the positive set.

    With one positive coordinate this is Phi(negatives) - Phi(negatives and the positive one).

    :return: (probability, summed CDF error estimates).
    """
    negative_idx = list(negative_idx)
    positive_idx = list(positive_idx)
    value, err = 0.0, 0.0
    for size in range(len(positive_idx) + 1):
        for subset in combinations(positive_idx, size):
            p, e = orthant_probability(ws, negative_idx + list(subset), cfg)
            value += (-1) ** size * p
            err += e
    return value, err


def _endpoint_loglik(ws: LikelihoodWorkspace, kinds: Iterable[str], cfg: Optional[CdfConfig],
                     diagnostics: Optional[LikelihoodDiagnostics]) -> float:
    idx = ws.coords.select(set(kinds))
    if idx.size == 0:
        return 0.0
    positives = [c for c in ws.coords.positive_idx if c in idx]
    negatives = [c for c in idx if c not in positives]
    value, err = pattern_probability(ws, negatives, positives, cfg)
    if value < -max(2.0 * err, 1e-12):
        raise NumericalError(
            f"Negative endpoint probability {value:.3g} beyond twice the CDF error {err:.3g}; "
            f"tighten the CDF tolerance"
        )
    if value < PROBABILITY_FLOOR:
        if diagnostics is not None:
            diagnostics.floored_differences += 1
        value = PROBABILITY_FLOOR
    return float(np.log(value))


def diag_loglik(ws: LikelihoodWorkspace, cfg: Optional[CdfConfig] = None,
                diagnostics: Optional[LikelihoodDiagnostics] = None) -> float:
    """Log-probability of the observed diagnosis pattern given the markers."""
    return _endpoint_loglik(ws, {DIAG}, cfg, diagnostics)


def death_loglik(ws: LikelihoodWorkspace, cfg: Optional[CdfConfig] = None,
                 diagnostics: Optional[LikelihoodDiagnostics] = None) -> float:
    """Log-probability of the observed death-interval pattern given the markers."""
    return _endpoint_loglik(ws, {DEATH}, cfg, diagnostics)


def competing_loglik(ws: LikelihoodWorkspace, cfg: Optional[CdfConfig] = None,
                     diagnostics: Optional[LikelihoodDiagnostics] = None) -> float:
    """Joint log-probability of the stacked diagnosis and death coordinates given the markers."""
    return _endpoint_loglik(ws, {DIAG, DEATH}, cfg, diagnostics)


_ENDPOINT_LOGLIK = {'diag': diag_loglik, 'death': death_loglik, 'competing': competing_loglik}


def workspace_entry_correction(ws: LikelihoodWorkspace, cfg: Optional[CdfConfig] = None) -> float:
    """Log-probability of being at risk at entry, under the prior latent moments."""
    if ws.coords.entry_idx.size == 0:
        return 0.0
    value, _ = orthant_probability(ws, ws.coords.entry_idx, cfg, prior=True)
    return float(np.log(max(value, PROBABILITY_FLOOR)))


def subject_loglik(spec: ModelSpec, ctx: ThetaContext, design: DesignBundle, links,
                   cfg: Optional[CdfConfig] = None,
                   diagnostics: Optional[LikelihoodDiagnostics] = None) -> SubjectLogLik:
    """
    Log-likelihood contribution of one subject; all terms are -inf when the parameters
    are rejected.
    """
    if not ctx.valid:
        if diagnostics is not None:
            diagnostics.non_psd_rejections += 1
        return SubjectLogLik(-np.inf, 0.0, 0.0)
    ws = build_workspace(spec, ctx, design, links, diagnostics)
    if ws is None:
        return SubjectLogLik(-np.inf, 0.0, 0.0)
    endpoint = _ENDPOINT_LOGLIK.get(spec.endpoint_kind)
    endpoint_ll = endpoint(ws, cfg, diagnostics) if endpoint else 0.0
    correction = workspace_entry_correction(ws, cfg) if spec.delayed_entry else 0.0
    return SubjectLogLik(ws.marker_ll, endpoint_ll, correction)


def _links(spec: ModelSpec):
    return [LinkFactory.get_link(m.link, m.name) for _, _, m in spec.markers]


def _as_vector(spec: ModelSpec, theta) -> ParameterVector:
    if isinstance(theta, ParameterVector):
        return theta
    return ParameterVector(np.asarray(theta, dtype=float), ParameterLayout(spec))


def marker_marginal(spec: ModelSpec, theta, subj: SubjectData) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Marginal log-density of the transformed markers (with the link Jacobian) and the
    conditional moments of the latent values at the endpoint coordinates.

    :return: (marginal_marker_ll, mu_Lambda, V_Lambda); -inf and empty moments when rejected.
    """
    links = _links(spec)
    ctx = prepare_theta(spec, _as_vector(spec, theta))
    ws = build_workspace(spec, ctx, assemble_designs(spec, subj), links) if ctx.valid else None
    if ws is None:
        return -np.inf, np.zeros(0), np.zeros((0, 0))
    return ws.marker_ll, ws.mu_Lambda, ws.V_Lambda


def subject_workspace(spec: ModelSpec, theta, subj: SubjectData) -> Optional[LikelihoodWorkspace]:
    """Workspace of one subject, or None when the parameters are rejected."""
    links = _links(spec)
    ctx = prepare_theta(spec, _as_vector(spec, theta))
    if not ctx.valid:
        return None
    return build_workspace(spec, ctx, assemble_designs(spec, subj), links)


def entry_correction(spec: ModelSpec, theta, subj: SubjectData, cfg: Optional[CdfConfig] = None) -> float:
    """
    Log-probability of being at risk at entry: negative at the first diagnosis visit and,
    with a death process, alive through the intervals preceding the entry interval.
    Returns 0 when delayed entry is disabled.
    """
    if not spec.delayed_entry:
        return 0.0
    ws = subject_workspace(spec, theta, subj)
    if ws is None:
        return -np.inf
    return workspace_entry_correction(ws, cfg)


class LikelihoodEvaluator:
    """
    Evaluates the total log-likelihood of a dataset for many parameter values.

    Per-subject designs are assembled once. With ``threads > 1`` evaluations fan out to a
    process pool; per-subject values are always gathered in subject order and summed
    once, so the result does not depend on the worker count.
    """

    def __init__(self, spec: ModelSpec, subjects: Sequence[SubjectData], cdf_cfg: Optional[CdfConfig] = None,
                 threads: int = 1):
        """
        :param spec: Model specification with resolved links.
        :param subjects: Dataset.
        :param cdf_cfg: CDF settings, held fixed across evaluations; ``CdfConfig.estimation()`` by default.
        :param threads: Worker processes.
        """
        self.spec = spec
        self.subject_ids = [s.id for s in subjects]
        self.designs = [assemble_designs(spec, s) for s in subjects]
        self.layout = ParameterLayout(spec)
        self.links = _links(spec)
        self.cdf_cfg = cdf_cfg or CdfConfig.estimation()
        self.threads = max(1, int(threads))
        self.diagnostics = LikelihoodDiagnostics()
        self._executor = None

    @property
    def n_subjects(self) -> int:
        return len(self.designs)

    def _pool(self) -> Optional[ProcessPoolExecutor]:
        if self.threads <= 1:
            return None
        if self._executor is None:
            self._executor = ProcessPoolExecutor(
                max_workers=self.threads, initializer=_init_worker,
                initargs=(self.spec, self.designs, self.subject_ids, self.cdf_cfg),
            )
        return self._executor

    def close(self):
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()

    def per_subject(self, theta) -> np.ndarray:
        """Per-subject totals in subject order."""
        theta = _as_vector(self.spec, theta).theta
        pool = self._pool()
        if pool is None:
            values, diag = _evaluate_range(self.spec, self.designs, self.subject_ids, self.links, self.cdf_cfg,
                                           theta, 0, self.n_subjects)
        else:
            bounds = np.linspace(0, self.n_subjects, self.threads + 1).astype(int)
            futures = [pool.submit(_worker_range, theta, int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
            parts = [f.result() for f in futures]
            values = np.concatenate([p[0] for p in parts])
            diag = LikelihoodDiagnostics()
            for _, part_diag in parts:
                diag.merge(part_diag)
        self.diagnostics.merge(diag)
        return values

    def total(self, theta) -> float:
        """Total log-likelihood; -inf (with the offending subject recorded) when any subject is rejected."""
        values = self.per_subject(theta)
        return _sum_values(values, self.subject_ids, self.diagnostics)

    def total_many(self, thetas: Sequence) -> List[float]:
        """Totals for several parameter values, evaluated in parallel across values."""
        arrays = [_as_vector(self.spec, t).theta for t in thetas]
        pool = self._pool()
        if pool is None:
            return [self.total(t) for t in arrays]
        results = list(pool.map(_worker_total, arrays))
        for _, diag in results:
            self.diagnostics.merge(diag)
        return [value for value, _ in results]

    def subject_terms(self, theta) -> List[SubjectLogLik]:
        """Decomposed contributions of every subject (serial)."""
        ctx = prepare_theta(self.spec, _as_vector(self.spec, theta))
        return [subject_loglik(self.spec, ctx, d, self.links, self.cdf_cfg, self.diagnostics) for d in self.designs]


def _sum_values(values: np.ndarray, subject_ids: Sequence[str], diagnostics: LikelihoodDiagnostics) -> float:
    if not np.all(np.isfinite(values)):
        bad = int(np.nonzero(~np.isfinite(values))[0][0])
        diagnostics.offending_subject = subject_ids[bad]
        logger.debug(f"Log-likelihood rejected at subject '{subject_ids[bad]}'")
        return -np.inf
    return float(np.sum(values))


def _evaluate_range(spec, designs, subject_ids, links, cfg, theta_array, start, stop):
    diag = LikelihoodDiagnostics()
    ctx = prepare_theta(spec, _as_vector(spec, theta_array))
    values = np.empty(stop - start)
    for i in range(start, stop):
        try:
            values[i - start] = subject_loglik(spec, ctx, designs[i], links, cfg, diag).total
        except NumericalError as e:
            logger.error(f"Subject '{subject_ids[i]}': {e}")
            raise
    return values, diag


_WORKER = {}


def _init_worker(spec, designs, subject_ids, cfg):
    _WORKER.update(spec=spec, designs=designs, subject_ids=subject_ids, cfg=cfg, links=_links(spec))


def _worker_range(theta_array, start, stop):
    return _evaluate_range(_WORKER['spec'], _WORKER['designs'], _WORKER['subject_ids'], _WORKER['links'],
                           _WORKER['cfg'], theta_array, start, stop)


def _worker_total(theta_array):
    values, diag = _evaluate_range(_WORKER['spec'], _WORKER['designs'], _WORKER['subject_ids'], _WORKER['links'],
                                   _WORKER['cfg'], theta_array, 0, len(_WORKER['designs']))
    return _sum_values(values, _WORKER['subject_ids'], diag), diag


def total_loglik(spec: ModelSpec, theta, data: Sequence[SubjectData], cfg: Optional[CdfConfig] = None,
                 threads: int = 1) -> float:
    """
    Sum of the subject contributions, accumulated in subject order.

    :return: Total log-likelihood, -inf when a subject rejects the parameters.
    """
    with LikelihoodEvaluator(spec, data, cfg, threads) as evaluator:
        return evaluator.total(theta)
