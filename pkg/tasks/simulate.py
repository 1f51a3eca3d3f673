# tasks/simulate.py

"""
Dataset generator for simulation studies.

Subjects enter at a normally distributed age and are seen at visits every
``spacing`` years (jittered) up to ``horizon`` years with a per-visit dropout.
Latent domains follow their mixed models; markers are the inverse links of the
latent values plus Gaussian noise; endpoints are positive when the degradation
process plus noise crosses its threshold. Longitudinal records stop at the
first positive diagnosis and at death.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import yaml

from links import LinkFactory, LinkParams
from links.ispline_link import ISplineLink
from utils.designs import threshold_row
from utils.exceptions import NumericalError, SchemaError
from utils.model_spec import ModelSpec, evaluate_term
from utils.parameters import B_from_vector, ParameterLayout, ParameterVector
from utils.subject import CENSORED, EVENT, DiagVisit, EventRecord, MarkerObservation, SubjectData
from utils.validation import validate_document

logger = logging.getLogger(__name__)

DESIGN_SCHEMA = 'config/schemas/design_schema.yaml'
ERROR_DISTRIBUTIONS = ('gaussian', 'logistic')
LOGISTIC_SCALE = np.sqrt(3.0) / np.pi
MAX_REDRAWS = 1000


@dataclass
class SimDesign:
    """
    Generating design of a simulation scenario.

    ``covariates`` maps a covariate name to a Bernoulli probability, or to a
    ``{'mean': m, 'sd': s}`` mapping for a normal covariate.
    """
    spec: ModelSpec
    theta: ParameterVector
    n_subjects: int = 500
    entry_mean: float = 75.0
    entry_sd: float = 3.0
    spacing: float = 2.5
    horizon: float = 20.0
    jitter: float = 1.0
    dropout: float = 0.15
    covariates: Dict[str, Any] = field(default_factory=lambda: {'EL': 0.5})
    error_dist: str = 'gaussian'
    truncate_at_entry: bool = False
    seed: int = 20240601
    name: str = 'scenario'

    def __post_init__(self):
        if self.n_subjects < 1:
            raise SchemaError(f"n_subjects must be positive, got {self.n_subjects}")
        if not 0.0 <= self.dropout <= 1.0:
            raise SchemaError(f"dropout must be a probability, got {self.dropout}")
        if not self.spacing > 0 or not self.horizon >= 0:
            raise SchemaError("visit spacing must be positive and the horizon non-negative")
        if not 0.0 <= self.jitter < self.spacing / 2:
            raise SchemaError(f"visit jitter must lie in [0, spacing/2), got {self.jitter}")
        if self.error_dist not in ERROR_DISTRIBUTIONS:
            raise SchemaError(f"error_dist must be one of {ERROR_DISTRIBUTIONS}, got '{self.error_dist}'")
        for name, dist in self.covariates.items():
            if isinstance(dist, dict):
                if 'mean' not in dist or float(dist.get('sd', -1)) < 0:
                    raise SchemaError(f"Normal covariate '{name}' needs a mean and a non-negative sd")
            elif not 0.0 <= float(dist) <= 1.0:
                raise SchemaError(f"Bernoulli probability of covariate '{name}' must lie in [0, 1]")
        missing = set(self.spec.covariates) - set(self.covariates)
        if missing:
            raise SchemaError(f"No generating distribution for covariates {sorted(missing)}")
        if self.theta.layout.labels != ParameterLayout(self.spec).labels:
            raise SchemaError("Generating parameters do not match the model layout")
        for _, _, marker in self.spec.markers:
            if marker.kind == 'ispline' and (not marker.knots or marker.boundary is None):
                raise SchemaError(f"Marker '{marker.name}' needs declared knots and boundary to be simulated")

    @property
    def endpoint_kind(self) -> str:
        return self.spec.endpoint_kind

    def with_seed(self, seed: int) -> "SimDesign":
        return replace(self, seed=int(seed))

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "SimDesign":
        """
        Build a design from a scenario document with ``model``, ``design`` and ``theta`` sections.
        """
        validate_document(doc, DESIGN_SCHEMA, what='scenario')
        spec = ModelSpec.from_dict(doc['model'])
        theta = ParameterVector.from_labels(ParameterLayout(spec), doc['theta'], default=0.0)
        design = doc.get('design', {}) or {}
        entry = design.get('entry', {}) or {}
        visits = design.get('visits', {}) or {}
        return cls(
            spec=spec, theta=theta, n_subjects=int(design.get('n_subjects', 500)),
            entry_mean=float(entry.get('mean', 75.0)), entry_sd=float(entry.get('sd', 3.0)),
            spacing=float(visits.get('spacing', 2.5)), horizon=float(visits.get('horizon', 20.0)),
            jitter=float(visits.get('jitter', 1.0)), dropout=float(design.get('dropout', 0.15)),
            covariates=dict(design.get('covariates', {'EL': 0.5})),
            error_dist=str(design.get('error_dist', 'gaussian')),
            truncate_at_entry=bool(design.get('truncate_at_entry', False)),
            seed=int(design.get('seed', 20240601)), name=str(doc.get('name', spec.name)),
        )

    @classmethod
    def load(cls, path: str) -> "SimDesign":
        try:
            with open(path, 'r', encoding='utf-8') as f:
                doc = yaml.safe_load(f)
        except FileNotFoundError:
            logger.error(f"Scenario file '{path}' not found.")
            raise SchemaError(f"Scenario file '{path}' not found")
        except yaml.YAMLError as ye:
            logger.error(f"YAML parsing error in '{path}': {ye}")
            raise SchemaError(f"YAML parsing error in '{path}': {ye}")
        if not isinstance(doc, dict):
            raise SchemaError(f"Scenario file '{path}' is not a mapping")
        try:
            return cls.from_dict(doc)
        except SchemaError as e:
            raise SchemaError(f"{path}: {e}") from e


@dataclass
class SimulationSummary:
    n_subjects: int = 0
    n_visits: int = 0
    n_diagnosed: int = 0
    n_events: int = 0
    n_clamped: int = 0
    n_redrawn: int = 0

    @property
    def visits_per_subject(self) -> float:
        return self.n_visits / self.n_subjects if self.n_subjects else 0.0

    def describe(self) -> str:
        return (f"{self.n_subjects} subjects, {self.visits_per_subject:.2f} visits/subject, "
                f"{self.n_diagnosed} diagnosed, {self.n_events} events, {self.n_clamped} clamped marker values, "
                f"{self.n_redrawn} subjects redrawn at entry")


class DatasetGenerator:
    """
    Draws datasets from a SimDesign. Draws are deterministic given ``design.seed``.
    """

    def __init__(self, design: SimDesign):
        self.design = design
        self.spec = design.spec
        self.theta = design.theta
        self.B, pd_flag = B_from_vector(design.theta)
        if not pd_flag:
            raise SchemaError("Generating random-effect covariance is not positive semidefinite")
        self.links = [LinkFactory.get_link(m.link, m.name) for _, _, m in self.spec.markers]
        self.summary = SimulationSummary()
        self._random_slices = []
        offset = 0
        for domain in self.spec.domains:
            self._random_slices.append(slice(offset, offset + len(domain.random)))
            offset += len(domain.random)

    def _draw_covariates(self, rng: np.random.Generator) -> Dict[str, float]:
        values = {}
        for name, dist in self.design.covariates.items():
            if isinstance(dist, dict):
                values[name] = float(rng.normal(float(dist['mean']), float(dist.get('sd', 0.0))))
            else:
                values[name] = float(rng.random() < float(dist))
        return values

    def _visit_times(self, entry: float, rng: np.random.Generator) -> np.ndarray:
        d = self.design
        nominal = entry + d.spacing * np.arange(0, int(np.floor(d.horizon / d.spacing + 1e-9)) + 1)
        jitter = rng.uniform(-d.jitter, d.jitter, nominal.size)
        jitter[0] = 0.0
        times = nominal + jitter
        kept = 1
        while kept < times.size and rng.random() >= d.dropout:
            kept += 1
        return times[:kept]

    def _noise(self, rng: np.random.Generator, size=None):
        if self.design.error_dist == 'logistic':
            return rng.logistic(0.0, LOGISTIC_SCALE, size)
        return rng.standard_normal(size)

    def _latent(self, times_years: np.ndarray, covariates: Dict[str, float], b: np.ndarray,
                rng: np.random.Generator) -> np.ndarray:
        """Latent values, one row per domain, at the given times."""
        t = self.spec.time.to_model(times_years)
        out = np.zeros((len(self.spec.domains), t.size))
        for d, domain in enumerate(self.spec.domains):
            fixed = np.column_stack([evaluate_term(term, t, covariates) for term in domain.fixed_terms])
            random = np.column_stack([evaluate_term(term, t, covariates) for term in domain.random])
            out[d] = fixed @ self.theta.block(f"{domain.name}.beta") + random @ b[self._random_slices[d]]
            if domain.brownian:
                out[d] += self._brownian(t, self.spec.brownian_origin(domain),
                                         self.theta.block(f"{domain.name}.sigma_w")[0], rng)
        return out

    @staticmethod
    def _brownian(t: np.ndarray, origin: float, sigma_w: float, rng: np.random.Generator) -> np.ndarray:
        shifted = t - origin
        if np.any(shifted < 0):
            raise SchemaError("Simulated time precedes the Brownian origin")
        order = np.argsort(shifted)
        increments = np.diff(np.concatenate([[0.0], shifted[order]]))
        path = np.cumsum(rng.standard_normal(t.size) * sigma_w * np.sqrt(increments))
        values = np.empty(t.size)
        values[order] = path
        return values

    def _degradation(self, endpoint, weight: str, lam: np.ndarray, covariates: Dict[str, float]) -> np.ndarray:
        delta = np.zeros(lam.shape[1])
        for d, domain in enumerate(self.spec.domains):
            terms = self.spec.contribution_terms(endpoint, domain.name)
            row = np.array([evaluate_term(term, 0.0, covariates)[0] for term in terms])
            delta += (row @ self.theta.block(f"{endpoint.name}.{weight}.{domain.name}")) * lam[d]
        return delta

    def _thresholds(self, endpoint, times_years: np.ndarray, subj: SubjectData, spline=None) -> np.ndarray:
        zeta = self.theta.block(f"{endpoint.name}.zeta")
        rows = [threshold_row(endpoint.threshold, float(self.spec.time.to_model(t)), subj,
                              None if spline is None else spline[k])
                for k, t in enumerate(times_years)]
        return np.array([row @ zeta for row in rows])

    def _markers(self, visits: np.ndarray, lam: np.ndarray, rng: np.random.Generator) -> List[MarkerObservation]:
        observations = []
        for k, (d, domain_name, marker) in enumerate(self.spec.markers):
            params = LinkParams(self.theta.block(f"{domain_name}.{marker.name}.eta"))
            sigma = self.theta.block(f"{domain_name}.{marker.name}.sigma")[0]
            latent = lam[d] + sigma * rng.standard_normal(visits.size)
            link = self.links[k]
            if isinstance(link, ISplineLink):
                lo, hi = link.transformed_range(params)
                clipped = np.clip(latent, lo, hi)
                self.summary.n_clamped += int(np.sum(clipped != latent))
                values = np.atleast_1d(link.inverse(params, clipped))
            else:
                values = np.atleast_1d(link.inverse(params, latent))
                if marker.boundary is not None:
                    clipped = np.clip(values, *marker.boundary)
                    self.summary.n_clamped += int(np.sum(clipped != values))
                    values = clipped
            observations.extend(MarkerObservation(domain_name, marker.name, float(t), float(v))
                                for t, v in zip(visits, values))
        return observations

    def _death_time(self, entry: float, lam_mid: np.ndarray, subj: SubjectData,
                    rng: np.random.Generator) -> Tuple[Optional[float], bool]:
        """
        (event time or None, at_risk_at_entry) from the discretized death process.
        """
        death = self.spec.death
        bounds = np.asarray(death.intervals, dtype=float)
        s0 = death.interval_of(entry)
        spline = death.spline_rows(death.midpoints, self.spec.time)
        degradation = self._degradation(death, 'delta', lam_mid, subj.covariates)
        threshold = self._thresholds(death, death.midpoints, subj, spline)
        positive = degradation + self._noise(rng, degradation.size) >= threshold
        at_risk = not np.any(positive[:s0])
        after = np.nonzero(positive[s0:])[0]
        if after.size == 0:
            return None, at_risk
        s = s0 + int(after[0])
        return float(rng.uniform(max(bounds[s], entry), bounds[s + 1])), at_risk

    def _subject(self, index: int, rng: np.random.Generator) -> Optional[SubjectData]:
        spec = self.spec
        subj = SubjectData(id=f"S{index + 1:05d}", covariates=self._draw_covariates(rng))
        entry = float(rng.normal(self.design.entry_mean, self.design.entry_sd))
        if spec.death is not None and not spec.death.intervals[0] <= entry < spec.death.intervals[-1]:
            return None
        visits = self._visit_times(entry, rng)
        last_scheduled = float(visits[-1])
        b = rng.multivariate_normal(np.zeros(self.B.shape[0]), self.B, method='eigh')

        death_time, at_risk = None, True
        if spec.death is not None:
            midpoints = spec.death.midpoints
            lam_all = self._latent(np.concatenate([visits, midpoints]), subj.covariates, b, rng)
            lam_visits, lam_mid = lam_all[:, :visits.size], lam_all[:, visits.size:]
            death_time, at_risk = self._death_time(entry, lam_mid, subj, rng)
            if death_time is not None:
                alive = visits <= death_time
                visits, lam_visits = visits[alive], lam_visits[:, alive]
        else:
            lam_visits = self._latent(visits, subj.covariates, b, rng)

        n_kept = visits.size
        diagnosed = False
        diag_visits = []
        for process in spec.diagnoses:
            degradation = self._degradation(process, 'gamma', lam_visits, subj.covariates)
            threshold = self._thresholds(process, visits, subj)
            positive = degradation + self._noise(rng, visits.size) >= threshold
            first = np.nonzero(positive)[0]
            if first.size:
                n_kept = min(n_kept, int(first[0]) + 1)
            diag_visits.append((process.name, positive))
        if self.design.truncate_at_entry:
            if not at_risk or any(positive[0] for _, positive in diag_visits):
                return None
        visits, lam_visits = visits[:n_kept], lam_visits[:, :n_kept]
        for name, positive in diag_visits:
            statuses = positive[:n_kept].astype(int)
            subj.diag_visits.extend(DiagVisit(float(t), int(s), name) for t, s in zip(visits, statuses))
            diagnosed = diagnosed or bool(statuses.any())
        subj.marker_obs = self._markers(visits, lam_visits, rng)
        subj.entry_time = entry

        if spec.death is not None:
            end = last_scheduled if not spec.diagnoses else min(entry + self.design.horizon, spec.death.intervals[-1])
            if death_time is not None and death_time <= end:
                subj.event_record = EventRecord(entry, death_time, EVENT)
                self.summary.n_events += 1
            else:
                subj.event_record = EventRecord(entry, end, CENSORED)
        self.summary.n_visits += int(visits.size)
        self.summary.n_diagnosed += int(diagnosed)
        return subj

    def generate(self) -> List[SubjectData]:
        """
        Draw ``n_subjects`` subjects.

        :return: Subjects in id order.
        :raises NumericalError: When too many subjects have to be redrawn.
        """
        rng = np.random.Generator(np.random.Philox(self.design.seed))
        self.summary = SimulationSummary()
        subjects = []
        attempts = 0
        while len(subjects) < self.design.n_subjects:
            attempts += 1
            if attempts > MAX_REDRAWS * self.design.n_subjects:
                raise NumericalError(f"Could not draw {self.design.n_subjects} subjects at risk at entry")
            subj = self._subject(len(subjects), rng)
            if subj is None:
                self.summary.n_redrawn += 1
                continue
            subjects.append(subj)
        self.summary.n_subjects = len(subjects)
        logger.info(f"Generated dataset '{self.design.name}' (seed {self.design.seed}): {self.summary.describe()}")
        return subjects


def generate_dataset(design: SimDesign) -> List[SubjectData]:
    """
    Draw a dataset from ``design``; identical designs and seeds give identical datasets.
    """
    return DatasetGenerator(design).generate()
