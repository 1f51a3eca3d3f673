# utils/designs.py

"""
Per-subject design assembly.

Everything that does not depend on the parameter values is computed once per
subject: marker design matrices, the endpoint coordinates (diagnosis visits and
death intervals) with their observed pattern, threshold and contribution rows,
and the latent-process design at the endpoint coordinates.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.linalg import block_diag

from utils.exceptions import SchemaError
from utils.model_spec import ModelSpec, evaluate_term
from utils.subject import SubjectData

logger = logging.getLogger(__name__)

DIAG = 'diag'
DEATH = 'death'


@dataclass
class EndpointCoordinates:
    """
    Endpoint coordinates of one subject.

    ``pattern_idx`` lists the coordinates of the observed outcome pattern, of which
    ``positive_idx`` are positive; ``entry_idx`` lists the coordinates entering the
    delayed-entry correction (they may include pre-entry death intervals that are not
    part of the pattern).
    """
    kinds: List[str] = field(default_factory=list)
    processes: List[str] = field(default_factory=list)
    times_years: np.ndarray = field(default_factory=lambda: np.zeros(0))
    times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    zeta_rows: List[np.ndarray] = field(default_factory=list)
    pattern_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    positive_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    entry_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def size(self) -> int:
        return len(self.kinds)

    def select(self, kinds) -> np.ndarray:
        """Indices of pattern coordinates whose kind is in ``kinds``."""
        return np.array([c for c in self.pattern_idx if self.kinds[c] in kinds], dtype=int)


@dataclass
class DeathFollowUp:
    """Death intervals (0-based) followed for one subject after the censoring rules."""
    first: int
    last: int
    is_event: bool


@dataclass
class DesignBundle:
    subject_id: str
    X: np.ndarray
    Z: np.ndarray
    obs_domain: np.ndarray
    obs_marker: np.ndarray
    obs_time: np.ndarray
    obs_value: np.ndarray
    X_tilde: np.ndarray
    Z_tilde: np.ndarray
    coords: EndpointCoordinates
    contrib_rows: Dict[Tuple[str, str], np.ndarray]
    death_follow_up: Optional[DeathFollowUp] = None

    @property
    def n_obs(self) -> int:
        return self.obs_value.size


def _domain_rows(terms: List[str], times: np.ndarray, covariates: Dict[str, float], subject_id: str) -> np.ndarray:
    try:
        columns = [evaluate_term(term, times, covariates) for term in terms]
    except SchemaError as e:
        logger.error(f"Subject '{subject_id}': {e}")
        raise SchemaError(f"Subject '{subject_id}': {e}") from e
    return np.column_stack(columns) if times.size else np.zeros((0, len(terms)))


def _latent_design(spec: ModelSpec, subj: SubjectData, times: np.ndarray, domain_of_row: Optional[np.ndarray]):
    """
    Block-diagonal fixed and random designs.

    When ``domain_of_row`` is None every domain gets one row per time (domain-major),
    otherwise each row belongs to the given domain.
    """
    fixed_blocks, random_blocks = [], []
    for d, domain in enumerate(spec.domains):
        t = times if domain_of_row is None else times[domain_of_row == d]
        fixed_blocks.append(_domain_rows(domain.fixed_terms, t, subj.covariates, subj.id))
        random_blocks.append(_domain_rows(domain.random, t, subj.covariates, subj.id))
    return block_diag(*fixed_blocks), block_diag(*random_blocks)


def threshold_row(terms: List[str], time: float, subj: SubjectData, prefix: np.ndarray = None) -> np.ndarray:
    """Threshold design row at one model time: intercept, optional spline columns, then terms."""
    values = [np.array([1.0])]
    if prefix is not None:
        values.append(np.atleast_1d(prefix))
    values.extend(_domain_rows([t], np.array([time]), subj.covariates, subj.id)[0] for t in terms)
    return np.concatenate(values)


def death_follow_up(spec: ModelSpec, subj: SubjectData) -> Optional[DeathFollowUp]:
    """
    Death intervals followed for a subject: from the interval containing entry to the
    event interval, or to the interval preceding the one holding the censoring time.
    In competing models death only counts within the window after the last negative
    diagnosis and is censored at the diagnosis for diagnosed subjects.
    """
    death = spec.death
    if death is None:
        return None
    record = subj.event_record
    if record is None:
        raise SchemaError(f"Subject '{subj.id}' has no event record but the model has a death process")
    first = death.interval_of(subj.entry_time)
    terminal, is_event = float(record.terminal_time), record.is_event

    if spec.endpoint_kind == 'competing':
        competing = spec.competing
        window = np.inf if competing.window is None else competing.window
        diagnosed_at = subj.first_positive_time()
        visit_times = [v.time for v in subj.diag_visits]
        if diagnosed_at is not None:
            terminal, is_event = min(terminal, diagnosed_at), False
        else:
            if visit_times:
                reference = last_visit = max(visit_times)
            else:
                reference = subj.entry_time if competing.window_origin == 'entry' else None
                last_visit = subj.entry_time
            limit = -np.inf if reference is None else reference + window
            if terminal > limit:
                terminal, is_event = last_visit, False

    terminal_interval = death.interval_of(terminal)
    last = terminal_interval if is_event else terminal_interval - 1
    return DeathFollowUp(first=first, last=last, is_event=is_event)


def assemble_designs(spec: ModelSpec, subj: SubjectData) -> DesignBundle:
    """
    Assemble the design matrices and endpoint structure of one subject.

    Marker rows are ordered domain-major, then marker-major (spec order), then by time.
    Latent values at endpoint coordinates are ordered domain-major: row d * n_e + c
    holds domain d at coordinate c.

    :param spec: Model specification with resolved links.
    :param subj: Subject data.
    :return: DesignBundle.
    """
    subj.validate()
    marker_index = {(dn, m.name): k for k, (_, dn, m) in enumerate(spec.markers)}
    domain_index = {name: d for d, name in enumerate(spec.domain_names)}

    rows = []
    for obs in subj.marker_obs:
        key = (obs.domain, obs.marker)
        if key not in marker_index:
            raise SchemaError(f"Subject '{subj.id}': unknown marker '{obs.marker}' in domain '{obs.domain}'")
        rows.append((marker_index[key], obs.time, obs.value, domain_index[obs.domain]))
    rows.sort(key=lambda r: (r[0], r[1]))
    obs_marker = np.array([r[0] for r in rows], dtype=int)
    obs_years = np.array([r[1] for r in rows], dtype=float)
    obs_value = np.array([r[2] for r in rows], dtype=float)
    obs_domain = np.array([r[3] for r in rows], dtype=int)
    obs_time = spec.time.to_model(obs_years)
    X, Z = _latent_design(spec, subj, obs_time, obs_domain)

    coords = EndpointCoordinates()
    kinds, processes, times_years, zeta_rows, pattern, positives, entry = [], [], [], [], [], [], []

    known = {p.name for p in spec.diagnoses}
    unknown = set(subj.processes) - known
    if unknown:
        raise SchemaError(f"Subject '{subj.id}': diagnosis records for undeclared endpoints {sorted(unknown)}")
    for process in spec.diagnoses:
        for j, visit in enumerate(subj.visits(process.name)):
            c = len(kinds)
            kinds.append(DIAG)
            processes.append(process.name)
            times_years.append(visit.time)
            zeta_rows.append(threshold_row(process.threshold, float(spec.time.to_model(visit.time)), subj))
            pattern.append(c)
            if visit.status == 1:
                positives.append(c)
            if j == 0 and spec.delayed_entry:
                entry.append(c)

    follow_up = death_follow_up(spec, subj)
    if follow_up is not None:
        death = spec.death
        midpoints = death.midpoints
        spline = death.spline_rows(midpoints, spec.time)
        pre_entry = range(follow_up.first) if spec.delayed_entry else range(0)
        for s in list(pre_entry) + list(range(follow_up.first, follow_up.last + 1)):
            c = len(kinds)
            kinds.append(DEATH)
            processes.append(death.name)
            times_years.append(midpoints[s])
            zeta_rows.append(threshold_row(death.threshold, float(spec.time.to_model(midpoints[s])), subj, spline[s]))
            if s < follow_up.first:
                entry.append(c)
            else:
                pattern.append(c)
                if follow_up.is_event and s == follow_up.last:
                    positives.append(c)

    coords.kinds, coords.processes, coords.zeta_rows = kinds, processes, zeta_rows
    coords.times_years = np.array(times_years, dtype=float)
    coords.times = spec.time.to_model(coords.times_years)
    coords.pattern_idx = np.array(pattern, dtype=int)
    coords.positive_idx = np.array(positives, dtype=int)
    coords.entry_idx = np.array(entry, dtype=int)

    X_tilde, Z_tilde = _latent_design(spec, subj, coords.times, None)

    contrib_rows = {}
    endpoints = list(spec.diagnoses) + ([spec.death] if spec.death is not None else [])
    for endpoint in endpoints:
        for domain in spec.domains:
            terms = spec.contribution_terms(endpoint, domain.name)
            contrib_rows[(endpoint.name, domain.name)] = _domain_rows(terms, np.zeros(1), subj.covariates, subj.id)[0]

    for d, domain in enumerate(spec.domains):
        if not domain.brownian:
            continue
        origin = spec.brownian_origin(domain)
        shifted = np.concatenate([obs_time[obs_domain == d], coords.times]) - origin
        if np.any(shifted < 0):
            raise SchemaError(
                f"Subject '{subj.id}': time before the Brownian origin of domain '{domain.name}'"
            )

    return DesignBundle(
        subject_id=subj.id, X=X, Z=Z, obs_domain=obs_domain, obs_marker=obs_marker, obs_time=obs_time,
        obs_value=obs_value, X_tilde=X_tilde, Z_tilde=Z_tilde, coords=coords, contrib_rows=contrib_rows,
        death_follow_up=follow_up,
    )
