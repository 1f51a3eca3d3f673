# utils/subject.py

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from utils.exceptions import SchemaError

logger = logging.getLogger(__name__)

EVENT = 'event'
CENSORED = 'censored'


@dataclass
class MarkerObservation:
    domain: str
    marker: str
    time: float
    value: float


@dataclass
class DiagVisit:
    time: float
    status: int
    process: str = 'diag'


@dataclass
class EventRecord:
    entry_time: float
    terminal_time: float
    status: str = CENSORED

    @property
    def is_event(self) -> bool:
        return self.status == EVENT


@dataclass
class SubjectData:
    """
    One individual's observations. Times are in years.
    """
    id: str
    covariates: Dict[str, float] = field(default_factory=dict)
    marker_obs: List[MarkerObservation] = field(default_factory=list)
    diag_visits: List[DiagVisit] = field(default_factory=list)
    event_record: Optional[EventRecord] = None
    entry_time: Optional[float] = None

    def __post_init__(self):
        self.id = str(self.id)
        if self.entry_time is None:
            self.entry_time = self.infer_entry()

    def infer_entry(self) -> Optional[float]:
        if self.event_record is not None:
            return float(self.event_record.entry_time)
        times = [v.time for v in self.diag_visits] + [o.time for o in self.marker_obs]
        return float(min(times)) if times else None

    def visits(self, process: str) -> List[DiagVisit]:
        return sorted((v for v in self.diag_visits if v.process == process), key=lambda v: v.time)

    @property
    def processes(self) -> List[str]:
        return sorted({v.process for v in self.diag_visits})

    def first_positive_time(self) -> Optional[float]:
        positives = [v.time for v in self.diag_visits if v.status == 1]
        return min(positives) if positives else None

    def validate(self) -> None:
        """
        Check the subject invariants.

        :raises SchemaError: Naming the subject and the violated rule.
        """
        for process in self.processes:
            visits = [v for v in self.diag_visits if v.process == process]
            times = np.array([v.time for v in visits])
            if np.any(np.diff(times) <= 0):
                raise SchemaError(f"Subject '{self.id}': '{process}' visit times are not strictly increasing")
            statuses = [v.status for v in visits]
            if any(s not in (0, 1) for s in statuses):
                raise SchemaError(f"Subject '{self.id}': diagnosis status must be 0 or 1")
            if 1 in statuses[:-1]:
                raise SchemaError(f"Subject '{self.id}': '{process}' has visits after a positive diagnosis")
        first_positive = self.first_positive_time()
        if first_positive is not None:
            late_visits = [v for v in self.diag_visits if v.time > first_positive]
            if late_visits:
                raise SchemaError(f"Subject '{self.id}': diagnosis visits after the first positive diagnosis")
            late = [o for o in self.marker_obs if o.time > first_positive]
            if late:
                raise SchemaError(
                    f"Subject '{self.id}': marker '{late[0].marker}' observed at {late[0].time} after the "
                    f"positive diagnosis at {first_positive}"
                )
        if self.event_record is not None:
            if self.event_record.status not in (EVENT, CENSORED):
                raise SchemaError(f"Subject '{self.id}': unknown event status '{self.event_record.status}'")
            if self.event_record.terminal_time < self.event_record.entry_time:
                raise SchemaError(f"Subject '{self.id}': terminal time precedes entry time")
        if any(not np.isfinite(o.value) or not np.isfinite(o.time) for o in self.marker_obs):
            raise SchemaError(f"Subject '{self.id}': non-finite marker observation")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'id': self.id,
            'covariates': dict(self.covariates),
            'entry_time': self.entry_time,
            'n_marker_obs': len(self.marker_obs),
            'n_diag_visits': len(self.diag_visits),
            'event': None if self.event_record is None else self.event_record.status,
        }


def marker_values(subjects: Sequence[SubjectData]) -> Dict[str, np.ndarray]:
    """Pooled observed values per marker name."""
    values: Dict[str, list] = {}
    for subj in subjects:
        for obs in subj.marker_obs:
            values.setdefault(obs.marker, []).append(obs.value)
    return {k: np.asarray(v, dtype=float) for k, v in values.items()}
