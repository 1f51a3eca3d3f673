# utils/file_handler.py

import json
import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from utils.exceptions import SchemaError
from utils.model_spec import ModelSpec
from utils.parameters import ParameterLayout, ParameterVector
from utils.subject import CENSORED, EVENT, DiagVisit, EventRecord, MarkerObservation, SubjectData
from utils.validation import require_columns, require_numeric

logger = logging.getLogger(__name__)

FORMAT_TAG = 'jointlpm-format v1'
MARKER_COLUMNS = ['id', 'time', 'domain', 'marker', 'value']
DIAG_COLUMNS = ['id', 'time', 'status']
EVENT_COLUMNS = ['id', 'entry', 'time', 'status']


def format_header(seed: Optional[int]) -> str:
    return f"# {FORMAT_TAG} seed={'none' if seed is None else int(seed)}"


def write_csv(frame: pd.DataFrame, path: str, seed: Optional[int] = None):
    """
    Write a table preceded by the versioned format line carrying the seed.
    """
    try:
        with open(path, 'w', encoding='utf-8', newline='') as f:
            f.write(format_header(seed) + '\n')
            frame.to_csv(f, index=False, float_format='%.10g')
        logger.info(f"Wrote {len(frame)} rows to '{path}'.")
    except OSError as e:
        logger.error(f"Error writing '{path}': {e}")
        raise


def write_text(path: str, text: str):
    try:
        with open(path, 'w', encoding='utf-8') as f:
            f.write(text)
        logger.info(f"Wrote '{path}'.")
    except OSError as e:
        logger.error(f"Error writing '{path}': {e}")
        raise


def _leading_lines(path: str) -> int:
    with open(path, 'r', encoding='utf-8') as f:
        first = f.readline()
    return 2 if first.startswith('#') else 1


def read_header_seed(path: str) -> Optional[int]:
    """Seed recorded in the format line of a file, or None."""
    with open(path, 'r', encoding='utf-8') as f:
        first = f.readline().strip()
    if not first.startswith('#') or 'seed=' not in first:
        return None
    try:
        return int(first.split('seed=', 1)[1].split()[0])
    except ValueError:
        return None


def read_csv(path: str, columns: Sequence[str], numeric: Sequence[str] = ()) -> pd.DataFrame:
    """
    Read a data table, skipping comment lines.

    :param path: CSV file.
    :param columns: Columns that must be present.
    :param numeric: Columns that must hold numbers.
    :raises SchemaError: Naming the file (and the line and column when known).
    """
    try:
        frame = pd.read_csv(path, comment='#', dtype={'id': str})
        header_lines = _leading_lines(path)
    except FileNotFoundError:
        logger.error(f"Data file '{path}' not found.")
        raise SchemaError(f"Data file '{path}' not found")
    except (pd.errors.EmptyDataError, pd.errors.ParserError, UnicodeDecodeError) as e:
        logger.error(f"Could not parse '{path}': {e}")
        raise SchemaError(f"{path}: {e}") from e
    frame.columns = [str(c).strip() for c in frame.columns]
    require_columns(frame, columns, path)
    if frame['id'].isna().any():
        line = int(frame['id'].isna().to_numpy().nonzero()[0][0]) + header_lines + 1
        raise SchemaError(f"{path}, line {line}, column 'id': missing subject id")
    return require_numeric(frame, numeric, path, header_lines=header_lines)


def load_subjects(markers_path: str, diag_path: Optional[str] = None, events_path: Optional[str] = None,
                  covariates_path: Optional[str] = None, spec: Optional[ModelSpec] = None) -> List[SubjectData]:
    """
    Assemble subjects from the long-format data files.

    :param markers_path: id, time, domain, marker, value.
    :param diag_path: id, time, status and an optional process column (default 'diag').
    :param events_path: id, entry, time, status with status 1 for an event and 0 for censoring.
    :param covariates_path: id plus one column per covariate.
    :param spec: When given, markers and processes are checked against it.
    :return: Validated subjects sorted by id.
    """
    markers = read_csv(markers_path, MARKER_COLUMNS, ['time', 'value'])
    subjects: Dict[str, SubjectData] = {}

    def subject(sid: str) -> SubjectData:
        if sid not in subjects:
            subjects[sid] = SubjectData(id=sid)
        return subjects[sid]

    known_markers = None
    if spec is not None:
        known_markers = {(name, m.name) for _, name, m in spec.markers}
    for row in markers.itertuples(index=False):
        key = (str(row.domain), str(row.marker))
        if known_markers is not None and key not in known_markers:
            raise SchemaError(f"{markers_path}: marker '{key[1]}' of domain '{key[0]}' is not in the model")
        subject(row.id).marker_obs.append(MarkerObservation(key[0], key[1], float(row.time), float(row.value)))

    if diag_path:
        diag = read_csv(diag_path, DIAG_COLUMNS, ['time', 'status'])
        has_process = 'process' in diag.columns
        for row in diag.itertuples(index=False):
            process = str(row.process) if has_process else 'diag'
            if spec is not None and process not in [p.name for p in spec.diagnoses]:
                raise SchemaError(f"{diag_path}: diagnosis process '{process}' is not in the model")
            subject(row.id).diag_visits.append(DiagVisit(float(row.time), int(row.status), process))

    if events_path:
        events = read_csv(events_path, EVENT_COLUMNS, ['entry', 'time', 'status'])
        for row in events.itertuples(index=False):
            subj = subject(row.id)
            if subj.event_record is not None:
                raise SchemaError(f"{events_path}: subject '{row.id}' has several event records")
            if row.status not in (0, 1):
                raise SchemaError(f"{events_path}: subject '{row.id}' has event status {row.status}, expected 0 or 1")
            subj.event_record = EventRecord(float(row.entry), float(row.time), EVENT if row.status == 1 else CENSORED)
            subj.entry_time = float(row.entry)

    if covariates_path:
        covariates = read_csv(covariates_path, ['id'])
        names = [c for c in covariates.columns if c != 'id']
        covariates = require_numeric(covariates, names, covariates_path, header_lines=_leading_lines(covariates_path))
        for row in covariates.to_dict(orient='records'):
            sid = str(row.pop('id'))
            if sid in subjects:
                subjects[sid].covariates.update({k: float(v) for k, v in row.items()})

    result = []
    for sid in sorted(subjects):
        subj = subjects[sid]
        subj.marker_obs.sort(key=lambda o: (o.domain, o.marker, o.time))
        subj.diag_visits.sort(key=lambda v: (v.process, v.time))
        if subj.entry_time is None:
            subj.entry_time = subj.infer_entry()
        if spec is not None:
            missing = [c for c in spec.covariates if c not in subj.covariates]
            if missing:
                raise SchemaError(f"Subject '{sid}' has no value for covariate '{missing[0]}'")
            if spec.death is not None and subj.event_record is None:
                raise SchemaError(f"Subject '{sid}' has no event record but the model has a death process")
        subj.validate()
        result.append(subj)
    logger.info(f"Loaded {len(result)} subjects from '{markers_path}'.")
    return result


def subjects_to_frames(subjects: Sequence[SubjectData]) -> Dict[str, pd.DataFrame]:
    markers = pd.DataFrame([(s.id, o.time, o.domain, o.marker, o.value) for s in subjects for o in s.marker_obs],
                           columns=MARKER_COLUMNS)
    diag = pd.DataFrame([(s.id, v.time, v.status, v.process) for s in subjects for v in s.diag_visits],
                        columns=DIAG_COLUMNS + ['process'])
    events = pd.DataFrame([(s.id, s.event_record.entry_time, s.event_record.terminal_time,
                            int(s.event_record.is_event)) for s in subjects if s.event_record is not None],
                          columns=EVENT_COLUMNS)
    names = sorted({name for s in subjects for name in s.covariates})
    covariates = pd.DataFrame([[s.id] + [s.covariates.get(n, np.nan) for n in names] for s in subjects],
                              columns=['id'] + names)
    return {'markers': markers, 'diag': diag, 'events': events, 'covariates': covariates}


def write_dataset(subjects: Sequence[SubjectData], output_dir: str, seed: Optional[int] = None) -> Dict[str, str]:
    """
    Write markers.csv, diag.csv, events.csv and covariates.csv; empty tables are skipped.

    :return: Map of table name to written path.
    """
    os.makedirs(output_dir, exist_ok=True)
    paths = {}
    for name, frame in subjects_to_frames(subjects).items():
        if frame.empty and name != 'markers':
            continue
        path = os.path.join(output_dir, f"{name}.csv")
        write_csv(frame, path, seed)
        paths[name] = path
    return paths


def observed_time_range(subjects: Sequence[SubjectData]) -> Tuple[float, float]:
    times = []
    for s in subjects:
        times.extend(o.time for o in s.marker_obs)
        times.extend(v.time for v in s.diag_visits)
        if s.event_record is not None:
            times.extend([s.event_record.entry_time, s.event_record.terminal_time])
    if not times:
        raise SchemaError("The dataset holds no observation time")
    return float(min(times)), float(max(times))


@dataclass
class FittedModel:
    spec: ModelSpec
    theta: ParameterVector
    se: np.ndarray
    covariance: Optional[np.ndarray]
    loglik: float
    converged: bool
    iterations: int
    rdm: float
    time_support: Optional[Tuple[float, float]]
    seed: Optional[int]
    n_subjects: int = 0


def _nullable(values) -> List[Any]:
    return [None if not np.isfinite(v) else float(v) for v in np.ravel(values)]


def save_fitted_model(path: str, spec: ModelSpec, fit, seed: Optional[int] = None,
                      time_support: Optional[Tuple[float, float]] = None, n_subjects: int = 0):
    """
    Save a fit as JSON: model description, labelled estimates, SEs and covariance of the free parameters.
    """
    n_free = fit.layout.n_free
    doc = {
        'format': FORMAT_TAG,
        'seed': seed,
        'model': spec.to_dict(),
        'labels': list(fit.layout.labels),
        'theta': [float(v) for v in fit.theta.theta],
        'se': _nullable(fit.se),
        'covariance': [_nullable(row) for row in np.reshape(fit.covariance, (n_free, n_free))],
        'loglik': float(fit.loglik) if np.isfinite(fit.loglik) else None,
        'converged': bool(fit.converged),
        'iterations': int(fit.iterations),
        'rdm': float(fit.rdm) if np.isfinite(fit.rdm) else None,
        'time_support': None if time_support is None else [float(time_support[0]), float(time_support[1])],
        'n_subjects': int(n_subjects),
    }
    try:
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(doc, f, ensure_ascii=False, indent=2)
        logger.info(f"Saved fitted model to '{path}'.")
    except OSError as e:
        logger.error(f"Error writing fitted model '{path}': {e}")
        raise


def _floats(values) -> np.ndarray:
    return np.array([np.nan if v is None else float(v) for v in values], dtype=float)


def load_fitted_model(path: str) -> FittedModel:
    """
    Reload a fitted-model file written by :func:`save_fitted_model`.

    :raises SchemaError: When the file is missing, malformed, or its labels do not match its model.
    """
    try:
        with open(path, 'r', encoding='utf-8') as f:
            doc = json.load(f)
    except FileNotFoundError:
        logger.error(f"Fitted model '{path}' not found.")
        raise SchemaError(f"Fitted model '{path}' not found")
    except json.JSONDecodeError as e:
        logger.error(f"JSON decoding error in '{path}': {e}")
        raise SchemaError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from e
    try:
        spec = ModelSpec.from_dict(doc['model'])
        layout = ParameterLayout(spec)
        if list(doc['labels']) != layout.labels:
            raise SchemaError("parameter labels do not match the model")
        theta = ParameterVector(np.array(doc['theta'], dtype=float), layout)
        covariance = doc.get('covariance')
        covariance = None if covariance is None else np.array([_floats(r) for r in covariance]).reshape(
            layout.n_free, layout.n_free)
        support = doc.get('time_support')
        return FittedModel(
            spec=spec, theta=theta, se=_floats(doc['se']), covariance=covariance,
            loglik=np.nan if doc.get('loglik') is None else float(doc['loglik']),
            converged=bool(doc['converged']), iterations=int(doc['iterations']),
            rdm=np.nan if doc.get('rdm') is None else float(doc['rdm']),
            time_support=None if support is None else (float(support[0]), float(support[1])),
            seed=doc.get('seed'), n_subjects=int(doc.get('n_subjects', 0)),
        )
    except (KeyError, TypeError, ValueError) as e:
        logger.error(f"Malformed fitted model '{path}': {e}")
        raise SchemaError(f"{path}: malformed fitted model ({e})") from e
    except SchemaError as e:
        raise SchemaError(f"{path}: {e}") from e
