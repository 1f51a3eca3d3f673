# utils/validation.py

import os
import logging
from functools import lru_cache
from typing import Any, Dict, Iterable

import pandas as pd
import yaml
from jsonschema import validate, ValidationError

from utils.exceptions import SchemaError

logger = logging.getLogger(__name__)

_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


@lru_cache(maxsize=None)
def load_schema(schema_path: str) -> Dict[str, Any]:
    """
    Load a YAML schema from a file. Relative paths are resolved against the repository root.

    :param schema_path: Path to the YAML schema file.
    :return: Parsed schema as a Python dictionary.
    """
    path = schema_path if os.path.isabs(schema_path) else os.path.join(_ROOT, schema_path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            schema = yaml.safe_load(f)
        logger.debug(f"Loaded schema from '{path}'.")
        return schema
    except (OSError, yaml.YAMLError) as e:
        logger.error(f"Error loading schema '{path}': {e}")
        raise


def validate_document(document: Any, schema_path: str, what: str = 'document') -> None:
    """
    Validate a parsed YAML/JSON document against a schema.

    :param document: The parsed document.
    :param schema_path: Path to the YAML schema file.
    :param what: Human-readable name used in the error message.
    :raises SchemaError: When the document does not follow the schema.
    """
    schema = load_schema(schema_path)
    try:
        validate(instance=document, schema=schema)
    except ValidationError as ve:
        location = '/'.join(str(p) for p in ve.absolute_path) or '<root>'
        logger.error(f"Invalid {what} at '{location}': {ve.message}")
        raise SchemaError(f"Invalid {what} at '{location}': {ve.message}") from ve


def require_columns(frame: pd.DataFrame, columns: Iterable[str], path: str) -> None:
    """
    Check that a table carries the required columns.

    :raises SchemaError: Naming the file and the first missing column.
    """
    for column in columns:
        if column not in frame.columns:
            logger.error(f"File '{path}' is missing column '{column}'.")
            raise SchemaError(f"{path}: missing column '{column}'")


def require_numeric(frame: pd.DataFrame, columns: Iterable[str], path: str, header_lines: int = 2) -> pd.DataFrame:
    """
    Convert columns to floats, reporting the file line and column of the first bad value.

    :param frame: Table read from ``path``.
    :param columns: Columns that must be numeric and non-missing.
    :param path: File name for messages.
    :param header_lines: Lines preceding the first data row (format comment + header).
    :return: The frame with converted columns.
    """
    frame = frame.copy()
    for column in columns:
        converted = pd.to_numeric(frame[column], errors='coerce')
        bad = converted.isna()
        if bad.any():
            row = int(bad.to_numpy().nonzero()[0][0])
            line = row + header_lines + 1
            logger.error(f"File '{path}', line {line}, column '{column}': invalid value {frame[column].iloc[row]!r}")
            raise SchemaError(f"{path}, line {line}, column '{column}': invalid value {frame[column].iloc[row]!r}")
        frame[column] = converted.astype(float)
    return frame
