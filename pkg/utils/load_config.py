# utils/load_config.py

import os
import re
import logging
from typing import Any, Dict, Optional

import yaml
from dotenv import load_dotenv

logger = logging.getLogger(__name__)

REQUIRED_SECTIONS = ['cdf', 'optimizer', 'likelihood', 'processing']
THREADS_ENV_VAR = 'JOINTLPM_THREADS'


def load_config(config_path: str = 'config/config.yaml', dotenv_path: str = 'config/.env') -> Dict[str, Any]:
    """
    Load the YAML configuration file and resolve environment variables.

    :param config_path: Path to the YAML configuration file.
    :param dotenv_path: Path to the .env file containing environment variables.
    :return: Configuration as a Python dictionary with environment variables substituted.
    """
    try:
        if os.path.exists(dotenv_path):
            load_dotenv(dotenv_path)
            logger.info(f"Loaded environment variables from '{dotenv_path}'.")

        with open(config_path, 'r', encoding='utf-8') as file:
            config = yaml.safe_load(file) or {}

        config = substitute_env_vars(config)

        for section in REQUIRED_SECTIONS:
            if section not in config:
                logger.error(f"Configuration section '{section}' is missing in '{config_path}'.")
                raise ValueError(f"Configuration section '{section}' is missing.")

        logger.info(f"Configuration loaded and environment variables substituted from '{config_path}'.")
        return config
    except FileNotFoundError:
        logger.error(f"Configuration file '{config_path}' not found.")
        raise
    except yaml.YAMLError as ye:
        logger.error(f"YAML parsing error in '{config_path}': {ye}")
        raise


def substitute_env_vars(obj: Any) -> Any:
    """
    Recursively replace ``${VAR}`` references by the value of the environment variable.

    Unset variables resolve to an empty string.

    :param obj: Parsed YAML value (dict, list, scalar).
    :return: The same structure with references substituted.
    """
    if isinstance(obj, dict):
        return {k: substitute_env_vars(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [substitute_env_vars(element) for element in obj]
    if isinstance(obj, str):
        pattern = re.compile(r'\$\{([^}]+)\}')
        for var in pattern.findall(obj):
            env_value = os.environ.get(var, "")
            if not env_value:
                logger.debug(f"Environment variable '{var}' is not set.")
            obj = obj.replace(f"${{{var}}}", env_value)
        return obj
    return obj


def resolve_threads(cli_threads: Optional[int], config: Optional[Dict[str, Any]] = None) -> int:
    """
    Decide the worker count: the CLI flag wins over the environment, which wins over
    the configuration file, which falls back to the number of available cores.

    :param cli_threads: Value of ``--threads`` or None.
    :param config: Loaded configuration (optional).
    :return: A positive worker count.
    """
    candidates = [cli_threads, os.environ.get(THREADS_ENV_VAR)]
    if config is not None:
        candidates.append(config.get('processing', {}).get('threads'))
    for candidate in candidates:
        if candidate is None or candidate == "":
            continue
        try:
            value = int(candidate)
        except (TypeError, ValueError):
            logger.warning(f"Ignoring invalid worker count '{candidate}'.")
            continue
        if value >= 1:
            return value
        logger.warning(f"Ignoring non-positive worker count '{candidate}'.")
    return os.cpu_count() or 1
