# utils/retry_handler.py

import logging
from functools import wraps

from utils.exceptions import NumericalError

logger = logging.getLogger(__name__)


class NonFiniteEvaluation(Exception):
    """Raised by a finite-difference kernel when the objective is not finite at a perturbed point."""


def retry(max_attempts=5, backoff=0.5, step_arg='step'):
    """
    Decorator retrying a finite-difference kernel with a shrinking step.

    The wrapped function must accept the step as keyword argument ``step_arg`` and raise
    NonFiniteEvaluation when one of its evaluations is not finite. After ``max_attempts``
    failed attempts a NumericalError is raised.

    :param max_attempts: Maximum number of attempts.
    :param backoff: Multiplier applied to the step after each failure.
    :param step_arg: Name of the keyword argument carrying the step.
    """
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            attempts = 0
            while True:
                try:
                    return func(*args, **kwargs)
                except NonFiniteEvaluation as e:
                    attempts += 1
                    logger.warning(f"Attempt {attempts} failed with error: {e}")
                    if attempts >= max_attempts:
                        logger.error(f"All {max_attempts} attempts failed.")
                        raise NumericalError(
                            f"{func.__name__}: non-finite objective after {max_attempts} step reductions"
                        ) from e
                    kwargs[step_arg] = kwargs[step_arg] * backoff
                    logger.info(f"Retrying with {step_arg}={kwargs[step_arg]:.3g}")
        return wrapper
    return decorator
