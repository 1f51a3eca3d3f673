# utils/exceptions.py

"""
Exception hierarchy shared by the library and the CLI.

Input problems (bad files, bad specs, values outside a link's domain) derive
from InputError; failures of the numerics derive from NumericalError. The CLI
maps both families onto its exit codes.
"""

EXIT_OK = 0
EXIT_NOT_CONVERGED = 2
EXIT_INPUT_ERROR = 3
EXIT_NUMERICAL_ERROR = 4


class JointModelError(Exception):
    """Base class for every error raised by jointlpm."""


class InputError(JointModelError):
    """Invalid input data, model specification or command-line request."""


class SchemaError(InputError):
    """A file or specification does not follow the expected schema."""


class LinkDomainError(InputError):
    """A marker value (or latent value) falls outside the range of its link function."""

    def __init__(self, message: str, marker: str = None, value: float = None):
        super().__init__(message)
        self.marker = marker
        self.value = value


class NumericalError(JointModelError):
    """A numerical routine could not produce a trustworthy result."""


class CdfDomainError(NumericalError):
    """Covariance passed to the Gaussian CDF is not positive semidefinite."""


class CapacityError(NumericalError):
    """Gaussian CDF dimension exceeds the configured maximum."""


class InitializationError(NumericalError):
    """The log-likelihood is not finite at the starting point of an optimisation."""


def exit_code_for(error: BaseException) -> int:
    """
    Map an exception onto the CLI exit-code contract.

    :param error: The exception caught by the command dispatcher.
    :return: EXIT_INPUT_ERROR for input problems, EXIT_NUMERICAL_ERROR otherwise.
    """
    if isinstance(error, InputError):
        return EXIT_INPUT_ERROR
    return EXIT_NUMERICAL_ERROR
