"""Exception types shared across the package."""


class FedSimError(Exception):
    """Base class for all errors raised by fedsim."""


class ConfigError(FedSimError, ValueError):
    """Invalid configuration value or incompatible inputs."""


class ContractError(FedSimError, ValueError):
    """A precondition of an operation was violated by its caller."""


class ParseError(FedSimError, ValueError):
    """A file on disk does not match the expected format."""


class DegenerateInputError(FedSimError, ValueError):
    """Input is well-formed but has no usable spread (e.g. zero variance)."""
