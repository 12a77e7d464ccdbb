"""Exception hierarchy. CLI exit codes are derived from these classes."""


class AtlasError(Exception):
    exit_code = 1


class ValidationError(AtlasError, ValueError):
    pass


class ParseError(ValidationError):
    pass


class DataError(ValidationError):
    pass


class StateError(AtlasError):
    pass


class CapacityError(AtlasError):
    pass


class StaleCacheError(AtlasError):
    pass


class SolverError(AtlasError):
    exit_code = 3


class ContractError(AtlasError):
    """A numerical contract (PSNR floor, attribute tolerance, identity check) failed."""

    exit_code = 3
