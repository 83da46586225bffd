"""Exception hierarchy shared by every module."""


class MdpSspError(Exception):
    """Base class for all errors raised by this package."""


class InvalidPathError(MdpSspError, ValueError):
    pass


class InvalidModelError(MdpSspError, ValueError):
    pass


class DomainError(MdpSspError, ValueError):
    pass


class InvalidDataError(MdpSspError, ValueError):
    pass


class DegenerateDataError(MdpSspError, ValueError):
    """Training data carries a single class (or otherwise no signal)."""


class InfeasibleDedupError(MdpSspError, ValueError):
    """Fewer distinct items than steps, so no injective path exists."""


class SizeError(MdpSspError, ValueError):
    pass


class SchemaError(MdpSspError, ValueError):
    pass


class ConfigError(MdpSspError, ValueError):
    pass
