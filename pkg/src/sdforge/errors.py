"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument or configuration value violates a documented precondition."""


class FormatError(ValueError):
    """A binary file has the wrong magic bytes, version or size."""


class NoForegroundError(ValueError):
    """Every supplied view mask is empty."""

    def __init__(self, msg: str = "no foreground"):
        super().__init__(msg)
