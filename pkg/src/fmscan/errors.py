"""Exception types raised by fmscan.

All errors derive from :class:`FmscanError`, itself a ``ValueError``, so
callers catching ``ValueError`` keep working.
"""


class FmscanError(ValueError):
    """Base error.

    Parameters
    ----------
    msg : str
        Human readable message.
    detail : dict, optional
        Machine readable context, emitted by the command line interface.
    """

    def __init__(self, msg, detail=None):
        super().__init__(msg)
        self.detail = dict(detail) if detail else {}

    def to_dict(self):
        return {
            "error": type(self).__name__,
            "message": str(self),
            "detail": self.detail,
        }


class InputError(FmscanError):
    """Malformed numeric input, e.g. non-finite coordinates."""


class ConfigError(FmscanError):
    """Parameter outside its documented range."""


class DomainError(FmscanError):
    """Time point outside the basis domain."""


class SmoothingError(FmscanError):
    """Singular least-squares design while smoothing a series."""


class DecompositionError(FmscanError):
    """Gram matrix numerically singular."""


class FitError(FmscanError):
    """Likelihood maximisation failed."""


class SelectionError(FmscanError):
    """No truncation candidate could be fitted."""


class WindowError(FmscanError):
    """Invalid scanning window."""


class ScanError(FmscanError):
    """No valid window in a scan."""


class IngestionError(FmscanError):
    """Input tables inconsistent with each other."""
