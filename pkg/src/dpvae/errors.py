"""Exception hierarchy shared by all dpvae modules."""


class DpvaeError(Exception):
    """Base class for every error raised by this package."""

    kind = "error"

    def to_dict(self):
        return {"error": self.kind, "message": str(self)}


class ConfigurationError(DpvaeError, ValueError):
    kind = "configuration"


class ParameterError(DpvaeError, ValueError):
    kind = "parameter"


class StateError(DpvaeError, RuntimeError):
    kind = "state"


class NumericError(DpvaeError, ArithmeticError):
    kind = "numeric"


class IntegrityError(DpvaeError, ValueError):
    kind = "integrity"


class DegenerateDataError(DpvaeError, ValueError):
    kind = "degenerate_data"


class UndefinedMetricError(DpvaeError, ValueError):
    kind = "undefined"
