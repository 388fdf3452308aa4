"""Exception hierarchy shared by every module.

Each error carries the name of the module that raised it so the CLI can
print ``module: message`` diagnostics.
"""


class LasanError(Exception):
    module = "lasan"

    def __init__(self, message, module=None):
        super().__init__(message)
        if module is not None:
            self.module = module

    def __str__(self):
        return f"{self.module}: {super().__str__()}"


class DimensionError(LasanError, ValueError):
    module = "numerics"


class ConfigurationError(LasanError, ValueError):
    pass


class ContractError(LasanError, RuntimeError):
    pass


class NumericError(LasanError, FloatingPointError):
    module = "numerics"


class DataError(LasanError, ValueError):
    module = "dataio"


class FormatError(LasanError, ValueError):
    module = "dataio"


class UndefinedMetricError(LasanError, ValueError):
    module = "evalmask"
