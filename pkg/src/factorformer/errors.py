"""Exception types shared across the package."""


class FactorFormerError(Exception):
    """Base class; ``code`` is the machine-readable tag used by the CLI."""

    code = "error"


class ConfigError(FactorFormerError, ValueError):
    code = "config_error"


class SimulationDiverged(FactorFormerError, FloatingPointError):
    code = "simulation_diverged"


class FilterDegenerate(FactorFormerError, ArithmeticError):
    code = "filter_degenerate"


class WeightCollapse(FactorFormerError, ArithmeticError):
    """All particle weights vanished at ``period``."""

    code = "weight_collapse"

    def __init__(self, period, msg=None):
        self.period = period
        super().__init__(msg or f"all particle weights underflowed at period {period}")


class NumericOverflow(FactorFormerError, FloatingPointError):
    code = "numeric_overflow"

    def __init__(self, layer, msg=None):
        self.layer = layer
        super().__init__(msg or f"non-finite activation in layer {layer!r}")


class TrainingDiverged(FactorFormerError, FloatingPointError):
    code = "training_diverged"


class DataError(FactorFormerError, ValueError):
    code = "data_error"


class NetworkError(FactorFormerError, OSError):
    code = "network_error"
