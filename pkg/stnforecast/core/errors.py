class StnError(Exception):
    """Base class for every error raised by stnforecast."""


class DimensionError(StnError):
    pass


class ContractError(StnError):
    """A caller broke an operation's precondition."""


class ConfigError(StnError):
    pass


class InputError(StnError):
    pass


class RangeError(StnError):
    pass


class IngestError(StnError):
    pass


class MetricError(StnError):
    pass


class GradientCheckError(StnError):
    pass


class TrainingError(StnError):
    def __init__(self, message: str, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class CheckpointError(StnError):
    pass
