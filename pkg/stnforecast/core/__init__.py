from stnforecast.core.errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DimensionError,
    GradientCheckError,
    IngestError,
    InputError,
    MetricError,
    RangeError,
    StnError,
    TrainingError,
)
from stnforecast.core.gradcheck import grad_check
from stnforecast.core.tensor import Tape, Tensor, backward
