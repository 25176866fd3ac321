"""Exception hierarchy.

Every error raised by the package derives from :class:`MoserFlowError`.  The
three mid-level classes map onto CLI exit codes (config 2, numeric 3, I/O 4).
"""


class MoserFlowError(Exception):
    exit_code = 3


class ConfigError(MoserFlowError):
    exit_code = 2


class NumericError(MoserFlowError):
    exit_code = 3


class IoError(MoserFlowError, OSError):
    exit_code = 4


class UnknownKey(ConfigError):
    pass


class InvalidValue(ConfigError):
    pass


class UnknownDataset(ConfigError):
    pass


class NearSingularProjection(NumericError):
    pass


class DimensionMismatch(NumericError):
    pass


class EmptyBatch(NumericError):
    pass


class EmptyDataset(NumericError):
    pass


class NonPositiveDensity(NumericError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, iteration, value):
        super().__init__(f"non-finite loss {value!r} at iteration {iteration}")
        self.iteration = iteration
        self.value = value


class NonFiniteParameter(NumericError):
    def __init__(self, index):
        super().__init__(f"non-finite parameter at flat index {index}")
        self.index = index


class StepSizeUnderflow(NumericError):
    pass


class GridMismatch(NumericError):
    pass


class UnreadableImage(IoError):
    pass


class AllZeroImage(IoError):
    pass


class MalformedRow(IoError):
    def __init__(self, line, reason):
        super().__init__(f"line {line}: {reason}")
        self.line = line


class OutOfRangeCoordinate(IoError):
    def __init__(self, line, reason):
        super().__init__(f"line {line}: {reason}")
        self.line = line


class ParamFileError(IoError):
    pass
