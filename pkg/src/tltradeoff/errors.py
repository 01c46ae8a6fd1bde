"""Exception hierarchy. Every error the CLI reports carries its class name."""


class TradeoffError(Exception):
    """Base class for all harness errors."""


class ConfigError(TradeoffError, ValueError):
    pass


class ShapeError(TradeoffError, ValueError):
    pass


class IngestError(TradeoffError):
    pass


class InsufficientDataError(TradeoffError):
    def __init__(self, class_name, available, required):
        self.class_name = class_name
        self.available = available
        self.required = required
        super().__init__(
            f"class {class_name!r} has {available} train samples, {required} required"
        )


class CropError(TradeoffError, ValueError):
    pass


class WeightImportError(TradeoffError):
    """Weight container does not match the target backbone."""


class FitError(TradeoffError):
    pass


class TrainError(TradeoffError):
    pass


class MetricError(TradeoffError, ValueError):
    pass


class SampleError(TradeoffError, ValueError):
    pass


class ReportError(TradeoffError):
    pass

