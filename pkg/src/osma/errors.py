"""Exception types raised across the package."""


class InvalidInputError(ValueError):
    """Array arguments with the wrong shape, size or values."""


class InvalidParameterError(ValueError):
    """A scalar or configuration argument outside its valid range."""


class InvalidLabelError(ValueError):
    pass


class DegenerateSpectrumError(ValueError):
    """Normalization requested but the DC bin of the profile is zero."""


class DegenerateReferenceError(ValueError):
    """A reference layer with zero norm in a relative weight distance."""


class UndefinedCosineError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    """A metric evaluated on empty input."""


class InvalidSpecError(ValueError):
    """A benchmark split specification that breaks the sharing rules."""


class DatasetError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, message, epoch=None, step=None, phase=None):
        super().__init__(f"{message} (phase={phase}, epoch={epoch}, step={step})")
        self.epoch = epoch
        self.step = step
        self.phase = phase
