"""Exception hierarchy. CLI exit codes are attached to each family."""


class OnnkitError(Exception):
    exit_code = 1


class SpecError(OnnkitError, ValueError):
    """Invalid architecture or design description."""


class ConfigError(OnnkitError, ValueError):
    """Bad configuration key or value."""


class StageOrderError(OnnkitError):
    """A pipeline stage was run before the stage it depends on."""


class ShapeError(OnnkitError, ValueError):
    exit_code = 2


class DataFormatError(OnnkitError, ValueError):
    exit_code = 2


class NumericalError(OnnkitError, ArithmeticError):
    exit_code = 3

    def __init__(self, message, layer=None, epoch=None):
        super().__init__(message)
        self.layer = layer
        self.epoch = epoch
