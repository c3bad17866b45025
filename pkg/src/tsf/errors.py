"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """An input violates a documented precondition."""


class StabilityError(RuntimeError):
    """The explicit time step would be unstable for the given diffusivity."""

    def __init__(self, report):
        self.report = report
        super().__init__(
            f"explicit scheme unstable: CFL factor {report.cfl_factor:.6g} > 1"
        )


class FrameStepMismatchError(ValueError):
    """Capture schedule does not land exactly on simulation steps."""


class DivergenceError(ArithmeticError):
    """Optimization produced a non-finite loss (learning rate too high)."""


class TrainingError(ArithmeticError):
    """Classifier training produced a non-finite loss."""


class FormatError(ValueError):
    """A file on disk does not match its declared layout."""
