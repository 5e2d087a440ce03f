"""Exception hierarchy shared by all pipeline stages."""


class OctaError(Exception):
    """Base class for every error raised by this package."""


class FormatError(OctaError):
    """A file does not follow the expected on-disk layout."""


class ShapeError(OctaError, ValueError):
    """Array dimensions are inconsistent with the contract."""


class IntegrityError(FormatError):
    """A model container is truncated or its checksum does not match."""


class VersionError(FormatError):
    """A model container was written with an unsupported format version."""


class CapacityError(OctaError, ValueError):
    """Values do not fit in the storage format (e.g. >255 mask labels)."""


class ValidationError(OctaError, ValueError):
    """Input violates a documented invariant."""


class SegmentationFailure(OctaError):
    """No feasible retinal surface was found in a B-scan."""


class DegenerateInputError(OctaError, ValueError):
    """Input carries no usable variation (constant image, single class, ...)."""


class DivergenceError(OctaError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, loss):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class ConvergenceError(OctaError):
    """An iterative solver hit its iteration cap before converging."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (residual={residual:.3g})")
        self.residual = residual


class PrerequisiteError(OctaError):
    """A pipeline stage was started before the stage it depends on."""

    def __init__(self, missing, stage):
        super().__init__(f"missing {missing}; run `octa {stage}` first")
        self.missing = missing
        self.stage = stage
