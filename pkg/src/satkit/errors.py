"""Exception hierarchy shared across satkit modules."""


class SatkitError(Exception):
    """Base class for all satkit errors."""


# volume / nifti
class MalformedHeader(SatkitError):
    pass


class UnsupportedDatatype(SatkitError):
    pass


class DimensionError(SatkitError):
    pass


class SingularAffine(SatkitError):
    pass


class InvalidAxcodes(SatkitError):
    pass


class DegenerateOutput(SatkitError):
    pass


class AllZeroVolume(SatkitError):
    pass


# labels
class UnmappedCode(SatkitError):
    pass


class CycleDetected(SatkitError):
    pass


class UnknownTerminology(SatkitError):
    pass


# sampler
class EmptyDataset(SatkitError):
    pass


class NoForeground(UserWarning):
    """Warning: oversampling requested on a label volume with no foreground."""


# kernels
class UnknownTerm(SatkitError):
    pass


class EmptyMask(SatkitError):
    pass


class BatchTooSmall(SatkitError):
    pass


class ShapeMismatch(SatkitError):
    pass


class InvalidTarget(SatkitError):
    pass


# pipeline
class MissingArtifact(SatkitError):
    def __init__(self, path, command):
        super().__init__(f"missing artifact {path}; run `{command}` first")
        self.path = path
        self.command = command


class ConfigError(SatkitError):
    pass
