"""Exception types raised across the harmonization package."""


class HarmonizationError(Exception):
    """Base class for every error raised on purpose by this package."""


class ArgumentError(HarmonizationError, ValueError):
    """An argument is outside the domain an operation accepts."""


class ConfigError(HarmonizationError):
    """A configuration file or section is malformed or unusable."""


class DataError(HarmonizationError):
    """A batch or sample violates a data contract (e.g. mismatched anatomy ids)."""


class DatasetError(HarmonizationError):
    """Reading or writing the on-disk dataset failed.

    Attributes:
        path (str): The file or directory that caused the failure
    """

    def __init__(self, message, path):
        super().__init__("{} ({})".format(message, path))
        self.path = str(path)


class TrainingError(HarmonizationError):
    """Optimization cannot continue.

    Attributes:
        component (str): Name of the loss component that went non-finite, if any
        checkpoint (str): Path of the last good checkpoint written before aborting
    """

    def __init__(self, message, component=None, checkpoint=None):
        super().__init__(message)
        self.component = component
        self.checkpoint = checkpoint


class CheckpointError(HarmonizationError):
    """A checkpoint is missing or has an unexpected layout.

    Attributes:
        path (str): The checkpoint path that could not be used
    """

    def __init__(self, message, path):
        super().__init__("{} ({})".format(message, path))
        self.path = str(path)
