"""Exception hierarchy shared by every cacp module."""


class CacpError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(CacpError):
    pass


class BackendError(CacpError):
    """A model backend failed while serving a request."""


class BackendUnavailableError(BackendError):
    """A real model backend was requested but could not be imported or loaded."""


class EmptyTextError(CacpError, ValueError):
    pass


class InvalidPromptError(CacpError, ValueError):
    pass


class EmptyGalleryError(CacpError):
    pass


class UnknownCategoryError(CacpError, KeyError):
    pass


class NoObjectFoundError(CacpError):
    """The detector found no box with the requested label in a donor image."""


class DegenerateScaleError(CacpError, ValueError):
    pass


class PasteTooLargeError(CacpError, ValueError):
    pass


class OutOfBoundsError(CacpError, ValueError):
    pass


class MalformedAnnotationError(CacpError):
    def __init__(self, path, message, line=None):
        self.path = str(path)
        self.line = line
        where = self.path if line is None else f"{self.path}:{line}"
        super().__init__(f"{where}: {message}")


class LayoutMismatchError(CacpError):
    pass


class DimensionMismatchError(CacpError, ValueError):
    pass


class LengthMismatchError(CacpError, ValueError):
    pass
