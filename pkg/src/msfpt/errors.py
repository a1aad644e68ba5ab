"""Exception hierarchy shared across the package."""


class MsfptError(Exception):
    """Base class for all errors raised by msfpt."""

    code = "error"


class DimensionError(MsfptError, ValueError):
    code = "dimension"


class ContractError(MsfptError, ValueError):
    code = "contract"


class NonFiniteError(MsfptError, FloatingPointError):
    code = "non_finite"


class ConfigError(MsfptError, ValueError):
    code = "config"


class InputTooSmallError(MsfptError, ValueError):
    code = "input_too_small"


class UndefinedCorrelationError(MsfptError, ValueError):
    code = "undefined_correlation"


# checkpoint / file formats

class FormatError(MsfptError, ValueError):
    code = "format"


class ChecksumError(FormatError):
    code = "checksum"


class VersionError(FormatError):
    code = "version"


class TruncatedFileError(FormatError):
    code = "truncated"


class ManifestError(MsfptError, ValueError):
    code = "manifest"

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class ImageDecodeError(MsfptError, ValueError):
    code = "image_decode"
