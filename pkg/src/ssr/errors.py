"""Exception types and the process exit codes they map to."""

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ToolkitError(Exception):
    """Base class for errors the CLI turns into a JSON report and exit code."""

    exit_code = EXIT_DATA
    code = "error"


class DataError(ToolkitError):
    """Malformed or inconsistent input data."""

    code = "data"


class BadMagicError(DataError):
    code = "bad_magic"


class BadVersionError(DataError):
    code = "bad_version"


class TruncatedFileError(DataError):
    code = "truncated"


class InvalidDimensionError(DataError):
    code = "bad_dims"


class ManifestError(DataError):
    code = "manifest"


class NumericError(ToolkitError):
    """Non-finite values encountered during training or inference."""

    exit_code = EXIT_NUMERIC
    code = "numeric"
