"""Exception hierarchy shared by all xvec modules.

Each class carries the process exit code the CLI maps it to:
1 for usage/configuration problems, 2 for data/format problems,
3 for numeric failures during training.
"""


class XvecError(Exception):
    exit_code = 1


class ConfigError(XvecError):
    """Invalid configuration: bad field values, shape mismatches at build time."""

    exit_code = 1


class DataError(XvecError):
    """Invalid runtime data: unknown ids, label mismatches, bad lengths."""

    exit_code = 2


class FormatError(DataError):
    """Malformed file content (bad magic, truncation, unparseable lines)."""

    exit_code = 2


class TrainingError(XvecError):
    """Numeric failure while training, e.g. a non-finite loss."""

    exit_code = 3
