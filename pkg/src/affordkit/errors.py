"""Exception hierarchy shared across the package.

UsageError maps to exit code 1 (bad parameters), DataError and its
subclasses to exit code 2 (malformed or inconsistent inputs); anything
else is an internal error (exit code 3).
"""


class AffordkitError(Exception):
    """Base class for all package errors."""


class UsageError(AffordkitError):
    """Invalid parameter combination or out-of-range argument."""


class DataError(AffordkitError):
    """Malformed, truncated or semantically invalid input data."""


class CloudFormatError(DataError):
    """Pointcloud file cannot be parsed.

    Carries the file path plus a line number (text sections) or byte
    offset (binary payload) locating the problem.
    """

    def __init__(self, message, path=None, line=None, offset=None):
        self.path = path
        self.line = line
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte {offset}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)


class DescriptorFormatError(DataError):
    """Descriptor container is corrupt or structurally invalid."""


class VersionError(DescriptorFormatError):
    """Container version is not supported by this build."""


class SchemaError(DataError):
    """Interchange file violates its schema.

    `record` is the zero-based index of the offending record when the
    failure is record-local.
    """

    def __init__(self, message, record=None):
        self.record = record
        suffix = f" (record {record})" if record is not None else ""
        super().__init__(message + suffix)
