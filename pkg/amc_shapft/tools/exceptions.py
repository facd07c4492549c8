# License AGPL-3.0 or later (http://www.gnu.org/licenses/agpl)
"""Errors raised by the workbench.

Each family carries the CLI exit code it maps to.
"""


class AmcError(Exception):
    exit_code = 1


class ContractError(AmcError, ValueError):
    """An argument violates an operation's contract (shape, range, ...)."""


class ConfigurationError(AmcError):
    exit_code = 1


class DataError(AmcError):
    exit_code = 2


class MissingArtifactError(DataError):
    def __init__(self, path, producer):
        self.path = path
        self.producer = producer
        super().__init__(
            f"missing artifact {path}: run `amc-shapft {producer}` first"
        )


class FormatError(DataError):
    pass


class BadMagicError(FormatError):
    def __init__(self, path, expected, found):
        super().__init__(f"{path}: bad magic {found!r}, expected {expected!r}")


class VersionMismatchError(FormatError):
    def __init__(self, path, expected, found):
        super().__init__(f"{path}: version {found} not supported (expected {expected})")


class TruncatedFileError(FormatError):
    def __init__(self, path, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"{path}: truncated file, expected {expected} bytes but got {actual}"
        )


class ChecksumError(FormatError):
    def __init__(self, path, stored, computed):
        super().__init__(
            f"{path}: CRC32 mismatch (stored {stored:08x}, computed {computed:08x})"
        )


class NumericalError(AmcError):
    exit_code = 3

    def __init__(self, message, op=None, layer=None):
        self.op = op
        self.layer = layer
        where = []
        if layer:
            where.append(f"layer '{layer}'")
        if op:
            where.append(f"op '{op}'")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
