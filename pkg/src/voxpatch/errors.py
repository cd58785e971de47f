"""Exception hierarchy shared by every voxpatch module.

Each class carries a stable ``exit_code`` so the CLI can map failures to
machine-parseable single-line errors.
"""


class VoxPatchError(Exception):
    exit_code = 1


class UsageError(VoxPatchError):
    exit_code = 2


class FileError(VoxPatchError):
    exit_code = 3


class DimensionMismatch(VoxPatchError):
    exit_code = 4


class InvalidRatio(VoxPatchError):
    exit_code = 5


class EmptyGrid(VoxPatchError):
    exit_code = 6


class UnknownCategory(VoxPatchError):
    exit_code = 7


class ConfigError(VoxPatchError):
    exit_code = 8


class ContextOverflow(VoxPatchError):
    exit_code = 9


class Divergence(VoxPatchError):
    exit_code = 10


class FrozenSetViolation(VoxPatchError):
    exit_code = 11


class CorruptCheckpoint(VoxPatchError):
    exit_code = 12


class ConfigMismatch(VoxPatchError):
    exit_code = 13


class VoxbError(VoxPatchError):
    """Malformed VOXB payload (bad magic, version, or size)."""

    exit_code = 14


class UnsupportedRotation(VoxPatchError):
    exit_code = 15


class EmptyShape(VoxPatchError):
    exit_code = 16


class UnknownToken(VoxPatchError):
    exit_code = 17
