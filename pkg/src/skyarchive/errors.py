"""Exception hierarchy shared by every subsystem.

Each error carries a stable ``code`` string and the process ``exit_code`` the
CLI maps it to (0 success, 1 usage, 2 data error, 3 unavailable).
"""

from __future__ import annotations

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_UNAVAILABLE = 3


class ArchiveError(Exception):
    code = "E_ARCHIVE"
    exit_code = EXIT_DATA

    def to_dict(self) -> dict:
        return {"error": self.code, "message": str(self)}


# catalog store
class DuplicatePartition(ArchiveError):
    code = "E_DUPLICATE_PARTITION"


class FrozenPartition(ArchiveError):
    code = "E_FROZEN_PARTITION"


class WrongPartition(ArchiveError):
    code = "E_WRONG_PARTITION"


class AlreadyFrozen(ArchiveError):
    code = "E_ALREADY_FROZEN"


class UnknownPartition(ArchiveError):
    code = "E_UNKNOWN_PARTITION"


# sky index
class InvalidCoordinates(ArchiveError, ValueError):
    code = "E_INVALID_COORDINATES"


# ingest
class ValidationRequired(ArchiveError):
    code = "E_VALIDATION_REQUIRED"


class ValidationFailed(ArchiveError):
    code = "E_VALIDATION_FAILED"


class NightClosed(ArchiveError):
    code = "E_NIGHT_CLOSED"


class MergePending(ArchiveError):
    code = "E_MERGE_PENDING"


class SimulatedCrash(ArchiveError):
    """Raised by fault injection in the middle of a stage."""

    code = "E_SIMULATED_CRASH"


# merge
class NightOpen(ArchiveError):
    code = "E_NIGHT_OPEN"


# versions, provenance, files
class QAFailed(ArchiveError):
    code = "E_QA_FAILED"


class AlreadyReleased(ArchiveError):
    code = "E_ALREADY_RELEASED"


class UnknownObject(ArchiveError):
    code = "E_UNKNOWN_OBJECT"


class UnknownVersion(ArchiveError):
    code = "E_UNKNOWN_VERSION"


class UnknownRelease(ArchiveError):
    code = "E_UNKNOWN_RELEASE"


class UnknownRecipe(ArchiveError):
    code = "E_UNKNOWN_RECIPE"


class UnknownProduct(ArchiveError):
    code = "E_UNKNOWN_PRODUCT"


class InputsMissing(ArchiveError):
    code = "E_INPUTS_MISSING"


class ChecksumMismatch(ArchiveError):
    code = "E_CHECKSUM_MISMATCH"


class UnknownLogicalPath(ArchiveError):
    code = "E_UNKNOWN_LOGICAL_PATH"


class DuplicateLogicalPath(ArchiveError):
    code = "E_DUPLICATE_LOGICAL_PATH"


class PermanentFile(ArchiveError):
    code = "E_PERMANENT_FILE"


# replicas and routing
class NotHosted(ArchiveError):
    code = "E_NOT_HOSTED"


class NoCapacity(ArchiveError):
    code = "E_NO_CAPACITY"
    exit_code = EXIT_UNAVAILABLE


class SourceMissing(ArchiveError):
    code = "E_SOURCE_MISSING"


class UnknownNode(ArchiveError):
    code = "E_UNKNOWN_NODE"


class UnavailablePartition(ArchiveError):
    code = "E_UNAVAILABLE_PARTITION"
    exit_code = EXIT_UNAVAILABLE

    def __init__(self, key, message: str | None = None):
        self.key = key
        super().__init__(message or f"no alive replica for partition {key}")


class ConfigError(ArchiveError):
    code = "E_CONFIG"
    exit_code = EXIT_USAGE
