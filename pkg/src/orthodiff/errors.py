"""Exception hierarchy shared across the package."""


class OrthodiffError(Exception):
    """Base class for all package errors."""


class ConfigurationError(OrthodiffError):
    """Bad config value, incompatible model dimensions, or unknown kind."""


class InputError(OrthodiffError):
    """Runtime input violates an operation's preconditions."""


class PersistenceError(OrthodiffError):
    """Missing or unreadable on-disk artifact."""


class CorruptCorpusError(PersistenceError):
    """A corpus file decodes but violates sample invariants."""


class VersioningError(PersistenceError):
    """Serialized artifact has an unsupported schema version."""


class IntegrityError(PersistenceError):
    """Serialized artifact fails its checksum."""


class TrainingDiverged(OrthodiffError):
    """Training loss became non-finite; run aborted."""
