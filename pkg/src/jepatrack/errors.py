"""Exception hierarchy. Every error carries a machine-parsable category string."""


class JepatrackError(Exception):
    """Base class for all package errors."""

    category = "error"


class ConfigurationError(JepatrackError):
    """Invalid configuration value (bad field, out-of-range hyperparameter)."""

    category = "config"


class DomainError(JepatrackError):
    """Input outside an operation's domain (degenerate box, bad lengths)."""

    category = "domain"


class ShapeError(JepatrackError):
    """Tensor/grid shape mismatch between operands."""

    category = "shape"


class ParseError(JepatrackError):
    """Malformed file content; message names file and field."""

    category = "parse"


class UnsupportedVersionError(ParseError):
    """File format version not understood by this build."""

    category = "version"


class PrerequisiteError(JepatrackError):
    """A required artifact from an earlier pipeline stage is missing."""

    category = "prerequisite"


class InitializationError(JepatrackError):
    """Checkpoint/profile mismatch or missing weights at setup time."""

    category = "init"


class StateError(JepatrackError):
    """Operation called on an object in the wrong lifecycle state."""

    category = "state"
