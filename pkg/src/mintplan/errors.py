"""Shared exception types."""


class MintplanError(Exception):
    """Base class for all package errors."""


class DimensionMismatchError(MintplanError):
    """Object counts or vector shapes disagree."""


class ContradictionError(MintplanError):
    """A refinement or answer would leave an empty descriptor set."""


class UnresolvedGapError(MintplanError):
    """Operation requires type and subtype to be resolved first."""


class EncodingError(MintplanError):
    """A gap cannot be encoded as a finite model key."""


class InvalidStateError(MintplanError):
    """Environment stepped after the episode finished."""


class CapacityError(MintplanError):
    """Enumerated state space exceeds the configured cap."""


class IncompatibleMdpError(MintplanError):
    """Two tabular MDPs differ in shape or discount."""


class InterpolationError(MintplanError):
    """Descriptor interpolation undefined (symbol mismatch)."""


class NoQueryNeeded(MintplanError):
    """Tree already has a single candidate action; nothing to ask."""


class ModelLoadError(MintplanError):
    """Model file is missing, corrupt, or has an unknown format version."""


class ConfigError(MintplanError):
    """Benchmark or service configuration is invalid."""
