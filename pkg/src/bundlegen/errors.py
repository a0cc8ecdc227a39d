"""Exception types shared across the package."""


class BundlegenError(Exception):
    """Base class for all package errors."""


class ParseError(BundlegenError):
    """An input file contains a malformed line."""


class ValidationError(BundlegenError):
    """Input data violates a structural invariant (e.g. an empty bundle)."""


class ConfigError(BundlegenError):
    """A configuration value or key is invalid."""


class SamplingError(BundlegenError):
    """A triple sampler cannot produce a valid sample."""


class CheckpointError(BundlegenError):
    """A checkpoint file is unreadable, truncated, or version-incompatible."""


class TrainingError(BundlegenError):
    """Training encountered a non-recoverable numeric failure."""
