"""Exception types shared across the package.

Each maps to a CLI exit code (see ``biview.cli``): ConfigError -> 2,
DataError -> 3, NumericalError -> 4.
"""


class BiviewError(Exception):
    """Base class for package errors."""


class ShapeError(BiviewError, ValueError):
    """Tensor shapes are incompatible for the requested operation.

    Messages always name both offending shapes.
    """


class ConfigError(BiviewError, ValueError):
    """Invalid configuration: unknown keys, out-of-range values, bad flags."""


class DataError(BiviewError, ValueError):
    """Invalid dataset contents: malformed manifests, missing files, bad masks."""


class NumericalError(BiviewError, RuntimeError):
    """A numerical invariant broke: non-finite loss or gradient, degenerate input."""


class CheckpointError(BiviewError, ValueError):
    """Malformed checkpoint file or architecture fingerprint mismatch."""
