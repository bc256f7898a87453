"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to:
0 success, 2 usage/configuration, 3 payload or shape, 4 ingestion, 5 divergence.
"""


class P2MarkError(Exception):
    exit_code = 1


class ConfigurationError(P2MarkError, ValueError):
    exit_code = 2


class DomainError(P2MarkError, ValueError):
    exit_code = 2


class PayloadShapeError(P2MarkError, ValueError):
    """Watermark length disagrees with the encoder, decoder or a second watermark."""

    exit_code = 3


class FeatureShapeError(P2MarkError, ValueError):
    exit_code = 3


class StructuralError(P2MarkError, ValueError):
    exit_code = 3


class LayoutError(StructuralError):
    pass


class InputLengthError(P2MarkError, ValueError):
    exit_code = 3


class IngestionError(P2MarkError, OSError):
    exit_code = 4


class DivergenceError(P2MarkError, RuntimeError):
    exit_code = 5

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class SequencingError(P2MarkError, RuntimeError):
    """Generator step attempted without a watermark gradient from the same batch."""


class SkippedAttack(P2MarkError):
    """An attack could not run in this environment (missing external codec)."""
