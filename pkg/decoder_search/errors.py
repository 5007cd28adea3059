"""
DECODER SEARCH - ERROR HIERARCHY
================================

Every failure the package raises derives from DecoderSearchError. Each class
carries the process exit code the CLI maps it to.
"""


class DecoderSearchError(Exception):
    """Base class for all decoder search failures"""
    exit_code = 1


class ConfigError(DecoderSearchError):
    """Invalid plan or policy configuration"""
    exit_code = 3


class CacheError(DecoderSearchError):
    """Missing or stale dataset / feature cache"""
    exit_code = 4


class SearchSpaceError(DecoderSearchError):
    """Malformed decoder configuration or token sequence"""
    exit_code = 5

    def __init__(self, message: str, position: int = None, vocab_size: int = None):
        super().__init__(message)
        self.position = position
        self.vocab_size = vocab_size


class DispatchError(DecoderSearchError):
    """A job could not be completed by the evaluation farm"""
    exit_code = 6


class ProtocolError(DispatchError):
    """Malformed frame, version or plan-hash mismatch"""


class CheckpointError(DecoderSearchError):
    """Unreadable checkpoint (magic, version or payload mismatch)"""
    exit_code = 7


class DivergenceError(DecoderSearchError):
    """Training produced non-finite values"""
    exit_code = 8


class ControllerError(DivergenceError):
    """Controller logits or surrogate became non-finite"""


class GraphError(DecoderSearchError):
    """Decoder graph could not be compiled"""
    exit_code = 9


class ShapeError(GraphError):
    """Tensor shapes are inconsistent for an operation"""
