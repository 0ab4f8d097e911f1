"""Speaker-conditioned serialized output training at toy scale."""

__version__ = "0.1.0"
