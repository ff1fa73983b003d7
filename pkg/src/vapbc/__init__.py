"""Frame-wise backchannel timing and type prediction on a voice activity projection model."""

__version__ = "0.1.0"
