"""Deterministic bit-level CAN bus simulator with attacks and defenses."""

__version__ = "0.1.0"

from .codec import DataFrame, FrameId, decode_frame, encode_frame  # noqa: F401
