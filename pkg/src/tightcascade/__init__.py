"""Tightly integrated ASR/MT cascade for speech translation on a numpy autodiff engine."""

from .bridge import BridgeConfig, PosteriorSequence, bridge_forward, renormalize
from .models import ComponentGraph, FreezeMask, build_cascade, build_direct, build_tight, new_asr, new_mt

__version__ = "0.1.0"

__all__ = [
    "BridgeConfig",
    "ComponentGraph",
    "FreezeMask",
    "PosteriorSequence",
    "bridge_forward",
    "build_cascade",
    "build_direct",
    "build_tight",
    "new_asr",
    "new_mt",
    "renormalize",
]
