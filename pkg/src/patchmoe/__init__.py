"""Patch-level mixture-of-experts blocks for small vision transformers."""

from .tensor import Rng, Tensor, set_default_dtype

__all__ = ["Rng", "Tensor", "set_default_dtype"]

__version__ = "0.1.0"
