"""Mixture-of-depths laboratory: attention-rank profiling, MoD conversion and routing on a toy transformer."""

__version__ = "0.1.0"
