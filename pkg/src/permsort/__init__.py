"""Permutation sorting with a tiny PPO-trained transformer, plus attention probes."""

from permsort.errors import CheckpointVersionError, ContractViolation, DivergenceError

__version__ = "0.1.0"

__all__ = ["CheckpointVersionError", "ContractViolation", "DivergenceError", "__version__"]
