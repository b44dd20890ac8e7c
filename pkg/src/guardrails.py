"""Guardrails: error taxonomy and input/output validation for tensors and tables.

Responsibilities:
1. Name every failure the pipeline can report (shape, numeric, mask format, usage, config...).
2. Check the one-hot invariant of semantic masks entering or leaving a module.
3. Reject non-finite tensors and loss reports before they reach an optimizer step.

The CLI maps these classes onto exit codes (2 usage/config, 3 numeric failure).
"""
from __future__ import annotations
import math
from typing import Dict, Any

import torch


class PipelineError(Exception):
    """Base class for every error raised on purpose by this package."""


class DimensionError(PipelineError, ValueError):
    pass


class NumericError(PipelineError, ArithmeticError):
    pass


class MaskFormatError(PipelineError, ValueError):
    pass


class MaskInvariantError(PipelineError, ValueError):
    pass


class UsageError(PipelineError, ValueError):
    pass


class ConfigError(PipelineError, ValueError):
    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field_path = field_path


class ProviderError(PipelineError, LookupError):
    def __init__(self, name: str, message: str = "provider not available"):
        super().__init__(f"{name}: {message}")
        self.name = name


class CorruptionError(PipelineError, IOError):
    pass


class RunLockedError(PipelineError, RuntimeError):
    pass


class NonFiniteLossError(PipelineError, ArithmeticError):
    def __init__(self, step: int, report: Dict[str, float]):
        bad = sorted(k for k, v in report.items() if not math.isfinite(v))
        super().__init__(f"non-finite loss at step {step}: {', '.join(bad)}")
        self.step = step
        self.report = dict(report)


def guard_finite(name: str, t: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"{name} contains non-finite values")
    return t


def guard_same_spatial(a: torch.Tensor, b: torch.Tensor, what: str = "inputs") -> None:
    if a.shape[-2:] != b.shape[-2:]:
        raise DimensionError(f"{what}: spatial dims {tuple(a.shape[-2:])} != {tuple(b.shape[-2:])}")


def guard_one_hot(mask: torch.Tensor, channel_dim: int = 1) -> torch.Tensor:
    """Raise MaskInvariantError unless entries are in {0,1} and channels sum to 1."""
    binary = (mask == 0) | (mask == 1)
    if not bool(binary.all()):
        raise MaskInvariantError("mask entries must be 0 or 1")
    if not bool((mask.sum(dim=channel_dim) == 1).all()):
        raise MaskInvariantError("mask channels must sum to 1 at every pixel")
    return mask


def guard_losses(step: int, report: Dict[str, Any]) -> Dict[str, float]:
    """Convert a loss report to floats; NonFiniteLossError if any term is nan/inf."""
    floats = {k: float(v) for k, v in report.items()}
    if not all(math.isfinite(v) for v in floats.values()):
        raise NonFiniteLossError(step, floats)
    return floats
