"""Per-iteration balance factors for the reference cross-attention branch."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LambdaSchedule:
    values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        for v in self.values:
            _check_unit(v)

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    def __getitem__(self, i):
        return self.values[i]


def _check_unit(value: float, name: str = "lambda") -> None:
    if not np.isfinite(value) or not 0.0 <= value <= 1.0:
        raise ValueError(f"{name}={value} outside [0, 1]")


def _check_length(length: int) -> None:
    if isinstance(length, bool) or not isinstance(length, (int, np.integer)) or length < 1:
        raise ValueError(f"schedule length must be a positive integer, got {length!r}")


def linear_schedule(lambda_start: float, lambda_end: float, length: int) -> LambdaSchedule:
    """Evenly spaced values from ``lambda_start`` to ``lambda_end`` inclusive.

    A length-1 schedule is ``[lambda_start]``.
    """
    _check_unit(lambda_start, "lambda_start")
    _check_unit(lambda_end, "lambda_end")
    _check_length(length)
    return LambdaSchedule(tuple(np.linspace(lambda_start, lambda_end, int(length)).tolist()))


def fixed_schedule(value: float, length: int) -> LambdaSchedule:
    _check_unit(value)
    _check_length(length)
    return LambdaSchedule((float(value),) * int(length))


def schedule_for(config) -> LambdaSchedule | None:
    """Schedule described by a RunConfig; None when there are no refinement iterations."""
    if config.iterations == 0:
        return None
    if config.lambda_mode == "fixed":
        return fixed_schedule(config.lambda_value, config.iterations)
    return linear_schedule(config.lambda_start, config.lambda_end, config.iterations)
