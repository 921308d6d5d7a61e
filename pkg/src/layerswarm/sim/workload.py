"""Request arrivals for the simulated workload.

Each image gets a Poisson request process. Its rate is drawn once, uniformly
between 0.001 and ``A * exp(B / s)`` requests per second, where ``s`` is the
image size in ``size_unit`` bytes (GiB by default); inter-arrival gaps are
exponential at that rate until the horizon.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import InvalidArgumentError
from .scenario import ImageSpec, Workload

RATE_FLOOR = 0.001


def rate_upper_bound(A: float, B: float, size_bytes: float, size_unit: float = float(1 << 30)) -> float:
    if size_bytes <= 0:
        raise InvalidArgumentError("image size must be positive")
    return A * math.exp(B / (size_bytes / size_unit))


def draw_rate(A: float, B: float, size_bytes: float, rng: np.random.Generator, size_unit: float = float(1 << 30)) -> float:
    hi = rate_upper_bound(A, B, size_bytes, size_unit)
    lo, hi = min(RATE_FLOOR, hi), max(RATE_FLOOR, hi)
    return float(rng.uniform(lo, hi)) if hi > lo else lo


def generate_arrivals(workload: Workload, image: ImageSpec, rng: np.random.Generator) -> list[float]:
    rate = draw_rate(workload.A, workload.B, image.size, rng, workload.size_unit)
    times = []
    t = 0.0
    while True:
        t += float(rng.exponential(1.0 / rate))
        if t >= workload.horizon:
            return times
        times.append(t)
