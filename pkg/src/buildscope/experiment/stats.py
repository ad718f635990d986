"""Box-plot statistics and grouped means."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from ..errors import DomainError

QUARTILE_METHOD = "type7-linear"
TUKEY_K = 1.5


def exact_mean(xs: Sequence[float]) -> float:
    """Correctly rounded arithmetic mean.

    The exact sum is carried as a short expansion of doubles: each ``fsum``
    pass returns the rounded value of what the previous terms left over.
    """
    if not xs:
        raise DomainError("mean of an empty sample")
    terms: list[float] = []
    while True:
        t = math.fsum([*xs, *(-p for p in terms)])
        if t == 0.0:
            break
        terms.append(t)
    total = sum((Fraction(t) for t in terms), Fraction(0))
    return float(total / len(xs))


def quantile_sorted(xs: Sequence[float], p: float) -> float:
    """Linear interpolation between closest ranks on sorted data (type 7)."""
    h = (len(xs) - 1) * p
    lo = math.floor(h)
    hi = min(lo + 1, len(xs) - 1)
    a, b = xs[lo], xs[hi]
    q = a + (h - lo) * (b - a)
    return min(max(q, a), b)


@dataclass(frozen=True)
class BoxStats:
    n: int
    min: float
    q1: float
    median: float
    q3: float
    max: float
    mean: float
    iqr: float
    lower_whisker: float
    upper_whisker: float
    outliers: tuple[float, ...]

    @property
    def lower_fence(self) -> float:
        return self.q1 - TUKEY_K * self.iqr

    @property
    def upper_fence(self) -> float:
        return self.q3 + TUKEY_K * self.iqr

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["outliers"] = list(self.outliers)
        return d


def box_stats(samples: Sequence[float]) -> BoxStats:
    """Quartiles, mean, Tukey whiskers and outliers of a sample."""
    if len(samples) == 0:
        raise DomainError("box statistics need at least one sample")
    xs = sorted(float(x) for x in samples)
    if not all(math.isfinite(x) for x in xs):
        raise DomainError("samples must be finite")
    q1, med, q3 = (quantile_sorted(xs, p) for p in (0.25, 0.5, 0.75))
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - TUKEY_K * iqr, q3 + TUKEY_K * iqr
    inside = [x for x in xs if lo_fence <= x <= hi_fence]
    return BoxStats(
        n=len(xs), min=xs[0], q1=q1, median=med, q3=q3, max=xs[-1],
        mean=exact_mean(xs), iqr=iqr,
        lower_whisker=inside[0], upper_whisker=inside[-1],
        outliers=tuple(x for x in xs if x < lo_fence or x > hi_fence),
    )


@dataclass(frozen=True)
class MeansTable:
    """Mean CLIP percent per (scene, model); ``None`` marks a group without data."""

    scenes: tuple[str, ...]
    models: tuple[str, ...]
    values: dict[tuple[str, str], float | None]

    def get(self, scene: str, model: str) -> float | None:
        return self.values[(scene, model)]

    def rows(self):
        for s in self.scenes:
            yield s, [self.values[(s, m)] for m in self.models]


def per_scene_model_means(manifest, metric: str = "clip_pct") -> MeansTable:
    groups: dict[tuple[str, str], list[float]] = {
        (s, m): [] for s in manifest.scene_names for m in manifest.model_labels}
    for cell in manifest.cells:
        if cell.status != "ok":
            continue
        for t in cell.triplets:
            if t.ok:
                groups[(cell.scene, cell.model)].append(getattr(t, metric))
    values = {k: (exact_mean(v) if v else None) for k, v in groups.items()}
    return MeansTable(tuple(manifest.scene_names), tuple(manifest.model_labels), values)
