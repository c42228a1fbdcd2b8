"""Spending profiles, trait scoring and dominant-trait ordering."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from microseg.errors import DimensionError, EmptyDatasetError, InvalidTraitError, SchemaError

TRAIT_NAMES = ("openness", "conscientiousness", "extraversion", "agreeableness", "neuroticism")
TRAIT_INITIALS = "OCEAN"
N_TRAITS = len(TRAIT_NAMES)

DEFAULT_NONZERO_THRESHOLD = 0.1


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SpendingProfile:
    """Normalized spending distribution of one customer over one period.

    ``shares`` may be passed as raw non-negative amounts; they are normalized
    to the simplex on construction.
    """

    customer_id: str
    period_index: int
    shares: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.shares, dtype=np.float64)
        if s.ndim != 1:
            raise DimensionError(f"shares must be a vector, got shape {s.shape}")
        if not np.all(np.isfinite(s)) or np.any(s < 0):
            raise SchemaError("shares must be finite and non-negative")
        total = s.sum()
        if total <= 0:
            raise SchemaError("shares must have positive total")
        if self.period_index < 0:
            raise SchemaError("period_index must be >= 0")
        object.__setattr__(self, "shares", _frozen(s / total))

    @property
    def k(self) -> int:
        return self.shares.shape[0]


@dataclass(frozen=True)
class CoefficientMatrix:
    """K x 5 linear weights mapping class shares to trait scores."""

    class_names: tuple
    values: np.ndarray
    trait_names: tuple = field(default=TRAIT_NAMES)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != N_TRAITS:
            raise DimensionError(f"coefficient matrix must be K x {N_TRAITS}, got {v.shape}")
        if len(self.class_names) != v.shape[0]:
            raise DimensionError("class_names length does not match matrix rows")
        if not np.all(np.isfinite(v)):
            raise SchemaError("coefficients must be finite")
        if tuple(self.trait_names) != TRAIT_NAMES:
            raise SchemaError(f"trait_names must be {TRAIT_NAMES}")
        object.__setattr__(self, "class_names", tuple(str(c) for c in self.class_names))
        object.__setattr__(self, "trait_names", TRAIT_NAMES)
        object.__setattr__(self, "values", _frozen(v))

    @property
    def k(self) -> int:
        return self.values.shape[0]

    def nonzero_rows(self, threshold: float = DEFAULT_NONZERO_THRESHOLD) -> np.ndarray:
        return nonzero_rows(self.values, threshold)


def nonzero_rows(values: np.ndarray, threshold: float = DEFAULT_NONZERO_THRESHOLD) -> np.ndarray:
    """Boolean row mask: a row counts when any entry reaches ``threshold`` x mean |entry|.

    An all-zero matrix has no non-zero rows.
    """
    values = np.asarray(values, dtype=np.float64)
    scale = np.mean(np.abs(values))
    if scale == 0:
        return np.zeros(values.shape[0], dtype=bool)
    return np.any(np.abs(values) >= threshold * scale, axis=1)


@dataclass(frozen=True)
class TraitVector:
    grades: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grades, dtype=np.float64)
        if g.shape != (N_TRAITS,):
            raise DimensionError(f"trait vector needs {N_TRAITS} grades")
        if not np.all(np.isfinite(g)):
            raise InvalidTraitError("trait grades must be finite")
        if np.any(g < 0) or np.any(g > 1):
            raise InvalidTraitError("trait grades must lie in [0, 1]")
        object.__setattr__(self, "grades", _frozen(g))


@dataclass(frozen=True)
class DominantOrder:
    """Trait indices sorted by descending grade, e.g. ``(4, 1, 0, 3, 2)``."""

    order: tuple

    def __post_init__(self):
        order = tuple(int(i) for i in self.order)
        if sorted(order) != list(range(N_TRAITS)):
            raise InvalidTraitError(f"not a permutation of the trait indices: {order}")
        object.__setattr__(self, "order", order)

    @property
    def dominant(self) -> int:
        return self.order[0]

    def prefix(self, depth: int) -> tuple:
        return self.order[:depth]

    def label(self) -> str:
        return format_order(self.order)

    @classmethod
    def parse(cls, text: str) -> "DominantOrder":
        return cls(parse_order(text))


def format_order(order: Sequence[int]) -> str:
    return ">".join(TRAIT_INITIALS[i] for i in order)


def parse_order(text: str) -> tuple:
    parts = [p for p in text.strip().split(">") if p]
    try:
        return tuple(TRAIT_INITIALS.index(p) for p in parts)
    except ValueError:
        raise SchemaError(f"bad dominant order {text!r}") from None


def score_traits(profile, coeffs: CoefficientMatrix) -> np.ndarray:
    """Raw trait scores ``shares @ coeffs.values``.

    ``profile`` is a :class:`SpendingProfile` or an array of shares whose last
    axis has length K, so whole populations can be scored at once.
    """
    shares = profile.shares if isinstance(profile, SpendingProfile) else np.asarray(profile, dtype=np.float64)
    if shares.shape[-1] != coeffs.k:
        raise DimensionError(f"profile has {shares.shape[-1]} classes, coefficients have {coeffs.k}")
    return shares @ coeffs.values


@dataclass(frozen=True)
class TraitScaler:
    """Per-trait min/max bounds learned from a population."""

    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mins", _frozen(self.mins))
        object.__setattr__(self, "maxs", _frozen(self.maxs))

    def transform(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        span = self.maxs - self.mins
        degenerate = ~(span > 0)
        safe = np.where(degenerate, 1.0, span)
        grades = np.where(degenerate, 0.5, (raw - self.mins) / safe)
        return np.clip(grades, 0.0, 1.0)

    def to_dict(self) -> dict:
        return {"min": self.mins.tolist(), "max": self.maxs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "TraitScaler":
        return cls(np.array(d["min"]), np.array(d["max"]))


def scale_population(raw_scores: np.ndarray):
    """Min-max scale raw scores per trait over the population.

    Returns ``(grades, scaler)``; traits with a zero range map to 0.5.
    """
    raw = np.asarray(raw_scores, dtype=np.float64)
    if raw.size == 0 or raw.shape[0] == 0:
        raise EmptyDatasetError("cannot scale an empty population")
    if raw.ndim != 2 or raw.shape[1] != N_TRAITS:
        raise DimensionError(f"raw scores must be N x {N_TRAITS}, got {raw.shape}")
    scaler = TraitScaler(raw.min(axis=0), raw.max(axis=0))
    return scaler.transform(raw), scaler


def dominant_order(traits) -> DominantOrder:
    grades = traits.grades if isinstance(traits, TraitVector) else np.asarray(traits, dtype=np.float64)
    if grades.shape != (N_TRAITS,):
        raise DimensionError(f"expected {N_TRAITS} grades, got shape {grades.shape}")
    return DominantOrder(tuple(dominant_orders(grades[None, :])[0]))


def dominant_orders(grades: np.ndarray) -> np.ndarray:
    """Vectorised dominant order for an N x 5 grade matrix (N x 5 int array)."""
    grades = np.asarray(grades, dtype=np.float64)
    if not np.all(np.isfinite(grades)):
        raise InvalidTraitError("trait grades must be finite")
    # stable sort on negated grades keeps ties in ascending trait index
    return np.argsort(-grades, axis=-1, kind="stable")
