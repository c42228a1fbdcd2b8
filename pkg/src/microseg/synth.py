"""Seeded synthetic spending populations and raw-transaction aggregation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from microseg.domain import (
    N_TRAITS,
    CoefficientMatrix,
    SpendingProfile,
    TraitScaler,
    dominant_orders,
    scale_population,
    score_traits,
)
from microseg.errors import ConfigError, EmptyDatasetError, EmptyWindowError, SchemaError


@dataclass(frozen=True)
class SynthConfig:
    n_customers: int = 2000
    n_periods: int = 6
    k_classes: int = 97
    n_nonzero_rows: int = 61
    trait_signal_strength: float = 3.0
    noise_scale: float = 0.1
    regime_switch_fraction: float = 0.1
    seed: int = 42
    idiosyncratic_scale: float = 1.5

    def __post_init__(self):
        if self.n_customers < 1:
            raise EmptyDatasetError(f"n_customers must be >= 1, got {self.n_customers}")
        if self.n_periods < 2:
            raise ConfigError("n_periods must be >= 2")
        if self.k_classes < 5:
            raise ConfigError("k_classes must be >= 5")
        if not 0 <= self.n_nonzero_rows <= self.k_classes:
            raise ConfigError("n_nonzero_rows must lie in [0, k_classes]")
        if self.trait_signal_strength < 0 or self.noise_scale < 0 or self.idiosyncratic_scale < 0:
            raise ConfigError("signal strength and noise scales must be >= 0")
        if not 0 <= self.regime_switch_fraction <= 1:
            raise ConfigError("regime_switch_fraction must lie in [0, 1]")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown synth config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class Dataset:
    """A population of customers with T period profiles each.

    Arrays are indexed by customer along axis 0. ``switch_period`` is -1 for
    customers without a regime switch.
    """

    customer_ids: tuple
    profiles: np.ndarray          # N x T x K
    traits: np.ndarray            # N x 5, from period-averaged profiles
    period_traits: np.ndarray     # N x T x 5
    coefficients: CoefficientMatrix
    scaler: TraitScaler
    switch_period: np.ndarray     # N ints
    intended_dominant: np.ndarray  # N ints, generator intent before any switch
    config: SynthConfig | None = None

    def __post_init__(self):
        n, t, k = self.profiles.shape
        if len(self.customer_ids) != n:
            raise SchemaError("customer_ids length does not match profiles")
        if k != self.coefficients.k:
            raise SchemaError("profile width does not match coefficient rows")
        if t < 1:
            raise SchemaError("profiles need at least one period")
        sp = np.asarray(self.switch_period)
        if np.any((sp != -1) & ((sp < 1) | (sp > t - 1))):
            raise SchemaError("switch periods must lie in [1, T-1]")

    @property
    def n_customers(self) -> int:
        return self.profiles.shape[0]

    @property
    def n_periods(self) -> int:
        return self.profiles.shape[1]

    @property
    def k(self) -> int:
        return self.profiles.shape[2]

    @property
    def regime_switch(self) -> np.ndarray:
        return np.asarray(self.switch_period) >= 1

    @property
    def orders(self) -> np.ndarray:
        return dominant_orders(self.traits)

    @property
    def period_orders(self) -> np.ndarray:
        return dominant_orders(self.period_traits)

    @property
    def mean_profiles(self) -> np.ndarray:
        return self.profiles.mean(axis=1)

    def profile(self, i: int, t: int) -> SpendingProfile:
        return SpendingProfile(self.customer_ids[i], t, self.profiles[i, t])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return dataclasses.replace(
            self,
            customer_ids=tuple(self.customer_ids[i] for i in idx),
            profiles=self.profiles[idx],
            traits=self.traits[idx],
            period_traits=self.period_traits[idx],
            switch_period=np.asarray(self.switch_period)[idx],
            intended_dominant=np.asarray(self.intended_dominant)[idx],
        )


def generate_coefficients(k_classes: int, n_nonzero_rows: int, seed: int) -> CoefficientMatrix:
    """Sparse random scoring matrix: ``n_nonzero_rows`` standard-normal rows, the rest zero."""
    if n_nonzero_rows > k_classes or n_nonzero_rows < 0:
        raise ConfigError(f"n_nonzero_rows={n_nonzero_rows} must lie in [0, {k_classes}]")
    rng = np.random.default_rng(seed)
    rows = np.sort(rng.choice(k_classes, size=n_nonzero_rows, replace=False))
    values = np.zeros((k_classes, N_TRAITS))
    values[rows] = rng.standard_normal((n_nonzero_rows, N_TRAITS))
    names = tuple(f"class_{i:03d}" for i in range(k_classes))
    return CoefficientMatrix(names, values)


def softplus(x):
    return np.logaddexp(0.0, x)


# latent intensities: one dominant trait, the others well below it
DOMINANT_RANGE = (0.8, 1.0)
LESSER_RANGE = (0.0, 0.3)


def _draw_latent(rng, dominant):
    n = dominant.shape[0]
    latent = rng.uniform(*LESSER_RANGE, size=(n, N_TRAITS))
    latent[np.arange(n), dominant] = rng.uniform(*DOMINANT_RANGE, size=n)
    return latent


def label_population(profiles: np.ndarray, coeffs: CoefficientMatrix, scaler: TraitScaler | None = None):
    """Trait grades for customers and for each of their periods.

    The scaler is fitted on period-averaged scores unless one is given.
    Returns ``(traits, period_traits, scaler)``.
    """
    raw = score_traits(profiles.mean(axis=1), coeffs)
    if scaler is None:
        traits, scaler = scale_population(raw)
    else:
        traits = scaler.transform(raw)
    period_traits = scaler.transform(score_traits(profiles, coeffs))
    return traits, period_traits, scaler


def generate_population(config: SynthConfig, coeffs: CoefficientMatrix) -> Dataset:
    """Draw a synthetic population whose spending reflects latent trait intensities.

    Each customer gets a latent 5-vector with one clearly dominant trait. The
    log-spending signal is ``baseline + signal * coeffs @ latent`` plus customer
    noise; every period adds its own noise before the softplus and the
    normalization. Switched customers take a new latent vector with a different
    dominant trait from their switch period on.
    """
    if coeffs.k != config.k_classes:
        raise ConfigError(f"coefficients have {coeffs.k} rows, config wants {config.k_classes}")
    rng = np.random.default_rng(config.seed)
    n, t_len, k = config.n_customers, config.n_periods, config.k_classes
    c = coeffs.values

    baseline = rng.standard_normal(k)
    dominant = rng.integers(0, N_TRAITS, size=n)
    latent = _draw_latent(rng, dominant)
    customer_noise = config.idiosyncratic_scale * rng.standard_normal((n, k))
    period_noise = config.noise_scale * rng.standard_normal((n, t_len, k))

    n_switch = int(round(config.regime_switch_fraction * n))
    switch_period = np.full(n, -1, dtype=np.int64)
    switchers = np.sort(rng.permutation(n)[:n_switch])
    switch_period[switchers] = rng.integers(1, t_len, size=n_switch)
    new_dominant = (dominant[switchers] + rng.integers(1, N_TRAITS, size=n_switch)) % N_TRAITS
    new_latent = _draw_latent(rng, new_dominant)

    signal = config.trait_signal_strength
    pre = baseline + signal * latent @ c.T + customer_noise                       # N x K
    pre_t = np.repeat(pre[:, None, :], t_len, axis=1)
    if n_switch:
        pre_new = baseline + signal * new_latent @ c.T + customer_noise[switchers]
        after = np.arange(t_len)[None, :] >= switch_period[switchers][:, None]     # S x T
        pre_t[switchers] = np.where(after[:, :, None], pre_new[:, None, :], pre_t[switchers])

    raw = softplus(pre_t + period_noise)
    profiles = raw / raw.sum(axis=-1, keepdims=True)

    traits, period_traits, scaler = label_population(profiles, coeffs)
    ids = tuple(f"c{i:05d}" for i in range(n))
    return Dataset(ids, profiles, traits, period_traits, coeffs, scaler,
                   switch_period, dominant, config)


def aggregate_transactions(raw_rows: Iterable, window_periods: int, n_classes: int,
                           n_buckets: int | None = None) -> list:
    """Sum raw transaction amounts into windows and normalize each window.

    ``raw_rows`` holds ``(customer_id, bucket, class_id, amount)`` tuples.
    Buckets are integer time slots starting at 0; ``n_buckets`` defaults to
    one past the largest bucket seen. Profiles come back grouped by customer in
    order of first appearance, then by window.
    """
    if window_periods < 1:
        raise ConfigError("window_periods must be >= 1")
    rows = list(raw_rows)
    if not rows:
        raise EmptyDatasetError("no transactions")
    customers: dict = {}
    cust_idx, buckets, classes, amounts = [], [], [], []
    for cid, bucket, class_id, amount in rows:
        class_id, bucket, amount = int(class_id), int(bucket), float(amount)
        if not 0 <= class_id < n_classes:
            raise SchemaError(f"unknown class_id {class_id}")
        if bucket < 0:
            raise SchemaError(f"negative bucket {bucket}")
        if not amount >= 0:
            raise SchemaError(f"amount must be >= 0, got {amount}")
        cust_idx.append(customers.setdefault(cid, len(customers)))
        buckets.append(bucket)
        classes.append(class_id)
        amounts.append(amount)
    buckets = np.asarray(buckets)
    if n_buckets is None:
        n_buckets = int(buckets.max()) + 1
    elif buckets.max() >= n_buckets:
        raise SchemaError("bucket index beyond n_buckets")
    if n_buckets % window_periods:
        raise ConfigError(f"window {window_periods} does not divide {n_buckets} buckets")
    n_windows = n_buckets // window_periods

    totals = np.zeros((len(customers), n_windows, n_classes))
    np.add.at(totals, (np.asarray(cust_idx), buckets // window_periods, np.asarray(classes)),
              np.asarray(amounts))
    out = []
    for cid, ci in customers.items():
        for w in range(n_windows):
            if totals[ci, w].sum() <= 0:
                raise EmptyWindowError(f"customer {cid} has no spending in window {w}")
            out.append(SpendingProfile(cid, w, totals[ci, w]))
    return out


def transactions_from_dataset(dataset: Dataset, seed: int = 0, mean_total: float = 20000.0):
    """Raw per-period transaction rows consistent with the dataset's profiles.

    One bucket per period; each customer has a log-normal annual spend.
    Amounts are rounded to cents, so re-aggregation matches the profiles to
    about 1e-6.
    """
    rng = np.random.default_rng(seed)
    n, t_len, k = dataset.profiles.shape
    totals = mean_total * rng.lognormal(0.0, 0.5, size=(n, 1, 1))
    amounts = np.round(dataset.profiles * totals, 2)
    cust, bucket, cls = np.meshgrid(np.arange(n), np.arange(t_len), np.arange(k), indexing="ij")
    ids = np.asarray(dataset.customer_ids)
    return ids[cust.ravel()], bucket.ravel(), cls.ravel(), amounts.ravel()
