"""Severity-aware input normalization.

Mixed images change their mean and variance with the mixing ratio t, which
breaks plain dataset-level standardization.  This module precomputes, for n
disjoint t-bins, the expected patch mean and standard deviation of mixed
patches, so inputs can be standardized per-t ("normalize") and predictions
mapped back ("denormalize").  It also carries the closed-form variance model
E[var(t)] = (1-t)^2 E[var(c0)] + t^2 E[var(c1)] + 2 t (1-t) Cov(c0, c1),
which holds exactly for per-patch statistics of pixel-wise mixtures.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as data_mod
from .errors import ConfigurationError, FingerprintMismatchError
from .mixing import mix, validate_ratio

TABLE_FORMAT_VERSION = 1


@dataclass
class ChannelStats:
    """Per-patch first/second-moment statistics of the two pure channels."""

    mean_c0: float
    mean_c1: float
    var_c0: float  # expected within-patch variance of pure c0 patches
    var_c1: float
    cov: float  # expected within-patch covariance between aligned patches

    def as_dict(self):
        return {
            "mean_c0": self.mean_c0,
            "mean_c1": self.mean_c1,
            "var_c0": self.var_c0,
            "var_c1": self.var_c1,
            "cov": self.cov,
        }


@dataclass
class TargetChannelStats:
    """Standardization constants for the two prediction targets."""

    mean_c0: float
    std_c0: float
    mean_c1: float
    std_c1: float

    def __post_init__(self):
        if self.std_c0 <= 0 or self.std_c1 <= 0:
            raise ConfigurationError(
                f"target stds must be positive, got {self.std_c0}, {self.std_c1}"
            )

    def as_dict(self):
        return {
            "mean_c0": self.mean_c0,
            "std_c0": self.std_c0,
            "mean_c1": self.mean_c1,
            "std_c1": self.std_c1,
        }


@dataclass
class ScinTable:
    """Per-t-bin mean/std lookup for mixed-patch standardization."""

    n_bins: int
    mu: np.ndarray
    sigma: np.ndarray
    samples_per_bin: np.ndarray
    channel_stats: ChannelStats
    patch_size_used: int
    dataset_fingerprint: str
    version: int = TABLE_FORMAT_VERSION

    def __post_init__(self):
        self.mu = np.asarray(self.mu, np.float64)
        self.sigma = np.asarray(self.sigma, np.float64)
        self.samples_per_bin = np.asarray(self.samples_per_bin, np.int64)
        if self.n_bins < 1:
            raise ConfigurationError(f"n_bins must be >= 1, got {self.n_bins}")
        for name, arr in (("mu", self.mu), ("sigma", self.sigma),
                          ("samples_per_bin", self.samples_per_bin)):
            if arr.shape != (self.n_bins,):
                raise ConfigurationError(f"{name} must have length n_bins={self.n_bins}")
        populated = self.samples_per_bin > 0
        if not (self.sigma[populated] > 0).all():
            raise ConfigurationError("every populated bin must have a positive sigma")


def bin_index(t, n_bins: int):
    """Bin lookup floor(t * n), with t = 1 clamped into the last bin."""
    t_arr = np.asarray(t, dtype=np.float64)
    idx = np.minimum((t_arr * n_bins).astype(np.int64), n_bins - 1)
    return int(idx) if t_arr.ndim == 0 else idx


def build_table(
    fs: data_mod.ChannelFrameSet,
    patch_size: int = 48,
    n_bins: int = 100,
    samples_per_bin_target: int = 2000,
    rng_seed: int = 0,
) -> ScinTable:
    """Estimate per-bin mixed-patch statistics from the training split.

    For each bin i, draws aligned patch pairs, mixes them at t uniform in
    [i/n, (i+1)/n), and stores the average of per-patch means and stds.  Each
    bin consumes its own child RNG stream, so the result does not depend on
    bin evaluation order.
    """
    if samples_per_bin_target < 1:
        raise ConfigurationError("samples_per_bin_target must be >= 1")
    if n_bins < 1:
        raise ConfigurationError("n_bins must be >= 1")
    sampler = data_mod.PatchSampler(fs, "train", patch_size)
    streams = np.random.SeedSequence(rng_seed).spawn(n_bins + 1)

    mu = np.zeros(n_bins)
    sigma = np.zeros(n_bins)
    counts = np.zeros(n_bins, np.int64)
    for i in range(n_bins):
        rng = np.random.default_rng(streams[i])
        a0, a1 = sampler.sample(rng, samples_per_bin_target)
        t = rng.uniform(i / n_bins, (i + 1) / n_bins, samples_per_bin_target).astype(np.float32)
        mixed = mix(a0, a1, t)
        mu[i] = float(mixed.mean(axis=(1, 2), dtype=np.float64).mean())
        sigma[i] = float(mixed.std(axis=(1, 2), dtype=np.float64).mean())
        counts[i] = samples_per_bin_target
    if not (sigma > 0).all():
        raise ConfigurationError("degenerate data: some bins have zero patch std")

    stats_rng = np.random.default_rng(streams[n_bins])
    channel_stats = _estimate_channel_stats(sampler, stats_rng, samples_per_bin_target * 2)

    return ScinTable(
        n_bins=n_bins,
        mu=mu,
        sigma=sigma,
        samples_per_bin=counts,
        channel_stats=channel_stats,
        patch_size_used=patch_size,
        dataset_fingerprint=data_mod.fingerprint(fs),
    )


def _estimate_channel_stats(sampler, rng, n_samples: int) -> ChannelStats:
    a0, a1 = sampler.sample(rng, n_samples)
    m0 = a0.mean(axis=(1, 2), dtype=np.float64)
    m1 = a1.mean(axis=(1, 2), dtype=np.float64)
    v0 = a0.var(axis=(1, 2), dtype=np.float64)
    v1 = a1.var(axis=(1, 2), dtype=np.float64)
    cov = ((a0 - m0[:, None, None]) * (a1 - m1[:, None, None])).mean(
        axis=(1, 2), dtype=np.float64
    )
    return ChannelStats(
        mean_c0=float(m0.mean()),
        mean_c1=float(m1.mean()),
        var_c0=float(v0.mean()),
        var_c1=float(v1.mean()),
        cov=float(cov.mean()),
    )


def _bin_stats(t, table: ScinTable):
    """Per-sample (mu, sigma) broadcastable against images."""
    t_arr = np.asarray(t, dtype=np.float64)
    if t_arr.ndim == 0:
        validate_ratio(t)
        b = bin_index(float(t_arr), table.n_bins)
        return np.float32(table.mu[b]), np.float32(table.sigma[b])
    if not ((t_arr >= 0) & (t_arr <= 1)).all():
        raise ConfigurationError("all mixing ratios must be in [0, 1]")
    b = bin_index(t_arr, table.n_bins)
    return (
        table.mu[b].astype(np.float32)[:, None, None],
        table.sigma[b].astype(np.float32)[:, None, None],
    )


def normalize(c_t: np.ndarray, t, table: ScinTable) -> np.ndarray:
    """Standardize a mixed image by its t-bin statistics.

    Accepts a single image with scalar t, or a (B, H, W) batch with a length-B
    t array.
    """
    mu, sigma = _bin_stats(t, table)
    return (np.asarray(c_t, np.float32) - mu) / sigma


def denormalize(x: np.ndarray, t, table: ScinTable) -> np.ndarray:
    """Exact inverse of normalize for the same (t, table)."""
    mu, sigma = _bin_stats(t, table)
    return np.asarray(x, np.float32) * sigma + mu


def compute_target_stats(
    fs: data_mod.ChannelFrameSet,
    patch_size: int = 48,
    n_samples: int = 4000,
    rng_seed: int = 1,
) -> TargetChannelStats:
    """Per-channel standardization constants from training patches.

    Uses the average patch mean and average patch std, the same estimator
    style as the t-bin table.
    """
    sampler = data_mod.PatchSampler(fs, "train", patch_size)
    rng = np.random.default_rng(np.random.SeedSequence(rng_seed))
    a0, a1 = sampler.sample(rng, n_samples)
    std_c0 = float(a0.std(axis=(1, 2), dtype=np.float64).mean())
    std_c1 = float(a1.std(axis=(1, 2), dtype=np.float64).mean())
    if std_c0 == 0 or std_c1 == 0:
        raise ConfigurationError("a channel is constant; cannot standardize targets")
    return TargetChannelStats(
        mean_c0=float(a0.mean(dtype=np.float64)),
        std_c0=std_c0,
        mean_c1=float(a1.mean(dtype=np.float64)),
        std_c1=std_c1,
    )


def _target_mu_sigma(channel: int, stats: TargetChannelStats):
    if channel == 0:
        return np.float32(stats.mean_c0), np.float32(stats.std_c0)
    if channel == 1:
        return np.float32(stats.mean_c1), np.float32(stats.std_c1)
    raise ConfigurationError(f"channel must be 0 or 1, got {channel}")


def normalize_target(c: np.ndarray, channel: int, stats: TargetChannelStats) -> np.ndarray:
    """Standardize a clean channel image for use as a training target."""
    mu, sigma = _target_mu_sigma(channel, stats)
    return (np.asarray(c, np.float32) - mu) / sigma


def denormalize_target(x: np.ndarray, channel: int, stats: TargetChannelStats) -> np.ndarray:
    """Map a normalized prediction back to raw intensity units."""
    mu, sigma = _target_mu_sigma(channel, stats)
    return np.asarray(x, np.float32) * sigma + mu


def predict_variance(t, stats: ChannelStats) -> float:
    """Closed-form expected within-patch variance of a mixture at ratio t."""
    t = validate_ratio(t)
    return (
        (1.0 - t) ** 2 * stats.var_c0
        + t**2 * stats.var_c1
        + 2.0 * t * (1.0 - t) * stats.cov
    )


# ---------------------------------------------------------------------------
# persistence (versioned JSON)
# ---------------------------------------------------------------------------


def save_table(table: ScinTable, path) -> Path:
    path = Path(path)
    payload = {
        "version": table.version,
        "n_bins": table.n_bins,
        "patch_size_used": table.patch_size_used,
        "dataset_fingerprint": table.dataset_fingerprint,
        "mu": table.mu.tolist(),
        "sigma": table.sigma.tolist(),
        "samples_per_bin": table.samples_per_bin.tolist(),
        "channel_stats": table.channel_stats.as_dict(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def load_table(path, expect_fingerprint: str | None = None) -> ScinTable:
    path = Path(path)
    payload = json.loads(path.read_text())
    version = payload.get("version")
    if version != TABLE_FORMAT_VERSION:
        raise ConfigurationError(
            f"{path}: unsupported table version {version} (expected {TABLE_FORMAT_VERSION})"
        )
    table = ScinTable(
        n_bins=int(payload["n_bins"]),
        mu=np.asarray(payload["mu"]),
        sigma=np.asarray(payload["sigma"]),
        samples_per_bin=np.asarray(payload["samples_per_bin"]),
        channel_stats=ChannelStats(**payload["channel_stats"]),
        patch_size_used=int(payload["patch_size_used"]),
        dataset_fingerprint=payload["dataset_fingerprint"],
        version=version,
    )
    if expect_fingerprint is not None and table.dataset_fingerprint != expect_fingerprint:
        raise FingerprintMismatchError(
            f"{path}: table was built on dataset {table.dataset_fingerprint}, "
            f"expected {expect_fingerprint}"
        )
    return table
