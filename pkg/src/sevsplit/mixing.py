"""Superposition of channel pairs and the distributions used around it.

A mixed input is the pixel-wise convex combination (1 - t) * c0 + t * c1.
Training draws t from a uniform/atom mixture; evaluation parameterizes the
same images by w, the weight of whichever channel is being scored.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError


@dataclass
class TSamplerConfig:
    """Mixture distribution over t: uniform with a point mass at one value.

    p(t) = 1/(1+a) * U[0,1] + a/(1+a) * delta(atom_location).
    """

    a: float = 1.0
    atom_location: float = 0.5

    def validate(self):
        problems = []
        if self.a < 0:
            problems.append(f"atom weight a must be nonnegative, got {self.a}")
        if not (0.0 <= self.atom_location <= 1.0):
            problems.append(f"atom_location must be in [0, 1], got {self.atom_location}")
        return problems

    @property
    def atom_mass(self) -> float:
        return self.a / (1.0 + self.a)


@dataclass
class NoiseConfig:
    """Gaussian perturbation added to normalized inputs, scaled by t."""

    epsilon: float = 0.01
    enabled: bool = True

    def validate(self):
        if self.epsilon < 0:
            return [f"epsilon must be nonnegative, got {self.epsilon}"]
        return []


def validate_ratio(t) -> float:
    """Check a mixing ratio is a finite scalar in [0, 1] and return it as float."""
    t = float(t)
    if not np.isfinite(t) or not (0.0 <= t <= 1.0):
        raise ConfigurationError(f"mixing ratio must be in [0, 1], got {t}")
    return t


def mix(c0: np.ndarray, c1: np.ndarray, t) -> np.ndarray:
    """Pixel-wise superposition (1 - t) * c0 + t * c1.

    t may be a scalar, or an array of per-sample ratios when c0/c1 are
    batches shaped (B, H, W).
    """
    c0 = np.asarray(c0)
    c1 = np.asarray(c1)
    if c0.shape != c1.shape:
        raise ConfigurationError(f"channel shapes differ: {c0.shape} vs {c1.shape}")
    t_arr = np.asarray(t, dtype=np.float32)
    if t_arr.ndim == 0:
        validate_ratio(t)
    else:
        if t_arr.shape[0] != c0.shape[0] or c0.ndim != 3:
            raise ConfigurationError(
                f"per-sample t of shape {t_arr.shape} does not match batch {c0.shape}"
            )
        if not ((t_arr >= 0) & (t_arr <= 1)).all():
            raise ConfigurationError("all mixing ratios must be in [0, 1]")
        t_arr = t_arr[:, None, None]
    return (1.0 - t_arr) * c0 + t_arr * c1


def sample_t(cfg: TSamplerConfig, rng: np.random.Generator, size: int | None = None):
    """Draw mixing ratios: with probability a/(1+a) the atom, else uniform.

    Returns a float for size=None, else a float32 array of that length.
    """
    problems = cfg.validate()
    if problems:
        raise ConfigurationError("; ".join(problems))
    n = 1 if size is None else int(size)
    t = rng.random(n, dtype=np.float32)
    take_atom = rng.random(n) < cfg.atom_mass
    t[take_atom] = cfg.atom_location
    return float(t[0]) if size is None else t


def convert_w_to_t(w: float, wanted_channel: int) -> float:
    """Map the evaluation weight w of the scored channel to the mixing ratio t.

    The evaluation input is w * c_wanted + (1 - w) * c_other, which equals the
    standard mixture at t = 1 - w when the scored channel is 0, and at t = w
    when it is 1.
    """
    w = float(w)
    if not (0.0 <= w <= 1.0):
        raise ConfigurationError(f"w must be in [0, 1], got {w}")
    if wanted_channel not in (0, 1):
        raise ConfigurationError(f"wanted_channel must be 0 or 1, got {wanted_channel}")
    return 1.0 - w if wanted_channel == 0 else w


def perturb(x_norm: np.ndarray, t, cfg: NoiseConfig, rng: np.random.Generator) -> np.ndarray:
    """Add t * epsilon * n with n ~ N(0, I) to a normalized input.

    Identity when disabled or when the noise scale is zero.  t may be a
    per-sample array for batched x_norm, as in mix().
    """
    problems = cfg.validate()
    if problems:
        raise ConfigurationError("; ".join(problems))
    x_norm = np.asarray(x_norm)
    t_arr = np.asarray(t, dtype=np.float32)
    if t_arr.ndim == 0:
        validate_ratio(t)
        scale = float(t_arr) * cfg.epsilon
        if not cfg.enabled or scale == 0.0:
            return x_norm
        noise = rng.standard_normal(x_norm.shape).astype(np.float32)
        return x_norm + np.float32(scale) * noise
    if not cfg.enabled or cfg.epsilon == 0.0:
        return x_norm
    scale = (t_arr * cfg.epsilon).astype(np.float32)[:, None, None]
    noise = rng.standard_normal(x_norm.shape).astype(np.float32)
    return x_norm + scale * noise
