"""Gaussian sequence kernels and the seeded random stream used everywhere.

A sequence tensor is a float64 array of shape ``(steps, channels)``.  Diagonal
Gaussians over such sequences are stored as ``(mean, log_std)`` pairs.

Random numbers come from numpy's Philox4x64 counter-based generator.  Streams
are derived as ``Philox(SeedSequence(seed, spawn_key=keys))`` so the bits for a
given ``(seed, keys)`` pair do not depend on the platform or on how many other
streams were drawn before it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when two operands that must agree in shape do not."""

    def __init__(self, what: str, left: tuple, right: tuple):
        super().__init__(f"{what}: shape {tuple(left)} does not match shape {tuple(right)}")
        self.left = tuple(left)
        self.right = tuple(right)


def as_seq(x: Any, name: str = "sequence") -> np.ndarray:
    """Coerce ``x`` to a finite float64 ``(N, D)`` array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must have shape (N>=1, D>=1), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True, eq=False)
class GaussianSeq:
    """Per-step diagonal Gaussian, parameterized by mean and log standard deviation."""

    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        mean = as_seq(self.mean, "mean")
        log_std = as_seq(self.log_std, "log_std")
        if mean.shape != log_std.shape:
            raise ShapeError("GaussianSeq mean/log_std", mean.shape, log_std.shape)
        mean.setflags(write=False)
        log_std.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_std", log_std)

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    @property
    def shape(self) -> tuple:
        return self.mean.shape

    @classmethod
    def standard(cls, steps: int, dim: int) -> "GaussianSeq":
        return cls(np.zeros((steps, dim)), np.zeros((steps, dim)))


class RngStream:
    """Single-owner random stream backed by Philox4x64.

    Parameters
    ----------
    seed : int
        Master seed (reduced modulo 2**64).
    keys : tuple of int
        Substream path; ``RngStream(s).substream(i)`` equals ``RngStream(s, (i,))``.
    """

    algorithm = "philox4x64-seedsequence"

    def __init__(self, seed: int, keys: tuple = ()):
        self.seed = int(seed) % (1 << 64)
        self.keys = tuple(int(k) for k in keys)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.keys)
        self.generator = np.random.Generator(np.random.Philox(seq))

    def substream(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.keys + tuple(keys))

    def normal(self, shape) -> np.ndarray:
        return self.generator.standard_normal(shape)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.generator.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self.generator.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def get_state(self) -> dict:
        """JSON-compatible generator state (uint64 arrays become lists of ints)."""
        st = self.generator.bit_generator.state
        return {"seed": self.seed, "keys": list(self.keys),
                "bit_generator": {
                    "bit_generator": st["bit_generator"],
                    "state": {k: [int(x) for x in v] for k, v in st["state"].items()},
                    "buffer": [int(x) for x in st["buffer"]],
                    "buffer_pos": int(st["buffer_pos"]),
                    "has_uint32": int(st["has_uint32"]),
                    "uinteger": int(st["uinteger"]),
                }}

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        rng = cls(state["seed"], tuple(state["keys"]))
        st = dict(state["bit_generator"])
        st["state"] = {k: np.array(v, dtype=np.uint64) for k, v in st["state"].items()}
        st["buffer"] = np.array(st["buffer"], dtype=np.uint64)
        rng.generator.bit_generator.state = st
        return rng


def _check_pair(q: GaussianSeq, p: GaussianSeq) -> None:
    if q.shape != p.shape:
        raise ShapeError("q vs p", q.shape, p.shape)


def gaussian_kl(q: GaussianSeq, p: GaussianSeq) -> tuple[np.ndarray, float]:
    """KL(q || p) for diagonal Gaussians.

    Per dimension the divergence is
    ``log(sp/sq) + (sq**2 + (mp - mq)**2) / (2 sp**2) - 1/2``.

    Returns
    -------
    per_step : ndarray, shape (N,)
        Divergence summed over channels.
    total : float
        Sum over steps.
    """
    _check_pair(q, p)
    per_dim = kl_terms(q.mean, q.log_std, p.mean, p.log_std)
    per_step = per_dim.sum(axis=1)
    return per_step, float(per_step.sum())


def kl_terms(mq, log_sq, mp, log_sp) -> np.ndarray:
    """Elementwise closed-form Gaussian KL on raw arrays (any matching shape)."""
    ratio = np.exp(2.0 * (log_sq - log_sp))
    diff = (mp - mq) * np.exp(-log_sp)
    return (log_sp - log_sq) + 0.5 * (ratio + diff * diff - 1.0)


def log_prob_terms(x, mean, log_std) -> np.ndarray:
    """Elementwise diagonal Gaussian log density on raw arrays."""
    u = (x - mean) * np.exp(-log_std)
    return -0.5 * LOG_2PI - log_std - 0.5 * u * u


def gaussian_log_prob(x, g: GaussianSeq) -> tuple[np.ndarray, float]:
    """Log density of ``x`` under ``g``, summed over channels per step and in total."""
    x = as_seq(x, "x")
    if x.shape != g.shape:
        raise ShapeError("x vs distribution", x.shape, g.shape)
    per_step = log_prob_terms(x, g.mean, g.log_std).sum(axis=1)
    return per_step, float(per_step.sum())


def gaussian_sample(g: GaussianSeq, temperature: float, rng: RngStream) -> np.ndarray:
    """Draw ``mean + temperature * std * eps``.

    ``temperature == 0`` returns the mean exactly and consumes no randomness.
    """
    if not temperature >= 0.0 or not math.isfinite(temperature):
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    if temperature == 0.0:
        return np.array(g.mean)
    eps = rng.normal(g.shape)
    return g.mean + temperature * g.std * eps


@dataclass(frozen=True)
class MonteCarloEstimate:
    value: float
    stderr: Optional[float]  # None when fewer than two samples were drawn
    n_samples: int


def kl_mc_estimate(q: GaussianSeq, p: GaussianSeq, n_samples: int, rng: RngStream,
                   chunk: int = 200_000) -> MonteCarloEstimate:
    """Monte Carlo estimate of E_q[log q(z) - log p(z)] with its standard error."""
    _check_pair(q, p)
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        z = q.mean + q.std * rng.normal((m,) + q.shape)
        d = (log_prob_terms(z, q.mean, q.log_std)
             - log_prob_terms(z, p.mean, p.log_std)).sum(axis=(1, 2))
        total += d.sum()
        total_sq += (d * d).sum()
        done += m
    mean = total / n_samples
    if n_samples < 2:
        return MonteCarloEstimate(float(mean), None, n_samples)
    var = max(total_sq / n_samples - mean * mean, 0.0) * n_samples / (n_samples - 1)
    return MonteCarloEstimate(float(mean), math.sqrt(var / n_samples), n_samples)
