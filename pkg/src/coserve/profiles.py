"""Endpoint performance models.

Device time-to-first-token is modeled as a linear function of prompt length
(fit by least squares from offline profiling pairs).  Server TTFT is modeled
as an empirical distribution over observed samples with rank-based quantile
inversion.  Decode speeds are carried alongside as simple rates / interval
samples.  All profile values are immutable after construction; refreshing a
profile means building a new one and swapping it in.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "ProfileError",
    "MIN_ECDF_SAMPLES",
    "DeviceTtftModel",
    "ServerTtftEcdf",
    "DecodeProfile",
    "ProfileSnapshot",
    "fit_device_linear",
    "ecdf_quantile",
    "ecdf_eval",
    "pearson",
]

# Minimum observations for a usable empirical TTFT distribution.  Online
# refresh windows use a larger configurable floor (see gateway config).
MIN_ECDF_SAMPLES = 8


class ProfileError(ValueError):
    """Raised on unusable profiling data."""


@dataclass(frozen=True)
class DeviceTtftModel:
    """Linear device TTFT model: predicted TTFT = k * prompt_len + c."""

    k: float  # seconds per prompt token
    c: float  # fixed overhead, seconds

    def __post_init__(self):
        if not self.k > 0:
            raise ProfileError(f"k must be > 0, got {self.k}")
        if self.c < 0:
            raise ProfileError(f"c must be >= 0, got {self.c}")

    def predict(self, prompt_len: int | float) -> float:
        return self.k * prompt_len + self.c


@dataclass(frozen=True, eq=False)
class ServerTtftEcdf:
    """Empirical server TTFT distribution over sorted positive samples."""

    samples: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=float)
        if arr.ndim != 1 or arr.size < MIN_ECDF_SAMPLES:
            raise ProfileError(f"need >= {MIN_ECDF_SAMPLES} TTFT samples, got {arr.size}")
        if np.any(arr <= 0) or not np.all(np.isfinite(arr)):
            raise ProfileError("TTFT samples must be positive and finite")
        arr = np.sort(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    @property
    def n(self) -> int:
        return int(self.samples.size)


def ecdf_quantile(ecdf: ServerTtftEcdf, q: float) -> float:
    """Smallest sample whose rank fraction reaches q (rank ceil(q*n)).

    q=0 returns the smallest sample, q=1 the largest; no interpolation, so
    the result is always an actually-observed latency.
    """
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must be in [0, 1], got {q}")
    n = ecdf.n
    # Guard float noise like 0.3*10 -> 3.0000000000000004 ceiling to rank 4.
    rank = max(1, math.ceil(q * n - 1e-9))
    return float(ecdf.samples[min(rank, n) - 1])


def ecdf_eval(ecdf: ServerTtftEcdf, t: float) -> float:
    """Fraction of samples <= t (right-continuous step function)."""
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    return float(np.searchsorted(ecdf.samples, t, side="right")) / ecdf.n


def fit_device_linear(pairs) -> DeviceTtftModel:
    """Ordinary least squares fit of TTFT against prompt length.

    If the fitted intercept is negative (profiling noise on small prompts
    would predict negative TTFT), it is clamped to zero and the slope refit
    through the sample means.
    """
    arr = np.asarray(pairs, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 2:
        raise ProfileError("need >= 2 (prompt_len, ttft_s) pairs")
    xs, ys = arr[:, 0], arr[:, 1]
    if np.all(xs == xs[0]):
        raise ProfileError("all prompt lengths identical; cannot fit a slope")
    xbar, ybar = xs.mean(), ys.mean()
    sxx = float(np.sum((xs - xbar) ** 2))
    sxy = float(np.sum((xs - xbar) * (ys - ybar)))
    k = sxy / sxx
    c = float(ybar - k * xbar)
    if c < 0:
        c = 0.0
        k = float(ybar / xbar)
    if k <= 0:
        raise ProfileError(f"fitted slope {k} is not positive; data is not linear in length")
    return DeviceTtftModel(k=float(k), c=c)


def pearson(xs, ys) -> float:
    """Pearson product-moment correlation coefficient."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ProfileError("need two equal-length vectors of >= 2 values")
    dx = x - x.mean()
    dy = y - y.mean()
    vx = float(np.sum(dx * dx))
    vy = float(np.sum(dy * dy))
    if vx == 0.0 or vy == 0.0:
        raise ProfileError("zero variance input")
    return float(np.sum(dx * dy) / math.sqrt(vx * vy))


@dataclass(frozen=True)
class DecodeProfile:
    """Decode-stage speeds: device rate and server per-token intervals."""

    device_rate: float  # tokens per second
    server_tbt_samples: tuple[float, ...]

    def __post_init__(self):
        if not self.device_rate > 0:
            raise ProfileError("device decode rate must be > 0")
        if not self.server_tbt_samples or any(s <= 0 for s in self.server_tbt_samples):
            raise ProfileError("server TBT samples must be non-empty and positive")

    @property
    def server_mean_tbt(self) -> float:
        return sum(self.server_tbt_samples) / len(self.server_tbt_samples)


@dataclass(frozen=True, eq=False)
class ProfileSnapshot:
    """Serializable bundle of both endpoint models."""

    device_ttft: DeviceTtftModel
    device_decode_rate: float
    server_ecdf: ServerTtftEcdf
    server_tbt_samples: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "device": {
                "k": self.device_ttft.k,
                "c": self.device_ttft.c,
                "decode_rate": self.device_decode_rate,
            },
            "server": {
                "ttft_samples": [float(s) for s in self.server_ecdf.samples],
                "tbt_samples": list(self.server_tbt_samples),
            },
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ProfileSnapshot":
        try:
            dev = raw["device"]
            srv = raw["server"]
            return cls(
                device_ttft=DeviceTtftModel(k=float(dev["k"]), c=float(dev["c"])),
                device_decode_rate=float(dev["decode_rate"]),
                server_ecdf=ServerTtftEcdf(np.asarray(srv["ttft_samples"], dtype=float)),
                server_tbt_samples=tuple(float(x) for x in srv["tbt_samples"]),
            )
        except (KeyError, TypeError) as exc:
            raise ProfileError(f"malformed profile snapshot: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ProfileSnapshot":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
