"""Discrete and continuous noise schedules, forward corruption, and
offline noise-level selection from the signal-fraction curve.

Discrete side: a variance schedule {beta_t} defines alpha_bar_t (cumulative
product of 1 - beta_i) and the effective noise scale sigma_t = sqrt(1 -
alpha_bar_t); the forward corruption at step t is

    x_t = sqrt(alpha_bar_t) * x0 + sigma_t * eps,  eps ~ N(0, I).

Continuous side: a raw sigma > 0 acts as a pseudo-step with alpha_bar = 1,
i.e. x_sigma = x0 + sigma * eps. A log-normal prior over sigma supplies a
single evaluation level at its mode exp(mu - sigma_log^2).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._binio import Writer, fnv1a64
from .errors import InputError


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable discrete schedule: betas plus derived alpha_bars/sigmas."""

    betas: np.ndarray
    alpha_bars: np.ndarray = field(init=False)
    sigmas: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise InputError("betas must be a non-empty 1-d sequence")
        if not np.all(np.isfinite(betas)):
            raise InputError("betas must be finite")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise InputError("betas must lie strictly in (0, 1)")
        object.__setattr__(self, "betas", betas)
        alpha_bars = np.cumprod(1.0 - betas)
        object.__setattr__(self, "alpha_bars", alpha_bars)
        object.__setattr__(self, "sigmas", np.sqrt(1.0 - alpha_bars))

    @property
    def T(self) -> int:
        return self.betas.size

    def check_step(self, t: int) -> int:
        if not isinstance(t, (int, np.integer)):
            raise InputError(f"step index must be an integer, got {t!r}")
        t = int(t)
        if not 1 <= t <= self.T:
            raise InputError(f"step {t} outside schedule range [1, {self.T}]")
        return t

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[self.check_step(t) - 1])

    def sigma(self, t: int) -> float:
        return float(self.sigmas[self.check_step(t) - 1])

    def to_bytes(self) -> bytes:
        w = Writer()
        w.magic(b"SCHD")
        w.u32(1)
        w.u32(self.T)
        w.array(self.betas)
        return w.getvalue()

    def fingerprint(self) -> int:
        return fnv1a64(self.to_bytes())


@dataclass(frozen=True)
class LogNormalSigmaPrior:
    """Log-normal prior over continuous noise scales: log sigma ~ N(mu, sigma_log^2)."""

    mu: float
    sigma_log: float

    def __post_init__(self):
        if not (math.isfinite(self.mu) and math.isfinite(self.sigma_log)):
            raise InputError("prior parameters must be finite")
        if self.sigma_log <= 0.0:
            raise InputError("sigma_log must be > 0")

    def to_bytes(self) -> bytes:
        w = Writer()
        w.magic(b"SPRI")
        w.u32(1)
        w.f64(self.mu)
        w.f64(self.sigma_log)
        return w.getvalue()

    def fingerprint(self) -> int:
        return fnv1a64(self.to_bytes())


@dataclass(frozen=True)
class SnrCurve:
    """Per-step fraction of total energy attributable to signal, in [0, 1]."""

    timesteps: np.ndarray
    fractions: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "timesteps", np.asarray(self.timesteps, dtype=np.int64))
        object.__setattr__(self, "fractions", np.asarray(self.fractions, dtype=np.float64))
        if self.timesteps.size != self.fractions.size or self.timesteps.size == 0:
            raise InputError("curve must have matching, non-empty columns")

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("t,fraction\n")
            for t, f in zip(self.timesteps, self.fractions):
                fh.write(f"{int(t)},{float(f)!r}\n")


def build_linear_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Linear beta schedule from beta_min to beta_max inclusive."""
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise InputError("T must be an integer >= 1")
    for name, v in (("beta_min", beta_min), ("beta_max", beta_max)):
        if not (isinstance(v, (int, float)) and math.isfinite(v)):
            raise InputError(f"{name} must be a finite number")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise InputError("need 0 < beta_min <= beta_max < 1")
    if T == 1:
        betas = np.array([beta_min], dtype=np.float64)
    else:
        betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    return NoiseSchedule(betas)


def corrupt(x0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Forward corruption x_t = sqrt(alpha_bar_t) x0 + sigma_t eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise InputError(f"eps shape {eps.shape} does not match x0 shape {x0.shape}")
    t = schedule.check_step(t)
    return np.sqrt(schedule.alpha_bars[t - 1]) * x0 + schedule.sigmas[t - 1] * eps


def corrupt_continuous(x0: np.ndarray, sigma: float, eps: np.ndarray) -> np.ndarray:
    """Pseudo-step corruption x_sigma = x0 + sigma eps (alpha_bar = 1)."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise InputError(f"eps shape {eps.shape} does not match x0 shape {x0.shape}")
    if sigma < 0:
        raise InputError("sigma must be >= 0")
    return x0 + float(sigma) * eps


def signal_fraction(mean_energy: float, alpha_bar: float, sigma_sq: float, dim: int) -> float:
    """Fraction E_clean / (E_clean + E_noise) for one noise level.

    E_clean is the mean energy of the scaled clean component alpha_bar *
    E[||x0||^2]; E_noise = sigma^2 * d.
    """
    e_clean = alpha_bar * mean_energy
    e_noise = sigma_sq * dim
    if e_clean == 0.0 and e_noise == 0.0:
        return 1.0
    return e_clean / (e_clean + e_noise)


def snr_curve(dataset: np.ndarray, schedule: NoiseSchedule, timesteps=None) -> SnrCurve:
    """Signal-fraction curve over the given steps (default: every step).

    Energies are dataset-level means computed in double precision, not
    per-sample quantities.
    """
    dataset = np.asarray(dataset, dtype=np.float64)
    if dataset.ndim != 2 or dataset.shape[0] == 0:
        raise InputError("dataset must be a non-empty (n, d) array")
    if timesteps is None:
        timesteps = np.arange(1, schedule.T + 1)
    timesteps = np.asarray([schedule.check_step(t) for t in np.asarray(timesteps)])
    d = dataset.shape[1]
    mean_energy = float(np.mean(np.sum(dataset * dataset, axis=1)))
    fractions = np.array(
        [
            signal_fraction(
                mean_energy,
                schedule.alpha_bars[t - 1],
                schedule.sigmas[t - 1] ** 2,
                d,
            )
            for t in timesteps
        ]
    )
    return SnrCurve(timesteps, fractions)


def select_mid_step(curve: SnrCurve, retention: float = 0.95) -> int:
    """Largest step whose signal fraction still meets the retention target.

    Falls back to the earliest step (with a warning) when no step qualifies.
    """
    if not 0.0 < retention < 1.0:
        raise InputError("retention must lie in (0, 1)")
    meets = curve.fractions >= retention
    if not np.any(meets):
        warnings.warn(
            f"no step retains {retention:.0%} of the signal; "
            f"falling back to earliest step {int(curve.timesteps[0])}"
        )
        return int(curve.timesteps[0])
    return int(curve.timesteps[np.nonzero(meets)[0][-1]])


def sigma_mode(prior: LogNormalSigmaPrior) -> float:
    """Most probable noise scale under the log-normal prior."""
    return math.exp(prior.mu - prior.sigma_log**2)
