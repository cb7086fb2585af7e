"""KDE calibration of typicality values into anomaly scores.

Offline: compute the signed statistic for in-distribution data at each
selected noise level and fit a Gaussian-kernel density per level. Online:
a query's anomaly score is the negative log density of its statistic under
the matching KDE; the two-step variant takes the max across levels. A
deployment cutoff comes from the (1 - alpha) quantile of ID scores.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from ._binio import Reader, Writer
from .errors import ConsistencyError, InputError, NumericalError
from .schedule import LogNormalSigmaPrior, NoiseSchedule
from .score_models import ScoreModel
from .typicality import (
    NOISE_MODES,
    PROBE_KINDS,
    TypicalityConfig,
    score_batch,
    scoped_statistic,
)

logger = logging.getLogger(__name__)

MAGIC_ARTIFACT = b"SCAL"
ARTIFACT_VERSION = 1

VARIANTS = ("single", "two-step", "oracle")
DEFAULT_LOG_FLOOR = math.log(1e-300)
BANDWIDTH_RULES = ("silverman", "scott")


@dataclass(frozen=True)
class KdeModel:
    """1-d Gaussian-kernel density over stored values."""

    points: np.ndarray
    bandwidth: float
    log_floor: float = DEFAULT_LOG_FLOOR

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=np.float64))
        if self.points.size < 2:
            raise InputError("KDE needs at least 2 points")
        if not self.bandwidth > 0:
            raise InputError("bandwidth must be > 0")


def silverman_bandwidth(values: np.ndarray) -> float:
    """0.9 * min(std, IQR/1.34) * n^(-1/5)."""
    std = float(np.std(values))
    q75, q25 = np.percentile(values, [75, 25])
    return 0.9 * min(std, (q75 - q25) / 1.34) * values.size ** (-0.2)


def scott_bandwidth(values: np.ndarray) -> float:
    return 1.06 * float(np.std(values)) * values.size ** (-0.2)


def fit_kde(values, bandwidth_rule="silverman") -> KdeModel:
    """Fit a Gaussian KDE with the named bandwidth rule or a fixed float.

    Degenerate inputs (all values identical, or a rule that collapses to
    zero width) fall back to a fixed bandwidth of 1e-3 * max(|v|, 1) with
    a warning.
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size < 2:
        raise InputError("need at least 2 values to fit a KDE")
    if not np.all(np.isfinite(values)):
        raise InputError("KDE values must be finite")
    if isinstance(bandwidth_rule, (int, float)):
        bandwidth = float(bandwidth_rule)
        if not bandwidth > 0:
            raise InputError("fixed bandwidth must be > 0")
    elif bandwidth_rule == "silverman":
        bandwidth = silverman_bandwidth(values)
    elif bandwidth_rule == "scott":
        bandwidth = scott_bandwidth(values)
    else:
        raise InputError(f"unknown bandwidth rule {bandwidth_rule!r}")
    if not bandwidth > 0:
        bandwidth = 1e-3 * max(float(np.max(np.abs(values))), 1.0)
        warnings.warn(
            f"degenerate value spread; falling back to fixed bandwidth {bandwidth:g}"
        )
    return KdeModel(values, bandwidth)


def kde_logpdf(kde: KdeModel, value: float) -> float:
    """Log density at value (un-floored)."""
    with np.errstate(over="ignore"):  # huge z just saturates to -inf
        z = (value - kde.points) / kde.bandwidth
        e = -0.5 * z * z
    m = float(np.max(e))
    if not math.isfinite(m):
        return -math.inf
    lse = m + math.log(float(np.sum(np.exp(e - m))))
    return lse - math.log(kde.points.size) - math.log(kde.bandwidth) \
        - 0.5 * math.log(2.0 * math.pi)


def kde_nll(kde: KdeModel, value: float) -> float:
    """Negative log density, capped at -log_floor far outside the support."""
    if not math.isfinite(value):
        raise InputError("kde_nll needs a finite query")
    return -max(kde_logpdf(kde, value), kde.log_floor)


@dataclass(frozen=True)
class CalibrationArtifact:
    """The serialized deployable detector: per-level KDEs plus provenance.

    The KDE point arrays are aligned by calibration sample, which lets the
    artifact reproduce the ID anomaly scores it was fit on (used for
    quantile cutoffs) without re-scoring.
    """

    variant: str
    timesteps: tuple
    kdes: tuple
    typicality_cfg: TypicalityConfig
    model_fp: int
    schedule_fp: int

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InputError(f"unknown variant {self.variant!r}")
        if len(self.kdes) != len(self.timesteps):
            raise InputError("need exactly one KDE per timestep")
        if self.variant == "two-step" and len(self.timesteps) != 2:
            raise InputError("two-step variant needs exactly 2 timesteps")
        if self.variant in ("single", "oracle") and len(self.timesteps) != 1:
            raise InputError(f"{self.variant} variant needs exactly 1 timestep")

    def id_nll_scores(self) -> np.ndarray:
        """Anomaly scores of the calibration samples under this artifact."""
        n = self.kdes[0].points.size
        scores = np.empty(n)
        for i in range(n):
            nlls = [
                _adjusted_nll(kde, float(kde.points[i]))[0] for kde in self.kdes
            ]
            scores[i] = max(nlls)
        return scores

    def to_bytes(self) -> bytes:
        w = Writer()
        w.magic(MAGIC_ARTIFACT)
        w.u32(ARTIFACT_VERSION)
        w.u8(VARIANTS.index(self.variant))
        w.u8(len(self.timesteps))
        for ts in self.timesteps:
            if isinstance(ts, (int, np.integer)):
                w.u8(0)
                w.u32(int(ts))
            else:
                w.u8(1)
                w.f64(float(ts))
        for kde in self.kdes:
            w.f64(kde.bandwidth)
            w.f64(kde.log_floor)
            w.u64(kde.points.size)
            w.array(kde.points)
        cfg = self.typicality_cfg
        w.u32(cfg.num_probes)
        w.u8(PROBE_KINDS.index(cfg.probe_kind))
        w.f64(cfg.epsilon)
        w.u8(NOISE_MODES.index(cfg.noise_mode))
        w.u8(1 if cfg.apply_sign else 0)
        w.i64(cfg.seed)
        w.u64(self.model_fp)
        w.u64(self.schedule_fp)
        return w.getvalue()

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())


def load_artifact(path) -> CalibrationArtifact:
    with open(path, "rb") as fh:
        r = Reader(fh.read())
    r.magic(MAGIC_ARTIFACT)
    version = r.u32()
    if version != ARTIFACT_VERSION:
        raise InputError(f"unsupported artifact version {version}")
    variant = VARIANTS[r.u8()]
    n_steps = r.u8()
    timesteps = []
    for _ in range(n_steps):
        timesteps.append(r.u32() if r.u8() == 0 else r.f64())
    kdes = []
    for _ in range(n_steps):
        bandwidth = r.f64()
        log_floor = r.f64()
        kdes.append(KdeModel(r.array(r.u64()), bandwidth, log_floor))
    cfg = TypicalityConfig(
        num_probes=r.u32(),
        probe_kind=PROBE_KINDS[r.u8()],
        epsilon=r.f64(),
        noise_mode=NOISE_MODES[r.u8()],
        apply_sign=bool(r.u8()),
        seed=r.i64(),
    )
    return CalibrationArtifact(
        variant, tuple(timesteps), tuple(kdes), cfg, r.u64(), r.u64()
    )


def _noise_fingerprint(schedule) -> int:
    if isinstance(schedule, (NoiseSchedule, LogNormalSigmaPrior)):
        return schedule.fingerprint()
    if schedule is None:
        return 0
    raise InputError(f"cannot fingerprint noise source {type(schedule).__name__}")


def calibrate(model: ScoreModel, id_dataset: np.ndarray, timesteps,
              schedule, cfg: TypicalityConfig, bandwidth_rule="silverman",
              variant: str | None = None, n_workers=None) -> CalibrationArtifact:
    """Fit one KDE per noise level on the signed ID statistic values.

    Samples whose scoring fails are dropped (with a logged count); more
    than 1% failures aborts the calibration.
    """
    id_dataset = np.asarray(id_dataset, dtype=np.float64)
    if id_dataset.ndim != 2 or id_dataset.shape[0] == 0:
        raise InputError("id_dataset must be a non-empty (n, d) array")
    timesteps = tuple(timesteps)
    if not timesteps:
        raise InputError("need at least one timestep")
    if variant is None:
        variant = "single" if len(timesteps) == 1 else "two-step"

    sched = schedule if isinstance(schedule, NoiseSchedule) else None
    scores, failures = score_batch(model, id_dataset, timesteps, sched, cfg, n_workers)
    n = id_dataset.shape[0]
    if failures:
        logger.warning("calibration dropped %d of %d samples", len(failures), n)
        if len(failures) > 0.01 * n:
            raise NumericalError(
                f"{len(failures)} of {n} calibration samples failed scoring (> 1%)"
            )
    kept = [rows for rows in scores if all(r is not None for r in rows)]
    kdes = tuple(
        fit_kde(np.array([rows[j].t_value for rows in kept]), bandwidth_rule)
        for j in range(len(timesteps))
    )
    return CalibrationArtifact(
        variant=variant,
        timesteps=timesteps,
        kdes=kdes,
        typicality_cfg=cfg,
        model_fp=model.fingerprint(),
        schedule_fp=_noise_fingerprint(schedule),
    )


@dataclass(frozen=True)
class AnomalyScore:
    """NLL-based anomaly score; value is the max across the artifact's levels."""

    value: float
    per_timestep: dict
    verdict: bool | None = None
    tie_broken: bool = False


def _adjusted_nll(kde: KdeModel, t_value: float):
    """NLL with the floor tie-break: beyond the density floor, samples are
    ordered by their distance from the ID median so AUROC stays informative."""
    nll = kde_nll(kde, t_value)
    floor = -kde.log_floor
    if nll >= floor:
        return floor + abs(t_value - float(np.median(kde.points))), True
    return nll, False


def check_fingerprints(artifact: CalibrationArtifact, model: ScoreModel, schedule):
    if model.fingerprint() != artifact.model_fp:
        raise ConsistencyError("model fingerprint does not match artifact")
    if _noise_fingerprint(schedule) != artifact.schedule_fp:
        raise ConsistencyError("schedule fingerprint does not match artifact")


def anomaly_score(artifact: CalibrationArtifact, model: ScoreModel, x0,
                  schedule, cfg: TypicalityConfig | None = None,
                  sample_index: int = 0) -> AnomalyScore:
    """Score one point under a calibrated artifact (fingerprint-checked)."""
    check_fingerprints(artifact, model, schedule)
    if cfg is None:
        cfg = artifact.typicality_cfg
    sched = schedule if isinstance(schedule, NoiseSchedule) else None
    per, tie_broken = {}, False
    for ts, kde in zip(artifact.timesteps, artifact.kdes):
        stat = scoped_statistic(model, x0, ts, sched, cfg, sample_index=sample_index)
        nll, tied = _adjusted_nll(kde, stat.t_value)
        per[ts] = nll
        tie_broken = tie_broken or tied
    return AnomalyScore(value=max(per.values()), per_timestep=per, tie_broken=tie_broken)


def anomaly_score_batch(artifact: CalibrationArtifact, model: ScoreModel,
                        X: np.ndarray, schedule,
                        cfg: TypicalityConfig | None = None,
                        n_workers=None):
    """Anomaly scores for a batch; returns (scores, t_scores, failures).

    scores is a list of AnomalyScore (None for failed samples); t_scores is
    the raw per-(sample, level) statistic table from the typicality layer.
    """
    check_fingerprints(artifact, model, schedule)
    if cfg is None:
        cfg = artifact.typicality_cfg
    sched = schedule if isinstance(schedule, NoiseSchedule) else None
    t_scores, failures = score_batch(model, X, artifact.timesteps, sched, cfg, n_workers)
    out = []
    for rows in t_scores:
        if any(r is None for r in rows):
            out.append(None)
            continue
        per, tie_broken = {}, False
        for kde, stat in zip(artifact.kdes, rows):
            nll, tied = _adjusted_nll(kde, stat.t_value)
            per[stat.timestep] = nll
            tie_broken = tie_broken or tied
        out.append(AnomalyScore(value=max(per.values()), per_timestep=per,
                                tie_broken=tie_broken))
    return out, t_scores, failures


def threshold_from_quantile(id_scores, alpha: float) -> float:
    """Empirical (1 - alpha) quantile; anomalous iff score > cutoff."""
    id_scores = np.asarray(id_scores, dtype=np.float64).reshape(-1)
    if id_scores.size == 0:
        raise InputError("need at least one ID score")
    if not 0.0 < alpha < 1.0:
        raise InputError("alpha must lie in (0, 1)")
    return float(np.quantile(id_scores, 1.0 - alpha))


def apply_verdicts(scores, cutoff: float):
    """Fill the verdict field: anomalous iff value > cutoff (None stays None)."""
    return [
        None if s is None else replace(s, verdict=bool(s.value > cutoff))
        for s in scores
    ]
