"""The score-curvature test statistic.

For a corrupted point x_t the statistic combines the squared score norm with
the curvature kappa = -Tr(grad s) estimated by Hutchinson probes:

    T(x) = sign(sum_i s_i) * ||s||^2 / (kappa + epsilon)

Probes are independent across samples and noise levels, so batch scoring
fans out freely: every sample derives its own RNG stream from (seed, sample
index, noise level) and results never depend on worker count or order.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InputError, ScoringFailure
from .schedule import NoiseSchedule, corrupt, corrupt_continuous
from .score_models import ScoreModel
from .seeding import STREAM_CORRUPT, STREAM_PROBE, derive_rng, noise_level_key

logger = logging.getLogger(__name__)

PROBE_KINDS = ("rademacher", "gaussian")
NOISE_MODES = ("fresh", "fixed")


@dataclass(frozen=True)
class TypicalityConfig:
    """Knobs for the statistic; defaults favor the cheapest faithful estimate."""

    num_probes: int = 1
    probe_kind: str = "rademacher"
    epsilon: float = 1e-12
    noise_mode: str = "fresh"
    seed: int = 0
    apply_sign: bool = True

    def __post_init__(self):
        if self.num_probes < 1:
            raise InputError("num_probes must be >= 1")
        if not self.epsilon > 0:
            raise InputError("epsilon must be > 0")
        if self.probe_kind not in PROBE_KINDS:
            raise InputError(f"unknown probe_kind {self.probe_kind!r}")
        if self.noise_mode not in NOISE_MODES:
            raise InputError(f"unknown noise_mode {self.noise_mode!r}")


@dataclass(frozen=True)
class TypicalityScore:
    """One evaluation record at one noise level.

    t_value == sign * score_norm_sq / (curvature + epsilon) with the epsilon
    the config supplied; ratio_unsigned recovers the sign-free value.
    """

    t_value: float
    score_norm_sq: float
    curvature: float
    sign: int
    timestep: object  # int step or float sigma
    probes_used: int

    @property
    def ratio_unsigned(self) -> float:
        return self.sign * self.t_value


def draw_probe(rng: np.random.Generator, dim: int, kind: str) -> np.ndarray:
    if kind == "rademacher":
        return rng.integers(0, 2, size=dim).astype(np.float64) * 2.0 - 1.0
    return rng.standard_normal(dim)


def hutchinson_trace(model: ScoreModel, x_t: np.ndarray, noise_level,
                     cfg: TypicalityConfig, rng: np.random.Generator) -> float:
    """Unbiased estimate of Tr(grad s) from num_probes JVPs.

    Each probe v with E[v v^T] = I contributes v . (J v); the Jacobian is
    never materialized.
    """
    if cfg.num_probes < 1:
        raise InputError("num_probes must be >= 1")
    dim = x_t.size
    total = 0.0
    for _ in range(cfg.num_probes):
        v = draw_probe(rng, dim, cfg.probe_kind)
        _, jv = model.jvp(x_t, noise_level, v)
        total += float(v @ jv)
    return total / cfg.num_probes


def coordinate_trace(model: ScoreModel, x_t: np.ndarray, noise_level) -> float:
    """Exact Tr(grad s) from d coordinate-direction JVPs (test oracle)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    total = 0.0
    for i in range(x_t.size):
        e = np.zeros(x_t.size)
        e[i] = 1.0
        _, jv = model.jvp(x_t, noise_level, e)
        total += float(jv[i])
    return total


def typicality_ratio(score_norm_sq: float, trace_est: float, epsilon: float) -> float:
    """Unsigned ratio ||s||^2 / (kappa + epsilon) with kappa = -trace_est.

    A negative kappa produces a negative ratio, recorded as-is.
    """
    if score_norm_sq < 0:
        raise InputError("score_norm_sq must be >= 0")
    return score_norm_sq / (-trace_est + epsilon)


def sign_factor(score: np.ndarray) -> int:
    """Global orientation factor sign(sum_i score_i); zero sum breaks to +1."""
    total = float(np.sum(score))
    if total == 0.0:
        logger.debug("sign_factor saw an exactly zero score sum; using +1")
        return 1
    return 1 if total > 0.0 else -1


def _corruption_rng(cfg: TypicalityConfig, sample_index: int, nl_key: int):
    if cfg.noise_mode == "fixed":
        return derive_rng(cfg.seed, STREAM_CORRUPT, nl_key)
    return derive_rng(cfg.seed, STREAM_CORRUPT, sample_index, nl_key)


def scoped_statistic(model: ScoreModel, x0: np.ndarray, noise_level,
                     schedule: NoiseSchedule | None, cfg: TypicalityConfig,
                     sample_index: int = 0) -> TypicalityScore:
    """Corrupt x0 to the given noise level and evaluate the signed statistic.

    The corruption draw and the probe draws come from streams derived from
    (cfg.seed, sample_index, noise level); in fixed-noise mode the corruption
    stream drops the sample index so one eps is shared across the dataset.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    nl_key = noise_level_key(noise_level)
    eps = _corruption_rng(cfg, sample_index, nl_key).standard_normal(x0.size)
    if isinstance(noise_level, (int, np.integer)):
        if schedule is None:
            raise InputError("discrete noise level needs a schedule")
        x_t = corrupt(x0, int(noise_level), eps, schedule)
    else:
        x_t = corrupt_continuous(x0, float(noise_level), eps)

    score = model.evaluate(x_t, noise_level)
    score_norm_sq = float(score @ score)
    probe_rng = derive_rng(cfg.seed, STREAM_PROBE, sample_index, nl_key)
    trace_est = hutchinson_trace(model, x_t, noise_level, cfg, probe_rng)

    kappa = -trace_est
    ratio = typicality_ratio(score_norm_sq, trace_est, cfg.epsilon)
    sign = sign_factor(score) if cfg.apply_sign else 1
    t_value = sign * ratio
    for name, value in (("score_norm_sq", score_norm_sq),
                        ("curvature", kappa), ("t_value", t_value)):
        if not math.isfinite(value):
            raise ScoringFailure(sample_index, noise_level, f"non-finite {name}")
    return TypicalityScore(
        t_value=t_value,
        score_norm_sq=score_norm_sq,
        curvature=kappa,
        sign=sign,
        timestep=noise_level,
        probes_used=cfg.num_probes,
    )


def resolve_workers(requested: int | None) -> int:
    """Worker count after applying the SCOPED_THREADS cap (default 1)."""
    n = 1 if requested is None else max(1, int(requested))
    cap = os.environ.get("SCOPED_THREADS")
    if cap is not None:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise InputError(f"SCOPED_THREADS must be an integer, got {cap!r}")
    return n


def score_batch(model: ScoreModel, X: np.ndarray, noise_levels,
                schedule: NoiseSchedule | None, cfg: TypicalityConfig,
                n_workers: int | None = None):
    """Statistic for every (sample, noise level) pair.

    Returns (scores, failures): scores is an n x L list of TypicalityScore
    (None where scoring failed); failures is a list of (sample_index,
    reason). Per-sample seeding makes the output independent of worker
    count and chunking.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise InputError("X must be a 2-d (n, d) array")
    noise_levels = list(noise_levels)
    n = X.shape[0]
    scores = [[None] * len(noise_levels) for _ in range(n)]
    failures = []

    def run_one(i):
        rows, fail = [], None
        for nl in noise_levels:
            try:
                rows.append(scoped_statistic(model, X[i], nl, schedule, cfg, sample_index=i))
            except ScoringFailure as exc:
                rows.append(None)
                fail = (i, str(exc))
        return i, rows, fail

    workers = resolve_workers(n_workers)
    if workers == 1:
        results = map(run_one, range(n))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, range(n)))
    for i, rows, fail in results:
        scores[i] = rows
        if fail is not None:
            failures.append(fail)
    if failures:
        logger.warning("scoring failed for %d of %d samples", len(failures), n)
    return scores, failures


def write_typicality_csv(path, scores):
    """Per-(sample, noise level) CSV of the raw statistic components."""
    with open(path, "w") as fh:
        fh.write("sample_index,timestep,score_norm_sq,curvature,sign,t_value\n")
        for i, rows in enumerate(scores):
            for ts in rows:
                if ts is None:
                    continue
                fh.write(
                    f"{i},{ts.timestep},{ts.score_norm_sq!r},"
                    f"{ts.curvature!r},{ts.sign},{ts.t_value!r}\n"
                )
