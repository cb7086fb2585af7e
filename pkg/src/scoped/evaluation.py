"""AUROC evaluation, pairwise train/eval matrices, timestep ablations,
oracle selection, and function-evaluation accounting.

AUROC is the probability that a random OOD anomaly score exceeds a random
ID score, with ties counted one half (Mann-Whitney). Function evaluations
are reported as (#forward passes, #JVPs) per scored sample; the two are
never merged.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ._binio import fnv1a64
from .calibration import (
    CalibrationArtifact,
    anomaly_score_batch,
    calibrate,
)
from .errors import InputError
from .score_models import CallCounter, ScoreModel
from .seeding import STREAM_SPLIT, derive_rng
from .typicality import TypicalityConfig


def _tied_ranks(values: np.ndarray) -> np.ndarray:
    """Average ranks (1-based); exact multiples of 0.5."""
    _, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    avg = ends - (counts - 1) / 2.0
    return avg[inverse]


def auroc(id_scores, ood_scores) -> float:
    """P(random OOD score > random ID score) + 0.5 P(tie).

    Computed from rank sums in O(n log n). The centered form guarantees
    auroc(a, b) + auroc(b, a) == 1 exactly, even with ties.
    """
    id_scores = np.asarray(id_scores, dtype=np.float64).reshape(-1)
    ood_scores = np.asarray(ood_scores, dtype=np.float64).reshape(-1)
    if id_scores.size == 0 or ood_scores.size == 0:
        raise InputError("both score batches must be non-empty")
    ranks = _tied_ranks(np.concatenate([id_scores, ood_scores]))
    n_i, n_o = id_scores.size, ood_scores.size
    u = float(np.sum(ranks[n_i:])) - n_o * (n_o + 1) / 2.0
    d = float(n_i) * float(n_o)
    return 0.5 + (u - 0.5 * d) / d


@dataclass(frozen=True)
class PairSpec:
    """One train/eval cell: datasets plus the detector calibrated on the ID side."""

    id_name: str
    ood_name: str
    id_data: np.ndarray
    ood_data: np.ndarray
    artifact: CalibrationArtifact
    model: ScoreModel

    def __post_init__(self):
        if np.asarray(self.id_data).shape[1] != np.asarray(self.ood_data).shape[1]:
            raise InputError(
                f"pair {self.id_name}/{self.ood_name}: datasets disagree on dimension"
            )


@dataclass(frozen=True)
class PairResult:
    id_name: str
    ood_name: str
    auroc: float
    n_id: int
    n_ood: int
    auroc_no_sign: float | None = None


@dataclass
class EvalReport:
    pairs: list = field(default_factory=list)
    nfe: tuple = (0.0, 0.0)            # measured (#F, #J) per scored sample
    nfe_expected: tuple = (0, 0)       # convention for the variant
    variant: str = "single"
    seed: int = 0
    n_tie_broken: int = 0
    config: dict = field(default_factory=dict)

    def matrix(self):
        """(row_names, col_names, auroc array with NaN where no pair ran)."""
        rows = list(dict.fromkeys(p.id_name for p in self.pairs))
        cols = list(dict.fromkeys(p.ood_name for p in self.pairs))
        m = np.full((len(rows), len(cols)), np.nan)
        for p in self.pairs:
            m[rows.index(p.id_name), cols.index(p.ood_name)] = p.auroc
        return rows, cols, m

    def write_matrix_csv(self, path):
        rows, cols, m = self.matrix()
        with open(path, "w") as fh:
            fh.write("train," + ",".join(cols) + "\n")
            for name, row in zip(rows, m):
                cells = ["" if np.isnan(v) else repr(float(v)) for v in row]
                fh.write(name + "," + ",".join(cells) + "\n")

    def to_json(self, path=None):
        payload = {
            "pairs": [asdict(p) for p in self.pairs],
            "nfe": {"forward_per_sample": self.nfe[0], "jvp_per_sample": self.nfe[1]},
            "nfe_expected": {"forward": self.nfe_expected[0], "jvp": self.nfe_expected[1]},
            "variant": self.variant,
            "seed": self.seed,
            "n_tie_broken": self.n_tie_broken,
            "config": self.config,
        }
        text = json.dumps(payload, indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def _pair_seed(seed: int, id_name: str, ood_name: str) -> int:
    """Order-independent per-pair seed derived from names, not list position."""
    return (int(seed) ^ fnv1a64(f"{id_name}|{ood_name}".encode())) & 0x7FFFFFFFFFFFFFFF


def _finite_values(results):
    vals = [r.value for r in results if r is not None]
    return np.asarray(vals, dtype=np.float64)


def evaluate_pairs(specs, schedule, cfg: TypicalityConfig | None = None,
                   n_workers=None, split_fraction: float = 0.5, seed: int = 0,
                   no_sign_rerun: bool = False) -> EvalReport:
    """AUROC for every pair; self-pairs are split into held-out halves.

    Each pair scores under a seed derived from its dataset names, so the
    report does not depend on the order of specs. Model calls are counted
    to report measured function evaluations per scored sample.
    """
    specs = list(specs)
    report = EvalReport(seed=seed)
    if not specs:
        return report
    if not 0.0 < split_fraction < 1.0:
        raise InputError("split_fraction must lie in (0, 1)")
    report.variant = specs[0].artifact.variant
    total_f = total_j = total_scored = 0
    for spec in specs:
        base_cfg = cfg if cfg is not None else spec.artifact.typicality_cfg
        pair_cfg = replace(base_cfg, seed=_pair_seed(seed, spec.id_name, spec.ood_name))
        if spec.id_name == spec.ood_name:
            split_rng = derive_rng(seed, STREAM_SPLIT,
                                   fnv1a64(spec.id_name.encode()) & 0x7FFFFFFF)
            order = split_rng.permutation(spec.id_data.shape[0])
            cut = max(1, int(split_fraction * order.size))
            id_data, ood_data = spec.id_data[order[:cut]], spec.id_data[order[cut:]]
        else:
            id_data, ood_data = spec.id_data, spec.ood_data

        counter = CallCounter(spec.model)
        id_res, _, _ = anomaly_score_batch(spec.artifact, counter, id_data,
                                           schedule, pair_cfg, n_workers=n_workers)
        # OOD rows reseed so their draws are independent of the ID rows
        # while staying order-invariant.
        ood_cfg = replace(pair_cfg, seed=pair_cfg.seed ^ 0x5EED)
        ood_res, _, _ = anomaly_score_batch(spec.artifact, counter, ood_data,
                                            schedule, ood_cfg, n_workers=n_workers)
        id_scores, ood_scores = _finite_values(id_res), _finite_values(ood_res)
        value = auroc(id_scores, ood_scores)
        value_no_sign = None
        if no_sign_rerun:
            nosign_id, _, _ = anomaly_score_batch(
                spec.artifact, spec.model, id_data, schedule,
                replace(pair_cfg, apply_sign=False), n_workers=n_workers)
            nosign_ood, _, _ = anomaly_score_batch(
                spec.artifact, spec.model, ood_data, schedule,
                replace(ood_cfg, apply_sign=False), n_workers=n_workers)
            value_no_sign = auroc(_finite_values(nosign_id), _finite_values(nosign_ood))
        report.pairs.append(PairResult(
            id_name=spec.id_name, ood_name=spec.ood_name, auroc=value,
            n_id=id_scores.size, n_ood=ood_scores.size,
            auroc_no_sign=value_no_sign,
        ))
        report.n_tie_broken += sum(
            1 for r in (*id_res, *ood_res) if r is not None and r.tie_broken
        )
        total_f += counter.n_forward
        total_j += counter.n_jvp
        total_scored += id_scores.size + ood_scores.size
    if total_scored:
        report.nfe = (total_f / total_scored, total_j / total_scored)
    base_cfg = cfg if cfg is not None else specs[0].artifact.typicality_cfg
    report.nfe_expected = nfe_account(report.variant, base_cfg)
    return report


def ablate_timesteps(model: ScoreModel, id_dataset, ood_dataset, timesteps,
                     schedule, cfg: TypicalityConfig, bandwidth_rule="silverman",
                     split_fraction: float = 0.5, n_workers=None):
    """Single-step AUROC per timestep, sorted by step.

    The ID set is split once: one half calibrates each per-step artifact,
    the held-out half is scored against the OOD set.
    """
    id_dataset = np.asarray(id_dataset, dtype=np.float64)
    ood_dataset = np.asarray(ood_dataset, dtype=np.float64)
    timesteps = list(timesteps)
    if not timesteps:
        raise InputError("need at least one timestep")
    order = derive_rng(cfg.seed, STREAM_SPLIT).permutation(id_dataset.shape[0])
    cut = max(1, int(split_fraction * order.size))
    fit_data, held = id_dataset[order[:cut]], id_dataset[order[cut:]]
    table = []
    for t in sorted(timesteps, key=float):
        artifact = calibrate(model, fit_data, [t], schedule, cfg,
                             bandwidth_rule=bandwidth_rule, n_workers=n_workers)
        id_res, _, _ = anomaly_score_batch(artifact, model, held, schedule,
                                           cfg, n_workers=n_workers)
        ood_cfg = replace(cfg, seed=cfg.seed ^ 0x5EED)
        ood_res, _, _ = anomaly_score_batch(artifact, model, ood_dataset, schedule,
                                            ood_cfg, n_workers=n_workers)
        table.append((t, auroc(_finite_values(id_res), _finite_values(ood_res))))
    return table


def oracle_timestep(table):
    """(best step, best AUROC); ties break to the smaller step."""
    if isinstance(table, dict):
        table = list(table.items())
    if not table:
        raise InputError("empty ablation table")
    best_t, best_a = None, -np.inf
    for t, a in sorted(table, key=lambda row: float(row[0])):
        if a > best_a:
            best_t, best_a = t, a
    return best_t, best_a


def nfe_account(variant: str, cfg: TypicalityConfig):
    """(#forward, #JVP) per scored sample for a variant."""
    if variant in ("single", "oracle"):
        return 1, cfg.num_probes
    if variant == "two-step":
        return 2, 2 * cfg.num_probes
    raise InputError(f"unknown variant {variant!r}")
