"""Deterministic synthetic dataset generators.

Small-scale stand-ins for replay buffers and image collections: every
generator is a pure function of its spec (seed included), so the same spec
always yields bit-identical batches. Datasets are flat (n, d) float arrays;
RL-style transitions are represented as concatenated flat vectors, which is
all the statistic ever sees.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ._binio import Reader, Writer
from .errors import InputError
from .seeding import STREAM_DATA, derive_rng

MAGIC_DATA = b"SDAT"
DATA_VERSION = 1

KINDS = ("gaussian", "gmm", "ring", "two-moons", "shifted-pair", "replay-mixture")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    dimension: int
    size: int
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown dataset kind {self.kind!r}")
        if self.size < 1:
            raise InputError("size must be >= 1")
        if self.dimension < 1:
            raise InputError("dimension must be >= 1")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            raw = json.load(fh)
        try:
            return cls(
                kind=raw["kind"],
                dimension=int(raw["dimension"]),
                size=int(raw["size"]),
                seed=int(raw.get("seed", 0)),
                params=raw.get("params", {}),
            )
        except KeyError as exc:
            raise InputError(f"dataset spec missing field {exc.args[0]!r}")


def _vector_param(params, name, dim, default):
    value = params.get(name, default)
    value = np.asarray(value, dtype=np.float64)
    if value.ndim == 0:
        return np.full(dim, float(value))
    if value.shape != (dim,):
        raise InputError(f"param {name!r} has shape {value.shape}, expected ({dim},)")
    return value


def _gaussian(spec, rng):
    mean = _vector_param(spec.params, "mean", spec.dimension, 0.0)
    scale = _vector_param(spec.params, "scale", spec.dimension, 1.0)
    return mean + scale * rng.standard_normal((spec.size, spec.dimension))


def _gmm(spec, rng):
    means = np.asarray(spec.params["means"], dtype=np.float64)
    if means.ndim != 2 or means.shape[1] != spec.dimension:
        raise InputError("gmm means must be (K, dimension)")
    K = means.shape[0]
    weights = np.asarray(spec.params.get("weights", np.full(K, 1.0 / K)), dtype=np.float64)
    scales = np.asarray(spec.params.get("scales", np.ones(K)), dtype=np.float64)
    if weights.size != K or scales.size != K:
        raise InputError("gmm weights/scales must match number of means")
    comp = rng.choice(K, size=spec.size, p=weights / weights.sum())
    noise = rng.standard_normal((spec.size, spec.dimension))
    return means[comp] + scales[comp, None] * noise


def _ring(spec, rng):
    if spec.dimension < 2:
        raise InputError("ring needs dimension >= 2")
    radius = float(spec.params.get("radius", 3.0))
    width = float(spec.params.get("width", 0.1))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=spec.size)
    out = width * rng.standard_normal((spec.size, spec.dimension))
    out[:, 0] += radius * np.cos(theta)
    out[:, 1] += radius * np.sin(theta)
    return out


def _two_moons(spec, rng):
    if spec.dimension < 2:
        raise InputError("two-moons needs dimension >= 2")
    width = float(spec.params.get("width", 0.1))
    n_top = spec.size // 2
    theta = rng.uniform(0.0, np.pi, size=spec.size)
    out = width * rng.standard_normal((spec.size, spec.dimension))
    out[:n_top, 0] += np.cos(theta[:n_top])
    out[:n_top, 1] += np.sin(theta[:n_top])
    out[n_top:, 0] += 1.0 - np.cos(theta[n_top:])
    out[n_top:, 1] += 0.5 - np.sin(theta[n_top:])
    return out


def _shifted_pair(spec, rng):
    shift = _vector_param(spec.params, "shift", spec.dimension,
                          np.eye(1, spec.dimension, 0)[0] * 10.0)
    scale = _vector_param(spec.params, "scale", spec.dimension, 1.0)
    out = scale * rng.standard_normal((spec.size, spec.dimension))
    out[spec.size // 2:] += shift
    return out


def _replay_mixture(spec, rng):
    """Clustered visitation-style data: modes drawn once from the seed."""
    n_modes = int(spec.params.get("n_modes", 4))
    spread = float(spec.params.get("spread", 5.0))
    scale = float(spec.params.get("scale", 1.0))
    weights = np.asarray(
        spec.params.get("weights", np.full(n_modes, 1.0 / n_modes)), dtype=np.float64
    )
    if weights.size != n_modes:
        raise InputError("replay-mixture weights must match n_modes")
    mode_rng = derive_rng(spec.seed, STREAM_DATA, 1)
    modes = spread * mode_rng.standard_normal((n_modes, spec.dimension))
    comp = rng.choice(n_modes, size=spec.size, p=weights / weights.sum())
    return modes[comp] + scale * rng.standard_normal((spec.size, spec.dimension))


_GENERATORS = {
    "gaussian": _gaussian,
    "gmm": _gmm,
    "ring": _ring,
    "two-moons": _two_moons,
    "shifted-pair": _shifted_pair,
    "replay-mixture": _replay_mixture,
}


def generate(spec: DatasetSpec) -> np.ndarray:
    """Sample the dataset described by spec; bit-identical per spec."""
    rng = derive_rng(spec.seed, STREAM_DATA)
    try:
        return _GENERATORS[spec.kind](spec, rng)
    except KeyError as exc:
        raise InputError(f"dataset spec param missing: {exc.args[0]!r}")


SHIFT_KINDS = ("reward-shift", "policy-shift", "seed-shift")


def make_task_pair(kind: str, base: DatasetSpec):
    """(id batch, ood batch) realizing one of the three shift categories.

    reward-shift: disjoint support halves (clusters far apart);
    policy-shift: same components, flipped mixture weights;
    seed-shift: identical distribution, different seed. The seed-shift analog
    is deliberately weaker than replay buffers from independently trained
    policies: resampling the same distribution is indistinguishable by any
    statistic, so downstream AUROC sits near 0.5.
    """
    if kind not in SHIFT_KINDS:
        raise InputError(f"unknown task-pair kind {kind!r}")
    if kind == "reward-shift":
        shift = _vector_param(base.params, "shift", base.dimension,
                              np.eye(1, base.dimension, 0)[0] * 10.0)
        id_spec = DatasetSpec("gaussian", base.dimension, base.size, base.seed,
                              {**base.params, "mean": (shift / 2).tolist()})
        ood_spec = DatasetSpec("gaussian", base.dimension, base.size, base.seed + 1,
                               {**base.params, "mean": (-shift / 2).tolist()})
        return generate(id_spec), generate(ood_spec)
    if kind == "policy-shift":
        sep = float(base.params.get("separation", 4.0))
        means = np.zeros((2, base.dimension))
        means[0, 0], means[1, 0] = -sep / 2, sep / 2
        w = base.params.get("weights", (0.9, 0.1))
        id_spec = DatasetSpec("gmm", base.dimension, base.size, base.seed,
                              {"means": means.tolist(), "weights": list(w)})
        ood_spec = DatasetSpec("gmm", base.dimension, base.size, base.seed + 1,
                               {"means": means.tolist(), "weights": list(w)[::-1]})
        return generate(id_spec), generate(ood_spec)
    id_spec = base
    ood_spec = DatasetSpec(base.kind, base.dimension, base.size, base.seed + 1,
                           base.params)
    return generate(id_spec), generate(ood_spec)


# ---------------------------------------------------------------------------
# On-disk formats
# ---------------------------------------------------------------------------


def save_dataset(X: np.ndarray, path):
    """Write CSV (by extension) or the SDAT binary container."""
    X = np.asarray(X)
    if X.ndim != 2:
        raise InputError("dataset must be 2-d")
    if str(path).endswith(".csv"):
        with open(path, "w") as fh:
            fh.write(",".join(f"x{i}" for i in range(X.shape[1])) + "\n")
            for row in X:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
        return
    w = Writer()
    w.magic(MAGIC_DATA)
    w.u32(DATA_VERSION)
    w.u64(X.shape[0])
    w.u64(X.shape[1])
    w.array(X, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(w.getvalue())


def load_dataset(path) -> np.ndarray:
    if str(path).endswith(".csv"):
        data = np.genfromtxt(path, delimiter=",", skip_header=1, dtype=np.float64)
        return np.atleast_2d(data)
    with open(path, "rb") as fh:
        r = Reader(fh.read())
    r.magic(MAGIC_DATA)
    version = r.u32()
    if version != DATA_VERSION:
        raise InputError(f"unsupported data format version {version}")
    rows = r.u64()
    cols = r.u64()
    return r.array(rows * cols, dtype="<f4").astype(np.float64).reshape(rows, cols)
