"""Project configuration: one JSON file drives the whole pipeline.

Exactly one of the "schedule" (discrete) or "continuous" (log-normal sigma
prior) blocks must be present. Any key can be overridden on the command
line with --set dotted.path=value.
"""

from __future__ import annotations

import copy
import json

from .errors import InputError
from .schedule import (
    LogNormalSigmaPrior,
    build_linear_schedule,
    select_mid_step,
    sigma_mode,
    snr_curve,
)
from .score_models import DsmTrainConfig
from .typicality import TypicalityConfig

DEFAULTS = {
    "seed": 0,
    "model": {
        "hidden": [128, 128, 128],
        "activation": "tanh",
        "parameterization": "eps",
        "emb_freqs": 4,
    },
    "train": {
        "epochs": 200,
        "batch_size": 128,
        "lr": 1e-3,
        "noise_sampling": None,  # inferred from the schedule block
        "weight_rule": "sigma2",
    },
    "typicality": {
        "num_probes": 1,
        "probe_kind": "rademacher",
        "epsilon": 1e-12,
        "noise_mode": "fresh",
        "apply_sign": True,
    },
    "calibration": {
        "variant": "auto",  # derived from the timestep count unless set
        "timesteps": "auto",
        "retention": 0.95,
        "early_step": 1,
        "bandwidth_rule": "silverman",
    },
    "eval": {
        "alpha": 0.05,
        "split_fraction": 0.5,
        "ablate_steps": [1, 100, 300],
    },
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def apply_overrides(raw: dict, pairs) -> dict:
    """Apply --set dotted.key=value overrides; values parse as JSON."""
    raw = copy.deepcopy(raw)
    for pair in pairs or ():
        if "=" not in pair:
            raise InputError(f"--set expects key=value, got {pair!r}")
        key, _, text = pair.partition("=")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise InputError(f"--set path {key!r} crosses a non-object value")
        node[parts[-1]] = value
    return raw


class ProjectConfig:
    def __init__(self, raw: dict):
        self.raw = _deep_merge(DEFAULTS, raw)
        has_discrete = "schedule" in self.raw
        has_continuous = "continuous" in self.raw
        if has_discrete == has_continuous:
            raise InputError(
                "config needs exactly one of the 'schedule' or 'continuous' blocks"
            )
        self.continuous = has_continuous
        # Construct eagerly so malformed blocks fail at load time.
        self.schedule = None
        self.prior = None
        if has_discrete:
            blk = self.raw["schedule"]
            try:
                self.schedule = build_linear_schedule(
                    int(blk["T"]), float(blk["beta_min"]), float(blk["beta_max"])
                )
            except KeyError as exc:
                raise InputError(f"schedule block missing field {exc.args[0]!r}")
        else:
            blk = self.raw["continuous"]
            try:
                self.prior = LogNormalSigmaPrior(float(blk["mu"]), float(blk["sigma_log"]))
            except KeyError as exc:
                raise InputError(f"continuous block missing field {exc.args[0]!r}")

    @classmethod
    def load(cls, path, overrides=None) -> "ProjectConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise InputError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise InputError(f"config is not valid JSON: {exc}")
        return cls(apply_overrides(raw, overrides))

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def noise_source(self):
        """The fingerprintable noise description (schedule or prior)."""
        return self.schedule if self.schedule is not None else self.prior

    def typicality_config(self) -> TypicalityConfig:
        blk = self.raw["typicality"]
        return TypicalityConfig(
            num_probes=int(blk["num_probes"]),
            probe_kind=blk["probe_kind"],
            epsilon=float(blk["epsilon"]),
            noise_mode=blk["noise_mode"],
            seed=self.seed,
            apply_sign=bool(blk["apply_sign"]),
        )

    def train_config(self) -> DsmTrainConfig:
        blk = self.raw["train"]
        sampling = blk["noise_sampling"]
        if sampling is None:
            sampling = "lognormal-sigma" if self.continuous else "uniform-step"
        return DsmTrainConfig(
            epochs=int(blk["epochs"]),
            batch_size=int(blk["batch_size"]),
            lr=float(blk["lr"]),
            noise_sampling=sampling,
            weight_rule=blk["weight_rule"],
            seed=self.seed,
            sigma_prior=self.prior,
        )

    def model_kwargs(self) -> dict:
        blk = self.raw["model"]
        return {
            "hidden": tuple(int(h) for h in blk["hidden"]),
            "activation": blk["activation"],
            "parameterization": blk["parameterization"],
            "emb_freqs": int(blk["emb_freqs"]),
        }

    def calibration_variant(self):
        """Explicit variant name, or None for count-derived ("auto")."""
        variant = self.raw["calibration"]["variant"]
        if variant == "auto":
            return None
        if variant not in ("single", "two-step", "oracle"):
            raise InputError(f"unknown calibration variant {variant!r}")
        return variant

    def select_timesteps(self, dataset):
        """Noise levels for calibration per the config's variant and rule.

        Discrete "auto": early step plus the retention scan's mid step
        (two-step, the default) or the mid step alone (single/oracle).
        Continuous "auto": the mode of the sigma prior. Explicit lists pass
        through as steps (discrete) or raw sigmas (continuous).
        """
        blk = self.raw["calibration"]
        variant = self.calibration_variant()
        steps = blk["timesteps"]
        if steps != "auto":
            return [float(s) for s in steps] if self.continuous \
                else [int(t) for t in steps]
        if self.continuous:
            return [sigma_mode(self.prior)]
        curve = snr_curve(dataset, self.schedule)
        mid = select_mid_step(curve, float(blk["retention"]))
        if variant in ("single", "oracle"):
            return [mid]
        return [int(blk["early_step"]), mid]
