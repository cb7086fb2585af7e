"""Command-line pipeline: gen, train, snr, calibrate, score, eval.

Exit codes: 0 success, 2 input error, 3 consistency error (artifacts that
do not belong together), 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .calibration import (
    anomaly_score_batch,
    apply_verdicts,
    calibrate,
    load_artifact,
    threshold_from_quantile,
)
from .config import ProjectConfig
from .datagen import DatasetSpec, generate, load_dataset, save_dataset
from .errors import ConsistencyError, InputError, NumericalError
from .evaluation import PairSpec, ablate_timesteps, evaluate_pairs, oracle_timestep
from .schedule import sigma_mode, snr_curve, select_mid_step
from .score_models import MlpDenoiser, load_model, save_model, train_dsm
from .typicality import write_typicality_csv

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CONSISTENCY = 3
EXIT_NUMERIC = 4


def _load_config(args) -> ProjectConfig:
    return ProjectConfig.load(args.config, getattr(args, "set", None))


def _load_data(path) -> np.ndarray:
    try:
        return load_dataset(path)
    except FileNotFoundError:
        raise InputError(f"dataset file not found: {path}")


def cmd_gen(args) -> int:
    spec = DatasetSpec.from_json(args.spec)
    save_dataset(generate(spec), args.out)
    print(f"wrote {spec.size} x {spec.dimension} {spec.kind} dataset to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    data = _load_data(args.data)
    model = MlpDenoiser(dim=data.shape[1], seed=cfg.seed,
                        schedule=cfg.schedule, **cfg.model_kwargs())
    model, losses = train_dsm(model, data, cfg.schedule, cfg.train_config())
    save_model(model, args.out)
    loss_csv = args.loss_csv or str(args.out) + ".loss.csv"
    with open(loss_csv, "w") as fh:
        fh.write("epoch,mean_loss\n")
        for i, v in enumerate(losses):
            fh.write(f"{i},{float(v)!r}\n")
    print(f"trained {len(losses)} epochs; final loss {losses[-1]:.6g}; "
          f"model -> {args.out}, losses -> {loss_csv}")
    return EXIT_OK


def cmd_snr(args) -> int:
    cfg = _load_config(args)
    if cfg.continuous:
        print(f"sigma_mode: {sigma_mode(cfg.prior)!r}")
        return EXIT_OK
    data = _load_data(args.data)
    curve = snr_curve(data, cfg.schedule)
    if args.out:
        curve.write_csv(args.out)
    blk = cfg.raw["calibration"]
    mid = select_mid_step(curve, float(blk["retention"]))
    print(f"selected steps: {int(blk['early_step'])} {mid}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _load_config(args)
    data = _load_data(args.data)
    model = load_model(args.model, schedule=cfg.schedule)
    timesteps = cfg.select_timesteps(data)
    artifact = calibrate(
        model, data, timesteps, cfg.noise_source(), cfg.typicality_config(),
        bandwidth_rule=cfg.raw["calibration"]["bandwidth_rule"],
        variant=cfg.calibration_variant(),
        n_workers=args.workers,
    )
    artifact.save(args.out)
    print(f"calibrated {artifact.variant} artifact at levels "
          f"{list(artifact.timesteps)} -> {args.out}")
    return EXIT_OK


def cmd_score(args) -> int:
    cfg = _load_config(args)
    data = _load_data(args.data)
    model = load_model(args.model, schedule=cfg.schedule)
    artifact = load_artifact(args.artifact)
    results, t_scores, failures = anomaly_score_batch(
        artifact, model, data, cfg.noise_source(), cfg.typicality_config(),
        n_workers=args.workers,
    )
    cutoff = None
    if args.alpha is not None:
        cutoff = threshold_from_quantile(artifact.id_nll_scores(), args.alpha)
        results = apply_verdicts(results, cutoff)
    with open(args.out, "w") as fh:
        fh.write("sample_index,anomaly_score" + (",verdict" if cutoff is not None else "") + "\n")
        for i, res in enumerate(results):
            score = "nan" if res is None else repr(res.value)
            line = f"{i},{score}"
            if cutoff is not None:
                line += "," + ("" if res is None else str(int(res.verdict)))
            fh.write(line + "\n")
    if args.t_csv:
        write_typicality_csv(args.t_csv, t_scores)
    n_ok = sum(1 for r in results if r is not None)
    msg = f"scored {n_ok}/{len(results)} samples -> {args.out}"
    if cutoff is not None:
        flagged = sum(1 for r in results if r is not None and r.verdict)
        msg += f"; cutoff {cutoff:.6g} flags {flagged}"
    if failures:
        msg += f"; {len(failures)} scoring failures"
    print(msg)
    return EXIT_OK


def _load_manifest(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise InputError(f"manifest file not found: {path}")
    except json.JSONDecodeError as exc:
        raise InputError(f"manifest is not valid JSON: {exc}")
    if "pairs" not in raw or not isinstance(raw["pairs"], list):
        raise InputError("manifest needs a 'pairs' list")
    return raw


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    manifest = _load_manifest(args.manifest)
    specs = []
    for entry in manifest["pairs"]:
        try:
            model = load_model(entry["model"], schedule=cfg.schedule)
            specs.append(PairSpec(
                id_name=entry["id_name"],
                ood_name=entry["ood_name"],
                id_data=_load_data(entry["id_data"]),
                ood_data=_load_data(entry["ood_data"]),
                artifact=load_artifact(entry["artifact"]),
                model=model,
            ))
        except KeyError as exc:
            raise InputError(f"manifest pair missing field {exc.args[0]!r}")
    report = evaluate_pairs(
        specs, cfg.noise_source(), cfg.typicality_config(),
        n_workers=args.workers,
        split_fraction=float(cfg.raw["eval"]["split_fraction"]),
        seed=cfg.seed,
        no_sign_rerun=args.no_sign,
    )
    report.config = cfg.raw
    payload = json.loads(report.to_json())
    if args.ablate:
        steps = [int(t) for t in cfg.raw["eval"]["ablate_steps"]]
        ablation = {}
        for spec in specs:
            if spec.id_name == spec.ood_name:
                continue
            table = ablate_timesteps(
                spec.model, spec.id_data, spec.ood_data, steps,
                cfg.noise_source(), cfg.typicality_config(),
                bandwidth_rule=cfg.raw["calibration"]["bandwidth_rule"],
                n_workers=args.workers,
            )
            best_t, best_a = oracle_timestep(table)
            ablation[f"{spec.id_name}|{spec.ood_name}"] = {
                "table": [[t, a] for t, a in table],
                "oracle": [best_t, best_a],
            }
        payload["ablation"] = ablation
    with open(args.out_report, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if args.out_matrix:
        report.write_matrix_csv(args.out_matrix)
    for pair in report.pairs:
        extra = "" if pair.auroc_no_sign is None else f" (no-sign {pair.auroc_no_sign:.4f})"
        print(f"{pair.id_name} -> {pair.ood_name}: AUROC {pair.auroc:.4f}{extra}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scoped",
        description="Score-curvature typicality pipeline for OOD detection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("spec", help="dataset spec JSON")
    p.add_argument("out", help="output path (.csv or binary SDAT)")
    p.set_defaults(func=cmd_gen)

    def common(p, data=True):
        p.add_argument("--config", required=True, help="project config JSON")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry (dotted path)")
        if data:
            p.add_argument("--data", required=True, help="dataset file")

    p = sub.add_parser("train", help="train the MLP denoiser by score matching")
    common(p)
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--loss-csv", help="per-epoch loss CSV (default <out>.loss.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("snr", help="signal-fraction curve and step selection")
    common(p)
    p.add_argument("--out", help="curve CSV output")
    p.set_defaults(func=cmd_snr)

    p = sub.add_parser("calibrate", help="fit the KDE calibration artifact")
    common(p)
    p.add_argument("--model", required=True, help="score model file")
    p.add_argument("--out", required=True, help="output artifact file")
    p.add_argument("--workers", type=int, help="worker threads (capped by SCOPED_THREADS)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("score", help="anomaly scores for a dataset")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--artifact", required=True)
    p.add_argument("--out", required=True, help="scores CSV")
    p.add_argument("--alpha", type=float, help="false-positive rate for verdicts")
    p.add_argument("--t-csv", help="also dump raw per-level statistics")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="pairwise AUROC matrix from a manifest")
    common(p, data=False)
    p.add_argument("--manifest", required=True, help="pair manifest JSON")
    p.add_argument("--out-report", required=True, help="report JSON")
    p.add_argument("--out-matrix", help="AUROC matrix CSV")
    p.add_argument("--ablate", action="store_true",
                   help="add a per-timestep sweep plus oracle row per pair")
    p.add_argument("--no-sign", action="store_true",
                   help="also evaluate without the sign factor")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConsistencyError as exc:
        print(f"consistency error: {exc}", file=sys.stderr)
        return EXIT_CONSISTENCY
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
