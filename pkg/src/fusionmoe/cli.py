"""Command-line surface: data generation, training, evaluation, gradient
checks, routing reports, hyperparameter sweeps and bundle validation.

Exit codes: 0 success, 2 usage, 3 config error, 4 data/format error,
5 numeric error or failed gradient check.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, TrainConfig, apply_overrides, load_config
from .dataio import (FormatError, FormatErrorCode, InfeasibleRegimeError,
                     SynthConfig, generate_bundle, read_bundle, stack_records)
from .gradcheck import run_suite
from .interaction import cosine_rows
from .model import ModelDims
from .train import (Metrics, TrainingFault, evaluate, load_checkpoint,
                    save_checkpoint, train_model)
from .tensor import NumericFault

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5


def _load_data(path) -> tuple[ModelDims, dict]:
    header, records = read_bundle(path)
    return ModelDims.from_header(header), stack_records(records)


def _resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if getattr(args, "set", None):
        cfg = apply_overrides(cfg, args.set)
    return cfg


def _epoch_csv_row(rec) -> dict:
    m = rec.test
    row = {"epoch": rec.epoch}
    row.update({f"train_{k}": v for k, v in rec.train_losses.items()})
    row.update(accuracy=m.accuracy, f1_fake=m.f1_fake, f1_real=m.f1_real)
    if m.routing_counts is not None:
        row["routing_counts"] = "|".join(str(c) for c in m.routing_counts)
    if m.routing_agreement is not None:
        row["routing_agreement"] = m.routing_agreement
    return row


def _write_epoch_csv(path, history):
    if not history:
        return
    names = list(_epoch_csv_row(history[-1]).keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=names, restval="")
        writer.writeheader()
        for rec in history:
            writer.writerow(_epoch_csv_row(rec))


def _metrics_doc(result) -> dict:
    return {
        "final": result.final.to_dict(),
        "best_epoch": result.best_epoch,
        "best": result.best.to_dict(),
        "epochs": [
            {"epoch": r.epoch, "train_losses": r.train_losses,
             "test": r.test.to_dict()}
            for r in result.history
        ],
    }


def _summary_line(tag: str, m: Metrics) -> str:
    extra = ""
    if m.routing_agreement is not None:
        extra = f" routing_agreement={m.routing_agreement:.3f}"
    return (f"{tag}: accuracy={m.accuracy:.4f} f1_fake={m.f1_fake:.4f} "
            f"f1_real={m.f1_real:.4f} n={m.n}{extra}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.counts:
        parts = [int(v) for v in args.counts.split(",")]
        if len(parts) != 4:
            raise ConfigError("--counts expects four comma-separated integers "
                              "(dm,da,am,aa)")
        n_dm, n_da, n_am, n_aa = parts
    else:
        n_dm = n_da = n_am = n_aa = args.per_regime
    cfg = SynthConfig(
        n_dm=n_dm, n_da=n_da, n_am=n_am, n_aa=n_aa,
        p_text=args.p_text, p_image=args.p_image,
        rho_hi=args.rho_hi, rho_lo=args.rho_lo,
        separation=args.separation, noise=args.noise, seed=args.seed,
        n_text_tokens=args.text_tokens, text_dim=args.text_dim,
        n_image_tokens=args.image_tokens, image_dim=args.image_dim,
        clip_dim=args.clip_dim)
    header = generate_bundle(args.out, cfg)
    print(json.dumps({
        "out": str(args.out), "n_samples": header.n_samples,
        "counts": {"DM": n_dm, "DA": n_da, "AM": n_am, "AA": n_aa},
        "seed": args.seed,
    }))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    dims, data = _load_data(args.bundle)
    if args.test_bundle:
        test_dims, test_data = _load_data(args.test_bundle)
        if test_dims != dims:
            raise FormatError(FormatErrorCode.BAD_DIMS,
                              f"test bundle dims {test_dims} != train dims {dims}")
    else:
        test_data = None

    t0 = time.perf_counter()
    log = None
    if not args.quiet:
        def log(rec):
            print(_summary_line(f"epoch {rec.epoch:3d}", rec.test))
    result = train_model(data, test_data, dims, cfg, log=log)
    elapsed = time.perf_counter() - t0

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "checkpoint.npz", result.model)
    doc = _metrics_doc(result)
    doc["elapsed_seconds"] = elapsed
    doc["config"] = cfg.to_dict()
    (out_dir / "metrics.json").write_text(json.dumps(doc, indent=2),
                                          encoding="utf-8")
    _write_epoch_csv(out_dir / "epochs.csv", result.history)
    print(_summary_line("final", result.final))
    print(_summary_line(f"best (epoch {result.best_epoch})", result.best))
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    _, data = _load_data(args.bundle)
    metrics = evaluate(model, data)
    doc = metrics.to_dict()
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2), encoding="utf-8")
    print(json.dumps(doc))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(quick=args.quick)
    failed = 0
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        print(f"{status} {res.name}: max_rel_err={res.error:.3e} "
              f"(tol {res.tolerance:.0e})")
        failed += not res.passed
    print(f"{len(results) - failed}/{len(results)} gradient checks passed")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def cmd_route_stats(args) -> int:
    model = load_checkpoint(args.checkpoint)
    _, data = _load_data(args.bundle)
    metrics = evaluate(model, data)
    if metrics.routing_counts is None:
        print("checkpoint is a unimodal ablation; no routing to report")
        return EXIT_OK
    doc = {
        "n": metrics.n,
        "routing_counts": metrics.routing_counts,
        "routing_fractions": [c / metrics.n for c in metrics.routing_counts],
        "mean_delta": metrics.mean_delta,
        "mean_rho": metrics.mean_rho,
        "routing_agreement": metrics.routing_agreement,
    }
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2), encoding="utf-8")
    names = ("DM", "DA", "AM", "AA")
    for k, name in enumerate(names):
        share = doc["routing_fractions"][k]
        d = doc["mean_delta"][k]
        r = doc["mean_rho"][k]
        d_s = "-" if d is None else f"{d:.4f}"
        r_s = "-" if r is None else f"{r:.4f}"
        print(f"expert {k} ({name}): n={doc['routing_counts'][k]:6d} "
              f"share={share:.3f} mean_delta={d_s} mean_rho={r_s}")
    if doc["routing_agreement"] is not None:
        print(f"dispatch agreement with generator truth: "
              f"{doc['routing_agreement']:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    dims, data = _load_data(args.bundle)
    test_data = _load_data(args.test_bundle)[1] if args.test_bundle else None
    values = [float(v) for v in args.values.split(",")]
    if not values:
        raise ConfigError("--values must list at least one number")

    rows = []
    for value in values:
        if args.param == "beta":
            run_cfg = cfg.replace(beta=value)
        else:
            run_cfg = cfg.replace(lr_gate=value)
        result = train_model(data, test_data, dims, run_cfg)
        rows.append({
            "param": args.param, "value": value,
            "accuracy": result.final.accuracy,
            "f1_fake": result.final.f1_fake,
            "f1_real": result.final.f1_real,
            "best_accuracy": result.best.accuracy,
            "routing_agreement": result.final.routing_agreement,
        })
        print(f"{args.param}={value:g}: accuracy={result.final.accuracy:.4f} "
              f"best={result.best.accuracy:.4f}")

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "sweep.json").write_text(json.dumps(rows, indent=2),
                                        encoding="utf-8")
    with open(out_dir / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return EXIT_OK


def cmd_validate(args) -> int:
    header, records = read_bundle(args.bundle)
    cos = cosine_rows(np.stack([r.clip_text for r in records]),
                      np.stack([r.clip_image for r in records])) if records else np.array([])
    labels = np.array([r.y for r in records], dtype=np.int64)
    truths = np.array([r.interaction_truth for r in records], dtype=np.int64)
    doc = {
        "bundle": str(args.bundle),
        "version": header.version,
        "n_samples": header.n_samples,
        "n_text_tokens": header.n_text_tokens,
        "text_dim": header.text_dim,
        "n_image_tokens": header.n_image_tokens,
        "image_dim": header.image_dim,
        "clip_dim": header.clip_dim,
        "label_counts": {"real": int(np.sum(labels == 0)),
                         "fake": int(np.sum(labels == 1))},
        "truth_counts": {str(t): int(np.sum(truths == t))
                         for t in sorted(set(truths.tolist()))},
        "alignment_cosine": {
            "min": float(cos.min()) if cos.size else None,
            "mean": float(cos.mean()) if cos.size else None,
            "max": float(cos.max()) if cos.size else None,
        },
        "valid": True,
    }
    if args.details:
        doc["records"] = [
            {"index": i, "y": int(r.y), "interaction_truth": int(r.interaction_truth),
             "alignment_cosine": float(cos[i])}
            for i, r in enumerate(records)]
    print(json.dumps(doc, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusionmoe",
        description="Interaction-routed mixture-of-experts fusion classifier "
                    "over MIMB embedding bundles")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic MIMB bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-regime", type=int, default=1000)
    p.add_argument("--counts", help="dm,da,am,aa sample counts (overrides --per-regime)")
    p.add_argument("--p-text", type=float, default=0.85)
    p.add_argument("--p-image", type=float, default=0.75)
    p.add_argument("--rho-hi", type=float, default=0.8)
    p.add_argument("--rho-lo", type=float, default=0.0)
    p.add_argument("--separation", type=float, default=2.0)
    p.add_argument("--noise", type=float, default=0.8)
    p.add_argument("--text-tokens", type=int, default=8)
    p.add_argument("--text-dim", type=int, default=32)
    p.add_argument("--image-tokens", type=int, default=8)
    p.add_argument("--image-dim", type=int, default=32)
    p.add_argument("--clip-dim", type=int, default=16)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--test-bundle")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--out-dir", default="run")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a bundle")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--quick", action="store_true",
                   help="skip the slow full-model check")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("route-stats", help="per-expert routing report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_route_stats)

    p = sub.add_parser("sweep", help="grid sweep over beta or the gate learning rate")
    p.add_argument("--param", choices=("beta", "lambda"), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--bundle", required=True)
    p.add_argument("--test-bundle")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out-dir", default="sweep")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("validate", help="validate a bundle and report stats")
    p.add_argument("--bundle", required=True)
    p.add_argument("--details", action="store_true",
                   help="include per-record labels and alignment cosines")
    p.set_defaults(func=cmd_validate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, InfeasibleRegimeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFault, TrainingFault) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
