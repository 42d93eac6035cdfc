"""Command-line front end: ``csgpfa {generate,fit,predict,eval}``.

Exit codes: 0 success, 1 numerical failure, 2 usage or I/O error.
"""
import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .data import (GenerativeSpec, GroundTruth, generate_synthetic, load_conditions, load_dataset,
                   spec_to_dict, write_dataset)
from .errors import DataFormatError, NumericalError
from .evaluation import fitted_rates, metrics, split_trials, write_metrics, write_peak_rates
from .inference import fit, retained_dims
from .predict import PredictionRequest, predict_rates, predict_weights
from .state import ModelConfig, load_checkpoint

LIKELIHOOD_FLAGS = {"negbin": "neg_binomial", "binomial": "binomial"}

COUNTS = "counts.csv"
CONDITIONS = "conditions.csv"
TRUTH = "truth.json"
CHECKPOINT = "checkpoint.json"
REPORT = "fit_report.json"
MONITOR = "monitor.csv"
TRAIN = "train_counts.csv"
TEST = "test_counts.csv"
RUN = "run.json"


class UsageError(Exception):
    pass


def _threads(value):
    return value if value else (os.cpu_count() or 1)


def _require(path, what):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


def _dataset_paths(args):
    if args.data is not None:
        d = _require(args.data, "data directory")
        counts, conds = d / COUNTS, d / CONDITIONS
    else:
        if args.counts is None or args.conditions is None:
            raise UsageError("give --data DIR or both --counts and --conditions")
        counts, conds = Path(args.counts), Path(args.conditions)
    return _require(counts, "counts file"), _require(conds, "conditions file")


def cmd_generate(args):
    spec_path = _require(args.config, "config")
    with open(spec_path) as fh:
        raw = json.load(fh)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.likelihood is not None:
        raw["likelihood"] = LIKELIHOOD_FLAGS[args.likelihood]
    try:
        spec = GenerativeSpec(**raw)
    except TypeError as exc:
        raise UsageError(f"bad generative config: {exc}") from exc
    data, truth = generate_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(data, out / COUNTS, out / CONDITIONS)
    truth.to_json(out / TRUTH)
    with open(out / "spec.json", "w") as fh:
        json.dump(spec_to_dict(spec), fh, indent=2, sort_keys=True)
    print(f"wrote {data.shape} counts to {out}")
    return 0


def _model_config(args, base=None):
    cfg = {} if base is None else base.to_dict()
    if args.model is not None:
        with open(_require(args.model, "model config")) as fh:
            cfg.update(json.load(fh))
    if args.likelihood is not None:
        cfg["likelihood"] = LIKELIHOOD_FLAGS[args.likelihood]
    if args.latents is not None:
        cfg["D"] = args.latents
    if args.max_iters is not None:
        cfg["max_iters"] = args.max_iters
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg["threads"] = _threads(args.threads)
    return ModelConfig.from_dict(cfg)


def cmd_fit(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = None
    start = 0
    if args.resume is not None:
        ckpt = _require(args.resume, "checkpoint")
        state, base, coords, payload = load_checkpoint(ckpt)
        start = int(payload["iteration"])
        config = _model_config(args, base)
        run_path = out / RUN if (out / RUN).exists() else ckpt.parent / RUN
        with open(_require(run_path, "run record")) as fh:
            run = json.load(fh)
        train = load_dataset(_require(run["train_counts"], "training counts"),
                             _require(run["conditions"], "conditions"))
        if train.condition_coords.shape != coords.shape or not np.array_equal(train.condition_coords, coords):
            raise DataFormatError("checkpoint conditions differ from the dataset")
    else:
        counts, conds = _dataset_paths(args)
        config = _model_config(args)
        data = load_dataset(counts, conds)
        test = None
        if args.train_trials is not None:
            train, test = split_trials(data, args.train_trials, args.split_seed)
        else:
            train = data
        write_dataset(train, out / TRAIN, out / CONDITIONS)
        if test is not None:
            write_dataset(test, out / TEST, out / CONDITIONS)
        run = {
            "train_counts": str((out / TRAIN).resolve()),
            "conditions": str((out / CONDITIONS).resolve()),
            "test_counts": None if test is None else str((out / TEST).resolve()),
        }
        truth = counts.parent / TRUTH
        if truth.exists():
            run["truth"] = str(truth.resolve())
    if args.resume is None or not (out / RUN).exists():
        with open(out / RUN, "w") as fh:
            json.dump(run, fh, indent=2, sort_keys=True)

    state, report = fit(train, config, state=state, start_iter=start, checkpoint=out / CHECKPOINT,
                        checkpoint_every=args.checkpoint_every)
    with open(out / REPORT, "w") as fh:
        fh.write(report.to_json())
    report.write_monitor_csv(out / MONITOR)
    status = "converged" if report.converged else "stopped at max iterations"
    print(f"{status} after {report.iterations_run} iterations; monitor {report.monitor[-1]:.6f}; "
          f"retained dims {report.retained_dims}")
    return 0


def cmd_predict(args):
    state, config, coords, _ = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    new = load_conditions(_require(args.conditions, "new conditions"))
    if new.shape[1] != coords.shape[1]:
        raise DataFormatError(f"new conditions have {new.shape[1]} coordinates, model has {coords.shape[1]}")
    pred = predict_rates(state, coords, PredictionRequest(new), config.condition_kernel, config.jitter)
    pred.to_csv(args.out)
    if args.weights_out is not None:
        wp = predict_weights(state, coords, PredictionRequest(new), config.condition_kernel, config.jitter)
        wp.to_json(args.weights_out, include_cov=args.include_cov)
    print(f"wrote rates for {new.shape[0]} conditions to {args.out}")
    return 0


def cmd_eval(args):
    run_dir = _require(args.run, "run directory")
    state, config, coords, _ = load_checkpoint(_require(run_dir / CHECKPOINT, "checkpoint"))
    run = {}
    if (run_dir / RUN).exists():
        with open(run_dir / RUN) as fh:
            run = json.load(fh)
    conds = run.get("conditions", run_dir / CONDITIONS)
    train = load_dataset(_require(run.get("train_counts", run_dir / TRAIN), "training counts"), conds)
    test_path = run.get("test_counts")
    test = load_dataset(_require(test_path, "test counts"), conds) if test_path else None
    if args.truth is not None:
        truth = GroundTruth.from_json(_require(args.truth, "ground truth"))
    elif run.get("truth") and Path(run["truth"]).exists():
        truth = GroundTruth.from_json(run["truth"])
    else:
        truth = None  # sidecar absent: truth-based metrics are omitted
    seconds = None
    if (run_dir / MONITOR).exists():
        with open(run_dir / MONITOR) as fh:
            rows = fh.read().strip().splitlines()[1:]
        if rows:
            seconds = float(rows[-1].split(",")[2])
    values = metrics(state, train, test, truth, retained_dims(state), seconds, _threads(args.threads))
    out = Path(args.out) if args.out else run_dir / "metrics.json"
    write_metrics(out, values)
    peak = Path(args.peak_rates) if args.peak_rates else run_dir / "peak_rates.csv"
    write_peak_rates(peak, fitted_rates(state), coords)
    print(json.dumps(values, indent=2, sort_keys=True))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="csgpfa", description="Condition-smooth GPFA for spike counts.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a synthetic dataset")
    g.add_argument("--config", required=True, help="GenerativeSpec JSON")
    g.add_argument("--seed", type=int)
    g.add_argument("--likelihood", choices=sorted(LIKELIHOOD_FLAGS))
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("fit", help="fit the model")
    f.add_argument("--data", help="directory with counts.csv and conditions.csv")
    f.add_argument("--counts")
    f.add_argument("--conditions")
    f.add_argument("--model", help="ModelConfig JSON")
    f.add_argument("--likelihood", choices=sorted(LIKELIHOOD_FLAGS))
    f.add_argument("--latents", type=int, metavar="D")
    f.add_argument("--max-iters", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--train-trials", type=int, help="training trials per condition; rest held out")
    f.add_argument("--split-seed", type=int, default=0)
    f.add_argument("--resume", help="continue from this checkpoint")
    f.add_argument("--checkpoint-every", type=int, default=50)
    f.add_argument("--out", required=True, help="output directory")
    f.set_defaults(func=cmd_fit)

    pr = sub.add_parser("predict", help="predict rates at new conditions")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--conditions", required=True, help="conditions CSV of new coordinates")
    pr.add_argument("--out", required=True, help="rates CSV")
    pr.add_argument("--weights-out", help="optional weights JSON")
    pr.add_argument("--include-cov", action="store_true", help="include covariances in weights JSON")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="metrics for a fit directory")
    e.add_argument("--run", required=True, help="output directory of `fit`")
    e.add_argument("--truth", help="ground-truth JSON (defaults to the one next to the fitted data)")
    e.add_argument("--out", help="metrics JSON (default RUN/metrics.json)")
    e.add_argument("--peak-rates", help="peak-rate CSV (default RUN/peak_rates.csv)")
    e.set_defaults(func=cmd_eval)

    for sp in (g, f, pr, e):
        sp.add_argument("--threads", type=int, default=0, help="worker threads (default: all cores)")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1
    except np.linalg.LinAlgError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1
    except (UsageError, DataFormatError, OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"done in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
