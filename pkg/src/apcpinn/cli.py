"""Command-line entry point (``apcpinn``)."""

import argparse
import json
import os
import sys

from . import nnapc, pipeline
from .config import load_config, preset
from .datasets import eval_grid
from .errors import ApcPinnError, ConfigurationError, DivergenceError

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_DIVERGENCE = 0, 1, 2, 3
DATA_VERSION = 1


def _config(args):
    if args.config:
        config = load_config(args.config)
    elif args.preset:
        config = preset(args.preset)
    elif args.command == "report":
        return None
    else:
        raise ConfigurationError("pass --config <path> or --preset <name>")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epoch_scale is not None:
        overrides["epoch_scale"] = args.epoch_scale
    return config.with_overrides(**overrides)


def _write_manifest(path, config, **extra):
    with open(path, "w") as fh:
        json.dump({"format_version": DATA_VERSION, "config_hash": config.config_hash(), **extra},
                  fh, indent=2, sort_keys=True)


def _check_existing(path, config, what):
    if os.path.exists(path):
        with open(path) as fh:
            found = json.load(fh).get("config_hash", "")
        pipeline.check_hash(config.config_hash(), found, what)


def cmd_generate(args, config):
    from .fields import FieldEnsemble

    data = os.path.join(args.out, "data")
    os.makedirs(data, exist_ok=True)
    train, test = pipeline.generate(config)
    written = []
    for split, ens in (("train", train), ("test", test)):
        for name in ("u", "k", "f"):
            values = getattr(ens, name)
            if values is None:
                continue
            fname = f"{split}_{name}.csv"
            FieldEnsemble(ens.grid, values, seed=config.seed).to_csv(os.path.join(data, fname))
            written.append(fname)
    _write_manifest(os.path.join(data, "manifest.json"), config, files=written,
                    grid_points=config.grid_points, seed=config.seed)
    print(f"wrote {len(written)} ensemble files to {data}")


def cmd_train(args, config):
    _check_existing(os.path.join(args.out, "data", "manifest.json"), config, "generated data")
    run = pipeline.run_config(config, args.out)
    print(json.dumps(run.report.errors, sort_keys=True))


def _load_model(args, config):
    bundle = os.path.join(args.out, "model")
    if not os.path.exists(os.path.join(bundle, "manifest.json")):
        raise ConfigurationError(f"no trained model in {bundle}; run 'train' first")
    model, problem, manifest = nnapc.load_bundle(bundle)
    pipeline.check_hash(config.config_hash(), manifest.get("config_hash", ""), "model bundle")
    return model, problem


def cmd_predict(args, config):
    model, problem = _load_model(args, config)
    train, test = pipeline.generate(config)
    ts = pipeline.training_data(config, train)
    xs = eval_grid()
    if problem.stochastic:
        readings = (test.read("f", ts.collocation_xs) if problem.kind == "forward_poisson"
                    else test.read("k", ts.k_sensor_xs))
    else:
        readings = None
    pred = nnapc.predict_snapshots(model, problem, readings, xs)
    from .fields import FieldEnsemble

    FieldEnsemble(xs, pred.u).to_csv(os.path.join(args.out, "predicted_u.csv"))
    if pred.k is not None:
        FieldEnsemble(xs, pred.k).to_csv(os.path.join(args.out, "predicted_k.csv"))
    _write_manifest(os.path.join(args.out, "predictions.json"), config,
                    n_snapshots=int(pred.u.shape[0]))
    print(f"predicted {pred.u.shape[0]} snapshots")


def cmd_evaluate(args, config):
    model, _ = _load_model(args, config)
    train, test = pipeline.generate(config)
    ts = pipeline.training_data(config, train)
    report = pipeline.make_report(config, model, ts, train, test)
    report.write(args.out)
    pipeline.write_plot_data(args.out, config, model, ts, train, test)
    print(json.dumps(report.errors, sort_keys=True))


def cmd_active(args, config):
    run = pipeline.run_active(config, args.out)
    for e in run.log.entries:
        d = e.decision
        print(f"step {e.step}: {e.book.n_physical} sensors, k_pred={e.errors.get('k_pred')}, "
              f"next={d.kind} at {d.x:.4f}")


def cmd_sweep(args, config):
    if not args.param or args.values is None:
        raise ConfigurationError("sweep needs --param and --values")
    try:
        values = json.loads(args.values)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"--values must be a JSON list: {exc}") from None
    if not isinstance(values, list):
        raise ConfigurationError("--values must be a JSON list")
    rows = pipeline.sweep(args.param, values, config, workers=args.workers, out=args.out)
    for r in rows:
        print(f"{r['parameter']}={r['value']}: u_pred={r['u_pred']} k_pred={r['k_pred']} {r['status']}")


def cmd_report(args, config):
    dirs = args.runs or [args.out]
    reports = [pipeline.EvalReport.read(os.path.join(d, "report.json")) for d in dirs]
    if config is not None:
        for r in reports:
            pipeline.check_hash(config.config_hash(), r.config_hash, "report")
    keys, rows = pipeline.combine_reports(reports)
    path = os.path.join(args.out, "summary.csv")
    os.makedirs(args.out, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(",".join(["run"] + keys) + "\n")
        for d, row in zip(dirs, rows):
            fh.write(",".join([d] + ["" if v is None else repr(v) for v in row]) + "\n")
    print(f"combined {len(reports)} reports into {path}")


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "active-learn": cmd_active,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="apcpinn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--preset", help="named preset (when no --config is given)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default=".")
        p.add_argument("--epoch-scale", type=float, dest="epoch_scale")
        p.add_argument("--workers", type=int, default=1)
        if name == "sweep":
            p.add_argument("--param")
            p.add_argument("--values", help="JSON list of values")
        if name == "report":
            p.add_argument("runs", nargs="*", help="run directories (default: --out)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = _config(args)
        os.makedirs(args.out, exist_ok=True)
        COMMANDS[args.command](args, config)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except ApcPinnError as exc:
        stage = getattr(exc, "stage", None)
        print(f"error{f' in {stage}' if stage else ''}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
