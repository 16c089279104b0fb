"""Command-line entry point.

Config precedence for ``train`` and ``sweep``: command-line flag, then the
``--config`` JSON file, then built-in defaults.

Exit codes: 0 success, 2 usage or invalid input, 3 numerical failure.
"""
import argparse
import csv
import hashlib
import io
import json
import math
import os
import subprocess
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

from . import __version__
from .evaluation import STRATA, reports_to_csv, reports_to_json
from .model import (
    NumericalError,
    TrainConfig,
    evaluate_params,
    load_checkpoint,
    param_dims,
    save_checkpoint,
    train,
)
from .synthdata import SpecError, SynthSpec, generate, load_dataset, save_dataset
from .uncertainty import GammaSchedule

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

SWEEP_AXES = ("w1", "w2", "gamma0", "gamma_fixed", "dropout")
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


# helpers ------------------------------------------------------------------------


def _version_string():
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=here,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_atomic(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _read_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"{what} file not found: {path}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} file {path} is not valid JSON: {exc}")


def _load_data(path):
    try:
        return load_dataset(path)
    except FileNotFoundError:
        raise UsageError(f"dataset file not found: {path}")
    except ValueError as exc:
        raise UsageError(str(exc))


def _parse_float(text):
    try:
        return math.inf if text.strip().lower() in ("inf", "+inf", "infinity") else float(text)
    except ValueError:
        raise UsageError(f"not a number: {text!r}")


def build_config(config_path=None, overrides=None):
    raw = _read_json(config_path, "config") if config_path else {}
    try:
        cfg = TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}")
    o = {k: v for k, v in (overrides or {}).items() if v is not None}
    changes = {}
    for key in ("epochs", "batch_size", "lr", "seed", "temperature", "momentum"):
        if key in o:
            changes[key] = o[key]
    if "dropout" in o:
        changes["dropout_rate"] = o["dropout"] or None
    if o.get("stop_grad_sigma"):
        changes["stop_grad_sigma"] = True
    noise = cfg.noise
    if "w1" in o:
        noise = replace(noise, w1=o["w1"])
    if "w2" in o:
        noise = replace(noise, w2=o["w2"])
    if "augment" in o:
        noise = replace(noise, target=o["augment"])
    changes["noise"] = noise
    if "gamma_fixed" in o:
        changes["schedule"] = GammaSchedule.fixed(o["gamma_fixed"])
    elif "gamma0" in o:
        changes["schedule"] = GammaSchedule(gamma0=o["gamma0"])
    try:
        return replace(cfg, **changes)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}")


def _check_dims(data, params):
    d_in, t_in, _ = param_dims(params)
    if (d_in, t_in) != (data.spec.d_in, data.spec.t_in):
        raise UsageError(
            f"checkpoint expects inputs (d_in={d_in}, t_in={t_in}) but dataset has "
            f"(d_in={data.spec.d_in}, t_in={data.spec.t_in})"
        )


def _manifest(command, argv, config, spec, artifacts, data_path, started):
    return {
        "command": command,
        "argv": argv,
        "config": config,
        "synth_spec": spec,
        "data": {"path": os.path.abspath(data_path), "sha256": _sha256(data_path)} if data_path else None,
        "artifacts": artifacts,
        "wall_clock_seconds": round(time.time() - started, 3),
        "version": _version_string(),
    }


def _fmt_recall(per_k):
    return "  ".join(f"R@{k}={'n/a' if v is None else f'{v:.4f}'}" for k, v in per_k.items())


# subcommands --------------------------------------------------------------------


def cmd_generate(args):
    started = time.time()
    raw = _read_json(args.spec, "spec") if args.spec else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        spec = SynthSpec.from_dict(raw)
    except SpecError as exc:
        raise UsageError(f"invalid spec field {exc}")
    ds = generate(spec)
    save_dataset(ds, args.out)
    print(f"items: {ds.items.shape[0]}")
    print(f"train triplets: {len(ds.train)}")
    print(f"eval queries: {len(ds.queries)}")
    if args.manifest:
        manifest = _manifest("generate", _argv(args), None, spec.to_dict(), {"dataset": args.out}, None, started)
        manifest["out"] = os.path.abspath(args.out)
        _write_atomic(args.manifest, json.dumps(manifest, indent=2, sort_keys=True))
    return EXIT_OK


def _run_training(cfg, data, out_dir):
    """Train, then write checkpoint, trace and reports into ``out_dir``. Returns artifacts and reports."""
    os.makedirs(out_dir, exist_ok=True)
    trace_path = os.path.join(out_dir, "trace.jsonl")
    with open(trace_path, "w") as trace_fh:
        result = train(cfg, data, on_epoch=lambda rec: trace_fh.write(rec.to_json() + "\n"))
    meta = {"activation": cfg.activation, "embed_dim": cfg.embed_dim, "mode": cfg.mode}
    ckpt = os.path.join(out_dir, "checkpoint.txt")
    save_checkpoint(ckpt, result.params, meta)
    reports = evaluate_params(result.params, data, cfg.eval_ks, cfg.activation)
    ordered = [reports[s] for s in STRATA]
    _write_atomic(os.path.join(out_dir, "report.json"), reports_to_json(ordered))
    _write_atomic(os.path.join(out_dir, "report.csv"), reports_to_csv(ordered))
    artifacts = {
        "checkpoint": "checkpoint.txt",
        "trace": "trace.jsonl",
        "report_json": "report.json",
        "report_csv": "report.csv",
    }
    return result, reports, artifacts


def _numeric_failure(exc, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "diagnostics.json")
    with open(path, "w") as fh:
        json.dump(exc.dump, fh, indent=2, sort_keys=True)
    print(f"numerical failure: {exc}; diagnostics written to {path}", file=sys.stderr)
    return EXIT_NUMERIC


def _train_into(cfg, data_path, out_dir, argv):
    started = time.time()
    data = _load_data(data_path)
    try:
        result, reports, artifacts = _run_training(cfg, data, out_dir)
    except NumericalError as exc:
        return _numeric_failure(exc, out_dir)
    final = result.trace[-1]
    manifest = _manifest("train", argv, cfg.to_dict(), data.spec.to_dict(), artifacts, data_path, started)
    manifest["out"] = os.path.abspath(out_dir)
    manifest["mode"] = cfg.mode
    _write_atomic(os.path.join(out_dir, MANIFEST), json.dumps(manifest, indent=2, sort_keys=True))
    print(f"mode: {cfg.mode}")
    print(
        f"final loss: total={final.loss.total:.6f} info={final.loss.info:.6f} "
        f"u={final.loss.u:.6f} gamma={final.loss.gamma:.6f} sigma={final.loss.sigma_scalar:.6f}"
    )
    for s in STRATA:
        print(f"{s:>6}: {_fmt_recall(reports[s].per_k)}  (n={reports[s].n_queries})")
    return EXIT_OK


def cmd_train(args):
    cfg = build_config(args.config, vars(args))
    return _train_into(cfg, args.data, args.out, _argv(args))


def _sweep_overrides(axis, value):
    if axis == "dropout":
        return {"dropout": value, "gamma0": math.inf}
    return {axis: value}


def _sweep_one(job):
    cfg, data_path, out_dir = job
    data = load_dataset(data_path)
    _, reports, _ = _run_training(cfg, data, out_dir)
    return {s: r.to_dict() for s, r in reports.items()}


def cmd_sweep(args):
    values = [_parse_float(v) for v in args.values.split(",") if v.strip()] if args.values else []
    if not values:
        raise UsageError("--values needs at least one value")
    opts = vars(args)
    configs = []
    for value in values:
        overrides = {k: opts.get(k) for k in ("epochs", "batch_size", "lr", "seed", "temperature", "momentum")}
        overrides.update(_sweep_overrides(args.axis, value))
        configs.append(build_config(args.config, overrides))
    return _sweep_into(args.axis, values, configs, args.data, args.out, args.jobs, _argv(args))


def _sweep_into(axis, values, configs, data_path, out_dir, n_jobs, argv):
    started = time.time()
    data = _load_data(data_path)
    jobs = [(cfg, data_path, os.path.join(out_dir, f"{axis}={value:g}")) for cfg, value in zip(configs, values)]
    os.makedirs(out_dir, exist_ok=True)
    try:
        if n_jobs > 1:
            with ProcessPoolExecutor(max_workers=n_jobs) as pool:
                results = list(pool.map(_sweep_one, jobs))
        else:
            results = [_sweep_one(job) for job in jobs]
    except NumericalError as exc:
        return _numeric_failure(exc, out_dir)

    # one row per axis value; columns are <stratum>@<K> recalls plus per-stratum query counts
    ks = list(results[0]["all"]["per_k"])
    header = ["axis", "value"] + [f"{s}@{k}" for s in STRATA for k in ks] + [f"n_{s}" for s in STRATA]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for value, reports in zip(values, results):
        row = [axis, f"{value:g}"]
        for s in STRATA:
            row += ["" if reports[s]["per_k"][k] is None else repr(reports[s]["per_k"][k]) for k in ks]
        row += [reports[s]["n_queries"] for s in STRATA]
        writer.writerow(row)
    _write_atomic(os.path.join(out_dir, "sweep.csv"), buf.getvalue())
    manifest = _manifest(
        "sweep",
        argv,
        [cfg.to_dict() for cfg in configs],
        data.spec.to_dict(),
        {"sweep_csv": "sweep.csv", "runs": [os.path.relpath(d, out_dir) for _, _, d in jobs]},
        data_path,
        started,
    )
    manifest.update(axis=axis, values=["inf" if math.isinf(v) else v for v in values], out=os.path.abspath(out_dir))
    _write_atomic(os.path.join(out_dir, MANIFEST), json.dumps(manifest, indent=2, sort_keys=True))
    print(buf.getvalue(), end="")
    return EXIT_OK


def cmd_eval(args):
    data = _load_data(args.data)
    try:
        params, meta = load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise UsageError(f"checkpoint file not found: {args.checkpoint}")
    except ValueError as exc:
        raise UsageError(str(exc))
    _check_dims(data, params)
    ks = tuple(int(k) for k in args.ks.split(",")) if args.ks else (1, 10, 50)
    report = evaluate_params(params, data, ks, meta.get("activation", "tanh"))[args.stratum]
    if report.n_queries == 0:
        print(f"warning: no {args.stratum} queries in dataset; recall is undefined", file=sys.stderr)
    out_dir = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.join(out_dir, f"eval_{args.stratum}")
    _write_atomic(stem + ".json", reports_to_json([report]))
    _write_atomic(stem + ".csv", reports_to_csv([report]))
    print(f"{args.stratum}: {_fmt_recall(report.per_k)}  (n={report.n_queries})")
    return EXIT_OK


def cmd_replay(args):
    """Re-run from the manifest's config snapshot and absolute data path."""
    manifest = _read_json(args.manifest, "manifest")
    command = manifest.get("command")
    out = args.out or manifest.get("out")
    if not out:
        raise UsageError(f"{args.manifest}: no output location recorded; pass --out")
    argv = ["replay", "--manifest", args.manifest, "--out", out]
    if command == "generate":
        try:
            spec = SynthSpec.from_dict(manifest["synth_spec"])
        except SpecError as exc:
            raise UsageError(f"invalid spec field {exc}")
        save_dataset(generate(spec), out)
        return EXIT_OK
    data = manifest.get("data") or {}
    data_path = data.get("path")
    if not data_path or not os.path.exists(data_path):
        raise UsageError(f"dataset recorded in manifest not found: {data_path}")
    if _sha256(data_path) != data.get("sha256"):
        raise UsageError(f"dataset {data_path} changed since the manifest was written")
    try:
        if command == "train":
            return _train_into(TrainConfig.from_dict(manifest["config"]), data_path, out, argv)
        if command == "sweep":
            configs = [TrainConfig.from_dict(c) for c in manifest["config"]]
            values = [_parse_float(str(v)) for v in manifest["values"]]
            return _sweep_into(manifest["axis"], values, configs, data_path, out, 1, argv)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{args.manifest}: malformed manifest ({exc})")
    raise UsageError(f"{args.manifest}: cannot replay command {command!r}")


# parser -------------------------------------------------------------------------


def _argv(args):
    return list(args._argv)


def _add_train_flags(p):
    p.add_argument("--config", help="JSON TrainConfig; flags below override it")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--temperature", type=float)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="uncertain-retrieval",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic multi-grained dataset")
    g.add_argument("--spec", help="JSON SynthSpec (defaults for missing fields)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--manifest", help="also write a run manifest here")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one model and evaluate it")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    _add_train_flags(t)
    t.add_argument("--gamma0", type=_parse_float, help="annealing rate; 'inf' = InfoNCE-only baseline")
    t.add_argument("--gamma-fixed", dest="gamma_fixed", type=float, help="constant gamma instead of annealing")
    t.add_argument("--w1", type=float)
    t.add_argument("--w2", type=float)
    t.add_argument("--augment", choices=("target", "source"))
    t.add_argument("--dropout", type=float, help="text-path dropout rate")
    t.add_argument("--stop-grad-sigma", dest="stop_grad_sigma", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="one training run per value of an ablation axis")
    s.add_argument("--data", required=True)
    s.add_argument("--axis", required=True, choices=SWEEP_AXES)
    s.add_argument("--values", required=True, help="comma-separated, e.g. 0.1,1,10 ('inf' allowed)")
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1, help="parallel processes")
    _add_train_flags(s)
    s.set_defaults(func=cmd_sweep)

    e = sub.add_parser("eval", help="Recall@K of a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--stratum", choices=STRATA, default="all")
    e.add_argument("--ks", help="comma-separated K values (default 1,10,50)")
    e.add_argument("--out", help="directory for eval_<stratum>.json/.csv (default: checkpoint dir)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    r.add_argument("--manifest", required=True)
    r.add_argument("--out", help="write to this directory instead of the recorded one")
    r.set_defaults(func=cmd_replay)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args._argv = argv
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
