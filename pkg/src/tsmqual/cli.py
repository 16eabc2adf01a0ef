"""Command-line entry point: ``tsmqual {features,train,predict,evaluate}``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import pandas as pd

from . import __version__
from .errors import DataError, SchemaError, TsmQualError
from .net import (TARGETS, TrainConfig, load_model, predict, predict_table, save_model,
                  train)
from .pipeline import (FeatureConfig, load_manifest, load_table, normalize,
                       reference_row, row_features, save_table, table_from_rows)
from .report import evaluate, format_report, plot_history, write_report
from .spectral import AlignmentMode

log = logging.getLogger("tsmqual")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# Defaults for options that may also come from a --config JSON file.
DEFAULTS = {
    "alignment": "interp_test",
    "frame_size": 2048,
    "hop": 512,
    "jobs": 1,
    "skip_errors": False,
    "include_refs": True,
    "seeds": "0..0",
    "target": "smos",
    "epochs": 800,
    "learning_rate": 1e-4,
    "weight_decay": 0.01,
    "selection": "all",
    "figures": True,
}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def parse_seeds(text: str) -> list:
    """'3' -> [3]; '0..9' -> [0, ..., 9] inclusive."""
    text = str(text).strip()
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            a, b = int(a), int(b)
        else:
            a = b = int(text)
    except ValueError:
        raise UsageError(f"bad seed range {text!r}; expected A..B") from None
    if b < a or a < 0:
        raise UsageError(f"bad seed range {text!r}")
    return list(range(a, b + 1))


def _add_feature_flags(p):
    p.add_argument("--alignment", choices=[
        "anchor_ref", "anchor_test", "interp_longest", "interp_shortest",
        "interp_ref", "interp_test"], default=None)
    p.add_argument("--frame-size", type=int, default=None)
    p.add_argument("--hop", type=int, default=None)
    p.add_argument("--beta", type=float, default=None,
                   help="time-scale ratio for every pair, overriding the manifest")
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--skip-errors", action="store_true", default=None)


def _add_common(p):
    p.add_argument("--config", type=Path, help="JSON settings file")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> Parser:
    parser = Parser(prog="tsmqual", description="Objective quality of time-scaled audio.")
    parser.add_argument("--version", action="version", version=f"tsmqual {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=Parser)

    p = sub.add_parser("features", help="extract a feature table from a manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("-o", "--out", type=Path, required=True)
    _add_feature_flags(p)
    p.add_argument("--include-refs", action=argparse.BooleanOptionalAction, default=None,
                   help="also compute reference-vs-itself rows labelled 5")
    _add_common(p)

    p = sub.add_parser("train", help="train one model per seed")
    p.add_argument("table", type=Path)
    p.add_argument("-o", "--out", type=Path, required=True, help="output directory")
    p.add_argument("--seeds", default=None, help="seed range A..B (inclusive)")
    p.add_argument("--target", choices=TARGETS, default=None)
    p.add_argument("--include-refs", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--selection", choices=["all", "train_val"], default=None)
    p.add_argument("--figures", action=argparse.BooleanOptionalAction, default=None)
    _add_common(p)

    p = sub.add_parser("predict", help="score pairs with a trained model")
    p.add_argument("model", type=Path)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--pair", nargs=2, metavar=("REF", "TEST"))
    src.add_argument("--manifest", type=Path)
    src.add_argument("--table", type=Path, help="unnormalised feature table")
    p.add_argument("-o", "--out", type=Path, help="results file (manifest/table mode)")
    _add_feature_flags(p)
    _add_common(p)

    p = sub.add_parser("evaluate", help="per-method report from scored rows")
    p.add_argument("input", type=Path,
                   help="results file with an omos column, a feature table, or a manifest")
    p.add_argument("-o", "--out", type=Path, required=True, help="output directory")
    p.add_argument("--model", type=Path, help="needed when input is not a results file")
    p.add_argument("--score", default="omos", help="column to average")
    p.add_argument("--figures", action=argparse.BooleanOptionalAction, default=None)
    _add_feature_flags(p)
    _add_common(p)
    return parser


def resolve_options(args) -> dict:
    """Built-in defaults, overridden by --config, overridden by explicit flags."""
    opts = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            loaded = json.loads(args.config.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise DataError("config file must hold a JSON object")
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        opts.update(loaded)
    for key, value in vars(args).items():
        if value is not None and key in DEFAULTS:
            opts[key] = value
    if int(opts["jobs"]) < 1:
        raise UsageError("--jobs must be at least 1")
    return opts


def feature_config(opts) -> FeatureConfig:
    try:
        return FeatureConfig(alignment=AlignmentMode.parse(opts["alignment"]).value,
                             frame_size=int(opts["frame_size"]), hop=int(opts["hop"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# -- row extraction ------------------------------------------------------------

def _extract_job(job):
    kind, payload, config, beta = job
    try:
        if kind == "ref":
            path, cls = payload
            return reference_row(path, cls, config), None
        return row_features(payload, config, beta), None
    except TsmQualError as exc:
        return None, str(exc)


def run_jobs(jobs, n_workers: int, label, skip_errors: bool) -> list:
    """Run extraction jobs, printing one progress line per row. Failed rows
    abort the run unless ``skip_errors``."""
    if n_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_extract_job, jobs))
    else:
        results = [_extract_job(j) for j in jobs]
    rows, failures = [], []
    for i, (job, (row, err)) in enumerate(zip(jobs, results), 1):
        name = label(job)
        if err is None:
            print(f"[{i}/{len(jobs)}] ok {name}", file=sys.stderr)
            rows.append(row)
        else:
            print(f"[{i}/{len(jobs)}] FAILED {name}: {err}", file=sys.stderr)
            failures.append((name, err))
    if failures and not skip_errors:
        raise DataError(f"{len(failures)} row(s) failed; rerun with --skip-errors to drop them")
    if failures:
        log.warning("skipped %d failed row(s)", len(failures))
    return rows


def _label(job):
    kind, payload = job[0], job[1]
    return f"reference {payload[0]}" if kind == "ref" else f"{payload.ref_path} | {payload.test_path}"


def manifest_rows(manifest, config, opts, with_refs: bool) -> list:
    entries = load_manifest(manifest)
    if not entries:
        raise DataError(f"manifest {manifest} has no rows")
    jobs = [("pair", e, config, opts.get("beta")) for e in entries]
    if with_refs:
        seen = {}
        for e in entries:
            if e.subset == "train":
                seen.setdefault(e.ref_path, e.file_class)
        jobs += [("ref", (p, c), config, None) for p, c in seen.items()]
    return run_jobs(jobs, int(opts["jobs"]), _label, bool(opts["skip_errors"]))


# -- commands ------------------------------------------------------------------

def cmd_features(args, opts) -> int:
    config = feature_config(opts)
    rows = manifest_rows(args.manifest, config, opts | {"beta": args.beta},
                         bool(opts["include_refs"]))
    table = table_from_rows(rows, config)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_table(table, args.out)
    print(f"wrote {len(table)} rows to {args.out}")
    return EXIT_OK


def _history_csv(history, path):
    history.to_frame().to_csv(path, index=False, lineterminator="\n")


def cmd_train(args, opts) -> int:
    table = load_table(args.table)
    target = opts["target"]
    if target not in table.frame.columns or table.frame[target].isna().all():
        raise DataError(f"table has no {target!r} labels")
    seeds = parse_seeds(opts["seeds"])
    norm = normalize(table)
    args.out.mkdir(parents=True, exist_ok=True)
    summary = []
    for seed in seeds:
        cfg = TrainConfig(seed=seed, epochs=int(opts["epochs"]),
                          learning_rate=float(opts["learning_rate"]),
                          weight_decay=float(opts["weight_decay"]), target=target,
                          include_references=bool(opts["include_refs"]),
                          selection=opts["selection"])
        model, history = train(norm, cfg)
        model_path = args.out / f"model_seed{seed}.json"
        save_model(model, model_path)
        _history_csv(history, args.out / f"history_seed{seed}.csv")
        if opts["figures"]:
            plot_history(history.to_frame(), args.out / f"history_seed{seed}.png",
                         model.selected_epoch)
        s = model.summary
        summary.append({"seed": seed, "selected_epoch": model.selected_epoch, "D": s["D"],
                        "L_tr": s["L_tr"], "L_val": s["L_val"], "L_te": s["L_te"],
                        "rho_tr": s["rho_tr"], "rho_val": s["rho_val"], "rho_te": s["rho_te"],
                        "epochs_trained": s["epochs_trained"], "model": model_path.name})
        print(f"seed {seed}: epoch {model.selected_epoch} D={s['D']:.3f} "
              f"L_te={s['L_te']:.3f} rho_te={s['rho_te']:.3f}")
    frame = pd.DataFrame(summary)
    best = frame.loc[frame["D"].idxmin()]
    frame["best"] = frame["seed"] == best["seed"]
    frame.to_csv(args.out / "summary.csv", index=False, lineterminator="\n")
    print(f"best seed: {int(best['seed'])} (D={best['D']:.3f})")
    return EXIT_OK


def _model_feature_config(model, opts, args) -> FeatureConfig:
    """Extraction settings come from the model; explicit flags that disagree
    are a schema error rather than being silently ignored."""
    if not model.feature_config:
        return feature_config(opts)
    config = FeatureConfig.from_dict(model.feature_config)
    requested = {"alignment": args.alignment, "frame_size": args.frame_size, "hop": args.hop}
    for key, value in requested.items():
        if value is None:
            continue
        if key == "alignment":
            value = AlignmentMode.parse(value).value
        if value != getattr(config, key):
            raise SchemaError(f"model was trained with {key}={getattr(config, key)}, "
                              f"not {value}")
    return config


def scored_frame(model, args, opts) -> pd.DataFrame:
    config = _model_feature_config(model, opts, args)
    if getattr(args, "table", None) or (getattr(args, "input", None) and _is_table(args.input)):
        table = load_table(args.table if getattr(args, "table", None) else args.input)
        scores = predict_table(model, table)
        frame = table.frame
    else:
        rows = manifest_rows(args.manifest if getattr(args, "manifest", None) else args.input,
                             config, opts | {"beta": args.beta}, with_refs=False)
        table = table_from_rows(rows, config)
        scores = predict(model, table.features)
        frame = table.frame
    keep = ["subset", "ref", "test", "method", "beta", "class"] + \
        [c for c in ("smos", "median_os") if c in frame.columns]
    out = frame[keep].copy()
    out["omos"] = scores
    return out


def cmd_predict(args, opts) -> int:
    model = load_model(args.model)
    if args.pair:
        config = _model_feature_config(model, opts, args)
        from .pipeline import extract_features
        vec = extract_features(args.pair[0], args.pair[1], config, args.beta)
        print(f"{predict(model, vec.as_array()[None, :])[0]:.3f}")
        return EXIT_OK
    frame = scored_frame(model, args, opts)
    for _, row in frame.iterrows():
        print(f"{row['test']},{row['omos']:.3f}")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(args.out, index=False, lineterminator="\n")
    return EXIT_OK


def _is_table(path: Path) -> bool:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.readline().startswith("#")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def cmd_evaluate(args, opts) -> int:
    if _is_table(args.input) or not _has_column(args.input, args.score):
        if args.model is None:
            raise UsageError(f"{args.input} has no {args.score!r} column; pass --model")
        frame = scored_frame(load_model(args.model), args, opts)
    else:
        try:
            frame = pd.read_csv(args.input, float_precision="round_trip")
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read {args.input}: {exc}") from exc
    report = evaluate(frame, args.score)
    write_report(report, args.out, figures=bool(opts["figures"]))
    sys.stdout.write(format_report(report))
    return EXIT_OK


def _has_column(path: Path, column: str) -> bool:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    return column in header


COMMANDS = {"features": cmd_features, "train": cmd_train, "predict": cmd_predict,
            "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        opts = resolve_options(args)
        return COMMANDS[args.command](args, opts)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except TsmQualError as exc:
        kind = "schema error" if isinstance(exc, SchemaError) else "error"
        print(f"tsmqual: {kind}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"tsmqual: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
