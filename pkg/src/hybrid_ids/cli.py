"""Command-line entry point: ``hybrid-ids <subcommand> [flags]``.

Every subcommand accepts ``--config FILE`` (``key = value`` lines, ``#``
comments, keys are flag names with dashes or underscores) and
``--print-config``. Flags given on the command line override the file.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path


from . import __version__
from .autograd import NumericError

logger = logging.getLogger("hybrid_ids")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
_META_KEYS = {"command", "config", "print_config", "func"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _fmt(prog):
    return argparse.ArgumentDefaultsHelpFormatter(prog, max_help_position=36)


def _csv_ints(text: str) -> tuple:
    try:
        return tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _common(p):
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--print-config", action="store_true", help="print the merged config and exit")
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice")
    p.add_argument("--log-level", default="warning", choices=["debug", "info", "warning", "error"],
                   help="stderr logging level")


def _prep_flags(p):
    g = p.add_argument_group("preprocessing")
    g.add_argument("--train-fraction", type=float, default=0.8, help="stratified train share")
    g.add_argument("--k-features", type=int, default=35, help="features kept by mutual information")
    g.add_argument("--collinear-threshold", type=float, default=0.85, help="|correlation| pruning cutoff")
    g.add_argument("--mi-bins", type=int, default=10, help="equal-frequency bins for mutual information")
    g.add_argument("--smote-ratio", type=float, default=0.5, help="minority target as a share of the majority")
    g.add_argument("--smote-k", type=int, default=5, help="SMOTE neighbours")
    g.add_argument("--window", dest="T", type=int, default=50, help="events per window (T)")
    g.add_argument("--stride", type=int, default=5, help="window stride")


def _model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--variant", default="full",
                   choices=["full", "no_attention", "no_gnn", "no_lstm", "gnn_only", "lstm_only"])
    g.add_argument("--gcn-dims", type=_csv_ints, default=(128, 64, 32), help="GCN layer widths")
    g.add_argument("--gcn-dropout", type=float, default=0.3)
    g.add_argument("--lstm-layers", type=int, default=2)
    g.add_argument("--lstm-hidden", type=int, default=64, help="hidden units per direction")
    g.add_argument("--lstm-dropout", type=float, default=0.2)
    g.add_argument("--heads", type=int, default=4)
    g.add_argument("--head-dim", type=int, default=32)
    g.add_argument("--no-symmetrize", action="store_true", help="use the raw directed adjacency")
    t = p.add_argument_group("training")
    t.add_argument("--batch-size", type=int, default=256)
    t.add_argument("--lr", type=float, default=0.001)
    t.add_argument("--max-epochs", type=int, default=200)
    t.add_argument("--patience", type=int, default=15)
    t.add_argument("--val-fraction", type=float, default=0.1)
    t.add_argument("--l2", type=float, default=1e-5)
    t.add_argument("--clip-norm", type=float, default=0.0, help="global gradient norm cap (0 = off)")
    t.add_argument("--max-seconds", type=float, default=0.0, help="wall-clock training budget (0 = none)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hybrid-ids", description=__doc__.splitlines()[0], formatter_class=_fmt)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("datagen", help="write a synthetic labeled flow CSV", formatter_class=_fmt)
    _common(p)
    p.add_argument("--preset", default="toy", choices=["toy", "desk"], help="built-in scenario")
    p.add_argument("--scenario", help="scenario file (overrides --preset)")
    p.add_argument("--out", help="output CSV path (required)")
    p.add_argument("--schema-out", help="schema file path; unset means <out> with a .schema suffix")

    p = sub.add_parser("preprocess", help="clean, encode, select, split, balance and window", formatter_class=_fmt)
    _common(p)
    p.add_argument("--data", help="flow CSV (required)")
    p.add_argument("--schema", help="schema file (required)")
    p.add_argument("--out", help="output directory (required)")
    _prep_flags(p)

    p = sub.add_parser("build-graph", help="export per-window traffic graphs", formatter_class=_fmt)
    _common(p)
    p.add_argument("--prepared", help="preprocess output directory (required)")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--limit", type=int, default=0, help="export only the first N windows (0 = all)")
    p.add_argument("--out", help="graph text file (required)")

    p = sub.add_parser("train", help="train a model and write a checkpoint", formatter_class=_fmt)
    _common(p)
    p.add_argument("--prepared", help="preprocess output directory (required)")
    p.add_argument("--out", help="checkpoint path (required)")
    p.add_argument("--log", help="training log path; unset means <out>.log")
    _model_flags(p)

    p = sub.add_parser("evaluate", help="score a checkpoint on the test split", formatter_class=_fmt)
    _common(p)
    p.add_argument("--prepared", help="preprocess output directory (required)")
    p.add_argument("--checkpoint", help="checkpoint path (required)")
    p.add_argument("--out", help="metrics report path (required)")
    p.add_argument("--normal-class", default="Normal", help="class treated as benign for the FPR")

    p = sub.add_parser("ablate", help="train and evaluate architecture variants", formatter_class=_fmt)
    _common(p)
    p.add_argument("--prepared", help="preprocess output directory (required)")
    p.add_argument("--variants", default="full,no_attention,no_gnn,no_lstm,gnn_only,lstm_only",
                   help="comma-separated variant list, run in this order")
    p.add_argument("--out", help="ablation table path (required)")
    p.add_argument("--report-dir", help="also write one metrics report per variant here")
    p.add_argument("--normal-class", default="Normal")
    _model_flags(p)

    p = sub.add_parser("explain", help="export attention traces for test windows", formatter_class=_fmt)
    _common(p)
    p.add_argument("--prepared", help="preprocess output directory (required)")
    p.add_argument("--checkpoint", help="checkpoint path (required)")
    p.add_argument("--out", help="trace file path (required)")
    p.add_argument("--windows", default="", help="comma-separated test window ids (default: first --count)")
    p.add_argument("--label", default="", help="only windows whose true class is this")
    p.add_argument("--count", type=int, default=8, help="windows to export when --windows is empty")

    p = sub.add_parser("version", help="print the version", formatter_class=_fmt)
    # flags without help text would not show their default in --help
    for sp in sub.choices.values():
        for a in sp._actions:
            if a.option_strings and not a.help:
                a.help = a.dest.replace("_", " ")
    return parser


# ------------------------------------------------------------------ config merge

def read_config(path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _subparser(parser, name):
    for action in parser._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    raise KeyError(name)


def _apply_config(sub: argparse.ArgumentParser, values: dict) -> None:
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in values.items():
        if key == "window":
            key = "T"
        a = actions.get(key)
        if a is None or key in _META_KEYS:
            raise UsageError(f"unknown config key {key!r} for {sub.prog}")
        if isinstance(a, argparse._StoreTrueAction):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key!r} needs true/false, got {value!r}")
            defaults[key] = value.lower() in ("true", "1", "yes")
        elif a.type is not None:
            try:
                defaults[key] = a.type(value)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config key {key!r}: {exc}") from None
        else:
            if a.choices and value not in a.choices:
                raise UsageError(f"config key {key!r}: {value!r} not in {list(a.choices)}")
            defaults[key] = value
    sub.set_defaults(**defaults)


def parse(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        raise UsageError("hybrid-ids: error: a subcommand is required")
    if getattr(args, "config", None):
        sub = _subparser(parser, args.command)
        try:
            values = read_config(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        _apply_config(sub, values)
        args = parser.parse_args(argv)
    return args


def config_text(args: argparse.Namespace) -> str:
    lines = [f"# effective config for {args.command}"]
    for k, v in sorted(vars(args).items()):
        if k in _META_KEYS:
            continue
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {'' if v is None else v}")
    return "\n".join(lines) + "\n"


def _require(args, *names):
    for n in names:
        if not getattr(args, n, None):
            raise UsageError(f"hybrid-ids {args.command}: error: --{n.replace('_', '-')} is required")


# ------------------------------------------------------------------ commands

def _prep_config(args):
    from .pipeline import PrepConfig
    return PrepConfig(args.train_fraction, args.k_features, args.collinear_threshold, args.mi_bins,
                      args.smote_ratio, args.smote_k, args.T, args.stride, args.seed)


def _model_config(args, prep):
    from .model import ModelConfig
    return ModelConfig(gcn_dims=args.gcn_dims, gcn_dropout=args.gcn_dropout, lstm_layers=args.lstm_layers,
                       lstm_hidden=args.lstm_hidden, lstm_dropout=args.lstm_dropout, heads=args.heads,
                       head_dim=args.head_dim, classes=len(prep.classes), seq_len=prep.config.T,
                       l2=args.l2, seed=args.seed, tab_dim=int(prep.train.features.shape[1]),
                       variant=args.variant, symmetrize=not args.no_symmetrize)


def _train_config(args):
    from .trainer import TrainConfig
    return TrainConfig(batch_size=args.batch_size, lr=args.lr, max_epochs=args.max_epochs,
                       patience=args.patience, val_fraction=args.val_fraction, seed=args.seed,
                       l2=args.l2, clip_norm=args.clip_norm, max_seconds=args.max_seconds)


def cmd_datagen(args):
    from .datagen import generate, parse_scenario, preset
    _require(args, "out")
    if args.scenario:
        spec = parse_scenario(Path(args.scenario).read_text(encoding="utf-8"))
    else:
        spec = preset(args.preset, args.seed)
    corpus = generate(spec)
    schema_out = args.schema_out or str(Path(args.out).with_suffix(".schema"))
    corpus.write(args.out, schema_out)
    counts = ", ".join(f"{k}={v}" for k, v in sorted(corpus.label_counts.items()))
    print(f"wrote {len(corpus.rows)} flows to {args.out} ({counts}); schema {schema_out}")


def cmd_preprocess(args):
    from .ingest import load_schema, parse_flow_csv
    from .pipeline import prepare
    _require(args, "data", "schema", "out")
    schema = load_schema(args.schema)
    records = parse_flow_csv(args.data, schema)
    prep = prepare(records, schema, _prep_config(args))
    prep.save(args.out)
    s = prep.stats
    print(f"prepared {s['train_windows']} train / {s['test_windows']} test windows, "
          f"{s['features']} features, {s['synthetic_rows']} synthetic rows -> {args.out}")


def cmd_build_graph(args):
    from .graph import write_graphs
    from .model import window_graphs
    from .pipeline import Prepared
    _require(args, "prepared", "out")
    prep = Prepared.load(args.prepared)
    part = prep.train if args.split == "train" else prep.test
    windows = part.windows
    if args.limit:
        windows = type(windows)(windows.index[: args.limit], windows.labels[: args.limit],
                                windows.T, windows.stride)
    graphs = [g for g, _, _ in window_graphs(part.table, windows)]
    ids = [f"{args.split}-{i}:{prep.classes[int(c)]}" for i, c in enumerate(windows.labels)]
    write_graphs(args.out, graphs, ids)
    print(f"wrote {len(graphs)} graphs to {args.out}")


def _load_model(args, prep):
    from .graph import NodeFeatureScaler
    from .trainer import load_checkpoint
    model, meta, extra = load_checkpoint(args.checkpoint)
    if meta.get("classes") != prep.classes:
        raise ValueError(f"checkpoint classes {meta.get('classes')} != prepared classes {prep.classes}")
    scaler = NodeFeatureScaler(extra["scaler.lo"], extra["scaler.hi"]) if "scaler.lo" in extra else None
    return model, scaler


def cmd_train(args):
    from .model import HybridModel
    from .pipeline import Prepared, build_samples
    from .trainer import fit, save_checkpoint
    _require(args, "prepared", "out")
    prep = Prepared.load(args.prepared)
    mcfg = _model_config(args, prep)
    tcfg = _train_config(args)
    train, _, scaler = build_samples(prep, mcfg.symmetrize)
    model, report = fit(train, tcfg, HybridModel(mcfg))
    meta = {"classes": prep.classes, "features": prep.feature_names, "train": asdict(tcfg),
            "best_epoch": report.best_epoch, "epochs": report.epochs, "stop_reason": report.stop_reason}
    save_checkpoint(model, args.out, meta, {"scaler.lo": scaler.lo, "scaler.hi": scaler.hi})
    log_path = args.log or args.out + ".log"
    Path(log_path).write_text(report.log_lines(), encoding="utf-8")
    print(f"trained {report.epochs} epochs ({report.stop_reason}), best epoch {report.best_epoch} "
          f"val macro-F1 {max(report.val_f1):.4f}; checkpoint {args.out}, log {log_path}")


def cmd_evaluate(args):
    from .metrics import evaluate
    from .pipeline import Prepared, build_samples
    _require(args, "prepared", "checkpoint", "out")
    prep = Prepared.load(args.prepared)
    model, scaler = _load_model(args, prep)
    _, test, _ = build_samples(prep, model.config.symmetrize, scaler)
    report = evaluate(model, test, prep.classes, args.normal_class)
    report.save(args.out)
    print(f"accuracy {report.accuracy:.4f} macro-F1 {report.macro_f1:.4f} "
          f"macro-AUC {report.macro_auc:.4f}; report {args.out}")


def cmd_ablate(args):
    from .metrics import ablate, format_ablation
    from .pipeline import Prepared, build_samples
    _require(args, "prepared", "out")
    prep = Prepared.load(args.prepared)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    mcfg = _model_config(args, prep)
    train, test, _ = build_samples(prep, mcfg.symmetrize)
    rows = ablate(train, test, prep.classes, mcfg, _train_config(args), variants, args.normal_class)
    Path(args.out).write_text(format_ablation(rows), encoding="utf-8")
    if args.report_dir:
        d = Path(args.report_dir)
        d.mkdir(parents=True, exist_ok=True)
        for r in rows:
            r.report.save(d / f"{r.variant}.txt")
    print(format_ablation(rows), end="")


def cmd_explain(args):
    from .metrics import export_attention
    from .pipeline import Prepared, build_samples
    _require(args, "prepared", "checkpoint", "out")
    prep = Prepared.load(args.prepared)
    model, scaler = _load_model(args, prep)
    _, test, _ = build_samples(prep, model.config.symmetrize, scaler)
    if args.windows:
        ids = list(_csv_ints(args.windows))
        bad = [i for i in ids if not 0 <= i < len(test)]
        if bad:
            raise UsageError(f"hybrid-ids explain: error: window ids out of range: {bad}")
    else:
        ids = list(range(len(test)))
        if args.label:
            if args.label not in prep.classes:
                raise UsageError(f"hybrid-ids explain: error: unknown class {args.label!r}")
            k = prep.classes.index(args.label)
            ids = [i for i in ids if test[i].label == k]
        ids = ids[: args.count]
    traces = export_attention(model, [test[i] for i in ids], args.out, prep.classes, [str(i) for i in ids])
    print(f"wrote {len(traces)} attention traces to {args.out}")


COMMANDS = {
    "datagen": cmd_datagen, "preprocess": cmd_preprocess, "build-graph": cmd_build_graph,
    "train": cmd_train, "evaluate": cmd_evaluate, "ablate": cmd_ablate, "explain": cmd_explain,
}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse(argv)
        if args.command == "version":
            print(f"hybrid-ids {__version__}")
            return EXIT_OK
        if args.print_config:
            print(config_text(args), end="")
            return EXIT_OK
        logging.basicConfig(level=getattr(logging, args.log_level.upper()),
                            format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[args.command](args)
        return EXIT_OK
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:      # --help and argparse internals
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except (NumericError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
