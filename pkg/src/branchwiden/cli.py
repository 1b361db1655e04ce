"""Command-line front end: ``branchwiden <command> [flags]``.

Exit status is 0 on success, 1 on a usage error and 2 on a runtime error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from . import datagen, persist
from .affinity import matrix_csv
from .somp import somp_init_model
from .trainer import TrainConfig, adaptive_widen_train, evaluate, initial_model, train_plain
from .tree import build_thin, desk_template

log = logging.getLogger("branchwiden")

COMMANDS = ("gen-data", "train-wide", "somp-init", "train-adaptive", "evaluate", "inspect", "export-dot")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _shape(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not dims or min(dims) < 1 or len(dims) not in (1, 3):
        raise argparse.ArgumentTypeError("shape must be D or C,H,W with positive entries")
    return dims


def build_parser() -> Parser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = Parser(prog="branchwiden", description="Adaptive widening of thin multi-task networks.", formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    def train_flags(p, iters=True):
        p.add_argument("--lr", type=float, default=0.05, help="SGD learning rate")
        p.add_argument("--momentum", type=float, default=0.9, help="SGD momentum")
        p.add_argument("--batch", type=int, default=64, help="mini-batch size")
        p.add_argument("--final-iters", type=int, default=2000, help="training iterations after the architecture freezes")
        p.add_argument("--seed", type=int, default=0, help="random seed")
        if iters:
            p.add_argument("--iters-per-round", type=int, default=300, help="iterations per widening round")

    p = sub.add_parser("gen-data", help="write a synthetic dataset and its truth file", formatter_class=fmt)
    p.add_argument("--out", required=True, help="dataset file; truth goes to <out>.truth.json")
    p.add_argument("--tasks", type=int, default=6, help="number of tasks")
    p.add_argument("--groups", type=int, default=2, help="number of planted task groups")
    p.add_argument("--samples", type=int, default=8000, help="number of samples")
    p.add_argument("--noise", type=float, default=0.0, help="label flip probability")
    p.add_argument("--shape", type=_shape, default=(1, 16, 16), help="input shape, C,H,W or D")
    p.add_argument("--seed", type=int, default=0, help="random seed")

    p = sub.add_parser("train-wide", help="train a wide reference model", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--out", required=True, help="model stem; writes <out>.json and <out>.bin")
    p.add_argument("--width", type=int, default=64, help="width factor of the wide model")
    train_flags(p, iters=False)

    p = sub.add_parser("somp-init", help="initialize a thin model from a wide one", formatter_class=fmt)
    p.add_argument("--wide", required=True, help="wide model (stem or manifest path)")
    p.add_argument("--omega", type=int, default=16, help="thinness factor of the new model")
    p.add_argument("--out", required=True, help="model stem for the thin model")
    p.add_argument("--seed", type=int, default=0, help="random seed for arrays not copied from the wide model")

    p = sub.add_parser("train-adaptive", help="train with adaptive widening", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--omega", type=int, default=16, help="thinness factor")
    p.add_argument("--alpha", type=float, default=2.0, help="branching factor")
    p.add_argument("--l0", type=float, default=1.0, help="unit cost of creating a branch")
    p.add_argument("--ema-decay", type=float, default=0.99, help="decay of the affinity running averages")
    p.add_argument("--wide", default=None, help="wide model for SOMP initialization")
    p.add_argument("--val-fraction", type=float, default=0.0, help="held-out fraction for validation loss (0 disables)")
    train_flags(p)

    for name, helptext in (("evaluate", "print accuracy and loss"), ("inspect", "print architecture and task grouping per level"),
                           ("export-dot", "print the model as a DOT graph")):
        p = sub.add_parser(name, help=helptext, formatter_class=fmt)
        p.add_argument("--model", required=True, help="model stem or manifest path")
        if name == "evaluate":
            p.add_argument("--data", required=True, help="dataset file")
        p.add_argument("--format", choices=("json", "dot", "csv"), default=None,
                       help="output format (default: plain text; dot only for inspect/export-dot)")
        p.add_argument("--out", default=None, help="write to this file instead of stdout")
    return parser


def _echo(args, path: Path | None = None) -> dict:
    config = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items()}
    text = json.dumps(config, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stderr.write("config: " + json.dumps(config, sort_keys=True) + "\n")
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    return config


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _echo_path(stem) -> Path:
    stem = Path(stem)
    return stem.with_name(stem.name + ".config.json")


def cmd_gen_data(args) -> None:
    spec = datagen.SyntheticSpec(task_count=args.tasks, group_count=args.groups, samples=args.samples,
                                 label_noise=args.noise, input_shape=args.shape, seed=args.seed)
    data, truth = datagen.generate(spec)
    datagen.save(data, args.out, truth)
    _echo(args, _echo_path(args.out))


def _train_config(args, **over) -> TrainConfig:
    fields = dict(lr=args.lr, momentum=args.momentum, batch_size=args.batch, final_iters=args.final_iters, seed=args.seed)
    return TrainConfig(**(fields | over))


def cmd_train_wide(args) -> None:
    data = datagen.load(args.data)
    cfg = _train_config(args, omega=args.width, alpha=0.0)
    tree, _ = initial_model(data, cfg)
    losses = train_plain(tree, data, cfg, cfg.final_iters)
    tree.config = {"role": "wide", "train": cfg.to_dict()}
    persist.save_model(tree, args.out)
    if losses:
        log.info("wide model final batch loss %.4f", losses[-1])
    _echo(args, _echo_path(args.out))


def cmd_somp_init(args) -> None:
    wide = persist.load_model(args.wide)
    template = desk_template(wide.input_shape)
    thin = build_thin(template, args.omega, wide.task_count, wide.input_shape, seed=args.seed, task_names=wide.task_names)
    out = somp_init_model(thin, wide)
    out.config = {"role": "somp-init", "omega": args.omega, "wide": str(args.wide)}
    persist.save_model(out, args.out)
    _echo(args, _echo_path(args.out))


def cmd_train_adaptive(args) -> None:
    data = datagen.load(args.data)
    cfg = _train_config(args, omega=args.omega, alpha=args.alpha, l0=args.l0, ema_decay=args.ema_decay,
                        iters_per_round=args.iters_per_round)
    val = None
    if args.val_fraction > 0:
        data, val = data.split(args.val_fraction, seed=args.seed)
    wide = persist.load_model(args.wide) if args.wide else None
    tree, trace = adaptive_widen_train(data, cfg, wide=wide, val=val)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    persist.save_model(tree, out / "model")
    (out / "model.dot").write_text(persist.export_dot(tree, cfg.name.replace("-", "_").replace(".", "_")))
    (out / "trace.json").write_text(json.dumps(trace.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "trace.txt").write_text(trace.report() + "\n" + persist.describe(tree))
    (out / "losses.csv").write_text(trace.loss_csv())
    for r in trace.rounds:
        branch_names = ["+".join(data.task_names[t] for t in ts) for ts in r.branch_tasks]
        (out / f"affinity_round{r.round}.csv").write_text(matrix_csv(r.affinity, data.task_names))
        (out / f"branch_affinity_round{r.round}.csv").write_text(matrix_csv(r.branch_affinity, branch_names))
        (out / f"loss_table_round{r.round}.csv").write_text(r.decision.table_csv())
    _echo(args, out / "config.json")


def cmd_evaluate(args) -> None:
    _echo(args)
    metrics = evaluate(persist.load_model(args.model), datagen.load(args.data))
    if args.format == "json":
        text = json.dumps(metrics, indent=2, sort_keys=True) + "\n"
    elif args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "accuracy"])
        w.writerows([i, repr(a)] for i, a in enumerate(metrics["per_task_accuracy"]))
        w.writerow(["mean", repr(metrics["accuracy"])])
        text = buf.getvalue()
    elif args.format == "dot":
        raise UsageError("evaluate does not support --format dot")
    else:
        per = " ".join(f"{a:.4f}" for a in metrics["per_task_accuracy"])
        text = f"accuracy {metrics['accuracy']:.4f}\nbce {metrics['bce']:.4f}\nper-task {per}\n"
    _emit(text, args.out)


def _levels_table(tree) -> list[dict]:
    rows = []
    for i in range(tree.depth):
        specs = tree.level_specs[i]
        rows.append({
            "level": i,
            "kinds": [s.kind for s in specs],
            "width": specs[0].out_size,
            "blocks": len(tree.levels[i]),
            "groups": [[tree.task_names[t] for t in sorted(ts)] for ts in tree.branch_tasks(i)],
            "active": i == tree.active_layer,
        })
    return rows


def cmd_inspect(args) -> None:
    _echo(args)
    tree = persist.load_model(args.model)
    if args.format == "json":
        doc = {"input_shape": list(tree.input_shape), "params": tree.param_count(), "levels": _levels_table(tree)}
        text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    elif args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level", "kinds", "width", "blocks", "groups"])
        for row in _levels_table(tree):
            groups = " ".join("{" + ",".join(g) + "}" for g in row["groups"])
            w.writerow([row["level"], "-".join(row["kinds"]), row["width"], row["blocks"], groups])
        text = buf.getvalue()
    elif args.format == "dot":
        text = persist.export_dot(tree)
    else:
        text = persist.describe(tree)
    _emit(text, args.out)


def cmd_export_dot(args) -> None:
    _echo(args)
    if args.format not in (None, "dot"):
        raise UsageError("export-dot only writes --format dot")
    _emit(persist.export_dot(persist.load_model(args.model)), args.out)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-wide": cmd_train_wide,
    "somp-init": cmd_somp_init,
    "train-adaptive": cmd_train_adaptive,
    "evaluate": cmd_evaluate,
    "inspect": cmd_inspect,
    "export-dot": cmd_export_dot,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        HANDLERS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return 1
    # library errors derive from ValueError (bad input) or RuntimeError (training)
    except (ValueError, RuntimeError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    return 0


def main() -> None:
    sys.exit(run())
