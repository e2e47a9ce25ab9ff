"""Command-line entry point: ``sreseg <command> [flags]``.

Settings can come from a flat ``key = value`` file given with ``--config``;
flags override the file.  Every run writes the fully resolved settings to
``<out>/config.echo``, which can be passed back with ``--config`` (the
``command`` key selects the subcommand) to reproduce the run.

Exit codes: 0 success, 2 usage error, 3 data error, 4 invariant violation.
Failures print a single ``sreseg: error code=<n> kind=<kind> message=<text>``
line on stderr.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, seeding
from .datagen import DEFAULT_ANISOTROPY, center_crop, gen_classification_set, gen_tma_cohort, write_cohort
from .imaging import FormatError, read_pnm, rotate_image, to_float, write_bundle, write_label_map
from .invariants import run_suite
from .metrics import ALL_PAIRS, REFERENCE, MetricRow, accuracy, format_value, write_metrics_csv, write_metrics_jsonl
from .model import Network, TrainConfig, build_model, nhwc_to_nchw, predict_logits, train
from .nn import SRE, STANDARD
from .pipeline import (DEFAULT_ANGLES, INTER, INTRA, AnalysisConfig, NoTissueError, UnsupervisedSegmenter,
                       ablation_run, embedding_eval, read_manifest, summarize)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 2, 3, 4
log = logging.getLogger("sreseg")


class CliError(Exception):
    def __init__(self, message, code=EXIT_USAGE, kind="usage"):
        super().__init__(message)
        self.code, self.kind = code, kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


# ---------------------------------------------------------------------------
# value parsers


def _int_list(text):
    try:
        return tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text):
    try:
        return tuple(float(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _models(text):
    """``name=dir,name=dir`` -> ordered dict."""
    out = {}
    for item in str(text).split(","):
        if not item.strip():
            continue
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise argparse.ArgumentTypeError(f"expected name=directory, got {item!r}")
        out[name.strip()] = path.strip()
    if not out:
        raise argparse.ArgumentTypeError("no models given")
    return out


def _clusterers(text):
    out = []
    for item in str(text).split(","):
        method, sep, k = item.strip().partition(":")
        if method not in ("kmeans", "gmm") or not sep:
            raise argparse.ArgumentTypeError(f"expected kmeans:K or gmm:K, got {item!r}")
        out.append((method, int(k)))
    return tuple(out)


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _render(value):
    if isinstance(value, dict):
        return ",".join(f"{k}={v}" for k, v in value.items())
    if isinstance(value, (tuple, list)):
        return ",".join(_render(v) if not isinstance(v, tuple) else f"{v[0]}:{v[1]}" for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config(path):
    """Flat ``key = value`` file; ``#`` starts a comment."""
    cfg = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}", EXIT_DATA, "data") from None
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CliError(f"{path}:{lineno}: expected key = value")
        cfg[key.strip().replace("-", "_")] = value.strip()
    return cfg


# ---------------------------------------------------------------------------
# parser


def _common(p):
    p.add_argument("--config", help="flat key = value settings file; flags override it")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, default=42, help="master seed")
    p.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP threads; 0 keeps the library default")
    p.add_argument("--verbose", type=_bool, default=False, nargs="?", const=True)


def _data_opts(p):
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--tile", type=int, default=64)
    p.add_argument("--anisotropy", type=float, default=DEFAULT_ANISOTROPY)


def _analysis_opts(p, multi_model=True):
    p.add_argument("--models", type=_models, required=True,
                   help="name=model_dir pairs, comma separated (e.g. sre=runs/sre/model)")
    p.add_argument("--cohort", required=True, help="cohort manifest (id, image, gt|-, split per line)")
    p.add_argument("--layer", type=int, default=4)
    p.add_argument("--grid", type=int, default=128)
    p.add_argument("--angles", type=_float_list, default=DEFAULT_ANGLES)
    p.add_argument("--mode", choices=(ALL_PAIRS, REFERENCE), default=ALL_PAIRS)
    p.add_argument("--dump-labels", type=_bool, default=False, nargs="?", const=True)


COMMANDS = ("gen-data", "pretrain", "segment", "eval-intra", "eval-inter", "ablate", "embed-eval",
            "check-equivariance")


def build_parser():
    parser = _Parser(prog="sreseg", description="Rotation-equivariant feature clustering segmentation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write the synthetic TMA cohort (and optionally the classification set)")
    _common(p)
    _data_opts(p)
    p.add_argument("--n-subjects", type=int, default=20)
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--classification", type=_bool, default=False, nargs="?", const=True)

    p = sub.add_parser("pretrain", help="train a model on the synthetic classification set")
    _common(p)
    _data_opts(p)
    p.add_argument("--variant", choices=(SRE, STANDARD), default=SRE)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=24)
    p.add_argument("--lr", type=float, default=2e-2)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--eval-angles", type=_float_list, default=(0.0, 30.0))

    p = sub.add_parser("segment", help="cluster one image into regions")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--method", choices=("kmeans", "gmm"), default="kmeans")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--layer", type=int, default=4)
    p.add_argument("--grid", type=int, default=128)

    for name, help_ in (("eval-intra", "per-subject rotation consistency"),
                        ("eval-inter", "rotation consistency with a cohort-level clusterer")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        _analysis_opts(p)
        p.add_argument("--method", choices=("kmeans", "gmm"), default="kmeans")
        p.add_argument("--k", type=int, default=3)
        if name == "eval-intra":
            p.add_argument("--n", type=int, default=2000)
        else:
            p.add_argument("--n-per-subject", type=int, default=500)

    p = sub.add_parser("ablate", help="intra and inter analyses for several clusterers")
    _common(p)
    _analysis_opts(p)
    p.add_argument("--clusterers", type=_clusterers, default=(("kmeans", 2), ("kmeans", 3), ("kmeans", 4), ("gmm", 3)))
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--n-per-subject", type=int, default=500)

    p = sub.add_parser("embed-eval", help="PCA + kNN on ground-truth-labelled embeddings")
    _common(p)
    p.add_argument("--models", type=_models, required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--layer", type=int, default=4)
    p.add_argument("--grid", type=int, default=128)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--neighbors", type=int, default=3)
    p.add_argument("--variance", type=float, default=0.99)
    p.add_argument("--split", choices=("test", "train", "all"), default="test")

    p = sub.add_parser("check-equivariance", help="run the invariant suite")
    _common(p)
    return parser


def parse_args(argv):
    """Resolve flags over an optional config file."""
    argv = list(argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    file_cfg = read_config(known.config) if known.config else {}
    parser = build_parser()
    command = next((a for a in argv if a in COMMANDS), None)
    if command is None:
        command = file_cfg.get("command")
        if command is None:
            if any(a in ("-h", "--help", "--version") for a in argv):
                parser.parse_args(argv)
            raise CliError(f"missing command; choose from {', '.join(COMMANDS)}")
        if command not in COMMANDS:
            raise CliError(f"unknown command {command!r} in config")
        argv = [command] + argv
    sub = parser._subparsers._group_actions[0].choices[command]
    dests = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in file_cfg.items():
        if key in ("command", "config"):
            continue
        if key not in dests:
            raise CliError(f"unknown config key {key!r} for {command}")
        action = dests[key]
        defaults[key] = value
        if action.required:
            # satisfied by the file; argparse would otherwise demand the flag
            action.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def write_echo(args, path):
    skip = {"config", "help"}
    items = sorted((k, v) for k, v in vars(args).items() if k not in skip and v is not None)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"command = {args.command}\n")
        for k, v in items:
            if k == "command":
                continue
            fh.write(f"{k} = {_render(v)}\n")


# ---------------------------------------------------------------------------
# commands


def _load_models(spec):
    models = {}
    for name, path in spec.items():
        if not os.path.isfile(os.path.join(path, "manifest.txt")):
            raise CliError(f"no model bundle at {path}", EXIT_DATA, "data")
        # float64 inference keeps quarter-turn results exact up to rounding far below cluster margins
        models[name] = Network.load(path).astype(np.float64)
    return models


def _load_cohort(path):
    if not os.path.isfile(path):
        raise CliError(f"cohort manifest not found: {path}", EXIT_DATA, "data")
    return read_manifest(path)


def cmd_gen_data(args):
    cohort = gen_tma_cohort(args.seed, args.n_subjects, args.size, args.anisotropy)
    path = write_cohort(os.path.join(args.out, "cohort"), cohort)
    log.info("wrote %d subjects to %s", len(cohort), path)
    if args.classification:
        ds = gen_classification_set(args.seed, n_train=args.n_train, n_test=args.n_test, size=args.tile,
                                    anisotropy=args.anisotropy)
        write_bundle(os.path.join(args.out, "classification"),
                     {"X_train": ds.X_train, "y_train": ds.y_train, "X_test": ds.X_test, "y_test": ds.y_test,
                      "test_context": ds.test_context},
                     {"seed": args.seed, "n_train": args.n_train, "n_test": args.n_test, "tile": args.tile})


def rotated_test_images(ds, angle):
    """Test tiles viewed at ``angle``: rotate the context tile, then centre-crop."""
    size = ds.X_test.shape[1]
    if angle == 0:
        return to_float(ds.X_test)
    return np.stack([center_crop(rotate_image(to_float(c, np.float64), angle), size)
                     for c in ds.test_context]).astype(np.float32)


def cmd_pretrain(args):
    ds = gen_classification_set(args.seed, n_train=args.n_train, n_test=args.n_test, size=args.tile,
                                anisotropy=args.anisotropy)
    model = build_model(variant=args.variant, input_size=args.tile, seed=seeding.child_seed(args.seed, seeding.INIT))
    tc = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, base_lr=args.lr, momentum=args.momentum)
    _, history = train(model, nhwc_to_nchw(to_float(ds.X_train)), ds.y_train, tc,
                       seed=seeding.child_seed(args.seed, seeding.SHUFFLE),
                       callback=lambda r: log.info("epoch %d loss %.6f acc %.4f", r["epoch"], r["loss"], r["accuracy"]))
    model.save(os.path.join(args.out, "model"))
    with open(os.path.join(args.out, "history.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "loss", "accuracy"])
        for r in history:
            w.writerow([r["epoch"], format_value(r["lr"]), format_value(r["loss"]), format_value(r["accuracy"])])
    rows = []
    if len(ds.y_test):
        for angle in args.eval_angles:
            pred = predict_logits(model, nhwc_to_nchw(rotated_test_images(ds, angle))).argmax(axis=1)
            rows.append(MetricRow("test", args.variant, f"rotate-{format_value(angle)}", "accuracy",
                                  accuracy(pred, ds.y_test)))
    write_metrics_csv(os.path.join(args.out, "accuracy.csv"), rows)


def cmd_segment(args):
    models = _load_models({"model": args.model})
    try:
        image = to_float(read_pnm(args.image), np.float64)
    except OSError as exc:
        raise CliError(f"cannot read image {args.image}: {exc.strerror}", EXIT_DATA, "data") from None
    seg = UnsupervisedSegmenter(models["model"], args.layer, args.grid, args.method, args.k, args.n, args.seed)
    labels = seg.fit([image]).predict(image)
    write_label_map(os.path.join(args.out, "labels.pgm"), labels)


def _write_reports(args, results, compare=None):
    rows = [row for r in results for row in r.rows()]
    write_metrics_csv(os.path.join(args.out, "metrics.csv"), rows)
    write_metrics_jsonl(os.path.join(args.out, "metrics.jsonl"), rows)
    summary = summarize(results, compare)
    write_metrics_csv(os.path.join(args.out, "summary.csv"), summary.rows())
    return summary


def _analysis(args, analyses, clusterers, n_intra=2000, n_inter=500):
    models = _load_models(args.models)
    records = _load_cohort(args.cohort)
    cfg = AnalysisConfig(angles=tuple(args.angles), layer=args.layer, grid=args.grid, n_intra=n_intra,
                         n_inter=n_inter, clusterers=clusterers, analyses=analyses, mode=args.mode, seed=args.seed,
                         dump_dir=os.path.join(args.out, "labels") if args.dump_labels else None)
    results = ablation_run(models, records, cfg, log=log.info)
    names = list(models)
    return results, (names[0], names[1]) if len(names) >= 2 else None


def cmd_eval_intra(args):
    results, compare = _analysis(args, (INTRA,), ((args.method, args.k),), n_intra=args.n)
    _write_reports(args, results, compare)


def cmd_eval_inter(args):
    results, compare = _analysis(args, (INTER,), ((args.method, args.k),), n_inter=args.n_per_subject)
    _write_reports(args, results, compare)


def cmd_ablate(args):
    results, compare = _analysis(args, (INTRA, INTER), tuple(args.clusterers), args.n, args.n_per_subject)
    summary = _write_reports(args, results, compare)
    # one row per (analysis, model, clusterer): mean and sd of every metric
    with open(os.path.join(args.out, "table.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["analysis", "model", "clusterer", "icc_mean", "icc_sd", "kappa_mean", "kappa_sd",
                    "dice_mean", "dice_sd"])
        keys = sorted({(m, meth) for (m, meth, _) in summary.stats},
                      key=lambda k: (k[1].split("-")[0] != INTRA, list(args.models).index(k[0]), k[1]))
        for model, method in keys:
            analysis, clusterer = method.split("-", 1)
            vals = []
            for metric in ("icc", "kappa", "dice"):
                mean, sd, _ = summary.stats[(model, method, metric)]
                vals += [format_value(mean), format_value(sd)]
            w.writerow([analysis, model, clusterer] + vals)


def cmd_embed_eval(args):
    models = _load_models(args.models)
    records = _load_cohort(args.cohort)
    if args.split != "all":
        records = [r for r in records if r.split == args.split]
    rows = []
    for name, model in models.items():
        scores = embedding_eval(model, records, args.samples, args.seed, args.layer, args.grid, args.neighbors,
                                args.variance, warn=log.warning)
        rows += [MetricRow(sid, name, f"pca-knn{args.neighbors}", "dice", v) for sid, v in scores.items()]
    write_metrics_csv(os.path.join(args.out, "metrics.csv"), rows)
    write_metrics_jsonl(os.path.join(args.out, "metrics.jsonl"), rows)


def cmd_check_equivariance(args):
    checks, elapsed = run_suite(seed=args.seed)
    lines = [c.line() for c in checks] + [f"elapsed {elapsed:.1f}s"]
    with open(os.path.join(args.out, "equivariance.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    failed = [c for c in checks if not c.passed]
    if failed:
        raise CliError(f"{len(failed)} invariant(s) violated, first: {failed[0].name}", EXIT_INVARIANT, "invariant")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "segment": cmd_segment,
    "eval-intra": cmd_eval_intra,
    "eval-inter": cmd_eval_inter,
    "ablate": cmd_ablate,
    "embed-eval": cmd_embed_eval,
    "check-equivariance": cmd_check_equivariance,
}


def _report(err: CliError):
    msg = " ".join(str(err).split())
    print(f"sreseg: error code={err.code} kind={err.kind} message={msg}", file=sys.stderr)
    return err.code


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
    except CliError as err:
        return _report(err)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        os.makedirs(args.out, exist_ok=True)
        write_echo(args, os.path.join(args.out, "config.echo"))
        if args.threads > 0:
            with threadpool_limits(limits=args.threads):
                HANDLERS[args.command](args)
        else:
            HANDLERS[args.command](args)
    except CliError as err:
        return _report(err)
    except (OSError, FormatError, NoTissueError, KeyError) as err:
        return _report(CliError(f"{type(err).__name__}: {err}", EXIT_DATA, "data"))
    except ValueError as err:
        return _report(CliError(str(err), EXIT_USAGE, "usage"))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
