"""Command-line entry point: ``flam <subcommand> [--config PATH] [--seed N] [--set K=V] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import __version__
from . import checkpoint as ckpt
from . import pipeline as pl
from . import retrieval as rt
from . import synthdata as sd
from .errors import ConfigError, DataError, FlamError, TrainingError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAINING = 0, 2, 3, 4


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                   help="override a dotted config key with a JSON value (repeatable)")
    p.add_argument("--out", type=Path, default=Path("flam-out"), help="output directory (default: flam-out)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flam", description="Feature-level attribute manipulation pipeline.")
    parser.add_argument("--version", action="version", version=f"flam {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("gen-data", help="generate synthetic train/query/gallery feature files"))
    _common(sub.add_parser("train-embedders", help="train one embedder + dictionary per attribute type"))
    for name, text in (("train-manipulator", "train manipulators for the configured variants"),
                       ("evaluate", "compute R@k, T@k, probe deltas and cluster statistics")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--variant", action="append", help="variant name such as M/OS/Adv (repeatable)")

    p = sub.add_parser("manipulate", help="manipulate one query and print its ranked gallery ids")
    _common(p)
    p.add_argument("--attr", required=True, help="attribute type to manipulate")
    p.add_argument("--class", dest="target_class", type=int, required=True, help="target class index")
    p.add_argument("--k", type=int, default=10, help="number of results (default 10)")
    p.add_argument("--record", type=int, default=0, help="position of the query in the input file")
    p.add_argument("--variant", help="variant whose checkpoint to use (default: first configured)")
    p.add_argument("--input", type=Path, help="feature file holding the query (default: <out>/data/query.flamfeat)")
    p.add_argument("--gallery", type=Path, help="gallery feature file (default: <out>/data/gallery.flamfeat)")
    p.add_argument("--manipulator", type=Path, help="FLAMGAN checkpoint (default: from --out and --variant)")
    p.add_argument("--embedder", type=Path, help="FLAMEMB checkpoint holding the dictionary (default: from --out)")

    _common(sub.add_parser("report", help="render figures and CSV tables from report.json"))
    return parser


def _timed(label: str, fn, *args):
    t0 = time.perf_counter()
    result = fn(*args)
    print(f"{label}: done in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return result


def cmd_gen_data(config: pl.RunConfig, args) -> int:
    entry = _timed("gen-data", pl.run_gen_data, config, args.out)
    for path, digest in entry["artifacts"].items():
        print(f"{path}\t{digest}")
    return EXIT_OK


def cmd_train_embedders(config: pl.RunConfig, args) -> int:
    entry = _timed("train-embedders", pl.run_train_embedders, config, args.out)
    for path, digest in entry["artifacts"].items():
        print(f"{path}\t{digest}")
    return EXIT_OK


def cmd_train_manipulator(config: pl.RunConfig, args) -> int:
    entry = _timed("train-manipulator", pl.run_train_manipulators, config, args.out, args.variant)
    for path, digest in entry["artifacts"].items():
        print(f"{path}\t{digest}")
    return EXIT_OK


def cmd_evaluate(config: pl.RunConfig, args) -> int:
    report, _ = _timed("evaluate", pl.run_evaluate, config, args.out, args.variant)
    sys.stdout.write(report.render_text())
    return EXIT_OK


def cmd_manipulate(config: pl.RunConfig, args) -> int:
    out = args.out
    variant = args.variant or config.variants[0]
    query_path = args.input or pl.data_paths(out)["query"]
    gallery_path = args.gallery or pl.data_paths(out)["gallery"]
    queries = sd.load_features(pl._require(Path(query_path), "input feature file"))
    schema = queries.schema
    if args.attr not in schema.types:
        raise ConfigError(f"attribute {args.attr!r} not in schema {list(schema.types)}")
    if not 0 <= args.target_class < schema.count(args.attr):
        raise ConfigError(f"class {args.target_class} out of range for {args.attr!r} "
                          f"({schema.count(args.attr)} classes)")
    if args.k < 1:
        raise ConfigError("--k must be >= 1")
    if not 0 <= args.record < len(queries):
        raise ConfigError(f"--record {args.record} out of range for {len(queries)} records")
    man_path = args.manipulator or pl.manipulator_path(out, variant, args.attr)
    emb_path = args.embedder or pl.embedder_path(out, args.attr)
    trained = ckpt.load_manipulator(pl._require(Path(man_path), "manipulator checkpoint"))
    if trained.config.target_attr != args.attr:
        raise ConfigError(f"checkpoint manipulates {trained.config.target_attr!r}, not {args.attr!r}")
    _, dictionary = ckpt.load_embedder(pl._require(Path(emb_path), "embedder checkpoint"))
    gallery = sd.load_features(pl._require(Path(gallery_path), "gallery feature file"))
    index = rt.build_index(gallery)
    x_tilde = rt.manipulate_query(trained.generator, {args.attr: dictionary}, queries.features[args.record],
                                  args.attr, args.target_class)
    res = rt.search(index, x_tilde, args.k)
    if res.truncated:
        print(f"warning: k={args.k} exceeds gallery size {len(index)}", file=sys.stderr)
    for rank, (pos, sim) in enumerate(zip(res.positions, res.similarities), start=1):
        print(f"{rank},{int(index.instance_ids[pos])},{sim:.6f}")
    return EXIT_OK


def cmd_report(config: pl.RunConfig, args) -> int:
    from . import plotting

    report_path = pl._require(Path(args.out) / "report.json", "report.json (run evaluate first)")
    try:
        report = json.loads(report_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{report_path} is not valid JSON: {exc}") from None
    logs = {}
    for variant in report.get("t_at_k", {}):
        per_attr = {}
        for attr in config.schema.types:
            p = pl.manipulator_path(args.out, variant, attr)
            if Path(str(p) + ckpt.SIDECAR_SUFFIX).exists():
                per_attr[attr] = ckpt.read_sidecar(p).get("log", [])
        logs[variant] = per_attr
    t0 = time.perf_counter()
    written = plotting.render_report(report, logs, Path(args.out) / "figures")
    pl.Manifest(args.out).record("report", written, time.perf_counter() - t0, config)
    sys.stdout.write(plotting.tables(report)["t_at_k.csv"])
    for p in written:
        print(f"wrote {p}", file=sys.stderr)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-embedders": cmd_train_embedders,
    "train-manipulator": cmd_train_manipulator,
    "evaluate": cmd_evaluate,
    "manipulate": cmd_manipulate,
    "report": cmd_report,
}


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_USAGE
    if isinstance(exc, TrainingError):
        return EXIT_TRAINING
    if isinstance(exc, (DataError, OSError)):
        return EXIT_DATA
    if isinstance(exc, FlamError):
        return EXIT_USAGE
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = pl.RunConfig.load(args.config, args.overrides, args.seed)
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](config, args)
    except (FlamError, OSError) as exc:
        print(f"flam {args.command}: error: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
