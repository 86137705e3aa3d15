"""Command-line entry point.

Subcommands: ``synth``, ``train``, ``index``, ``query``, ``eval``,
``gradcheck`` and ``params``. Every subcommand accepts ``--config`` (preset
name or JSON file), ``--seed`` and ``--run-dir``; outputs default to paths
under the run directory, which also receives the resolved configuration as
``config.resolved``. The run directory defaults to ``$CLUSVPR_RUN_DIR`` or
``./run``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure
(non-finite loss, failed gradient check). Files a failed command created are
removed.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .datagen import load_images, synth_world
from .indexing import build_index, global_descriptors
from .optlad import format_param_report, param_count_report
from .retrieval import ManifestRow, load_index, query_topk, read_manifest, recall_at_k, save_index
from .training import TrainingDiverged, gradient_check_suite, load_model, train_generations

log = logging.getLogger("clusvpr")

RUN_DIR_ENV = "CLUSVPR_RUN_DIR"
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    def __init__(self, message: str, keep=()):
        super().__init__(message)
        self.keep = set(keep)  # complete outputs that survive the cleanup


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, default_config: str = "desk") -> None:
    p.add_argument("--config", default=default_config, help="preset name or JSON file (default: %(default)s)")
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    p.add_argument("--run-dir", type=Path, default=None, help=f"output directory (default: ${RUN_DIR_ENV} or ./run)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clusvpr", description="ClusVPR place recognition toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate the synthetic geo-tagged world")
    _common(p)
    p.add_argument("--out", type=Path, default=None, help="world directory (default: RUN_DIR/world)")

    p = sub.add_parser("train", help="generational training")
    _common(p)
    p.add_argument("--data", type=Path, default=None, help="world directory from `synth` (default: generate in memory)")

    p = sub.add_parser("index", help="encode a manifest into a descriptor index")
    _common(p)
    p.add_argument("--checkpoint", type=Path, default=None, help="model checkpoint (default: latest in RUN_DIR)")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None, help="index file (default: RUN_DIR/index.bin)")

    p = sub.add_parser("query", help="top-k search for query images")
    _common(p)
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, default=None)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", type=Path, help="single image file")
    src.add_argument("--queries", type=Path, help="query manifest")
    p.add_argument("--k", type=int, default=5)

    p = sub.add_parser("eval", help="recall@k of a query manifest against an index")
    _common(p)
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--queries", type=Path, required=True, help="query manifest")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--k", default="1,5,10", help="comma-separated k values")
    p.add_argument("--threshold", type=float, default=None, help="metres (default: train.eval_threshold)")

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    _common(p, default_config="tiny")
    p.add_argument("--max-coords", type=int, default=12, help="coordinates checked per tensor (0 = all)")

    p = sub.add_parser("params", help="descriptor and PCA parameter accounting")
    _common(p, default_config="default")
    p.add_argument("--channels", type=int, default=1024, help="feature channels C (default: %(default)s)")
    p.add_argument("--standard-clusters", type=int, default=128)
    return parser


def _resolve(args) -> RunConfig:
    config = load_config(args.config)
    if args.seed is not None:
        if args.command == "synth":
            config.world = replace(config.world, seed=args.seed)
        else:
            config.train = replace(config.train, seed=args.seed)
    return config


def _run_dir(args) -> Path:
    if args.run_dir is not None:
        return args.run_dir
    return Path(os.environ.get(RUN_DIR_ENV, "run"))


def _latest_checkpoint(run_dir: Path) -> Path:
    found = sorted(run_dir.glob("generation*.ckpt"), key=lambda p: int(p.stem[len("generation"):] or 0))
    if not found:
        raise UsageError(f"no --checkpoint given and no generation*.ckpt in {run_dir}")
    return found[-1]


def _parse_ks(text: str) -> tuple:
    try:
        ks = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--k must be comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise UsageError("--k values must be positive")
    return ks


def _snapshot(paths) -> set:
    seen = set()
    for root in paths:
        if root.is_file():
            seen.add(root)
        elif root.is_dir():
            seen.update(root.rglob("*"))
            seen.add(root)
    return seen


def _cleanup(roots, before: set) -> None:
    """Delete files and directories under ``roots`` that did not exist in ``before``."""
    for root in roots:
        if not root.exists() or root in before and root.is_file():
            continue
        if root not in before:
            if root.is_dir():
                shutil.rmtree(root, ignore_errors=True)
            else:
                root.unlink(missing_ok=True)
            continue
        for p in sorted(root.rglob("*"), reverse=True):
            if p not in before:
                if p.is_dir():
                    shutil.rmtree(p, ignore_errors=True)
                else:
                    p.unlink(missing_ok=True)


def _cmd_synth(args, config, run_dir):
    out = args.out or run_dir / "world"
    rows = synth_world(config.world, out)
    print(f"wrote {len(rows['all'])} images to {out}")


def _cmd_train(args, config, run_dir):
    data = args.data
    if data is not None and not (data / "gallery.csv").exists():
        raise UsageError(f"{data} is not a world directory (no gallery.csv)")
    try:
        result = train_generations(config, data, out_dir=run_dir)
    except TrainingDiverged as exc:
        # finished generations are complete outputs: keep the last good checkpoint
        keep = set(run_dir.glob("generation*.ckpt")) | {run_dir / "metrics.csv", run_dir / "config.resolved"}
        raise NumericalFailure(str(exc), keep) from exc
    sys.stdout.write(result["metrics"])


def _cmd_index(args, config, run_dir):
    ckpt = args.checkpoint or _latest_checkpoint(run_dir)
    model, pca = load_model(ckpt)
    rows = read_manifest(args.manifest)
    index, report = build_index(model, pca, rows, args.manifest.parent)
    out = args.out or run_dir / "index.bin"
    save_index(index, out)
    print(f"indexed {report.records} images into {out}")
    for rid in report.skipped:
        print(f"skipped {rid}: unreadable image")


def _encode_rows(model, pca, rows, root):
    images, bad = load_images(rows, root)
    for rid in bad:
        log.warning("skipped unreadable query %s", rid)
    kept = [r for r in rows if r.id not in set(bad)]
    if not kept:
        return kept, np.zeros((0, pca.out_dim if pca else model.descriptor_dim))
    return kept, global_descriptors(model, pca, images)


def _cmd_query(args, config, run_dir):
    if args.k < 1:
        raise UsageError("--k must be positive")
    ckpt = args.checkpoint or _latest_checkpoint(run_dir)
    model, pca = load_model(ckpt)
    index = load_index(args.index)
    if args.image is not None:
        images, bad = load_images([ManifestRow("query", args.image.name, 0.0, 0.0)], args.image.parent)
        if bad:
            raise UsageError(f"cannot read image {args.image}")
        names, desc = ["query"], global_descriptors(model, pca, images)
    else:
        rows, desc = _encode_rows(model, pca, read_manifest(args.queries), args.queries.parent)
        names = [r.id for r in rows]
    print("query,rank,id,similarity")
    for name, d in zip(names, desc):
        for rank, (rid, sim) in enumerate(query_topk(index, d, args.k), start=1):
            print(f"{name},{rank},{rid},{sim:.6f}")


def _cmd_eval(args, config, run_dir):
    ks = _parse_ks(args.k)
    threshold = args.threshold if args.threshold is not None else config.train.eval_threshold
    ckpt = args.checkpoint or _latest_checkpoint(run_dir)
    model, pca = load_model(ckpt)
    index = load_index(args.index)
    rows, desc = _encode_rows(model, pca, read_manifest(args.queries), args.queries.parent)
    geo = np.array([[r.lat, r.lon] for r in rows]).reshape(-1, 2)
    report = recall_at_k(index, desc, geo, ks=ks, threshold=threshold, query_ids=[r.id for r in rows])
    text = "\n".join(report.lines()) + "\n"
    (run_dir / "eval.csv").write_text(text)
    sys.stdout.write(text)
    for qid in report.unreachable:
        print(f"# unreachable query {qid}: no gallery item within {threshold:g} m")


def _cmd_gradcheck(args, config, run_dir):
    seed = args.seed if args.seed is not None else 0
    reports = gradient_check_suite(config, seed=seed, max_coords=args.max_coords or None)
    text = "\n".join(str(r) for r in reports) + "\n"
    (run_dir / "gradcheck.txt").write_text(text)
    sys.stdout.write(text)
    failed = [r.parameter for r in reports if not r.passed]
    if failed:
        raise NumericalFailure(f"gradient check failed for {', '.join(failed)}")


def _cmd_params(args, config, run_dir):
    m = config.model
    report = param_count_report(
        channels=args.channels,
        clusters=m.clusters,
        expansion=m.expansion,
        groups=m.groups,
        out_dim=m.out_dim,
        standard_clusters=args.standard_clusters,
    )
    text = format_param_report(report) + "\n"
    (run_dir / "params.csv").write_text(text)
    sys.stdout.write(text)


COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "index": _cmd_index,
    "query": _cmd_query,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "params": _cmd_params,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"clusvpr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _resolve(args)
    except ConfigError as exc:
        print(f"clusvpr: invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE

    run_dir = _run_dir(args)
    roots = [run_dir] + [p for p in (getattr(args, "out", None),) if p is not None]
    before = _snapshot(roots)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.resolved").write_text(config.dumps())
        COMMANDS[args.command](args, config, run_dir)
    except NumericalFailure as exc:
        _cleanup(roots, before | exc.keep | ({run_dir} if exc.keep else set()))
        print(f"clusvpr: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, OSError, ValueError) as exc:
        _cleanup(roots, before)
        print(f"clusvpr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BaseException:
        _cleanup(roots, before)
        raise
    return EXIT_OK


def main() -> None:
    sys.exit(run())
