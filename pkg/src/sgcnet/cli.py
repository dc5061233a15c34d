"""Command-line entry point: ``sgcnet <command> [options]``.

Every run first writes a ``manifest.json`` describing itself (next to the
output file for commands that write a single file).  Failures print one line
starting with ``ERROR:`` and exit 2 (usage), 3 (data/IO) or 4 (numeric).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .errors import DataError, NumericError

log = logging.getLogger("sgcnet")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: Optional[str]
    seed: Optional[int]
    output: Optional[str]
    version: str = __version__
    timestamp: str = ""
    argv: List[str] = field(default_factory=list)

    def write(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        try:
            raw = json.loads(Path(path).read_text())
            return cls(**raw)
        except (OSError, ValueError, TypeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _triple(text: str):
    try:
        a, b, c = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a,b,c integers, got {text!r}") from None
    return a, b, c


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _count(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"count must be >= 0, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sgcnet", description="Sparse 3D convolution with spatial group convolution.")
    p.add_argument("--version", action="version", version=f"sgcnet {__version__}")
    p.add_argument("--threads", type=_positive, default=None,
                   help="BLAS/numpy thread count (default: $SGC_THREADS, else library default)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write synthetic scenes")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=_count, default=4)
    g.add_argument("--res", type=_positive, default=32)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a network on a scene directory")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--epochs", type=_positive, default=None, help="override the config")

    e = sub.add_parser("eval", help="IoU report for a checkpoint")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default=None, help="directory for iou.csv / iou.md / class_iou.png")

    f = sub.add_parser("profile", help="MAC counts per layer")
    f.add_argument("--config", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--groups", type=_positive, default=None)
    how = f.add_mutually_exclusive_group()
    how.add_argument("--pattern", type=_triple, default=None)
    how.add_argument("--random", type=int, default=None, metavar="SEED")
    f.add_argument("--out", required=True)

    q = sub.add_parser("partition", help="write the group index of every voxel of an R^3 grid")
    q.add_argument("--res", type=_positive, required=True)
    q.add_argument("--groups", type=_positive, required=True)
    how = q.add_mutually_exclusive_group(required=True)
    how.add_argument("--pattern", type=_triple)
    how.add_argument("--random", type=int, metavar="SEED")
    q.add_argument("--out", required=True)

    w = sub.add_parser("weights-hist", help="histogram of one layer's weights")
    w.add_argument("--checkpoint", required=True)
    w.add_argument("--layer", required=True)
    w.add_argument("--bins", type=_positive, default=50)
    w.add_argument("--out", required=True)

    r = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    r.add_argument("manifest")
    return p


def _manifest_path(args) -> Path:
    out = Path(args.out)
    if args.command in ("partition", "weights-hist"):
        return out.with_name(out.name + ".manifest.json")
    return out / "manifest.json"


def _write_manifest(args, argv) -> None:
    if getattr(args, "out", None) is None:
        return
    seed = getattr(args, "seed", None)
    cfg = getattr(args, "config", None)
    m = RunManifest(args.command, cfg, seed, str(args.out),
                    timestamp=time.strftime("%Y-%m-%dT%H:%M:%S%z"), argv=list(argv))
    m.write(_manifest_path(args))


# commands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .data_eval import build_sample, write_scene

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        sample = build_sample(args.seed + i, args.res)
        write_scene(out, i, sample)
    print(f"wrote {args.count} scenes to {out}")
    return 0


def _dataset(path, config):
    from .data_eval import load_dataset

    data = load_dataset(path, config.train.gt_tau)
    if not data:
        raise DataError(f"no scene_*.svox files in {path}")
    r = config.network.input_resolution
    if data[0].ftsdf.shape[0] != r:
        raise DataError(f"scenes are {data[0].ftsdf.shape[0]}^3 but the config expects {r}^3")
    return data


def cmd_train(args) -> int:
    from .model import load_config
    from .plots import training_curve
    from .training import train_loop

    config = load_config(args.config)
    if args.epochs is not None:
        config.train.epochs = args.epochs
    data = _dataset(args.data, config)
    out = Path(args.out)
    (out / "config.cfg").write_text(config.to_text())
    t0 = time.perf_counter()
    res = train_loop(config, data, out, seed=args.seed)
    steps = [m[1] for m in res.metrics]
    training_curve(out / "loss.png", steps, [max(m[2], 1e-12) for m in res.metrics])
    print(f"trained {config.train.epochs} epochs in {time.perf_counter() - t0:.1f}s; "
          f"final loss {res.metrics[-1][2]:.6f}; checkpoint {res.checkpoints[-1]}")
    return 0


def cmd_eval(args) -> int:
    from .data_eval import CLASS_NAMES, format_iou_table
    from .model import build, load_config
    from .training import evaluate_model, load_into, read_checkpoint

    config = load_config(args.config)
    graph = build(config.network)
    load_into(graph, read_checkpoint(args.checkpoint))
    data = _dataset(args.data, config)
    metrics = evaluate_model(graph, data)
    table = format_iou_table(metrics, Path(args.checkpoint).stem)
    print(table)
    if args.out:
        from .plots import class_iou_bars

        out = Path(args.out)
        row = metrics.as_row()
        with open(out / "iou.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(list(row))
            wr.writerow([repr(float(v)) for v in row.values()])
        (out / "iou.md").write_text(table + "\n")
        k = config.network.class_count
        names = [CLASS_NAMES[c] if c < len(CLASS_NAMES) else f"class{c}" for c in range(1, k)]
        class_iou_bars(out / "class_iou.png", names, metrics.class_iou[1:])
    return 0


def cmd_profile(args) -> int:
    from .model import build, load_config
    from .plots import flops_bars
    from .profiler import compare, count_flops
    from .sgc import PATTERN, RANDOM
    from .training import collate

    config = load_config(args.config)
    net = config.network
    if args.groups is not None:
        net.sgc_groups = args.groups
    if args.random is not None:
        net.sgc_strategy, net.sgc_seed = RANDOM, args.random
    elif args.pattern is not None:
        net.sgc_strategy, net.sgc_pattern = PATTERN, args.pattern
    data = _dataset(args.data, config)
    x = collate(data)
    t0 = time.perf_counter()
    report = count_flops(build(net), x)
    elapsed = time.perf_counter() - t0
    out = Path(args.out)
    (out / "flops.csv").write_text(report.to_csv())
    md = report.to_markdown(f"MAC totals ({len(data)} scenes, G={net.sgc_groups})")
    baseline = None
    if net.sgc_groups > 1:
        base_net = load_config(args.config).network
        base_net.sgc_groups = 1
        baseline = count_flops(build(base_net), x)
        cmp = compare(report, baseline)
        (out / "flops_ratio.csv").write_text(cmp.to_csv())
        md += "\n" + cmp.to_markdown()
    (out / "flops.md").write_text(md)
    flops_bars(out / "flops.png", [r.layer for r in report.records],
               [r.macs for r in report.records],
               None if baseline is None else [r.macs for r in baseline.records])
    print(md)
    print(f"structure pass: {elapsed:.2f}s")
    return 0


def cmd_partition(args) -> int:
    from .sgc import PartitionSpec, group_indices
    from .sparse_tensor import write_svox, SparseTensor

    if args.random is not None:
        spec = PartitionSpec.random(args.groups, args.random)
    else:
        spec = PartitionSpec.fixed(args.groups, *args.pattern)
    r = args.res
    zz, yy, xx = np.meshgrid(np.arange(r), np.arange(r), np.arange(r), indexing="ij")
    coords = np.stack([np.zeros(r ** 3, np.int64), xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    t = SparseTensor(coords, np.zeros((len(coords), 1)), 1, (r, r, r))
    grp = group_indices(t, spec)
    write_svox(args.out, t.with_features(grp[:, None].astype(np.float64)))
    sizes = np.bincount(grp, minlength=args.groups)
    print(f"{spec.describe()}: group sizes {sizes.tolist()}")
    return 0


def cmd_weights_hist(args) -> int:
    from .plots import weight_histogram
    from .training import read_checkpoint

    values = read_checkpoint(args.checkpoint)
    name = args.layer if args.layer in values else f"{args.layer}.weight"
    if name not in values:
        options = sorted(n[:-7] for n in values if n.endswith(".weight"))
        raise DataError(f"no layer {args.layer!r} in checkpoint; weight layers: "
                        f"{', '.join(options[:8])}{' ...' if len(options) > 8 else ''}")
    w = values[name]
    counts, edges = np.histogram(w, bins=args.bins)
    out = Path(args.out)
    with open(out, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            wr.writerow([repr(float(lo)), repr(float(hi)), int(c)])
    weight_histogram(out.with_suffix(".png"), counts, edges, name)
    print(f"{name}: {w.size} values in {args.bins} bins")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "profile": cmd_profile,
    "partition": cmd_partition,
    "weights-hist": cmd_weights_hist,
}


def _validate(args) -> None:
    """Flag checks argparse cannot express; run before anything is written."""
    if args.command == "gen-data" and args.res % 4:
        raise UsageError(f"--res must be a multiple of 4, got {args.res}")
    pattern = getattr(args, "pattern", None)
    if pattern is not None and any(v < 0 for v in pattern):
        raise UsageError(f"--pattern values must be non-negative, got {pattern}")
    for name in ("config", "data", "checkpoint"):
        path = getattr(args, name, None)
        if path is not None and name != "config" and not Path(path).exists():
            raise UsageError(f"--{name} {path} does not exist")


def _resolve_threads(args) -> Optional[int]:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("SGC_THREADS")
    if env:
        try:
            return _positive(env)
        except argparse.ArgumentTypeError as exc:
            raise UsageError(f"SGC_THREADS: {exc}") from None
    return None


def run(argv: List[str]) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "replay":
        m = RunManifest.read(args.manifest)
        if not m.argv:
            raise DataError(f"manifest {args.manifest} records no command line")
        return run(m.argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _validate(args)
    threads = _resolve_threads(args)
    _write_manifest(args, argv)
    if threads is None:
        return COMMANDS[args.command](args)
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=threads):
        return COMMANDS[args.command](args)


def main(argv: Optional[List[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        code = run(argv)
    except UsageError as exc:
        print(f"ERROR: usage: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except DataError as exc:
        print(f"ERROR: data: {exc}", file=sys.stderr)
        code = EXIT_DATA
    except OSError as exc:
        print(f"ERROR: io: {exc}", file=sys.stderr)
        code = EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"ERROR: numeric: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    return code


if __name__ == "__main__":
    sys.exit(main())
