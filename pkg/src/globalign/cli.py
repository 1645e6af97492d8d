"""``globalign`` command line: align, perturb, eval and bench."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from dataclasses import fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .graph import InputError, load_graph, load_instance, perturb_edges, read_pairs, save_edges
from .metrics import MetricsReport
from .sparse import topk_columns
from .trainer import VARIANTS, Config, NumericalError, align

log = logging.getLogger("globalign")

TOP_K = 30
ALIGNMENT_FILE = "alignment.txt"
METRICS_FILE = "metrics.json"
MANIFEST_FILE = "manifest.json"
TRACE_FILE = "objective_trace.txt"
BENCH_FILE = "bench.tsv"

# flags that map straight onto Config fields
CONFIG_FLAGS = {
    "variant": str,
    "alpha": float,
    "epsilon": float,
    "tau": float,
    "gamma": float,
    "topk": int,
    "dim": int,
    "heads": int,
    "max_outer": int,
    "seed": int,
}


class UsageError(Exception):
    """Bad command-line usage; reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; here 2 is reserved for numerical failure
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- config ---------------------------------------------------------------------


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment.  Dashes in keys become underscores."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config file not found: {path}")
    known = {f.name for f in fields(Config)}
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in known:
                raise InputError(f"{path}:{lineno}: unknown config key {key!r}")
            out[key] = value
    return out


def resolve_config(args) -> Config:
    """Defaults, then the config file, then explicit flags."""
    values: dict = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for name in CONFIG_FLAGS:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    try:
        return Config.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid configuration: {exc}") from None


# -- outputs ----------------------------------------------------------------------


def write_manifest(out_dir: Path, command: str, config: Config | None, inputs: dict, extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "artifact_version": __version__,
        "started": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "out_dir": str(out_dir.resolve()),
        "inputs": {k: (str(Path(v).resolve()) if v is not None else None) for k, v in inputs.items()},
        "config": config.to_dict() if config is not None else None,
    }
    if extra:
        manifest.update(extra)
    path = out_dir / MANIFEST_FILE
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def write_alignment(plan: np.ndarray, path: Path, k: int = TOP_K, chunk: int = 1024) -> None:
    """Top-``k`` targets per source row as ``src tgt probability`` lines, best first."""
    with open(path, "w") as fh:
        for lo in range(0, plan.shape[0], chunk):
            block = plan[lo : lo + chunk]
            top = topk_columns(block, k)
            for r in range(block.shape[0]):
                for c in top[r]:
                    fh.write(f"{lo + r} {c} {float(block[r, c])!r}\n")


def read_alignment(path: str | Path) -> dict[int, list[tuple[float, int]]]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"alignment file not found: {path}")
    per_source: dict[int, list[tuple[float, int]]] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                if len(parts) != 3:
                    raise ValueError
                u, v, p = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError:
                raise InputError(f"{path}:{lineno}: expected 'src tgt probability', got {line!r}") from None
            per_source.setdefault(u, []).append((p, v))
    return per_source


def ranks_from_alignment(per_source: dict, anchors: np.ndarray) -> np.ndarray:
    """Ranks within the stored lists; a target missing from the list ranks as ``inf``."""
    out = np.full(anchors.shape[0], np.inf)
    for i, (u, v) in enumerate(anchors):
        entries = sorted(per_source.get(int(u), []), key=lambda e: (-e[0], e[1]))
        for pos, (_, tgt) in enumerate(entries):
            if tgt == v:
                out[i] = pos + 1
                break
    return out


def write_trace(trace: list[float], path: Path) -> None:
    with open(path, "w") as fh:
        for i, value in enumerate(trace):
            fh.write(f"{i} {value!r}\n")


# -- commands -----------------------------------------------------------------------


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_align(args) -> int:
    config = resolve_config(args)
    out = _out_dir(args)
    inputs = {
        "source_edges": args.source_edges,
        "source_features": args.source_features,
        "target_edges": args.target_edges,
        "target_features": args.target_features,
        "anchors": args.anchors,
    }
    write_manifest(out, "align", config, inputs)
    inst = load_instance(args.source_edges, args.source_features, args.target_edges, args.target_features, args.anchors)
    result = align(inst, config)
    # back to the orientation of the input files
    plan = result.coupling.plan.T if result.swapped else result.coupling.plan
    write_alignment(plan, out / ALIGNMENT_FILE)
    write_trace(result.objective_trace, out / TRACE_FILE)
    if args.anchors is not None:
        anchors = inst.anchors[:, ::-1] if result.swapped else inst.anchors
        if anchors.shape[0] == 0:
            raise InputError(f"{args.anchors}: no anchors found")
        report = MetricsReport.compute(plan, anchors, runtime_seconds=result.wall_time)
        (out / METRICS_FILE).write_text(report.to_json())
        log.info("hits@1 %.4f  mrr %.4f", report.hits[1], report.mrr)
    log.info(
        "%d outer iterations in %.2f s (converged: %s); outputs in %s",
        len(result.objective_trace),
        result.wall_time,
        result.converged,
        out,
    )
    return 0


def cmd_perturb(args) -> int:
    if args.ratio is None or not 0.0 <= args.ratio <= 1.0:
        raise InputError(f"--ratio must lie in [0, 1], got {args.ratio}")
    seed = 0 if args.seed is None else args.seed
    out = _out_dir(args)
    write_manifest(
        out,
        "perturb",
        None,
        {"source_edges": args.source_edges, "source_features": args.source_features},
        {"ratio": args.ratio, "seed": seed},
    )
    g = load_graph(args.source_edges, args.source_features)
    p = perturb_edges(g, args.ratio, seed)
    save_edges(p.edges, out / "edges.txt")
    shutil.copyfile(args.source_features, out / "features.txt")
    with open(out / "anchors.txt", "w") as fh:
        for i in range(g.n):
            fh.write(f"{i} {i}\n")
    log.info("perturbed %d of %d edges; instance written to %s", int(np.floor(args.ratio * g.num_edges)), g.num_edges, out)
    return 0


def cmd_eval(args) -> int:
    if args.alignment is None or args.anchors is None:
        raise InputError("eval needs --alignment and --anchors")
    start = time.perf_counter()
    per_source = read_alignment(args.alignment)
    anchors = read_pairs(args.anchors)
    if anchors.shape[0] == 0:
        raise InputError(f"{args.anchors}: no anchors found")
    report = MetricsReport.from_ranks(ranks_from_alignment(per_source, anchors), time.perf_counter() - start)
    text = report.to_json()
    if args.out_dir:
        (_out_dir(args) / METRICS_FILE).write_text(text)
    sys.stdout.write(text)
    return 0


def parse_sizes(text: str) -> list[int]:
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--sizes must be a comma-separated list of integers, got {text!r}") from None
    if not sizes or any(s < 2 for s in sizes):
        raise UsageError(f"--sizes needs node counts of at least 2, got {text!r}")
    if sizes != sorted(sizes):
        raise UsageError(f"--sizes must be ascending, got {text!r}")
    return sizes


def cmd_bench(args) -> int:
    from .bench import format_table, scaling_bench

    sizes = parse_sizes(args.sizes or "")
    config = resolve_config(args)
    out = _out_dir(args) if args.out_dir else None
    if out is not None:
        write_manifest(out, "bench", config, {}, {"sizes": sizes, "iterations": args.iterations})
    rows = scaling_bench(sizes, config, iterations=args.iterations)
    table = format_table(rows)
    if out is not None:
        (out / BENCH_FILE).write_text(table)
    sys.stdout.write(table)
    return 0


# -- parser ------------------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'key = value' file; flags override it")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--alpha", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--topk", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--max-outer", dest="max_outer", type=int)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="globalign", description="Unsupervised attributed graph alignment.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("align", help="align a source graph with a target graph")
    p.add_argument("--source-edges", required=True)
    p.add_argument("--source-features", required=True)
    p.add_argument("--target-edges", required=True)
    p.add_argument("--target-features", required=True)
    p.add_argument("--anchors", help="ground-truth pairs for scoring (optional)")
    p.add_argument("--out-dir", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("perturb", help="write a perturbed copy of a graph as a benchmark instance")
    p.add_argument("--source-edges", required=True)
    p.add_argument("--source-features", required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("eval", help="re-score an alignment file against anchors")
    p.add_argument("--alignment", required=True)
    p.add_argument("--anchors", required=True)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="per-iteration scaling benchmark")
    p.add_argument("--sizes", required=True, help="comma-separated ascending node counts")
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--out-dir")
    _add_config_flags(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        from .threads import configure_threads

        configure_threads()
        return args.func(args)
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (InputError, UsageError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
