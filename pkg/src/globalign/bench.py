"""Per-iteration scaling benchmark on synthetic constant-degree instances.

Every (variant, size) pair runs in a fresh spawned process so that peak
resident memory is measured per run and an out-of-memory kill ends only
that measurement.
"""

from __future__ import annotations

import logging
import multiprocessing as mp
import resource
import statistics
from dataclasses import dataclass, replace

from .graph import random_graph, self_copy_instance
from .trainer import Config, align

log = logging.getLogger(__name__)

DEFAULT_DEGREE = 6
DEFAULT_FEATURES = 32
DEFAULT_PERTURBATION = 0.1


@dataclass
class BenchRow:
    n: int
    variant: str
    seconds_per_iter: float  # median over the timed iterations; nan unless status is "ok"
    peak_mb: float
    setup_seconds: float = 0.0
    status: str = "ok"  # ok | oom | skipped | error


def bench_instance(n: int, seed: int, average_degree: float = DEFAULT_DEGREE, feature_dim: int = DEFAULT_FEATURES):
    """Random graph paired with a 10%-perturbed copy of itself."""
    g = random_graph(n, average_degree, seed=seed, feature_dim=feature_dim)
    return self_copy_instance(g, DEFAULT_PERTURBATION, seed=seed + 1)


def _peak_mb() -> float:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0  # kilobytes on Linux


def measure(n: int, config: Config, iterations: int, average_degree: float = DEFAULT_DEGREE) -> BenchRow:
    """Time ``iterations`` outer iterations in the current process."""
    inst = bench_instance(n, config.seed, average_degree)
    result = align(inst, config, max_iterations=iterations)
    return BenchRow(
        n=n,
        variant=config.variant,
        seconds_per_iter=statistics.median(result.iteration_seconds),
        peak_mb=_peak_mb(),
        setup_seconds=result.setup_seconds,
    )


def _worker(queue, n, config_dict, iterations, average_degree):
    from .threads import configure_threads

    configure_threads()
    try:
        queue.put(("ok", measure(n, Config.from_dict(config_dict), iterations, average_degree)))
    except MemoryError:
        queue.put(("oom", _peak_mb()))
    except Exception as exc:  # reported to the parent, which records the failure
        queue.put(("error", f"{type(exc).__name__}: {exc}"))


def _isolated(n: int, config: Config, iterations: int, average_degree: float) -> BenchRow:
    ctx = mp.get_context("spawn")
    queue = ctx.Queue()
    proc = ctx.Process(target=_worker, args=(queue, n, config.to_dict(), iterations, average_degree))
    proc.start()
    msg = None
    while msg is None:
        try:
            msg = queue.get(timeout=1.0)
        except Exception:
            if not proc.is_alive():
                break
    proc.join()
    if msg is None:
        # killed without reporting back: the kernel's OOM killer sends SIGKILL
        status = "oom" if proc.exitcode in (-9, 137) else "error"
        log.warning("bench worker for n=%d exited with code %s", n, proc.exitcode)
        return BenchRow(n, config.variant, float("nan"), float("nan"), status=status)
    kind, payload = msg
    if kind == "ok":
        return payload
    if kind == "oom":
        return BenchRow(n, config.variant, float("nan"), payload, status="oom")
    log.warning("bench run n=%d failed: %s", n, payload)
    return BenchRow(n, config.variant, float("nan"), float("nan"), status="error")


def scaling_bench(
    sizes,
    config: Config,
    iterations: int = 10,
    average_degree: float = DEFAULT_DEGREE,
    isolate: bool = True,
) -> list[BenchRow]:
    """One row per size for ``config.variant``.

    After an out-of-memory failure the larger sizes are recorded as skipped.
    """
    sizes = [int(s) for s in sizes]
    if not sizes:
        raise ValueError("no sizes given")
    if any(s < 2 for s in sizes):
        raise ValueError("sizes must be at least 2")
    if sizes != sorted(sizes):
        raise ValueError(f"sizes must be sorted ascending, got {sizes}")
    if iterations < 1:
        raise ValueError("iterations must be positive")
    config = replace(config)
    rows: list[BenchRow] = []
    out_of_memory = False
    for n in sizes:
        if out_of_memory:
            rows.append(BenchRow(n, config.variant, float("nan"), float("nan"), status="skipped"))
            continue
        if isolate:
            row = _isolated(n, config, iterations, average_degree)
        else:
            try:
                row = measure(n, config, iterations, average_degree)
            except MemoryError:
                row = BenchRow(n, config.variant, float("nan"), _peak_mb(), status="oom")
        log.info("bench %s n=%d: %.4g s/iter, %.1f MB (%s)", config.variant, n, row.seconds_per_iter, row.peak_mb, row.status)
        out_of_memory = row.status == "oom"
        rows.append(row)
    return rows


def format_table(rows: list[BenchRow]) -> str:
    """Tab-separated table with a header row; failed sizes carry their status."""
    lines = ["n\tseconds_per_iter\tpeak_mb"]
    for r in rows:
        if r.status == "ok":
            lines.append(f"{r.n}\t{r.seconds_per_iter:.6g}\t{r.peak_mb:.1f}")
        else:
            lines.append(f"{r.n}\t{r.status}\t{r.status}")
    return "\n".join(lines) + "\n"
