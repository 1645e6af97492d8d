"""Thread-count control shared by the CLI and benchmark workers."""

from __future__ import annotations

import logging
import os

import numba
from threadpoolctl import threadpool_limits

log = logging.getLogger(__name__)

ENV_VAR = "GLOBALIGN_THREADS"


def configure_threads(count: int | None = None) -> int:
    """Cap numba and BLAS threads; ``0`` or unset means all cores.

    Falls back to the ``GLOBALIGN_THREADS`` environment variable when
    ``count`` is None.  Returns the effective numba thread count.
    """
    if count is None:
        raw = os.environ.get(ENV_VAR, "0").strip() or "0"
        try:
            count = int(raw)
        except ValueError:
            raise ValueError(f"{ENV_VAR} must be an integer, got {raw!r}") from None
    if count < 0:
        raise ValueError(f"thread count must be non-negative, got {count}")
    available = numba.config.NUMBA_NUM_THREADS
    effective = available if count == 0 else min(count, available)
    numba.set_num_threads(effective)
    if count > 0:
        threadpool_limits(limits=effective)
    log.debug("using %d threads", effective)
    return effective
