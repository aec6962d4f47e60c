"""Process-level runtime knobs.

CSUNET_THREADS controls the BLAS thread pool backing numpy: unset or 0 means
single-thread deterministic mode (reductions get a fixed association order),
any positive N allows N threads. Applied once per process.
"""

from __future__ import annotations

import os

from threadpoolctl import threadpool_limits

_controller = None


def configure_threads(env=None):
    """Apply the CSUNET_THREADS policy; returns the thread count in force."""
    global _controller
    raw = (env if env is not None else os.environ).get("CSUNET_THREADS", "0")
    try:
        requested = int(raw)
    except ValueError:
        raise ValueError(f"CSUNET_THREADS must be an integer, got {raw!r}") from None
    limit = 1 if requested <= 0 else requested
    _controller = threadpool_limits(limits=limit)
    return limit
