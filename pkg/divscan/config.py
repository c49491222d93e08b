"""
Runtime defaults for divscan

All numeric defaults used by the CLI and the library live here.
DIVSCAN_THREADS caps the worker pools (0 = auto).
"""

import os
from dataclasses import dataclass

from .errors import ValidationError

TOOL_VERSION = "1.0.0"

DEFAULT_GRID_STEP = 0.01
DEFAULT_CLAMP_EPS = 1e-6
DEFAULT_RANK_TOL = 1e-12
DEFAULT_MINIBATCH = 600
MAX_AUTO_THREADS = 8


@dataclass(frozen=True)
class Settings:
    grid_step: float = DEFAULT_GRID_STEP
    clamp_eps: float = DEFAULT_CLAMP_EPS
    rank_tol: float = DEFAULT_RANK_TOL
    threads: int = 0
    tool_version: str = TOOL_VERSION

    @classmethod
    def from_env(cls) -> "Settings":
        """Build settings, honouring DIVSCAN_THREADS when it is set"""
        raw = os.environ.get("DIVSCAN_THREADS", "").strip()
        if not raw:
            return cls()
        try:
            threads = int(raw)
        except ValueError:
            raise ValidationError(f"DIVSCAN_THREADS must be an integer, got {raw!r}")
        if threads < 0:
            raise ValidationError(f"DIVSCAN_THREADS must be >= 0, got {threads}")
        return cls(threads=threads)


def worker_count(settings: Settings = None) -> int:
    """Number of threads for per-layer work"""
    settings = settings or Settings.from_env()
    if settings.threads > 0:
        return settings.threads
    return max(1, min(MAX_AUTO_THREADS, os.cpu_count() or 1))
