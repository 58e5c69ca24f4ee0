"""Process-wide determinism controls: seeding and the numeric precision mode.

``fixed`` mode pins torch to one thread and deterministic kernels so repeated
runs are bit-identical; ``fast`` mode frees the thread pool for throughput.
"""

import os
import random

import numpy as np
import torch

PRECISION_ENV = "GLORE_MTL_PRECISION"
PRECISION_MODES = ("fixed", "fast")


def seed_everything(seed: int) -> None:
    """Seed the stdlib, numpy, and torch generators from one integer."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def resolve_precision(mode: str | None = None) -> str:
    """Pick the precision mode: explicit argument, else env var, else fixed."""
    mode = mode or os.environ.get(PRECISION_ENV) or "fixed"
    if mode not in PRECISION_MODES:
        raise ValueError(
            f"precision mode must be one of {PRECISION_MODES}, got {mode!r}"
        )
    return mode


def apply_precision(mode: str | None = None) -> str:
    mode = resolve_precision(mode)
    if mode == "fixed":
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    else:
        torch.set_num_threads(max(1, os.cpu_count() or 1))
        torch.use_deterministic_algorithms(False)
    return mode
