import logging
import os
import sys
import time
from contextlib import contextmanager

import numpy as np

logger = logging.getLogger(__name__)


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    """Uniform in ±sqrt(1/fan_in)."""
    bound = np.sqrt(1.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def configure_logging(level=None):
    """Send log records to stderr so stdout stays machine-readable."""
    level = level or os.getenv("STN_LOG_LEVEL", "INFO")
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, str(level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


@contextmanager
def timed(label: str):
    """Log how long the wrapped block took."""
    start = time.perf_counter()
    yield
    logger.info("%s in %.4f seconds", label, time.perf_counter() - start)
