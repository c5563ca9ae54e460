"""Small shared helpers: deterministic seeding, hashing, worker pools."""
import hashlib
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, List, Optional, TypeVar, Union

T = TypeVar("T")
R = TypeVar("R")

logger = logging.getLogger(__name__)

JOBS_ENV_VAR = "COSP_JOBS"


def stable_int_from_strings(*parts: str) -> int:
    """Generate deterministic integer from string inputs for reproducible randomness."""
    combined = "|".join(str(p) for p in parts)
    digest = hashlib.md5(combined.encode("utf-8")).hexdigest()
    return int(digest[:8], 16)


def derived_seed(seed: int, *parts: str) -> int:
    """Sub-seed for one stage/tile/image, independent of execution order."""
    return stable_int_from_strings(str(seed), *parts)


def file_sha256(path: Union[str, Path], chunk_size: int = 1 << 20) -> str:
    """Hex digest of a file's contents."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while True:
            block = f.read(chunk_size)
            if not block:
                break
            h.update(block)
    return h.hexdigest()


def resolve_jobs(cli_jobs: Optional[int], config_jobs: Optional[int] = None) -> int:
    """
    Worker count: --jobs wins over COSP_JOBS, which wins over the config.

    Returns:
        A positive worker count (default 1)
    """
    if cli_jobs is not None:
        return max(1, int(cli_jobs))
    env = os.getenv(JOBS_ENV_VAR)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            logger.warning(f"Ignoring non-integer {JOBS_ENV_VAR}={env!r}")
    if config_jobs is not None:
        return max(1, int(config_jobs))
    return 1


def parallel_map(func: Callable[[T], R], items: Iterable[T], jobs: int = 1) -> List[R]:
    """Map func over items with up to `jobs` threads; results keep input order."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(func, items))
