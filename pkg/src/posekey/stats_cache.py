"""In-process cache of real-image feature statistics.

Evaluating several checkpoints against the same dataset recomputes identical
real-side Gaussian statistics; this cache keeps them for the life of the
process. Keys carry the dataset hash and the feature extractor identity, so
stats never leak between datasets or extractors.

Not thread-safe; evaluation is single-writer.
"""

import os

from posekey.metrics import GaussianStats

GLOBAL = "all"
_MAX_ENTRIES = 256

_store: dict[tuple, GaussianStats] = {}


def _enabled() -> bool:
    return os.environ.get("POSEKEY_CACHE_ENABLED", "true").lower() not in ("false", "0", "no")


def get(
    dataset_hash: str, extractor_id: str, split: str, class_id: int | str = GLOBAL
) -> GaussianStats | None:
    """Return cached stats or None on miss/disabled."""
    if not _enabled():
        return None
    return _store.get((dataset_hash, extractor_id, split, class_id))


def put(
    dataset_hash: str,
    extractor_id: str,
    split: str,
    class_id: int | str,
    stats: GaussianStats,
) -> None:
    """Cache stats. Silently ignored when disabled."""
    if not _enabled():
        return
    # Oldest-first pruning keeps the store bounded
    while len(_store) >= _MAX_ENTRIES:
        del _store[next(iter(_store))]
    _store[(dataset_hash, extractor_id, split, class_id)] = stats


def clear() -> None:
    _store.clear()
