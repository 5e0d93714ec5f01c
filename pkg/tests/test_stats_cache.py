import os
from unittest.mock import patch

import numpy as np

from posekey import stats_cache
from posekey.metrics import GaussianStats

DATASET = "a" * 64
EXTRACTOR = "posture-classifier:aaaaaaaaaaaa"


def _stats(value: float = 0.0) -> GaussianStats:
    return GaussianStats(np.full(2, value), np.eye(2))


class TestStatsCacheModule:
    def test_get_returns_none_on_empty_cache(self):
        assert stats_cache.get(DATASET, EXTRACTOR, "eval") is None

    def test_put_then_get(self):
        stats = _stats(1.0)
        stats_cache.put(DATASET, EXTRACTOR, "eval", 3, stats)
        assert stats_cache.get(DATASET, EXTRACTOR, "eval", 3) is stats

    def test_global_key_is_default(self):
        stats_cache.put(DATASET, EXTRACTOR, "eval", stats_cache.GLOBAL, _stats())
        assert stats_cache.get(DATASET, EXTRACTOR, "eval") is not None

    def test_keys_are_isolated(self):
        stats_cache.put(DATASET, EXTRACTOR, "eval", 0, _stats())
        assert stats_cache.get("b" * 64, EXTRACTOR, "eval", 0) is None
        assert stats_cache.get(DATASET, "other", "eval", 0) is None
        assert stats_cache.get(DATASET, EXTRACTOR, "train", 0) is None
        assert stats_cache.get(DATASET, EXTRACTOR, "eval", 1) is None

    def test_clear(self):
        stats_cache.put(DATASET, EXTRACTOR, "eval", 0, _stats())
        stats_cache.clear()
        assert stats_cache.get(DATASET, EXTRACTOR, "eval", 0) is None

    def test_bounded(self):
        for i in range(stats_cache._MAX_ENTRIES + 5):
            stats_cache.put(DATASET, EXTRACTOR, "eval", i, _stats())
        assert len(stats_cache._store) == stats_cache._MAX_ENTRIES
        assert stats_cache.get(DATASET, EXTRACTOR, "eval", 0) is None
        assert stats_cache.get(DATASET, EXTRACTOR, "eval", stats_cache._MAX_ENTRIES + 4)


class TestCacheDisabled:
    def test_disabled_put_is_noop(self):
        with patch.dict(os.environ, {"POSEKEY_CACHE_ENABLED": "false"}):
            stats_cache.put(DATASET, EXTRACTOR, "eval", 0, _stats())
        assert stats_cache._store == {}

    def test_disabled_get_misses(self):
        stats_cache.put(DATASET, EXTRACTOR, "eval", 0, _stats())
        with patch.dict(os.environ, {"POSEKEY_CACHE_ENABLED": "0"}):
            assert stats_cache.get(DATASET, EXTRACTOR, "eval", 0) is None
