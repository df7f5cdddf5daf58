"""
Cache service for extracted data features
"""

import hashlib
import json
import logging
import os
import threading
from typing import Any, Dict, Optional

import numpy as np

from acseg.core.types import FeatureMatrix, Grid, Points

logger = logging.getLogger(__name__)


class FeatureCache:
    """In-memory feature cache with an optional npz directory behind it"""

    def __init__(self, cache_dir: Optional[str] = None):
        self.cache_dir = cache_dir
        self._memory_cache: Dict[str, FeatureMatrix] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        if cache_dir:
            os.makedirs(cache_dir, exist_ok=True)
            logger.info(f"Feature cache backed by {cache_dir}")

    def _generate_cache_key(self, prefix: str, data: Any) -> str:
        """Generate a cache key from data"""
        if isinstance(data, bytes):
            key_data = data
        elif isinstance(data, str):
            key_data = data.encode()
        else:
            key_data = json.dumps(data, sort_keys=True).encode()
        return f"{prefix}_{hashlib.md5(key_data).hexdigest()}"

    def feature_key(self, data: np.ndarray, fingerprint: str, extra: Any = None) -> str:
        """Key over element content, feature fingerprint and any extra inputs"""
        digest = hashlib.md5(np.ascontiguousarray(data).tobytes())
        digest.update(str(data.shape).encode())
        digest.update(fingerprint.encode())
        if extra is not None:
            digest.update(json.dumps(extra, sort_keys=True).encode())
        return self._generate_cache_key("features", digest.hexdigest())

    def _path(self, key: str) -> Optional[str]:
        return os.path.join(self.cache_dir, f"{key}.npz") if self.cache_dir else None

    def get(self, key: str) -> Optional[FeatureMatrix]:
        with self._lock:
            if key in self._memory_cache:
                self.hits += 1
                return self._memory_cache[key]
        path = self._path(key)
        if path and os.path.exists(path):
            with np.load(path) as data:
                shape = data["shape"]
                geometry = (
                    Grid(int(shape[0]), int(shape[1])) if len(shape) == 2 else Points(int(shape[0]))
                )
                matrix = FeatureMatrix(
                    data["values"], tuple(str(n) for n in data["names"]), geometry
                )
            with self._lock:
                self._memory_cache[key] = matrix
                self.hits += 1
            return matrix
        with self._lock:
            self.misses += 1
        return None

    def set(self, key: str, value: FeatureMatrix) -> None:
        with self._lock:
            self._memory_cache[key] = value
        path = self._path(key)
        if path:
            geometry = value.geometry
            if isinstance(geometry, Grid):
                shape = np.array([geometry.width, geometry.height])
            else:
                shape = np.array([geometry.n])
            np.savez_compressed(
                path, values=value.values, names=np.array(value.channel_names), shape=shape
            )

    def clear_cache(self) -> None:
        """Drop memory entries and any files in the cache directory"""
        with self._lock:
            self._memory_cache.clear()
        if self.cache_dir and os.path.isdir(self.cache_dir):
            for name in os.listdir(self.cache_dir):
                if name.startswith("features_") and name.endswith(".npz"):
                    os.remove(os.path.join(self.cache_dir, name))

    def get_cache_stats(self) -> Dict[str, Any]:
        return {
            "type": "disk" if self.cache_dir else "memory",
            "total_keys": len(self._memory_cache),
            "hits": self.hits,
            "misses": self.misses,
        }
