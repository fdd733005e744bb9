"""Disk caching layer for reference solutions"""

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from fnmatch import fnmatch
from functools import wraps
from pathlib import Path
from typing import Any, Callable, Dict, Optional, TypeVar, Union

from .config import cache_directory

logger = logging.getLogger(__name__)

T = TypeVar("T")

CACHE_SUFFIX = ".bin"


@dataclass
class CacheStats:
    """Hit and miss counters for reference lookups; ``hit_time_sum`` covers reading and decoding a grid"""

    hits: int = 0
    misses: int = 0
    errors: int = 0
    total_requests: int = 0
    hit_time_sum: float = 0.0
    miss_time_sum: float = 0.0
    last_reset: float = field(default_factory=time.time)

    @property
    def hit_rate(self) -> float:
        if self.total_requests == 0:
            return 0.0
        return self.hits / self.total_requests

    @property
    def miss_rate(self) -> float:
        if self.total_requests == 0:
            return 0.0
        return self.misses / self.total_requests

    @property
    def avg_hit_time(self) -> float:
        """Average time for cache hits in milliseconds"""
        if self.hits == 0:
            return 0.0
        return (self.hit_time_sum / self.hits) * 1000

    def to_dict(self) -> Dict[str, Any]:
        return {
            "hits": self.hits,
            "misses": self.misses,
            "errors": self.errors,
            "total_requests": self.total_requests,
            "hit_rate": self.hit_rate,
            "miss_rate": self.miss_rate,
            "avg_hit_time_ms": self.avg_hit_time,
            "uptime_seconds": time.time() - self.last_reset,
        }

    def reset(self):
        self.hits = 0
        self.misses = 0
        self.errors = 0
        self.total_requests = 0
        self.hit_time_sum = 0.0
        self.miss_time_sum = 0.0
        self.last_reset = time.time()


@dataclass
class CacheConfig:
    """
    Configuration for cache behavior.

    ``encode`` / ``decode`` convert between the cached value and the bytes
    stored on disk; a value that fails to decode counts as a miss.
    """

    key_prefix: str = ""
    version: str = "v1"
    encode: Callable[[Any], bytes] = field(default=lambda value: json.dumps(value).encode("utf-8"))
    decode: Callable[[bytes], Any] = field(default=lambda data: json.loads(data.decode("utf-8")))


class DiskCache:
    """One file per key under ``directory``; keys may contain ':' separators"""

    def __init__(self, directory: Optional[Union[str, Path]] = None):
        self.directory = Path(directory) if directory is not None else cache_directory()
        self.stats = CacheStats()

    @classmethod
    def from_env(cls) -> "DiskCache":
        """Create a DiskCache rooted at PINN_CACHE_DIR"""
        return cls(cache_directory())

    def _path(self, key: str) -> Path:
        safe = key.replace(":", "__").replace("/", "_")
        return self.directory / f"{safe}{CACHE_SUFFIX}"

    def _key_of(self, path: Path) -> str:
        return path.name[: -len(CACHE_SUFFIX)].replace("__", ":")

    def get(self, key: str, decode: Callable[[bytes], Any], default: Any = None) -> Any:
        """Decoded value for ``key``, or ``default`` on a miss or an unreadable file"""
        self.stats.total_requests += 1
        start_time = time.time()
        path = self._path(key)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            self.stats.misses += 1
            self.stats.miss_time_sum += time.time() - start_time
            return default
        except OSError as e:
            logger.error(f"Cache read error for key {key}: {e}")
            self.stats.errors += 1
            return default

        try:
            value = decode(data)
        except Exception as e:
            logger.warning(f"Corrupt cache entry {path.name}, treating as miss: {e}")
            self.stats.misses += 1
            self.stats.errors += 1
            return default
        self.stats.hits += 1
        self.stats.hit_time_sum += time.time() - start_time
        return value

    def set(self, key: str, data: bytes) -> bool:
        """Write ``data`` atomically (temp file + rename)"""
        path = self._path(key)
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(path.suffix + f".{os.getpid()}.tmp")
            tmp.write_bytes(data)
            os.replace(tmp, path)
            return True
        except OSError as e:
            logger.error(f"Cache set error for key {key}: {e}")
            self.stats.errors += 1
            return False

    def delete(self, key: str) -> bool:
        try:
            self._path(key).unlink()
            return True
        except FileNotFoundError:
            return False
        except OSError as e:
            logger.error(f"Cache delete error for key {key}: {e}")
            return False

    def keys(self):
        if not self.directory.is_dir():
            return []
        return sorted(self._key_of(p) for p in self.directory.glob(f"*{CACHE_SUFFIX}"))

    def delete_pattern(self, pattern: str) -> int:
        """Delete the entries whose key matches a glob such as ``oracle:ks:*``; returns how many went"""
        deleted = 0
        for key in self.keys():
            if fnmatch(key, pattern) and self.delete(key):
                deleted += 1
        return deleted

    def clear(self) -> int:
        return self.delete_pattern("*")

    def exists(self, key: str) -> bool:
        return self._path(key).is_file()

    def get_stats(self) -> CacheStats:
        return self.stats

    def reset_stats(self):
        self.stats.reset()

    def info(self) -> Dict[str, Any]:
        keys = self.keys()
        size = sum(self._path(k).stat().st_size for k in keys if self._path(k).exists())
        return {"directory": str(self.directory), "entries": len(keys), "bytes": size}


_default_cache: Optional[DiskCache] = None


def get_default_cache() -> DiskCache:
    """Process-wide cache, created lazily from the environment"""
    global _default_cache
    if _default_cache is None or _default_cache.directory != cache_directory():
        _default_cache = DiskCache.from_env()
    return _default_cache


def cache_key_generator(prefix: str, version: str = "v1", *args, **kwargs) -> str:
    """
    Key for one cached artifact, e.g. ``oracle:ks:v1:<hash>``.

    Positional arguments are joined verbatim after ``prefix`` and
    ``version``. Keyword arguments (problem fingerprint, mode count, step,
    output grid) are JSON-encoded and reduced to a 12-character digest, so a
    change to any constant or grid size gives a different key. None values
    are skipped in both.
    """
    parts = [prefix, version]

    for arg in args:
        if arg is not None:
            parts.append(str(arg))

    if kwargs:
        params = {k: v for k, v in kwargs.items() if v is not None}
        if params:
            param_str = json.dumps(params, sort_keys=True, default=str)
            # digest only shortens the key
            param_hash = hashlib.md5(param_str.encode(), usedforsecurity=False).hexdigest()[:12]
            parts.append(param_hash)

    return ":".join(parts)


def _resolve_key(config: CacheConfig, key_func: Optional[Callable], func: Callable, *args, **kwargs) -> str:
    if key_func:
        return key_func(*args, **kwargs)
    return cache_key_generator(config.key_prefix or func.__name__, config.version, *args, **kwargs)


def cache_aside(
    config: Optional[CacheConfig] = None,
    cache_instance: Optional[DiskCache] = None,
    key_func: Optional[Callable] = None,
):
    """
    Serve an expensive solver from the disk cache, computing and storing on a miss.

    ``key_func`` receives the solver's arguments and must apply the same
    defaults as the solver, so that implicit and explicit calls share a key.
    The wrapper takes ``use_cache=False`` to bypass the cache and exposes
    ``invalidate`` and ``cache_key`` with the solver's signature.
    """
    if config is None:
        config = CacheConfig()

    def decorator(func: Callable[..., T]) -> Callable[..., T]:
        @wraps(func)
        def wrapper(*args, use_cache: bool = True, **kwargs) -> T:
            cache = cache_instance or get_default_cache()
            if not use_cache:
                return func(*args, **kwargs)

            cache_key = _resolve_key(config, key_func, func, *args, **kwargs)
            start_time = time.time()
            cached_value = cache.get(cache_key, config.decode)
            if cached_value is not None:
                logger.debug(f"Cache hit for {cache_key} ({time.time() - start_time:.3f}s)")
                return cached_value

            logger.debug(f"Cache miss for {cache_key}")
            result = func(*args, **kwargs)
            if result is not None and cache.set(cache_key, config.encode(result)):
                logger.info(f"Cached {cache_key} in {cache.directory}")
            return result

        def invalidate(*args, **kwargs) -> bool:
            cache = cache_instance or get_default_cache()
            return cache.delete(_resolve_key(config, key_func, func, *args, **kwargs))

        wrapper.invalidate = invalidate
        wrapper.cache_key = lambda *args, **kwargs: _resolve_key(config, key_func, func, *args, **kwargs)
        return wrapper

    return decorator
