"""
生成済みカーネルの永続キャッシュ（カーネルバンク）

キーは (軌跡設定, seed, index) の param_hash。値は BKRN 形式のバイト列なので、
ヒット時はビット単位で同じカーネルが返る。
"""

import hashlib
import json
import logging
from typing import Any, Dict

from sqlitedict import SqliteDict

from .blur_sim import BlurKernel, TrajectoryConfig, decode_kernel, encode_kernel, kernel_for

logger = logging.getLogger(__name__)


def param_hash(params: Dict[str, Any]) -> str:
    s = json.dumps(params, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(s.encode("utf-8")).hexdigest()


class SimpleSqliteCache:
    """シンプルなキー完全一致キャッシュ"""

    def __init__(self, db_path: str):
        self.db_path = db_path
        self.db = SqliteDict(self.db_path, autocommit=True)

    def get(self, key: str):
        return self.db.get(key, None)

    def set(self, key: str, value: Any):
        self.db[key] = value

    def __len__(self) -> int:
        return len(self.db)

    def close(self):
        self.db.close()


class KernelBank:
    """(設定, seed, index) → カーネルのキャッシュ付き生成器"""

    def __init__(self, db_path: str):
        self._cache = SimpleSqliteCache(db_path)
        self.hits = 0
        self.misses = 0

    @staticmethod
    def cache_key(config: TrajectoryConfig, seed: int, index: int, stream: int = 0, attempt: int = 0) -> str:
        return param_hash(
            {
                "trajectory": config.model_dump(),
                "seed": int(seed),
                "index": int(index),
                "stream": int(stream),
                "attempt": int(attempt),
            }
        )

    def get_or_create(
        self, config: TrajectoryConfig, seed: int, index: int, stream: int = 0, attempt: int = 0
    ) -> BlurKernel:
        key = self.cache_key(config, seed, index, stream, attempt)
        cached = self._cache.get(key)
        if cached is not None:
            self.hits += 1
            logger.debug(f"KernelBank HIT: {key[:12]}")
            return decode_kernel(cached, self._cache.db_path)
        self.misses += 1
        logger.debug(f"KernelBank MISS: {key[:12]}")
        kernel = kernel_for(config, seed, index, stream, attempt)
        self._cache.set(key, encode_kernel(kernel))
        return kernel

    def __len__(self) -> int:
        return len(self._cache)

    def close(self) -> None:
        self._cache.close()

    def __enter__(self) -> "KernelBank":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
