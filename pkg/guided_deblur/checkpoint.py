"""
DBLF チェックポイント形式

  b"DBLF" | u32 version | u32 len | 設定テキスト（UTF-8, 正準形）
  以降 EOF までレコードの繰り返し:
    u32 名前長 | 名前（UTF-8）| u32 rank | u32 × rank の各次元 | f32 データ
すべてリトルエンディアン。名前には analysis. / synthesis. / classifier. の接頭辞が付く。
"""

import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import DecodeError
from .layers import Network

logger = logging.getLogger(__name__)

MAGIC = b"DBLF"
FORMAT_VERSION = 1


class Checkpoint(BaseModel):
    """設定テキストと名前付きパラメータ"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    version: int = Field(default=FORMAT_VERSION)
    config_text: str = Field(default="", description="RunConfig の正準テキスト")
    params: dict[str, np.ndarray] = Field(default_factory=dict)

    @classmethod
    def from_networks(cls, config_text: str, *networks: Network) -> "Checkpoint":
        params: dict[str, np.ndarray] = {}
        for net in networks:
            for name, value in net.state().items():
                params[name] = np.array(value, dtype=np.float32, copy=True)
        return cls(config_text=config_text, params=params)

    def has(self, prefix: str) -> bool:
        return any(name.startswith(prefix) for name in self.params)

    def apply_to(self, net: Network) -> None:
        """net.prefix の付いたパラメータだけを読み込む"""
        net.load_state({k: v for k, v in self.params.items() if k.startswith(net.prefix)})

    def encode(self) -> bytes:
        config_bytes = self.config_text.encode("utf-8")
        chunks = [MAGIC, struct.pack("<II", self.version, len(config_bytes)), config_bytes]
        for name, value in self.params.items():
            name_bytes = name.encode("utf-8")
            array = np.asarray(value, dtype="<f4")
            chunks.append(struct.pack("<I", len(name_bytes)))
            chunks.append(name_bytes)
            chunks.append(struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape))
            chunks.append(np.ascontiguousarray(array).tobytes())
        return b"".join(chunks)

    @classmethod
    def decode(cls, data: bytes, path: str | None = None) -> "Checkpoint":
        if data[:4] != MAGIC:
            raise DecodeError("not a DBLF checkpoint (bad magic)", path)
        offset = 4

        def take(size: int) -> bytes:
            nonlocal offset
            if offset + size > len(data):
                raise DecodeError(f"truncated checkpoint at byte {offset}", path)
            chunk = data[offset : offset + size]
            offset += size
            return chunk

        version, config_len = struct.unpack("<II", take(8))
        if version != FORMAT_VERSION:
            raise DecodeError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})", path)
        config_text = take(config_len).decode("utf-8")
        params: dict[str, np.ndarray] = {}
        while offset < len(data):
            (name_len,) = struct.unpack("<I", take(4))
            name = take(name_len).decode("utf-8")
            if name in params:
                raise DecodeError(f"duplicate parameter name {name!r}", path)
            (rank,) = struct.unpack("<I", take(4))
            shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
            count = int(np.prod(shape)) if shape else 1
            params[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        return cls(version=version, config_text=config_text, params=params)

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.encode())
        tmp.replace(path)
        logger.info(f"Saved checkpoint {path} ({len(self.params)} tensors)")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        path = Path(path)
        try:
            data = path.read_bytes()
        except OSError as e:
            raise DecodeError(f"cannot read checkpoint: {e}", str(path)) from e
        return cls.decode(data, str(path))
