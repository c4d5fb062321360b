"""
Checkpoint Manager for saving and restoring network parameters
A checkpoint is one binary file: a versioned header, the serialized
BackboneConfig and every parameter tensor as little-endian float64 data.

Layout (all integers little-endian):
    magic      8 bytes  b"STYLCKPT"
    version    u32      CHECKPOINT_VERSION
    config     u32 length + UTF-8 JSON of the BackboneConfig fields
    name       u32 length + UTF-8
    epoch      u32
    count      u32      number of parameter records
    per record:
        name   u16 length + UTF-8
        ndim   u8
        dims   u32 x ndim
        data   f64 x product(dims), C order
The file holds no timestamps, so identical runs write identical bytes.
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Optional

import numpy as np
from pydantic import ValidationError

from app.errors import CheckpointError
from app.network import BackboneConfig, StylizeNet

logger = logging.getLogger(__name__)

MAGIC = b"STYLCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    """Represents a saved set of network parameters"""
    name: str
    config: BackboneConfig
    epoch: int
    params: dict[str, np.ndarray] = field(default_factory=dict)
    path: Optional[Path] = None

    def parameter_count(self) -> int:
        return sum(int(a.size) for a in self.params.values())


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def _unpack(f: BinaryIO, fmt: str, what: str) -> tuple:
    return struct.unpack(fmt, _read_exact(f, struct.calcsize(fmt), what))


class CheckpointManager:
    """
    Writes and reads checkpoint files, and keeps the checkpoints saved during
    this process in order so the latest one can be restored.
    """

    def __init__(self):
        self.checkpoints: list[Checkpoint] = []

    def save_checkpoint(
        self,
        net: StylizeNet,
        path: str | Path,
        name: Optional[str] = None,
        epoch: int = 0,
    ) -> Checkpoint:
        """
        Save the network's current parameters to ``path``.

        Args:
            net: Network to save
            path: Output file
            name: Optional name; defaults to the file stem
            epoch: Number of completed training epochs

        Returns:
            The created Checkpoint object

        Raises:
            CheckpointError: If the file cannot be written
        """
        path = Path(path)
        checkpoint = Checkpoint(
            name=name or path.stem,
            config=net.config,
            epoch=epoch,
            params={k: t.data.copy() for k, t in net.parameters().items()},
            path=path,
        )
        config_bytes = json.dumps(checkpoint.config.model_dump(), sort_keys=True).encode("utf-8")
        name_bytes = checkpoint.name.encode("utf-8")

        chunks = [
            MAGIC,
            struct.pack("<I", CHECKPOINT_VERSION),
            struct.pack("<I", len(config_bytes)),
            config_bytes,
            struct.pack("<I", len(name_bytes)),
            name_bytes,
            struct.pack("<II", epoch, len(checkpoint.params)),
        ]
        for key, array in checkpoint.params.items():
            key_bytes = key.encode("utf-8")
            chunks.append(struct.pack("<H", len(key_bytes)))
            chunks.append(key_bytes)
            chunks.append(struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape))
            chunks.append(np.ascontiguousarray(array, dtype="<f8").tobytes())

        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(b"".join(chunks))
        except OSError as e:
            raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e

        logger.info("Saved checkpoint %s (epoch %d) to %s", checkpoint.name, epoch, path)
        self.checkpoints.append(checkpoint)
        return checkpoint

    def read_checkpoint(self, path: str | Path) -> Checkpoint:
        """
        Parse a checkpoint file without building a network.

        Raises:
            CheckpointError: On unreadable files, bad magic, unsupported
                versions, truncation, or an invalid embedded config
        """
        path = Path(path)
        try:
            with path.open("rb") as f:
                checkpoint = self._parse(f)
                if f.read(1):
                    raise CheckpointError("trailing bytes after last parameter")
        except OSError as e:
            raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
        except CheckpointError as e:
            raise CheckpointError(f"{path}: {e}") from e
        checkpoint.path = path
        return checkpoint

    def _parse(self, f: BinaryIO) -> Checkpoint:
        if _read_exact(f, len(MAGIC), "magic") != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        (version,) = _unpack(f, "<I", "version")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )
        (config_len,) = _unpack(f, "<I", "config length")
        try:
            config = BackboneConfig(**json.loads(_read_exact(f, config_len, "config")))
        except (ValueError, ValidationError) as e:
            raise CheckpointError(f"invalid embedded config: {e}") from e
        (name_len,) = _unpack(f, "<I", "name length")
        name = _read_exact(f, name_len, "name").decode("utf-8")
        epoch, count = _unpack(f, "<II", "header")

        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            (key_len,) = _unpack(f, "<H", "parameter name length")
            key = _read_exact(f, key_len, "parameter name").decode("utf-8")
            (ndim,) = _unpack(f, "<B", f"{key} rank")
            dims = _unpack(f, f"<{ndim}I", f"{key} shape")
            n = int(np.prod(dims, dtype=np.int64))
            raw = _read_exact(f, 8 * n, f"{key} data")
            params[key] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
        return Checkpoint(name=name, config=config, epoch=epoch, params=params)

    def restore_checkpoint(self, path: str | Path) -> StylizeNet:
        """
        Build a network from the checkpoint's embedded config and load its parameters.

        Raises:
            CheckpointError: If the file is unusable or its parameters do not
                fit the embedded config
        """
        checkpoint = self.read_checkpoint(path)
        net = StylizeNet(checkpoint.config)
        try:
            net.load_arrays(checkpoint.params)
        except ValueError as e:
            raise CheckpointError(f"{path}: parameters do not match config ({e})") from e
        logger.debug("Restored %s (epoch %d) from %s", checkpoint.name, checkpoint.epoch, path)
        return net

    def get_latest_checkpoint(self) -> Optional[Checkpoint]:
        """Get the most recently saved checkpoint"""
        if not self.checkpoints:
            return None
        return self.checkpoints[-1]
