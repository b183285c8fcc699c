"""Checkpoint files: a text manifest, a separator line, then raw float32 values.

    domadapt-checkpoint 1
    step 1200
    config {"d_model": 64, ...}
    tensor embed 1000 64
    tensor enc.0.ln1.gamma 64
    ...
    sha256 <hex digest of the binary section>
    ---
    <little-endian float32, row-major, tensors in manifest order>
"""
import hashlib
import json
import logging
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from pydantic import ValidationError

from apps.decoding.schemas import CheckpointSet
from apps.model.schemas import ModelConfig, ModelParams
from core.exceptions import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = "domadapt-checkpoint"
FORMAT_VERSION = 1
SEPARATOR = b"---\n"
STORAGE_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    step: int
    config: ModelConfig
    arrays: "OrderedDict[str, np.ndarray]"

    def params(self, requires_grad: bool = False) -> ModelParams:
        return ModelParams.from_arrays(self.config, self.arrays, requires_grad=requires_grad)


def _to_storage(name: str, array: np.ndarray) -> np.ndarray:
    stored = np.ascontiguousarray(array, dtype=STORAGE_DTYPE)
    if array.dtype != np.float32 and not np.array_equal(stored.astype(array.dtype), array):
        logger.warning(f"Tensor '{name}' ({array.dtype}) loses precision when stored as float32")
    return stored


def encode_checkpoint(step: int, config: ModelConfig, arrays: "OrderedDict[str, np.ndarray]") -> bytes:
    stored = [(name, _to_storage(name, a)) for name, a in arrays.items()]
    body = b"".join(a.tobytes(order="C") for _, a in stored)
    lines = [
        f"{MAGIC} {FORMAT_VERSION}",
        f"step {step}",
        f"config {config.model_dump_json()}",
    ]
    for name, a in stored:
        lines.append(" ".join(["tensor", name] + [str(d) for d in a.shape]))
    lines.append(f"sha256 {hashlib.sha256(body).hexdigest()}")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    return header + SEPARATOR + body


def _parse_header(header: str, source: str) -> Tuple[int, ModelConfig, List[Tuple[str, Tuple[int, ...]]], str]:
    lines = header.splitlines()
    if not lines or lines[0] != f"{MAGIC} {FORMAT_VERSION}":
        raise CheckpointError(f"{source}: not a version {FORMAT_VERSION} checkpoint")
    step, config, digest = None, None, None
    layout: List[Tuple[str, Tuple[int, ...]]] = []
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        try:
            if key == "step":
                step = int(rest)
            elif key == "config":
                config = ModelConfig(**json.loads(rest))
            elif key == "tensor":
                fields = rest.split()
                layout.append((fields[0], tuple(int(d) for d in fields[1:])))
            elif key == "sha256":
                digest = rest.strip()
            else:
                raise CheckpointError(f"{source}: unknown manifest line '{key}'")
        except (ValueError, IndexError, ValidationError) as e:
            raise CheckpointError(f"{source}: malformed manifest line '{line[:60]}': {e}") from e
    if step is None or config is None or digest is None or not layout:
        raise CheckpointError(f"{source}: manifest is incomplete")
    return step, config, layout, digest


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    marker = b"\n" + SEPARATOR
    cut = blob.find(marker)
    if cut < 0:
        raise CheckpointError(f"{source}: missing manifest separator")
    try:
        header = blob[: cut + 1].decode("utf-8")
    except UnicodeDecodeError as e:
        raise CheckpointError(f"{source}: manifest is not UTF-8") from e
    body = blob[cut + len(marker) :]
    step, config, layout, digest = _parse_header(header, source)

    if hashlib.sha256(body).hexdigest() != digest:
        raise CheckpointError(f"{source}: checksum mismatch, the file is corrupt")
    expected = sum(int(np.prod(shape, dtype=np.int64)) for _, shape in layout) * STORAGE_DTYPE.itemsize
    if len(body) != expected:
        raise CheckpointError(f"{source}: binary section has {len(body)} bytes, manifest implies {expected}")

    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    offset = 0
    for name, shape in layout:
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(body, dtype=STORAGE_DTYPE, count=count, offset=offset)
        arrays[name] = values.reshape(shape).astype(np.float32)
        offset += count * STORAGE_DTYPE.itemsize
    return Checkpoint(step=step, config=config, arrays=arrays)


def save_checkpoint(path: Union[str, Path], step: int, config: ModelConfig, arrays: "OrderedDict[str, np.ndarray]") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(step, config, arrays))
    logger.info(f"Checkpoint written: {path} (step {step})")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), source=str(path))


def checkpoint_name(step: int) -> str:
    return f"step-{step:06d}.ckpt"


def save_checkpoint_set(directory: Union[str, Path], config: ModelConfig, checkpoints: CheckpointSet) -> List[Path]:
    return [
        save_checkpoint(Path(directory) / checkpoint_name(step), step, config, snapshot)
        for step, snapshot in zip(checkpoints.steps, checkpoints.snapshots)
    ]


def load_checkpoint_set(directory: Union[str, Path]) -> Tuple[ModelConfig, CheckpointSet]:
    """Every step checkpoint under `directory`, in step order; configs must agree."""
    paths = sorted(Path(directory).glob("step-*.ckpt"))
    if not paths:
        raise CheckpointError(f"no checkpoints under {directory}")
    loaded = sorted((load_checkpoint(p) for p in paths), key=lambda c: c.step)
    config = loaded[0].config
    checkpoints = CheckpointSet()
    for ckpt in loaded:
        if ckpt.config != config:
            raise CheckpointError(f"checkpoints under {directory} disagree on the model config: {config.diff(ckpt.config)}")
        checkpoints.add(ckpt.step, ckpt.arrays)
    return config, checkpoints
