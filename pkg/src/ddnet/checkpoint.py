"""Self-describing checkpoint files.

Layout: an ASCII header (magic line, the configuration text, one line per
array giving name, dtype, dims, byte offset and length), a blank line, then
the little-endian array payload. Writing is deterministic, so identical
models produce identical bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .config import TrainConfig, config_from_text, config_to_text
from .model import DDNet, build

MAGIC = "DDNET-CHECKPOINT 1"


class CheckpointError(Exception):
    """The checkpoint is unreadable or does not fit the model."""


def model_arrays(model: DDNet) -> Dict[str, np.ndarray]:
    arrays = {name: p.data for name, p in model.named_parameters()}
    arrays.update(model.named_buffers())
    return arrays


def dumps(model: DDNet, cfg: TrainConfig) -> bytes:
    arrays = model_arrays(model)
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        dims = ",".join(str(d) for d in arr.shape)
        entries.append(f"array {name} {arr.dtype.newbyteorder('<').str} {dims} {offset} {len(data)}")
        blobs.append(data)
        offset += len(data)
    # the blank line is reserved as the header terminator
    config_lines = [ln for ln in config_to_text(cfg).split("\n") if ln.strip()]
    header = [MAGIC, f"config {len(config_lines)}"] + config_lines + [f"arrays {len(entries)}"] + entries
    return ("\n".join(header) + "\n\n").encode("ascii") + b"".join(blobs)


def save(path, model: DDNet, cfg: TrainConfig) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(dumps(model, cfg))


def _parse(raw: bytes) -> Tuple[TrainConfig, Dict[str, np.ndarray]]:
    split = raw.find(b"\n\n")
    if split < 0:
        raise CheckpointError("missing header terminator")
    try:
        lines = raw[:split].decode("ascii").split("\n")
    except UnicodeDecodeError:
        raise CheckpointError("header is not ASCII") from None
    payload = memoryview(raw)[split + 2:]
    if not lines or lines[0] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    try:
        n_cfg = int(lines[1].split()[1])
        cfg = config_from_text("\n".join(lines[2:2 + n_cfg]))
        n_arr = int(lines[2 + n_cfg].split()[1])
        arrays = {}
        for line in lines[3 + n_cfg:3 + n_cfg + n_arr]:
            _, name, dtype, dims, off, length = line.split(" ")
            shape = tuple(int(d) for d in dims.split(",")) if dims else ()
            off, length = int(off), int(length)
            if off + length > len(payload):
                raise CheckpointError(f"array {name} runs past the end of the file")
            arrays[name] = np.frombuffer(payload[off:off + length], dtype=np.dtype(dtype)).reshape(shape)
    except (IndexError, ValueError) as exc:
        raise CheckpointError(f"malformed header: {exc}") from None
    return cfg, arrays


def load(path, dtype=np.float32) -> Tuple[DDNet, TrainConfig]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from None
    cfg, arrays = _parse(raw)
    model = build(cfg.model, seed=cfg.seed, dtype=dtype)
    load_into(model, arrays)
    model.eval()
    return model, cfg


def load_into(model: DDNet, arrays: Dict[str, np.ndarray]) -> None:
    expected = model_arrays(model)
    if set(expected) != set(arrays):
        diff = sorted(set(expected) ^ set(arrays))
        raise CheckpointError(f"checkpoint does not match the model: {', '.join(diff[:5])}")
    params = dict(model.named_parameters())
    for name, arr in arrays.items():
        target = expected[name]
        if target.shape != arr.shape:
            raise CheckpointError(f"{name}: checkpoint dims {arr.shape} vs model {target.shape}")
        if name in params:
            params[name].data = arr.astype(target.dtype)
        else:
            target[...] = arr
