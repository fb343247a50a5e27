"""Binary tensor formats, image output, and atomic file writes.

Raw tensors: magic ``FDMT``, u32 version, u32 rank, u64 dims, then
little-endian 32-bit floats in row-major order.

Checkpoints: magic ``FDMC``, u32 version, the config hash and canonical
config text (for compatibility checks and resume diffs), then named
tensors, each stored as a u16-length name, u32 rank, u64 dims, and f32
payload.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch
from PIL import Image

TENSOR_MAGIC = b"FDMT"
CHECKPOINT_MAGIC = b"FDMC"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def atomic_write(path: Path, data: bytes):
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pack_tensor(t: torch.Tensor) -> bytes:
    arr = t.detach().cpu().to(torch.float32).numpy()
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.astype("<f4").tobytes(order="C")


def _unpack_tensor(buf: memoryview, off: int) -> tuple[torch.Tensor, int]:
    (rank,) = struct.unpack_from("<I", buf, off)
    off += 4
    dims = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    count = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims)
    off += 4 * count
    return torch.from_numpy(arr.copy()), off


def write_tensor(path: Path, t: torch.Tensor):
    data = TENSOR_MAGIC + struct.pack("<I", FORMAT_VERSION) + _pack_tensor(t)
    atomic_write(path, data)


def read_tensor(path: Path) -> torch.Tensor:
    buf = memoryview(Path(path).read_bytes())
    if bytes(buf[:4]) != TENSOR_MAGIC:
        raise CheckpointError(f"{path}: not a raw tensor file")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    t, _ = _unpack_tensor(buf, 8)
    return t


def write_checkpoint(
    path: Path, config_hash: str, config_text: str, tensors: dict[str, torch.Tensor]
):
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for blob in (config_hash.encode(), config_text.encode()):
        parts.append(struct.pack("<I", len(blob)))
        parts.append(blob)
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(_pack_tensor(tensors[name]))
    atomic_write(path, b"".join(parts))


def read_checkpoint(path: Path) -> tuple[str, str, dict[str, torch.Tensor]]:
    buf = memoryview(Path(path).read_bytes())
    if bytes(buf[:4]) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 8
    blobs = []
    for _ in range(2):
        (ln,) = struct.unpack_from("<I", buf, off)
        off += 4
        blobs.append(bytes(buf[off : off + ln]).decode())
        off += ln
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = bytes(buf[off : off + ln]).decode()
        off += ln
        tensors[name], off = _unpack_tensor(buf, off)
    return blobs[0], blobs[1], tensors


def to_image(t: torch.Tensor) -> Image.Image:
    """Map a (C, H, W) tensor from [-1, 1] to an 8-bit image."""
    arr = t.detach().cpu().float().clamp(-1.0, 1.0).numpy()
    arr = np.round((arr + 1.0) * 127.5).astype(np.uint8)
    if arr.shape[0] == 1:
        return Image.fromarray(arr[0], mode="L")
    return Image.fromarray(np.moveaxis(arr[:3], 0, -1), mode="RGB")


def write_png(path: Path, t: torch.Tensor):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    to_image(t).save(path, format="PNG")


def contact_sheet(path: Path, batch: torch.Tensor, pad: int = 2):
    """Tile a (N, C, H, W) batch into one grid image."""
    n, _, h, w = batch.shape
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    sheet = Image.new("RGB", (cols * (w + pad) - pad, rows * (h + pad) - pad), (0, 0, 0))
    for i in range(n):
        r, c = divmod(i, cols)
        sheet.paste(to_image(batch[i]).convert("RGB"), (c * (w + pad), r * (h + pad)))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sheet.save(path, format="PNG")


def write_json(path: Path, payload: dict):
    atomic_write(Path(path), json.dumps(payload, indent=2, sort_keys=True).encode())
