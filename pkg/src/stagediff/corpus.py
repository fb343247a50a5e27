"""Training corpora: a synthetic blob generator and PNG-directory loading.

The synthetic corpus needs no external data: each sample is a dark
background with one to three soft Gaussian bumps of random per-channel
color plus a gentle linear color gradient, clamped to [-1, 1].  Images
from disk are center-cropped square, resized, and scaled to [-1, 1].
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image


def _uniform(g: torch.Generator, shape, lo: float, hi: float) -> torch.Tensor:
    return lo + (hi - lo) * torch.rand(*shape, generator=g)


def blob_corpus(n: int, size: int, seed: int, channels: int = 3) -> torch.Tensor:
    """Deterministic (n, channels, size, size) corpus for the given seed."""
    if n < 1 or size < 2:
        raise ValueError(f"bad corpus spec: n={n}, size={size}")
    g = torch.Generator().manual_seed(seed)
    bg = _uniform(g, (n, channels), -0.8, -0.4)
    n_blobs = torch.randint(1, 4, (n,), generator=g)
    centers = _uniform(g, (n, 3, 2), 0.15, 0.85) * size
    radii = _uniform(g, (n, 3), 0.10, 0.22) * size
    amps = _uniform(g, (n, 3, channels), 0.2, 1.1)
    grads = _uniform(g, (n, channels, 2), -0.1, 0.1)

    yy, xx = torch.meshgrid(
        torch.arange(size, dtype=torch.float32),
        torch.arange(size, dtype=torch.float32),
        indexing="ij",
    )
    field = bg[:, :, None, None].expand(n, channels, size, size).clone()
    for j in range(3):
        active = (n_blobs > j).float()[:, None, None, None]
        d2 = (xx - centers[:, j, 0, None, None]) ** 2 + (yy - centers[:, j, 1, None, None]) ** 2
        bump = torch.exp(-d2 / (2.0 * radii[:, j, None, None] ** 2))
        field = field + active * amps[:, j, :, None, None] * bump[:, None]
    u = xx / size - 0.5
    v = yy / size - 0.5
    field = field + grads[:, :, 0, None, None] * u + grads[:, :, 1, None, None] * v
    return field.clamp(-1.0, 1.0)


def load_image(path: Path, size: int) -> torch.Tensor:
    """One image as a (3, size, size) tensor in [-1, 1]."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        w, h = img.size
        side = min(w, h)
        left, top = (w - side) // 2, (h - side) // 2
        img = img.crop((left, top, left + side, top + side))
        img = img.resize((size, size), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(np.moveaxis(arr, -1, 0).copy())


def load_image_dir(path: Path, size: int) -> torch.Tensor:
    files = sorted(
        p for p in Path(path).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )
    if not files:
        raise ValueError(f"no images found in {path}")
    return torch.stack([load_image(p, size) for p in files])


def build_corpus(source: str, seed: int, size: int, channels: int = 3) -> torch.Tensor:
    """Materialise a corpus from its config descriptor.

    ``blobs,n=2048,size=32`` draws the synthetic corpus; ``dir:<path>``
    ingests an image directory.  The corpus is validated against the
    configured stage-0 size.
    """
    if source.startswith("dir:"):
        data = load_image_dir(Path(source[4:]), size)
    elif source.startswith("blobs"):
        opts = {"n": 2048, "size": size}
        for part in source.split(",")[1:]:
            key, _, val = part.partition("=")
            if key.strip() not in opts:
                raise ValueError(f"unknown corpus option {key!r}")
            opts[key.strip()] = int(val)
        if opts["size"] != size:
            raise ValueError(
                f"corpus size {opts['size']} disagrees with configured size {size}"
            )
        data = blob_corpus(opts["n"], opts["size"], seed, channels)
    else:
        raise ValueError(f"unknown corpus source {source!r}")
    if data.shape[1] != channels:
        raise ValueError(f"corpus has {data.shape[1]} channels, config wants {channels}")
    return data
