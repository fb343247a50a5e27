"""Double-prediction denoiser: one trunk, per-shape adapters.

The network reads a latent plus its (time, stage) conditioning and
predicts the injected noise and the signal degradation jointly.  A small
two-level convolutional encoder/decoder is shared across stages; each
distinct stage shape gets its own 1x1 input/output adapter pair, and the
stage index is embedded alongside time so equal-shape stages stay
distinguishable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .schedules import ALPHA_FLOOR, NoiseSchedule, alpha_floor_time, eval_alpha_sigma
from .diffusion import LatentState


@dataclass(frozen=True)
class DenoiserOutput:
    eps_pred: torch.Tensor
    delta_pred: torch.Tensor


def sinusoidal_embedding(x: torch.Tensor, dim: int) -> torch.Tensor:
    """Sin/cos features at geometrically spaced frequencies, 1 to 1000."""
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(1000.0), half, dtype=x.dtype))
    ang = x[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


def _shape_key(shape) -> str:
    return "x".join(str(int(v)) for v in shape)


class Denoiser(nn.Module):
    """Two-level conv trunk with additive (t, k) conditioning.

    Output adapters start at zero so an untrained model predicts
    (0, 0) for every input.
    """

    def __init__(
        self,
        stage_shapes,
        base_channels: int = 32,
        mid_channels: int = 48,
        emb_dim: int = 64,
    ):
        super().__init__()
        self.stage_shapes = tuple(tuple(s) for s in stage_shapes)
        self.emb_dim = emb_dim
        cb, cm = base_channels, mid_channels
        self.in_adapters = nn.ModuleDict()
        self.out_adapters = nn.ModuleDict()
        for shape in self.stage_shapes:
            key = _shape_key(shape)
            if key in self.in_adapters:
                continue
            c = shape[0]
            self.in_adapters[key] = nn.Conv2d(c, cb, kernel_size=1)
            out = nn.Conv2d(cb, 2 * c, kernel_size=1)
            nn.init.zeros_(out.weight)
            nn.init.zeros_(out.bias)
            self.out_adapters[key] = out
        self.cond = nn.Sequential(
            nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, cb)
        )
        self.enc1 = nn.Conv2d(cb, cb, kernel_size=3, padding=1)
        self.enc2 = nn.Conv2d(cb, cm, kernel_size=3, padding=1)
        self.mid = nn.Conv2d(cm, cm, kernel_size=3, padding=1)
        self.up = nn.Conv2d(cm, cb, kernel_size=3, padding=1)
        self.dec = nn.Conv2d(cb, cb, kernel_size=3, padding=1)

    def forward(self, z: torch.Tensor, t: torch.Tensor, k: int) -> tuple[torch.Tensor, torch.Tensor]:
        key = _shape_key(z.shape[-3:])
        if key not in self.in_adapters:
            raise ValueError(f"no adapter registered for stage shape {key}")
        squeeze = z.dim() == 3
        if squeeze:
            z = z[None]
        if not isinstance(t, torch.Tensor):
            t = torch.full((z.shape[0],), float(t), dtype=z.dtype)
        t = t.to(z.dtype)
        if t.dim() == 0:
            t = t[None].expand(z.shape[0])
        half = self.emb_dim // 2
        kv = torch.full_like(t, float(k))
        emb = torch.cat(
            [sinusoidal_embedding(t, half), sinusoidal_embedding(kv, half)], dim=-1
        )
        cond = self.cond(emb)[:, :, None, None]
        h = F.silu(self.in_adapters[key](z)) + cond
        h1 = F.silu(self.enc1(h))
        h2 = F.silu(self.enc2(F.avg_pool2d(h1, kernel_size=2)))
        h2 = F.silu(self.mid(h2))
        h3 = F.silu(self.up(F.interpolate(h2, scale_factor=2, mode="bilinear", align_corners=False)))
        h = F.silu(self.dec(h3 + h1))
        out = self.out_adapters[key](h)
        c = z.shape[-3]
        eps, delta = out[:, :c], out[:, c:]
        if squeeze:
            eps, delta = eps[0], delta[0]
        return eps, delta

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def predict(p: Denoiser, z: LatentState) -> DenoiserOutput:
    """Run the denoiser on one latent state: (eps, delta), both z-shaped."""
    with torch.no_grad():
        eps, delta = p(z.z, z.t, z.k)
    return DenoiserOutput(eps_pred=eps, delta_pred=delta)


def x_from_eps(
    ns: NoiseSchedule,
    z: LatentState,
    eps_pred: torch.Tensor,
    t_override: float | None = None,
) -> torch.Tensor:
    """Invert the marginal: (z - sigma_t eps) / alpha_t.

    Near t = 1 the signal coefficient vanishes; when alpha drops below
    the floor the evaluation time is clamped to keep the inversion
    finite.  ``t_override`` substitutes the schedule-evaluation time
    (the sampler's first step passes t - dt/2).
    """
    times = z.t if isinstance(z.t, torch.Tensor) else [z.t]
    coeffs = []
    for ti in times:
        t_eval = float(ti) if t_override is None else float(t_override)
        a, s = eval_alpha_sigma(ns, t_eval, z.k)
        if a < ALPHA_FLOOR:
            t_eval = alpha_floor_time(ns, z.k)
            a, s = eval_alpha_sigma(ns, t_eval, z.k)
        coeffs.append((a, s))
    if len(coeffs) == 1:
        a, s = coeffs[0]
        return (z.z - s * eps_pred) / a
    shape = (-1, *([1] * (z.z.dim() - 1)))
    a = torch.as_tensor([c[0] for c in coeffs], dtype=z.z.dtype).reshape(shape)
    s = torch.as_tensor([c[1] for c in coeffs], dtype=z.z.dtype).reshape(shape)
    return (z.z - s * eps_pred) / a
