"""Forward transformation stacks, their lossy inverses, and stage targets.

A stack holds f_1..f_K (stage 0 is the identity) together with inverse
maps g running one stage back up.  Composing f's progressively destroys
information: 2x2 box-average reduction (``ds``), reduce-then-upsample
blurring (``blur_u``), frequency-domain Gaussian blurring (``blur_g``),
or a least-squares linear autoencoder into a small latent
(``linear_ae``).  Stacks are immutable after construction; every
operation is pure and accepts arbitrary leading batch axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

import numpy as np
import scipy.fft
import torch
import torch.nn.functional as F

from .schedules import StageSchedule, stage_of


class TransformKind(str, Enum):
    DS = "ds"
    BLUR_U = "blur_u"
    BLUR_G = "blur_g"
    LINEAR_AE = "linear_ae"


@dataclass(frozen=True)
class LinearAutoencoder:
    """Principal-subspace encoder/decoder pair, fitted once and frozen."""

    mean: torch.Tensor  # (M0,)
    basis: torch.Tensor  # (M0, m), orthonormal columns
    image_shape: tuple[int, int, int]
    latent_shape: tuple[int, int, int]

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        lead = x.shape[: -len(self.image_shape)]
        flat = x.reshape(*lead, -1) - self.mean
        z = flat @ self.basis
        return z.reshape(*lead, *self.latent_shape)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        lead = z.shape[: -len(self.latent_shape)]
        flat = z.reshape(*lead, -1)
        x = flat @ self.basis.T + self.mean
        return x.reshape(*lead, *self.image_shape)


def fit_linear_autoencoder(
    samples: torch.Tensor, latent_shape: tuple[int, int, int]
) -> LinearAutoencoder:
    """Least-squares linear autoencoder via SVD of the centered samples.

    The top-m right singular vectors span the subspace minimising the
    reconstruction error, so decode(encode(x)) is the optimal linear
    projection of x.
    """
    n = samples.shape[0]
    m = int(np.prod(latent_shape))
    image_shape = tuple(samples.shape[1:])
    flat = samples.reshape(n, -1).to(torch.float64)
    if n < m:
        raise ValueError(f"need at least {m} samples to fit a rank-{m} subspace, got {n}")
    mean = flat.mean(dim=0)
    centered = (flat - mean).numpy()
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    basis = torch.from_numpy(vt[:m].T.copy()).to(torch.float32)
    return LinearAutoencoder(
        mean=mean.to(torch.float32),
        basis=basis,
        image_shape=image_shape,
        latent_shape=tuple(latent_shape),
    )


@dataclass(frozen=True)
class TransformStack:
    """The transformation chain with per-stage shapes and power ratios."""

    kind: TransformKind
    shapes: tuple[tuple[int, int, int], ...]
    gammas: tuple[float, ...]
    blur_sigmas: tuple[float, ...] | None = None
    ae: LinearAutoencoder | None = None

    def __post_init__(self):
        sizes = self.flat_sizes
        if any(b > a for a, b in zip(sizes, sizes[1:])):
            raise ValueError("stage sizes must be non-increasing")
        if len(self.gammas) != self.K:
            raise ValueError(f"expected {self.K} gamma values, got {len(self.gammas)}")

    @property
    def K(self) -> int:
        return len(self.shapes) - 1

    @property
    def flat_sizes(self) -> tuple[int, ...]:
        return tuple(int(np.prod(s)) for s in self.shapes)

    def dim_ratio(self, k: int) -> float:
        """d_k = M_{k-1} / M_k across boundary k (1 <= k <= K)."""
        return self.flat_sizes[k - 1] / self.flat_sizes[k]


def _spatial_op(x: torch.Tensor, op) -> torch.Tensor:
    """Apply a 4-D (N, C, H, W) operator under arbitrary leading axes."""
    lead = x.shape[:-3]
    out = op(x.reshape(-1, *x.shape[-3:]))
    return out.reshape(*lead, *out.shape[-3:])


def box_downsample(x: torch.Tensor) -> torch.Tensor:
    """Factor-2 reduction by 2x2 block averages."""
    return _spatial_op(x, lambda y: F.avg_pool2d(y, kernel_size=2))


def bilinear_upsample(x: torch.Tensor) -> torch.Tensor:
    """Factor-2 bilinear expansion."""
    return _spatial_op(
        x,
        lambda y: F.interpolate(y, scale_factor=2, mode="bilinear", align_corners=False),
    )


def blur_sigma(ss: StageSchedule, k: int) -> float:
    """Gaussian blur width 15 sin^2((pi/2) tau_k) for stage k."""
    if not 0 <= k <= ss.K + 1:
        raise ValueError(f"stage {k} out of range")
    return 15.0 * math.sin(0.5 * math.pi * ss.tau[k]) ** 2


def gaussian_blur_freq(x: torch.Tensor, sigma_b: float) -> torch.Tensor:
    """Gaussian blur applied in the cosine-transform domain.

    Each channel is transformed, coefficient (i, j) is scaled by
    exp(-(pi^2 sigma^2 / 2)((i/H)^2 + (j/W)^2)) -- the transfer function
    of a continuous Gaussian under Neumann boundaries -- and transformed
    back.  Exact DC preservation, never amplifies any coefficient.
    """
    if sigma_b < 0:
        raise ValueError(f"blur width must be non-negative, got {sigma_b}")
    if sigma_b == 0:
        return x.clone()
    arr = x.detach().cpu().numpy().astype(np.float64)
    h, w = arr.shape[-2], arr.shape[-1]
    coeffs = scipy.fft.dctn(arr, type=2, norm="ortho", axes=(-2, -1))
    i = (np.arange(h) / h) ** 2
    j = (np.arange(w) / w) ** 2
    decay = np.exp(-0.5 * math.pi**2 * sigma_b**2 * (i[:, None] + j[None, :]))
    out = scipy.fft.idctn(coeffs * decay, type=2, norm="ortho", axes=(-2, -1))
    return torch.as_tensor(out, dtype=x.dtype, device=x.device)


def _check_stage_shape(ts: TransformStack, x: torch.Tensor, k: int):
    if tuple(x.shape[-3:]) != ts.shapes[k]:
        raise ValueError(
            f"tensor shape {tuple(x.shape[-3:])} does not match stage-{k} "
            f"shape {ts.shapes[k]}"
        )


def forward_step(ts: TransformStack, x: torch.Tensor, k: int) -> torch.Tensor:
    """Apply f_{k+1}: map a stage-k tensor to stage k+1."""
    if not 0 <= k < ts.K:
        raise ValueError(f"no forward step out of stage {k}")
    _check_stage_shape(ts, x, k)
    if ts.kind is TransformKind.DS:
        return box_downsample(x)
    if ts.kind is TransformKind.BLUR_U:
        y = x
        for _ in range(k + 1):
            y = box_downsample(y)
        for _ in range(k + 1):
            y = bilinear_upsample(y)
        return y
    if ts.kind is TransformKind.BLUR_G:
        lo, hi = ts.blur_sigmas[k], ts.blur_sigmas[k + 1]
        # widths compose in quadrature, so the increment lands exactly on hi
        return gaussian_blur_freq(x, math.sqrt(hi**2 - lo**2))
    return ts.ae.encode(x)


def forward_to_stage(ts: TransformStack, x: torch.Tensor, k: int) -> torch.Tensor:
    """f_{0:k}(x): compose the first k transformations of the stack."""
    if not 0 <= k <= ts.K:
        raise ValueError(f"stage {k} out of range")
    _check_stage_shape(ts, x, 0)
    y = x
    for j in range(k):
        y = forward_step(ts, y, j)
    return y


def g_map(ts: TransformStack, xk: torch.Tensor, k: int) -> torch.Tensor:
    """Lossy inverse: map a stage-k tensor back to stage k-1."""
    if not 1 <= k <= ts.K:
        raise ValueError(f"no inverse map into stage {k - 1}")
    _check_stage_shape(ts, xk, k)
    if ts.kind is TransformKind.DS:
        return bilinear_upsample(xk)
    if ts.kind in (TransformKind.BLUR_U, TransformKind.BLUR_G):
        return xk
    return ts.ae.decode(xk)


def stage_endpoint(ts: TransformStack, xk: torch.Tensor, k: int) -> torch.Tensor:
    """The degraded target a stage interpolates toward: g(f_{k+1}(x^k))."""
    return g_map(ts, forward_step(ts, xk, k), k + 1)


def interpolated_target(
    ts: TransformStack, ss: StageSchedule, x: torch.Tensor, t: float | torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Diffusion mean x_t and degradation delta_t at time t.

    Inside stage k the mean slides linearly from x^k (at tau_k) to its
    degraded endpoint (at tau_{k+1}); delta_t = x^k - x_t is what the
    interpolation has destroyed so far.  The last stage has no endpoint
    to move toward, so delta is identically zero there.

    ``t`` may be a scalar or a 1-D tensor aligned with x's batch axis;
    all entries must fall in one stage.
    """
    if isinstance(t, torch.Tensor):
        stages = {stage_of(ss, float(v)) for v in t}
        if len(stages) != 1:
            raise ValueError("batched times must share one stage")
        (k,) = stages
        frac = torch.as_tensor(
            [(float(v) - ss.tau[k]) / ss.width(k) for v in t], dtype=x.dtype
        ).reshape(-1, *([1] * (x.dim() - 1)))
    else:
        k = stage_of(ss, t)
        frac = (t - ss.tau[k]) / ss.width(k)
    xk = forward_to_stage(ts, x, k)
    if k == ts.K:
        return xk, torch.zeros_like(xk)
    endpoint = stage_endpoint(ts, xk, k)
    x_t = frac * endpoint + (1.0 - frac) * xk
    return x_t, xk - x_t


def estimate_gamma(
    ts: TransformStack, dataset: Iterable[torch.Tensor] | torch.Tensor, k: int
) -> float:
    """Signal-power ratio across boundary k, estimated from data.

    gamma_k = E|g(x^k)|^2 / E|x^k|^2 with |.|^2 the mean squared element,
    so the dimension ratio and the power ratio stay separate factors.
    """
    if k < 1 or k > ts.K:
        raise ValueError(f"boundary {k} out of range")
    if isinstance(dataset, torch.Tensor):
        dataset = [dataset]
    num = den = 0.0
    count = 0
    for batch in dataset:
        if batch.dim() == 3:
            batch = batch[None]
        xk = forward_to_stage(ts, batch, k)
        approx_prev = g_map(ts, xk, k)
        num += float(approx_prev.pow(2).mean(dim=(-3, -2, -1)).sum())
        den += float(xk.pow(2).mean(dim=(-3, -2, -1)).sum())
        count += batch.shape[0]
    if count == 0:
        raise ValueError("cannot estimate gamma from an empty dataset")
    if den == 0.0:
        raise ValueError("stage signal power is zero; gamma undefined")
    return num / den


def _validate_spatial(shape: tuple[int, int, int], K: int):
    _, h, w = shape
    if h % (1 << K) or w % (1 << K):
        raise ValueError(f"{h}x{w} grid does not survive {K} factor-2 reductions")


def make_downsample_stack(shape: tuple[int, int, int], K: int) -> TransformStack:
    _validate_spatial(shape, K)
    c, h, w = shape
    shapes = tuple((c, h >> k, w >> k) for k in range(K + 1))
    return TransformStack(TransformKind.DS, shapes, gammas=(1.0,) * K)


def make_blur_u_stack(shape: tuple[int, int, int], K: int) -> TransformStack:
    _validate_spatial(shape, K)
    return TransformStack(TransformKind.BLUR_U, (shape,) * (K + 1), gammas=(1.0,) * K)


def make_blur_g_stack(shape: tuple[int, int, int], ss: StageSchedule) -> TransformStack:
    sigmas = tuple(blur_sigma(ss, k) for k in range(ss.K + 1))
    return TransformStack(
        TransformKind.BLUR_G, (shape,) * (ss.K + 1), gammas=(1.0,) * ss.K, blur_sigmas=sigmas
    )


def make_autoencoder_stack(
    ae: LinearAutoencoder, gamma: float | None = None, fit_set: torch.Tensor | None = None
) -> TransformStack:
    """Two-stage stack around a fitted autoencoder.

    The power ratio is either given or estimated from ``fit_set``.
    """
    shapes = (ae.image_shape, ae.latent_shape)
    if gamma is None:
        if fit_set is None:
            raise ValueError("need either a gamma value or data to estimate it from")
        probe = TransformStack(TransformKind.LINEAR_AE, shapes, gammas=(1.0,), ae=ae)
        gamma = estimate_gamma(probe, fit_set, 1)
    return TransformStack(TransformKind.LINEAR_AE, shapes, gammas=(float(gamma),), ae=ae)
