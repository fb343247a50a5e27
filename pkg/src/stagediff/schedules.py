"""Stage boundaries, rescaled noise schedules, and the patch-based SNR.

Diffusion time [0, 1] is split into K+1 stages by boundaries
tau_0 = 0 < tau_1 < ... < tau_{K+1} = 1.  The base signal/noise pair is
the cosine schedule alpha_t = cos(pi t / 2), sigma_t = sin(pi t / 2).
Each stage k carries an accumulated rescale factor r_k = r_{k-1} /
sqrt(d_k * gamma_k), where d_k is the dimension ratio across boundary k
and gamma_k the signal-power ratio.  SP mode rescales the noise only
(alpha, r_k * sigma); VP mode renormalises so alpha^2 + sigma^2 = 1.

All evaluation is closed-form; schedules are immutable values and safe
to share between threads.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import torch

ALPHA_FLOOR = 1e-6


class StageKind(str, Enum):
    LINEAR = "linear"
    COSINE = "cosine"


class RescaleMode(str, Enum):
    NONE = "none"
    SP = "sp"
    VP = "vp"


@dataclass(frozen=True)
class StageSchedule:
    """Boundaries tau_0..tau_{K+1} of the K+1 diffusion stages."""

    K: int
    tau: tuple[float, ...]
    kind: StageKind

    def __post_init__(self):
        if self.K < 0:
            raise ValueError(f"stage count must be non-negative, got {self.K}")
        if len(self.tau) != self.K + 2:
            raise ValueError(f"expected {self.K + 2} boundaries, got {len(self.tau)}")
        if self.tau[0] != 0.0 or self.tau[-1] != 1.0:
            raise ValueError("boundaries must start at 0 and end at 1 exactly")
        if any(b <= a for a, b in zip(self.tau, self.tau[1:])):
            raise ValueError("boundaries must be strictly increasing")

    def width(self, k: int) -> float:
        return self.tau[k + 1] - self.tau[k]


def build_stage_schedule(K: int, kind: StageKind) -> StageSchedule:
    """Linear boundaries k/(K+1), or cosine cos((pi/2)(1 - k/(K+1))).

    The cosine form front-loads stage changes: early (coarse) stages are
    short in diffusion time, later ones long.
    """
    kind = StageKind(kind)
    if K < 0:
        raise ValueError(f"stage count must be non-negative, got {K}")
    if kind is StageKind.LINEAR:
        tau = [k / (K + 1) for k in range(K + 2)]
    else:
        tau = [math.cos(0.5 * math.pi * (1.0 - k / (K + 1))) for k in range(K + 2)]
    tau[0], tau[-1] = 0.0, 1.0  # cos(pi/2) is ~6e-17, not 0; pin the endpoints
    return StageSchedule(K=K, tau=tuple(tau), kind=kind)


def stage_of(s: StageSchedule, t: float) -> int:
    """Index k with tau_k <= t < tau_{k+1}; t = 1 closes into stage K."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"time {t} outside [0, 1]")
    return min(bisect.bisect_right(s.tau, t) - 1, s.K)


@dataclass(frozen=True)
class NoiseSchedule:
    """Base cosine schedule with per-stage accumulated rescale factors."""

    stage_sched: StageSchedule
    rescale: tuple[float, ...]
    mode: RescaleMode

    def __post_init__(self):
        if len(self.rescale) != self.stage_sched.K + 1:
            raise ValueError("need one rescale factor per stage")
        if self.rescale[0] != 1.0:
            raise ValueError("stage-0 rescale factor must be 1")
        if any(r <= 0 for r in self.rescale):
            raise ValueError("rescale factors must be positive")


def build_noise_schedule(
    s: StageSchedule,
    dims: Sequence[int],
    gammas: Sequence[float],
    mode: RescaleMode,
) -> NoiseSchedule:
    """Accumulate r_k = r_{k-1} / sqrt(d_k * gamma_k) over the boundaries.

    ``dims`` are the flat sizes M_0..M_K and must be non-increasing;
    ``gammas`` are the K positive signal-power ratios.
    """
    mode = RescaleMode(mode)
    if len(dims) != s.K + 1:
        raise ValueError(f"expected {s.K + 1} stage sizes, got {len(dims)}")
    if len(gammas) != s.K:
        raise ValueError(f"expected {s.K} gamma values, got {len(gammas)}")
    if any(d <= 0 for d in dims):
        raise ValueError("stage sizes must be positive")
    if any(b > a for a, b in zip(dims, dims[1:])):
        raise ValueError("stage sizes must be non-increasing")
    if any(g <= 0 for g in gammas):
        raise ValueError("gamma values must be positive")
    r = [1.0]
    for k in range(1, s.K + 1):
        d_k = dims[k - 1] / dims[k]
        r.append(r[-1] / math.sqrt(d_k * gammas[k - 1]))
    return NoiseSchedule(stage_sched=s, rescale=tuple(r), mode=mode)


def eval_alpha_sigma(ns: NoiseSchedule, t: float, stage: int | None = None) -> tuple[float, float]:
    """(alpha_t, sigma_t) at time t.

    ``stage`` pins the rescale factor; pass the lower stage at a boundary
    to get the left limit (schedules are continuous inside a stage and
    jump across boundaries).
    """
    if stage is None:
        stage = stage_of(ns.stage_sched, t)
    else:
        tau = ns.stage_sched.tau
        if not (0 <= stage <= ns.stage_sched.K and tau[stage] <= t <= tau[stage + 1]):
            raise ValueError(f"time {t} not in closure of stage {stage}")
    a = math.cos(0.5 * math.pi * t)
    b = math.sin(0.5 * math.pi * t)
    if ns.mode is RescaleMode.NONE:
        return a, b
    s = ns.rescale[stage] * b
    if ns.mode is RescaleMode.SP:
        return a, s
    n = math.hypot(a, s)
    return a / n, s / n


def alpha_floor_time(ns: NoiseSchedule, stage: int, floor: float = ALPHA_FLOOR) -> float:
    """Largest t in stage's closure with alpha(t) >= floor (bisection)."""
    lo = ns.stage_sched.tau[stage]
    hi = ns.stage_sched.tau[stage + 1]
    if eval_alpha_sigma(ns, hi, stage)[0] >= floor:
        return hi
    if eval_alpha_sigma(ns, lo, stage)[0] < floor:
        raise ValueError(f"alpha below {floor} on all of stage {stage}")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if eval_alpha_sigma(ns, mid, stage)[0] >= floor:
            lo = mid
        else:
            hi = mid
    return lo


def transition_coeffs(
    ns: NoiseSchedule, s: float, t: float, stage: int | None = None
) -> tuple[float, float]:
    """Within-stage transition pair (alpha_{t|s}, sigma_{t|s}).

    alpha_{t|s} = alpha_t / alpha_s and sigma^2_{t|s} = sigma_t^2 -
    alpha_{t|s}^2 sigma_s^2 (clamped at 0 for fp residue).  Both times
    must lie in the closure of one stage; t = tau_{k+1} evaluates at the
    left limit.  Crossing a boundary is the resampling operator's job,
    not a transition.
    """
    if s > t:
        raise ValueError(f"need s <= t, got s={s}, t={t}")
    if stage is None:
        stage = stage_of(ns.stage_sched, s)
    if t > ns.stage_sched.tau[stage + 1]:
        raise ValueError(
            f"times {s}, {t} span a stage boundary (stage {stage} ends at "
            f"{ns.stage_sched.tau[stage + 1]})"
        )
    a_s, s_s = eval_alpha_sigma(ns, s, stage)
    a_t, s_t = eval_alpha_sigma(ns, t, stage)
    a_ts = a_t / a_s
    var = max(0.0, s_t**2 - a_ts**2 * s_s**2)
    return a_ts, math.sqrt(var)


@dataclass(frozen=True)
class PatchSpec:
    """Patch footprint for the resolution-agnostic SNR.

    ``patch_extent`` is the per-axis patch size expressed at the
    reference resolution ``data_range`` (a (C, H, W) shape whose values
    live in [-1, 1]).  At a coarser sampling rate the footprint shrinks
    by the resolution ratio so that it always covers the same portion of
    the underlying field.
    """

    patch_extent: tuple[int, int]
    data_range: tuple[int, int, int]

    def __post_init__(self):
        ph, pw = self.patch_extent
        _, h, w = self.data_range
        if ph < 1 or pw < 1:
            raise ValueError("patch extent must be at least one element")
        if h % ph or w % pw:
            raise ValueError("patch extent must tile the reference grid evenly")

    def extent_at(self, shape: Sequence[int]) -> tuple[int, int]:
        """Patch extent on a grid of the given (..., H, W) shape."""
        h, w = int(shape[-2]), int(shape[-1])
        _, h0, w0 = self.data_range
        if h0 % h or w0 % w:
            raise ValueError(f"grid {h}x{w} is not an even reduction of {h0}x{w0}")
        rh, rw = h0 // h, w0 // w
        ph, pw = self.patch_extent
        if ph % rh or pw % rw:
            raise ValueError(
                f"patch {ph}x{pw} is below the resolution limit at grid {h}x{w}"
            )
        return ph // rh, pw // rw


def _patch_power(x: torch.Tensor, extent: tuple[int, int]) -> float:
    """Mean over patches (and any leading axes) of |patch mean|^2.

    The norm runs over channels: each patch contributes the squared
    norm of its per-channel spatial means.
    """
    ph, pw = extent
    h, w = x.shape[-2], x.shape[-1]
    xp = x.reshape(*x.shape[:-2], h // ph, ph, w // pw, pw)
    means = xp.mean(dim=(-3, -1))  # (..., C, H/ph, W/pw)
    sq = means.pow(2).sum(dim=-3)  # channel norm
    return float(sq.mean())


def patch_snr(signal: torch.Tensor, noise: torch.Tensor, spec: PatchSpec, stage: int) -> float:
    """Patch-averaged signal power over patch-averaged noise power.

    Both tensors carry the stage's (C, H, W) shape, optionally with
    leading sample axes that are folded into the expectation (useful for
    Monte-Carlo noise draws).  A patch's footprint is fixed relative to
    the underlying field, so the estimate is invariant to the sampling
    rate.  Returns ``inf`` when the noise power vanishes.
    """
    if signal.shape[-3:] != noise.shape[-3:]:
        raise ValueError(
            f"signal {tuple(signal.shape)} and noise {tuple(noise.shape)} "
            "disagree on the stage shape"
        )
    try:
        extent = spec.extent_at(signal.shape)
    except ValueError as err:
        raise ValueError(f"stage {stage}: {err}") from None
    s_pow = _patch_power(signal, extent)
    n_pow = _patch_power(noise, extent)
    if n_pow == 0.0:
        return math.inf
    return s_pow / n_pow
