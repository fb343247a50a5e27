"""Reverse-time generation: unified DDPM/DDIM stepping across stages.

Starting from the coarsest-stage slice of a pre-sampled hierarchical
noise, each stage runs inner denoising steps on a per-stage uniform time
grid (snapped so every boundary is a grid point), then crosses its lower
boundary by mapping the predicted signal up with g and re-expanding the
predicted noise with the boundary-inverse resampler.  With eta = 0 a
trajectory is a pure function of (seed, config, parameters).

Conditioning replaces the denoised output with a given stage-k tensor at
the boundary opening that stage, refined by a few gradient steps on the
reconstruction error before diffusion resumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .denoiser import Denoiser, x_from_eps
from .diffusion import (
    BoundaryMode,
    FullNoise,
    LatentState,
    boundary_reverse,
    reverse_posterior,
    sample_full_noise,
)
from .schedules import ALPHA_FLOOR, NoiseSchedule, StageSchedule, eval_alpha_sigma
from .transforms import TransformStack, g_map


class TrajectoryError(RuntimeError):
    pass


@dataclass(frozen=True)
class CondSpec:
    """Conditioning input: a stage-k tensor plus gradient-init settings."""

    x_c: torch.Tensor
    stage: int
    step_size: float = 0.1
    init_steps: int = 20
    T: float | None = None  # derived from the stage boundary when None


@dataclass(frozen=True)
class SamplerConfig:
    eta: float = 1.0
    dt: float = 0.004
    seed: int = 0
    boundary_mode: BoundaryMode = BoundaryMode.DROP
    cond: CondSpec | None = None

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        steps = 1.0 / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError(f"1/dt must be an integer step count, got dt={self.dt}")


def time_grid(ss: StageSchedule, dt: float) -> list[list[float]]:
    """Per-stage ascending grids with every boundary an exact grid point.

    Each stage is subdivided uniformly into round(width / dt) steps (at
    least one), so the nominal step count is preserved while boundaries
    are always landed on exactly.
    """
    grids = []
    for k in range(ss.K + 1):
        lo, hi = ss.tau[k], ss.tau[k + 1]
        n = max(1, round((hi - lo) / dt))
        pts = [lo + (hi - lo) * j / n for j in range(n + 1)]
        pts[0], pts[-1] = lo, hi
        grids.append(pts)
    return grids


def _model_call(model, z, t, k):
    with torch.no_grad():
        return model(z, t, k)


def _run_stages(
    model: Denoiser,
    ts: TransformStack,
    ns: NoiseSchedule,
    cfg: SamplerConfig,
    z: torch.Tensor,
    k_start: int,
    start_points: list[float],
    fn: FullNoise,
    fresh: torch.Generator,
    on_step=None,
) -> torch.Tensor:
    ss = ns.stage_sched
    grids = time_grid(ss, cfg.dt)
    x_theta = None
    for k in range(k_start, -1, -1):
        pts = start_points if k == k_start else grids[k]
        n_k = len(pts) - 1
        if n_k < 1:
            raise TrajectoryError(f"stage {k} grid has no steps; decrease dt")
        eps_hat = None
        for j in range(n_k, 0, -1):
            t, s = pts[j], pts[j - 1]
            eps_hat, delta_hat = _model_call(model, z, t, k)
            if k == ts.K:
                # the last stage's true degradation is identically zero
                delta_hat = torch.zeros_like(delta_hat)
            t_ov = None
            if eval_alpha_sigma(ns, t, k)[0] < ALPHA_FLOOR:
                t_ov = t - 0.5 * (t - s)
            x_theta = x_from_eps(ns, LatentState(z, t, k), eps_hat, t_override=t_ov)
            if j > 1:
                mean, carry, fr = reverse_posterior(
                    ns, x_theta, delta_hat, eps_hat, s, t, ss.tau[k], cfg.eta
                )
                z = mean + carry * eps_hat
                if cfg.eta > 0:
                    z = z + fr * torch.randn(z.shape, generator=fresh, dtype=z.dtype)
                if on_step:
                    on_step(k, s, z)
        if not torch.isfinite(z).all():
            raise TrajectoryError(
                f"non-finite latent in stage {k}: |z| max "
                f"{float(z.abs().max())}, t grid {pts[0]}..{pts[-1]}"
            )
        if k > 0:
            eps_rs = boundary_reverse(ts, eps_hat, fn, k, cfg.boundary_mode)
            a_b, s_b = eval_alpha_sigma(ns, ss.tau[k], k - 1)
            z = a_b * g_map(ts, x_theta, k) + s_b * eps_rs
            if on_step:
                on_step(k - 1, ss.tau[k], z)
    return x_theta


def generate(
    model: Denoiser,
    ts: TransformStack,
    ns: NoiseSchedule,
    cfg: SamplerConfig,
    n: int | None = None,
    full_noise: FullNoise | None = None,
    on_step=None,
) -> torch.Tensor:
    """Sample stage-0 outputs; ``n`` trajectories run as one batch.

    The hierarchical noise comes from cfg.seed (or is passed in); any
    fresh in-stage noise (eta > 0) draws from a generator seeded with
    cfg.seed + 1.
    """
    K = ts.K
    fn = full_noise if full_noise is not None else sample_full_noise(ts, cfg.seed, batch=n)
    fresh = torch.Generator().manual_seed(cfg.seed + 1)
    grids = time_grid(ns.stage_sched, cfg.dt)
    # alpha(1) = 0: the first latent is pure scaled noise
    sigma1 = eval_alpha_sigma(ns, 1.0, K)[1]
    z = sigma1 * fn.base
    return _run_stages(model, ts, ns, cfg, z, K, grids[K], fn, fresh, on_step)


def conditional_init(
    model: Denoiser,
    ts: TransformStack,
    ns: NoiseSchedule,
    x_c: torch.Tensor,
    k: int,
    step_size: float,
    init_steps: int,
    rng: torch.Generator,
    T: float,
) -> tuple[torch.Tensor, list[float]]:
    """Noise the condition to time T, then descend on |x_theta - x_c|^2.

    Gradients flow through the network with respect to the latent only.
    A halving backoff rejects any step that increases the objective, so
    the returned trace is non-increasing.  Returns (z_T, objectives).
    """
    a, s = eval_alpha_sigma(ns, T, k)
    z = a * x_c + s * torch.randn(x_c.shape, generator=rng, dtype=x_c.dtype)

    def objective(zz: torch.Tensor) -> torch.Tensor:
        eps_hat, _ = model(zz, T, k)
        x_theta = x_from_eps(ns, LatentState(zz, T, k), eps_hat)
        return (x_theta - x_c).pow(2).mean()

    lam = step_size
    z = z.detach().requires_grad_(True)
    obj = objective(z)
    trace = [float(obj.detach())]
    for _ in range(init_steps):
        (grad,) = torch.autograd.grad(obj, z)
        if not torch.isfinite(grad).all():
            raise TrajectoryError("non-finite gradient during conditional init")
        accepted = False
        while lam >= 1e-8:
            cand = (z - lam * grad).detach().requires_grad_(True)
            cand_obj = objective(cand)
            if float(cand_obj.detach()) <= trace[-1]:
                z, obj = cand, cand_obj
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            break
        trace.append(float(obj.detach()))
    return z.detach(), trace


def conditional_generate(
    model: Denoiser,
    ts: TransformStack,
    ns: NoiseSchedule,
    cfg: SamplerConfig,
) -> torch.Tensor:
    """Generate stage-0 outputs anchored to cfg.cond's stage-k tensor."""
    if cfg.cond is None:
        raise ValueError("conditional generation needs cfg.cond")
    cond = cfg.cond
    K = ts.K
    if not 0 <= cond.stage <= K:
        raise ValueError(f"conditioning stage {cond.stage} out of range")
    if tuple(cond.x_c.shape[-3:]) != ts.shapes[cond.stage]:
        raise ValueError(
            f"condition shape {tuple(cond.x_c.shape[-3:])} does not match "
            f"stage-{cond.stage} shape {ts.shapes[cond.stage]}"
        )
    ss = ns.stage_sched
    grids = time_grid(ss, cfg.dt)
    if cond.T is not None:
        T = cond.T
    elif cond.stage == K:
        # tau_{K+1} = 1 has alpha = 0; start one grid step below
        T = grids[K][-2]
    else:
        T = ss.tau[cond.stage + 1]
    if T <= 0.0:
        return cond.x_c.clone()
    start_points = [p for p in grids[cond.stage] if p <= T + 1e-12]
    if not math.isclose(start_points[-1], T):
        raise ValueError(f"conditioning time {T} is not a grid point of stage {cond.stage}")
    batch = cond.x_c.shape[0] if cond.x_c.dim() == 4 else None
    rng = torch.Generator().manual_seed(cfg.seed + 2)
    z, _ = conditional_init(
        model, ts, ns, cond.x_c, cond.stage, cond.step_size, cond.init_steps, rng, T
    )
    fn = sample_full_noise(ts, cfg.seed, batch=batch)
    fresh = torch.Generator().manual_seed(cfg.seed + 1)
    return _run_stages(model, ts, ns, cfg, z, cond.stage, start_points, fn, fresh)
