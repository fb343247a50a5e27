"""Forward process, reverse posterior, and boundary noise operators.

Within a stage the latent follows q(z_t | x) = N(alpha_t x_t, sigma_t^2)
with the interpolated mean x_t.  Crossing a boundary is handled by a
deterministic map on the noise: either keep one element per block
(``drop``) or take the rescaled block mean (``average``).  Reversing a
boundary re-injects the randomness the map discarded, drawn from a
pre-sampled hierarchical noise whose disjoint slices cover the full
stage-0 size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import torch

from .schedules import NoiseSchedule, eval_alpha_sigma, stage_of, transition_coeffs
from .transforms import TransformKind, TransformStack, interpolated_target


class BoundaryMode(str, Enum):
    DROP = "drop"
    AVERAGE = "average"


@dataclass
class LatentState:
    """A latent z at time t, living in stage k's space.

    ``z`` may carry leading batch axes; ``t`` is a scalar or a 1-D
    tensor aligned with the batch.
    """

    z: torch.Tensor
    t: float | torch.Tensor
    k: int


def _coeff(values: list[float], like: torch.Tensor) -> torch.Tensor | float:
    if len(values) == 1:
        return values[0]
    return torch.as_tensor(values, dtype=like.dtype).reshape(-1, *([1] * (like.dim() - 1)))


def _times(t: float | torch.Tensor) -> list[float]:
    if isinstance(t, torch.Tensor):
        return [float(v) for v in t]
    return [float(t)]


def q_sample(
    ts: TransformStack,
    ns: NoiseSchedule,
    x: torch.Tensor,
    t: float | torch.Tensor,
    eps: torch.Tensor,
) -> LatentState:
    """Draw from the marginal: z = alpha_t x_t + sigma_t eps."""
    ss = ns.stage_sched
    x_t, _ = interpolated_target(ts, ss, x, t)
    if eps.shape != x_t.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != target shape {tuple(x_t.shape)}")
    pairs = [eval_alpha_sigma(ns, v) for v in _times(t)]
    a = _coeff([p[0] for p in pairs], x_t)
    s = _coeff([p[1] for p in pairs], x_t)
    k = stage_of(ss, _times(t)[0])
    return LatentState(z=a * x_t + s * eps, t=t, k=k)


def q_transition(
    ts: TransformStack,
    ns: NoiseSchedule,
    x: torch.Tensor,
    z_s: LatentState,
    t: float,
    eps: torch.Tensor,
) -> LatentState:
    """Step the forward process from z_s to time t inside one stage.

    z_t = alpha_{t|s} z_s + alpha_t (x_t - x_s) + sigma_{t|s} eps, with
    the mean shift rewritten as -delta_t (t - s) / (t - tau_k) so only
    time-t quantities are needed.
    """
    ss = ns.stage_sched
    s = float(z_s.t) if not isinstance(z_s.t, torch.Tensor) else None
    if s is None:
        raise ValueError("transitions need a scalar source time")
    if t < s:
        raise ValueError(f"target time {t} precedes source time {s}")
    if t == s:
        return LatentState(z=z_s.z.clone(), t=t, k=z_s.k)
    k = stage_of(ss, t)
    if k != z_s.k:
        raise ValueError(
            f"times {s} (stage {z_s.k}) and {t} (stage {k}) cross a boundary; "
            "use the boundary operators instead"
        )
    x_t, delta_t = interpolated_target(ts, ss, x, t)
    a_t, _ = eval_alpha_sigma(ns, t, k)
    a_ts, s_ts = transition_coeffs(ns, s, t, k)
    shift = -delta_t * ((t - s) / (t - ss.tau[k])) if t > ss.tau[k] else torch.zeros_like(x_t)
    return LatentState(z=a_ts * z_s.z + a_t * shift + s_ts * eps, t=t, k=k)


def reverse_posterior(
    ns: NoiseSchedule,
    x_hat: torch.Tensor,
    delta_hat: torch.Tensor,
    eps_hat: torch.Tensor,
    s: float,
    t: float,
    tau_k: float,
    eta: float,
) -> tuple[torch.Tensor, float, float]:
    """One reverse step from time t to s < t inside a stage.

    Returns (mean, carry, fresh): sample z_s = mean + carry * eps_hat +
    fresh * eps with eps ~ N(0, I).  ``eta`` interpolates between the
    deterministic stepper (0) and ancestral sampling (1) via
    sigma_bar = sigma_s sigma_{t|s} / sigma_t:

        mean  = alpha_s (x_hat + delta_hat (t - s) / (t - tau_k))
        carry = sqrt(sigma_s^2 - eta^2 sigma_bar^2)
        fresh = eta sigma_bar
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    if s > t:
        raise ValueError(f"need s <= t, got s={s}, t={t}")
    k = stage_of(ns.stage_sched, s)
    if not math.isclose(tau_k, ns.stage_sched.tau[k]):
        raise ValueError(f"tau_k={tau_k} is not the lower boundary of stage {k}")
    a_s, s_s = eval_alpha_sigma(ns, s, k)
    _, s_t = eval_alpha_sigma(ns, t, k)
    if s_t == 0.0:
        raise ValueError("reverse step undefined at zero noise level (t = 0)")
    _, s_ts = transition_coeffs(ns, s, t, k)
    sigma_bar = s_s * s_ts / s_t
    shift = (t - s) / (t - tau_k) if t > tau_k else 0.0
    mean = a_s * (x_hat + delta_hat * shift)
    carry_sq = s_s**2 - eta**2 * sigma_bar**2
    if carry_sq < -1e-12:
        raise AssertionError(f"carry variance went negative: {carry_sq}")
    return mean, math.sqrt(max(0.0, carry_sq)), eta * sigma_bar


@dataclass(frozen=True)
class BlockLayout:
    """How a fine stage's entries group into blocks over the coarse stage.

    ``to_blocks`` views a fine tensor as (d, ..., *coarse_shape) with
    block slot 0 the designated kept position; ``from_blocks`` inverts
    the view.  Spatial layouts use 2x2 blocks (slot order: top-left,
    top-right, bottom-left, bottom-right); flat layouts use contiguous
    index groups of size d.
    """

    d: int
    style: str  # "spatial" | "flat" | "identity"
    fine_shape: tuple[int, int, int]
    coarse_shape: tuple[int, int, int]

    def to_blocks(self, x: torch.Tensor) -> torch.Tensor:
        lead = x.shape[: -len(self.fine_shape)]
        if tuple(x.shape[len(lead):]) != self.fine_shape:
            raise ValueError(f"expected fine shape {self.fine_shape}, got {tuple(x.shape)}")
        if self.style == "identity":
            return x[None]
        if self.style == "spatial":
            c, h, w = self.fine_shape
            y = x.reshape(*lead, c, h // 2, 2, w // 2, 2)
            y = y.movedim(-3, 0).movedim(-1, 1)  # (2, 2, ..., c, h/2, w/2)
            return y.reshape(4, *lead, *self.coarse_shape)
        m = int(torch.tensor(self.coarse_shape).prod())
        y = x.reshape(*lead, m, self.d).movedim(-1, 0)
        return y.reshape(self.d, *lead, *self.coarse_shape)

    def from_blocks(self, blocks: torch.Tensor) -> torch.Tensor:
        if blocks.shape[0] != self.d:
            raise ValueError(f"expected {self.d} block slots, got {blocks.shape[0]}")
        lead = blocks.shape[1 : blocks.dim() - len(self.coarse_shape)]
        if self.style == "identity":
            return blocks[0]
        if self.style == "spatial":
            c, h, w = self.fine_shape
            y = blocks.reshape(2, 2, *lead, c, h // 2, w // 2)
            y = y.movedim(1, -1).movedim(0, -3)  # (..., c, h/2, 2, w/2, 2)
            return y.reshape(*lead, c, h, w)
        m = int(torch.tensor(self.coarse_shape).prod())
        y = blocks.reshape(self.d, *lead, m).movedim(0, -1)
        return y.reshape(*lead, *self.fine_shape)


def block_layout(ts: TransformStack, k: int) -> BlockLayout:
    """Layout of boundary k (going from stage k-1 down to stage k)."""
    if not 1 <= k <= ts.K:
        raise ValueError(f"boundary {k} out of range")
    fine, coarse = ts.shapes[k - 1], ts.shapes[k]
    ratio = ts.dim_ratio(k)
    d = round(ratio)
    if not math.isclose(ratio, d):
        raise ValueError(f"boundary {k} has non-integer dimension ratio {ratio}")
    if d == 1:
        return BlockLayout(1, "identity", fine, coarse)
    if ts.kind is TransformKind.DS:
        return BlockLayout(4, "spatial", fine, coarse)
    return BlockLayout(d, "flat", fine, coarse)


def boundary_forward(eps: torch.Tensor, mode: BoundaryMode, layout: BlockLayout) -> torch.Tensor:
    """Carry unit Gaussian noise across a boundary, fine to coarse.

    ``drop`` keeps the designated element of each block; ``average``
    takes the block mean and restores unit variance with sqrt(d).
    """
    mode = BoundaryMode(mode)
    blocks = layout.to_blocks(eps)
    if mode is BoundaryMode.DROP:
        return blocks[0].clone()
    return blocks.mean(dim=0) * math.sqrt(layout.d)


def drop_inverse(
    eps_coarse: torch.Tensor, complement: torch.Tensor, layout: BlockLayout
) -> torch.Tensor:
    """Place the coarse noise at kept positions, the complement elsewhere."""
    if layout.d == 1:
        return eps_coarse.clone()
    return layout.from_blocks(torch.cat([eps_coarse[None], complement], dim=0))


def average_inverse(
    eps_coarse: torch.Tensor, complement: torch.Tensor, layout: BlockLayout
) -> torch.Tensor:
    """Sample d unit normals per block whose sum is sqrt(d) times the input.

    Autoregressive over block slots: slot i takes a / (d - i) plus a
    sqrt((d-i-1)/(d-i))-scaled fresh draw, with the running remainder a
    decremented; the last slot absorbs the remainder, so the block-sum
    constraint holds to machine precision while every slot stays
    marginally standard normal.
    """
    d = layout.d
    if d == 1:
        return eps_coarse.clone()
    a = math.sqrt(d) * eps_coarse
    slots = []
    for i in range(d - 1):
        e = a / (d - i) + math.sqrt((d - i - 1) / (d - i)) * complement[i]
        a = a - e
        slots.append(e)
    slots.append(a)
    return layout.from_blocks(torch.stack(slots, dim=0))


@dataclass
class FullNoise:
    """Pre-sampled hierarchical noise for one generation trajectory.

    ``base`` seeds the coarsest stage; ``complements[k]`` holds the
    d_k - 1 extra block slots introduced when boundary k refines stage k
    into stage k-1.  Slices are disjoint, jointly exhaust the stage-0
    size, and may each be consumed once per trajectory.
    """

    base: torch.Tensor
    complements: dict[int, torch.Tensor]
    seed: int | None = None
    _consumed: set[int] = field(default_factory=set)

    def take_complement(self, k: int) -> torch.Tensor:
        if k not in self.complements:
            raise KeyError(f"no complement for boundary {k}")
        if k in self._consumed:
            raise RuntimeError(f"complement for boundary {k} already consumed")
        self._consumed.add(k)
        return self.complements[k]

    def component_sizes(self) -> list[int]:
        sizes = [self.base[0].numel() if self.base.dim() > 3 else self.base.numel()]
        for k in sorted(self.complements, reverse=True):
            comp = self.complements[k]
            per_traj = comp[:, 0] if comp.dim() > 4 else comp
            sizes.append(per_traj.numel())
        return sizes


def sample_full_noise(
    ts: TransformStack, seed: int, batch: int | None = None
) -> FullNoise:
    """Deterministically sample the hierarchical noise for ``seed``.

    With ``batch`` set, every component gains a trajectory axis (the
    base at dim 0, complements at dim 1) holding independent draws.
    """
    g = torch.Generator().manual_seed(seed)
    lead = () if batch is None else (batch,)
    base = torch.randn(*lead, *ts.shapes[ts.K], generator=g)
    complements = {}
    for k in range(ts.K, 0, -1):
        layout = block_layout(ts, k)
        if layout.d > 1:
            complements[k] = torch.randn(
                layout.d - 1, *lead, *ts.shapes[k], generator=g
            )
    return FullNoise(base=base, complements=complements, seed=seed)


def boundary_reverse(
    ts: TransformStack,
    eps_coarse: torch.Tensor,
    fn: FullNoise,
    k: int,
    mode: BoundaryMode,
) -> torch.Tensor:
    """Refine coarse noise back to stage k-1 using the boundary-k slice."""
    mode = BoundaryMode(mode)
    layout = block_layout(ts, k)
    if layout.d == 1:
        return eps_coarse.clone()
    complement = fn.take_complement(k)
    if mode is BoundaryMode.DROP:
        return drop_inverse(eps_coarse, complement, layout)
    return average_inverse(eps_coarse, complement, layout)
