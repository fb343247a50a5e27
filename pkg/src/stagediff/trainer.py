"""Double reconstruction loss, optimizer state, and the training loop.

Each training draw picks a uniform time, noises the interpolated target,
and penalises both recoveries at once:

    loss = w_t (|eps_hat - eps|^2 + |delta_hat - delta_t|^2)

with |.|^2 the per-element mean square and w_t = sigmoid(-log SNR_t)
down-weighting low-noise steps.  The noise term is the signal
reconstruction error expressed in noise units: |x_hat - x_t| =
(sigma/alpha) |eps_hat - eps|, but measured on the residual directly the
objective stays bounded as alpha -> 0, where the x-space form diverges
faster than any model's noise-prediction floor shrinks.

Parameters update with decoupled weight decay and adaptive moments; an
exponential moving average shadows them.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import torch

from .denoiser import Denoiser
from .diffusion import LatentState
from .schedules import NoiseSchedule, eval_alpha_sigma, stage_of
from .transforms import TransformStack, interpolated_target


class NonFiniteLossError(RuntimeError):
    pass


def p2_weight(ns: NoiseSchedule, t: float) -> float:
    """sigmoid(-log(alpha^2/sigma^2)), i.e. sigma^2 / (alpha^2 + sigma^2)."""
    a, s = eval_alpha_sigma(ns, t)
    return s**2 / (a**2 + s**2)


def _mean_sq(x: torch.Tensor) -> torch.Tensor:
    """Per-sample mean squared element over all non-batch axes."""
    return x.reshape(x.shape[0], -1).pow(2).mean(dim=1)


def training_loss(
    model: Denoiser,
    ts: TransformStack,
    ns: NoiseSchedule,
    x_batch: torch.Tensor,
    rng: torch.Generator,
) -> torch.Tensor:
    """Batch-mean double reconstruction loss with uniformly drawn times.

    Samples sharing a stage are grouped into one network call; the draw
    order (all times first, then per-stage noise in ascending stage
    order) is fixed so a seeded generator reproduces the value exactly.
    """
    if x_batch.dim() == 3:
        x_batch = x_batch[None]
    if x_batch.shape[0] == 0:
        raise ValueError("empty batch")
    ss = ns.stage_sched
    b = x_batch.shape[0]
    t = torch.rand(b, generator=rng, dtype=x_batch.dtype)
    stages = [stage_of(ss, float(v)) for v in t]
    losses = []
    for k in sorted(set(stages)):
        idx = [i for i, s in enumerate(stages) if s == k]
        xb, tb = x_batch[idx], t[idx]
        x_t, delta_t = interpolated_target(ts, ss, xb, tb)
        eps = torch.randn(x_t.shape, generator=rng, dtype=x_t.dtype)
        pairs = [eval_alpha_sigma(ns, float(v), k) for v in tb]
        shape = (-1, *([1] * (x_t.dim() - 1)))
        a = torch.as_tensor([p[0] for p in pairs], dtype=x_t.dtype).reshape(shape)
        s = torch.as_tensor([p[1] for p in pairs], dtype=x_t.dtype).reshape(shape)
        state = LatentState(z=a * x_t + s * eps, t=tb, k=k)
        eps_hat, delta_hat = model(state.z, tb, k)
        w = torch.as_tensor([p2_weight(ns, float(v)) for v in tb], dtype=x_t.dtype)
        li = w * (_mean_sq(eps_hat - eps) + _mean_sq(delta_hat - delta_t))
        if not torch.isfinite(li).all():
            bad = [float(tv) for tv, v in zip(tb, li) if not torch.isfinite(v)]
            raise NonFiniteLossError(f"non-finite loss at t={bad} (stage {k})")
        losses.append(li)
    return torch.cat(losses).mean()


def grad_loss(
    model: Denoiser,
    x_batch: torch.Tensor,
    ns: NoiseSchedule,
    ts: TransformStack,
    rng: torch.Generator,
) -> tuple[float, dict[str, torch.Tensor]]:
    """Loss value and exact reverse-mode gradients for every parameter."""
    loss = training_loss(model, ts, ns, x_batch, rng)
    params = dict(model.named_parameters())
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    out = {
        name: (g if g is not None else torch.zeros_like(p))
        for (name, p), g in zip(params.items(), grads)
    }
    return float(loss.detach()), out


def ema_update(
    ema: dict[str, torch.Tensor], params: dict[str, torch.Tensor], decay: float
) -> dict[str, torch.Tensor]:
    """ema' = decay * ema + (1 - decay) * params, elementwise."""
    return {
        name: decay * ema[name] + (1.0 - decay) * params[name].detach()
        for name in ema
    }


@dataclass
class TrainState:
    """Everything the training loop mutates between steps."""

    model: Denoiser
    ema: dict[str, torch.Tensor]
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    step: int
    skipped: int
    rng: torch.Generator
    lr: float = 1e-3
    weight_decay: float = 1e-4
    ema_decay: float = 0.9999
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def create(
        cls,
        model: Denoiser,
        seed: int,
        lr: float = 1e-3,
        weight_decay: float = 1e-4,
        ema_decay: float = 0.9999,
    ) -> "TrainState":
        params = dict(model.named_parameters())
        return cls(
            model=model,
            ema={n: p.detach().clone() for n, p in params.items()},
            m={n: torch.zeros_like(p) for n, p in params.items()},
            v={n: torch.zeros_like(p) for n, p in params.items()},
            step=0,
            skipped=0,
            rng=torch.Generator().manual_seed(seed),
            lr=lr,
            weight_decay=weight_decay,
            ema_decay=ema_decay,
        )


def adamw_update(state: TrainState, grads: dict[str, torch.Tensor]):
    """Decoupled-weight-decay adaptive-moment step on the live parameters."""
    b1, b2 = state.betas
    step = state.step + 1
    with torch.no_grad():
        for name, p in state.model.named_parameters():
            g = grads[name]
            state.m[name] = b1 * state.m[name] + (1 - b1) * g
            state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
            m_hat = state.m[name] / (1 - b1**step)
            v_hat = state.v[name] / (1 - b2**step)
            p -= state.lr * state.weight_decay * p
            p -= state.lr * m_hat / (v_hat.sqrt() + state.eps)


def train_step(
    state: TrainState, x_batch: torch.Tensor, ts: TransformStack, ns: NoiseSchedule
) -> float:
    """One optimizer step; non-finite gradients skip the update but count."""
    loss, grads = grad_loss(state.model, x_batch, ns, ts, state.rng)
    finite = all(torch.isfinite(g).all() for g in grads.values())
    if not finite:
        state.skipped += 1
        state.step += 1
        return loss
    adamw_update(state, grads)
    params = dict(state.model.named_parameters())
    state.ema = ema_update(state.ema, params, state.ema_decay)
    state.step += 1
    return loss


def fit(
    state: TrainState,
    corpus: torch.Tensor,
    ts: TransformStack,
    ns: NoiseSchedule,
    steps: int,
    batch_size: int,
    log_path=None,
    on_checkpoint=None,
    checkpoint_every: int = 0,
    log_every: int = 1,
) -> list[tuple[int, float]]:
    """Run the loop for ``steps`` updates; returns the (step, loss) history.

    Batches are drawn with replacement from ``corpus`` using the state's
    generator.  ``on_checkpoint(state)`` fires every ``checkpoint_every``
    steps and once at the end.
    """
    history = []
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "a", newline="")
        writer = csv.writer(fh)
        if fh.tell() == 0:
            writer.writerow(["step", "loss", "wall_time"])
    start = time.monotonic()
    try:
        for _ in range(steps):
            idx = torch.randint(0, corpus.shape[0], (batch_size,), generator=state.rng)
            loss = train_step(state, corpus[idx], ts, ns)
            history.append((state.step, loss))
            if writer and state.step % log_every == 0:
                writer.writerow([state.step, f"{loss:.6f}", f"{time.monotonic() - start:.3f}"])
            if on_checkpoint and checkpoint_every and state.step % checkpoint_every == 0:
                if fh:
                    fh.flush()
                on_checkpoint(state)
    finally:
        if fh:
            fh.close()
    if on_checkpoint:
        on_checkpoint(state)
    return history


def gradient_check(
    model: Denoiser,
    ts: TransformStack,
    ns: NoiseSchedule,
    x_batch: torch.Tensor,
    seed: int,
    n_coords: int = 100,
    h: float = 1e-5,
) -> float:
    """Max relative error of analytic gradients vs central differences.

    Runs in double precision on a copy of the model; the loss draws are
    re-seeded identically for every evaluation so finite differences see
    a deterministic function of the parameters.
    """
    model64 = model.double()
    x64 = x_batch.double()

    def loss_at() -> float:
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            return float(training_loss(model64, ts, ns, x64, g))

    g = torch.Generator().manual_seed(seed)
    loss = training_loss(model64, ts, ns, x64, g)
    params = dict(model64.named_parameters())
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    grads = {
        n: (gr if gr is not None else torch.zeros_like(p))
        for (n, p), gr in zip(params.items(), grads)
    }
    pick = torch.Generator().manual_seed(seed + 1)
    names = list(params)
    worst = 0.0
    for _ in range(n_coords):
        name = names[int(torch.randint(0, len(names), (1,), generator=pick))]
        p = params[name]
        flat = p.detach().reshape(-1)
        i = int(torch.randint(0, flat.numel(), (1,), generator=pick))
        orig = float(flat[i])
        step = h * max(1.0, abs(orig))
        with torch.no_grad():
            flat[i] = orig + step
        hi = loss_at()
        with torch.no_grad():
            flat[i] = orig - step
        lo = loss_at()
        with torch.no_grad():
            flat[i] = orig
        fd = (hi - lo) / (2 * step)
        ana = float(grads[name].reshape(-1)[i])
        denom = max(abs(ana), abs(fd))
        if denom < 1e-9:
            continue
        worst = max(worst, abs(ana - fd) / denom)
    model.float()
    return worst
