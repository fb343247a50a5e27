"""Runtime invariant suite: measured checks over a configured experiment.

Every check returns a row with the measured value, its threshold, and a
pass flag; the CLI turns failures into a nonzero exit code.  Checks take
explicit schedule/stack objects so faults can be injected when testing
the suite itself.
"""

from __future__ import annotations

import io
import math

import torch

from .denoiser import Denoiser
from .diffusion import (
    BoundaryMode,
    average_inverse,
    block_layout,
    boundary_forward,
    drop_inverse,
    q_sample,
    q_transition,
    reverse_posterior,
    sample_full_noise,
)
from .corpus import blob_corpus
from .sampler import SamplerConfig, generate, time_grid
from .schedules import (
    NoiseSchedule,
    PatchSpec,
    RescaleMode,
    _patch_power,
    build_noise_schedule,
    eval_alpha_sigma,
    stage_of,
    transition_coeffs,
)
from .trainer import gradient_check, training_loss
from .transforms import (
    TransformKind,
    TransformStack,
    forward_to_stage,
    interpolated_target,
    stage_endpoint,
)


def _row(name: str, measured: float, threshold: float, passed: bool, detail: str = "") -> dict:
    return {
        "name": name,
        "passed": bool(passed),
        "measured": float(measured),
        "threshold": float(threshold),
        "detail": detail,
    }


def check_vp_closure(ns: NoiseSchedule, n: int = 10000, seed: int = 0) -> dict:
    g = torch.Generator().manual_seed(seed)
    worst = 0.0
    for t in torch.rand(n, generator=g).tolist() + [0.0, 1.0]:
        a, s = eval_alpha_sigma(ns, t)
        worst = max(worst, abs(a * a + s * s - 1.0))
    return _row("vp_closure", worst, 1e-6, worst <= 1e-6)


def check_chapman_kolmogorov(ns: NoiseSchedule, per_stage: int = 8, seed: int = 0) -> dict:
    g = torch.Generator().manual_seed(seed)
    ss = ns.stage_sched
    worst = 0.0
    for k in range(ss.K + 1):
        lo, hi = ss.tau[k], ss.tau[k + 1]
        for _ in range(per_stage):
            s, u, t = sorted(
                (lo + (hi - lo) * torch.rand(3, generator=g)).tolist()
            )
            a_su, s_su = transition_coeffs(ns, s, u, k)
            a_ut, s_ut = transition_coeffs(ns, u, t, k)
            a_st, s_st = transition_coeffs(ns, s, t, k)
            worst = max(worst, abs(a_su * a_ut - a_st))
            worst = max(worst, abs(s_ut**2 + a_ut**2 * s_su**2 - s_st**2))
    return _row("chapman_kolmogorov", worst, 1e-6, worst <= 1e-6)


def check_sp_sigma_jump(ts: TransformStack, ns: NoiseSchedule) -> dict:
    """Across boundary k the SP sigma ratio is exactly 1/sqrt(d_k gamma_k)."""
    sp = build_noise_schedule(ns.stage_sched, ts.flat_sizes, ts.gammas, RescaleMode.SP)
    worst = 0.0
    for k in range(1, ts.K + 1):
        tau_k = sp.stage_sched.tau[k]
        before = eval_alpha_sigma(sp, tau_k, k - 1)[1]
        after = eval_alpha_sigma(sp, tau_k, k)[1]
        expected = 1.0 / math.sqrt(ts.dim_ratio(k) * ts.gammas[k - 1])
        worst = max(worst, abs(after / before - expected))
    return _row("sp_sigma_jump", worst, 1e-12, worst <= 1e-12)


def check_snr_monotone(ns: NoiseSchedule, points: int = 200) -> dict:
    ss = ns.stage_sched
    min_drop = math.inf
    for k in range(ss.K + 1):
        lo, hi = ss.tau[k], ss.tau[k + 1]
        prev = None
        for j in range(points + 1):
            t = lo + (hi - lo) * j / points
            a, s = eval_alpha_sigma(ns, t, k)
            snr = a * a / (s * s) if s > 0 else math.inf
            if prev is not None and math.isfinite(prev):
                min_drop = min(min_drop, prev - snr)
            prev = snr
    return _row("snr_monotone", min_drop, 0.0, min_drop > 0.0)


def _mc_patch_snr(
    signal: torch.Tensor, spec: PatchSpec, stage: int, sigma: float,
    draws: int, g: torch.Generator, chunk: int = 4000,
) -> float:
    """Patch SNR with the noise patch power averaged over MC draws."""
    s_pow = _patch_power(signal, spec.extent_at(signal.shape))
    total, left = 0.0, draws
    while left > 0:
        b = min(chunk, left)
        eps = sigma * torch.randn(b, *signal.shape, generator=g)
        total += _patch_power(eps, spec.extent_at(signal.shape)) * b
        left -= b
    return s_pow / (total / draws)


def check_boundary_patch_snr(
    ts: TransformStack,
    ns: NoiseSchedule,
    draws: int = 100_000,
    seed: int = 0,
    lo: float = 0.95,
    hi: float = 1.05,
) -> list[dict]:
    """Patch SNR is preserved across each resampling boundary.

    Only meaningful for spatial dimension changes; blur and flat-latent
    stacks skip it.
    """
    if ts.kind is not TransformKind.DS or ts.K == 0:
        return []
    x = blob_corpus(1, ts.shapes[0][-1], seed=seed + 17)[0]
    spec = PatchSpec(patch_extent=(1 << ts.K, 1 << ts.K), data_range=ts.shapes[0])
    rows = []
    for k in range(1, ts.K + 1):
        tau_k = ns.stage_sched.tau[k]
        g = torch.Generator().manual_seed(seed + k)
        fine_sig = stage_endpoint(ts, forward_to_stage(ts, x, k - 1), k - 1)
        coarse_sig = forward_to_stage(ts, x, k)
        a_f, s_f = eval_alpha_sigma(ns, tau_k, k - 1)
        a_c, s_c = eval_alpha_sigma(ns, tau_k, k)
        snr_f = _mc_patch_snr(a_f * fine_sig, spec, k - 1, s_f, draws, g)
        snr_c = _mc_patch_snr(a_c * coarse_sig, spec, k, s_c, draws, g)
        ratio = snr_f / snr_c
        rows.append(
            _row(
                f"boundary_patch_snr_k{k}_{ns.mode.value}",
                ratio,
                hi,
                lo <= ratio <= hi,
                f"fine {snr_f:.4g} vs coarse {snr_c:.4g}",
            )
        )
    return rows


def check_marginal_consistency(
    ts: TransformStack,
    ns: NoiseSchedule,
    draws: int = 100_000,
    pairs_per_stage: int = 3,
    seed: int = 0,
    tol: float = 0.01,
    chunk: int = 2000,
) -> list[dict]:
    """Composing q_sample(s) with the transition matches q_sample(t)."""
    ss = ns.stage_sched
    x = blob_corpus(1, ts.shapes[0][-1], seed=seed + 23)[0]
    g = torch.Generator().manual_seed(seed)
    rows = []
    for k in range(ss.K + 1):
        lo_t, hi_t = ss.tau[k], ss.tau[k + 1]
        for _ in range(pairs_per_stage):
            s, t = sorted((lo_t + (hi_t - lo_t) * torch.rand(2, generator=g)).tolist())
            if t - s < 1e-4 or s == lo_t:
                continue
            x_t, _ = interpolated_target(ts, ss, x, t)
            a_t, s_t = eval_alpha_sigma(ns, t, k)
            shift_sum = 0.0
            sq_sum = 0.0
            n_el = x_t.numel()
            left = draws
            while left > 0:
                b = min(chunk, left)
                xb = x[None].expand(b, *x.shape)
                eps1 = torch.randn(b, *x_t.shape, generator=g)
                z_s = q_sample(ts, ns, xb, s, eps1)
                eps2 = torch.randn(b, *x_t.shape, generator=g)
                z_t = q_transition(ts, ns, xb, z_s, t, eps2)
                dev = z_t.z - a_t * x_t
                shift_sum += float(dev.sum())
                sq_sum += float(dev.pow(2).sum())
                left -= b
            mean_shift = abs(shift_sum / (draws * n_el)) / s_t
            var_ratio = (sq_sum / (draws * n_el)) / (s_t**2)
            worst = max(mean_shift, abs(var_ratio - 1.0))
            rows.append(
                _row(
                    f"marginal_consistency_k{k}_s{s:.3f}_t{t:.3f}",
                    worst,
                    tol,
                    worst <= tol,
                    f"mean shift {mean_shift:.4g}, var ratio {var_ratio:.4f}",
                )
            )
    return rows


def check_reverse_consistency(
    ts: TransformStack,
    ns: NoiseSchedule,
    draws: int = 50_000,
    seed: int = 0,
    tol: float = 0.01,
    chunk: int = 2000,
) -> list[dict]:
    """Reverse steps with the true targets reproduce the earlier marginal."""
    ss = ns.stage_sched
    x = blob_corpus(1, ts.shapes[0][-1], seed=seed + 29)[0]
    g = torch.Generator().manual_seed(seed + 1)
    rows = []
    for k in range(ss.K + 1):
        lo_t, hi_t = ss.tau[k], ss.tau[k + 1]
        s = lo_t + 0.3 * (hi_t - lo_t)
        t = lo_t + 0.8 * (hi_t - lo_t)
        x_t, delta_t = interpolated_target(ts, ss, x, t)
        x_s, _ = interpolated_target(ts, ss, x, s)
        a_s, s_s = eval_alpha_sigma(ns, s, k)
        shift_sum = sq_sum = 0.0
        n_el = x_t.numel()
        left = draws
        while left > 0:
            b = min(chunk, left)
            eps = torch.randn(b, *x_t.shape, generator=g)
            mean, carry, fresh = reverse_posterior(
                ns, x_t[None], delta_t[None], eps, s, t, ss.tau[k], eta=1.0
            )
            z_s = mean + carry * eps + fresh * torch.randn(b, *x_t.shape, generator=g)
            dev = z_s - a_s * x_s
            shift_sum += float(dev.sum())
            sq_sum += float(dev.pow(2).sum())
            left -= b
        mean_shift = abs(shift_sum / (draws * n_el)) / s_s
        var_ratio = (sq_sum / (draws * n_el)) / (s_s**2)
        worst = max(mean_shift, abs(var_ratio - 1.0))
        rows.append(
            _row(
                f"reverse_consistency_k{k}",
                worst,
                tol,
                worst <= tol,
                f"mean shift {mean_shift:.4g}, var ratio {var_ratio:.4f}",
            )
        )
    return rows


def grid_bayes_posterior(
    ns: NoiseSchedule, x_k: float, endpoint: float, s: float, t: float, z_t: float,
    n_grid: int = 20001, span: float = 8.0,
) -> tuple[float, float]:
    """Quadrature posterior moments of z_s given z_t for a scalar datum.

    Multiplies the scalar marginal q(z_s | x) by the transition
    q(z_t | z_s, x) on a dense grid; an independent route to the
    closed-form reverse step.
    """
    ss = ns.stage_sched
    k = stage_of(ss, s)
    tau_k, tau_n = ss.tau[k], ss.tau[k + 1]
    w_s = (s - tau_k) / (tau_n - tau_k)
    w_t = (t - tau_k) / (tau_n - tau_k)
    x_s = (1 - w_s) * x_k + w_s * endpoint
    x_t = (1 - w_t) * x_k + w_t * endpoint
    a_s, s_s = eval_alpha_sigma(ns, s, k)
    a_t, _ = eval_alpha_sigma(ns, t, k)
    a_ts, s_ts = transition_coeffs(ns, s, t, k)
    grid = torch.linspace(a_s * x_s - span * s_s, a_s * x_s + span * s_s, n_grid, dtype=torch.float64)
    log_prior = -0.5 * ((grid - a_s * x_s) / s_s) ** 2
    trans_mean = a_ts * grid + a_t * (x_t - x_s)
    log_like = -0.5 * ((z_t - trans_mean) / s_ts) ** 2
    w = torch.exp(log_prior + log_like - (log_prior + log_like).max())
    w = w / w.sum()
    mean = float((w * grid).sum())
    var = float((w * (grid - mean) ** 2).sum())
    return mean, math.sqrt(var)


def check_reverse_grid_bayes(ns: NoiseSchedule, seed: int = 0, tol: float = 1e-3) -> dict:
    """Closed-form reverse step vs numerical Bayes on a scalar case."""
    g = torch.Generator().manual_seed(seed + 3)
    ss = ns.stage_sched
    worst = 0.0
    for k in range(ss.K + 1):
        lo_t, hi_t = ss.tau[k], ss.tau[k + 1]
        s = lo_t + 0.35 * (hi_t - lo_t)
        t = lo_t + 0.75 * (hi_t - lo_t)
        x_k, endpoint = 1.3, 0.9
        w_t = (t - lo_t) / (hi_t - lo_t)
        x_t = (1 - w_t) * x_k + w_t * endpoint
        delta_t = x_k - x_t
        a_t, s_t = eval_alpha_sigma(ns, t, k)
        z_t = a_t * x_t + s_t * float(torch.randn(1, generator=g))
        eps_t = (z_t - a_t * x_t) / s_t
        xt_ = torch.tensor(x_t, dtype=torch.float64)
        dt_ = torch.tensor(delta_t, dtype=torch.float64)
        et_ = torch.tensor(eps_t, dtype=torch.float64)
        mean, carry, fresh = reverse_posterior(ns, xt_, dt_, et_, s, t, lo_t, eta=1.0)
        ref_mean, ref_std = grid_bayes_posterior(ns, x_k, endpoint, s, t, z_t)
        worst = max(worst, abs(float(mean + carry * et_) - ref_mean), abs(fresh - ref_std))
    return _row("reverse_grid_bayes", worst, tol, worst <= tol)


def check_boundary_drop_roundtrip(ts: TransformStack, seed: int = 0) -> list[dict]:
    rows = []
    for k in range(1, ts.K + 1):
        layout = block_layout(ts, k)
        g = torch.Generator().manual_seed(seed + k)
        coarse = torch.randn(*ts.shapes[k], generator=g)
        comp = torch.randn(max(layout.d - 1, 0), *ts.shapes[k], generator=g)
        fine = drop_inverse(coarse, comp, layout)
        back = boundary_forward(fine, BoundaryMode.DROP, layout)
        err = float((back - coarse).abs().max())
        rows.append(_row(f"boundary_drop_roundtrip_k{k}", err, 0.0, err == 0.0))
    return rows


def check_boundary_average(
    ts: TransformStack, draws: int = 100_000, seed: int = 0, chunk: int = 4000
) -> list[dict]:
    rows = []
    for k in range(1, ts.K + 1):
        layout = block_layout(ts, k)
        if layout.d == 1:
            continue
        g = torch.Generator().manual_seed(seed + 41 + k)
        shape = ts.shapes[k - 1]
        s1 = torch.zeros(shape, dtype=torch.float64)
        s2 = torch.zeros(shape, dtype=torch.float64)
        blocksum_err, left = 0.0, draws
        while left > 0:
            b = min(chunk, left)
            coarse = torch.randn(b, *ts.shapes[k], generator=g, dtype=torch.float64)
            comp = torch.randn(layout.d - 1, b, *ts.shapes[k], generator=g, dtype=torch.float64)
            fine = average_inverse(coarse, comp, layout)
            back = boundary_forward(fine, BoundaryMode.AVERAGE, layout)
            blocksum_err = max(blocksum_err, float((back - coarse).abs().max()))
            s1 += fine.sum(dim=0)
            s2 += fine.pow(2).sum(dim=0)
            left -= b
        rows.append(
            _row(f"boundary_average_blocksum_k{k}", blocksum_err, 1e-12, blocksum_err <= 1e-12)
        )
        mean = s1 / draws
        var = s2 / draws - mean.pow(2)
        mean_err = float(mean.abs().max())
        var_err = float((var - 1.0).abs().max())
        worst = max(mean_err, var_err)
        # the +-0.05 band is stated for 1e5 draws; widen for smoke runs
        tol = 0.05 * max(1.0, math.sqrt(100_000 / draws))
        rows.append(
            _row(
                f"boundary_average_marginals_k{k}",
                worst,
                tol,
                worst <= tol,
                f"mean err {mean_err:.4f}, var err {var_err:.4f}, {draws} draws",
            )
        )
    return rows


def check_full_noise_partition(ts: TransformStack, seed: int = 0) -> dict:
    fn = sample_full_noise(ts, seed)
    total = sum(fn.component_sizes())
    ok = total == ts.flat_sizes[0]
    return _row("full_noise_partition", total, ts.flat_sizes[0], ok)


def check_t_coverage(ns: NoiseSchedule, draws: int = 10_000, seed: int = 0) -> dict:
    """Uniform time draws hit each stage in proportion to its width."""
    g = torch.Generator().manual_seed(seed + 5)
    ss = ns.stage_sched
    counts = [0] * (ss.K + 1)
    for t in torch.rand(draws, generator=g).tolist():
        counts[stage_of(ss, t)] += 1
    worst = 0.0
    for k in range(ss.K + 1):
        p = ss.width(k)
        if p == 1.0:
            continue  # single stage: coverage is deterministic
        sd = math.sqrt(draws * p * (1 - p))
        worst = max(worst, abs(counts[k] - draws * p) / (3.0 * sd))
    return _row("t_coverage", worst, 1.0, worst <= 1.0, f"counts {counts}")


class _OracleModel:
    """Returns the exact noise and degradation for one known clean image."""

    def __init__(self, ts, ns, x_single):
        self.ts, self.ns, self.x = ts, ns, x_single

    def __call__(self, z, t, k):
        xb = self.x[None].expand(z.shape[0], *self.x.shape)
        x_t, delta_t = interpolated_target(self.ts, self.ns.stage_sched, xb, t)
        pairs = [eval_alpha_sigma(self.ns, float(v), k) for v in t]
        shape = (-1, *([1] * (z.dim() - 1)))
        a = torch.as_tensor([p[0] for p in pairs], dtype=z.dtype).reshape(shape)
        s = torch.as_tensor([p[1] for p in pairs], dtype=z.dtype).reshape(shape)
        eps = (z - a * x_t) / s
        return eps, delta_t


def check_loss_zero_oracle(ts: TransformStack, ns: NoiseSchedule, seed: int = 0) -> dict:
    x = blob_corpus(1, ts.shapes[0][-1], seed=seed + 31)[0]
    oracle = _OracleModel(ts, ns, x)
    batch = x[None].expand(4, *x.shape)
    g = torch.Generator().manual_seed(seed)
    loss = float(training_loss(oracle, ts, ns, batch, g))
    return _row("loss_zero_oracle", loss, 1e-8, loss <= 1e-8)


def _random_model(ts: TransformStack, seed: int) -> Denoiser:
    torch.manual_seed(seed)
    model = Denoiser(ts.shapes)
    with torch.no_grad():
        for ad in model.out_adapters.values():
            ad.weight.normal_(0.0, 0.05)
            ad.bias.normal_(0.0, 0.05)
    return model


def check_gradient_fd(
    ts: TransformStack, ns: NoiseSchedule, n_coords: int = 30, seed: int = 0, tol: float = 1e-3
) -> dict:
    model = _random_model(ts, seed + 7)
    x = blob_corpus(4, ts.shapes[0][-1], seed=seed + 37)
    worst = gradient_check(model, ts, ns, x, seed=seed + 11, n_coords=n_coords)
    return _row("gradient_fd", worst, tol, worst <= tol)


def check_eta0_determinism(ts: TransformStack, ns: NoiseSchedule, dt: float = 0.02, seed: int = 0) -> dict:
    model = _random_model(ts, seed + 13)
    cfg = SamplerConfig(eta=0.0, dt=dt, seed=seed + 1)
    a = generate(model, ts, ns, cfg)
    b = generate(model, ts, ns, cfg)
    err = float((a - b).abs().max())
    return _row("eta0_determinism", err, 0.0, err == 0.0)


def check_trajectory_prefix(ts: TransformStack, ns: NoiseSchedule, dt: float = 0.02, seed: int = 0) -> dict:
    """Changing only finer noise slices leaves the coarse prefix intact."""
    if ts.K == 0:
        return _row("trajectory_prefix", 0.0, 0.0, True, "single stage; trivial")
    model = _random_model(ts, seed + 17)
    fn_a = sample_full_noise(ts, seed + 100)
    fn_b = sample_full_noise(ts, seed + 200)
    fn_b.base = fn_a.base.clone()  # shared coarse slice, different complements
    cfg = SamplerConfig(eta=0.0, dt=dt, seed=seed + 3)
    K = ts.K
    traces: list[list[tuple[int, float, torch.Tensor]]] = [[], []]
    for i, fn in enumerate((fn_a, fn_b)):
        generate(
            model, ts, ns, cfg, full_noise=fn,
            on_step=lambda k, s, z, i=i: traces[i].append((k, s, z.clone())),
        )
    prefix_err = 0.0
    diverged = False
    for (k1, s1, z1), (k2, s2, z2) in zip(*traces):
        if k1 == K and k2 == K:
            prefix_err = max(prefix_err, float((z1 - z2).abs().max()))
        else:
            diverged = diverged or float((z1 - z2).abs().max()) > 0
    ok = prefix_err == 0.0 and diverged
    return _row("trajectory_prefix", prefix_err, 0.0, ok, f"diverged after boundary: {diverged}")


def check_k0_reduction(
    ts: TransformStack, ns: NoiseSchedule, dt: float = 0.004, seed: int = 0, tol: float = 1e-5
) -> dict:
    """Single-stage sampler equals the plain one-stage stepper, both eta."""
    if ts.K != 0:
        return _row("k0_reduction", 0.0, tol, True, "multi-stage config; not applicable")
    model = _random_model(ts, seed + 19)
    worst = 0.0
    for eta in (0.0, 1.0):
        cfg = SamplerConfig(eta=eta, dt=dt, seed=seed + 5)
        zs = []
        generate(model, ts, ns, cfg, on_step=lambda k, s, z: zs.append((s, z.clone())))
        fn = sample_full_noise(ts, seed + 5)
        fresh = torch.Generator().manual_seed(seed + 5 + 1)
        grid = time_grid(ns.stage_sched, dt)[0]
        z = eval_alpha_sigma(ns, 1.0, 0)[1] * fn.base
        ref = []
        for j in range(len(grid) - 1, 0, -1):
            t, s = grid[j], grid[j - 1]
            with torch.no_grad():
                eps_hat, _ = model(z, t, 0)
            te = t if eval_alpha_sigma(ns, t, 0)[0] >= 1e-6 else t - 0.5 * (t - s)
            a_e, s_e = eval_alpha_sigma(ns, te, 0)
            x_hat = (z - s_e * eps_hat) / a_e
            if j > 1:
                a_s, s_s = eval_alpha_sigma(ns, s, 0)
                _, s_ts = transition_coeffs(ns, s, t, 0)
                s_t = eval_alpha_sigma(ns, t, 0)[1]
                bar = s_s * s_ts / s_t
                z = a_s * x_hat + math.sqrt(max(0.0, s_s**2 - eta**2 * bar**2)) * eps_hat
                if eta > 0:
                    z = z + eta * bar * torch.randn(z.shape, generator=fresh, dtype=z.dtype)
                ref.append((s, z.clone()))
        for (s1, z1), (s2, z2) in zip(zs, ref):
            scale = max(float(z2.abs().max()), 1e-12)
            worst = max(worst, float((z1 - z2).abs().max()) / scale)
    return _row("k0_reduction", worst, tol, worst <= tol)


def schedule_csv(ns: NoiseSchedule, points_per_stage: int = 80) -> str:
    """Schedule curves as CSV rows (t, alpha, sigma, stage)."""
    out = io.StringIO()
    out.write("t,alpha,sigma,stage\n")
    ss = ns.stage_sched
    for k in range(ss.K + 1):
        lo, hi = ss.tau[k], ss.tau[k + 1]
        for j in range(points_per_stage + 1):
            t = lo + (hi - lo) * j / points_per_stage
            a, s = eval_alpha_sigma(ns, t, k)
            out.write(f"{t:.6f},{a:.8f},{s:.8f},{k}\n")
    return out.getvalue()


def run_all(ts: TransformStack, ns: NoiseSchedule, scale: float = 1.0, seed: int = 0) -> list[dict]:
    """The full invariant suite for one configured experiment."""
    n = lambda base: max(1000, int(base * scale))
    rows: list[dict] = []
    if ns.mode is RescaleMode.VP:
        rows.append(check_vp_closure(ns, n=max(100, int(10_000 * scale)), seed=seed))
    rows.append(check_chapman_kolmogorov(ns, seed=seed))
    if ts.K > 0:
        rows.append(check_sp_sigma_jump(ts, ns))
    rows.append(check_snr_monotone(ns))
    rows.extend(check_boundary_patch_snr(ts, ns, draws=n(100_000), seed=seed))
    if ts.kind is TransformKind.DS and ts.K > 0:
        sp = build_noise_schedule(ns.stage_sched, ts.flat_sizes, ts.gammas, RescaleMode.SP)
        rows.extend(
            check_boundary_patch_snr(ts, sp, draws=n(100_000), seed=seed)
        )
    rows.extend(check_marginal_consistency(ts, ns, draws=n(100_000), seed=seed))
    rows.extend(check_reverse_consistency(ts, ns, draws=n(50_000), seed=seed))
    rows.append(check_reverse_grid_bayes(ns, seed=seed))
    rows.extend(check_boundary_drop_roundtrip(ts, seed=seed))
    rows.extend(check_boundary_average(ts, draws=n(100_000), seed=seed))
    rows.append(check_full_noise_partition(ts, seed=seed))
    rows.append(check_t_coverage(ns, seed=seed))
    rows.append(check_loss_zero_oracle(ts, ns, seed=seed))
    rows.append(check_gradient_fd(ts, ns, n_coords=max(5, int(30 * scale)), seed=seed))
    rows.append(check_eta0_determinism(ts, ns, seed=seed))
    rows.append(check_trajectory_prefix(ts, ns, seed=seed))
    rows.append(check_k0_reduction(ts, ns, seed=seed))
    return rows
