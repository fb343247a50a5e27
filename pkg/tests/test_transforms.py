import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from stagediff.corpus import blob_corpus
from stagediff.schedules import StageKind, build_stage_schedule
from stagediff.transforms import (
    blur_sigma,
    bilinear_upsample,
    box_downsample,
    estimate_gamma,
    fit_linear_autoencoder,
    forward_step,
    forward_to_stage,
    g_map,
    gaussian_blur_freq,
    interpolated_target,
    make_autoencoder_stack,
    make_blur_g_stack,
    make_blur_u_stack,
    make_downsample_stack,
    stage_endpoint,
)


@pytest.fixture(scope="module")
def smooth_batch():
    return blob_corpus(8, 32, seed=11)


class TestDownsample:
    def test_identity_stage(self, smooth_batch):
        ts = make_downsample_stack((3, 32, 32), 2)
        x = smooth_batch[0]
        assert torch.equal(forward_to_stage(ts, x, 0), x)

    def test_two_by_two_average(self):
        ts = make_downsample_stack((1, 2, 2), 1)
        x = torch.tensor([[[1.0, 3.0], [5.0, 7.0]]])
        assert torch.equal(forward_to_stage(ts, x, 1), torch.tensor([[[4.0]]]))

    def test_g_map_constant_upsample(self):
        ts = make_downsample_stack((1, 2, 2), 1)
        out = g_map(ts, torch.tensor([[[4.0]]]), 1)
        assert torch.equal(out, torch.full((1, 2, 2), 4.0))

    def test_shapes(self, smooth_batch):
        ts = make_downsample_stack((3, 32, 32), 2)
        assert ts.shapes == ((3, 32, 32), (3, 16, 16), (3, 8, 8))
        assert forward_to_stage(ts, smooth_batch, 2).shape == (8, 3, 8, 8)

    def test_k_out_of_range(self, smooth_batch):
        ts = make_downsample_stack((3, 32, 32), 2)
        with pytest.raises(ValueError):
            forward_to_stage(ts, smooth_batch[0], 3)
        with pytest.raises(ValueError):
            g_map(ts, smooth_batch[0], 0)

    def test_shape_mismatch(self):
        ts = make_downsample_stack((3, 32, 32), 2)
        with pytest.raises(ValueError):
            forward_to_stage(ts, torch.zeros(3, 16, 16), 1)


class TestBlur:
    def test_constant_preserved(self):
        for sigma in (0.5, 2.0, 15.0):
            x = torch.full((3, 16, 16), 0.37)
            out = gaussian_blur_freq(x, sigma)
            assert torch.allclose(out, x, atol=1e-10)

    def test_zero_sigma_identity(self):
        x = torch.randn(3, 16, 16)
        assert torch.equal(gaussian_blur_freq(x, 0.0), x)

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            gaussian_blur_freq(torch.zeros(1, 4, 4), -1.0)

    def test_impulse_matches_spatial_convolution(self):
        # oracle: direct convolution with a sampled, truncated Gaussian
        # under symmetric (Neumann) boundary handling
        import scipy.ndimage

        sigma = 2.0
        x = torch.zeros(1, 33, 33, dtype=torch.float64)
        x[0, 16, 16] = 1.0
        out = gaussian_blur_freq(x, sigma)
        ref = scipy.ndimage.gaussian_filter(
            x[0].numpy(), sigma=sigma, mode="reflect", truncate=8.0
        )
        assert float(np.abs(out[0].numpy() - ref).max()) < 1e-3

    @settings(max_examples=25, deadline=None)
    @given(st.floats(min_value=0.0, max_value=20.0))
    def test_energy_non_increasing(self, sigma):
        g = torch.Generator().manual_seed(5)
        x = torch.randn(2, 8, 8, generator=g)
        assert float(gaussian_blur_freq(x, sigma).norm()) <= float(x.norm()) + 1e-8

    def test_blur_sigma_formula(self):
        ss = build_stage_schedule(7, StageKind.COSINE)
        assert blur_sigma(ss, 0) == 0.0
        assert blur_sigma(ss, 8) == pytest.approx(15.0)
        values = [blur_sigma(ss, k) for k in range(8)]
        assert values == sorted(values)
        for k in range(8):
            assert values[k] == pytest.approx(
                15.0 * math.sin(0.5 * math.pi * ss.tau[k]) ** 2
            )

    def test_blur_g_stage_composition_exact(self, smooth_batch):
        ss = build_stage_schedule(3, StageKind.COSINE)
        ts = make_blur_g_stack((3, 32, 32), ss)
        x = smooth_batch[0]
        for k in range(3):
            direct = gaussian_blur_freq(x, ts.blur_sigmas[k + 1])
            composed = forward_to_stage(ts, x, k + 1)
            assert torch.allclose(direct, composed, atol=1e-5)

    def test_blur_g_map_is_identity(self, smooth_batch):
        ss = build_stage_schedule(3, StageKind.COSINE)
        ts = make_blur_g_stack((3, 32, 32), ss)
        xk = forward_to_stage(ts, smooth_batch[0], 1)
        assert torch.equal(g_map(ts, xk, 1), xk)


class TestBlurU:
    def test_first_stage_equals_ds_plus_upsample(self, smooth_batch):
        ts_u = make_blur_u_stack((3, 32, 32), 2)
        ts_d = make_downsample_stack((3, 32, 32), 2)
        x = smooth_batch[0]
        expected = bilinear_upsample(forward_to_stage(ts_d, x, 1))
        assert torch.allclose(forward_to_stage(ts_u, x, 1), expected, atol=1e-6)

    def test_deeper_stage_reference_composition(self, smooth_batch):
        # stage k applies: reduce k+1 levels from the previous blur level,
        # then expand back; verified against a hand-rolled composition
        ts_u = make_blur_u_stack((3, 32, 32), 2)
        x = smooth_batch[0]
        y = x
        for k in range(2):
            z = y
            for _ in range(k + 1):
                z = box_downsample(z)
            for _ in range(k + 1):
                z = bilinear_upsample(z)
            y = z
        assert torch.allclose(forward_to_stage(ts_u, x, 2), y, atol=1e-6)


@pytest.mark.parametrize("kind", ["ds", "blur_u", "blur_g"])
def test_forward_compositionality(kind, smooth_batch):
    ss = build_stage_schedule(2, StageKind.COSINE)
    ts = {
        "ds": make_downsample_stack((3, 32, 32), 2),
        "blur_u": make_blur_u_stack((3, 32, 32), 2),
        "blur_g": make_blur_g_stack((3, 32, 32), ss),
    }[kind]
    x = smooth_batch[:2]
    for k in range(ts.K):
        lhs = forward_to_stage(ts, x, k + 1)
        rhs = forward_step(ts, forward_to_stage(ts, x, k), k)
        assert torch.allclose(lhs, rhs, atol=1e-6)


class TestInterpolatedTarget:
    def setup_method(self):
        self.ts = make_downsample_stack((3, 32, 32), 2)
        self.ss = build_stage_schedule(2, StageKind.LINEAR)
        self.x = blob_corpus(1, 32, seed=3)[0]

    def test_left_endpoint(self):
        tau1 = self.ss.tau[1]
        x_t, delta = interpolated_target(self.ts, self.ss, self.x, tau1)
        xk = forward_to_stage(self.ts, self.x, 1)
        assert torch.allclose(x_t, xk, atol=1e-6)
        assert float(delta.abs().max()) < 1e-6

    def test_right_endpoint_limit(self):
        tau2 = self.ss.tau[2]
        x_t, delta = interpolated_target(self.ts, self.ss, self.x, tau2 - 1e-9)
        xk = forward_to_stage(self.ts, self.x, 1)
        endpoint = stage_endpoint(self.ts, xk, 1)
        assert torch.allclose(x_t, endpoint, atol=1e-6)
        assert torch.allclose(delta, xk - endpoint, atol=1e-6)

    def test_midpoint(self):
        t = 0.5 * (self.ss.tau[1] + self.ss.tau[2])
        x_t, _ = interpolated_target(self.ts, self.ss, self.x, t)
        xk = forward_to_stage(self.ts, self.x, 1)
        endpoint = stage_endpoint(self.ts, xk, 1)
        assert torch.allclose(x_t, 0.5 * (xk + endpoint), atol=1e-6)

    def test_affine_in_time(self):
        t1, t2, lam = 0.36, 0.52, 0.3
        x1, _ = interpolated_target(self.ts, self.ss, self.x, t1)
        x2, _ = interpolated_target(self.ts, self.ss, self.x, t2)
        xm, _ = interpolated_target(self.ts, self.ss, self.x, lam * t1 + (1 - lam) * t2)
        assert torch.allclose(xm, lam * x1 + (1 - lam) * x2, atol=1e-6)

    def test_last_stage_has_zero_degradation(self):
        for t in (self.ss.tau[2], 0.9, 1.0):
            _, delta = interpolated_target(self.ts, self.ss, self.x, t)
            assert float(delta.abs().max()) == 0.0

    def test_batched_times_match_scalar(self):
        x = blob_corpus(3, 32, seed=4)
        tvec = torch.tensor([0.36, 0.40, 0.62])
        x_t, delta = interpolated_target(self.ts, self.ss, x, tvec)
        for i, t in enumerate(tvec.tolist()):
            xi, di = interpolated_target(self.ts, self.ss, x[i], t)
            assert torch.allclose(x_t[i], xi, atol=1e-6)
            assert torch.allclose(delta[i], di, atol=1e-6)


class TestGamma:
    def test_blur_is_exactly_one(self, smooth_batch):
        ss = build_stage_schedule(3, StageKind.COSINE)
        ts = make_blur_g_stack((3, 32, 32), ss)
        assert estimate_gamma(ts, smooth_batch, 1) == pytest.approx(1.0, abs=1e-12)

    def test_downsampling_near_one(self, smooth_batch):
        ts = make_downsample_stack((3, 32, 32), 2)
        g = estimate_gamma(ts, blob_corpus(64, 32, seed=7), 1)
        assert 0.85 < g < 1.05

    def test_empty_dataset_rejected(self):
        ts = make_downsample_stack((3, 32, 32), 2)
        with pytest.raises(ValueError):
            estimate_gamma(ts, [], 1)


class TestLinearAutoencoder:
    def test_reconstruction_matches_least_squares(self):
        # independent oracle: optimal rank-m reconstruction error from the
        # singular values of the centered data matrix
        g = torch.Generator().manual_seed(9)
        n, shape, latent = 300, (1, 8, 8), (1, 4, 4)
        base = torch.randn(n, 20, generator=g) @ torch.randn(20, 64, generator=g)
        x = (base / 10).reshape(n, *shape) + 0.01 * torch.randn(n, *shape, generator=g)
        ae = fit_linear_autoencoder(x, latent)
        recon = ae.decode(ae.encode(x))
        mse = float((recon - x).pow(2).sum() / n)
        flat = x.reshape(n, -1).to(torch.float64)
        centered = (flat - flat.mean(dim=0)).numpy()
        svals = np.linalg.svd(centered, compute_uv=False)
        expected = float((svals[16:] ** 2).sum() / n)
        assert mse == pytest.approx(expected, rel=1e-4)

    def test_stack_wiring(self, smooth_batch):
        ae = fit_linear_autoencoder(blob_corpus(300, 32, seed=8), (4, 8, 8))
        ts = make_autoencoder_stack(ae, fit_set=blob_corpus(300, 32, seed=8))
        assert ts.shapes == ((3, 32, 32), (4, 8, 8))
        assert ts.dim_ratio(1) == 12.0
        z = forward_to_stage(ts, smooth_batch[0], 1)
        assert z.shape == (4, 8, 8)
        assert torch.allclose(g_map(ts, z, 1), ae.decode(z))
        assert ts.gammas[0] > 0

    def test_too_few_samples_rejected(self):
        with pytest.raises(ValueError):
            fit_linear_autoencoder(torch.randn(10, 3, 32, 32), (4, 8, 8))
