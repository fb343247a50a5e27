import pytest
import torch

from stagediff.corpus import blob_corpus
from stagediff.denoiser import Denoiser, predict, sinusoidal_embedding, x_from_eps
from stagediff.diffusion import LatentState, q_sample
from stagediff.schedules import (
    RescaleMode,
    StageKind,
    build_noise_schedule,
    build_stage_schedule,
    eval_alpha_sigma,
)
from stagediff.transforms import make_downsample_stack, fit_linear_autoencoder, make_autoencoder_stack


@pytest.fixture(scope="module")
def setup():
    ts = make_downsample_stack((3, 32, 32), 2)
    ss = build_stage_schedule(2, StageKind.COSINE)
    ns = build_noise_schedule(ss, ts.flat_sizes, ts.gammas, RescaleMode.VP)
    torch.manual_seed(0)
    model = Denoiser(ts.shapes)
    return ts, ns, model


def test_parameter_budget(setup):
    _, _, model = setup
    assert model.parameter_count() <= 100_000


def test_output_shapes_every_stage(setup):
    ts, _, model = setup
    for k, shape in enumerate(ts.shapes):
        z = torch.randn(2, *shape)
        eps, delta = model(z, torch.tensor([0.3, 0.6]), k)
        assert eps.shape == z.shape and delta.shape == z.shape


def test_unbatched_input(setup):
    ts, _, model = setup
    z = torch.randn(*ts.shapes[1])
    eps, delta = model(z, 0.6, 1)
    assert eps.shape == z.shape and delta.shape == z.shape


def test_deterministic(setup):
    ts, _, model = setup
    z = torch.randn(1, *ts.shapes[0])
    a = model(z, 0.2, 0)
    b = model(z, 0.2, 0)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_zero_init_output_adapters(setup):
    ts, _, _ = setup
    torch.manual_seed(1)
    fresh = Denoiser(ts.shapes)
    z = torch.randn(1, *ts.shapes[0])
    with torch.no_grad():
        eps, delta = fresh(z, 0.4, 0)
    assert float(eps.abs().max()) == 0.0
    assert float(delta.abs().max()) == 0.0


def test_unregistered_shape_rejected(setup):
    _, _, model = setup
    with pytest.raises(ValueError, match="adapter"):
        model(torch.randn(1, 5, 32, 32), 0.5, 0)


def test_stage_embedding_distinguishes_equal_shapes():
    # blur-style stack: every stage has the same shape, one adapter pair
    torch.manual_seed(2)
    model = Denoiser([(3, 16, 16)] * 3)
    with torch.no_grad():
        for ad in model.out_adapters.values():
            ad.weight.normal_()
    assert len(model.in_adapters) == 1
    z = torch.randn(1, 3, 16, 16)
    out0 = model(z, 0.5, 0)[0]
    out1 = model(z, 0.5, 1)[0]
    assert not torch.allclose(out0, out1)


def test_trunk_shared_but_adapters_independent(setup):
    ts, ns, _ = setup
    torch.manual_seed(3)
    model = Denoiser(ts.shapes)
    z0 = torch.randn(1, *ts.shapes[0])
    before = model(z0, 0.2, 0)[0].clone()
    with torch.no_grad():
        key_stage1 = "3x16x16"
        model.in_adapters[key_stage1].weight.add_(1.0)
        model.out_adapters[key_stage1].weight.add_(1.0)
    after = model(z0, 0.2, 0)[0]
    assert torch.equal(before, after)


def test_sinusoidal_embedding_shapes():
    emb = sinusoidal_embedding(torch.tensor([0.0, 0.5, 1.0]), 32)
    assert emb.shape == (3, 32)
    assert not torch.allclose(emb[0], emb[1])


class TestXFromEps:
    def test_algebraic_inverse(self, setup):
        ts, ns, _ = setup
        x = blob_corpus(1, 32, seed=30)[0]
        g = torch.Generator().manual_seed(4)
        eps = torch.randn(3, 16, 16, generator=g)
        t = 0.6
        z = q_sample(ts, ns, x, t, eps)
        from stagediff.transforms import interpolated_target

        x_t, _ = interpolated_target(ts, ns.stage_sched, x, t)
        assert torch.allclose(x_from_eps(ns, z, eps), x_t, atol=1e-5)

    def test_identity_at_zero(self, setup):
        _, ns, _ = setup
        z = LatentState(z=torch.randn(3, 32, 32), t=0.0, k=0)
        assert torch.equal(x_from_eps(ns, z, torch.randn(3, 32, 32)), z.z)

    def test_round_trip(self, setup):
        _, ns, _ = setup
        g = torch.Generator().manual_seed(5)
        z = LatentState(z=torch.randn(3, 8, 8, generator=g), t=0.9, k=2)
        eps = torch.randn(3, 8, 8, generator=g)
        x = x_from_eps(ns, z, eps)
        a, s = eval_alpha_sigma(ns, 0.9, 2)
        assert torch.allclose(a * x + s * eps, z.z, atol=1e-6)

    def test_alpha_floor_clamps_near_one(self, setup):
        _, ns, _ = setup
        z = LatentState(z=torch.ones(3, 8, 8), t=1.0, k=2)
        out = x_from_eps(ns, z, torch.zeros(3, 8, 8))
        assert torch.isfinite(out).all()
        # clamped inversion divides by the floored alpha, not by ~0
        assert float(out.abs().max()) <= 2.0 / 1e-6

    def test_override_time(self, setup):
        _, ns, _ = setup
        z = LatentState(z=torch.ones(3, 8, 8), t=1.0, k=2)
        out = x_from_eps(ns, z, torch.zeros(3, 8, 8), t_override=0.998)
        a, _ = eval_alpha_sigma(ns, 0.998, 2)
        assert torch.allclose(out, torch.ones(3, 8, 8) / a)

    def test_batched_times(self, setup):
        _, ns, _ = setup
        g = torch.Generator().manual_seed(6)
        zb = torch.randn(2, 3, 16, 16, generator=g)
        eps = torch.randn(2, 3, 16, 16, generator=g)
        tvec = torch.tensor([0.55, 0.7])
        out = x_from_eps(ns, LatentState(z=zb, t=tvec, k=1), eps)
        for i, t in enumerate(tvec.tolist()):
            single = x_from_eps(ns, LatentState(z=zb[i], t=t, k=1), eps[i])
            assert torch.allclose(out[i], single, atol=1e-6)


def test_predict_wrapper(setup):
    ts, ns, model = setup
    z = q_sample(ts, ns, blob_corpus(1, 32, seed=31)[0], 0.3, torch.zeros(3, 32, 32))
    out = predict(model, z)
    assert out.eps_pred.shape == z.z.shape
    assert out.delta_pred.shape == z.z.shape


def test_autoencoder_stack_shapes():
    ae = fit_linear_autoencoder(blob_corpus(300, 32, seed=32), (4, 8, 8))
    ts = make_autoencoder_stack(ae, gamma=2.0)
    torch.manual_seed(7)
    model = Denoiser(ts.shapes)
    z = torch.randn(2, 4, 8, 8)
    eps, delta = model(z, torch.tensor([0.8, 0.9]), 1)
    assert eps.shape == z.shape and delta.shape == z.shape
