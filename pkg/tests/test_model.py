import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hdwsr.errors import ConfigError, DimensionError
from hdwsr.model import HDWNet, ModelConfig, SwinLayer, loss_he, timestep_embed


def tiny(**kw):
    base = dict(base_channels=4, levels=2, dfa_repeats=[1, 1], decoder_repeats=[1, 1], encoder_swin=1,
                pfa_repeats=1, time_dim=8, T=4)
    base.update(kw)
    return ModelConfig(**base)


def test_default_layer_counts():
    net = HDWNet(ModelConfig())
    counts = net.layer_counts()
    assert counts["dfa_repeats"] == [2, 4, 4]
    assert counts["decoder_repeats"] == [4, 6, 6]
    assert counts["encoder_swin"] == [2, 2, 2]
    assert counts["pfa_repeats"] == 2 and counts["levels"] == 3


@pytest.mark.parametrize(
    "kw",
    [dict(levels=0), dict(dfa_repeats=[1]), dict(decoder_repeats=[1, 0]), dict(time_dim=7), dict(heads=3),
     dict(prediction="score"), dict(residual_scale=0.0)],
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        tiny(**kw)


def test_channel_plan():
    assert ModelConfig(base_channels=8).channels == [8, 16, 32]


def test_timestep_embed_values():
    e = timestep_embed(1, 4)
    ref = [math.sin(1), math.cos(1), math.sin(0.01), math.cos(0.01)]
    assert e.tolist() == pytest.approx(ref, abs=1e-15)
    assert timestep_embed(torch.tensor([0, 3]), 6).shape == (2, 6)
    assert timestep_embed(0, 6).tolist() == [0.0, 1.0, 0.0, 1.0, 0.0, 1.0]
    with pytest.raises(ConfigError):
        timestep_embed(1, 5)


def test_loss_he_values():
    target = torch.tensor([0.0, 0.0, 0.0, 0.0])
    recon = torch.tensor([1.0, -1.0, 1.0, -1.0])
    assert float(loss_he(target, recon)) == pytest.approx(2.0)
    recon = torch.tensor([3.0, 0.0, 0.0, 0.0])
    assert float(loss_he(target, recon)) == pytest.approx(1.5 + 0.75)


def test_shapes_and_guidance_pyramid():
    net = HDWNet(tiny())
    presr = torch.rand(2, 3, 16, 16)
    recon, guide = net.guidance(presr)
    assert recon.shape == presr.shape
    assert [tuple(b.shape) for b, _, _ in guide.levels] == [(2, 4, 8, 8), (2, 8, 4, 4)]
    eps = net.predict_noise(torch.randn(2, 3, 16, 16), torch.tensor([1, 4]), guide)
    assert eps.shape == presr.shape


def test_non_square_input():
    net = HDWNet(tiny(swin_window=4))
    recon, guide = net.guidance(torch.rand(1, 3, 8, 24))
    assert net.predict_noise(torch.randn(1, 3, 8, 24), 2, guide).shape == (1, 3, 8, 24)


def test_indivisible_input_rejected():
    net = HDWNet(tiny())
    with pytest.raises(DimensionError):
        net.guidance(torch.rand(1, 3, 10, 16))


def test_missing_guidance_rejected():
    net = HDWNet(tiny())
    with pytest.raises(DimensionError):
        net.predict_noise(torch.randn(1, 3, 8, 8), 1, None)


def test_he_net_identity_reconstruction():
    net = HDWNet(tiny())
    net.he_net.reset_to_identity()
    presr = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    recon, guide = net.double().guidance(presr)
    assert torch.allclose(recon, presr, atol=1e-12)


@pytest.mark.parametrize(
    "ablation",
    [dict(sampling="strided-conv"), dict(attention="topk", topk=3), dict(attention="dense"),
     dict(attention="self-only"), dict(guidance="none"), dict(guidance="ha-net-self")],
)
def test_ablation_keeps_shared_init(ablation):
    torch.manual_seed(7)
    ref = HDWNet(tiny()).state_dict()
    torch.manual_seed(7)
    other = HDWNet(tiny(), **ablation).state_dict()
    for name, value in ref.items():
        assert torch.equal(value, other[name]), name


def test_strided_conv_adds_parameters():
    assert HDWNet(tiny(), sampling="strided-conv").num_parameters() > HDWNet(tiny()).num_parameters()


def test_guidance_matters_only_when_used():
    torch.manual_seed(0)
    net = HDWNet(tiny())
    x = torch.randn(1, 3, 16, 16)
    _, g1 = net.guidance(torch.rand(1, 3, 16, 16))
    _, g2 = net.guidance(torch.rand(1, 3, 16, 16))
    assert not torch.allclose(net.predict_noise(x, 2, g1), net.predict_noise(x, 2, g2))
    net.set_ablation(guidance="none")
    assert torch.equal(net.predict_noise(x, 2, g1), net.predict_noise(x, 2, g2))


def test_set_ablation_leaves_weights():
    net = HDWNet(tiny())
    before = {k: v.clone() for k, v in net.state_dict().items()}
    net.set_ablation(attention="topk", topk=2, guidance="ha-net-self")
    assert all(torch.equal(before[k], v) for k, v in net.state_dict().items())
    with pytest.raises(ConfigError):
        net.set_ablation(attention="nope")


@settings(max_examples=20, deadline=None)
@given(t=st.integers(1, 4), seed=st.integers(0, 1000))
def test_prediction_modes_map_head_to_noise(t, seed):
    gen = torch.Generator().manual_seed(seed)
    x_t = torch.randn(2, 3, 8, 8, generator=gen, dtype=torch.float64)
    out = torch.randn(x_t.shape, generator=gen, dtype=torch.float64)
    nets = {mode: HDWNet(tiny(prediction=mode)) for mode in ("eps", "x0", "v")}
    for net in nets.values():
        net.ha_net.forward = lambda x, step, guide: out
    ab = float(nets["v"].schedule.alpha_bars[t - 1])
    steps = torch.full((2,), t)
    assert torch.equal(nets["eps"].predict_noise(x_t, steps, None), out)
    ref_x0 = (x_t - math.sqrt(ab) * out) / math.sqrt(1 - ab)
    assert torch.allclose(nets["x0"].predict_noise(x_t, steps, None), ref_x0, atol=1e-10)
    ref_v = math.sqrt(1 - ab) * x_t + math.sqrt(ab) * out
    assert torch.allclose(nets["v"].predict_noise(x_t, steps, None), ref_v, atol=1e-12)


@pytest.mark.parametrize("mode", ["x0", "v"])
def test_true_head_target_gives_true_noise(mode):
    net = HDWNet(tiny(prediction=mode))
    gen = torch.Generator().manual_seed(3)
    x0 = torch.randn(1, 3, 8, 8, generator=gen, dtype=torch.float64)
    eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
    ab = net.schedule.alpha_bars[2]
    target = x0 if mode == "x0" else ab.sqrt() * eps - (1 - ab).sqrt() * x0
    net.ha_net.forward = lambda x, step, guide: target
    x_t = ab.sqrt() * x0 + (1 - ab).sqrt() * eps
    assert torch.allclose(net.predict_noise(x_t, torch.tensor([3]), None), eps, atol=1e-12)


def test_losses_are_finite_and_differentiable():
    torch.manual_seed(0)
    net = HDWNet(tiny())
    presr = torch.rand(2, 3, 16, 16)
    x0 = 0.1 * torch.randn(2, 3, 16, 16)
    terms = net.losses(presr, x0, torch.tensor([1, 3]), torch.randn_like(x0))
    assert torch.isfinite(terms.total)
    assert terms.total.item() == pytest.approx(0.2 * terms.l_he.item() + 0.8 * terms.l_ha.item(), rel=1e-6)
    terms.total.backward()
    grads = [p.grad for p in net.parameters()]
    assert sum(g is not None and bool(g.abs().sum() > 0) for g in grads) > 0.9 * len(grads)


@settings(max_examples=10, deadline=None)
@given(h=st.sampled_from([4, 8, 12]), w=st.sampled_from([4, 8, 12]), shifted=st.booleans())
def test_swin_layer_shapes(h, w, shifted):
    layer = SwinLayer(8, 2, 4, shifted)
    x = torch.randn(2, h * w, 8)
    assert layer(x, h, w).shape == x.shape


def _reach(layer, token):
    x = torch.randn(1, 16, 4)
    y = x.clone()
    y[0, token] += torch.randn(4)
    with torch.no_grad():
        changed = (layer(x, 4, 4) - layer(y, 4, 4)).abs().sum(-1)[0] > 0
    return set(changed.nonzero().flatten().tolist())


@pytest.mark.parametrize(
    "shifted, token, expected",
    [
        (False, 0, {0, 1, 4, 5}),
        (False, 5, {0, 1, 4, 5}),
        (True, 5, {5, 6, 9, 10}),  # shifted windows straddle the plain ones
        (True, 0, {0}),  # the wrapped corner is masked off from its window mates
        (True, 1, {1, 2}),  # wrapped top row: only horizontal neighbours share a region
    ],
)
def test_window_reach(shifted, token, expected):
    torch.manual_seed(0)
    assert _reach(SwinLayer(4, 1, 2, shifted=shifted), token) == expected
