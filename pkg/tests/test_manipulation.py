"""Tests for the mask manipulation networks, losses and training step."""
import math

import pytest
import torch
from torch.nn import functional as F

from src.config import LossConfig, ModelConfig
from src.guardrails import DimensionError, MaskInvariantError, UsageError
from src.layers import ModulatedConv2d
from src.manipulation import (active_domain_weight, build_manip_networks, cycle_reconstruct,
                              generator_objective, loss_adversarial_and_r1, loss_cycle, loss_diversity,
                              loss_style_reconstruction, one_hot_argmax, sd_weight, shuffle_labels,
                              train_step_manipulation, translate)
from src.trainer import build_state, load_datasets
from src.ingest import batch_at


def _two_domain_model():
    return ModelConfig(img_size=16, num_classes=4, domain_names=["eyeglasses", "hat"], style_widths=[16, 8],
                       channel_divisor=16)


def _masks(batch, num_classes=4, size=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    labels = torch.randint(0, num_classes, (batch, size, size), generator=g)
    return F.one_hot(labels, num_classes).permute(0, 3, 1, 2).float()


def test_network_shapes():
    torch.manual_seed(0)
    nets = build_manip_networks(_two_domain_model())
    x = _masks(2)
    bits = torch.tensor([[0, 1], [1, 0]])
    style = nets.map_style(torch.randn(2, 16), bits)
    assert style.shape == (2, 24)
    assert nets.encode_style(x, bits).shape == (2, 24)
    assert nets.generate(x, style).shape == (2, 4, 16, 16)
    assert nets.discriminate(x, bits).shape == (2, 2)
    probs = nets.generate_probs(x, style)
    assert torch.allclose(probs.sum(dim=1), torch.ones(2, 16, 16), atol=1e-5)
    assert [s.shape[1] for s in torch.split(style, nets.style_widths, dim=1)] == [16, 8]


def test_generator_rejects_wrong_shapes():
    torch.manual_seed(0)
    nets = build_manip_networks(_two_domain_model())
    with pytest.raises(DimensionError):
        nets.generate(_masks(1, size=8), torch.zeros(1, 24))
    with pytest.raises(DimensionError):
        nets.generate(_masks(1), torch.zeros(1, 23))
    with pytest.raises(DimensionError):
        nets.discriminate(_masks(1), torch.zeros(1, 3))


def test_flipping_one_bit_only_changes_that_domain():
    torch.manual_seed(0)
    nets = build_manip_networks(_two_domain_model())
    x = _masks(1)
    z = torch.randn(1, 16)
    a, b = torch.tensor([[0, 0]]), torch.tensor([[0, 1]])
    with torch.no_grad():
        fa, fb = nets.map_style(z, a), nets.map_style(z, b)
        sa, sb = nets.encode_style(x, a), nets.encode_style(x, b)
        da, db = nets.discriminate(x, a), nets.discriminate(x, b)
    assert torch.equal(fa[:, :16], fb[:, :16]) and not torch.equal(fa[:, 16:], fb[:, 16:])
    assert torch.equal(sa[:, :16], sb[:, :16]) and not torch.equal(sa[:, 16:], sb[:, 16:])
    assert torch.equal(da[:, 0], db[:, 0]) and not torch.equal(da[:, 1], db[:, 1])


def test_different_latents_move_every_domain_slice():
    torch.manual_seed(0)
    nets = build_manip_networks(_two_domain_model())
    target = torch.tensor([[1, 0], [0, 1]])
    g = torch.Generator().manual_seed(4)
    with torch.no_grad():
        a = nets.map_style(torch.randn(2, 16, generator=g), target)
        b = nets.map_style(torch.randn(2, 16, generator=g), target)
    for sa, sb in zip(torch.split(a, nets.style_widths, dim=1), torch.split(b, nets.style_widths, dim=1)):
        assert not torch.allclose(sa, sb, atol=1e-6, rtol=0.0)


def test_unselected_discriminator_heads_get_no_gradient():
    torch.manual_seed(0)
    nets = build_manip_networks(_two_domain_model())
    bits = torch.tensor([[1, 0], [1, 0]])
    nets.discriminate(_masks(2), bits).sum().backward()
    for i, bit in enumerate((1, 0)):
        unused = nets.discriminator.heads[i][1 - bit]
        assert all(p.grad is None or float(p.grad.abs().sum()) == 0.0 for p in unused.parameters())
        used = nets.discriminator.heads[i][bit]
        assert any(p.grad is not None and float(p.grad.abs().sum()) > 0.0 for p in used.parameters())


def test_style_reconstruction_hand_value():
    s_hat = torch.tensor([[1.0, -1.0]])
    encoded = torch.tensor([[0.5, 0.0]])
    assert float(loss_style_reconstruction(lambda x, y: encoded, None, None, s_hat)) == pytest.approx(0.75)
    assert float(loss_style_reconstruction(lambda x, y: s_hat, None, None, s_hat)) == 0.0


def test_diversity_loss_is_zero_for_equal_styles():
    gen = lambda x, s: x * s.sum()
    x = torch.ones(1, 2, 2, 2)
    s = torch.tensor([[1.0, 2.0]])
    assert float(loss_diversity(gen, x, s, s)) == 0.0
    assert float(loss_diversity(gen, x, s, s * 2)) == pytest.approx(3.0)


def test_one_ascent_step_increases_the_diversity_term():
    torch.manual_seed(0)
    nets = build_manip_networks(_two_domain_model()).double()
    x = _masks(2).double()
    target = torch.tensor([[1, 0], [0, 1]])
    g = torch.Generator().manual_seed(1)
    with torch.no_grad():
        s1 = nets.map_style(torch.randn(2, 16, generator=g, dtype=torch.float64), target)
        s2 = nets.map_style(torch.randn(2, 16, generator=g, dtype=torch.float64), target)
    params = list(nets.generator.parameters())
    before = loss_diversity(nets.generate_probs, x, s1, s2)
    grads = torch.autograd.grad(before, params, allow_unused=True)
    norm = math.sqrt(sum(float(gr.pow(2).sum()) for gr in grads if gr is not None))
    assert norm > 0.0
    with torch.no_grad():
        for p, gr in zip(params, grads):
            if gr is not None:
                p.add_(1e-4 * gr / norm)
        after = loss_diversity(nets.generate_probs, x, s1, s2)
    assert float(after) > float(before)


def test_cycle_loss_with_identity_generator():
    x = _masks(2)
    ident = lambda x_in, s: x_in
    enc = lambda x_in, y: torch.zeros(x_in.shape[0], 3)
    assert float(loss_cycle(ident, enc, x, None, x)) == 0.0
    assert float(loss_cycle(ident, enc, x, None, 1 - x)) == pytest.approx(float(torch.mean(torch.abs(2 * x - 1))))


def test_cycle_loss_does_not_train_the_style_encoder():
    torch.manual_seed(0)
    nets = build_manip_networks(_two_domain_model())
    x = _masks(2)
    y = torch.tensor([[0, 1], [1, 1]])
    fake = nets.generate_probs(x, nets.map_style(torch.randn(2, 16), 1 - y))
    loss = loss_cycle(nets.generate_probs, nets.encode_style, x, y, fake)
    grads = torch.autograd.grad(loss, list(nets.style_encoder.parameters()), allow_unused=True)
    assert all(g is None or float(g.abs().sum()) == 0.0 for g in grads)
    sty = loss_style_reconstruction(nets.encode_style, fake, 1 - y, torch.zeros(2, 24))
    grads = torch.autograd.grad(sty, list(nets.style_encoder.parameters()), allow_unused=True)
    assert any(g is not None and float(g.abs().sum()) > 0.0 for g in grads)


def test_adversarial_terms_for_constant_discriminator():
    disc = lambda x, d: (x * 0).sum(dim=(1, 2, 3))[:, None].expand(-1, d.shape[1])
    x = _masks(3)
    bits = torch.zeros(3, 2, dtype=torch.long)
    terms = loss_adversarial_and_r1(disc, x, x.clone(), bits, bits, r1_gamma=4.0)
    for value in (terms.g, terms.d_real, terms.d_fake):
        assert float(value) == pytest.approx(math.log(2.0))
    assert float(terms.r1) == 0.0
    assert float(terms.d_total) == pytest.approx(2 * math.log(2.0))


def test_active_domain_weight_modes():
    y = torch.tensor([[0, 1], [1, 1]])
    y_hat = torch.tensor([[1, 1], [1, 0]])
    assert active_domain_weight(y, y_hat, "all") is None
    assert active_domain_weight(y, y_hat, "changed").tolist() == [[1.0, 0.0], [0.0, 1.0]]
    with pytest.raises(UsageError):
        active_domain_weight(y, y_hat, "some")


def test_sd_weight_anneals_linearly_to_zero():
    loss = LossConfig(lambda_sd=2.0, sd_anneal_steps=10)
    assert sd_weight(loss, 0) == 2.0
    assert sd_weight(loss, 5) == pytest.approx(1.0)
    assert sd_weight(loss, 50) == 0.0
    assert sd_weight(LossConfig(lambda_sd=2.0, sd_anneal_steps=0), 50) == 2.0


def test_shuffle_labels_keeps_multiset():
    y = torch.tensor([[0, 1], [1, 1], [0, 0], [1, 0]])
    shuffled = shuffle_labels(y, torch.Generator().manual_seed(3))
    assert sorted(map(tuple, shuffled.tolist())) == sorted(map(tuple, y.tolist()))


def test_zero_weights_reduce_objective_to_adversarial_gradient():
    torch.manual_seed(0)
    nets = build_manip_networks(_two_domain_model())
    x = _masks(2)
    y = torch.tensor([[0, 1], [1, 0]])
    z1, z2 = torch.randn(2, 16), torch.randn(2, 16)
    loss = LossConfig(lambda_rec=0.0, lambda_sty=0.0, lambda_sd=0.0)
    params = list(nets.generator.parameters())
    terms = generator_objective(nets, x, y, y.flip(0), z1, z2, loss, lambda_sd=0.0)
    total = torch.autograd.grad(terms["g_total"], params, retain_graph=True, allow_unused=True)
    adv = torch.autograd.grad(terms["g_adv"], params, allow_unused=True)
    for a, b in zip(total, adv):
        assert (a is None) == (b is None)
        if a is not None:
            assert torch.allclose(a, b, atol=1e-12)


def test_one_hot_argmax_ties_go_to_lowest_index():
    out = one_hot_argmax(torch.zeros(1, 3, 2, 2))
    assert out[0, 0].sum() == 4 and out[0, 1:].sum() == 0


def test_translate_outputs_one_hot_and_needs_reference():
    torch.manual_seed(0)
    nets = build_manip_networks(_two_domain_model())
    x = _masks(2)
    target = torch.tensor([[1, 0], [0, 1]])
    z = torch.randn(2, 16)
    out = translate(nets, x, target, "latent", z=z)
    assert torch.equal(out.sum(dim=1), torch.ones(2, 16, 16))
    assert torch.equal(out, translate(nets, x, target, "latent", z=z))
    assert translate(nets, x, target, "reference", reference=_masks(2, seed=1)).shape == x.shape
    with pytest.raises(UsageError):
        translate(nets, x, target, "reference")
    with pytest.raises(UsageError):
        translate(nets, x, target, "sketch")
    back = cycle_reconstruct(nets, x, 1 - target, out)
    assert back.shape == x.shape


def test_translate_rejects_soft_masks():
    torch.manual_seed(0)
    nets = build_manip_networks(_two_domain_model())
    x = _masks(2)
    soft = torch.full_like(x, 0.25)
    target = torch.tensor([[1, 0], [0, 1]])
    with pytest.raises(MaskInvariantError):
        translate(nets, soft, target, "latent")
    with pytest.raises(MaskInvariantError):
        translate(nets, x, target, "reference", reference=soft)
    with pytest.raises(MaskInvariantError):
        cycle_reconstruct(nets, soft, target, x)


def test_train_step_is_deterministic(tiny_config):
    cfg = tiny_config()
    train, _ = load_datasets(cfg)
    batch = batch_at(train, cfg.optim.batch_size, cfg.seed, 0)
    states = [build_state(cfg) for _ in range(2)]
    reports = []
    for state in states:
        reports.append([train_step_manipulation(state, batch, state.rng) for _ in range(2)])
    assert reports[0] == reports[1]
    assert set(reports[0][0]) == {"d_real", "d_fake", "r1", "d_total", "g_adv", "sty", "ds", "cyc", "g_total",
                                  "lambda_sd"}
    a, b = states[0].nets.state_dict(), states[1].nets.state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert states[0].step == 2


def test_accumulated_micro_batches_run(tiny_config):
    cfg = tiny_config(optim={"grad_accumulation": 2})
    train, _ = load_datasets(cfg)
    state = build_state(cfg)
    micro = [batch_at(train, 2, cfg.seed, j) for j in range(2)]
    report = train_step_manipulation(state, micro, state.rng)
    assert all(math.isfinite(v) for v in report.values())


def test_adain_conditioning_builds_a_style_driven_generator():
    torch.manual_seed(0)
    cfg = _two_domain_model()
    cfg.manipulation_conditioning = "adain"
    nets = build_manip_networks(cfg)
    assert not any(isinstance(m, ModulatedConv2d) for m in nets.generator.modules())
    x = _masks(2)
    a, b = torch.randn(2, 24), torch.randn(2, 24)
    with torch.no_grad():
        out_a, out_b = nets.generate(x, a), nets.generate(x, b)
    assert out_a.shape == (2, 4, 16, 16)
    assert not torch.allclose(out_a, out_b)
    with pytest.raises(DimensionError):
        nets.generate(x, torch.zeros(2, 23))


def test_adain_train_step_runs(tiny_config):
    cfg = tiny_config(model={"manipulation_conditioning": "adain"})
    train, _ = load_datasets(cfg)
    state = build_state(cfg)
    report = train_step_manipulation(state, batch_at(train, 2, cfg.seed, 0), state.rng)
    assert all(math.isfinite(v) for v in report.values())
    assert state.step == 1
