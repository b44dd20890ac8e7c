"""Stage 2: RGB synthesis from a semantic mask and a per-region style matrix.

Generator: the mask, nearest-resampled to the start resolution, goes through a
small feature extractor; a trunk of SAC layers (with noise and fused leaky
ReLU) then up-samples to the output size. The last layers, including the RGB
head, use mask-only conditioning (SAC*); `model.mask_only_layers` sets how many.
The RGB head is linear; clamp only for export.

Style matrices are [B, R, D]: extracted from an image by `RegionEncoder`
(conv trunk + mask average pooling) or sampled through `RegionMapping`.

Training alternates two updates: random generation (mapping network styles,
plain StyleGAN2 adversarial game with lazy R1) and reference generation
(encoder styles, adversarial + feature matching for G and S).

`model.synthesis_variant` selects the ablation ladder: `spade` (every layer
mask-only, random steps only), `matrix` (style matrix, random steps only) and
`full` (style matrix plus the encoder, alternating).
"""
from __future__ import annotations
import math
from typing import Dict, List, Optional, Sequence, Tuple

import torch
from torch import nn
from torch.nn import functional as F

from .adversarial import (discriminator_fake_loss, discriminator_real_loss, generator_loss,
                          r1_penalty)
from .config import Config, ModelConfig, OptimConfig
from .guardrails import DimensionError, guard_losses, guard_same_spatial
from .layers import (EqualConv2d, EqualLinear, FusedLeakyReLU, NoiseInjection,
                     SemanticAdaptiveConv2d, mask_average_pool, pixel_norm, resample_blur,
                     resample_mask)

def _channels(cfg: ModelConfig, res: int) -> int:
    return cfg.scaled(cfg.synth_channels.get(res, cfg.max_channels))


class StyledLayer(nn.Module):
    def __init__(self, in_channel: int, out_channel: int, cfg: ModelConfig, upsample: bool = False,
                 mask_only: bool = False):
        super().__init__()
        self.conv = SemanticAdaptiveConv2d(in_channel, out_channel, 3, cfg.num_classes, cfg.region_style_dim,
                                           upsample=upsample, mask_only=mask_only, bias=False)
        self.noise = NoiseInjection(out_channel)
        self.act = FusedLeakyReLU(out_channel)

    def forward(self, h, sm, mask, noise=None, generator=None):
        out = self.conv(h, sm, mask)
        out = self.noise(out, noise=noise, generator=generator)
        return self.act(out)


class SynthGenerator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.num_classes = cfg.num_classes
        self.img_size = cfg.img_size
        self.start_res = cfg.start_res
        self.style_dim = cfg.region_style_dim
        c0 = _channels(cfg, cfg.start_res)
        self.extractor = nn.Sequential(
            EqualConv2d(cfg.num_classes, c0, 3, padding=1), FusedLeakyReLU(c0),
            EqualConv2d(c0, c0, 3, padding=1), FusedLeakyReLU(c0),
        )
        specs: List[Tuple[int, int, bool]] = [(c0, c0, False)]
        self.resolutions: List[int] = [cfg.start_res]
        res, prev = cfg.start_res, c0
        while res < cfg.img_size:
            res *= 2
            ch = _channels(cfg, res)
            specs += [(prev, ch, True), (ch, ch, False)]
            self.resolutions += [res, res]
            prev = ch
        n_total = len(specs) + 1
        n_mask_only = n_total if cfg.synthesis_variant == "spade" else min(cfg.mask_only_layers, n_total - 1)
        first_mask_only = n_total - n_mask_only
        self.layers = nn.ModuleList(
            StyledLayer(cin, cout, cfg, upsample=up, mask_only=i >= first_mask_only)
            for i, (cin, cout, up) in enumerate(specs))
        self.to_rgb = SemanticAdaptiveConv2d(prev, 3, 1, cfg.num_classes, cfg.region_style_dim,
                                             demodulate=False, mask_only=True)

    def make_noise(self, batch: int, generator: Optional[torch.Generator] = None,
                   dtype: torch.dtype = torch.float32) -> List[torch.Tensor]:
        return [torch.randn(batch, 1, r, r, generator=generator, dtype=dtype) for r in self.resolutions]

    def forward(self, mask: torch.Tensor, sm: torch.Tensor, noise: Optional[Sequence[torch.Tensor]] = None,
                generator: Optional[torch.Generator] = None) -> torch.Tensor:
        expected = (self.num_classes, self.img_size, self.img_size)
        if mask.ndim != 4 or tuple(mask.shape[1:]) != expected:
            raise DimensionError(f"mask must be [B, {expected[0]}, {expected[1]}, {expected[2]}],"
                                 f" got {tuple(mask.shape)}")
        if sm.shape != (mask.shape[0], self.num_classes, self.style_dim):
            raise DimensionError(f"style matrix must be [{mask.shape[0]}, {self.num_classes}, "
                                 f"{self.style_dim}], got {tuple(sm.shape)}")
        if noise is not None and len(noise) != len(self.layers):
            raise DimensionError(f"expected {len(self.layers)} noise fields, got {len(noise)}")
        h = self.extractor(resample_mask(mask, (self.start_res, self.start_res)))
        for i, layer in enumerate(self.layers):
            h = layer(h, sm, mask, noise=None if noise is None else noise[i].to(h), generator=generator)
        return self.to_rgb(h, sm, mask)


class RegionEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch = cfg.scaled(cfg.encoder_base_channels)
        max_ch = cfg.scaled(cfg.max_channels)
        self.stem = nn.Sequential(EqualConv2d(3, ch, 3, padding=1), FusedLeakyReLU(ch))
        self.downs = nn.ModuleList()
        for _ in range(cfg.encoder_downsamples):
            out = min(ch * 2, max_ch)
            self.downs.append(nn.Sequential(EqualConv2d(ch, out, 3, padding=1), FusedLeakyReLU(out)))
            ch = out
        self.to_style = EqualConv2d(ch, cfg.region_style_dim, 3, padding=1)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = self.stem(x)
        for block in self.downs:
            h = block(resample_blur(h, "down"))
        return self.to_style(h)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        guard_same_spatial(x, mask, "encoder image/mask")
        if x.shape[0] != mask.shape[0]:
            raise DimensionError(f"batch mismatch {x.shape[0]} != {mask.shape[0]}")
        feats = self.features(x)
        return mask_average_pool(feats, resample_mask(mask, feats.shape[-2:]))


class RegionMapping(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.num_classes = cfg.num_classes
        self.style_dim = cfg.region_style_dim
        width = cfg.num_classes * cfg.region_style_dim
        self.layers = nn.Sequential(*[
            EqualLinear(width, width, lr_mul=cfg.mapping_lr_mul, activation=True)
            for _ in range(cfg.mapping_layers)])

    @property
    def code_dim(self) -> int:
        return self.num_classes * self.style_dim

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 2 or z.shape[1] != self.code_dim:
            raise DimensionError(f"code must be [B, {self.code_dim}], got {tuple(z.shape)}")
        return self.layers(pixel_norm(z)).view(-1, self.num_classes, self.style_dim)


def minibatch_stddev(h: torch.Tensor, group_size: int, eps: float = 1e-8) -> torch.Tensor:
    """Append one channel holding the mean feature std within each batch group."""
    batch, channel, height, width = h.shape
    group = min(batch, group_size)
    while batch % group:
        group -= 1
    stddev = h.view(group, -1, channel, height, width)
    stddev = torch.sqrt(stddev.var(0, unbiased=False) + eps)
    stddev = stddev.mean(dim=(1, 2, 3)).view(-1, 1, 1, 1)
    stddev = stddev.repeat(group, 1, height, width)
    return torch.cat([h, stddev], dim=1)


class DiscBlock(nn.Module):
    def __init__(self, in_channel: int, out_channel: int):
        super().__init__()
        self.conv1 = nn.Sequential(EqualConv2d(in_channel, in_channel, 3, padding=1), FusedLeakyReLU(in_channel))
        self.conv2 = nn.Sequential(EqualConv2d(in_channel, out_channel, 3, padding=1), FusedLeakyReLU(out_channel))
        self.skip = EqualConv2d(in_channel, out_channel, 1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.conv2(resample_blur(self.conv1(x), "down"))
        skip = self.skip(resample_blur(x, "down"))
        return (out + skip) / math.sqrt(2)


class SynthDiscriminator(nn.Module):
    """Residual StyleGAN2 discriminator; forward returns (logits [B], intermediate features)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.img_size = cfg.img_size
        self.mbstd_group = cfg.mbstd_group
        ch = _channels(cfg, cfg.img_size)
        self.from_rgb = nn.Sequential(EqualConv2d(3, ch, 1), FusedLeakyReLU(ch))
        blocks = []
        res = cfg.img_size
        while res > 4:
            out = _channels(cfg, res // 2)
            blocks.append(DiscBlock(ch, out))
            ch, res = out, res // 2
        self.blocks = nn.ModuleList(blocks)
        extra = 1 if self.mbstd_group > 0 else 0
        self.final_conv = nn.Sequential(EqualConv2d(ch + extra, ch, 3, padding=1), FusedLeakyReLU(ch))
        self.final_linear = nn.Sequential(EqualLinear(ch * 16, ch, activation=True), EqualLinear(ch, 1))

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        if x.ndim != 4 or tuple(x.shape[1:]) != (3, self.img_size, self.img_size):
            raise DimensionError(f"discriminator expects [B, 3, {self.img_size}, {self.img_size}],"
                                 f" got {tuple(x.shape)}")
        feats = []
        h = self.from_rgb(x)
        feats.append(h)
        for block in self.blocks:
            h = block(h)
            feats.append(h)
        if self.mbstd_group > 0:
            h = minibatch_stddev(h, self.mbstd_group)
        h = self.final_conv(h)
        feats.append(h)
        return self.final_linear(h.flatten(1)).squeeze(1), feats


def feature_matching_loss(real_feats: Sequence[torch.Tensor], fake_feats: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum over layers of the mean absolute feature difference; real features are constants."""
    if len(real_feats) != len(fake_feats):
        raise DimensionError(f"{len(real_feats)} real vs {len(fake_feats)} fake feature maps")
    total = fake_feats[0].new_zeros(())
    for real, fake in zip(real_feats, fake_feats):
        total = total + torch.mean(torch.abs(real.detach() - fake))
    return total


class SynthNetworks(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.generator = SynthGenerator(cfg)
        self.encoder = RegionEncoder(cfg)
        self.mapping = RegionMapping(cfg)
        self.discriminator = SynthDiscriminator(cfg)

    def synth_generate(self, m: torch.Tensor, sm: torch.Tensor, rng: Optional[torch.Generator] = None,
                       noise: Optional[Sequence[torch.Tensor]] = None, clamp: bool = False) -> torch.Tensor:
        out = self.generator(m, sm, noise=noise, generator=rng)
        return out.clamp(-1.0, 1.0) if clamp else out

    def synth_encode(self, x: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
        return self.encoder(x, m)

    def synth_map(self, z: torch.Tensor) -> torch.Tensor:
        return self.mapping(z)

    def sample_code(self, batch: int, rng: Optional[torch.Generator] = None) -> torch.Tensor:
        return torch.randn(batch, self.mapping.code_dim, generator=rng)

    def discriminate(self, x: torch.Tensor) -> torch.Tensor:
        return self.discriminator(x)[0]


def build_synth_networks(cfg: ModelConfig) -> SynthNetworks:
    return SynthNetworks(cfg)


def build_synth_optimizers(nets: SynthNetworks, optim: OptimConfig, r1_every: int) -> Dict[str, torch.optim.Optimizer]:
    """Adam for each network; D's lr and betas get the lazy-regularization correction."""
    betas = tuple(optim.betas)
    c = r1_every / (r1_every + 1)
    return {
        "g": torch.optim.Adam(nets.generator.parameters(), lr=optim.lr, betas=betas),
        "f": torch.optim.Adam(nets.mapping.parameters(), lr=optim.lr, betas=betas),
        "s": torch.optim.Adam(nets.encoder.parameters(), lr=optim.lr, betas=betas),
        "d": torch.optim.Adam(nets.discriminator.parameters(), lr=optim.lr * c,
                              betas=(betas[0] ** c, betas[1] ** c)),
    }


def _micro_batches(batch) -> list:
    return list(batch) if isinstance(batch, (list, tuple)) else [batch]


def _discriminator_update(state, micro, make_fake, rng: torch.Generator, with_r1: bool) -> Dict[str, float]:
    """Non-saturating D update; R1 only when `with_r1` and on the lazy interval of random steps."""
    cfg: Config = state.config
    nets: SynthNetworks = state.nets
    n = float(len(micro))
    lazy = with_r1 and state.counters["random_steps"] % cfg.loss.r1_every == 0
    report: Dict[str, float] = {"d_real": 0.0, "d_fake": 0.0, "r1": 0.0, "d_total": 0.0}
    totals = []
    for mb in micro:
        with torch.no_grad():
            fake = make_fake(mb, rng)
        d_real = discriminator_real_loss(nets.discriminate(mb.images))
        d_fake = discriminator_fake_loss(nets.discriminate(fake))
        total = d_real + d_fake
        r1 = torch.zeros(())
        if lazy:
            r1 = r1_penalty(nets.discriminate, mb.images)
            total = total + 0.5 * cfg.loss.r1_gamma * cfg.loss.r1_every * r1
        totals.append(total)
        for key, value in (("d_real", d_real), ("d_fake", d_fake), ("r1", r1), ("d_total", total)):
            report[key] += float(value.detach()) / n
    guard_losses(state.step, report)
    state.optims["d"].zero_grad(set_to_none=True)
    for total in totals:
        (total / n).backward()
    state.optims["d"].step()
    state.counters["d_steps"] += 1
    return report


def _random_fake(nets: SynthNetworks):
    def make(mb, rng):
        return nets.synth_generate(mb.masks, nets.synth_map(nets.sample_code(mb.masks.shape[0], rng).to(mb.images)),
                                   rng=rng)
    return make


def _reference_fake(nets: SynthNetworks):
    def make(mb, rng):
        return nets.synth_generate(mb.masks, nets.synth_encode(mb.images, mb.masks), rng=rng)
    return make


def train_step_random(state, batch, rng: torch.Generator) -> Dict[str, float]:
    nets: SynthNetworks = state.nets
    micro = _micro_batches(batch)
    n = float(len(micro))
    report = _discriminator_update(state, micro, _random_fake(nets), rng, with_r1=True)
    for key in ("g", "f"):
        state.optims[key].zero_grad(set_to_none=True)
    losses = []
    for mb in micro:
        fake = _random_fake(nets)(mb, rng)
        losses.append(generator_loss(nets.discriminate(fake)))
    g_adv = sum(float(v.detach()) for v in losses) / n
    report.update({"g_adv": g_adv, "feat": 0.0, "g_total": g_adv})
    report = guard_losses(state.step, report)
    for value in losses:
        (value / n).backward()
    for key in ("g", "f"):
        state.optims[key].step()
    state.counters["random_steps"] += 1
    return report


def train_step_reference(state, batch, rng: torch.Generator) -> Dict[str, float]:
    cfg: Config = state.config
    nets: SynthNetworks = state.nets
    micro = _micro_batches(batch)
    n = float(len(micro))
    report = _discriminator_update(state, micro, _reference_fake(nets), rng, with_r1=False)
    for key in ("g", "s"):
        state.optims[key].zero_grad(set_to_none=True)
    totals = []
    g_adv = feat = 0.0
    for mb in micro:
        fake = _reference_fake(nets)(mb, rng)
        fake_logits, fake_feats = nets.discriminator(fake)
        _, real_feats = nets.discriminator(mb.images)
        adv = generator_loss(fake_logits)
        fm = feature_matching_loss(real_feats, fake_feats)
        totals.append(adv + cfg.loss.lambda_feat * fm)
        g_adv += float(adv.detach()) / n
        feat += float(fm.detach()) / n
    report.update({"g_adv": g_adv, "feat": feat, "g_total": g_adv + cfg.loss.lambda_feat * feat})
    report = guard_losses(state.step, report)
    for total in totals:
        (total / n).backward()
    for key in ("g", "s"):
        state.optims[key].step()
    state.counters["reference_steps"] += 1
    return report


def train_step_synthesis(state, batch, rng: torch.Generator) -> Dict[str, float]:
    """Even steps are random-generation updates, odd steps reference updates.

    The `spade` and `matrix` variants have no style encoder in the loop and
    only ever take random steps.
    """
    if step_kind(state.step, state.config.model.synthesis_variant) == "random":
        report = train_step_random(state, batch, rng)
    else:
        report = train_step_reference(state, batch, rng)
    state.step += 1
    return report


def step_kind(step: int, variant: str = "full") -> str:
    if variant != "full":
        return "random"
    return "random" if step % 2 == 0 else "reference"


@torch.no_grad()
def reconstruct(nets: SynthNetworks, x: torch.Tensor, m: torch.Tensor, seed: int = 0) -> torch.Tensor:
    """G(m, S(x, m)) with a seed-fixed noise field."""
    noise = nets.generator.make_noise(x.shape[0], torch.Generator().manual_seed(seed), dtype=x.dtype)
    return nets.synth_generate(m, nets.synth_encode(x, m), noise=noise)


def reconstruction_l1(nets: SynthNetworks, x: torch.Tensor, m: torch.Tensor, seed: int = 0) -> float:
    return float(torch.mean(torch.abs(x - reconstruct(nets, x, m, seed=seed))))


@torch.no_grad()
def reenact(nets: SynthNetworks, mask_sequence: Sequence[torch.Tensor], sm: torch.Tensor,
            seed: int = 0, clamp: bool = False) -> torch.Tensor:
    """Drive one style matrix with a sequence of [R, H, W] masks; noise is frozen across frames."""
    frames = list(mask_sequence)
    if not frames:
        return torch.empty(0, 3, nets.cfg.img_size, nets.cfg.img_size)
    shape = tuple(frames[0].shape)
    for i, frame in enumerate(frames):
        if tuple(frame.shape) != shape:
            raise DimensionError(f"frame {i} has shape {tuple(frame.shape)}, expected {shape}")
    if sm.ndim == 2:
        sm = sm.unsqueeze(0)
    noise = nets.generator.make_noise(1, torch.Generator().manual_seed(seed), dtype=sm.dtype)
    out = [nets.synth_generate(frame.unsqueeze(0).to(sm), sm, noise=noise, clamp=clamp)[0] for frame in frames]
    return torch.stack(out)
