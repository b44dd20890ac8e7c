"""Stage 1: multi-domain manipulation of semantic masks.

Networks (StarGAN v2 layout, attributes as binary domains):
 - MaskGenerator: instance-normed residual down path to 8x8, then residual up
   blocks built from modulated convolutions driven by the concatenated style
   (AdaIN residual blocks when `model.manipulation_conditioning` is `adain`).
   Returns R-channel logits.
 - DomainTrunk + heads: the discriminator and the style encoder share this
   trunk shape; every (domain, bit) pair owns an independent output head.
 - MappingNetwork: 4 shared layers, then one unshared branch per (domain, bit).

Loss functions take callables so they can be checked against stand-in
networks. `train_step_manipulation` updates D first, then G/S/F on
    L_adv + l_rec * L_cyc + l_sty * L_sty - l_sd(t) * L_sd
"""
from __future__ import annotations
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import torch
from torch import nn
from torch.nn import functional as F

from .adversarial import (discriminator_fake_loss, discriminator_real_loss, generator_loss,
                          r1_penalty)
from .config import Config, LossConfig, ModelConfig, OptimConfig
from .guardrails import DimensionError, UsageError, guard_losses, guard_one_hot
from .layers import FusedLeakyReLU, ModulatedConv2d

StyleFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]
DiscFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


class ResBlk(nn.Module):
    def __init__(self, dim_in: int, dim_out: int, normalize: bool = False, downsample: bool = False):
        super().__init__()
        self.normalize = normalize
        self.downsample = downsample
        self.conv1 = nn.Conv2d(dim_in, dim_in, 3, 1, 1)
        self.conv2 = nn.Conv2d(dim_in, dim_out, 3, 1, 1)
        if normalize:
            self.norm1 = nn.InstanceNorm2d(dim_in, affine=True)
            self.norm2 = nn.InstanceNorm2d(dim_in, affine=True)
        self.shortcut = nn.Conv2d(dim_in, dim_out, 1, bias=False) if dim_in != dim_out else None

    def _residual(self, x: torch.Tensor) -> torch.Tensor:
        if self.normalize:
            x = self.norm1(x)
        x = self.conv1(F.leaky_relu(x, 0.2))
        if self.downsample:
            x = F.avg_pool2d(x, 2)
        if self.normalize:
            x = self.norm2(x)
        return self.conv2(F.leaky_relu(x, 0.2))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        sc = self.shortcut(x) if self.shortcut is not None else x
        if self.downsample:
            sc = F.avg_pool2d(sc, 2)
        return (sc + self._residual(x)) / math.sqrt(2)


class ModResBlk(nn.Module):
    """Residual block whose convolutions are modulated by the domain style."""

    def __init__(self, dim_in: int, dim_out: int, style_dim: int, upsample: bool = False):
        super().__init__()
        self.upsample = upsample
        self.conv1 = ModulatedConv2d(dim_in, dim_out, 3, style_dim, upsample=upsample, bias=False)
        self.act1 = FusedLeakyReLU(dim_out)
        self.conv2 = ModulatedConv2d(dim_out, dim_out, 3, style_dim, bias=False)
        self.act2 = FusedLeakyReLU(dim_out)
        self.shortcut = nn.Conv2d(dim_in, dim_out, 1, bias=False) if dim_in != dim_out else None

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        sc = F.interpolate(x, scale_factor=2, mode="nearest") if self.upsample else x
        if self.shortcut is not None:
            sc = self.shortcut(sc)
        out = self.act1(self.conv1(x, style))
        out = self.act2(self.conv2(out, style))
        return (sc + out) / math.sqrt(2)


class AdaIN(nn.Module):
    def __init__(self, style_dim: int, num_features: int):
        super().__init__()
        self.norm = nn.InstanceNorm2d(num_features, affine=False)
        self.fc = nn.Linear(style_dim, num_features * 2)

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        gamma, beta = torch.chunk(self.fc(style).view(style.shape[0], -1, 1, 1), 2, dim=1)
        return (1 + gamma) * self.norm(x) + beta


class AdainResBlk(nn.Module):
    """Residual block conditioned through adaptive instance normalization."""

    def __init__(self, dim_in: int, dim_out: int, style_dim: int, upsample: bool = False):
        super().__init__()
        self.upsample = upsample
        self.norm1 = AdaIN(style_dim, dim_in)
        self.conv1 = nn.Conv2d(dim_in, dim_out, 3, 1, 1)
        self.norm2 = AdaIN(style_dim, dim_out)
        self.conv2 = nn.Conv2d(dim_out, dim_out, 3, 1, 1)
        self.shortcut = nn.Conv2d(dim_in, dim_out, 1, bias=False) if dim_in != dim_out else None

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        sc = F.interpolate(x, scale_factor=2, mode="nearest") if self.upsample else x
        if self.shortcut is not None:
            sc = self.shortcut(sc)
        out = F.leaky_relu(self.norm1(x, style), 0.2)
        if self.upsample:
            out = F.interpolate(out, scale_factor=2, mode="nearest")
        out = self.conv1(out)
        out = self.conv2(F.leaky_relu(self.norm2(out, style), 0.2))
        return (sc + out) / math.sqrt(2)


class AdainHead(nn.Module):
    def __init__(self, dim_in: int, num_classes: int):
        super().__init__()
        self.main = nn.Sequential(nn.InstanceNorm2d(dim_in, affine=True), nn.LeakyReLU(0.2),
                                  nn.Conv2d(dim_in, num_classes, 1))

    def forward(self, h: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        return self.main(h)


def _num_down(img_size: int, floor: int) -> int:
    return int(math.log2(img_size)) - int(math.log2(floor))


class MaskGenerator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.num_classes = cfg.num_classes
        self.img_size = cfg.img_size
        self.style_dim = sum(cfg.effective_style_widths())
        max_ch = cfg.scaled(cfg.max_channels)
        dim_in = cfg.scaled(cfg.g_base_channels)
        self.conditioning = cfg.manipulation_conditioning
        block = AdainResBlk if self.conditioning == "adain" else ModResBlk
        self.from_mask = nn.Conv2d(cfg.num_classes, dim_in, 3, 1, 1)
        self.encode = nn.ModuleList()
        self.decode = nn.ModuleList()
        for _ in range(_num_down(cfg.img_size, 8)):
            dim_out = min(dim_in * 2, max_ch)
            self.encode.append(ResBlk(dim_in, dim_out, normalize=True, downsample=True))
            self.decode.insert(0, block(dim_out, dim_in, self.style_dim, upsample=True))
            dim_in = dim_out
        for _ in range(2):
            self.encode.append(ResBlk(dim_out, dim_out, normalize=True))
            self.decode.insert(0, block(dim_out, dim_out, self.style_dim))
        head_in = cfg.scaled(cfg.g_base_channels)
        if self.conditioning == "adain":
            self.to_logits = AdainHead(head_in, cfg.num_classes)
        else:
            self.to_logits = ModulatedConv2d(head_in, cfg.num_classes, 1, self.style_dim, demodulate=False)

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.num_classes or x.shape[-1] != self.img_size \
                or x.shape[-2] != self.img_size:
            raise DimensionError(f"generator expects [B, {self.num_classes}, {self.img_size}, "
                                 f"{self.img_size}], got {tuple(x.shape)}")
        if style.ndim != 2 or style.shape != (x.shape[0], self.style_dim):
            raise DimensionError(f"style must be [{x.shape[0]}, {self.style_dim}], got {tuple(style.shape)}")
        h = self.from_mask(x)
        for block in self.encode:
            h = block(h)
        for block in self.decode:
            h = block(h, style)
        return self.to_logits(h, style)


class DomainTrunk(nn.Module):
    """Residual trunk shared by the discriminator and the style encoder: mask -> [B, C]."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.num_classes = cfg.num_classes
        self.img_size = cfg.img_size
        max_ch = cfg.scaled(cfg.max_channels)
        dim_in = cfg.scaled(cfg.d_base_channels)
        blocks: List[nn.Module] = [nn.Conv2d(cfg.num_classes, dim_in, 3, 1, 1)]
        for _ in range(_num_down(cfg.img_size, 4)):
            dim_out = min(dim_in * 2, max_ch)
            blocks.append(ResBlk(dim_in, dim_out, downsample=True))
            dim_in = dim_out
        blocks += [nn.LeakyReLU(0.2), nn.Conv2d(dim_out, dim_out, 4, 1, 0), nn.LeakyReLU(0.2)]
        self.main = nn.Sequential(*blocks)
        self.out_dim = dim_out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.num_classes or tuple(x.shape[-2:]) != (self.img_size, self.img_size):
            raise DimensionError(f"trunk expects [B, {self.num_classes}, {self.img_size}, {self.img_size}],"
                                 f" got {tuple(x.shape)}")
        return self.main(x).flatten(1)


def _check_bits(bits: torch.Tensor, batch: int, num_domains: int) -> torch.Tensor:
    if bits.shape != (batch, num_domains):
        raise DimensionError(f"domain bits must be [{batch}, {num_domains}], got {tuple(bits.shape)}")
    return bits.long()


def _gather_bit(outputs: torch.Tensor, bits: torch.Tensor) -> torch.Tensor:
    """outputs [B, 2, ...] picked by bits [B] -> [B, ...]."""
    idx = torch.arange(outputs.shape[0], device=outputs.device)
    return outputs[idx, bits]


class MultiTaskDiscriminator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.num_domains = cfg.num_domains
        self.trunk = DomainTrunk(cfg)
        self.heads = nn.ModuleList(
            nn.ModuleList(nn.Linear(self.trunk.out_dim, 1) for _ in range(2)) for _ in range(cfg.num_domains))

    def forward(self, x: torch.Tensor, domains: torch.Tensor) -> torch.Tensor:
        bits = _check_bits(domains, x.shape[0], self.num_domains)
        h = self.trunk(x)
        logits = []
        for i, pair in enumerate(self.heads):
            both = torch.stack([head(h).squeeze(1) for head in pair], dim=1)
            logits.append(_gather_bit(both, bits[:, i]))
        return torch.stack(logits, dim=1)


class MultiTaskStyleEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.widths = cfg.effective_style_widths()
        self.trunk = DomainTrunk(cfg)
        self.heads = nn.ModuleList(
            nn.ModuleList(nn.Linear(self.trunk.out_dim, w) for _ in range(2)) for w in self.widths)

    def forward(self, x: torch.Tensor, domains: torch.Tensor) -> torch.Tensor:
        bits = _check_bits(domains, x.shape[0], len(self.widths))
        h = self.trunk(x)
        styles = [_gather_bit(torch.stack([head(h) for head in pair], dim=1), bits[:, i])
                  for i, pair in enumerate(self.heads)]
        return torch.cat(styles, dim=1)


class MappingNetwork(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.latent_dim = cfg.latent_dim
        self.widths = cfg.effective_style_widths()
        hidden = cfg.scaled(cfg.mapping_hidden)
        layers: List[nn.Module] = []
        for i in range(4):
            layers += [nn.Linear(cfg.latent_dim if i == 0 else hidden, hidden), nn.ReLU()]
        self.shared = nn.Sequential(*layers)
        self.branches = nn.ModuleList(
            nn.ModuleList(self._branch(hidden, w) for _ in range(2)) for w in self.widths)

    @staticmethod
    def _branch(hidden: int, width: int) -> nn.Sequential:
        layers: List[nn.Module] = []
        for _ in range(3):
            layers += [nn.Linear(hidden, hidden), nn.ReLU()]
        layers.append(nn.Linear(hidden, width))
        return nn.Sequential(*layers)

    def forward(self, z: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise DimensionError(f"latent code must be [B, {self.latent_dim}], got {tuple(z.shape)}")
        bits = _check_bits(target, z.shape[0], len(self.widths))
        h = self.shared(z)
        styles = [_gather_bit(torch.stack([branch(h) for branch in pair], dim=1), bits[:, i])
                  for i, pair in enumerate(self.branches)]
        return torch.cat(styles, dim=1)


class ManipNetworks(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.generator = MaskGenerator(cfg)
        self.discriminator = MultiTaskDiscriminator(cfg)
        self.style_encoder = MultiTaskStyleEncoder(cfg)
        self.mapping = MappingNetwork(cfg)

    @property
    def style_widths(self) -> List[int]:
        return self.cfg.effective_style_widths()

    def map_style(self, z: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        return self.mapping(z, target)

    def encode_style(self, x: torch.Tensor, domains: torch.Tensor) -> torch.Tensor:
        return self.style_encoder(x, domains)

    def generate(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        return self.generator(x, style)

    def generate_probs(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.generator(x, style), dim=1)

    def discriminate(self, x: torch.Tensor, domains: torch.Tensor) -> torch.Tensor:
        return self.discriminator(x, domains)


def build_manip_networks(cfg: ModelConfig) -> ManipNetworks:
    return ManipNetworks(cfg)


def build_manip_optimizers(nets: ManipNetworks, optim: OptimConfig) -> Dict[str, torch.optim.Optimizer]:
    betas = tuple(optim.betas)
    return {
        name: torch.optim.Adam(getattr(nets, attr).parameters(), lr=optim.lr, betas=betas)
        for name, attr in (("g", "generator"), ("d", "discriminator"), ("s", "style_encoder"), ("f", "mapping"))
    }


def loss_style_reconstruction(encode: StyleFn, x_fake: torch.Tensor, target: torch.Tensor,
                              s_hat: torch.Tensor) -> torch.Tensor:
    return torch.mean(torch.abs(s_hat - encode(x_fake, target)))


def loss_diversity(generate: StyleFn, x: torch.Tensor, s_hat: torch.Tensor,
                   s_hat_prime: torch.Tensor) -> torch.Tensor:
    return torch.mean(torch.abs(generate(x, s_hat) - generate(x, s_hat_prime)))


def loss_cycle(generate: StyleFn, encode: StyleFn, x: torch.Tensor, y_real: torch.Tensor,
               x_fake: torch.Tensor, detach_style: bool = True) -> torch.Tensor:
    s_tilde = encode(x, y_real)
    if detach_style:
        s_tilde = s_tilde.detach()
    return torch.mean(torch.abs(x - generate(x_fake, s_tilde)))


@dataclass
class AdversarialTerms:
    g: torch.Tensor
    d_real: torch.Tensor
    d_fake: torch.Tensor
    r1: torch.Tensor
    d_total: torch.Tensor


def active_domain_weight(y_real: torch.Tensor, y_hat: torch.Tensor, mode: str) -> Optional[torch.Tensor]:
    """None means every head counts; 'changed' keeps only domains whose bit flipped."""
    if mode == "all":
        return None
    if mode == "changed":
        return (y_real != y_hat).float()
    raise UsageError(f"unknown active_domains mode {mode!r}")


def loss_adversarial_and_r1(discriminate: DiscFn, reals: torch.Tensor, fakes: torch.Tensor,
                            real_domains: torch.Tensor, fake_domains: torch.Tensor,
                            r1_gamma: float = 1.0, weight: Optional[torch.Tensor] = None,
                            with_r1: bool = True) -> AdversarialTerms:
    """Non-saturating terms per selected (domain, bit) head, averaged over heads.

    d_total = d_real + d_fake + 0.5 * r1_gamma * R1(reals); fakes are detached
    for the discriminator terms only.
    """
    d_real = discriminator_real_loss(discriminate(reals, real_domains))
    d_fake = discriminator_fake_loss(discriminate(fakes.detach(), fake_domains), weight)
    g = generator_loss(discriminate(fakes, fake_domains), weight)
    if with_r1:
        r1 = r1_penalty(lambda r: discriminate(r, real_domains).mean(dim=1), reals)
    else:
        r1 = torch.zeros((), dtype=reals.dtype, device=reals.device)
    return AdversarialTerms(g=g, d_real=d_real, d_fake=d_fake, r1=r1,
                            d_total=d_real + d_fake + 0.5 * r1_gamma * r1)


def sd_weight(loss: LossConfig, step: int) -> float:
    if loss.sd_anneal_steps <= 0:
        return loss.lambda_sd
    return loss.lambda_sd * max(0.0, 1.0 - step / loss.sd_anneal_steps)


def shuffle_labels(y_real: torch.Tensor, rng: Optional[torch.Generator] = None) -> torch.Tensor:
    perm = torch.randperm(y_real.shape[0], generator=rng).to(y_real.device)
    return y_real[perm]


def generator_objective(nets: ManipNetworks, x: torch.Tensor, y_real: torch.Tensor, y_hat: torch.Tensor,
                        z1: torch.Tensor, z2: torch.Tensor, loss: LossConfig,
                        lambda_sd: float) -> Dict[str, torch.Tensor]:
    weight = active_domain_weight(y_real, y_hat, loss.active_domains)
    s_hat = nets.map_style(z1, y_hat)
    s_hat_prime = nets.map_style(z2, y_hat)
    fake = nets.generate_probs(x, s_hat)
    terms = {
        "g_adv": generator_loss(nets.discriminate(fake, y_hat), weight),
        "sty": loss_style_reconstruction(nets.encode_style, fake, y_hat, s_hat),
        "ds": loss_diversity(nets.generate_probs, x, s_hat, s_hat_prime),
        "cyc": loss_cycle(nets.generate_probs, nets.encode_style, x, y_real, fake,
                          detach_style=loss.detach_cycle_style),
    }
    terms["g_total"] = (terms["g_adv"] + loss.lambda_rec * terms["cyc"] + loss.lambda_sty * terms["sty"]
                        - lambda_sd * terms["ds"])
    return terms


def _micro_batches(batch) -> list:
    return list(batch) if isinstance(batch, (list, tuple)) else [batch]


def train_step_manipulation(state, batch, rng: torch.Generator) -> Dict[str, float]:
    """One D update then one G/S/F update. `batch` may be a list of micro-batches.

    Mutates `state` (nets, optims, step) and returns the float loss report.
    Raises NonFiniteLossError before any optimizer step if a term is nan/inf.
    """
    cfg: Config = state.config
    nets: ManipNetworks = state.nets
    optims = state.optims
    loss = cfg.loss
    micro = _micro_batches(batch)
    n = float(len(micro))
    lambda_sd = sd_weight(loss, state.step)
    lazy_r1 = state.step % loss.r1_every == 0

    draws = []
    for mb in micro:
        y_real = mb.labels.long()
        y_hat = shuffle_labels(y_real, rng)
        z1 = torch.randn(y_real.shape[0], cfg.model.latent_dim, generator=rng).to(mb.masks)
        z2 = torch.randn(y_real.shape[0], cfg.model.latent_dim, generator=rng).to(mb.masks)
        draws.append((mb.masks, y_real, y_hat, z1, z2))

    report: Dict[str, float] = {}

    def _add(key: str, value: torch.Tensor) -> None:
        report[key] = report.get(key, 0.0) + float(value.detach()) / n

    # discriminator
    optims["d"].zero_grad(set_to_none=True)
    d_terms = []
    for x, y_real, y_hat, z1, _ in draws:
        with torch.no_grad():
            fake = nets.generate_probs(x, nets.map_style(z1, y_hat))
        terms = loss_adversarial_and_r1(nets.discriminate, x, fake, y_real, y_hat,
                                        r1_gamma=loss.r1_gamma * loss.r1_every,
                                        weight=active_domain_weight(y_real, y_hat, loss.active_domains),
                                        with_r1=lazy_r1)
        d_terms.append(terms)
        _add("d_real", terms.d_real)
        _add("d_fake", terms.d_fake)
        _add("r1", terms.r1)
        _add("d_total", terms.d_total)
    guard_losses(state.step, report)
    for terms in d_terms:
        (terms.d_total / n).backward()
    optims["d"].step()

    # generator, style encoder, mapping network
    for key in ("g", "s", "f"):
        optims[key].zero_grad(set_to_none=True)
    g_terms = [generator_objective(nets, x, y_real, y_hat, z1, z2, loss, lambda_sd)
               for x, y_real, y_hat, z1, z2 in draws]
    for terms in g_terms:
        for key, value in terms.items():
            _add(key, value)
    report["lambda_sd"] = lambda_sd
    report = guard_losses(state.step, report)
    for terms in g_terms:
        (terms["g_total"] / n).backward()
    for key in ("g", "s", "f"):
        optims[key].step()
    state.step += 1
    return report


def one_hot_argmax(logits: torch.Tensor) -> torch.Tensor:
    """Hard one-hot mask; ties go to the lowest channel index."""
    idx = torch.argmax(logits, dim=1)
    return F.one_hot(idx, logits.shape[1]).permute(0, 3, 1, 2).to(logits.dtype)


@torch.no_grad()
def translate(nets: ManipNetworks, x: torch.Tensor, target: torch.Tensor, mode: str = "latent",
              reference: Optional[torch.Tensor] = None, z: Optional[torch.Tensor] = None,
              rng: Optional[torch.Generator] = None) -> torch.Tensor:
    """Hard one-hot translation of `x` towards `target`; inputs must be one-hot masks."""
    guard_one_hot(x)
    if mode == "reference":
        if reference is None:
            raise UsageError("reference mode needs a reference mask")
        guard_one_hot(reference)
        style = nets.encode_style(reference, target)
    elif mode == "latent":
        if z is None:
            z = torch.randn(x.shape[0], nets.cfg.latent_dim, generator=rng).to(x)
        style = nets.map_style(z, target)
    else:
        raise UsageError(f"unknown translate mode {mode!r}")
    return one_hot_argmax(nets.generate(x, style))


@torch.no_grad()
def cycle_reconstruct(nets: ManipNetworks, x: torch.Tensor, y_real: torch.Tensor,
                      x_fake: torch.Tensor) -> torch.Tensor:
    """Map a translated mask back with the source's own style."""
    guard_one_hot(x)
    return one_hot_argmax(nets.generate(x_fake, nets.encode_style(x, y_real)))
