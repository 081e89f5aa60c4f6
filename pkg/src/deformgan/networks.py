"""Trainable architectures: modality generators, transformation regressors
grouped into symmetric aligners, and patch discriminators.

Generator: c7s1-64, two stride-2 downsamplings, 9 residual blocks, two
fractional-stride upsamplings, c7s1-1 with tanh (instance norm, ReLU).

Regressor: residual U-Net over the 2-channel (moving, fixed) concatenation,
7 stride-2 encoder stages, 3 residual blocks, mirrored decoder with skip
connections, refinement head, zero-initialized 2-channel output conv so the
predicted field starts at the identity.

Discriminator: patch classifier of four 4x4 stride-2 conv blocks
(64-128-256-512, leaky slope 0.2, no norm on the first) plus a final
1-channel conv; emits a grid of patch logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

INIT_STD = 0.02


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(module.weight, 0.0, INIT_STD)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


@dataclass(frozen=True)
class GeneratorSpec:
    base_width: int = 64
    n_residual_blocks: int = 9


@dataclass(frozen=True)
class RegressorSpec:
    base_width: int = 32
    n_encoder_layers: int = 7
    n_stride2_layers: int = 7  # reduce at small resolutions
    n_residual_blocks: int = 3


@dataclass(frozen=True)
class DiscriminatorSpec:
    base_width: int = 64
    n_layers: int = 4
    leaky_slope: float = 0.2


@dataclass(frozen=True)
class ModelSpec:
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    regressor: RegressorSpec = field(default_factory=RegressorSpec)
    discriminator: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)


def toy_model_spec() -> ModelSpec:
    """Reduced-width profile for 64x64 desk-scale experiments."""
    return ModelSpec(
        generator=GeneratorSpec(base_width=24, n_residual_blocks=4),
        regressor=RegressorSpec(base_width=16, n_encoder_layers=5, n_stride2_layers=4),
        discriminator=DiscriminatorSpec(base_width=24),
    )


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, norm: bool = True, slope: float | None = None):
        super().__init__()
        act = nn.LeakyReLU(slope, inplace=True) if slope else nn.ReLU(inplace=True)
        layers: list[nn.Module] = [nn.Conv2d(channels, channels, 3, padding=1)]
        if norm:
            layers.append(nn.InstanceNorm2d(channels))
        layers += [act, nn.Conv2d(channels, channels, 3, padding=1)]
        if norm:
            layers.append(nn.InstanceNorm2d(channels))
        self.block = nn.Sequential(*layers)

    def forward(self, x):
        return x + self.block(x)


class Generator(nn.Module):
    """Modality translator; same-shape single-channel output bounded to [-1, 1]."""

    def __init__(self, spec: GeneratorSpec = GeneratorSpec()):
        super().__init__()
        w = spec.base_width
        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(1, w, 7),
            nn.InstanceNorm2d(w),
            nn.ReLU(inplace=True),
        ]
        for mult in (2, 4):
            layers += [
                nn.Conv2d(w * mult // 2, w * mult, 3, stride=2, padding=1),
                nn.InstanceNorm2d(w * mult),
                nn.ReLU(inplace=True),
            ]
        layers += [ResidualBlock(w * 4) for _ in range(spec.n_residual_blocks)]
        for mult in (2, 1):
            layers += [
                nn.ConvTranspose2d(w * mult * 2, w * mult, 3, stride=2, padding=1, output_padding=1),
                nn.InstanceNorm2d(w * mult),
                nn.ReLU(inplace=True),
            ]
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(w, 1, 7), nn.Tanh()]
        self.model = nn.Sequential(*layers)
        self.apply(_init_weights)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ValueError(f"generator input dims must be divisible by 4, got {tuple(x.shape[-2:])}")
        return self.model(x)


class _ConvAct(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int, slope: float = 0.2):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.act = nn.LeakyReLU(slope, inplace=True)

    def forward(self, x):
        return self.act(self.conv(x))


class TransformRegressor(nn.Module):
    """Predicts a dense (dy, dx) field from the (moving, fixed) concatenation."""

    def __init__(self, spec: RegressorSpec = RegressorSpec()):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        widths = [w] + [w * 2] * (spec.n_encoder_layers - 1)
        self.encoders = nn.ModuleList()
        cin = 2
        for i, cout in enumerate(widths):
            stride = 2 if i < spec.n_stride2_layers else 1
            self.encoders.append(_ConvAct(cin, cout, stride))
            cin = cout
        self.bottleneck = nn.Sequential(
            *[ResidualBlock(cin, norm=False, slope=0.2) for _ in range(spec.n_residual_blocks)]
        )
        self.decoders = nn.ModuleList()
        self.dec_strides = []
        for i in reversed(range(spec.n_encoder_layers)):
            skip_ch = 2 if i == 0 else widths[i - 1]
            cout = w if i == 0 else w * 2
            self.decoders.append(_ConvAct(cin + skip_ch, cout, stride=1))
            self.dec_strides.append(2 if i < spec.n_stride2_layers else 1)
            cin = cout
        self.refine = nn.Sequential(
            ResidualBlock(cin, norm=False, slope=0.2), nn.Conv2d(cin, cin, 1)
        )
        self.out = nn.Conv2d(cin, 2, 3, padding=1)
        self.apply(_init_weights)
        # zero-init output: predicted field is the identity warp at step 0
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, moving: torch.Tensor, fixed: torch.Tensor) -> torch.Tensor:
        if moving.shape != fixed.shape:
            raise ValueError(f"moving {tuple(moving.shape)} and fixed {tuple(fixed.shape)} shapes differ")
        div = 2 ** self.spec.n_stride2_layers
        if moving.shape[-1] % div or moving.shape[-2] % div:
            raise ValueError(
                f"regressor input dims must be divisible by {div}, got {tuple(moving.shape[-2:])}"
            )
        x = torch.cat([moving, fixed], dim=1)
        skips = []
        for enc in self.encoders:
            skips.append(x)
            x = enc(x)
        x = self.bottleneck(x)
        for dec, stride in zip(self.decoders, self.dec_strides):
            skip = skips.pop()
            if stride == 2:
                x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
            x = dec(torch.cat([x, skip], dim=1))
        x = self.refine(x)
        return self.out(x)


class PatchDiscriminator(nn.Module):
    """Grid of patch real/fake logits; input side must be at least 2**n_layers."""

    def __init__(self, spec: DiscriminatorSpec = DiscriminatorSpec(), domain: str = ""):
        super().__init__()
        self.domain = domain
        w = spec.base_width
        layers: list[nn.Module] = [
            nn.Conv2d(1, w, 4, stride=2, padding=1),
            nn.LeakyReLU(spec.leaky_slope, inplace=True),
        ]
        cin = w
        for i in range(1, spec.n_layers):
            cout = min(w * 2**i, w * 8)
            layers += [
                nn.Conv2d(cin, cout, 4, stride=2, padding=1),
                nn.InstanceNorm2d(cout),
                nn.LeakyReLU(spec.leaky_slope, inplace=True),
            ]
            cin = cout
        layers.append(nn.Conv2d(cin, 1, 3, padding=1))
        self.model = nn.Sequential(*layers)
        self.n_layers = spec.n_layers
        self.apply(_init_weights)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        min_side = 2**self.n_layers
        if x.shape[-1] < min_side or x.shape[-2] < min_side:
            raise ValueError(f"discriminator input must be at least {min_side}px per side")
        return self.model(x)


class SymmetricAligner(nn.Module):
    """Bidirectional transformation regressors with independent parameters."""

    def __init__(self, spec: RegressorSpec = RegressorSpec()):
        super().__init__()
        self.forward_regressor = TransformRegressor(spec)
        self.backward_regressor = TransformRegressor(spec)

    def fields(self, generated: torch.Tensor, real: torch.Tensor):
        """(forward, backward) fields: forward maps generated -> real shape."""
        phi_fwd = self.forward_regressor(generated, real)
        phi_bwd = self.backward_regressor(real, generated)
        return phi_fwd, phi_bwd


class DaGanModel(nn.Module):
    """Full model: generators G (x->y) / F (y->x), aligners, discriminators."""

    def __init__(self, spec: ModelSpec = ModelSpec()):
        super().__init__()
        self.spec = spec
        self.G = Generator(spec.generator)
        self.F = Generator(spec.generator)
        self.aligner_y = SymmetricAligner(spec.regressor)
        self.aligner_x = SymmetricAligner(spec.regressor)
        self.D_y = PatchDiscriminator(spec.discriminator, domain="y")
        self.D_x = PatchDiscriminator(spec.discriminator, domain="x")

    def generator_parameters(self):
        for net in (self.G, self.F, self.aligner_y, self.aligner_x):
            yield from net.parameters()

    def discriminator_parameters(self):
        for net in (self.D_y, self.D_x):
            yield from net.parameters()

    def networks(self) -> dict[str, nn.Module]:
        return {
            "G": self.G,
            "F": self.F,
            "aligner_y": self.aligner_y,
            "aligner_x": self.aligner_x,
            "D_y": self.D_y,
            "D_x": self.D_x,
        }


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def model_size_bytes(module: nn.Module) -> int:
    return sum(p.numel() * p.element_size() for p in module.parameters())
