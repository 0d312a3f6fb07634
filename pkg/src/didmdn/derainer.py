"""The de-raining network and its losses.

The full model runs three dense streams (kernels 7/5/3), concatenates their
features with a constant density label map, estimates the rain residual from
the fused features, subtracts it from the input to get a coarse result, and
refines that with two convolutions. Ablation variants reuse the same code:

* ``didmdn``          three dense streams + label fusion (the full model)
* ``multi_no_label``  three dense streams, no label channel
* ``single``          the kernel-5 stream alone, no label channel
* ``yang_multi``      streams replaced by two dilated convs per scale

Training minimizes residual MSE + image MSE + lambda_F * feature loss, where
the feature loss compares activations of a frozen convolutional extractor.
"""

from __future__ import annotations

import dataclasses

import torch
import torch.nn as nn
import torch.nn.functional as F

from .density import DensityLabel
from .errors import ShapeMismatch
from .netblocks import Stream, StreamConfig, fuse, make_label_map, paper_stream_config

VARIANTS = ("didmdn", "multi_no_label", "single", "yang_multi")


@dataclasses.dataclass(frozen=True)
class DerainerConfig:
    variant: str = "didmdn"
    width: int = 8
    n_layers: int = 3
    growth: int = 8
    head_channels: int = 64
    refine_channels: int = 32
    lambda_F: float = 1.0
    one_hot_label: bool = False
    feature_channels: int = 16
    feature_seed: int = 2024

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.lambda_F < 0:
            raise ValueError("lambda_F must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "DerainerConfig":
        return cls(**d)

    @property
    def uses_label(self) -> bool:
        return self.variant == "didmdn"

    @property
    def label_channels(self) -> int:
        if not self.uses_label:
            return 0
        return 3 if self.one_hot_label else 1

    def stream_configs(self) -> tuple[StreamConfig, ...]:
        kernels = (5,) if self.variant == "single" else (7, 5, 3)
        return tuple(
            paper_stream_config(
                k, in_channels=3, width=self.width, n_layers=self.n_layers, growth=self.growth
            )
            for k in kernels
        )


@dataclasses.dataclass
class DerainOutput:
    residual: torch.Tensor  # estimated rain component
    coarse: torch.Tensor  # input minus residual
    refined: torch.Tensor  # after the two-conv refinement


class DilatedScale(nn.Module):
    """Two dilated 3x3 convs; the per-scale trunk of the yang_multi variant."""

    def __init__(self, in_channels: int, out_channels: int, dilation: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=dilation, dilation=dilation)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=dilation, dilation=dilation)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.conv2(F.relu(self.conv1(x))))


class ResidualTrunk(nn.Module):
    """Streams + label fusion + two-conv residual head; outputs the estimated
    rain residual. Shared between the de-rainer and the density classifier's
    feature-extraction stage."""

    def __init__(self, cfg: DerainerConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.variant == "yang_multi":
            scale_channels = 2 * cfg.width
            self.streams = nn.ModuleList(
                DilatedScale(3, scale_channels, dilation) for dilation in (1, 2, 4)
            )
            feature_channels = 3 * scale_channels
        else:
            self.streams = nn.ModuleList(Stream(sc) for sc in cfg.stream_configs())
            feature_channels = sum(s.out_channels for s in self.streams)
        fused = feature_channels + cfg.label_channels
        self.head1 = nn.Conv2d(fused, cfg.head_channels, 3, padding=1)
        self.head2 = nn.Conv2d(cfg.head_channels, 3, 3, padding=1)

    def forward(self, y: torch.Tensor, label: DensityLabel | None = None) -> torch.Tensor:
        feats = [s(y) for s in self.streams]
        label_map = None
        if self.cfg.uses_label:
            if label is None:
                raise ValueError("this variant fuses a density label; none was given")
            label_map = make_label_map(
                label,
                feats[0].shape[-2:],
                one_hot=self.cfg.one_hot_label,
                dtype=y.dtype,
                device=y.device,
            )
        fused = fuse(feats, label_map)
        return self.head2(F.relu(self.head1(fused)))


class MultiStreamDerainNet(nn.Module):
    """Full forward model: residual estimation, subtraction, refinement."""

    def __init__(self, cfg: DerainerConfig):
        super().__init__()
        self.cfg = cfg
        self.trunk = ResidualTrunk(cfg)
        self.refine1 = nn.Conv2d(3, cfg.refine_channels, 3, padding=1)
        self.refine2 = nn.Conv2d(cfg.refine_channels, 3, 3, padding=1)

    def forward(self, y: torch.Tensor, label: DensityLabel | None = None) -> DerainOutput:
        residual = self.trunk(y, label)
        coarse = y - residual
        refined = self.refine2(F.relu(self.refine1(coarse)))
        return DerainOutput(residual=residual, coarse=coarse, refined=refined)

    @torch.no_grad()
    def derain(self, y: torch.Tensor, label: DensityLabel | None = None) -> DerainOutput:
        """Inference path: refined output clipped to the valid image range."""
        out = self.forward(y, label)
        out.refined = out.refined.clamp(0.0, 1.0)
        return out


class RandomConvFeatureExtractor(nn.Module):
    """Frozen two-conv ReLU feature map used by the feature loss.

    Stands in for an early pretrained-network tap at desk scale; weights are
    drawn once from a seeded generator and never trained. Any module mapping
    (B,3,H,W) images to feature maps can be plugged in instead.
    """

    def __init__(self, channels: int = 16, seed: int = 2024):
        super().__init__()
        self.layer_tag = f"conv2-relu-{channels}ch"
        self.out_channels = channels
        self.conv1 = nn.Conv2d(3, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for conv in (self.conv1, self.conv2):
                fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen) / fan_in**0.5
                )
                conv.bias.zero_()
        self.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.conv2(F.relu(self.conv1(x))))


class IdentityFeatureExtractor(nn.Module):
    """Pass-through extractor; reduces the feature loss to plain MSE."""

    layer_tag = "identity"

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x


def feature_loss(
    x_hat: torch.Tensor, x: torch.Tensor, extractor: nn.Module
) -> torch.Tensor:
    """Squared feature distance normalized by the feature volume C*W*H
    (averaged over the batch)."""
    if x_hat.shape != x.shape:
        raise ShapeMismatch(f"shape {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    fa = extractor(x_hat)
    fb = extractor(x)
    return torch.mean((fa - fb) ** 2)


@dataclasses.dataclass
class DerainerLossTerms:
    total: torch.Tensor
    residual_mse: torch.Tensor
    image_mse: torch.Tensor
    feature: torch.Tensor


def derainer_loss(
    out: DerainOutput,
    clean: torch.Tensor,
    rain: torch.Tensor,
    extractor: nn.Module,
    lambda_F: float = 1.0,
) -> DerainerLossTerms:
    """Composite training loss: residual MSE + image MSE + weighted feature
    loss, with the raw terms returned for logging."""
    if out.refined.shape != clean.shape:
        raise ShapeMismatch(
            f"shape {tuple(out.refined.shape)} vs {tuple(clean.shape)}"
        )
    if out.residual.shape != rain.shape:
        raise ShapeMismatch(
            f"shape {tuple(out.residual.shape)} vs {tuple(rain.shape)}"
        )
    residual_mse = torch.mean((out.residual - rain) ** 2)
    image_mse = torch.mean((out.refined - clean) ** 2)
    feat = feature_loss(out.refined, clean, extractor)
    total = residual_mse + image_mse + lambda_F * feat
    return DerainerLossTerms(
        total=total, residual_mse=residual_mse, image_mse=image_mse, feature=feat
    )
