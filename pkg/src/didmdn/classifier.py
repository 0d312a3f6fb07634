"""Residual-aware rain-density classifier.

A multi-stream trunk (no label fusion) estimates the rain residual of the
input; a small convolutional head classifies the estimated residual into one
of the three density levels. Trained in stages: residual extractor first (on
heavy-density samples), then the head on frozen residuals, then jointly.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .density import DensityLabel
from .derainer import DerainerConfig, ResidualTrunk
from .errors import ShapeMismatch, TooSmall, UntrainedModel


def _default_trunk() -> DerainerConfig:
    return DerainerConfig(variant="multi_no_label")


@dataclasses.dataclass(frozen=True)
class ClassifierConfig:
    head_channels: tuple[int, ...] = (3, 24, 64, 24)
    pool_kernel: int = 9
    pooled_spatial: tuple[int, int] = (9, 9)
    fc_hidden: int = 512
    n_classes: int = 3
    trunk: DerainerConfig = dataclasses.field(default_factory=_default_trunk)

    def __post_init__(self):
        if self.n_classes != 3:
            raise ValueError("the classifier has exactly three density classes")
        if self.trunk.uses_label:
            raise ValueError("the classifier trunk must not fuse a label map")

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierConfig":
        d = dict(d)
        d["head_channels"] = tuple(d["head_channels"])
        d["pooled_spatial"] = tuple(d["pooled_spatial"])
        d["trunk"] = DerainerConfig.from_dict(d["trunk"])
        return cls(**d)

    @property
    def fc_input_width(self) -> int:
        return self.head_channels[-1] * self.pooled_spatial[0] * self.pooled_spatial[1]


def fc_input_width_for(input_hw: tuple[int, int], cfg: ClassifierConfig) -> int:
    """Flattened width the head's first FC layer sees for a given input size,
    before any adaptive re-gridding (i.e. with pooled_spatial matching the
    pooled size)."""
    ph = input_hw[0] // cfg.pool_kernel
    pw = input_hw[1] // cfg.pool_kernel
    return cfg.head_channels[-1] * ph * pw


@dataclasses.dataclass
class ClassifierOutput:
    logits: torch.Tensor
    predicted: DensityLabel
    residual_estimate: torch.Tensor


class ClassifierHead(nn.Module):
    """Conv(3,24)-Conv(24,64)-Conv(64,24), 9x9 average pool, two FC layers.

    An adaptive average pool between the 9x9 pool and the flatten fixes the
    FC input width, so one head serves any input resolution; with
    pooled_spatial equal to the natural pooled size the adaptive stage is the
    identity.
    """

    def __init__(self, cfg: ClassifierConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.head_channels
        self.conv1 = nn.Conv2d(c[0], c[1], 3, padding=1)
        self.conv2 = nn.Conv2d(c[1], c[2], 3, padding=1)
        self.conv3 = nn.Conv2d(c[2], c[3], 3, padding=1)
        self.pool = nn.AvgPool2d(cfg.pool_kernel, stride=cfg.pool_kernel)
        self.regrid = nn.AdaptiveAvgPool2d(cfg.pooled_spatial)
        self.fc1 = nn.Linear(cfg.fc_input_width, cfg.fc_hidden)
        self.fc2 = nn.Linear(cfg.fc_hidden, cfg.n_classes)

    def forward(self, r_hat: torch.Tensor) -> torch.Tensor:
        h, w = r_hat.shape[-2:]
        if h < self.cfg.pool_kernel or w < self.cfg.pool_kernel:
            raise TooSmall(
                f"input {(h, w)} pools to zero size with kernel {self.cfg.pool_kernel}"
            )
        x = F.relu(self.conv1(r_hat))
        x = F.relu(self.conv2(x))
        x = F.relu(self.conv3(x))
        x = self.regrid(self.pool(x))
        x = torch.flatten(x, start_dim=1)
        x = F.relu(self.fc1(x))
        return self.fc2(x)


def residual_loss(r_hat: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
    """Per-pixel Euclidean (mean squared) residual estimation loss."""
    if r_hat.shape != r.shape:
        raise ShapeMismatch(f"shape {tuple(r_hat.shape)} vs {tuple(r.shape)}")
    return torch.mean((r_hat - r) ** 2)


def classification_loss(logits: torch.Tensor, label) -> torch.Tensor:
    """Softmax cross-entropy against density labels (mean over the batch)."""
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    if isinstance(label, DensityLabel):
        target = torch.tensor([int(label) - 1], device=logits.device)
    else:
        target = torch.as_tensor(label, device=logits.device).reshape(-1) - 1
    return F.cross_entropy(logits, target.long())


def classifier_loss(
    r_hat: torch.Tensor, r: torch.Tensor, logits: torch.Tensor, label
) -> torch.Tensor:
    """Total classifier objective: residual loss plus cross-entropy, unweighted."""
    return residual_loss(r_hat, r) + classification_loss(logits, label)


def argmax_label(logits: torch.Tensor) -> DensityLabel:
    """Label with the largest logit; ties resolve to the lowest code."""
    values = logits.detach().reshape(-1).cpu().numpy()
    return DensityLabel(int(np.argmax(values)) + 1)


class DensityClassifier(nn.Module):
    """Residual extractor + classification head."""

    def __init__(self, cfg: ClassifierConfig | None = None):
        super().__init__()
        self.cfg = cfg or ClassifierConfig()
        self.trunk = ResidualTrunk(self.cfg.trunk)
        self.head = ClassifierHead(self.cfg)
        self.is_trained = False

    def estimate_residual(self, y: torch.Tensor) -> torch.Tensor:
        return self.trunk(y)

    def forward(self, y: torch.Tensor) -> ClassifierOutput:
        r_hat = self.estimate_residual(y)
        logits = self.head(r_hat)
        return ClassifierOutput(
            logits=logits,
            predicted=argmax_label(logits[0] if logits.dim() == 2 else logits),
            residual_estimate=r_hat,
        )

    @torch.no_grad()
    def predict_density(self, y: torch.Tensor) -> DensityLabel:
        if not self.is_trained:
            raise UntrainedModel("classifier parameters are uninitialized")
        return self.forward(y).predicted
