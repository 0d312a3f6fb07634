"""Reusable network blocks: dense blocks, transitions, streams, label fusion.

A stream is a chain of six (dense block -> transition) stages. Each stage's
output is tapped, resampled back to the input resolution, and the six taps
are concatenated channelwise to form the stream output, creating short paths
between features computed at different scales.
"""

from __future__ import annotations

import dataclasses
import enum

import torch
import torch.nn as nn
import torch.nn.functional as F

from .density import DensityLabel
from .errors import ChannelMismatch, IndivisibleDims, ShapeMismatch


class TransitionKind(enum.Enum):
    DOWN = "down"  # halves spatial dims (floor)
    UP = "up"  # doubles spatial dims
    NONE = "none"  # preserves spatial dims


@dataclasses.dataclass(frozen=True)
class DenseBlockConfig:
    n_layers: int
    growth: int
    kernel: int
    in_channels: int

    def __post_init__(self):
        if self.kernel not in (3, 5, 7):
            raise ValueError(f"kernel must be 3, 5 or 7, got {self.kernel}")
        if self.n_layers < 0 or self.growth < 1 or self.in_channels < 1:
            raise ValueError("invalid dense block config")

    @property
    def out_channels(self) -> int:
        return self.in_channels + self.n_layers * self.growth


@dataclasses.dataclass(frozen=True)
class StreamConfig:
    """Per-stream recipe: kernel size, six transitions, six dense blocks."""

    kernel: int
    transitions: tuple[TransitionKind, ...]
    blocks: tuple[DenseBlockConfig, ...]
    width: int  # output channels of every transition in the stream

    def __post_init__(self):
        if len(self.blocks) != 6 or len(self.transitions) != 6:
            raise ValueError("a stream has exactly six blocks and six transitions")
        downs = sum(1 for t in self.transitions if t is TransitionKind.DOWN)
        ups = sum(1 for t in self.transitions if t is TransitionKind.UP)
        if downs != ups:
            raise ValueError("down and up transition counts must match")
        for i, blk in enumerate(self.blocks):
            expected = self.blocks[0].in_channels if i == 0 else self.width
            if blk.in_channels != expected:
                raise ValueError(
                    f"block {i} expects {blk.in_channels} channels, chain provides {expected}"
                )

    @property
    def required_divisor(self) -> int:
        depth = 0
        max_depth = 0
        for t in self.transitions:
            if t is TransitionKind.DOWN:
                depth += 1
            elif t is TransitionKind.UP:
                depth -= 1
            max_depth = max(max_depth, depth)
        return 2**max_depth

    @property
    def out_channels(self) -> int:
        return 6 * self.width


PAPER_TRANSITIONS = {
    7: (
        TransitionKind.DOWN,
        TransitionKind.DOWN,
        TransitionKind.DOWN,
        TransitionKind.UP,
        TransitionKind.UP,
        TransitionKind.UP,
    ),
    5: (
        TransitionKind.DOWN,
        TransitionKind.DOWN,
        TransitionKind.NONE,
        TransitionKind.NONE,
        TransitionKind.UP,
        TransitionKind.UP,
    ),
    3: (
        TransitionKind.DOWN,
        TransitionKind.NONE,
        TransitionKind.NONE,
        TransitionKind.NONE,
        TransitionKind.NONE,
        TransitionKind.UP,
    ),
}


def paper_stream_config(
    kernel: int,
    in_channels: int = 3,
    width: int = 8,
    n_layers: int = 3,
    growth: int = 8,
) -> StreamConfig:
    """Stream recipe for one of the three kernel sizes (7, 5 or 3)."""
    if kernel not in PAPER_TRANSITIONS:
        raise ValueError(f"no stream recipe for kernel {kernel}")
    blocks = tuple(
        DenseBlockConfig(
            n_layers=n_layers,
            growth=growth,
            kernel=kernel,
            in_channels=in_channels if i == 0 else width,
        )
        for i in range(6)
    )
    return StreamConfig(
        kernel=kernel,
        transitions=PAPER_TRANSITIONS[kernel],
        blocks=blocks,
        width=width,
    )


class DenseBlock(nn.Module):
    """Densely connected conv block: every layer sees all previous outputs."""

    def __init__(self, cfg: DenseBlockConfig):
        super().__init__()
        self.cfg = cfg
        layers = []
        channels = cfg.in_channels
        for _ in range(cfg.n_layers):
            layers.append(
                nn.Conv2d(channels, cfg.growth, cfg.kernel, padding=cfg.kernel // 2)
            )
            channels += cfg.growth
        self.layers = nn.ModuleList(layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.cfg.in_channels:
            raise ChannelMismatch(
                f"dense block expects {self.cfg.in_channels} channels, got {x.shape[1]}"
            )
        features = x
        for layer in self.layers:
            new = F.relu(layer(features))
            features = torch.cat([features, new], dim=1)
        return features


class Transition(nn.Module):
    """Follow-up layer after each dense block; sets channel width and scale."""

    def __init__(self, kind: TransitionKind, in_channels: int, out_channels: int):
        super().__init__()
        self.kind = kind
        if kind is TransitionKind.UP:
            self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        else:
            self.conv = nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.kind is TransitionKind.DOWN:
            return F.avg_pool2d(F.relu(self.conv(x)), 2)
        if self.kind is TransitionKind.UP:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            return F.relu(self.conv(x))
        return F.relu(self.conv(x))


def resample_by_levels(x: torch.Tensor, levels: int) -> torch.Tensor:
    """Shift a feature map by `levels` octaves: positive upsamples (nearest
    2x per level), negative average-pools. The same machinery transitions use."""
    for _ in range(max(levels, 0)):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
    for _ in range(max(-levels, 0)):
        x = F.avg_pool2d(x, 2)
    return x


class Stream(nn.Module):
    """One multi-scale stream: six block/transition stages whose outputs are
    tapped, resampled back to input resolution, and concatenated."""

    def __init__(self, cfg: StreamConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(DenseBlock(b) for b in cfg.blocks)
        self.transitions = nn.ModuleList(
            Transition(kind, block.out_channels, cfg.width)
            for kind, block in zip(cfg.transitions, cfg.blocks)
        )

    @property
    def out_channels(self) -> int:
        return self.cfg.out_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        div = self.cfg.required_divisor
        if h % div or w % div:
            raise IndivisibleDims(
                f"spatial dims {(h, w)} must be divisible by {div} for this stream"
            )
        taps: list[tuple[torch.Tensor, int]] = []
        cur = x
        depth = 0
        for block, trans, kind in zip(self.blocks, self.transitions, self.cfg.transitions):
            cur = trans(block(cur))
            if kind is TransitionKind.DOWN:
                depth += 1
            elif kind is TransitionKind.UP:
                depth -= 1
            taps.append((cur, depth))
        aligned = [resample_by_levels(t, d) for t, d in taps]
        return torch.cat(aligned, dim=1)


def make_label_map(
    label: DensityLabel,
    shape: tuple[int, int],
    one_hot: bool = False,
    dtype: torch.dtype = torch.float32,
    device: torch.device | str = "cpu",
) -> torch.Tensor:
    """Constant label map at feature resolution, shape (1, C, H, W).

    Scalar coding (default) fills a single channel with the label's integer
    code; one-hot coding uses three 0/1 channels instead.
    """
    h, w = int(shape[0]), int(shape[1])
    if h < 1 or w < 1:
        raise ValueError(f"label map shape must be positive, got {(h, w)}")
    label = DensityLabel(label)
    if one_hot:
        m = torch.zeros(1, 3, h, w, dtype=dtype, device=device)
        m[:, int(label) - 1] = 1.0
        return m
    return torch.full((1, 1, h, w), float(int(label)), dtype=dtype, device=device)


def fuse(streams: list[torch.Tensor], label_map: torch.Tensor | None) -> torch.Tensor:
    """Channelwise concatenation of stream features and the label map."""
    if not streams:
        raise ValueError("need at least one stream tensor")
    parts = list(streams)
    if label_map is not None:
        if label_map.shape[0] != streams[0].shape[0]:
            label_map = label_map.expand(streams[0].shape[0], -1, -1, -1)
        parts.append(label_map)
    ref = parts[0].shape
    for p in parts:
        if p.shape[0] != ref[0] or p.shape[-2:] != ref[-2:]:
            raise ShapeMismatch(
                f"cannot fuse shapes {[tuple(q.shape) for q in parts]}"
            )
    return torch.cat(parts, dim=1)
