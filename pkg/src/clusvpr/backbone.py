"""Small convolutional feature extractor standing in for a VGG-style trunk."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .numerics import DTYPE


class Backbone(nn.Module):
    """Stack of ``3x3 conv -> bias -> ReLU`` blocks.

    ``channels`` lists the output channels of every block and ``strides`` the
    stride of each one; the last entry of ``channels`` is the feature-map
    depth handed to the CWTNet stack.
    """

    def __init__(
        self,
        channels=(16, 32, 64, 64),
        strides=(2, 2, 2, 2),
        in_channels: int = 3,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if len(channels) != len(strides):
            raise ValueError("channels and strides must have the same length")
        self.channels = tuple(int(c) for c in channels)
        self.strides = tuple(int(s) for s in strides)
        self.in_channels = in_channels
        layers = []
        prev = in_channels
        for c, s in zip(self.channels, self.strides):
            conv = nn.Conv2d(prev, c, 3, stride=s, padding=1).to(DTYPE)
            # He fan-in init; biases start at zero
            std = math.sqrt(2.0 / (prev * 9))
            with torch.no_grad():
                conv.weight.normal_(0.0, std, generator=generator)
                conv.bias.zero_()
            layers.append(conv)
            prev = c
        self.convs = nn.ModuleList(layers)

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))

    def check_input(self, height: int, width: int) -> None:
        s = self.total_stride
        if height % s or width % s:
            raise ValueError(
                f"image size {height}x{width} not divisible by total stride {s}; "
                f"use a multiple of {s} on both sides"
            )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """``images`` is ``B x 3 x H x W``; returns ``B x C x H/s x W/s``."""
        self.check_input(images.shape[-2], images.shape[-1])
        x = images
        for conv in self.convs:
            x = F.relu(conv(x))
        return x


def backbone_forward(image, backbone: Backbone) -> torch.Tensor:
    """Run a single ``H x W x 3`` image through the backbone, returning ``C x h x w``."""
    img = torch.as_tensor(np.asarray(image), dtype=DTYPE)
    if img.ndim != 3 or img.shape[-1] != backbone.in_channels:
        raise ValueError(f"expected an H x W x {backbone.in_channels} image, got {tuple(img.shape)}")
    return backbone(img.permute(2, 0, 1).unsqueeze(0))[0]
