"""Backbone + CWTNet stack + OptLAD assembled into one encoder."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .backbone import Backbone
from .cluster_attention import CWTNet
from .config import ModelConfig
from .numerics import DTYPE
from .optlad import OptLAD


class ClusVPR(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        # parameter init order: backbone, CWTNets in stack order, OptLAD
        g = torch.Generator().manual_seed(int(seed))
        self.backbone = Backbone(config.backbone_channels, config.backbone_strides, generator=g)
        c = config.channels
        self.cwtnets = nn.ModuleList(
            CWTNet(
                c,
                split=config.split,
                heads=config.heads,
                rate=config.rate,
                k_n=config.k_n,
                lambda_c=config.lambda_c,
                mlp_ratio=config.mlp_ratio,
                generator=g,
            )
            for _ in range(config.cwt_blocks)
        )
        self.optlad = OptLAD(
            c,
            clusters=config.clusters,
            expansion=config.expansion,
            groups=config.groups,
            gem_p=config.gem_p,
            sharpness=config.sharpness,
            generator=g,
        )

    @property
    def descriptor_dim(self) -> int:
        return self.optlad.out_dim

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.backbone(images)

    def refine(self, fmap: torch.Tensor) -> torch.Tensor:
        for net in self.cwtnets:
            fmap = net(fmap)
        return fmap

    def encode_map(self, fmap: torch.Tensor) -> torch.Tensor:
        """Feature map (or patch) ``B x C x h x w`` -> unit descriptors ``B x dim``."""
        return self.optlad(self.refine(fmap))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.encode_map(self.features(images))

    def init_clusters(self, images: torch.Tensor, seed: int = 0) -> None:
        """k-means initialisation of the OptLAD centres from a sample of images."""
        with torch.no_grad():
            fmap = self.refine(self.features(images))
        self.optlad.init_from_descriptors(fmap, seed=seed)


def images_to_tensor(images) -> torch.Tensor:
    """``uint8`` ``B x H x W x 3`` array to float ``B x 3 x H x W`` in [0, 1]."""
    arr = np.asarray(images)
    t = torch.as_tensor(arr, dtype=DTYPE) / 255.0
    return t.permute(0, 3, 1, 2).contiguous()


@torch.no_grad()
def encode_images(model: ClusVPR, images, batch_size: int = 64) -> np.ndarray:
    """Unit descriptors for a ``uint8`` image stack, no gradient."""
    out = []
    for start in range(0, len(images), batch_size):
        out.append(model(images_to_tensor(images[start : start + batch_size])).numpy())
    if not out:
        return np.zeros((0, model.descriptor_dim))
    return np.concatenate(out)
