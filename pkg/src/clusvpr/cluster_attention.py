"""Clustering-weighted transformer feature refinement (CWTNet).

A feature map is pooled into tokens, each token receives a weight from the
density of its nearest neighbours (sparse tokens weigh more), and the
weights rescale the value rows of multi-head self-attention. A depthwise
convolution branch runs alongside on the other half of the channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .numerics import DTYPE


@dataclass
class TokenSequence:
    tokens: torch.Tensor  # B x N x C
    grid: tuple[int, int]  # token grid (H/P, W/P)
    origin: tuple[int, int]  # (H, W)
    rate: int


@dataclass
class ClusterWeights:
    w: torch.Tensor
    rho: torch.Tensor
    d: torch.Tensor
    k_n: int


def tokenize(fmap: torch.Tensor, rate: int) -> TokenSequence:
    """Average-pool ``rate x rate`` cells into tokens.

    Accepts ``C x H x W`` or ``B x C x H x W``; tokens are ``(B x) N x C`` in
    row-major cell order.
    """
    single = fmap.ndim == 3
    x = fmap.unsqueeze(0) if single else fmap
    h, w = x.shape[-2:]
    if h % rate or w % rate:
        raise ValueError(f"down-sampling rate {rate} does not divide map size {h}x{w}")
    pooled = F.avg_pool2d(x, rate) if rate > 1 else x
    tokens = pooled.flatten(2).transpose(1, 2)
    if single:
        tokens = tokens[0]
    return TokenSequence(tokens, (h // rate, w // rate), (h, w), rate)


def _pairwise_sq_dist(x: torch.Tensor) -> torch.Tensor:
    diff = x.unsqueeze(-2) - x.unsqueeze(-3)
    return (diff * diff).sum(-1)


def knn_density(tokens: torch.Tensor, k_n: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Summed squared distance to the ``k_n`` nearest other tokens, and density.

    ``rho_i = exp(-(d_i - d_min) / (k_n (d_max - d_min)))``. When all ``d`` are
    equal the density is 1 everywhere. Ties between neighbours are broken by
    the lower token index.
    """
    tokens = torch.as_tensor(tokens, dtype=DTYPE) if not torch.is_tensor(tokens) else tokens
    single = tokens.ndim == 2
    x = tokens.unsqueeze(0) if single else tokens
    n = x.shape[-2]
    if not 1 <= k_n < n:
        raise ValueError(f"need N > k_n >= 1, got N={n}, k_n={k_n}")
    dist = _pairwise_sq_dist(x)
    eye = torch.eye(n, dtype=torch.bool, device=x.device)
    order = torch.sort(dist.detach().masked_fill(eye, float("inf")), dim=-1, stable=True).indices
    d = dist.gather(-1, order[..., :k_n]).sum(-1)

    d_min = d.min(-1, keepdim=True).values
    d_max = d.max(-1, keepdim=True).values
    span = d_max - d_min
    degenerate = span <= 1e-12 * (1.0 + d_max.abs())
    safe = torch.where(degenerate, torch.ones_like(span), span)
    rho = torch.exp(-(d - d_min) / (k_n * safe))
    rho = torch.where(degenerate, torch.ones_like(rho), rho)
    if single:
        return d[0], rho[0]
    return d, rho


def cluster_weights(rho: torch.Tensor) -> torch.Tensor:
    """Normalised ``1 - rho`` rescaled to [0, 1]; degenerate inputs map to 0.5."""
    rho = torch.as_tensor(rho, dtype=DTYPE) if not torch.is_tensor(rho) else rho
    u = 1.0 - rho
    total = u.sum(-1, keepdim=True)
    dead = total <= 1e-300
    w = u / torch.where(dead, torch.ones_like(total), total)
    w_min = w.min(-1, keepdim=True).values
    w_max = w.max(-1, keepdim=True).values
    span = w_max - w_min
    flat = dead | (span <= 1e-12 * w_max.abs().clamp_min(1e-300))
    w = (w - w_min) / torch.where(flat, torch.ones_like(span), span)
    return torch.where(flat, torch.full_like(w, 0.5), w)


def token_weights(tokens: torch.Tensor, k_n: int) -> ClusterWeights:
    """Cluster weights for a ``B x N x C`` batch with ``k_n`` clamped to ``N - 1``."""
    n = tokens.shape[-2]
    k = min(k_n, n - 1)
    if k < 1:
        shape = tokens.shape[:-1]
        ones = torch.ones(shape, dtype=tokens.dtype, device=tokens.device)
        return ClusterWeights(0.5 * ones, ones, torch.zeros_like(ones), 0)
    d, rho = knn_density(tokens, k)
    return ClusterWeights(cluster_weights(rho), rho, d, k)


class CMSA(nn.Module):
    """Multi-head self-attention whose value rows are scaled by ``lambda_c + w_i``.

    No LayerNorm. Projections for queries, keys and values have no bias; the
    output projection does.
    """

    def __init__(self, dim: int, heads: int = 4, lambda_c: float = 0.5, generator=None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"head count {heads} does not divide channel count {dim}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.lambda_c = lambda_c
        self.w_q = nn.Linear(dim, dim, bias=False).to(DTYPE)
        self.w_k = nn.Linear(dim, dim, bias=False).to(DTYPE)
        self.w_v = nn.Linear(dim, dim, bias=False).to(DTYPE)
        self.proj = nn.Linear(dim, dim).to(DTYPE)
        std = 1.0 / math.sqrt(dim)
        with torch.no_grad():
            for lin in (self.w_q, self.w_k, self.w_v, self.proj):
                lin.weight.normal_(0.0, std, generator=generator)
            self.proj.bias.zero_()

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        q = self._split(self.w_q(x))
        k = self._split(self.w_k(x))
        return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)

    def heads_output(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        """Per-head outputs ``B x heads x N x head_dim`` before the output projection."""
        if w.shape != x.shape[:-1]:
            raise ValueError(f"weights shape {tuple(w.shape)} does not match tokens {tuple(x.shape[:-1])}")
        v = self._split(self.w_v(x))
        scale = (self.lambda_c + w).unsqueeze(1).unsqueeze(-1)
        return self.attention(x) @ (scale * v)

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        single = x.ndim == 2
        if single:
            x, w = x.unsqueeze(0), w.unsqueeze(0)
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected {self.dim} channels, got {x.shape[-1]}")
        out = self.heads_output(x, w).transpose(1, 2).reshape(x.shape)
        out = self.proj(out)
        return out[0] if single else out


def cmsa(tokens: torch.Tensor, weights: torch.Tensor, params: CMSA) -> torch.Tensor:
    return params(tokens, weights)


class CWTBlock(nn.Module):
    """Pool -> weighted attention -> MLP -> transposed-conv upsample, all residual."""

    def __init__(
        self,
        dim: int,
        heads: int = 4,
        rate: int = 2,
        k_n: int = 10,
        lambda_c: float = 0.5,
        mlp_ratio: int = 2,
        zero_init_pointwise: bool = True,
        generator=None,
    ):
        super().__init__()
        self.rate = rate
        self.k_n = k_n
        self.cmsa = CMSA(dim, heads, lambda_c, generator=generator)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim).to(DTYPE)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim).to(DTYPE)
        # depthwise separable transposed conv: per-channel P x P, then 1x1 mixing
        self.up_depthwise = nn.ConvTranspose2d(dim, dim, rate, stride=rate, groups=dim, bias=False).to(DTYPE)
        self.up_pointwise = nn.Conv2d(dim, dim, 1).to(DTYPE)
        with torch.no_grad():
            self.fc1.weight.normal_(0.0, 1.0 / math.sqrt(dim), generator=generator)
            self.fc2.weight.normal_(0.0, 1.0 / math.sqrt(mlp_ratio * dim), generator=generator)
            self.fc1.bias.zero_()
            self.fc2.bias.zero_()
            self.up_depthwise.weight.fill_(1.0)
            self.up_pointwise.bias.zero_()
            if zero_init_pointwise:
                self.up_pointwise.weight.zero_()
            else:
                self.up_pointwise.weight.normal_(0.0, 1.0 / math.sqrt(dim), generator=generator)

    def forward(self, m: torch.Tensor) -> torch.Tensor:
        seq = tokenize(m, self.rate)
        x = seq.tokens
        weights = token_weights(x, self.k_n).w
        z = self.cmsa(x, weights) + x
        z = self.fc2(F.gelu(self.fc1(z))) + z
        b, c = m.shape[:2]
        gh, gw = seq.grid
        grid = z.transpose(1, 2).reshape(b, c, gh, gw)
        return self.up_pointwise(self.up_depthwise(grid)) + m


def weight_map(m: torch.Tensor, block: CWTBlock) -> torch.Tensor:
    """Token weights of ``block`` for map ``m`` laid out on the token grid (debug heatmap)."""
    seq = tokenize(m, block.rate)
    w = token_weights(seq.tokens, block.k_n).w
    return w.reshape(*w.shape[:-1], *seq.grid)


def cwt_block(m_p: torch.Tensor, block: CWTBlock) -> torch.Tensor:
    if m_p.ndim == 3:
        return block(m_p.unsqueeze(0))[0]
    return block(m_p)


class CWTNet(nn.Module):
    """Channel-split block: depthwise-conv local branch beside a CWT global branch.

    The first ``split`` channels go through the local branch
    ``m + dw2(GELU(dw1(m)))``; the rest through :class:`CWTBlock`. Outputs are
    concatenated back to the input width.
    """

    def __init__(
        self,
        channels: int,
        split: int | None = None,
        heads: int = 4,
        rate: int = 2,
        k_n: int = 10,
        lambda_c: float = 0.5,
        mlp_ratio: int = 2,
        zero_init_pointwise: bool = True,
        generator=None,
    ):
        super().__init__()
        if split is None:
            if channels % 2:
                raise ValueError(f"odd channel count {channels} needs an explicit split point")
            split = channels // 2
        if not 0 < split < channels:
            raise ValueError(f"split {split} must lie strictly inside (0, {channels})")
        self.channels = channels
        self.split = split
        local = split
        # replicate padding keeps constant maps constant, so patch encodings do
        # not depend on how much border a patch has
        self.local_dw1 = nn.Conv2d(local, local, 3, padding=1, groups=local, padding_mode="replicate").to(DTYPE)
        self.local_dw2 = nn.Conv2d(local, local, 3, padding=1, groups=local, padding_mode="replicate").to(DTYPE)
        with torch.no_grad():
            for conv in (self.local_dw1, self.local_dw2):
                conv.weight.normal_(0.0, 1.0 / 3.0, generator=generator)
                conv.bias.zero_()
        self.global_branch = CWTBlock(
            channels - split, heads, rate, k_n, lambda_c, mlp_ratio, zero_init_pointwise, generator
        )

    def local_branch(self, m: torch.Tensor) -> torch.Tensor:
        return m + self.local_dw2(F.gelu(self.local_dw1(m)))

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        if fmap.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {fmap.shape[1]}")
        local, glob = fmap[:, : self.split], fmap[:, self.split :]
        return torch.cat([self.local_branch(local), self.global_branch(glob)], dim=1)


def cwtnet_forward(fmap: torch.Tensor, net: CWTNet | nn.Sequential) -> torch.Tensor:
    if fmap.ndim == 3:
        return net(fmap.unsqueeze(0))[0]
    return net(fmap)
