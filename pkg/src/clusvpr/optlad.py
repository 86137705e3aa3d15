"""Grouped VLAD aggregation with GeM group weights, plus PCA-whitening."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.cluster.vq import kmeans2
from torch import nn

from .numerics import DTYPE

log = logging.getLogger(__name__)

GEM_EPS = 1e-6


class OptLAD(nn.Module):
    """Expand channels by ``expansion``, split into ``groups`` and VLAD-aggregate.

    Each group ``g`` has ``clusters`` centres of width ``D' = expansion*C/groups``,
    a linear soft-assignment ``softmax_k(w_gk . x + b_gk)`` and a GeM exponent
    ``p_g``. Group residual matrices are merged with ``sigmoid(GeM)`` weights
    into one ``D' x K`` matrix.
    """

    def __init__(
        self,
        channels: int,
        clusters: int = 64,
        expansion: int = 2,
        groups: int = 8,
        gem_p: float = 3.0,
        sharpness: float = 10.0,
        generator=None,
    ):
        super().__init__()
        wide = expansion * channels
        if wide % groups:
            raise ValueError(f"groups={groups} does not divide expanded width {wide}")
        if clusters < 1:
            raise ValueError("need at least one cluster")
        self.channels = channels
        self.clusters = clusters
        self.expansion = expansion
        self.groups = groups
        self.group_dim = wide // groups
        self.sharpness = sharpness
        self.expand_conv = nn.Conv2d(channels, wide, 1, bias=False).to(DTYPE)
        self.centers = nn.Parameter(torch.empty(groups, clusters, self.group_dim, dtype=DTYPE))
        self.assign_weight = nn.Parameter(torch.empty(groups, clusters, self.group_dim, dtype=DTYPE))
        self.assign_bias = nn.Parameter(torch.empty(groups, clusters, dtype=DTYPE))
        self.gem_p = nn.Parameter(torch.full((groups,), float(gem_p), dtype=DTYPE))
        with torch.no_grad():
            self.expand_conv.weight.normal_(0.0, (1.0 / channels) ** 0.5, generator=generator)
            self.centers.uniform_(0.0, 1.0, generator=generator)
        self._assignment_from_centers()

    @property
    def out_dim(self) -> int:
        return self.group_dim * self.clusters

    def _assignment_from_centers(self) -> None:
        a = self.sharpness
        with torch.no_grad():
            self.assign_weight.copy_(2.0 * a * self.centers)
            self.assign_bias.copy_(-a * (self.centers**2).sum(-1))

    def init_from_descriptors(self, fmaps: torch.Tensor, seed: int = 0, max_samples: int = 20000) -> None:
        """k-means centres per group on expanded descriptors of ``fmaps``.

        The soft-assignment sharpness is divided by the mean squared distance
        to the nearest centre so that the initial assignment does not depend on
        the descriptor scale.
        """
        with torch.no_grad():
            x = self.expand(fmaps).reshape(-1, self.groups, self.group_dim).numpy()
        rng = np.random.default_rng(seed)
        if x.shape[0] > max_samples:
            x = x[np.sort(rng.choice(x.shape[0], max_samples, replace=False))]
        centers = np.empty((self.groups, self.clusters, self.group_dim))
        spread = []
        for g in range(self.groups):
            data = x[:, g, :]
            if data.shape[0] >= self.clusters:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    c, labels = kmeans2(data, self.clusters, minit="++", seed=rng)
            else:
                c = data[rng.integers(0, data.shape[0], self.clusters)]
                labels = np.argmin(((data[:, None] - c[None]) ** 2).sum(-1), axis=1)
            centers[g] = c
            spread.append(np.mean(((data - c[labels]) ** 2).sum(-1)))
        scale = float(np.mean(spread))
        with torch.no_grad():
            self.centers.copy_(torch.as_tensor(centers, dtype=DTYPE))
        base = self.sharpness
        self.sharpness = base / max(scale, 1e-12)
        self._assignment_from_centers()
        self.sharpness = base

    def expand(self, fmap: torch.Tensor) -> torch.Tensor:
        """``B x C x H x W`` -> ``B x D x expansion*C`` descriptor rows."""
        if fmap.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {fmap.shape[1]}")
        return self.expand_conv(fmap).flatten(2).transpose(1, 2)

    def grouped(self, descriptors: torch.Tensor) -> torch.Tensor:
        b, d, _ = descriptors.shape
        return descriptors.reshape(b, d, self.groups, self.group_dim)

    def soft_assign(self, x: torch.Tensor) -> torch.Tensor:
        """``B x D x G x D'`` -> assignments ``B x D x G x K``."""
        logits = torch.einsum("bdgj,gkj->bdgk", x, self.assign_weight) + self.assign_bias
        return torch.softmax(logits, dim=-1)

    def group_weights(self, x: torch.Tensor) -> torch.Tensor:
        """``sigmoid`` of the mean per-descriptor GeM, one weight per group: ``B x G``."""
        p = self.gem_p
        if torch.any(p <= 0):
            raise ValueError("GeM exponents must be positive")
        xr = x.clamp_min(GEM_EPS)
        gem = xr.pow(p[:, None]).mean(-1).pow(1.0 / p)
        return torch.sigmoid(gem.mean(1))

    def group_residuals(self, x: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
        """Per-group VLAD ``B x G x D' x K``."""
        weighted = torch.einsum("bdgk,bdgj->bgjk", alpha, x)
        mass = alpha.sum(1)  # B x G x K
        return weighted - torch.einsum("bgk,gkj->bgjk", mass, self.centers)

    def aggregate(self, descriptors: torch.Tensor, group_weights: torch.Tensor | None = None) -> torch.Tensor:
        """Merged VLAD matrix ``B x D' x K``; pass ``group_weights`` to override the GeM weights."""
        x = self.grouped(descriptors)
        alpha = self.soft_assign(x)
        beta = self.group_weights(x) if group_weights is None else group_weights
        return torch.einsum("bg,bgjk->bjk", beta, self.group_residuals(x, alpha))

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        return normalize_vlad(self.aggregate(self.expand(fmap)))

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def normalize_vlad(v: torch.Tensor) -> torch.Tensor:
    """Intra-normalise columns, flatten cluster-major, then L2-normalise. Batched."""
    v = F.normalize(v, dim=-2, eps=1e-12)
    flat = v.transpose(-1, -2).reshape(*v.shape[:-2], -1)
    return F.normalize(flat, dim=-1, eps=1e-12)


def normalize_descriptor(v) -> np.ndarray | torch.Tensor:
    """Single ``D' x K`` matrix to a unit vector; zero columns stay zero."""
    is_tensor = torch.is_tensor(v)
    t = v if is_tensor else torch.as_tensor(np.asarray(v, dtype=np.float64))
    if not torch.all(torch.isfinite(t)):
        raise ValueError("VLAD matrix contains non-finite values")
    if not torch.any(t != 0):
        raise ValueError("all-zero VLAD matrix has no valid descriptor")
    out = normalize_vlad(t)
    return out if is_tensor else out.numpy()


def soft_assign(x, weight, bias) -> np.ndarray:
    """Soft assignment of one descriptor to the ``K`` clusters of a group."""
    logits = np.asarray(weight, dtype=np.float64) @ np.asarray(x, dtype=np.float64) + np.asarray(bias)
    logits = logits - logits.max()
    e = np.exp(logits)
    return e / e.sum()


def group_weight(x, p: float, eps: float = GEM_EPS) -> float:
    """``sigmoid(mean_i GeM_p(x_i))`` over the ``D x D'`` descriptors of one group."""
    if p <= 0:
        raise ValueError(f"GeM exponent must be positive, got {p}")
    x = np.maximum(np.asarray(x, dtype=np.float64), eps)
    gem = np.mean(x**p, axis=-1) ** (1.0 / p)
    return float(1.0 / (1.0 + np.exp(-gem.mean())))


@dataclass
class PCAParams:
    mean: np.ndarray
    projection: np.ndarray  # out_dim x in_dim, whitening folded in
    eigenvalues: np.ndarray

    @property
    def out_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def in_dim(self) -> int:
        return self.projection.shape[1]


def pca_fit(descriptors, out_dim: int, eig_floor: float = 1e-8) -> PCAParams:
    """Whitened PCA onto the top ``out_dim`` principal axes."""
    x = np.asarray(descriptors, dtype=np.float64)
    n, dim = x.shape
    if out_dim > dim:
        raise ValueError(f"cannot project {dim}-dim descriptors to {out_dim} dims")
    if n <= out_dim:
        warnings.warn(f"PCA fit with {n} samples for {out_dim} output dims", RuntimeWarning, stacklevel=2)
    mean = x.mean(0)
    xc = x - mean
    # thin SVD avoids forming the dim x dim covariance when n << dim
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    eig = s**2 / max(n - 1, 1)
    if eig.size < out_dim:
        eig = np.concatenate([eig, np.zeros(out_dim - eig.size)])
        vt = np.concatenate([vt, _orthogonal_complement(vt, out_dim - vt.shape[0])])
    eig = eig[:out_dim]
    vt = vt[:out_dim]
    # deterministic sign: largest-magnitude entry of each axis positive
    signs = np.sign(vt[np.arange(out_dim), np.argmax(np.abs(vt), axis=1)])
    vt = vt * np.where(signs == 0, 1.0, signs)[:, None]
    if np.any(eig < eig_floor):
        warnings.warn("rank-deficient covariance; eigenvalue floor applied", RuntimeWarning, stacklevel=2)
    eig = np.maximum(eig, eig_floor)
    return PCAParams(mean, vt / np.sqrt(eig)[:, None], eig)


def _orthogonal_complement(vt: np.ndarray, count: int) -> np.ndarray:
    dim = vt.shape[1]
    q, _ = np.linalg.qr(np.concatenate([vt.T, np.eye(dim)], axis=1))
    return q[:, vt.shape[0] : vt.shape[0] + count].T


def pca_transform(vec, params: PCAParams, normalize: bool = True) -> np.ndarray:
    x = np.asarray(vec, dtype=np.float64)
    if x.shape[-1] != params.in_dim:
        raise ValueError(f"expected {params.in_dim}-dim input, got {x.shape[-1]}")
    y = (x - params.mean) @ params.projection.T
    if not normalize:
        return y
    norm = np.linalg.norm(y, axis=-1, keepdims=True)
    return y / np.where(norm == 0, 1.0, norm)


def pca_apply(vec, params: PCAParams) -> np.ndarray:
    """Project, whiten and re-L2-normalise; works on one vector or a batch."""
    return pca_transform(vec, params, normalize=True)


def param_count_report(
    channels: int = 1024,
    clusters: int = 64,
    expansion: int = 2,
    groups: int = 8,
    out_dim: int = 4096,
    standard_clusters: int = 128,
) -> dict:
    """Parameter counts for OptLAD+PCA against standard NetVLAD+PCA.

    PCA counts are given with and without the mean vector. The ``ratio``
    compares OptLAD with a standard NetVLAD of the same cluster count.
    """

    def pca(dim):
        return {"projection": dim * out_dim, "with_mean": dim * out_dim + dim}

    def netvlad_layer(k):
        return 2 * k * channels + k  # centres, assignment weights, biases

    optlad_dim = expansion * channels * clusters // groups
    d_prime = expansion * channels // groups
    optlad_layer = channels * expansion * channels + groups * (2 * clusters * d_prime + clusters) + groups
    std_ref_dim = channels * standard_clusters
    std_same_dim = channels * clusters
    report = {
        "config": dict(
            channels=channels,
            clusters=clusters,
            expansion=expansion,
            groups=groups,
            out_dim=out_dim,
            standard_clusters=standard_clusters,
        ),
        "netvlad_reference": {
            "descriptor_dim": std_ref_dim,
            "layer": netvlad_layer(standard_clusters),
            "pca": pca(std_ref_dim),
        },
        "netvlad_same_k": {
            "descriptor_dim": std_same_dim,
            "layer": netvlad_layer(clusters),
            "pca": pca(std_same_dim),
        },
        "optlad": {"descriptor_dim": optlad_dim, "layer": optlad_layer, "pca": pca(optlad_dim)},
    }
    report["pca_ratio"] = std_same_dim / optlad_dim
    report["pca_ratio_with_mean"] = report["netvlad_same_k"]["pca"]["with_mean"] / report["optlad"]["pca"]["with_mean"]
    return report


def format_param_report(report: dict) -> str:
    c = report["config"]
    rows = [
        ("NetVLAD K=%d" % c["standard_clusters"], report["netvlad_reference"]),
        ("NetVLAD K=%d" % c["clusters"], report["netvlad_same_k"]),
        ("OptLAD K=%d lambda=%d G=%d" % (c["clusters"], c["expansion"], c["groups"]), report["optlad"]),
    ]
    lines = [f"C={c['channels']} N'={c['out_dim']}", "stage,descriptor_dim,layer_params,pca_params,pca_params_with_mean"]
    for name, r in rows:
        lines.append(f"{name},{r['descriptor_dim']},{r['layer']},{r['pca']['projection']},{r['pca']['with_mean']}")
    lines.append(f"pca_reduction_ratio,{report['pca_ratio']:g}")
    return "\n".join(lines)
