"""Scale-wise patch pyramids, pyramid similarity scores and the KL pyramid loss."""

from __future__ import annotations

import io
import zipfile
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
import torch

from .numerics import DTYPE

KL_EPS = 1e-12


@dataclass(frozen=True)
class Composition:
    """Patches as rectangles of cells on a ``grid x grid`` partition.

    Each rectangle is ``(row0, col0, row1, col1)`` in cell units, end-exclusive.
    """

    grid: int
    cells: tuple

    def __len__(self) -> int:
        return len(self.cells)

    def slices(self, height: int, width: int) -> list[tuple[slice, slice]]:
        if height % self.grid or width % self.grid:
            raise ValueError(f"map {height}x{width} not divisible by pyramid grid {self.grid}")
        ch, cw = height // self.grid, width // self.grid
        return [(slice(r0 * ch, r1 * ch), slice(c0 * cw, c1 * cw)) for r0, c0, r1, c1 in self.cells]


def query_composition() -> Composition:
    return Composition(2, tuple((r, c, r + 1, c + 1) for r in range(2) for c in range(2)))


def positive_composition() -> Composition:
    """16 single cells, 4 quadrant merges, the full map and the central 2x2 merge."""
    cells = [(r, c, r + 1, c + 1) for r in range(4) for c in range(4)]
    cells += [(r, c, r + 2, c + 2) for r in (0, 2) for c in (0, 2)]
    cells += [(0, 0, 4, 4), (1, 1, 3, 3)]
    return Composition(4, tuple(cells))


@dataclass
class PatchPyramid:
    role: str
    patches: list
    composition: Composition = field(repr=False)


def build_pyramid(fmap: torch.Tensor, role: str, composition: Composition | None = None) -> PatchPyramid:
    """Cut a ``C x H x W`` (or batched) feature map into the patches of a composition."""
    if composition is None:
        if role == "query":
            composition = query_composition()
        elif role == "positive":
            composition = positive_composition()
        else:
            raise ValueError(f"unknown pyramid role {role!r}")
    h, w = fmap.shape[-2:]
    if h % 4 or w % 4:
        raise ValueError(f"feature map {h}x{w} must be divisible by 4")
    patches = [fmap[..., rs, cs] for rs, cs in composition.slices(h, w)]
    return PatchPyramid(role, patches, composition)


def encode_pyramid(encode, fmaps: torch.Tensor, composition: Composition) -> torch.Tensor:
    """Encode every patch of every map: returns ``B x len(composition) x dim``.

    Patches of equal size are batched through ``encode`` together.
    """
    b = fmaps.shape[0]
    slices = composition.slices(*fmaps.shape[-2:])
    by_size = defaultdict(list)
    for idx, (rs, cs) in enumerate(slices):
        by_size[(rs.stop - rs.start, cs.stop - cs.start)].append(idx)
    out = [None] * len(slices)
    for size in sorted(by_size):
        idxs = by_size[size]
        stack = torch.cat([fmaps[:, :, slices[i][0], slices[i][1]] for i in idxs], dim=0)
        reps = encode(stack).view(len(idxs), b, -1)
        for j, i in enumerate(idxs):
            out[i] = reps[j]
    return torch.stack(out, dim=1)


def pyramid_logits(q_reps: torch.Tensor, p_reps: torch.Tensor) -> torch.Tensor:
    """All query-patch x positive-patch inner products, query-major: ``(B x) Q*P``."""
    sims = q_reps @ p_reps.transpose(-1, -2)
    return sims.reshape(*sims.shape[:-2], -1)


def pyramid_scores(q_reps, p_reps, temperature: float, check: bool = True):
    """Softmax over the query-major inner products divided by ``temperature``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    is_tensor = torch.is_tensor(q_reps)
    q = q_reps if is_tensor else torch.as_tensor(np.asarray(q_reps, dtype=np.float64))
    p = p_reps if torch.is_tensor(p_reps) else torch.as_tensor(np.asarray(p_reps, dtype=np.float64))
    if check:
        for name, t in (("query", q), ("positive", p)):
            norms = t.detach().norm(dim=-1)
            if torch.any((norms - 1).abs() > 1e-4):
                raise ValueError(f"{name} patch representations must be L2-normalised")
    s = torch.softmax(pyramid_logits(q, p) / temperature, dim=-1)
    return s if is_tensor else s.numpy()


def pyramid_loss(current, target):
    """``sum target * log(target / current)`` with both sides clamped at 1e-12.

    The target is treated as a constant.
    """
    is_tensor = torch.is_tensor(current)
    y = current if is_tensor else torch.as_tensor(np.asarray(current, dtype=np.float64))
    t = target.detach() if torch.is_tensor(target) else torch.as_tensor(np.asarray(target, dtype=np.float64))
    if y.shape != t.shape:
        raise ValueError(f"score shapes differ: {tuple(y.shape)} vs {tuple(t.shape)}")
    t = t.to(y.dtype)
    loss = (t * (torch.log(t.clamp_min(KL_EPS)) - torch.log(y.clamp_min(KL_EPS)))).sum(-1)
    return loss if is_tensor else float(loss)


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


class TargetCache:
    """Write-once store of distillation targets keyed by (generation, query, positive)."""

    def __init__(self):
        self._store: dict[tuple[int, str, str], np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._store)

    def __contains__(self, key) -> bool:
        return key in self._store

    def get(self, generation: int, query: str, positive: str):
        return self._store.get((generation, query, positive))

    def put(self, generation: int, query: str, positive: str, scores) -> None:
        key = (generation, query, positive)
        if key in self._store:
            raise KeyError(f"target {key} already cached")
        self._store[key] = np.asarray(scores, dtype=np.float64).copy()

    def save(self, path) -> None:
        """Binary sidecar: an ``.npz`` archive with arrays ``t000000``... and a
        ``keys`` array of ``(generation, query, positive)`` string triples.

        Entry timestamps are fixed so that equal caches give equal bytes.
        """
        items = sorted(self._store.items())
        keys = np.array([[str(g), q, p] for (g, q, p), _ in items], dtype=str).reshape(-1, 3)
        arrays = {"keys": keys}
        arrays.update({f"t{i:06d}": v for i, (_, v) in enumerate(items)})
        with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
            for name, arr in arrays.items():
                buf = io.BytesIO()
                np.lib.format.write_array(buf, arr, allow_pickle=False)
                zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())

    @classmethod
    def load(cls, path) -> "TargetCache":
        cache = cls()
        with np.load(path, allow_pickle=False) as data:
            for i, (g, q, p) in enumerate(data["keys"]):
                cache.put(int(g), str(q), str(p), data[f"t{i:06d}"])
        return cache


@torch.no_grad()
def generation_targets(
    model,
    query_maps: torch.Tensor,
    positive_maps: torch.Tensor,
    temperature: float,
    q_comp: Composition | None = None,
    p_comp: Composition | None = None,
) -> torch.Tensor:
    """Target pyramid scores from a frozen model for aligned query/positive maps.

    ``query_maps`` and ``positive_maps`` are backbone feature maps of that same
    frozen model, ``B x C x H x W`` each.
    """
    q_comp = q_comp or query_composition()
    p_comp = p_comp or positive_composition()
    was_training = model.training
    model.eval()
    try:
        q = encode_pyramid(model.encode_map, query_maps, q_comp)
        p = encode_pyramid(model.encode_map, positive_maps, p_comp)
    finally:
        model.train(was_training)
    return pyramid_scores(q, p, temperature, check=False).to(DTYPE)
