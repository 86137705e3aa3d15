"""Build descriptor indexes from a trained checkpoint and an image manifest."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import load_images
from .model import ClusVPR, encode_images
from .optlad import PCAParams, pca_apply
from .retrieval import DescriptorIndex, ManifestRow, manifest_geo

log = logging.getLogger(__name__)


def global_descriptors(model: ClusVPR, pca: PCAParams | None, images) -> np.ndarray:
    """Unit global descriptors: encoder output, PCA-whitened when ``pca`` is given."""
    desc = encode_images(model, images)
    if pca is None:
        return desc
    if len(desc) == 0:
        return np.zeros((0, pca.out_dim))
    return pca_apply(desc, pca)


@dataclass
class BuildReport:
    records: int
    skipped: list = field(default_factory=list)


def build_index(model: ClusVPR, pca: PCAParams | None, rows: list[ManifestRow], root) -> tuple[DescriptorIndex, BuildReport]:
    """Encode every readable manifest image into an index sorted by id.

    Rows are sorted by id first, so the index does not depend on manifest
    order. Unreadable images are skipped and listed in the report.
    """
    rows = sorted(rows, key=lambda r: r.id)
    modes = {r.mode for r in rows}
    if len(modes) > 1:
        raise ValueError(f"manifest mixes geotag modes {sorted(modes)}")
    mode = modes.pop() if modes else "planar"
    dim = pca.out_dim if pca is not None else model.descriptor_dim
    images, bad = load_images(rows, Path(root))
    for rid in bad:
        log.warning("skipped unreadable image for %s", rid)
    kept = [r for r in rows if r.id not in set(bad)]
    if not kept:
        return DescriptorIndex.empty(dim, mode), BuildReport(0, bad)
    desc = global_descriptors(model, pca, images)
    index = DescriptorIndex([r.id for r in kept], desc, manifest_geo(kept), mode, skipped=list(bad))
    return index, BuildReport(len(kept), bad)
