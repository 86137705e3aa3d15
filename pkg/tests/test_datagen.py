import hashlib
from dataclasses import replace

import numpy as np
import pytest

from clusvpr.config import WorldSpec
from clusvpr.datagen import generate_arrays, place_centers, read_ppm, synth_world, write_ppm
from clusvpr.retrieval import DescriptorIndex, read_manifest
from clusvpr.training import mine_triplets
from clusvpr.config import TrainConfig


SMALL = WorldSpec(places=6, variants=6, image_size=32, max_shift=4)


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synth_world_byte_identical(tmp_path):
    synth_world(SMALL, tmp_path / "a")
    synth_world(SMALL, tmp_path / "b")
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_seed_changes_world(tmp_path):
    a = generate_arrays(SMALL)["gallery"][1]
    b = generate_arrays(replace(SMALL, seed=8))["gallery"][1]
    assert not np.array_equal(a, b)


def test_manifests_and_files(tmp_path):
    rows = synth_world(SMALL, tmp_path)
    assert read_manifest(tmp_path / "manifest.csv") == rows["all"]
    assert len(rows["all"]) == 36
    for name in ("gallery", "train_queries", "val_queries"):
        assert read_manifest(tmp_path / f"{name}.csv") == rows[name]
    img = read_ppm(tmp_path / rows["all"][0].path)
    assert img.shape == (32, 32, 3) and img.dtype == np.uint8
    assert (tmp_path / rows["all"][0].path).read_bytes().startswith(b"P6\n32 32\n255\n")
    arrays = generate_arrays(SMALL)
    assert np.array_equal(arrays["gallery"][1][0], img)


def test_ppm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "x.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "x.ppm"), img)


def test_jitter_bound_and_spacing():
    spec = WorldSpec()
    centers = place_centers(spec)
    data = generate_arrays(spec)
    for rows, _ in data.values():
        for r in rows:
            place = int(r.id[1:4])
            assert np.hypot(r.lat - centers[place, 0], r.lon - centers[place, 1]) <= 5.0 + 1e-9
    diff = centers[:, None] - centers[None]
    d = np.hypot(diff[..., 0], diff[..., 1])
    assert d[~np.eye(len(d), dtype=bool)].min() >= 60.0


def test_default_split_sizes():
    data = generate_arrays(WorldSpec())
    assert [len(data[s][0]) for s in ("gallery", "train_queries", "val_queries")] == [150, 75, 75]


def test_raw_pixel_separability():
    data = generate_arrays(WorldSpec())
    g_rows, g = data["gallery"]
    v_rows, v = data["val_queries"]
    g = g.reshape(len(g), -1).astype(np.float64)
    v = v.reshape(len(v), -1).astype(np.float64)
    nearest = np.argmin(((v[:, None] - g[None]) ** 2).sum(-1), axis=1)
    recall = np.mean([g_rows[j].id[:4] == r.id[:4] for j, r in zip(nearest, v_rows)])
    assert recall > 1 / 25


def test_mining_feasible_for_every_query():
    spec = WorldSpec()
    data = generate_arrays(spec)
    g_rows = data["gallery"][0]
    rng = np.random.default_rng(0)
    idx = DescriptorIndex([r.id for r in g_rows], np.eye(len(g_rows)), [[r.lat, r.lon] for r in g_rows])
    config = TrainConfig()
    for split in ("train_queries", "val_queries"):
        for r in data[split][0]:
            t = mine_triplets(idx, r.id, np.ones(len(g_rows)) / np.sqrt(len(g_rows)), [r.lat, r.lon], config, rng)
            assert t is not None and len(t.negatives) == config.negatives
