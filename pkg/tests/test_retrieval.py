import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from clusvpr.config import preset
from clusvpr.datagen import synth_world, write_ppm
from clusvpr.indexing import build_index
from clusvpr.model import ClusVPR
from clusvpr.retrieval import (
    DescriptorIndex,
    GeoTag,
    ManifestRow,
    geo_distance,
    load_checkpoint,
    load_index,
    query_topk,
    read_manifest,
    recall_at_k,
    save_checkpoint,
    save_index,
    write_manifest,
)


def unit_rows(n, dim, rng):
    x = rng.normal(size=(n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# geo

def test_geo_identical_points():
    assert geo_distance(GeoTag(1.0, 2.0), GeoTag(1.0, 2.0)) == 0.0
    assert geo_distance(GeoTag(40.0, -80.0, "spherical"), GeoTag(40.0, -80.0, "spherical")) == 0.0


def test_geo_planar_pythagoras():
    assert geo_distance(GeoTag(0, 0), GeoTag(3, 4)) == 5.0


def test_geo_spherical_equator_degree():
    d = geo_distance(GeoTag(0, 0, "spherical"), GeoTag(0, 1, "spherical"))
    assert abs(d - 111_195) < 1.0
    assert d == pytest.approx(6_371_000 * math.pi / 180, abs=1e-6)


def test_geo_mode_mismatch_and_range():
    with pytest.raises(ValueError):
        geo_distance(GeoTag(0, 0), GeoTag(0, 0, "spherical"))
    with pytest.raises(ValueError):
        GeoTag(91.0, 0.0, "spherical")


# top-k

def test_topk_exact_match_first():
    rng = np.random.default_rng(0)
    d = unit_rows(20, 8, rng)
    idx = DescriptorIndex([f"r{i:02d}" for i in range(20)], d.astype(np.float32), np.zeros((20, 2)))
    top = query_topk(idx, d[7], 3)
    assert top[0][0] == "r07" and abs(top[0][1] - 1) < 1e-3


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 200), st.integers(0, 10_000))
def test_topk_matches_full_sort_oracle(n, seed):
    rng = np.random.default_rng(seed)
    d = unit_rows(n, 4, rng)
    d[rng.integers(0, n, size=n // 3)] = d[0]  # force exact ties
    ids = [f"id{v:05d}" for v in rng.permutation(10 * n)[:n]]
    q = unit_rows(1, 4, rng)[0]
    idx = DescriptorIndex(ids, d, np.zeros((n, 2)))
    sims = d @ q
    oracle = sorted(range(n), key=lambda i: (-sims[i], ids[i]))
    k = min(n, 10)
    assert [r for r, _ in query_topk(idx, q, k)] == [ids[i] for i in oracle[:k]]
    assert query_topk(idx, q, 1)[0] == query_topk(idx, q, k)[0]


def test_topk_warns_when_k_too_large():
    idx = DescriptorIndex(["a", "b"], np.eye(2), np.zeros((2, 2)))
    with pytest.warns(UserWarning):
        assert len(query_topk(idx, np.array([1.0, 0.0]), 5)) == 2
    with pytest.raises(ValueError):
        query_topk(idx, np.array([1.0, 0.0]), 0)


# recall

def test_recall_full_k_is_one():
    rng = np.random.default_rng(1)
    idx = DescriptorIndex(["a", "b", "c"], unit_rows(3, 4, rng), [[0, 0], [100, 0], [200, 0]])
    rep = recall_at_k(idx, unit_rows(3, 4, rng), [[1, 0], [101, 0], [199, 0]], ks=(3,))
    assert rep.recalls[3] == 1.0


def test_recall_two_record_instance():
    idx = DescriptorIndex(["far", "near"], np.array([[1.0, 0.0], [0.6, 0.8]]), [[30.0, 0.0], [5.0, 0.0]])
    rep = recall_at_k(idx, np.array([[1.0, 0.0]]), [[0.0, 0.0]], ks=(1, 2))
    assert rep.recalls == {1: 0.0, 2: 1.0}


def test_recall_unreachable_counts_as_failure():
    idx = DescriptorIndex(["a"], np.array([[1.0, 0.0]]), [[0.0, 0.0]])
    rep = recall_at_k(idx, np.array([[1.0, 0.0], [1.0, 0.0]]), [[0, 0], [500, 0]], ks=(1,), query_ids=["q0", "q1"])
    assert rep.recalls[1] == 0.5 and rep.unreachable == ["q1"]
    assert rep.lines()[0] == "k,recall,queries,threshold"


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_recall_monotone_in_k_and_threshold(seed):
    rng = np.random.default_rng(seed)
    n, m = 30, 12
    idx = DescriptorIndex([f"g{i}" for i in range(n)], unit_rows(n, 5, rng), rng.uniform(0, 200, (n, 2)))
    qd, qg = unit_rows(m, 5, rng), rng.uniform(0, 200, (m, 2))
    ks = (1, 2, 5, 10, 30)
    lo = recall_at_k(idx, qd, qg, ks=ks, threshold=15.0).recalls
    hi = recall_at_k(idx, qd, qg, ks=ks, threshold=40.0).recalls
    assert all(lo[a] <= lo[b] for a, b in zip(ks, ks[1:]))
    assert all(lo[k] <= hi[k] for k in ks)
    assert all(0 <= v <= 1 for v in hi.values())


# files

def test_index_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    idx = DescriptorIndex(["b", "a", "ü-c"], unit_rows(3, 6, rng).astype(np.float32), rng.normal(size=(3, 2)) * 1e3)
    save_index(idx, tmp_path / "i.bin")
    back = load_index(tmp_path / "i.bin")
    ref = idx.sorted()
    assert back.ids == ref.ids
    assert back.descriptors.tobytes() == ref.descriptors.astype("<f4").tobytes()
    assert back.geo.tobytes() == ref.geo.tobytes()


def test_empty_index_file(tmp_path):
    save_index(DescriptorIndex.empty(4), tmp_path / "e.bin")
    back = load_index(tmp_path / "e.bin")
    assert len(back) == 0 and back.dim == 4


def test_index_file_layout(tmp_path):
    idx = DescriptorIndex(["x"], np.array([[1.0, 0.0]], np.float32), [[1.5, -2.0]])
    save_index(idx, tmp_path / "i.bin")
    raw = (tmp_path / "i.bin").read_bytes()
    assert raw[:8] == b"CVPRIDX1"
    assert raw[8:21] == bytes([1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 0])
    assert len(raw) == 21 + 2 + 1 + 8 + 16


def test_checkpoint_roundtrip(tmp_path):
    sections = {"a": np.arange(6.0).reshape(2, 3), "scalar": np.array(2.5), "b": np.zeros((0, 4))}
    save_checkpoint(sections, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert list(back) == ["a", "scalar", "b"]
    for k in sections:
        assert back[k].shape == sections[k].shape and np.array_equal(back[k], sections[k])


def test_manifest_roundtrip(tmp_path):
    rows = [ManifestRow("p0", "images/p0.ppm", 0.1, 1e-7, "planar"), ManifestRow("p,1", "x.ppm", 3.0, 4.0)]
    write_manifest(rows, tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "id,path,lat,lon,mode"
    assert read_manifest(tmp_path / "m.csv") == rows


def test_manifest_bad_header(tmp_path):
    (tmp_path / "m.csv").write_text("id,lat\n")
    with pytest.raises(ValueError):
        read_manifest(tmp_path / "m.csv")


# build_index

@pytest.fixture(scope="module")
def tiny_world(tmp_path_factory):
    root = tmp_path_factory.mktemp("world")
    cfg = preset("tiny")
    rows = synth_world(cfg.world, root)
    return cfg, root, rows


def test_build_index_deterministic_and_order_free(tiny_world, tmp_path):
    cfg, root, rows = tiny_world
    model = ClusVPR(cfg.model, seed=3)
    gallery = rows["gallery"]
    a, rep = build_index(model, None, gallery, root)
    b, _ = build_index(model, None, list(reversed(gallery)), root)
    assert rep.records == len(gallery) and rep.skipped == []
    save_index(a, tmp_path / "a.bin")
    save_index(b, tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_build_index_empty_and_duplicates(tiny_world, tmp_path):
    cfg, root, rows = tiny_world
    model = ClusVPR(cfg.model, seed=3)
    empty, _ = build_index(model, None, [], root)
    save_index(empty, tmp_path / "e.bin")
    assert len(load_index(tmp_path / "e.bin")) == 0
    r = rows["gallery"][0]
    dup = [r, ManifestRow("zz_copy", r.path, r.lat, r.lon, r.mode)]
    idx, _ = build_index(model, None, dup, root)
    assert np.array_equal(idx.descriptors[0], idx.descriptors[1])


def test_build_index_skips_unreadable(tiny_world):
    cfg, root, rows = tiny_world
    model = ClusVPR(cfg.model, seed=3)
    bad = ManifestRow("broken", "images/missing.ppm", 0.0, 0.0)
    idx, rep = build_index(model, None, rows["gallery"][:2] + [bad], root)
    assert rep.skipped == ["broken"] and len(idx) == 2
