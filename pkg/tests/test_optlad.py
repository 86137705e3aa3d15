import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from clusvpr.numerics import DTYPE, check_parameter_gradients
from clusvpr.optlad import (
    OptLAD,
    format_param_report,
    group_weight,
    normalize_descriptor,
    param_count_report,
    pca_apply,
    pca_fit,
    pca_transform,
    soft_assign,
)

from conftest import randn


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def brute_netvlad(x, w, b, c):
    """Loop-over-(i, k) NetVLAD with intra- then global L2 normalisation."""
    n, dim = x.shape
    k_count = c.shape[0]
    v = np.zeros((dim, k_count))
    for i in range(n):
        logits = [float(w[k] @ x[i] + b[k]) for k in range(k_count)]
        top = max(logits)
        e = [math.exp(l - top) for l in logits]
        for k in range(k_count):
            a = e[k] / sum(e)
            for j in range(dim):
                v[j, k] += a * (x[i, j] - c[k, j])
    for k in range(k_count):
        nrm = math.sqrt(sum(v[j, k] ** 2 for j in range(dim)))
        if nrm > 0:
            v[:, k] /= nrm
    flat = np.concatenate([v[:, k] for k in range(k_count)])
    return flat / np.linalg.norm(flat)


# expand

def test_expand_identity_kernel():
    lad = OptLAD(3, clusters=2, expansion=1, groups=1)
    with torch.no_grad():
        lad.expand_conv.weight.copy_(torch.eye(3, dtype=DTYPE).view(3, 3, 1, 1))
    fmap = randn(1, 3, 2, 2)
    assert torch.equal(lad.expand(fmap)[0], fmap[0].flatten(1).T)


def test_expand_shape_and_zero_kernel():
    lad = OptLAD(4, clusters=2, expansion=2, groups=2)
    assert lad.expand(randn(1, 4, 3, 3)).shape == (1, 9, 8)
    with torch.no_grad():
        lad.expand_conv.weight.zero_()
    assert torch.count_nonzero(lad.expand(randn(1, 4, 3, 3))) == 0


def test_expand_channel_mismatch():
    with pytest.raises(ValueError):
        OptLAD(4, clusters=2, groups=2).expand(randn(1, 3, 2, 2))


# soft assignment

def test_soft_assign_uniform():
    np.testing.assert_allclose(soft_assign(np.ones(3), np.zeros((4, 3)), np.zeros(4)), [0.25] * 4, atol=1e-15)


def test_soft_assign_dominant_bias():
    a = soft_assign(np.zeros(3), np.zeros((4, 3)), np.array([10.0, 0, 0, 0]))
    assert a[0] > 0.999


def test_module_assignment_on_simplex():
    lad = OptLAD(4, clusters=5, groups=2, generator=torch.Generator().manual_seed(0))
    alpha = lad.soft_assign(lad.grouped(lad.expand(randn(2, 4, 3, 3))))
    assert torch.all(alpha >= 0)
    assert torch.allclose(alpha.sum(-1), torch.ones(alpha.shape[:-1], dtype=DTYPE), atol=1e-14)


def test_module_matches_numpy_soft_assign():
    lad = OptLAD(4, clusters=3, groups=2, generator=torch.Generator().manual_seed(1))
    x = lad.grouped(lad.expand(randn(1, 4, 2, 2)))
    alpha = lad.soft_assign(x)
    for g in range(2):
        ref = soft_assign(x[0, 1, g].detach().numpy(), lad.assign_weight[g].detach().numpy(), lad.assign_bias[g].detach().numpy())
        np.testing.assert_allclose(alpha[0, 1, g].detach().numpy(), ref, atol=1e-14)


# group weight

@pytest.mark.parametrize("p", [0.5, 1.0, 3.0, 7.0])
def test_group_weight_constant(p):
    assert group_weight(np.full((5, 4), 0.7), p) == pytest.approx(sigmoid(0.7), abs=1e-12)


def test_group_weight_p_one_is_mean():
    x = np.random.default_rng(0).random((6, 4))
    assert group_weight(x, 1.0) == pytest.approx(sigmoid(x.mean()), abs=1e-12)


def test_group_weight_rejects_nonpositive_p():
    with pytest.raises(ValueError):
        group_weight(np.ones((2, 2)), 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.2, 8.0))
def test_group_weight_in_unit_interval(seed, p):
    x = np.random.default_rng(seed).normal(size=(4, 3))
    assert 0.0 < group_weight(x, p) < 1.0


def test_module_group_weights_match_numpy():
    lad = OptLAD(4, clusters=3, groups=2, generator=torch.Generator().manual_seed(2))
    x = lad.grouped(lad.expand(randn(1, 4, 3, 3)))
    beta = lad.group_weights(x)[0]
    for g in range(2):
        assert beta[g].item() == pytest.approx(group_weight(x[0, :, g].detach().numpy(), 3.0), abs=1e-13)


# VLAD aggregation

def test_vlad_single_descriptor_at_centre():
    lad = OptLAD(2, clusters=1, expansion=1, groups=1)
    x = randn(1, 1, 2)
    with torch.no_grad():
        lad.centers.copy_(x.view(1, 1, 2))
    assert torch.count_nonzero(lad.aggregate(x)) == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_reduction_to_netvlad(seed):
    rng = np.random.default_rng(seed)
    dim, k = 5, 3
    lad = OptLAD(dim, clusters=k, expansion=1, groups=1)
    c, w, b = rng.normal(size=(k, dim)), rng.normal(size=(k, dim)), rng.normal(size=k)
    with torch.no_grad():
        lad.centers.copy_(torch.as_tensor(c[None]))
        lad.assign_weight.copy_(torch.as_tensor(w[None]))
        lad.assign_bias.copy_(torch.as_tensor(b[None]))
    x = rng.normal(size=(8, dim))
    v = lad.aggregate(torch.as_tensor(x)[None], group_weights=torch.ones(1, 1, dtype=DTYPE))
    out = normalize_descriptor(v[0]).detach().numpy()
    np.testing.assert_allclose(out, brute_netvlad(x, w, b, c), atol=1e-10)


@pytest.mark.parametrize("c,lam,g,k", [(4, 2, 2, 3), (6, 1, 3, 5), (8, 2, 8, 4)])
def test_descriptor_dimension(c, lam, g, k):
    lad = OptLAD(c, clusters=k, expansion=lam, groups=g)
    assert lad(randn(2, c, 3, 3)).shape == (2, lam * c * k // g)
    assert lad.out_dim == lam * c * k // g


def test_published_descriptor_dimension():
    assert param_count_report()["optlad"]["descriptor_dim"] == 16384


# normalisation

def test_normalize_single_column():
    v = np.zeros((3, 2))
    v[:, 1] = [3.0, 0.0, 4.0]
    np.testing.assert_allclose(normalize_descriptor(v), [0, 0, 0, 0.6, 0, 0.8], atol=1e-15)


def test_normalize_rejects_zero_and_nan():
    with pytest.raises(ValueError):
        normalize_descriptor(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        normalize_descriptor(np.array([[np.nan, 1.0]]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_normalize_unit_and_scale_invariant(seed, scale):
    v = np.random.default_rng(seed).normal(size=(4, 3))
    out = normalize_descriptor(v)
    assert abs(np.linalg.norm(out) - 1.0) < 1e-12
    np.testing.assert_allclose(normalize_descriptor(scale * v), out, atol=1e-12)


# gradients

def test_optlad_parameter_gradients():
    g = torch.Generator().manual_seed(3)
    lad = OptLAD(4, clusters=3, expansion=2, groups=2, sharpness=1.0, generator=g)
    fmap = randn(2, 4, 3, 3, seed=4)
    target = randn(2, lad.out_dim, seed=5)
    reports = check_parameter_gradients(lambda: (lad(fmap) * target).sum(), list(lad.named_parameters()), max_coords=12)
    names = {r.parameter for r in reports}
    assert {"centers", "assign_weight", "assign_bias", "gem_p"} <= names
    assert all(r.passed for r in reports), [str(r) for r in reports]


def test_kmeans_init_is_deterministic():
    fmaps = randn(4, 4, 4, 4, seed=6)
    a = OptLAD(4, clusters=3, groups=2, generator=torch.Generator().manual_seed(0))
    b = OptLAD(4, clusters=3, groups=2, generator=torch.Generator().manual_seed(0))
    a.init_from_descriptors(fmaps, seed=9)
    b.init_from_descriptors(fmaps, seed=9)
    assert torch.equal(a.centers, b.centers) and torch.equal(a.assign_bias, b.assign_bias)


# PCA

def test_pca_white_data_full_dim():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4000, 4))
    x = (x - x.mean(0)) @ np.linalg.inv(np.linalg.cholesky(np.cov(x.T))).T
    params = pca_fit(x, 4)
    out = pca_apply(x[:5], params)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)
    unit = x[:5] / np.linalg.norm(x[:5], axis=1, keepdims=True)
    # white input: the transform is an orthogonal map, so inner products survive
    np.testing.assert_allclose(out @ out.T, unit @ unit.T, atol=1e-10)


def test_pca_whitens_fit_set():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(600, 12)) @ rng.normal(size=(12, 12)) + 3.0
    params = pca_fit(x, 6)
    y = pca_transform(x, params, normalize=False)
    assert np.max(np.abs(np.cov(y.T) - np.eye(6))) < 0.05


def test_pca_rank_deficient_warns():
    x = np.random.default_rng(2).normal(size=(5, 10))
    with pytest.warns(RuntimeWarning):
        params = pca_fit(x, 8)
    assert np.all(np.isfinite(params.projection))


def test_pca_rejects_wrong_dim():
    params = pca_fit(np.random.default_rng(3).normal(size=(50, 4)), 2)
    with pytest.raises(ValueError):
        pca_apply(np.ones(5), params)


# parameter accounting

def test_param_report_numbers():
    r = param_count_report()
    assert r["netvlad_reference"]["descriptor_dim"] == 131072
    assert r["netvlad_reference"]["pca"]["projection"] == 536_870_912
    assert round(r["netvlad_reference"]["pca"]["projection"] / 1e6) == 537
    assert r["optlad"]["pca"]["with_mean"] == 16384 * 4096 + 16384
    assert round(r["optlad"]["pca"]["with_mean"] / 1e6, 1) == 67.1
    assert r["pca_ratio"] == 4.0  # = G / lambda
    text = format_param_report(r)
    assert "536870912" in text and "pca_reduction_ratio,4" in text
