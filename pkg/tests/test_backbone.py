import numpy as np
import pytest
import torch

from clusvpr.backbone import Backbone, backbone_forward
from clusvpr.numerics import DTYPE, check_parameter_gradients


def test_default_shape():
    net = Backbone(generator=torch.Generator().manual_seed(0))
    out = backbone_forward(np.random.default_rng(0).random((64, 64, 3)), net)
    assert out.shape == (64, 4, 4)
    assert torch.all(torch.isfinite(out))


def test_zero_image_gives_zero_map():
    net = Backbone(generator=torch.Generator().manual_seed(0))
    out = backbone_forward(np.zeros((32, 48, 3)), net)
    assert out.shape == (64, 2, 3)
    assert torch.count_nonzero(out) == 0


def test_deterministic_across_constructions():
    img = np.random.default_rng(3).random((32, 32, 3))
    a = backbone_forward(img, Backbone(generator=torch.Generator().manual_seed(5)))
    b = backbone_forward(img, Backbone(generator=torch.Generator().manual_seed(5)))
    assert torch.equal(a, b)


def test_indivisible_size_rejected():
    net = Backbone()
    with pytest.raises(ValueError, match="multiple of 16"):
        backbone_forward(np.zeros((30, 32, 3)), net)


@pytest.mark.parametrize("channels,strides,size", [((4, 6), (2, 1), 8), ((3, 5, 7), (1, 2, 2), 12)])
def test_shape_law(channels, strides, size):
    net = Backbone(channels, strides, generator=torch.Generator().manual_seed(1))
    x = torch.rand(2, 3, size, size, dtype=DTYPE)
    s = int(np.prod(strides))
    assert net(x).shape == (2, channels[-1], size // s, size // s)


def test_kernel_gradients():
    g = torch.Generator().manual_seed(2)
    net = Backbone((4, 6), (2, 1), generator=g)
    with torch.no_grad():
        for conv in net.convs:
            conv.bias.normal_(0.0, 0.1, generator=g)
    x = torch.rand(2, 3, 8, 8, dtype=DTYPE, generator=g)
    target = torch.randn(2, 6, 4, 4, dtype=DTYPE, generator=g)
    reports = check_parameter_gradients(lambda: ((net(x) - target) ** 2).sum(), list(net.named_parameters()))
    assert all(r.passed for r in reports), [str(r) for r in reports]
