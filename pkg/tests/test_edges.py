import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from maskdiff.edges import LossWeights, canny, combined_latent_loss, edge_maps, make_edge_map
from maskdiff.errors import ConfigError, ShapeError

cv2 = pytest.importorskip("cv2")

# Dilated boundary (radius 2) of a 10x10 square at [11:21, 11:21] in a 32x32
# frame, produced by OpenCV Canny followed by a 5x5 binary dilation.
RING = (
    ["." * 32] * 8
    + ["..........############.........."]
    + [".........##############........."]
    + ["........###############........."] * 3
    + ["........######....#####........."]
    + ["........#####.....#####........."] * 4
    + ["........###############........."] * 4
    + [".........##############........."]
    + ["." * 32] * 9
)


def _ring():
    return np.array([[c == "#" for c in row] for row in RING], dtype=np.uint8)


def _square():
    m = np.zeros((32, 32), dtype=np.uint8)
    m[11:21, 11:21] = 1
    return m


def _cv2_edge_map(mask, radius=2, low=0.1, high=0.3):
    m = mask.astype(np.float64)
    gx = cv2.Sobel(m, cv2.CV_64F, 1, 0, ksize=3, borderType=cv2.BORDER_REPLICATE)
    gy = cv2.Sobel(m, cv2.CV_64F, 0, 1, ksize=3, borderType=cv2.BORDER_REPLICATE)
    top = (np.abs(gx) + np.abs(gy)).max()
    if top == 0:
        return np.zeros_like(mask, dtype=np.uint8)
    e = cv2.Canny((mask * 255).astype(np.uint8), low * top * 255, high * top * 255) > 0
    k = 2 * radius + 1
    return ndimage.binary_dilation(e, structure=np.ones((k, k), bool)).astype(np.uint8)


def test_square_ring_fixture():
    out = make_edge_map(_square(), dilation_radius=2)
    assert out.dtype == np.uint8
    assert int(out.sum()) == 196
    np.testing.assert_array_equal(out, _ring())


def test_ring_fixture_agrees_with_opencv():
    np.testing.assert_array_equal(_cv2_edge_map(_square()), _ring())


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), radius=st.integers(1, 3))
def test_matches_opencv_on_random_masks(seed, radius):
    rng = np.random.default_rng(seed)
    m = np.zeros((40, 48), dtype=np.uint8)
    for _ in range(rng.integers(1, 4)):
        y, x = rng.integers(0, 36), rng.integers(0, 44)
        h, w = rng.integers(2, 20), rng.integers(2, 20)
        if rng.random() < 0.5:
            m[y:y + h, x:x + w] = 1
        else:
            yy, xx = np.mgrid[:40, :48]
            m[((yy - y) / h) ** 2 + ((xx - x) / w) ** 2 <= 1] = 1
    np.testing.assert_array_equal(make_edge_map(m, radius), _cv2_edge_map(m, radius))


@pytest.mark.parametrize("value", [0, 1])
def test_constant_mask_has_no_edges(value):
    out = make_edge_map(np.full((16, 16), value, dtype=np.uint8))
    assert out.dtype == np.uint8 and out.sum() == 0


def test_larger_radius_is_superset():
    m = _square()
    small, big = make_edge_map(m, 1), make_edge_map(m, 3)
    assert np.all(big >= small) and big.sum() > small.sum()


def test_raw_canny_is_one_pixel_line_on_step():
    m = np.zeros((12, 12))
    m[:, 6:] = 1
    e = canny(m, 0.5, 1.5)
    assert e[:, 5].all() != e[:, 6].all()
    assert e.sum() == 12


def test_transposed_mask_gives_transposed_map():
    rng = np.random.default_rng(3)
    m = np.zeros((30, 30), dtype=np.uint8)
    yy, xx = np.mgrid[:30, :30]
    m[(yy - 14) ** 2 / 64 + (xx - 15) ** 2 / 30 <= 1] = 1
    m[rng.integers(0, 30), :] = 0
    np.testing.assert_array_equal(make_edge_map(m.T), make_edge_map(m).T)


def test_edge_map_errors():
    with pytest.raises(ConfigError):
        make_edge_map(_square(), dilation_radius=0)
    with pytest.raises(ConfigError):
        make_edge_map(_square(), low=0.5, high=0.2)
    with pytest.raises(ShapeError):
        make_edge_map(np.zeros((2, 8, 8)))


def test_batched_edge_maps_match_single():
    masks = torch.zeros(2, 1, 32, 32)
    masks[0, 0, 11:21, 11:21] = 1
    out = edge_maps(masks)
    assert out.shape == masks.shape and out.dtype == masks.dtype
    np.testing.assert_array_equal(out[0, 0].numpy(), _ring())
    assert out[1].sum() == 0


def test_combined_loss_hand_example():
    py, ty = torch.zeros(1, 4, 2, 2), torch.ones(1, 4, 2, 2)
    pe, te = torch.zeros(1, 4, 2, 2), torch.full((1, 4, 2, 2), 2.0)
    total, seg, edg = combined_latent_loss(py, pe, ty, te, LossWeights(0.2))
    assert seg.item() == pytest.approx(1.0)
    assert edg.item() == pytest.approx(4.0)
    assert total.item() == pytest.approx(0.2 * 1.0 + 0.8 * 4.0)


def test_combined_loss_two_element_example():
    zero = torch.zeros(2)
    total, _, _ = combined_latent_loss(torch.ones(2), torch.full((2,), 2.0), zero, zero, LossWeights(0.5))
    assert total.item() == pytest.approx(2.5)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(0.01, 0.99), seed=st.integers(0, 1000))
def test_combined_loss_is_convex_mix(a, seed):
    g = torch.Generator().manual_seed(seed)
    xs = [torch.randn(2, 4, 3, 3, generator=g) for _ in range(4)]
    total, seg, edg = combined_latent_loss(*xs[:2], *xs[2:], LossWeights(a))
    assert total.item() == pytest.approx(a * seg.item() + (1 - a) * edg.item(), rel=1e-5)


def test_edge_weight_shrinks_as_alpha_grows():
    py, ty = torch.zeros(1, 4, 2, 2), torch.zeros(1, 4, 2, 2)
    pe, te = torch.zeros(1, 4, 2, 2), torch.ones(1, 4, 2, 2)
    totals = [combined_latent_loss(py, pe, ty, te, LossWeights(a))[0].item() for a in (0.1, 0.3, 0.5, 0.9)]
    assert totals == sorted(totals, reverse=True)


@pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1, 1.5])
def test_loss_weight_bounds(alpha):
    with pytest.raises(ConfigError):
        LossWeights(alpha)


def test_default_alpha():
    assert LossWeights().alpha == 0.2


def test_loss_shape_mismatch():
    a = torch.zeros(1, 4, 2, 2)
    with pytest.raises(ShapeError):
        combined_latent_loss(a, a, torch.zeros(1, 4, 2, 3), a, LossWeights())
