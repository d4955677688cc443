import numpy as np
import pytest
import torch

from echoreg.core import (DisplacementField, Image2D, LabelMask, ProbMaps,
                          bilinear_warp, normalize, one_hot, resize,
                          soft_warp_probmaps, warp_intensity, warp_mask,
                          warp_probs, warp_single)
from echoreg.errors import ConfigError, LabelError, ShapeMismatchError


def bilinear_oracle(image, flow):
    """Explicit-loop bilinear sampler with border-clamped coordinates."""
    h, w = image.shape
    out = np.zeros_like(image, dtype=np.float64)
    for i in range(h):
        for j in range(w):
            sy = min(max(i + flow[i, j, 0], 0.0), h - 1)
            sx = min(max(j + flow[i, j, 1], 0.0), w - 1)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            wy, wx = sy - y0, sx - x0
            out[i, j] = ((1 - wy) * (1 - wx) * image[y0, x0]
                         + (1 - wy) * wx * image[y0, x1]
                         + wy * (1 - wx) * image[y1, x0]
                         + wy * wx * image[y1, x1])
    return out


# ---------------------------------------------------------------------------
# type invariants
# ---------------------------------------------------------------------------

def test_image_validation():
    with pytest.raises(ShapeMismatchError):
        Image2D(np.zeros((4, 4)))
    with pytest.raises(ConfigError):
        Image2D(np.zeros((8, 8)), spacing=(0.0, 1.0))
    with pytest.raises(ConfigError):
        Image2D(np.full((8, 8), np.nan))


def test_mask_validation():
    with pytest.raises(LabelError):
        LabelMask(np.full((8, 8), 3))
    mask = LabelMask(np.ones((8, 8)))
    assert mask.labels.dtype == np.int64


def test_probmaps_validation():
    with pytest.raises(ConfigError):
        ProbMaps(np.full((2, 8, 8), 0.4))  # sums to 0.8
    ProbMaps(np.full((4, 8, 8), 0.25))


def test_field_validation():
    with pytest.raises(ShapeMismatchError):
        DisplacementField(np.zeros((8, 8)))
    with pytest.raises(ConfigError):
        DisplacementField(np.full((8, 8, 2), np.inf))


# ---------------------------------------------------------------------------
# intensity warping
# ---------------------------------------------------------------------------

def test_warp_zero_field_is_exact_identity(rng):
    img = Image2D(rng.random((8, 8)).astype(np.float32))
    out = warp_intensity(img, DisplacementField.zeros((8, 8)))
    assert np.array_equal(out.pixels, img.pixels)


def test_warp_constant_image(rng):
    img = Image2D(np.full((8, 8), 0.37, dtype=np.float32))
    field = DisplacementField(rng.normal(scale=3.0, size=(8, 8, 2)).astype(np.float32))
    out = warp_intensity(img, field)
    assert np.allclose(out.pixels, 0.37, atol=1e-6)


def test_ramp_uniform_shift_matches_index_arithmetic():
    ramp = torch.arange(16, dtype=torch.float64).reshape(4, 4)
    flow = torch.zeros(4, 4, 2, dtype=torch.float64)
    flow[..., 1] = 1.0
    out = warp_single(ramp, flow)
    expected = ramp.clone()
    expected[:, :3] = ramp[:, 1:]
    expected[:, 3] = ramp[:, 3]  # last column clamps to the border
    assert torch.equal(out, expected)


def test_warp_matches_bruteforce_oracle(rng):
    for _ in range(10):
        img = rng.random((8, 8))
        flow = rng.normal(scale=2.0, size=(8, 8, 2))
        got = warp_single(torch.as_tensor(img), torch.as_tensor(flow)).numpy()
        assert np.allclose(got, bilinear_oracle(img, flow), atol=1e-12)


def test_warp_linearity(rng):
    a = torch.as_tensor(rng.random((2, 1, 8, 8)))
    b = torch.as_tensor(rng.random((2, 1, 8, 8)))
    flow = torch.as_tensor(rng.normal(scale=1.5, size=(2, 8, 8, 2)))
    lhs = bilinear_warp(2.0 * a + 3.0 * b, flow)
    rhs = 2.0 * bilinear_warp(a, flow) + 3.0 * bilinear_warp(b, flow)
    assert torch.allclose(lhs, rhs, atol=1e-6)


def test_warp_gradient_matches_finite_differences(rng):
    # fractional offsets keep the sample coordinates away from the bilinear
    # kinks at integer positions so central differences are valid
    img = torch.as_tensor(rng.random((1, 1, 8, 8)))
    base = rng.integers(-1, 2, size=(1, 8, 8, 2)) + rng.uniform(0.25, 0.75, size=(1, 8, 8, 2))
    flow = torch.as_tensor(base, dtype=torch.float64).requires_grad_(True)
    weights = torch.as_tensor(rng.random((1, 1, 8, 8)))
    (bilinear_warp(img, flow) * weights).sum().backward()
    grad = flow.grad.clone()
    step = 1e-3
    fd = torch.zeros_like(grad)
    with torch.no_grad():
        for idx in np.ndindex(*flow.shape):
            plus = flow.detach().clone()
            plus[idx] += step
            minus = flow.detach().clone()
            minus[idx] -= step
            fd[idx] = ((bilinear_warp(img, plus) * weights).sum()
                       - (bilinear_warp(img, minus) * weights).sum()) / (2 * step)
    rel = (grad - fd).norm() / fd.norm()
    assert rel < 1e-3


def test_warp_shape_mismatch():
    img = Image2D(np.zeros((8, 8), dtype=np.float32))
    with pytest.raises(ShapeMismatchError):
        warp_intensity(img, DisplacementField.zeros((8, 10)))


# ---------------------------------------------------------------------------
# mask warping
# ---------------------------------------------------------------------------

def test_warp_mask_zero_field_identity(rng):
    labels = rng.integers(0, 3, size=(8, 8))
    mask = LabelMask(labels)
    out = warp_mask(mask, DisplacementField.zeros((8, 8)))
    assert np.array_equal(out.labels, labels)


def test_warp_mask_single_label(rng):
    mask = LabelMask(np.full((8, 8), 2))
    field = DisplacementField(rng.normal(scale=2.0, size=(8, 8, 2)).astype(np.float32))
    assert np.array_equal(warp_mask(mask, field).labels, np.full((8, 8), 2))


def test_warp_mask_integer_shift_oracle():
    labels = np.zeros((8, 8), dtype=np.int64)
    labels[3:5, 3:5] = 2
    field = DisplacementField.zeros((8, 8))
    field.u[..., 1] = -2.0  # sample two columns left => content moves right
    out = warp_mask(LabelMask(labels), field)
    expected = np.zeros_like(labels)
    for i in range(8):
        for j in range(8):
            expected[i, j] = labels[i, min(max(j - 2, 0), 7)]
    assert np.array_equal(out.labels, expected)


def test_warp_mask_value_subset(rng):
    for _ in range(10):
        labels = rng.integers(0, 2, size=(8, 8)) * 2  # only {0, 2}
        field = DisplacementField(rng.normal(scale=2.5, size=(8, 8, 2)).astype(np.float32))
        out = warp_mask(LabelMask(labels), field)
        assert set(np.unique(out.labels)) <= set(np.unique(labels))


# ---------------------------------------------------------------------------
# probability-map warping
# ---------------------------------------------------------------------------

def test_soft_warp_zero_field_identity(rng):
    probs = one_hot(LabelMask(rng.integers(0, 3, size=(8, 8))))
    out = soft_warp_probmaps(probs, DisplacementField.zeros((8, 8)))
    assert np.allclose(out.maps, probs.maps)


def test_soft_warp_uniform_stays_uniform(rng):
    probs = ProbMaps(np.full((4, 8, 8), 0.25))
    field = DisplacementField(rng.normal(scale=2.0, size=(8, 8, 2)).astype(np.float32))
    out = soft_warp_probmaps(probs, field)
    assert np.allclose(out.maps, 0.25, atol=1e-6)


def test_soft_warp_integer_shift_matches_warp_mask(rng):
    labels = rng.integers(0, 3, size=(8, 8))
    field = DisplacementField.zeros((8, 8))
    field.u[..., 0] = 1.0
    hard = warp_mask(LabelMask(labels), field)
    soft = soft_warp_probmaps(one_hot(LabelMask(labels)), field)
    assert np.array_equal(np.argmax(soft.maps, axis=0), hard.labels)


def test_warp_probs_renormalizes(rng):
    probs = torch.as_tensor(rng.dirichlet(np.ones(3), size=(8, 8)).transpose(2, 0, 1))[None]
    flow = torch.as_tensor(rng.normal(scale=1.5, size=(1, 8, 8, 2)))
    out = warp_probs(probs, flow)
    assert torch.allclose(out.sum(dim=1), torch.ones(1, 8, 8, dtype=out.dtype), atol=1e-6)


# ---------------------------------------------------------------------------
# normalize / one-hot / resize
# ---------------------------------------------------------------------------

def test_normalize_full_range(rng):
    img = Image2D(rng.integers(0, 256, size=(8, 8)).astype(np.float32))
    out = normalize(img)
    assert out.pixels.min() == 0.0 and out.pixels.max() == 1.0


def test_normalize_constant_maps_to_zero():
    out = normalize(Image2D(np.full((8, 8), 7.0)))
    assert np.array_equal(out.pixels, np.zeros((8, 8)))


def test_normalize_affine_values():
    img = np.full((8, 8), 2.0)
    img[0, 0], img[0, 1] = 4.0, 6.0
    out = normalize(Image2D(img))
    assert out.pixels[0, 0] == 0.5 and out.pixels[0, 1] == 1.0 and out.pixels[1, 1] == 0.0


def test_one_hot_background():
    probs = one_hot(LabelMask(np.zeros((8, 8), dtype=np.int64)))
    assert np.array_equal(probs.maps[0], np.ones((8, 8)))


def test_one_hot_round_trip(rng):
    labels = rng.integers(0, 3, size=(8, 8))
    probs = one_hot(LabelMask(labels))
    assert np.array_equal(np.argmax(probs.maps, axis=0), labels)


def test_one_hot_channel_sums_count_pixels(rng):
    labels = rng.integers(0, 3, size=(8, 8))
    probs = one_hot(LabelMask(labels))
    for k in range(3):
        assert probs.maps[k].sum() == np.count_nonzero(labels == k)


def test_one_hot_out_of_range():
    with pytest.raises(LabelError):
        one_hot(LabelMask(np.full((8, 8), 2)), num_classes=2)


def test_resize_same_size_identity(rng):
    img = Image2D(rng.random((16, 16)).astype(np.float32), spacing=(0.5, 0.5))
    out = resize(img, (16, 16))
    assert np.array_equal(out.pixels, img.pixels) and out.spacing == img.spacing


def test_resize_mask_preserves_value_set(rng):
    labels = rng.integers(0, 3, size=(32, 32))
    out = resize(LabelMask(labels), (17, 13))
    assert set(np.unique(out.labels)) <= {0, 1, 2}


def _keys_weight(t, a=-0.75):
    t = abs(t)
    if t <= 1:
        return (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1
    if t < 2:
        return a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a
    return 0.0


def _bicubic_oracle(img, out_h, out_w):
    h, w = img.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            sy = (i + 0.5) * h / out_h - 0.5
            sx = (j + 0.5) * w / out_w - 0.5
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            acc = 0.0
            for dy in range(-1, 3):
                for dx in range(-1, 3):
                    yy = min(max(y0 + dy, 0), h - 1)
                    xx = min(max(x0 + dx, 0), w - 1)
                    acc += img[yy, xx] * _keys_weight(sy - (y0 + dy)) * _keys_weight(sx - (x0 + dx))
            out[i, j] = acc
    return out


def test_resize_bicubic_matches_direct_evaluation():
    ramp = np.linspace(0.0, 1.0, 256).reshape(16, 16)
    down = resize(Image2D(ramp), (8, 8))
    oracle = np.clip(_bicubic_oracle(ramp, 8, 8), 0.0, 1.0)
    assert np.allclose(down.pixels, oracle, atol=1e-5)


def test_resize_round_trip_smooth_ramp():
    ramp = np.linspace(0.0, 1.0, 256).reshape(16, 16)
    img = Image2D(ramp, spacing=(1.0, 1.0))
    down = resize(img, (8, 8))
    up = resize(down, (16, 16))
    assert np.abs(up.pixels - ramp).max() < 0.02
    assert down.spacing == (2.0, 2.0) and up.spacing == (1.0, 1.0)


def test_resize_degenerate_target():
    with pytest.raises(ShapeMismatchError):
        resize(Image2D(np.zeros((16, 16))), (4, 16))
