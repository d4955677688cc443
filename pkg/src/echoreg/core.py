"""Raster types and geometric primitives: warping, resampling, normalization.

Conventions used throughout the package:
  * arrays are indexed (row, col) = (y, x); spacing is (mm/px in y, mm/px in x)
  * a displacement field u has shape (H, W, 2) with components (dy, dx) in
    pixel units, and warps a moving raster as  out(x) = moving(x + u(x))
  * labels: 0 background, 1 myocardium (MYO), 2 left ventricle (LV)
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, LabelError, ShapeMismatchError

BACKGROUND, MYO, LV = 0, 1, 2
VALID_LABELS = (BACKGROUND, MYO, LV)
MIN_SIDE = 8


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Image2D:
    """Single-channel intensity raster with physical pixel spacing."""

    pixels: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64 if
                                 np.asarray(self.pixels).dtype == np.float64 else np.float32)
        if self.pixels.ndim != 2:
            raise ShapeMismatchError(f"image must be 2D, got shape {self.pixels.shape}")
        h, w = self.pixels.shape
        if h < MIN_SIDE or w < MIN_SIDE:
            raise ShapeMismatchError(f"image must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}")
        self.spacing = (float(self.spacing[0]), float(self.spacing[1]))
        if self.spacing[0] <= 0 or self.spacing[1] <= 0:
            raise ConfigError(f"spacing must be positive, got {self.spacing}")
        if not np.all(np.isfinite(self.pixels)):
            raise ConfigError("image contains non-finite values")

    @property
    def shape(self):
        return self.pixels.shape


@dataclass(eq=False)
class LabelMask:
    """Integer raster with labels {0 background, 1 MYO, 2 LV}."""

    labels: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if not np.issubdtype(self.labels.dtype, np.integer):
            rounded = np.rint(self.labels)
            if not np.allclose(self.labels, rounded):
                raise LabelError("mask values are not integers")
            self.labels = rounded.astype(np.int64)
        else:
            self.labels = self.labels.astype(np.int64)
        if self.labels.ndim != 2:
            raise ShapeMismatchError(f"mask must be 2D, got shape {self.labels.shape}")
        values = set(np.unique(self.labels).tolist())
        if not values <= set(VALID_LABELS):
            raise LabelError(f"mask labels {sorted(values)} outside {VALID_LABELS}")
        self.spacing = (float(self.spacing[0]), float(self.spacing[1]))
        if self.spacing[0] <= 0 or self.spacing[1] <= 0:
            raise ConfigError(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self):
        return self.labels.shape


@dataclass(eq=False)
class DisplacementField:
    """Per-pixel 2-vector field u with components (dy, dx) in pixels."""

    u: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64 if
                            np.asarray(self.u).dtype == np.float64 else np.float32)
        if self.u.ndim != 3 or self.u.shape[-1] != 2:
            raise ShapeMismatchError(f"field must have shape (H, W, 2), got {self.u.shape}")
        if not np.all(np.isfinite(self.u)):
            raise ConfigError("field contains non-finite values")

    @property
    def shape(self):
        return self.u.shape[:2]

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros((*shape, 2), dtype=np.float32))


@dataclass(eq=False)
class ProbMaps:
    """K channels of per-class probabilities; per pixel the channels sum to 1."""

    maps: np.ndarray  # (K, H, W)

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float64 if
                               np.asarray(self.maps).dtype == np.float64 else np.float32)
        if self.maps.ndim != 3:
            raise ShapeMismatchError(f"probmaps must have shape (K, H, W), got {self.maps.shape}")
        if self.maps.min() < -1e-6 or self.maps.max() > 1 + 1e-6:
            raise ConfigError("probmap values outside [0, 1]")
        sums = self.maps.sum(axis=0)
        if np.abs(sums - 1.0).max() > 1e-5:
            raise ConfigError("probmap channels do not sum to 1 per pixel")

    @property
    def num_classes(self):
        return self.maps.shape[0]

    @property
    def shape(self):
        return self.maps.shape[1:]

    def foreground(self):
        """Foreground (MYO, LV) channels as a plain (2, H, W) array."""
        return self.maps[[MYO, LV]]


# ---------------------------------------------------------------------------
# differentiable tensor kernels (torch)
# ---------------------------------------------------------------------------

def bilinear_warp(image: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Warp image(s) by a pixel-unit flow with border-clamped bilinear sampling.

    image: (N, C, H, W); flow: (N, H, W, 2) as (dy, dx). The output pixel at x
    samples the image at x + u(x); sample coordinates are clamped to the image
    rectangle. Differentiable with respect to both arguments, and exactly the
    identity for a zero flow.
    """
    if image.shape[0] != flow.shape[0] or image.shape[-2:] != flow.shape[1:3]:
        raise ShapeMismatchError(
            f"image {tuple(image.shape)} and flow {tuple(flow.shape)} do not match")
    n, c, h, w = image.shape
    ys = torch.arange(h, dtype=flow.dtype, device=flow.device)
    xs = torch.arange(w, dtype=flow.dtype, device=flow.device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    sy = (gy + flow[..., 0]).clamp(0, h - 1)
    sx = (gx + flow[..., 1]).clamp(0, w - 1)
    y0f, x0f = sy.floor(), sx.floor()
    wy = (sy - y0f)[:, None]
    wx = (sx - x0f)[:, None]
    y0 = y0f.long()
    x0 = x0f.long()
    y1 = (y0 + 1).clamp(max=h - 1)
    x1 = (x0 + 1).clamp(max=w - 1)
    flat = image.reshape(n, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(n, 1, h * w).expand(n, c, h * w)
        return flat.gather(2, idx).reshape(n, c, h, w)

    return ((1 - wy) * (1 - wx) * gather(y0, x0) + (1 - wy) * wx * gather(y0, x1)
            + wy * (1 - wx) * gather(y1, x0) + wy * wx * gather(y1, x1))


def warp_single(image: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """bilinear_warp for a single (H, W) image and (H, W, 2) flow."""
    out = bilinear_warp(image[None, None], flow[None])
    return out[0, 0]


def _as_tensor(array, dtype=None):
    t = torch.as_tensor(array)
    if dtype is not None:
        t = t.to(dtype)
    elif not torch.is_floating_point(t):
        t = t.float()
    return t


# ---------------------------------------------------------------------------
# raster operations
# ---------------------------------------------------------------------------

def _check_same_shape(a_shape, b_shape, what):
    if tuple(a_shape) != tuple(b_shape):
        raise ShapeMismatchError(f"{what}: {tuple(a_shape)} vs {tuple(b_shape)}")


def warp_intensity(image: Image2D, flow: DisplacementField) -> Image2D:
    """Resample an intensity image at x + u(x) (bilinear, border clamp)."""
    _check_same_shape(image.shape, flow.shape, "image/field shape mismatch")
    with torch.no_grad():
        t = _as_tensor(image.pixels)
        out = warp_single(t, _as_tensor(flow.u, t.dtype))
    return Image2D(out.numpy().astype(image.pixels.dtype), image.spacing)


def warp_mask(mask: LabelMask, flow: DisplacementField,
              num_classes: int = len(VALID_LABELS)) -> LabelMask:
    """Warp a label mask via its one-hot channels and per-pixel argmax.

    Ties in the argmax resolve to the lowest label index, so the result is
    deterministic and the output value set is a subset of the input's.
    """
    _check_same_shape(mask.shape, flow.shape, "mask/field shape mismatch")
    probs = one_hot(mask, num_classes)
    with torch.no_grad():
        t = _as_tensor(probs.maps)
        warped = bilinear_warp(t[None], _as_tensor(flow.u, t.dtype)[None])[0]
    labels = np.argmax(warped.numpy(), axis=0)  # np.argmax takes the first max
    return LabelMask(labels, mask.spacing)


def warp_probs(probs: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Differentiable warp of (N, K, H, W) probability maps, renormalized per pixel."""
    warped = bilinear_warp(probs, flow)
    return warped / warped.sum(dim=1, keepdim=True).clamp_min(1e-8)


def soft_warp_probmaps(probs: ProbMaps, flow: DisplacementField) -> ProbMaps:
    """warp_probs on the numpy ProbMaps type."""
    _check_same_shape(probs.shape, flow.shape, "probmaps/field shape mismatch")
    with torch.no_grad():
        t = _as_tensor(probs.maps)
        out = warp_probs(t[None], _as_tensor(flow.u, t.dtype)[None])[0]
    return ProbMaps(out.numpy())


def normalize(image: Image2D) -> Image2D:
    """Affine rescale to [0, 1]; a constant image maps to all zeros."""
    lo = float(image.pixels.min())
    hi = float(image.pixels.max())
    if hi == lo:
        return Image2D(np.zeros_like(image.pixels), image.spacing)
    return Image2D((image.pixels - lo) / (hi - lo), image.spacing)


def one_hot(mask: LabelMask, num_classes: int = len(VALID_LABELS)) -> ProbMaps:
    """Exact indicator channels for each label."""
    if mask.labels.max(initial=0) >= num_classes:
        raise LabelError(
            f"label {int(mask.labels.max())} out of range for {num_classes} classes")
    maps = np.stack([(mask.labels == k).astype(np.float32) for k in range(num_classes)])
    return ProbMaps(maps)


def _rescaled_spacing(spacing, old_shape, new_shape):
    return (spacing[0] * old_shape[0] / new_shape[0],
            spacing[1] * old_shape[1] / new_shape[1])


def _check_target(target):
    th, tw = int(target[0]), int(target[1])
    if th < MIN_SIDE or tw < MIN_SIDE:
        raise ShapeMismatchError(f"target size {target} below minimum {MIN_SIDE}")
    return th, tw


def resize(obj, target):
    """Resize an Image2D (bicubic, clamped to [0, 1]) or LabelMask (nearest).

    Pixel spacing is rescaled so the physical extent is preserved.
    """
    th, tw = _check_target(target)
    if isinstance(obj, Image2D):
        if (th, tw) == obj.shape:
            return Image2D(obj.pixels.copy(), obj.spacing)
        with torch.no_grad():
            t = _as_tensor(obj.pixels)[None, None]
            out = F.interpolate(t, size=(th, tw), mode="bicubic", align_corners=False)
        pixels = out[0, 0].clamp(0.0, 1.0).numpy()
        return Image2D(pixels, _rescaled_spacing(obj.spacing, obj.shape, (th, tw)))
    if isinstance(obj, LabelMask):
        if (th, tw) == obj.shape:
            return LabelMask(obj.labels.copy(), obj.spacing)
        h, w = obj.shape
        rows = np.minimum(((np.arange(th) + 0.5) * h / th).astype(np.int64), h - 1)
        cols = np.minimum(((np.arange(tw) + 0.5) * w / tw).astype(np.int64), w - 1)
        labels = obj.labels[rows][:, cols]
        return LabelMask(labels, _rescaled_spacing(obj.spacing, obj.shape, (th, tw)))
    raise TypeError(f"resize expects Image2D or LabelMask, got {type(obj).__name__}")
