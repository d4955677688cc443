"""Classical pyramidal iterative Lucas-Kanade flow and the DDF1 field format.

The DDF1 binary layout (shared with the CLI's register command):
    magic "DDF1" | u32 H | u32 W | H*W*2 float32 (dy, dx), row-major,
all little-endian.
"""

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import DisplacementField, Image2D
from .errors import ConfigError, FieldFormatError, ShapeMismatchError

DDF_MAGIC = b"DDF1"
_HEADER = struct.Struct("<4sII")


@dataclass
class PyramidConfig:
    levels: int = 3
    iterations: int = 8
    window_radius: int = 7
    downscale: float = 2.0
    damping: float = 1e-4

    def __post_init__(self):
        if self.levels < 1 or self.iterations < 1 or self.window_radius < 1:
            raise ConfigError("levels, iterations and window radius must be >= 1")
        if self.downscale <= 1.0:
            raise ConfigError("downscale factor must exceed 1")


def _resample_bilinear(img, out_shape):
    h, w = img.shape
    oh, ow = out_shape
    ys = (np.arange(oh) + 0.5) * h / oh - 0.5
    xs = (np.arange(ow) + 0.5) * w / ow - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(img, [gy, gx], order=1, mode="nearest")


def _window_sum(img, size):
    return ndimage.uniform_filter(img, size=size, mode="constant", cval=0.0) * (size * size)


def lucas_kanade_step(fixed, moving, flow_y, flow_x, window_radius, damping):
    """One damped least-squares update of the flow at a single pyramid level.

    Warps the moving image by the current flow (bilinear, border clamp),
    accumulates windowed structure-tensor sums, and solves the regularized
    2x2 normal equations per pixel.
    """
    h, w = fixed.shape
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    warped = ndimage.map_coordinates(moving, [gy + flow_y, gx + flow_x],
                                     order=1, mode="nearest")
    iy, ix = np.gradient(warped)
    it = warped - fixed
    size = 2 * window_radius + 1
    sxx = _window_sum(ix * ix, size) + damping
    syy = _window_sum(iy * iy, size) + damping
    sxy = _window_sum(ix * iy, size)
    sxt = _window_sum(ix * it, size)
    syt = _window_sum(iy * it, size)
    det = sxx * syy - sxy * sxy
    dx = (-syy * sxt + sxy * syt) / det
    dy = (sxy * sxt - sxx * syt) / det
    return flow_y + dy, flow_x + dx


def lucas_kanade_flow(fixed: Image2D, moving: Image2D,
                      config: PyramidConfig | None = None) -> DisplacementField:
    """Coarse-to-fine iterative Lucas-Kanade flow from moving to fixed.

    Pyramid levels whose images would be smaller than the solver window are
    dropped; the base image itself must accommodate the window.
    """
    cfg = config or PyramidConfig()
    if fixed.shape != moving.shape:
        raise ShapeMismatchError("fixed and moving image shapes differ")
    h, w = fixed.shape
    window = 2 * cfg.window_radius + 1
    if min(h, w) < window:
        raise ShapeMismatchError(f"image {h}x{w} smaller than solver window {window}")

    shapes = [(h, w)]
    for _ in range(1, cfg.levels):
        nh = int(round(shapes[-1][0] / cfg.downscale))
        nw = int(round(shapes[-1][1] / cfg.downscale))
        if min(nh, nw) < window:
            break
        shapes.append((nh, nw))

    f0 = np.asarray(fixed.pixels, dtype=np.float64)
    m0 = np.asarray(moving.pixels, dtype=np.float64)
    pyr_f, pyr_m = [f0], [m0]
    for shape in shapes[1:]:
        smooth_f = ndimage.gaussian_filter(pyr_f[-1], sigma=cfg.downscale / 2.0, mode="nearest")
        smooth_m = ndimage.gaussian_filter(pyr_m[-1], sigma=cfg.downscale / 2.0, mode="nearest")
        pyr_f.append(_resample_bilinear(smooth_f, shape))
        pyr_m.append(_resample_bilinear(smooth_m, shape))

    flow_y = np.zeros(shapes[-1], dtype=np.float64)
    flow_x = np.zeros(shapes[-1], dtype=np.float64)
    for level in range(len(shapes) - 1, -1, -1):
        if level < len(shapes) - 1:  # carry the coarser estimate up
            prev = shapes[level + 1]
            cur = shapes[level]
            flow_y = _resample_bilinear(flow_y, cur) * (cur[0] / prev[0])
            flow_x = _resample_bilinear(flow_x, cur) * (cur[1] / prev[1])
        for _ in range(cfg.iterations):
            flow_y, flow_x = lucas_kanade_step(
                pyr_f[level], pyr_m[level], flow_y, flow_x,
                cfg.window_radius, cfg.damping)
    return DisplacementField(np.stack([flow_y, flow_x], axis=-1))


# ---------------------------------------------------------------------------
# DDF1 field files
# ---------------------------------------------------------------------------

def export_field(path, field: DisplacementField):
    """Write a displacement field in the DDF1 binary layout."""
    h, w = field.shape
    data = np.ascontiguousarray(field.u, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DDF_MAGIC, h, w))
        fh.write(data.tobytes())


def import_external_field(path) -> DisplacementField:
    """Read and validate a DDF1 field file (any external method's output)."""
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise FieldFormatError(f"{path}: truncated header")
        magic, h, w = _HEADER.unpack(header)
        if magic != DDF_MAGIC:
            raise FieldFormatError(f"{path}: bad magic {magic!r}, expected {DDF_MAGIC!r}")
        payload = fh.read()
    expected = h * w * 2 * 4
    if len(payload) != expected:
        raise FieldFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected} for {h}x{w}")
    u = np.frombuffer(payload, dtype="<f4").reshape(h, w, 2)
    if not np.all(np.isfinite(u)):
        raise FieldFormatError(f"{path}: field contains non-finite values")
    return DisplacementField(u.copy())
