"""Synthetic cardiac phantoms with analytic ground truth, and CAMUS-style I/O.

Phantom construction: an elliptical LV blood pool (label 2) inside an annular
myocardium (label 1) on a speckled background. Frame t contracts the anatomy
radially about the center by a factor k(t) = 1 - a*sin^2(pi*t / T); the
displacement is a radial map rho -> rho * (1 + (k - 1) * g(rho)) whose decay
profile g is 1 over the tissue, falls to 0 with a C2 smoothstep outside it,
and is monotone in rho, so the deformation never folds. The exact flow from
frame t back to frame 0 is stored per frame.
"""

import json
import math
import re
from dataclasses import asdict, dataclass, replace
from pathlib import Path
import random

import numpy as np
from scipy import ndimage

from .core import DisplacementField, Image2D, LabelMask, normalize
from .errors import ConfigError, DataError, LabelError

TISSUE_LEVELS = {0: 0.25, 1: 0.70, 2: 0.12}  # background, MYO, LV
PLATEAU_MARGIN = 0.2   # normalized-radius margin past the outer wall where g == 1
DECAY_WIDTH = 0.8      # normalized-radius width of the smoothstep falloff

# CAMUS ground truth uses 1=LV, 2=MYO, 3=left atrium; we keep {0 bg, 1 MYO,
# 2 LV} and fold the atrium into background.
CAMUS_LABEL_MAP = {0: 0, 1: 2, 2: 1, 3: 0}

_MET_TYPES = {
    "MET_UCHAR": np.uint8, "MET_CHAR": np.int8,
    "MET_USHORT": np.uint16, "MET_SHORT": np.int16,
    "MET_UINT": np.uint32, "MET_INT": np.int32,
    "MET_FLOAT": np.float32, "MET_DOUBLE": np.float64,
}
_MET_NAMES = {np.dtype(v): k for k, v in _MET_TYPES.items()}


@dataclass
class PhantomParams:
    size: int = 128
    lv_radius: float = 22.0        # ED LV semi-axis along y, in px
    wall_thickness: float = 8.0    # MYO wall along y, in px
    amplitude: float = 0.3         # peak radial contraction, in [0, 1)
    frames: int = 8
    speckle: float = 0.25
    spacing_mm: float = 0.4
    ellipticity: float = 0.9       # x semi-axis = ellipticity * lv_radius
    seed: int = 0

    def __post_init__(self):
        if self.wall_thickness < 2:
            raise ConfigError("wall thickness must be at least 2 px")
        if not 0.0 <= self.amplitude < 1.0:
            raise ConfigError("contraction amplitude must lie in [0, 1)")
        if self.frames < 2:
            raise ConfigError("need at least 2 frames")
        if self.size < 16:
            raise ConfigError("phantom image too small")
        if self.support_radius_px() + 1.0 > self.size / 2.0:
            raise ConfigError(
                f"phantom geometry (support {self.support_radius_px():.1f} px) "
                f"exceeds image bounds for size {self.size}")

    def support_radius_px(self) -> float:
        _, _, ry, rx, _, _, rho_limit = _geometry(self)
        return rho_limit * max(ry, rx)


@dataclass
class CaseRecord:
    """One subject: ordered (image, mask) frames; frame 0 is end-diastole."""

    case_id: str
    view: str
    frames: list
    edv_ml: float | None = None
    esv_ml: float | None = None
    ef_true: float | None = None
    es_index: int | None = None
    gt_fields: list | None = None      # gt_fields[t] warps frame t back onto frame 0
    params: PhantomParams | None = None

    def __post_init__(self):
        if not self.frames:
            raise DataError(f"case {self.case_id} has no frames")
        shape = self.frames[0][0].shape
        spacing = self.frames[0][0].spacing
        for img, mask in self.frames:
            if img.shape != shape or mask.shape != shape:
                raise DataError(f"case {self.case_id}: frames have mixed shapes")
            if img.spacing != spacing or mask.spacing != spacing:
                raise DataError(f"case {self.case_id}: frames have mixed spacing")

    @property
    def shape(self):
        return self.frames[0][0].shape

    def ed(self):
        return self.frames[0]

    def es(self):
        return self.frames[self.es_index if self.es_index is not None else -1]


# ---------------------------------------------------------------------------
# phantom geometry and analytic deformation
# ---------------------------------------------------------------------------

def _geometry(params):
    c = (params.size - 1) / 2.0
    ry = params.lv_radius
    rx = params.lv_radius * params.ellipticity
    rho_outer = 1.0 + params.wall_thickness / params.lv_radius
    rho_plateau = rho_outer + PLATEAU_MARGIN
    rho_limit = rho_plateau + DECAY_WIDTH
    return c, c, ry, rx, rho_outer, rho_plateau, rho_limit


def _decay(rho, rho_plateau, rho_limit):
    """1 on the tissue plateau, quintic-smoothstep down to 0 beyond it."""
    s = np.clip((rho - rho_plateau) / (rho_limit - rho_plateau), 0.0, 1.0)
    return 1.0 - s ** 3 * (10.0 + s * (-15.0 + 6.0 * s))


def contraction_factor(params: PhantomParams, t: int) -> float:
    return 1.0 - params.amplitude * math.sin(math.pi * t / params.frames) ** 2


def phantom_displacement(params: PhantomParams, t: int, ys, xs):
    """Analytic flow (frame t <- frame 0) at continuous coordinates (ys, xs).

    Returns (uy, ux): the output pixel at material point x samples frame t at
    x + u(x).
    """
    cy, cx, ry, rx, _, rho_plateau, rho_limit = _geometry(params)
    k = contraction_factor(params, t)
    dy = np.asarray(ys, dtype=np.float64) - cy
    dx = np.asarray(xs, dtype=np.float64) - cx
    rho = np.sqrt((dy / ry) ** 2 + (dx / rx) ** 2)
    scale = (k - 1.0) * _decay(rho, rho_plateau, rho_limit)
    return scale * dy, scale * dx


def _radial_inverse(params, t, ys, xs):
    """Material coordinates m with m + u(m) = (ys, xs), via 1-D bisection.

    The radial map h(rho) = rho * (1 + (k-1) g(rho)) is strictly increasing and
    bracketed by [k*rho, rho], so bisection on the material radius converges
    unconditionally.
    """
    cy, cx, ry, rx, _, rho_plateau, rho_limit = _geometry(params)
    k = contraction_factor(params, t)
    dy = ys - cy
    dx = xs - cx
    rho_y = np.sqrt((dy / ry) ** 2 + (dx / rx) ** 2)
    lo = rho_y.copy()
    hi = rho_y / max(k, 1e-6)
    for _ in range(45):
        mid = 0.5 * (lo + hi)
        h = mid * (1.0 + (k - 1.0) * _decay(mid, rho_plateau, rho_limit))
        too_small = h < rho_y
        lo = np.where(too_small, mid, lo)
        hi = np.where(too_small, hi, mid)
    rho_m = 0.5 * (lo + hi)
    ratio = np.where(rho_y > 0, rho_m / np.maximum(rho_y, 1e-12), 1.0)
    return cy + dy * ratio, cx + dx * ratio


def generate_phantom(params: PhantomParams) -> CaseRecord:
    """Render a phantom case with exact per-frame ground-truth flows.

    Speckle is a band-limited standard-normal texture anchored to the tissue
    (advected by the exact deformation), applied multiplicatively.
    """
    cy, cx, ry, rx, rho_outer, _, _ = _geometry(params)
    n = params.size
    rng = np.random.default_rng(params.seed)
    noise = ndimage.gaussian_filter(rng.standard_normal((n, n)), sigma=0.6, mode="wrap")
    noise /= noise.std()
    yy, xx = np.meshgrid(np.arange(n, dtype=np.float64),
                         np.arange(n, dtype=np.float64), indexing="ij")
    rho = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    spacing = (params.spacing_mm, params.spacing_mm)

    frames, fields, lv_counts = [], [], []
    for t in range(params.frames):
        k = contraction_factor(params, t)
        labels = np.zeros((n, n), dtype=np.int64)
        labels[rho < k * rho_outer] = 1
        labels[rho < k] = 2
        my, mx = _radial_inverse(params, t, yy, xx)
        speckle_t = ndimage.map_coordinates(noise, [my, mx], order=1, mode="nearest")
        levels = np.choose(labels, [TISSUE_LEVELS[0], TISSUE_LEVELS[1], TISSUE_LEVELS[2]])
        intensity = np.clip(levels * (1.0 + params.speckle * speckle_t), 0.0, 1.0)
        frames.append((Image2D(intensity.astype(np.float32), spacing),
                       LabelMask(labels, spacing)))
        uy, ux = phantom_displacement(params, t, yy, xx)
        fields.append(DisplacementField(np.stack([uy, ux], axis=-1).astype(np.float32)))
        lv_counts.append(int((labels == 2).sum()))

    ks = [contraction_factor(params, t) for t in range(params.frames)]
    es_index = int(np.argmin(ks))
    area_to_ml = params.spacing_mm ** 2 / 100.0  # pseudo-volume: LV area in cm^2
    return CaseRecord(
        case_id=f"phantom_s{params.seed}",
        view="phantom",
        frames=frames,
        edv_ml=lv_counts[0] * area_to_ml,
        esv_ml=lv_counts[es_index] * area_to_ml,
        ef_true=1.0 - ks[es_index] ** 2,
        es_index=es_index,
        gt_fields=fields,
        params=params,
    )


def phantom_dataset(n_cases: int, base: PhantomParams | None = None, seed: int = 0,
                    radius_range=(0.85, 1.15), wall_range=(0.85, 1.25),
                    amplitude_range=(0.2, 0.35), ellipticity_range=(0.8, 1.0)):
    """Generate a list of phantom cases with jittered anatomy per case."""
    base = base or PhantomParams()
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(n_cases):
        params = replace(
            base,
            lv_radius=base.lv_radius * rng.uniform(*radius_range),
            wall_thickness=max(2.0, base.wall_thickness * rng.uniform(*wall_range)),
            amplitude=rng.uniform(*amplitude_range),
            ellipticity=rng.uniform(*ellipticity_range),
            seed=int(rng.integers(0, 2 ** 31)),
        )
        case = generate_phantom(params)
        case.case_id = f"phantom{i:03d}"
        cases.append(case)
    return cases


# ---------------------------------------------------------------------------
# MetaImage (.mhd/.raw) reading and writing
# ---------------------------------------------------------------------------

def write_mhd(path, array, spacing):
    """Write a 2D array as an .mhd header plus .raw payload pair."""
    path = Path(path)
    array = np.asarray(array)
    if array.ndim != 2:
        raise DataError(f"write_mhd expects a 2D array, got shape {array.shape}")
    if array.dtype == np.int64:
        array = array.astype(np.uint8)
    dtype = np.dtype(array.dtype)
    if dtype not in _MET_NAMES:
        raise DataError(f"unsupported dtype {dtype} for MetaImage")
    raw_name = path.with_suffix(".raw").name
    h, w = array.shape
    header = "\n".join([
        "ObjectType = Image",
        "NDims = 2",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        f"DimSize = {w} {h}",
        f"ElementSpacing = {spacing[1]} {spacing[0]}",
        f"ElementType = {_MET_NAMES[dtype]}",
        f"ElementDataFile = {raw_name}",
    ]) + "\n"
    path.write_text(header)
    array.astype(array.dtype.newbyteorder("<")).tofile(path.with_suffix(".raw"))


def read_mhd(path):
    """Read a 2D MetaImage; returns (array, (spacing_y, spacing_x))."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    fields = {}
    for line in path.read_text().splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            fields[key.strip()] = value.strip()
    if fields.get("NDims") != "2":
        raise DataError(f"{path}: only 2D MetaImages are supported")
    if "ElementSpacing" not in fields and "ElementSize" not in fields:
        raise DataError(f"{path}: pixel spacing is absent")
    if "DimSize" not in fields or "ElementType" not in fields:
        raise DataError(f"{path}: incomplete MetaImage header")
    sx, sy = (float(v) for v in fields.get("ElementSpacing",
                                           fields.get("ElementSize")).split()[:2])
    w, h = (int(v) for v in fields["DimSize"].split()[:2])
    met = fields["ElementType"]
    if met not in _MET_TYPES:
        raise DataError(f"{path}: unsupported ElementType {met}")
    dtype = np.dtype(_MET_TYPES[met]).newbyteorder(
        ">" if fields.get("BinaryDataByteOrderMSB", "False") == "True" else "<")
    data_file = fields.get("ElementDataFile", "")
    if data_file in ("", "LOCAL", "LIST"):
        raise DataError(f"{path}: only external raw payloads are supported")
    raw = path.parent / data_file
    if not raw.exists():
        raise DataError(f"missing raw payload: {raw}")
    array = np.fromfile(raw, dtype=dtype)
    if array.size != h * w:
        raise DataError(f"{raw}: payload has {array.size} elements, expected {h * w}")
    return array.reshape(h, w), (sy, sx)


def _remap_camus_labels(raw, path):
    labels = np.asarray(raw).astype(np.int64)
    unmapped = set(np.unique(labels).tolist()) - set(CAMUS_LABEL_MAP)
    if unmapped:
        raise LabelError(f"{path}: unmapped label values {sorted(unmapped)}")
    out = np.zeros_like(labels)
    for src, dst in CAMUS_LABEL_MAP.items():
        out[labels == src] = dst
    return out


def _parse_info(path):
    info = {}
    for line in Path(path).read_text().splitlines():
        m = re.match(r"\s*([^:=]+)\s*[:=]\s*(.+)", line)
        if m:
            info[m.group(1).strip()] = m.group(2).strip()
    return info


def load_camus_case(case_dir, view: str = "2CH") -> CaseRecord:
    """Load one CAMUS patient directory (ED/ES frames of one view).

    Images are min-max normalized; masks are remapped via CAMUS_LABEL_MAP so
    LV(1)->2 and MYO(2)->1, with the atrium folded into background. EDV/ESV
    (ml) come from the Info_{view}.cfg file.
    """
    case_dir = Path(case_dir)
    if not case_dir.is_dir():
        raise DataError(f"missing case directory: {case_dir}")

    def one(suffix):
        matches = sorted(case_dir.glob(f"*_{view}_{suffix}.mhd"))
        if not matches:
            raise DataError(f"{case_dir}: no *_{view}_{suffix}.mhd file")
        return matches[0]

    frames = []
    for phase in ("ED", "ES"):
        img_raw, spacing = read_mhd(one(phase))
        mask_raw, mask_spacing = read_mhd(one(f"{phase}_gt"))
        if img_raw.shape != mask_raw.shape:
            raise DataError(f"{case_dir}: {phase} image/mask shapes differ")
        image = normalize(Image2D(img_raw.astype(np.float32), spacing))
        mask = LabelMask(_remap_camus_labels(mask_raw, one(f"{phase}_gt")), mask_spacing)
        frames.append((image, mask))

    info_path = case_dir / f"Info_{view}.cfg"
    if not info_path.exists():
        raise DataError(f"missing info file: {info_path}")
    info = _parse_info(info_path)
    try:
        edv = float(info["LVedv"])
        esv = float(info["LVesv"])
    except KeyError as exc:
        raise DataError(f"{info_path}: missing {exc} entry")
    ef = float(info["LVef"]) if "LVef" in info else 100.0 * (1.0 - esv / edv)
    view_tag = {"2CH": "A2C", "4CH": "A4C"}.get(view, view)
    return CaseRecord(case_id=case_dir.name, view=view_tag, frames=frames,
                      edv_ml=edv, esv_ml=esv, ef_true=ef / 100.0, es_index=1)


# ---------------------------------------------------------------------------
# phantom dataset export / import
# ---------------------------------------------------------------------------

def export_case(record: CaseRecord, out_dir):
    """Write a case in the MetaImage layout plus a JSON sidecar and DDF1 fields."""
    from .baseline import export_field  # local import to avoid a cycle

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for t, (image, mask) in enumerate(record.frames):
        write_mhd(out_dir / f"{record.case_id}_t{t:02d}.mhd",
                  image.pixels.astype(np.float32), image.spacing)
        write_mhd(out_dir / f"{record.case_id}_t{t:02d}_gt.mhd",
                  mask.labels.astype(np.uint8), mask.spacing)
        if record.gt_fields is not None:
            export_field(out_dir / f"{record.case_id}_t{t:02d}.ddf", record.gt_fields[t])
    sidecar = {
        "case_id": record.case_id,
        "view": record.view,
        "frames": len(record.frames),
        "es_index": record.es_index,
        "edv_ml": record.edv_ml,
        "esv_ml": record.esv_ml,
        "ef_true": record.ef_true,
        "params": asdict(record.params) if record.params else None,
    }
    (out_dir / f"{record.case_id}.json").write_text(json.dumps(sidecar, indent=2))


def load_phantom_case(directory, case_id: str) -> CaseRecord:
    """Load a case previously written by export_case."""
    from .baseline import import_external_field

    directory = Path(directory)
    sidecar_path = directory / f"{case_id}.json"
    if not sidecar_path.exists():
        raise DataError(f"missing sidecar: {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text())
    frames, fields = [], []
    for t in range(sidecar["frames"]):
        img, spacing = read_mhd(directory / f"{case_id}_t{t:02d}.mhd")
        mask, mask_spacing = read_mhd(directory / f"{case_id}_t{t:02d}_gt.mhd")
        frames.append((Image2D(img.astype(np.float32), spacing),
                       LabelMask(mask.astype(np.int64), mask_spacing)))
        ddf = directory / f"{case_id}_t{t:02d}.ddf"
        if ddf.exists():
            fields.append(import_external_field(ddf))
    params = PhantomParams(**sidecar["params"]) if sidecar.get("params") else None
    return CaseRecord(
        case_id=sidecar["case_id"], view=sidecar["view"], frames=frames,
        edv_ml=sidecar.get("edv_ml"), esv_ml=sidecar.get("esv_ml"),
        ef_true=sidecar.get("ef_true"), es_index=sidecar.get("es_index"),
        gt_fields=fields or None, params=params)


def load_dataset(directory) -> list:
    """Load every case under a directory (phantom sidecars or CAMUS subdirs)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"missing dataset directory: {directory}")
    sidecars = sorted(directory.glob("*.json"))
    if sidecars:
        return [load_phantom_case(directory, p.stem) for p in sidecars]
    cases = []
    for sub in sorted(p for p in directory.iterdir() if p.is_dir()):
        for view in ("2CH", "4CH"):
            if list(sub.glob(f"*_{view}_ED.mhd")):
                cases.append(load_camus_case(sub, view))
    if not cases:
        raise DataError(f"no cases found under {directory}")
    return cases


def make_splits(cases, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Deterministic patient-disjoint train/val/test split.

    Cases sharing a case_id (e.g. two views of one patient) always land in the
    same split.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    keys = sorted({c.case_id for c in cases})
    n = len(keys)
    bounds = [int(round(sum(ratios[:i + 1]) * n)) for i in range(len(ratios))]
    sizes = np.diff([0] + bounds)
    if any(s == 0 for s, r in zip(sizes, ratios) if r > 0):
        raise DataError(f"too few cases ({n}) for split ratios {ratios}")
    random.Random(seed).shuffle(keys)
    groups = [set(keys[a:b]) for a, b in zip([0] + bounds[:-1], bounds)]
    return tuple([c for c in cases if c.case_id in group] for group in groups)
