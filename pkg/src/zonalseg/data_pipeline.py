"""Volume I/O, cropping, resampling, augmentation and phantom generation."""

from __future__ import annotations

import json
import math
import re
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .autodiff.ops import _interp_matrix

DTYPES = {"u16": np.dtype("<u2"), "u8": np.dtype("u1")}
KINDS = ("image", "mask")
PHANTOM_SPACING = (0.5, 0.5, 3.6)


class CorruptVolumeError(ValueError):
    pass


@dataclass
class Volume:
    """A stack of slices, stored as (slices, height, width)."""

    voxels: np.ndarray
    spacing_mm: tuple = PHANTOM_SPACING
    kind: str = "image"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown volume kind {self.kind!r}")
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ValueError(f"volume voxels must be 3D, got shape {self.voxels.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ValueError("spacing_mm needs three positive components")
        if self.kind == "mask":
            if self.voxels.size and self.voxels.max() > 2:
                raise ValueError("mask volumes may only hold labels 0, 1, 2")
            self.voxels = self.voxels.astype(np.uint8, copy=False)
        else:
            self.voxels = self.voxels.astype(np.uint16, copy=False)

    @property
    def n_slices(self) -> int:
        return self.voxels.shape[0]

    @property
    def height(self) -> int:
        return self.voxels.shape[1]

    @property
    def width(self) -> int:
        return self.voxels.shape[2]

    @property
    def dtype_name(self) -> str:
        return "u8" if self.kind == "mask" else "u16"


def _paths(path) -> tuple:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".raw")


def save_volume(volume: Volume, path) -> Path:
    header_path, blob_path = _paths(path)
    blob = np.ascontiguousarray(volume.voxels, dtype=DTYPES[volume.dtype_name]).tobytes()
    header = {
        "width": volume.width,
        "height": volume.height,
        "slices": volume.n_slices,
        "spacing_mm": list(volume.spacing_mm),
        "dtype": volume.dtype_name,
        "kind": volume.kind,
        "crc32": zlib.crc32(blob),
    }
    header_path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(blob)
    header_path.write_text(json.dumps(header, indent=2))
    return header_path


def load_volume(path) -> Volume:
    header_path, blob_path = _paths(path)
    try:
        header = json.loads(header_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptVolumeError(f"cannot read volume header {header_path}: {exc}") from exc
    kind = header.get("kind")
    if kind not in KINDS:
        raise ValueError(f"unknown volume kind {kind!r} in {header_path}")
    dtype_name = header.get("dtype")
    if dtype_name not in DTYPES:
        raise CorruptVolumeError(f"unknown dtype {dtype_name!r} in {header_path}")
    shape = (int(header["slices"]), int(header["height"]), int(header["width"]))
    blob = blob_path.read_bytes()
    expected = math.prod(shape) * DTYPES[dtype_name].itemsize
    if len(blob) != expected:
        raise CorruptVolumeError(
            f"{blob_path} holds {len(blob)} bytes, header implies {expected}"
        )
    if "crc32" in header and zlib.crc32(blob) != header["crc32"]:
        raise CorruptVolumeError(f"checksum mismatch for {blob_path}")
    voxels = np.frombuffer(blob, dtype=DTYPES[dtype_name]).reshape(shape)
    if kind == "mask" and voxels.size and voxels.max() > 2:
        raise ValueError(f"mask {blob_path} contains labels outside {{0, 1, 2}}")
    return Volume(voxels.copy(), tuple(header["spacing_mm"]), kind)


# ---------------------------------------------------------------------------
# geometry


def crop_window(length_px: int, spacing: float, size_mm: float) -> tuple:
    """(start, size) of a centred crop; odd leftovers shift the crop left."""
    size = int(math.floor(size_mm / spacing + 0.5))
    if size > length_px:
        raise ValueError(
            f"crop of {size_mm} mm ({size} px) exceeds the {length_px} px field of view"
        )
    return (length_px - size) // 2, size


def central_crop_mm(volume: Volume, size_mm: float = 93.0) -> Volume:
    sx, sy, _ = volume.spacing_mm
    x0, w = crop_window(volume.width, sx, size_mm)
    y0, h = crop_window(volume.height, sy, size_mm)
    return Volume(volume.voxels[:, y0:y0 + h, x0:x0 + w].copy(), volume.spacing_mm, volume.kind)


def _nearest_index(src: int, dst: int) -> np.ndarray:
    idx = np.floor((np.arange(dst) + 0.5) * src / dst).astype(int)
    return np.clip(idx, 0, src - 1)


def resample_slice(slice_, target_size=192, kind: str = "image") -> np.ndarray:
    """Resize one 2D slice: bilinear for images, nearest neighbour for masks.

    ``target_size`` is an int (square) or an (height, width) pair.
    """
    arr = np.asarray(slice_)
    th, tw = (target_size, target_size) if np.isscalar(target_size) else target_size
    if arr.shape == (th, tw):
        return arr.copy()
    h, w = arr.shape
    if kind == "mask":
        return arr[np.ix_(_nearest_index(h, th), _nearest_index(w, tw))]
    ah = _interp_matrix(h, th, "float64")
    aw = _interp_matrix(w, tw, "float64")
    return (ah @ arr.astype(np.float64) @ aw.T).astype(np.float32)


def normalize_intensity(image: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance scaling over the whole array."""
    image = np.asarray(image, dtype=np.float32)
    sd = float(image.std())
    return ((image - image.mean()) / (sd if sd > 0 else 1.0)).astype(np.float32)


def prepare_case(image: Volume, mask: Volume | None, input_size: int, crop_mm: float = 93.0):
    """Crop, resample and normalize a case into network-ready slices.

    Returns (images float32 (S, n, n), masks uint8 (S, n, n) or None).
    """
    img = central_crop_mm(image, crop_mm).voxels
    images = np.stack([resample_slice(s, input_size, "image") for s in img])
    images = normalize_intensity(images)
    masks = None
    if mask is not None:
        if mask.voxels.shape != image.voxels.shape:
            raise ValueError("image and mask geometry differ")
        msk = central_crop_mm(mask, crop_mm).voxels
        masks = np.stack([resample_slice(s, input_size, "mask") for s in msk]).astype(np.uint8)
    return images, masks


def restore_probabilities(probs: np.ndarray, like: Volume, crop_mm: float = 93.0) -> np.ndarray:
    """Labels on the original slice grid from (S, C, n, n) class probabilities.

    Each class map is resized bilinearly to the crop before the argmax, so
    thin structures keep smooth borders; outside the crop is background.
    """
    sx, sy, _ = like.spacing_mm
    x0, w = crop_window(like.width, sx, crop_mm)
    y0, h = crop_window(like.height, sy, crop_mm)
    out = np.zeros(like.voxels.shape, dtype=np.uint8)
    n = probs.shape[-1]
    ah = _interp_matrix(n, h, "float32")
    aw = _interp_matrix(n, w, "float32")
    for k, p in enumerate(probs):
        up = ah @ p.astype(np.float32) @ aw.T
        out[k, y0:y0 + h, x0:x0 + w] = np.argmax(up, axis=0)
    return out


def restore_labels(labels: np.ndarray, like: Volume, crop_mm: float = 93.0) -> np.ndarray:
    """Map (S, n, n) network labels back onto the original slice grid.

    Labels are resized to the crop by nearest neighbour and pasted into a
    background canvas the size of ``like``.
    """
    sx, sy, _ = like.spacing_mm
    x0, w = crop_window(like.width, sx, crop_mm)
    y0, h = crop_window(like.height, sy, crop_mm)
    out = np.zeros(like.voxels.shape, dtype=np.uint8)
    for k, lab in enumerate(labels):
        out[k, y0:y0 + h, x0:x0 + w] = resample_slice(lab, (h, w), "mask")
    return out


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentSpec:
    hflip_probability: float = 0.5
    rotation_range_degrees: tuple = (-5.0, 5.0)
    elastic_enabled: bool = True
    elastic_alpha: float = 10.0
    elastic_sigma: float = 4.0
    seed: int = 0

    def validate(self) -> "AugmentSpec":
        lo, hi = self.rotation_range_degrees
        if lo != -hi:
            raise ValueError("rotation range must be symmetric about zero")
        if not 0 <= self.hflip_probability <= 1:
            raise ValueError("hflip_probability must lie in [0, 1]")
        if self.elastic_enabled and (self.elastic_alpha < 0 or self.elastic_sigma <= 0):
            raise ValueError("elastic alpha must be non-negative and sigma positive")
        return self

    def to_dict(self) -> dict:
        d = dict(vars(self))
        d["rotation_range_degrees"] = list(self.rotation_range_degrees)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentSpec":
        d = dict(d)
        if "rotation_range_degrees" in d:
            d["rotation_range_degrees"] = tuple(d["rotation_range_degrees"])
        return cls(**d)


def hflip(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr[..., ::-1])


def augment(image: np.ndarray, mask: np.ndarray, spec: AugmentSpec, rng=None) -> tuple:
    """Apply one random flip/rotation/elastic warp to an image and its mask.

    ``rng`` defaults to a generator seeded from ``spec.seed``. The image is
    sampled bilinearly and the mask by nearest neighbour; pixels mapped from
    outside the slice become 0.
    """
    spec.validate()
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape != mask.shape:
        raise ValueError(f"image {image.shape} and mask {mask.shape} are not congruent")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    h, w = image.shape

    flip = rng.random() < spec.hflip_probability
    lo, hi = spec.rotation_range_degrees
    angle = math.radians(rng.uniform(lo, hi)) if hi > 0 else 0.0
    if spec.elastic_enabled and spec.elastic_alpha > 0:
        dy = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), spec.elastic_sigma) * spec.elastic_alpha
        dx = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), spec.elastic_sigma) * spec.elastic_alpha
    else:
        dy = dx = None

    if angle == 0.0 and dy is None:
        if flip:
            return hflip(image), hflip(mask)
        return image.copy(), mask.copy()

    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    if dy is not None:
        yy = yy + dy
        xx = xx + dx
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    cos, sin = math.cos(angle), math.sin(angle)
    src_y = cy + cos * (yy - cy) - sin * (xx - cx)
    src_x = cx + sin * (yy - cy) + cos * (xx - cx)
    if flip:
        src_x = (w - 1) - src_x
    coords = np.stack([src_y, src_x])
    out_img = ndimage.map_coordinates(image.astype(np.float64), coords, order=1,
                                      mode="constant", cval=0.0)
    out_mask = ndimage.map_coordinates(mask, coords, order=0, mode="constant", cval=0)
    return out_img.astype(image.dtype if image.dtype.kind == "f" else np.float32), out_mask.astype(mask.dtype)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample generator independent of scheduling order."""
    return np.random.default_rng([seed, epoch, index])


# ---------------------------------------------------------------------------
# phantoms


def _ellipse(h, w, cy, cx, ry, rx, angle=0.0):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(angle), math.sin(angle)
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v <= 1.0


def generate_phantom(seed: int, n_slices: int = 12, size: int = 192) -> tuple:
    """Synthetic prostate image and zonal mask volumes.

    Superior slices carry TZ only, mid-gland slices both zones and inferior
    slices PZ only, with one to three empty slices at each end. Spacing is
    0.5 x 0.5 x 3.6 mm.
    """
    if n_slices < 6:
        raise ValueError("phantoms need at least 6 slices")
    rng = np.random.default_rng(seed)
    max_pad = max(1, min(3, (n_slices - 4) // 2))
    pre = int(rng.integers(1, max_pad + 1))
    post = int(rng.integers(1, max_pad + 1))
    n_prostate = n_slices - pre - post
    n_base = max(1, int(round(n_prostate * rng.uniform(0.12, 0.25))))
    n_apex = max(1, int(round(n_prostate * rng.uniform(0.12, 0.25))))
    n_mid = n_prostate - n_base - n_apex
    if n_mid < 1:
        n_base = n_apex = 1
        n_mid = n_prostate - 2

    scale = size / 192.0
    cy = size / 2 + rng.uniform(-6, 6) * scale
    cx = size / 2 + rng.uniform(-6, 6) * scale
    ry0 = rng.uniform(28, 38) * scale
    rx0 = rng.uniform(36, 46) * scale
    tilt = rng.uniform(-0.2, 0.2)
    tz_shift = rng.uniform(0.12, 0.25)
    tz_frac_top = rng.uniform(0.68, 0.78)
    tz_frac_bottom = rng.uniform(0.45, 0.55)

    mask = np.zeros((n_slices, size, size), np.uint8)
    for k in range(n_prostate):
        t = (k + 0.5) / n_prostate
        bulge = 0.7 + 0.3 * math.sin(math.pi * t)
        ry, rx = ry0 * bulge, rx0 * bulge
        outer = _ellipse(size, size, cy, cx, ry, rx, tilt)
        if k < n_base:
            tz = outer
        elif k >= n_base + n_mid:
            tz = np.zeros_like(outer)
            # apex: a compact, rounder PZ-only section
            outer = _ellipse(size, size, cy + 0.15 * ry, cx, 0.75 * ry, 0.7 * rx, tilt)
        else:
            j = (k - n_base + 0.5) / n_mid
            f = tz_frac_top + (tz_frac_bottom - tz_frac_top) * j
            tz = outer & _ellipse(size, size, cy - tz_shift * ry, cx, f * ry, f * rx, tilt)
        sl = mask[pre + k]
        sl[outer] = 1
        sl[tz] = 2

    image = _phantom_intensities(mask, rng, size)
    return (Volume(image, PHANTOM_SPACING, "image"), Volume(mask, PHANTOM_SPACING, "mask"))


def _phantom_intensities(mask: np.ndarray, rng, size: int) -> np.ndarray:
    n = mask.shape[0]
    body = _ellipse(size, size, size / 2, size / 2, 0.46 * size, 0.49 * size)
    pz_mean = rng.uniform(650, 750)
    tz_mean = rng.uniform(380, 460)
    tissue = rng.uniform(220, 280)
    yy, xx = np.mgrid[0:size, 0:size] / size - 0.5
    a, b, c = rng.uniform(-0.25, 0.25, 3)
    bias = 1.0 + a * xx + b * yy + c * (xx * xx + yy * yy)
    vol = np.empty(mask.shape, np.float64)
    for k in range(n):
        sl = np.where(body, tissue, 40.0)
        texture = ndimage.gaussian_filter(rng.standard_normal((size, size)), 3) * 60
        sl = sl + np.where(body, texture, 0)
        sl[mask[k] == 1] = pz_mean
        sl[mask[k] == 2] = tz_mean
        sl = sl * bias + rng.normal(0, 30, (size, size))
        vol[k] = sl
    return np.clip(np.rint(vol), 0, 65535).astype(np.uint16)


def perturb_mask(mask: Volume, seed: int) -> Volume:
    """A second reader's annotation: per-slice random erosion/dilation of each zone."""
    rng = np.random.default_rng(seed)
    out = mask.voxels.copy()
    for k, sl in enumerate(mask.voxels):
        new = np.zeros_like(sl)
        prostate = sl > 0
        if prostate.any():
            op = rng.choice([ndimage.binary_dilation, ndimage.binary_erosion, None])
            prostate = op(prostate, iterations=int(rng.integers(1, 4))) if op else prostate
            tz = sl == 2
            op = rng.choice([ndimage.binary_dilation, ndimage.binary_erosion, None])
            tz = op(tz, iterations=int(rng.integers(1, 4))) if op else tz
            new[prostate] = 1
            new[prostate & tz] = 2
        out[k] = new
    return Volume(out, mask.spacing_mm, "mask")


# ---------------------------------------------------------------------------
# datasets


CASE_RE = re.compile(r"^(case\d+)_(img|mask|mask_reader2)\.json$")


@dataclass
class Case:
    case_id: str
    image: Volume
    mask: Volume | None = None
    reader2: Volume | None = None


def phantom_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def write_phantom_dataset(out_dir, count: int, seed: int = 0, n_slices: int = 12,
                          size: int = 192, reader2: bool = False, start: int = 0) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(start, start + count):
        cid = f"case{i:03d}"
        s = phantom_seed(seed, i)
        img, msk = generate_phantom(s, n_slices, size)
        save_volume(img, out / f"{cid}_img")
        save_volume(msk, out / f"{cid}_mask")
        if reader2:
            save_volume(perturb_mask(msk, s + 1), out / f"{cid}_mask_reader2")
        ids.append(cid)
    return ids


def list_cases(data_dir) -> list:
    """Sorted case ids present in a dataset directory."""
    ids = set()
    for p in Path(data_dir).iterdir():
        m = CASE_RE.match(p.name)
        if m:
            ids.add(m.group(1))
    return sorted(ids)


def load_case(data_dir, case_id: str, reader2_dir=None) -> Case:
    d = Path(data_dir)
    image = load_volume(d / f"{case_id}_img")
    mask_path = d / f"{case_id}_mask.json"
    mask = load_volume(mask_path) if mask_path.exists() else None
    r2_root = Path(reader2_dir) if reader2_dir is not None else d
    r2_path = r2_root / f"{case_id}_mask_reader2.json"
    if not r2_path.exists() and reader2_dir is not None:
        r2_path = r2_root / f"{case_id}_mask.json"
    reader2 = load_volume(r2_path) if r2_path.exists() else None
    return Case(case_id, image, mask, reader2)


def load_dataset(data_dir, reader2_dir=None) -> list:
    return [load_case(data_dir, cid, reader2_dir) for cid in list_cases(data_dir)]
