"""Synthetic LGE-like cardiac phantoms, preprocessing, augmentation and dataset IO.

A phantom is a short-axis slice: a bright blood-pool disk, a dark myocardial
annulus around it, and a hyperintense transmural scar sector of that annulus.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import DatasetFormatError, DatasetNotFoundError, GeometryError, ShapeError

BACKGROUND, MYOCARDIUM, BLOOD_POOL, SCAR = 0, 1, 2, 3
CLASS_NAMES = ("background", "myocardium", "blood", "scar")

MANIFEST = "manifest.json"
FORMAT_NAME = "scarnet-phantoms"
FORMAT_VERSION = 1


@dataclass
class PhantomSpec:
    center: tuple = (128.0, 128.0)
    inner_radius: float = 30.0
    outer_radius: float = 45.0
    scar_arc_start: float = 0.0
    scar_arc_extent: float = 90.0
    # background, myocardium, blood pool, scar
    intensity_means: tuple = (0.05, 0.2, 0.6, 0.95)
    intensity_noise_sigma: float = 0.03
    seed: int = 0
    height: int = 256
    width: int = 256

    def validate(self):
        if not 0 < self.inner_radius < self.outer_radius < min(self.height, self.width) / 2:
            raise GeometryError(
                f"need 0 < inner_radius ({self.inner_radius}) < outer_radius "
                f"({self.outer_radius}) < min(H, W)/2 ({min(self.height, self.width) / 2})")
        if not 0 <= self.scar_arc_extent <= 360:
            raise GeometryError(f"scar_arc_extent must lie in [0, 360], got {self.scar_arc_extent}")
        if len(self.intensity_means) != 4:
            raise GeometryError("intensity_means needs one value per class (4)")
        if self.intensity_noise_sigma < 0:
            raise GeometryError("intensity_noise_sigma must be >= 0")
        if not 0 <= int(self.seed) < 2**64:
            raise GeometryError("seed must be an unsigned 64-bit integer")

    def to_dict(self):
        d = asdict(self)
        d["center"] = list(self.center)
        d["intensity_means"] = list(self.intensity_means)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["center"] = tuple(d["center"])
        d["intensity_means"] = tuple(d["intensity_means"])
        return cls(**d)


@dataclass
class Sample:
    id: str
    image: np.ndarray
    mask: np.ndarray
    spec: Optional[PhantomSpec] = None


def phantom_labels(spec: PhantomSpec) -> np.ndarray:
    """Exact label map for a phantom geometry (no noise)."""
    spec.validate()
    rows, cols = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    dr = rows - spec.center[0]
    dc = cols - spec.center[1]
    dist = np.hypot(dr, dc)
    # image rows grow downward, so negate for a counter-clockwise angle
    angle = np.degrees(np.arctan2(-dr, dc)) % 360.0

    labels = np.zeros((spec.height, spec.width), dtype=np.uint8)
    labels[dist < spec.inner_radius] = BLOOD_POOL
    annulus = (dist >= spec.inner_radius) & (dist < spec.outer_radius)
    labels[annulus] = MYOCARDIUM
    in_arc = ((angle - spec.scar_arc_start) % 360.0) < spec.scar_arc_extent
    labels[annulus & in_arc] = SCAR
    return labels


def generate_phantom(spec: PhantomSpec):
    """Render ``(image, mask)``; identical specs give bit-identical output."""
    labels = phantom_labels(spec)
    means = np.asarray(spec.intensity_means, dtype=np.float64)
    rng = np.random.default_rng(int(spec.seed))
    noise = rng.normal(0.0, spec.intensity_noise_sigma, size=labels.shape)
    image = (means[labels] + noise).astype(np.float32)
    return image, labels


def random_phantom_spec(rng: np.random.Generator, height=256, width=256,
                        scar_extent_range=(45.0, 160.0), **overrides) -> PhantomSpec:
    """Draw a plausible phantom geometry from ``rng``."""
    size = min(height, width)
    outer = size * rng.uniform(0.2, 0.3)
    thickness = size * rng.uniform(0.07, 0.1)
    jitter = size / 16
    kwargs = dict(
        center=(float(height / 2 + rng.uniform(-jitter, jitter)),
                float(width / 2 + rng.uniform(-jitter, jitter))),
        inner_radius=float(outer - thickness),
        outer_radius=float(outer),
        scar_arc_start=float(rng.uniform(0, 360)),
        scar_arc_extent=float(rng.uniform(*scar_extent_range)),
        seed=int(rng.integers(0, 2**31 - 1)),
        height=height,
        width=width,
    )
    kwargs.update(overrides)
    return PhantomSpec(**kwargs)


def make_phantom_set(count, seed, height=256, width=256, scar_extent_range=(45.0, 160.0), **overrides):
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(count):
        spec = random_phantom_spec(rng, height, width, scar_extent_range, **overrides)
        image, mask = generate_phantom(spec)
        samples.append(Sample(f"{i:05d}", image, mask, spec))
    return samples


def normalize_image(img: np.ndarray) -> np.ndarray:
    """Z-score an image; a constant image maps to zeros."""
    img = np.asarray(img, dtype=np.float64)
    if img.size < 2:
        raise ShapeError("normalization needs at least 2 pixels")
    mu = img.mean()
    sd = img.std()
    if sd == 0:
        return np.zeros_like(img)
    return (img - mu) / sd


def split_into_patches(img: np.ndarray, patch_size: int) -> np.ndarray:
    """Row-major ``[N, p, p]`` patch stack."""
    h, w = img.shape
    if h % patch_size or w % patch_size:
        raise ShapeError(f"image {h}x{w} is not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    return (img.reshape(gh, patch_size, gw, patch_size)
               .transpose(0, 2, 1, 3)
               .reshape(gh * gw, patch_size, patch_size))


def merge_patches(patches: np.ndarray, grid: tuple) -> np.ndarray:
    gh, gw = grid
    n, p, q = patches.shape
    if n != gh * gw:
        raise ShapeError(f"{n} patches do not fill a {gh}x{gw} grid")
    return patches.reshape(gh, gw, p, q).transpose(0, 2, 1, 3).reshape(gh * p, gw * q)


@dataclass
class AugmentParams:
    rotation_limit_deg: float = 15.0
    flip_prob: float = 0.5
    brightness_range: tuple = (0.8, 1.2)
    contrast_range: tuple = (0.8, 1.2)
    apply_prob: float = 0.5
    test_noise_sigma: float = 0.15

    def __post_init__(self):
        self.brightness_range = tuple(self.brightness_range)
        self.contrast_range = tuple(self.contrast_range)
        for name in ("flip_prob", "apply_prob"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("brightness_range", "contrast_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} low {lo} exceeds high {hi}")
        if self.rotation_limit_deg < 0 or self.test_noise_sigma < 0:
            raise ValueError("rotation_limit_deg and test_noise_sigma must be >= 0")


@dataclass
class AugmentDraw:
    applied: bool = False
    angle: float = 0.0
    hflip: bool = False
    vflip: bool = False
    brightness: float = 1.0
    contrast: float = 1.0


def sample_augmentation(params: AugmentParams, rng: np.random.Generator) -> AugmentDraw:
    # every variate is drawn unconditionally so the stream advances identically
    u = rng.random()
    angle = rng.uniform(-params.rotation_limit_deg, params.rotation_limit_deg)
    hflip = rng.random() < params.flip_prob
    vflip = rng.random() < params.flip_prob
    brightness = rng.uniform(*params.brightness_range)
    contrast = rng.uniform(*params.contrast_range)
    if u >= params.apply_prob:
        return AugmentDraw()
    return AugmentDraw(True, float(angle), bool(hflip), bool(vflip), float(brightness), float(contrast))


def rotate_pair(image, mask, angle):
    img = ndimage.rotate(image, angle, reshape=False, order=1, mode="constant", cval=0.0)
    msk = ndimage.rotate(mask, angle, reshape=False, order=0, mode="constant", cval=0)
    return img.astype(image.dtype), msk.astype(mask.dtype)


def apply_augmentation(image, mask, draw: AugmentDraw):
    if not draw.applied:
        return image.copy(), mask.copy()
    if draw.angle != 0.0:
        image, mask = rotate_pair(image, mask, draw.angle)
    if draw.hflip:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if draw.vflip:
        image, mask = image[::-1, :], mask[::-1, :]
    image = image * draw.brightness
    mean = image.mean()
    image = (image - mean) * draw.contrast + mean
    return np.ascontiguousarray(image, dtype=np.float32), np.ascontiguousarray(mask)


def augment_train(sample, params: AugmentParams, rng: np.random.Generator):
    """Randomly rotate, flip and intensity-jitter an ``(image, mask)`` pair."""
    image, mask = sample
    return apply_augmentation(image, mask, sample_augmentation(params, rng))


def add_gaussian_noise(img: np.ndarray, sigma: float, rng) -> np.ndarray:
    """Add zero-mean Gaussian noise with std ``sigma * (max - min)`` of ``img``."""
    if sigma < 0:
        raise ValueError(f"noise sigma must be >= 0, got {sigma}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    img = np.asarray(img)
    if sigma == 0:
        return img.copy()
    scale = sigma * float(img.max() - img.min())
    noisy = img.astype(np.float64) + rng.normal(0.0, scale, size=img.shape)
    return noisy.astype(img.dtype if np.issubdtype(img.dtype, np.floating) else np.float32)


# -- raw file format -----------------------------------------------------

def write_raw(path, array: np.ndarray, dtype):
    arr = np.ascontiguousarray(array, dtype=np.dtype(dtype).newbyteorder("<"))
    header = " ".join(str(s) for s in arr.shape) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(arr.tobytes(order="C"))


def read_raw(path, dtype) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DatasetNotFoundError(f"{path} not found")
    data = path.read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise DatasetFormatError(path, "header", "missing shape line")
    try:
        shape = tuple(int(s) for s in data[:nl].decode("ascii").split())
    except (UnicodeDecodeError, ValueError) as exc:
        raise DatasetFormatError(path, "header", str(exc)) from None
    dt = np.dtype(dtype).newbyteorder("<")
    body = data[nl + 1:]
    if len(body) != int(np.prod(shape)) * dt.itemsize:
        raise DatasetFormatError(path, "payload", f"expected {int(np.prod(shape)) * dt.itemsize} bytes, got {len(body)}")
    return np.frombuffer(body, dtype=dt).reshape(shape).astype(np.dtype(dtype).newbyteorder("="))


def image_path(root, sid):
    return Path(root) / f"img_{sid}.raw"


def mask_path(root, sid):
    return Path(root) / f"msk_{sid}.raw"


def write_mask(path, mask):
    write_raw(path, mask, np.uint8)


def read_mask(path):
    return read_raw(path, np.uint8)


def dataset_write(path, samples: Sequence[Sample], extra: Optional[dict] = None):
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        write_raw(image_path(root, s.id), s.image, np.float32)
        write_mask(mask_path(root, s.id), s.mask)
        entries.append({
            "id": s.id,
            "height": int(s.image.shape[0]),
            "width": int(s.image.shape[1]),
            "seed": None if s.spec is None else int(s.spec.seed),
            "spec": None if s.spec is None else s.spec.to_dict(),
        })
    manifest = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "samples": entries}
    if extra:
        manifest.update(extra)
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def read_manifest(path) -> dict:
    root = Path(path)
    if not root.exists():
        raise DatasetNotFoundError(f"dataset directory {root} not found")
    mpath = root / MANIFEST
    if not mpath.exists():
        raise DatasetFormatError(mpath, "manifest", "file missing")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(mpath, "manifest", str(exc)) from None
    if not isinstance(manifest, dict):
        raise DatasetFormatError(mpath, "manifest", "top level is not an object")
    if manifest.get("format") != FORMAT_NAME:
        raise DatasetFormatError(mpath, "format")
    if not isinstance(manifest.get("samples"), list):
        raise DatasetFormatError(mpath, "samples")
    for i, entry in enumerate(manifest["samples"]):
        for key in ("id", "height", "width"):
            if not isinstance(entry, dict) or key not in entry:
                raise DatasetFormatError(mpath, f"samples[{i}].{key}")
    return manifest


def dataset_read(path) -> list:
    root = Path(path)
    manifest = read_manifest(root)
    samples = []
    for entry in manifest["samples"]:
        sid = entry["id"]
        image = read_raw(image_path(root, sid), np.float32)
        mask = read_mask(mask_path(root, sid))
        if image.shape != (entry["height"], entry["width"]) or mask.shape != image.shape:
            raise DatasetFormatError(image_path(root, sid), "shape",
                                     f"manifest says {entry['height']}x{entry['width']}")
        spec = PhantomSpec.from_dict(entry["spec"]) if entry.get("spec") else None
        samples.append(Sample(sid, image, mask, spec))
    return samples


def regenerate_from_manifest(path) -> list:
    """Rebuild every phantom from the specs and seeds stored in a manifest."""
    manifest = read_manifest(path)
    out = []
    for entry in manifest["samples"]:
        if not entry.get("spec"):
            raise DatasetFormatError(Path(path) / MANIFEST, f"spec of sample {entry['id']}")
        spec = PhantomSpec.from_dict(entry["spec"])
        image, mask = generate_phantom(spec)
        out.append(Sample(entry["id"], image, mask, spec))
    return out
