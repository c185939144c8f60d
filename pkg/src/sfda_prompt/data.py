"""Synthetic nested-ellipse segmentation domains and on-disk datasets.

Each sample is an outer ellipse (class 0) containing an inner ellipse
(class 1) on a textured background. Domains differ only by a style
transform concentrated in low spatial frequencies.
"""
import hashlib
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import _binary
from .errors import BadMagicError, FormatError, RejectedInputError, VersionError

TENSOR_MAGIC = b"TNSR"
TENSOR_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class DomainSpec:
    bias_amplitude: float = 0.0
    bias_orientation: float = 0.0
    brightness: float = 0.0
    contrast: float = 1.0
    noise_sigma: float = 0.0
    blur_radius: int = 0

    def __post_init__(self):
        if self.contrast <= 0:
            raise RejectedInputError(f"contrast must be positive, got {self.contrast}")
        if self.noise_sigma < 0:
            raise RejectedInputError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.blur_radius < 0:
            raise RejectedInputError(f"blur_radius must be >= 0, got {self.blur_radius}")


IDENTITY_STYLE = DomainSpec()

# Desk benchmark: two mildly styled sources and one strongly shifted target.
DOMAIN_PRESETS = {
    "source_a": DomainSpec(bias_amplitude=0.15, bias_orientation=0.0, brightness=0.0,
                           contrast=1.0, noise_sigma=0.005, blur_radius=0),
    "source_b": DomainSpec(bias_amplitude=0.15, bias_orientation=np.pi / 2, brightness=0.1,
                           contrast=0.8, noise_sigma=0.005, blur_radius=0),
    "target": DomainSpec(bias_amplitude=0.4, bias_orientation=np.pi / 4, brightness=-0.2,
                         contrast=1.4, noise_sigma=0.03, blur_radius=1),
}


@dataclass
class Sample:
    image: np.ndarray  # (H, W, C) float32
    masks: np.ndarray  # (H, W, num_classes) uint8, class 0 outer, class 1 inner


@dataclass
class DatasetManifest:
    domain: str
    split: str
    count: int
    height: int
    width: int
    channels: int
    classes: int
    seed: int
    checksums: dict


# --------------------------------------------------------------- generation

def _ellipse(h, w, cy, cx, ay, ax, angle):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def _render(rng, h, w, channels):
    """Base image (H, W, C) and masks (H, W, 2) for one sample."""
    side = min(h, w)
    cy = h / 2 + rng.uniform(-0.12, 0.12) * h
    cx = w / 2 + rng.uniform(-0.12, 0.12) * w
    ay, ax = rng.uniform(0.16, 0.28, size=2) * side
    angle = rng.uniform(0, np.pi)
    ratio = rng.uniform(0.4, 0.6)
    # inner centre stays well inside the outer ellipse
    off = rng.uniform(-0.2, 0.2, size=2) * np.array([ay, ax]) * (1 - ratio)
    outer = _ellipse(h, w, cy, cx, ay, ax, angle)
    inner = _ellipse(h, w, cy + off[0], cx + off[1], ay * ratio, ax * ratio, angle) & outer

    background = rng.uniform(0.15, 0.3)
    texture = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=1.5, mode="wrap")
    texture *= 0.06 / max(texture.std(), 1e-12)
    base = np.full((h, w), background) + texture
    base[outer] += rng.uniform(0.3, 0.4)
    base[inner] += rng.uniform(0.25, 0.35)
    base = ndimage.gaussian_filter(base, sigma=0.7, mode="nearest")
    image = np.repeat(base[:, :, None], channels, axis=2)
    masks = np.stack([outer, inner], axis=2).astype(np.uint8)
    return image, masks


def bias_field(h, w, amplitude, orientation):
    """``amplitude * cos(2*pi*u)`` with ``u`` a unit-period planar ramp."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    u = np.cos(orientation) * (xx / w) + np.sin(orientation) * (yy / h)
    return amplitude * np.cos(2 * np.pi * u)


def apply_domain_style(image, spec, seed, stages=("affine", "blur", "noise")):
    """Contrast/bias/brightness, then Gaussian blur, then additive noise.

    ``image`` is (H, W, C). ``stages`` exists so tests can isolate the
    analytic affine stage.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    out = image
    if "affine" in stages:
        field = bias_field(h, w, spec.bias_amplitude, spec.bias_orientation)
        out = spec.contrast * (out * (1.0 + field[:, :, None])) + spec.brightness
    if "blur" in stages and spec.blur_radius > 0:
        sigma = spec.blur_radius / 2.0
        out = np.stack([ndimage.gaussian_filter(out[:, :, c], sigma=sigma, mode="nearest", truncate=2.0)
                        for c in range(out.shape[2])], axis=2)
    if "noise" in stages and spec.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        out = out + rng.standard_normal(out.shape) * spec.noise_sigma
    return out


def normalize_image(image, label="image"):
    image = np.asarray(image, dtype=np.float64)
    mean = image.mean(axis=(0, 1), keepdims=True)
    std = image.std(axis=(0, 1), keepdims=True)
    if np.any(std < 1e-12):
        raise RejectedInputError(f"{label} has a zero-variance channel and cannot be normalized")
    return (image - mean) / std


def normalize_dataset(samples):
    """Per-image, per-channel standardization; masks are left untouched."""
    samples = list(samples)
    if not samples:
        raise RejectedInputError("normalize_dataset needs at least one sample")
    return [Sample(normalize_image(s.image, f"sample {i}").astype(np.float32), s.masks)
            for i, s in enumerate(samples)]


def gen_domain(spec, n, shape=(64, 64, 1), seed=0, divisor=4):
    """Generate ``n`` styled, normalized samples; bit-identical per (spec, n, seed)."""
    h, w, c = shape
    if n < 1:
        raise RejectedInputError(f"need at least one sample, got n={n}")
    if h < 8 or w < 8 or c < 1 or h % divisor or w % divisor:
        raise RejectedInputError(f"image shape {shape} must have sides >= 8 divisible by {divisor}")
    samples = []
    for i in range(n):
        rng = np.random.default_rng([seed, i, 0])
        image, masks = _render(rng, h, w, c)
        styled = apply_domain_style(image, spec, seed=[seed, i, 1])
        samples.append(Sample(styled, masks))
    return normalize_dataset(samples)


def stack_images(samples):
    """(N, C, H, W) float32 batch from samples."""
    return np.ascontiguousarray(np.stack([s.image for s in samples]).transpose(0, 3, 1, 2), dtype=np.float32)


def stack_masks(samples):
    return np.ascontiguousarray(np.stack([s.masks for s in samples]).transpose(0, 3, 1, 2), dtype=np.float32)


# -------------------------------------------------------------- tensor files

def tensor_to_bytes(arr):
    return TENSOR_MAGIC + struct.pack("<H", TENSOR_VERSION) + _binary.pack_array(arr)


def tensor_from_bytes(buf, source="<bytes>"):
    r = _binary.Reader(buf, source)
    magic = r.take(4, "magic")
    if magic != TENSOR_MAGIC:
        raise BadMagicError(f"{source}: bad magic {magic!r}, expected {TENSOR_MAGIC!r}")
    (version,) = r.unpack("<H", "version")
    if version != TENSOR_VERSION:
        raise VersionError(f"{source}: unsupported tensor version {version}")
    arr = r.array()
    if not r.at_end():
        raise FormatError(f"{source}: {len(r.buf) - r.pos} trailing bytes after payload")
    return arr


def io_tensor(path, action, tensor=None):
    """Read or write one float32 tensor file (magic ``TNSR``)."""
    path = Path(path)
    if action == "write":
        if tensor is None:
            raise RejectedInputError("io_tensor write needs a tensor")
        path.write_bytes(tensor_to_bytes(tensor))
        return None
    if action == "read":
        return tensor_from_bytes(path.read_bytes(), source=str(path))
    raise RejectedInputError(f"unknown io_tensor action {action!r}")


# ------------------------------------------------------------ dataset layout

def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_split(root, domain, split, samples, seed):
    """Write ``<root>/<domain>/<split>/{images,masks}/NNNN.tns`` plus manifest.txt."""
    if split not in SPLITS:
        raise RejectedInputError(f"unknown split {split!r}")
    if not samples:
        raise RejectedInputError("refusing to write an empty split")
    base = Path(root) / domain / split
    (base / "images").mkdir(parents=True, exist_ok=True)
    (base / "masks").mkdir(parents=True, exist_ok=True)
    checksums = {}
    for i, s in enumerate(samples):
        for kind, arr in (("images", s.image), ("masks", s.masks.astype(np.float32))):
            rel = f"{kind}/{i:04d}.tns"
            io_tensor(base / rel, "write", arr)
            checksums[rel] = _sha256(base / rel)
    h, w, c = samples[0].image.shape
    manifest = DatasetManifest(domain, split, len(samples), h, w, c, samples[0].masks.shape[2], seed, checksums)
    write_manifest(base / "manifest.txt", manifest)
    return manifest


def write_manifest(path, manifest):
    lines = []
    for key, value in asdict(manifest).items():
        if key == "checksums":
            lines.extend(f"sha256.{rel}={digest}" for rel, digest in sorted(value.items()))
        else:
            lines.append(f"{key}={value}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing dataset manifest {path}")
    values, checksums = {}, {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        if key.startswith("sha256."):
            checksums[key[len("sha256."):]] = value
        else:
            values[key] = value
    try:
        return DatasetManifest(
            domain=values["domain"], split=values.get("split", "train"), count=int(values["count"]),
            height=int(values["height"]), width=int(values["width"]), channels=int(values["channels"]),
            classes=int(values["classes"]), seed=int(values["seed"]), checksums=checksums,
        )
    except KeyError as exc:
        raise FormatError(f"{path}: manifest lacks key {exc.args[0]}") from None


def load_split(root, domain, split, verify=True):
    """Load a split written by :func:`save_split`; returns (samples, manifest)."""
    base = Path(root) / domain / split
    manifest = read_manifest(base / "manifest.txt")
    samples = []
    for i in range(manifest.count):
        image_rel, mask_rel = f"images/{i:04d}.tns", f"masks/{i:04d}.tns"
        for rel in (image_rel, mask_rel):
            if not (base / rel).exists():
                raise FormatError(f"{base}: manifest lists {manifest.count} samples but {rel} is missing")
            if verify and rel in manifest.checksums and _sha256(base / rel) != manifest.checksums[rel]:
                raise FormatError(f"{base / rel}: checksum mismatch")
        image = io_tensor(base / image_rel, "read")
        masks = io_tensor(base / mask_rel, "read").astype(np.uint8)
        samples.append(Sample(image, masks))
    return samples, manifest
