"""Procedural generator of paired source/target segmentation domains.

Scenes are layered 2-D renderings (sky background, ground plane, boxes,
discs, stripes) with labels taken from the z-buffer. The target domain is
the same scene distribution passed through an appearance shift (per-class
hue rotation, brightness/contrast, noise, texture); geometry never changes,
so the domain gap is purely covariate.

Datasets are written as binary PPM/PGM files with a manifest.json.
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

CLASS_NAMES = ("background", "ground", "box", "disc", "stripe")
NUM_CLASSES = len(CLASS_NAMES)
IGNORE_LABEL = 255

# canonical (source-domain) base colors, RGB in [0,1]
_BASE_COLORS = np.array([
    [0.55, 0.70, 0.90],   # background: sky blue
    [0.45, 0.35, 0.20],   # ground: brown
    [0.85, 0.25, 0.20],   # box: red
    [0.20, 0.70, 0.30],   # disc: green
    [0.90, 0.85, 0.25],   # stripe: yellow
])


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    box_count: tuple = (1, 3)
    disc_count: tuple = (1, 3)
    stripe_count: tuple = (1, 2)
    size_range: tuple = (8, 22)
    seed: int = 0


@dataclass
class DomainShift:
    hue_deg: list = field(default_factory=lambda: [0.0] * NUM_CLASSES)
    brightness: float = 0.0
    contrast: float = 1.0
    noise_sigma: float = 0.0
    texture: bool = False

    def is_identity(self):
        return (all(h == 0.0 for h in self.hue_deg) and self.brightness == 0.0
                and self.contrast == 1.0 and self.noise_sigma == 0.0
                and not self.texture)


def default_shift():
    """Benchmark appearance gap: strong enough to degrade a source-only model."""
    return DomainShift(hue_deg=[55.0, 65.0, 38.0, 50.0, 35.0],
                       brightness=-0.08, contrast=1.3,
                       noise_sigma=0.035, texture=True)


@dataclass
class Sample:
    image: np.ndarray          # [3,H,W] float64 in [0,1]
    labels: np.ndarray | None  # [H,W] uint8, None for unlabeled target
    domain: str = "source"


# -- scene rendering ---------------------------------------------------------

def _draw_scene(spec, rng):
    """One layered scene: returns (image [3,H,W], labels [H,W])."""
    h, w = spec.height, spec.width
    labels = np.zeros((h, w), dtype=np.uint8)
    img = np.empty((3, h, w))

    def jitter(cls):
        return np.clip(_BASE_COLORS[cls] + rng.uniform(-0.06, 0.06, 3), 0, 1)

    img[:] = jitter(0)[:, None, None]
    horizon = int(rng.uniform(0.45, 0.70) * h)
    img[:, horizon:, :] = jitter(1)[:, None, None]
    labels[horizon:, :] = 1

    yy, xx = np.mgrid[0:h, 0:w]
    lo, hi = spec.size_range

    def paint(mask, cls):
        col = jitter(cls)
        img[:, mask] = col[:, None]
        labels[mask] = cls

    for _ in range(rng.integers(spec.box_count[0], spec.box_count[1] + 1)):
        bw = int(rng.integers(lo, hi + 1))
        bh = int(rng.integers(lo, hi + 1))
        x0 = int(rng.integers(0, max(1, w - bw)))
        y0 = int(rng.integers(0, max(1, h - bh)))
        paint((yy >= y0) & (yy < y0 + bh) & (xx >= x0) & (xx < x0 + bw), 2)
    for _ in range(rng.integers(spec.disc_count[0], spec.disc_count[1] + 1)):
        r = int(rng.integers(lo, hi + 1)) / 2.0
        cx = rng.uniform(r, w - r)
        cy = rng.uniform(r, h - r)
        paint((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r, 3)
    for _ in range(rng.integers(spec.stripe_count[0], spec.stripe_count[1] + 1)):
        thickness = max(2, int(rng.integers(lo, hi + 1)) // 4)
        angle = rng.uniform(0, np.pi)
        offset = rng.uniform(-0.5, 0.5) * (h + w) / 2
        dist = np.abs((xx - w / 2) * np.sin(angle)
                      - (yy - h / 2) * np.cos(angle) - offset)
        paint(dist < thickness / 2.0, 4)
    return img, labels


def render_scene(spec, index):
    """Deterministic scene geometry for one index, shared by both domains.

    Rejects draws where a requested object class vanished entirely (full
    occlusion) so that every non-background class stays frequent.
    """
    for attempt in range(8):
        rng = np.random.default_rng(
            np.random.SeedSequence([spec.seed, 0xda7a, index, attempt]))
        img, labels = _draw_scene(spec, rng)
        present = np.bincount(labels.ravel(), minlength=NUM_CLASSES) > 0
        wanted = [spec.box_count[0] > 0, spec.disc_count[0] > 0,
                  spec.stripe_count[0] > 0]
        if all(p or not want for p, want in zip(present[2:], wanted)):
            return img, labels
    return img, labels


def _hue_matrix(deg):
    theta = np.deg2rad(deg)
    c, s = np.cos(theta), np.sin(theta)
    third = (1.0 - c) / 3.0
    sq = s / np.sqrt(3.0)
    return np.array([[c + third, third - sq, third + sq],
                     [third + sq, c + third, third - sq],
                     [third - sq, third + sq, c + third]])


def apply_shift(img, labels, shift, rng):
    """Appearance transform; identity shift returns the image unchanged."""
    if shift.is_identity():
        return img
    out = img.copy()
    for cls in range(NUM_CLASSES):
        deg = shift.hue_deg[cls]
        if deg == 0.0:
            continue
        mask = labels == cls
        if mask.any():
            out[:, mask] = _hue_matrix(deg) @ out[:, mask]
    out = (out - 0.5) * shift.contrast + 0.5 + shift.brightness
    if shift.texture:
        h, w = labels.shape
        yy, xx = np.mgrid[0:h, 0:w]
        out *= 1.0 + 0.10 * np.sin(2 * np.pi * xx / 9.0) * np.sin(2 * np.pi * yy / 9.0)
    if shift.noise_sigma > 0:
        out += rng.normal(0.0, shift.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def render(spec, shift, index, domain="source"):
    """Pure function of (spec, shift, index): one quantized Sample."""
    if index < 0:
        raise ValueError("index must be >= 0")
    img, labels = render_scene(spec, index)
    rng = np.random.default_rng(
        np.random.SeedSequence([spec.seed, 0x50f7, index]))
    img = apply_shift(img, labels, shift, rng)
    img = _quantize(img)
    return Sample(img, labels.copy(), domain)


def _quantize(img):
    """Round-trip through 8-bit so in-memory and on-disk pixels agree."""
    return np.round(np.clip(img, 0, 1) * 255.0) / 255.0


def augment(sample, rng):
    """Horizontal mirror with probability 0.5; labels flip with the image."""
    if rng.random() < 0.5:
        labels = None if sample.labels is None else sample.labels[:, ::-1].copy()
        return Sample(sample.image[:, :, ::-1].copy(), labels, sample.domain)
    return sample


# -- PPM / PGM I/O -----------------------------------------------------------

def write_ppm(path, img):
    data = np.round(np.clip(img, 0, 1) * 255.0).astype(np.uint8)
    h, w = data.shape[1], data.shape[2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.transpose(1, 2, 0).tobytes())


def read_ppm(path):
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P6":
            raise ValueError(f"{path}: not a binary PPM")
        w, h = map(int, f.readline().split())
        f.readline()  # maxval
        data = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def write_pgm(path, labels):
    h, w = labels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(labels.astype(np.uint8)).tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P5":
            raise ValueError(f"{path}: not a binary PGM")
        w, h = map(int, f.readline().split())
        f.readline()
        data = np.frombuffer(f.read(w * h), dtype=np.uint8)
    return data.reshape(h, w).copy()


def generate_split(spec, shift, n_source, n_target, n_val, out_dir, seed=None):
    """Write a source/target/val dataset to disk, deterministic in the seed.

    Source and target draws at the same index share scene geometry; with an
    identity shift the matched renderings are pixel-identical. Validation
    samples are independent target-domain draws with labels kept.
    """
    if min(n_source, n_target, n_val) < 1:
        raise ValueError("all split counts must be >= 1")
    if seed is not None:
        spec = dataclasses.replace(spec, seed=seed)
    identity = DomainShift()
    roles = {
        "source": (n_source, identity, 0, True),
        "target": (n_target, shift, 0, False),
        "val": (n_val, shift, 1_000_000, True),
    }
    for role, (count, role_shift, offset, with_labels) in roles.items():
        img_dir = os.path.join(out_dir, role, "images")
        os.makedirs(img_dir, exist_ok=True)
        if with_labels:
            os.makedirs(os.path.join(out_dir, role, "labels"), exist_ok=True)
        for i in range(count):
            s = render(spec, role_shift, offset + i, role)
            write_ppm(os.path.join(img_dir, f"{i:06d}.ppm"), s.image)
            if with_labels:
                write_pgm(os.path.join(out_dir, role, "labels", f"{i:06d}.pgm"),
                          s.labels)
    manifest = {
        "spec": asdict(spec),
        "shift": asdict(shift),
        "seed": spec.seed,
        "counts": {"source": n_source, "target": n_target, "val": n_val},
        "classes": list(CLASS_NAMES),
    }
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest_path


def load_split(root, role):
    """Load all samples of one role into memory."""
    img_dir = os.path.join(root, role, "images")
    if not os.path.isdir(img_dir):
        raise FileNotFoundError(f"missing split directory {img_dir}")
    lab_dir = os.path.join(root, role, "labels")
    samples = []
    for name in sorted(os.listdir(img_dir)):
        if not name.endswith(".ppm"):
            continue
        img = read_ppm(os.path.join(img_dir, name))
        lab_path = os.path.join(lab_dir, name[:-4] + ".pgm")
        labels = read_pgm(lab_path) if os.path.isfile(lab_path) else None
        samples.append(Sample(img, labels, role))
    if not samples:
        raise FileNotFoundError(f"no samples found in {img_dir}")
    return samples
