"""Synthetic multi-site organ segmentation data.

Every image holds five organ-like shapes (disk, ellipse, rectangle, annulus,
triangle; classes 1..5) at jittered canonical positions. Sites differ by an
intensity offset, noise level and smooth deformation strength, and each site
annotates only some of the organs: unannotated organs are folded into the
site's background in the visible masks used for training.

On-disk layout (one directory per site)::

    <root>/<site_id>/manifest.json
    <root>/<site_id>/images/{train,test}_NNN.pgm         8-bit grayscale
    <root>/<site_id>/masks_full/{train,test}_NNN.pgm     full class index per pixel
    <root>/<site_id>/masks_visible/{train,test}_NNN.pgm  merged class index per pixel

PGM files are binary P5 with the header ``b"P5\\n<W> <H>\\n255\\n"``
followed by H*W bytes in row-major order.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .labelspace import LabelSpace, PartialScheme, make_scheme

NUM_CLASSES = 6
SHAPES = ("disk", "ellipse", "rectangle", "annulus", "triangle")
# canonical centres (row, col) as fractions of the image size
CENTRES = ((0.27, 0.27), (0.27, 0.72), (0.52, 0.50), (0.75, 0.27), (0.75, 0.73))
# base intensities, background first
INTENSITY = (0.30, 0.58, 0.52, 0.42, 0.66, 0.66)
TEXTURE_AMP = 0.05
MIN_FRACTION, MAX_FRACTION = 0.01, 0.20
RETRY_BUDGET = 50


@dataclass(frozen=True)
class SiteSpec:
    site_id: str
    labeled: tuple
    n_train: int
    n_test: int
    intensity_shift: float = 0.0
    noise_sigma: float = 0.05
    deform_amp: float = 1.0
    seed: int = 0
    size: int = 64

    def __post_init__(self):
        object.__setattr__(self, "labeled", tuple(sorted(int(c) for c in self.labeled)))
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.size % 4:
            raise ValueError("size must be divisible by 4")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["labeled"] = list(self.labeled)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SiteSpec":
        return cls(**d)


@dataclass
class ClientDataset:
    images: np.ndarray  # (n, H, W) uint8
    full_masks: np.ndarray  # (n, H, W) uint8, evaluation only
    visible_masks: np.ndarray  # (n, H, W) uint8, merged labels for training
    scheme: PartialScheme
    site_id: str = ""
    split: str = "train"

    def __post_init__(self):
        if not (self.images.shape == self.full_masks.shape == self.visible_masks.shape):
            raise ValueError("image and mask shapes disagree")
        if self.full_masks.size and self.full_masks.max() >= self.scheme.num_classes:
            raise ValueError("full mask class out of range")
        if not np.array_equal(self.visible_masks, self.scheme.to_merged(self.full_masks)):
            raise ValueError("visible masks are not the full masks mapped through the scheme")

    def __len__(self) -> int:
        return self.images.shape[0]

    def inputs(self, idx=None) -> np.ndarray:
        """Network inputs (n, H, W, 1) float32."""
        img = self.images if idx is None else self.images[idx]
        return normalize(img)


@dataclass
class SiteData:
    spec: SiteSpec
    train: ClientDataset
    test: ClientDataset

    @property
    def site_id(self) -> str:
        return self.spec.site_id

    @property
    def scheme(self) -> PartialScheme:
        return self.train.scheme

    def split(self, name: str) -> ClientDataset:
        if name not in ("train", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def normalize(images_u8) -> np.ndarray:
    x = (np.asarray(images_u8, dtype=np.float32) - 127.5) / 64.0
    return x[..., None]


# ---------------------------------------------------------------- rasterisation

def _shape_mask(kind, yy, xx, cy, cx, scale, angle):
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if kind == "disk":
        return u**2 + v**2 <= (8.5 * scale) ** 2
    if kind == "ellipse":
        return (u / (10.0 * scale)) ** 2 + (v / (5.5 * scale)) ** 2 <= 1.0
    if kind == "rectangle":
        return (np.abs(u) <= 8.0 * scale) & (np.abs(v) <= 3.0 * scale)
    if kind == "annulus":
        r2 = u**2 + v**2
        return (r2 <= (7.5 * scale) ** 2) & (r2 >= (3.5 * scale) ** 2)
    if kind == "triangle":
        h = 8.5 * scale
        # isosceles, apex up in the rotated frame
        return (v <= h * 0.5) & (v >= -h) & (np.abs(u) <= (v + h) * 0.6)
    raise ValueError(kind)


def _smooth_field(rng, size, amp):
    # clipped so no image gets an extreme bias or warp
    coarse = np.clip(rng.normal(size=(5, 5)), -2.0, 2.0)
    f = ndimage.zoom(coarse, size / 5.0, order=3)[:size, :size]
    return amp * f


def _draw_label_map(rng, size, deform_amp):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if deform_amp > 0:
        yy = yy + _smooth_field(rng, size, deform_amp)
        xx = xx + _smooth_field(rng, size, deform_amp)
    labels = np.zeros((size, size), dtype=np.uint8)
    unit = size / 64.0
    for cls, (kind, (fy, fx)) in enumerate(zip(SHAPES, CENTRES), start=1):
        cy = fy * size + rng.uniform(-3, 3) * unit
        cx = fx * size + rng.uniform(-3, 3) * unit
        scale = rng.uniform(0.85, 1.15) * unit
        angle = rng.uniform(-0.5, 0.5)
        m = _shape_mask(kind, yy, xx, cy, cx, scale, angle)
        if np.any(labels[m] != 0):
            return None
        labels[m] = cls
    frac = np.bincount(labels.ravel(), minlength=NUM_CLASSES)[1:] / labels.size
    if np.any(frac < MIN_FRACTION) or np.any(frac > MAX_FRACTION):
        return None
    # a one-pixel gap keeps neighbouring organs apart
    for cls in range(1, NUM_CLASSES):
        grown = ndimage.binary_dilation(labels == cls)
        if np.any((labels[grown] != 0) & (labels[grown] != cls)):
            return None
    return labels


def _render(rng, labels, spec: SiteSpec):
    size = labels.shape[0]
    img = np.asarray(INTENSITY)[labels] + spec.intensity_shift
    img = img + _smooth_field(rng, size, TEXTURE_AMP)
    img = img + rng.normal(scale=spec.noise_sigma, size=labels.shape) if spec.noise_sigma > 0 else img
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_image(spec: SiteSpec, split: str, index: int):
    split_code = {"train": 0, "test": 1}[split]
    for attempt in range(RETRY_BUDGET):
        rng = np.random.default_rng([spec.seed, split_code, index, attempt])
        labels = _draw_label_map(rng, spec.size, spec.deform_amp)
        if labels is not None:
            return _render(rng, labels, spec), labels
    raise RuntimeError(f"{spec.site_id}: could not place shapes for {split} image {index}")


def generate_site(spec: SiteSpec, space: LabelSpace | None = None) -> SiteData:
    space = space or LabelSpace.default(NUM_CLASSES)
    scheme = make_scheme(space, spec.labeled)
    splits = {}
    for split, n in (("train", spec.n_train), ("test", spec.n_test)):
        pairs = [generate_image(spec, split, i) for i in range(n)]
        images = np.stack([p[0] for p in pairs])
        full = np.stack([p[1] for p in pairs])
        visible = scheme.to_merged(full).astype(np.uint8)
        splits[split] = ClientDataset(images, full, visible, scheme, spec.site_id, split)
    data = SiteData(spec, splits["train"], splits["test"])
    check_site(data)
    return data


def check_site(data: SiteData) -> None:
    """Generator contract: organ sizes in range and intensities separable."""
    spec = data.spec
    images = np.concatenate([data.train.images, data.test.images]).astype(np.float64) / 255.0
    full = np.concatenate([data.train.full_masks, data.test.full_masks])
    for mask in full:
        frac = np.bincount(mask.ravel(), minlength=NUM_CLASSES)[1:] / mask.size
        assert np.all((frac >= MIN_FRACTION) & (frac <= MAX_FRACTION)), frac
    bg = images[full == 0].mean()
    for cls in range(1, NUM_CLASSES):
        gap = abs(images[full == cls].mean() - bg)
        assert gap >= spec.noise_sigma, f"{spec.site_id}: class {cls} not separable ({gap:.3f})"


def default_site_specs(seed: int = 0, n_test: int = 24, size: int = 64) -> list[SiteSpec]:
    """Five sites: one fully annotated, three single-organ, one two-organ."""
    rows = [
        ("site1", (1, 2, 3, 4, 5), 24, 0.00, 0.06, 1.0),
        ("site2", (1,), 40, 0.06, 0.08, 1.5),
        ("site3", (2,), 16, -0.05, 0.07, 2.0),
        ("site4", (3,), 48, 0.03, 0.09, 1.0),
        ("site5", (4, 5), 40, -0.08, 0.08, 1.5),
    ]
    return [
        SiteSpec(sid, lab, n_tr, n_test, shift, noise, deform, seed=seed * 1000 + k, size=size)
        for k, (sid, lab, n_tr, shift, noise, deform) in enumerate(rows)
    ]


def default_benchmark(seed: int = 0, n_test: int = 24, size: int = 64) -> list[SiteData]:
    return [generate_site(s) for s in default_site_specs(seed, n_test, size)]


# ---------------------------------------------------------------- disk io

def write_pgm(path, array) -> None:
    a = np.asarray(array)
    if a.ndim != 2 or a.dtype != np.uint8:
        raise ValueError("PGM writer expects a 2D uint8 array")
    h, w = a.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + a.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError(f"{path}: unsupported PGM header")
    w, h = (int(v) for v in parts[1].split())
    body = parts[3]
    if len(body) != w * h:
        raise ValueError(f"{path}: truncated PGM body")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def save_site(data: SiteData, root) -> Path:
    site_dir = Path(root) / data.site_id
    for sub in ("images", "masks_full", "masks_visible"):
        (site_dir / sub).mkdir(parents=True, exist_ok=True)
    files = {}
    for split in ("train", "test"):
        ds = data.split(split)
        names = [f"{split}_{i:03d}.pgm" for i in range(len(ds))]
        for name, img, full, vis in zip(names, ds.images, ds.full_masks, ds.visible_masks):
            write_pgm(site_dir / "images" / name, img)
            write_pgm(site_dir / "masks_full" / name, full)
            write_pgm(site_dir / "masks_visible" / name, vis)
        files[split] = names
    manifest = {
        "site_id": data.site_id,
        "scheme": data.scheme.to_json(),
        "counts": {"train": len(data.train), "test": len(data.test)},
        "spec": data.spec.to_dict(),
        "files": files,
    }
    (site_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return site_dir


def load_site(site_dir) -> SiteData:
    site_dir = Path(site_dir)
    manifest = json.loads((site_dir / "manifest.json").read_text())
    spec = SiteSpec.from_dict(manifest["spec"])
    scheme = PartialScheme.from_json(manifest["scheme"])
    splits = {}
    for split in ("train", "test"):
        names = manifest["files"][split]
        if len(names) != manifest["counts"][split]:
            raise ValueError(f"{site_dir}: manifest counts disagree with file list")
        arrays = [
            np.stack([read_pgm(site_dir / sub / n) for n in names])
            for sub in ("images", "masks_full", "masks_visible")
        ]
        splits[split] = ClientDataset(*arrays, scheme=scheme, site_id=spec.site_id, split=split)
    return SiteData(spec, splits["train"], splits["test"])


def save_benchmark(sites, root) -> None:
    for s in sites:
        save_site(s, root)


def load_benchmark(root) -> list[SiteData]:
    root = Path(root)
    dirs = sorted(p.parent for p in root.glob("*/manifest.json"))
    if not dirs:
        raise FileNotFoundError(f"no site manifests under {root}")
    return [load_site(d) for d in dirs]
