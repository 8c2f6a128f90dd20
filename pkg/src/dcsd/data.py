"""Image/mask datasets: a folder loader and a synthetic multi-center generator."""

from __future__ import annotations

import colorsys
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .losses import ConfigError

TEXTURE_FAMILIES = ("smooth", "granular", "striated")
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class Sample:
    image: np.ndarray  # 3 x H x W float32 in [0, 1]
    mask: np.ndarray  # 1 x H x W float32 in {0, 1}
    id: str


class SegDataset:
    """Stacked images (N,3,H,W) and masks (N,1,H,W) with string ids."""

    def __init__(self, images: np.ndarray, masks: np.ndarray, ids: list[str]):
        if len(images) != len(masks) or len(images) != len(ids):
            raise ValueError("images, masks and ids must have equal length")
        self.images = images
        self.masks = masks
        self.ids = list(ids)

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i) -> Sample:
        return Sample(self.images[i], self.masks[i], self.ids[i])

    @classmethod
    def from_samples(cls, samples: list[Sample], size: tuple[int, int] | None = None):
        if not samples:
            h, w = size or (0, 0)
            return cls(np.zeros((0, 3, h, w), np.float32), np.zeros((0, 1, h, w), np.float32), [])
        return cls(
            np.stack([s.image for s in samples]).astype(np.float32),
            np.stack([s.mask for s in samples]).astype(np.float32),
            [s.id for s in samples],
        )

    @classmethod
    def concat(cls, parts: list["SegDataset"]):
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.from_samples([])
        return cls(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.masks for p in parts]),
            [i for p in parts for i in p.ids],
        )


# ---------------------------------------------------------------- loading


def _resize_image(img: Image.Image, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    arr = np.asarray(img.convert("RGB").resize((w, h), Image.BILINEAR), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def _resize_mask(img: Image.Image, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    arr = np.asarray(img.convert("L").resize((w, h), Image.NEAREST), dtype=np.float32) / 255.0
    return (arr >= 0.5).astype(np.float32)[None]


def _stems(directory: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_EXTS}


def load_folder_dataset(images_dir, masks_dir, target_size=(256, 256), id_prefix: str = "") -> SegDataset:
    """Load matching image/mask pairs, resized to ``target_size`` (stretched, no padding).

    Images are bilinearly resized and scaled to [0, 1]; masks are
    nearest-resized and thresholded at 0.5. Ordered lexicographically by stem.
    """
    images_dir, masks_dir = Path(images_dir), Path(masks_dir)
    for d in (images_dir, masks_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"directory not found: {d}")
    images, masks = _stems(images_dir), _stems(masks_dir)
    missing = sorted(set(images) - set(masks))
    if missing:
        raise FileNotFoundError(f"images without masks in {masks_dir}: {', '.join(missing)}")
    size = tuple(int(v) for v in target_size)
    samples = []
    for stem in sorted(images):
        try:
            with Image.open(images[stem]) as im:
                image = _resize_image(im, size)
            with Image.open(masks[stem]) as mk:
                mask = _resize_mask(mk, size)
        except OSError as exc:
            raise OSError(f"cannot read pair {stem!r}: {exc}") from exc
        samples.append(Sample(image, mask, id_prefix + stem))
    return SegDataset.from_samples(samples, size)


def load_centers(root, center_ids, target_size) -> SegDataset:
    """Concatenate ``<root>/<center>/{images,masks}`` for each center; ids are ``center/stem``."""
    root = Path(root)
    return SegDataset.concat(
        [load_folder_dataset(root / c / "images", root / c / "masks", target_size, id_prefix=f"{c}/") for c in center_ids]
    )


def make_batches(n: int, batch_size: int, order_seed: int) -> list[np.ndarray]:
    """Seeded permutation of ``range(n)`` cut into batches; the short tail batch is kept."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    perm = np.random.default_rng(order_seed).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


# ---------------------------------------------------------------- synthesis


@dataclass
class ShiftConfig:
    hue_shift: float = 0.0  # degrees
    blob_scale: tuple[float, float] = (0.02, 0.10)
    texture_family: str = "smooth"
    noise_sigma: float = 0.03
    vignette: float = 0.3

    def __post_init__(self):
        self.blob_scale = tuple(float(v) for v in self.blob_scale)
        lo, hi = self.blob_scale
        if not (0 < lo <= hi < 0.5):
            raise ConfigError(f"blob_scale must satisfy 0 < min <= max < 0.5, got {self.blob_scale}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 0 <= self.vignette <= 1:
            raise ConfigError("vignette must lie in [0, 1]")
        if self.texture_family not in TEXTURE_FAMILIES:
            raise ConfigError(f"texture_family must be one of {TEXTURE_FAMILIES}")


@dataclass
class SplitPlan:
    train_centers: list[str]
    test_centers: list[str]
    per_center_count: int | dict[str, int] = 40

    def __post_init__(self):
        overlap = set(self.train_centers) & set(self.test_centers)
        if overlap:
            raise ConfigError(f"train and test centers overlap: {sorted(overlap)}")
        if isinstance(self.per_center_count, dict):
            if any(v < 0 for v in self.per_center_count.values()):
                raise ConfigError("per_center_count must be >= 0")
        elif self.per_center_count < 0:
            raise ConfigError("per_center_count must be >= 0")

    @property
    def centers(self) -> list[str]:
        return list(self.train_centers) + list(self.test_centers)

    def count(self, center: str) -> int:
        if isinstance(self.per_center_count, dict):
            return int(self.per_center_count[center])
        return int(self.per_center_count)


def default_shifts() -> dict[str, ShiftConfig]:
    """Five training centers plus one visually distinct unseen center."""
    return {
        "c1": ShiftConfig(0.0, (0.02, 0.10), "smooth", 0.03, 0.30),
        "c2": ShiftConfig(15.0, (0.03, 0.12), "granular", 0.04, 0.20),
        "c3": ShiftConfig(-15.0, (0.02, 0.08), "striated", 0.02, 0.40),
        "c4": ShiftConfig(30.0, (0.04, 0.14), "smooth", 0.05, 0.10),
        "c5": ShiftConfig(-30.0, (0.02, 0.10), "granular", 0.03, 0.50),
        "c6": ShiftConfig(50.0, (0.02, 0.12), "striated", 0.06, 0.60),
    }


def default_plan(per_center_count=40) -> SplitPlan:
    return SplitPlan(["c1", "c2", "c3", "c4", "c5"], ["c6"], per_center_count)


def _sample_rng(seed: int, center: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(center.encode()), int(index)]))


def _hue_rgb(hue_deg: float, sat: float, val: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb((hue_deg % 360.0) / 360.0, sat, val), dtype=np.float64)


def _texture(rng, family: str, h: int, w: int) -> np.ndarray:
    if family == "smooth":
        t = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=max(h, w) / 8, mode="wrap")
    elif family == "granular":
        t = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=1.0, mode="wrap")
    else:
        yy, xx = np.mgrid[0:h, 0:w]
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(4, 10) * max(h, w) / 64
        t = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + rng.uniform(0, 2 * np.pi))
    t = t - t.mean()
    return t / (np.abs(t).max() + 1e-12)


def _blob_mask(rng, h: int, w: int, lo: float, hi: float) -> np.ndarray:
    """Union of 1-3 rotated ellipses, each with area fraction in [lo, hi]."""
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        frac = rng.uniform(lo, hi)
        ratio = rng.uniform(0.6, 1.0)
        area = frac * h * w
        a = np.sqrt(area / (np.pi * ratio))  # semi-major, pixels
        b = a * ratio
        theta = rng.uniform(0, np.pi)
        ext_x = np.sqrt((a * np.cos(theta)) ** 2 + (b * np.sin(theta)) ** 2)
        ext_y = np.sqrt((a * np.sin(theta)) ** 2 + (b * np.cos(theta)) ** 2)
        cx = rng.uniform(ext_x + 1, w - ext_x - 1)
        cy = rng.uniform(ext_y + 1, h - ext_y - 1)
        dx, dy = xx - cx, yy - cy
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        mask |= (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return mask


def synth_sample(seed: int, center: str, index: int, shift: ShiftConfig, size=(64, 64)):
    """Render one (image HxWx3 uint8, mask HxW uint8 {0,255}) pair."""
    h, w = size
    rng = _sample_rng(seed, center, index)
    lo, hi = shift.blob_scale
    # rasterization can push coverage just outside [lo, 3*hi]; redraw until inside
    for _ in range(100):
        mask = _blob_mask(rng, h, w, lo, hi)
        cover = mask.mean()
        if lo <= cover <= 3 * hi:
            break
    else:
        raise RuntimeError(f"could not draw a mask within coverage bounds for {center}/{index}")

    base_hue = 10.0 + shift.hue_shift
    bg = _hue_rgb(base_hue + rng.normal(0, 4), 0.55, 0.75)
    fg = _hue_rgb(base_hue - 12 + rng.normal(0, 4), 0.75, 0.55)
    tex = _texture(rng, shift.texture_family, h, w)
    shade = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=max(h, w) / 6, mode="wrap")
    shade = 0.08 * shade / (np.abs(shade).max() + 1e-12)

    soft = ndimage.gaussian_filter(mask.astype(np.float64), sigma=0.7)
    bump = ndimage.gaussian_filter(mask.astype(np.float64), sigma=max(h, w) / 24)
    img = bg[None, None, :] * (1 + 0.12 * tex[..., None] + shade[..., None])
    polyp = fg[None, None, :] * (1 + 0.08 * tex[..., None] + 0.35 * bump[..., None])
    img = img * (1 - soft[..., None]) + polyp * soft[..., None]

    yy, xx = np.mgrid[0:h, 0:w]
    r2 = ((yy - h / 2) / (h / 2)) ** 2 + ((xx - w / 2) / (w / 2)) ** 2
    img = img * (1 - 0.5 * shift.vignette * np.clip(r2, 0, 2))[..., None]
    img = img + rng.normal(0, shift.noise_sigma, img.shape)
    img = (np.clip(img, 0, 1) * 255).round().astype(np.uint8)
    return img, (mask.astype(np.uint8) * 255)


def generate_synthetic_corpus(root, plan: SplitPlan, shifts: dict[str, ShiftConfig], seed: int = 0, size=(64, 64)) -> Path:
    """Write ``<root>/<center>/{images,masks}/NNNN.png`` for every center plus ``manifest.json``.

    Output is a pure function of (seed, plan, shifts, size).
    """
    root = Path(root)
    missing = [c for c in plan.centers if c not in shifts]
    if missing:
        raise ConfigError(f"no ShiftConfig for centers {missing}")
    size = tuple(int(v) for v in size)
    for center in plan.centers:
        img_dir, mask_dir = root / center / "images", root / center / "masks"
        img_dir.mkdir(parents=True, exist_ok=True)
        mask_dir.mkdir(parents=True, exist_ok=True)
        for i in range(plan.count(center)):
            img, mask = synth_sample(seed, center, i, shifts[center], size)
            Image.fromarray(img, "RGB").save(img_dir / f"{i:04d}.png")
            Image.fromarray(mask, "L").save(mask_dir / f"{i:04d}.png")
    manifest = corpus_manifest(plan, shifts, seed, size)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def corpus_manifest(plan: SplitPlan, shifts, seed, size) -> dict:
    return {
        "generator": "dcsd.synthetic",
        "version": 1,
        "seed": int(seed),
        "size": list(size),
        "plan": asdict(plan),
        "shifts": {k: asdict(v) for k, v in sorted(shifts.items()) if k in plan.centers},
    }
