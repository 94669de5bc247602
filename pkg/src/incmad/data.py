"""Synthetic multimodal dataset, disk layout, and corruption injections.

Each object category is a procedural texture family: a sinusoidal grating
with an object-specific orientation, frequency, and hue, painted on a dome
shaped depth foreground over a weakly tinted background. Defective test
samples replace a local patch with a rotated and rescaled grating and dent
the depth surface there; the patch region is the ground-truth mask.

All arrays are quantized to their storage precision (8-bit rgb, 16-bit
depth) at generation time, so saving to PNG and loading back is lossless.

The corruption injections reproduce the two failure modes studied by the
harness: spurious background correlation (blending another object's
background in) and redundant wide-band noise (a Perlin field added to both
modalities).
"""

from __future__ import annotations

import colorsys
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from skimage.filters import threshold_otsu

from .encoder import MultimodalSample

__all__ = [
    "perlin_noise",
    "generate_synthetic_dataset",
    "save_dataset",
    "load_dataset",
    "inject_spurious",
    "inject_redundant",
    "corrupt_dataset",
    "Dataset",
    "ObjectData",
    "AccessAudit",
    "IngestionError",
]


class IngestionError(ValueError):
    """Raised when a dataset directory fails layout or pairing validation."""


# -- Perlin noise -------------------------------------------------------------


def _fade(t: np.ndarray) -> np.ndarray:
    # quintic smoothstep: zero first and second derivative at the knots
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def _perlin_octave(h: int, w: int, cells: int, rng: np.random.Generator) -> np.ndarray:
    """One gradient-lattice octave with `cells` cells per axis, in [-1, 1]."""
    ang = rng.uniform(0.0, 2.0 * np.pi, (cells + 1, cells + 1))
    grad_y, grad_x = np.sin(ang), np.cos(ang)

    ys = np.arange(h) * (cells / h)
    xs = np.arange(w) * (cells / w)
    yi = ys.astype(int)[:, None]
    xi = xs.astype(int)[None, :]
    fy = (ys - ys.astype(int))[:, None]
    fx = (xs - xs.astype(int))[None, :]

    def corner(dy, dx):
        gy = grad_y[yi + dy, xi + dx]
        gx = grad_x[yi + dy, xi + dx]
        return gy * (fy - dy) + gx * (fx - dx)

    uy, ux = _fade(fy), _fade(fx)
    top = corner(0, 0) * (1 - ux) + corner(0, 1) * ux
    bot = corner(1, 0) * (1 - ux) + corner(1, 1) * ux
    val = top * (1 - uy) + bot * uy
    # unit gradients bound a 2-D octave by sqrt(2)/2
    return val * np.sqrt(2.0)


def perlin_noise(h: int, w: int, octaves: int = 1, seed: int = 0, res: int = 4) -> np.ndarray:
    """Multi-octave gradient noise field in [-1, 1], zero on the lattice.

    Octave o uses res*2^o lattice cells per axis at amplitude 0.5^o; the sum
    is divided by the total amplitude so the bound survives stacking.
    """
    if h < 1 or w < 1:
        raise ValueError("field must be at least 1x1")
    if octaves < 1:
        raise ValueError("octaves must be >= 1")
    rng = np.random.default_rng(seed)
    total = np.zeros((h, w))
    amp, norm, cells = 1.0, 0.0, res
    for _ in range(octaves):
        total += amp * _perlin_octave(h, w, cells, rng)
        norm += amp
        amp *= 0.5
        cells *= 2
    return total / norm


# -- quantization helpers -----------------------------------------------------


def _quantize(x: np.ndarray, levels: int) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * levels) / levels


def _q8(x: np.ndarray) -> np.ndarray:
    return _quantize(x, 255)


def _q16(x: np.ndarray) -> np.ndarray:
    return _quantize(x, 65535)


# -- synthetic rendering ------------------------------------------------------


def _object_style(k: int, n: int) -> dict:
    """Deterministic texture signature for object k of n."""
    hue = k / n
    fg = np.array(colorsys.hsv_to_rgb(hue, 0.6, 0.9))
    bg = np.array(colorsys.hsv_to_rgb(hue, 0.15, 0.8))
    return {
        "theta": np.pi * k / n,
        "freq": 4.0 + 1.4 * k,
        "fg_color": fg,
        "bg_color": bg,
    }


def _grating(size: int, theta: float, freq: float, phase: float) -> np.ndarray:
    u = np.linspace(0.0, 1.0, size, endpoint=False)
    xx, yy = np.meshgrid(u, u)
    t = xx * np.cos(theta) + yy * np.sin(theta)
    return 0.5 + 0.4 * np.sin(2.0 * np.pi * freq * t + phase)


def _render_sample(
    rng: np.random.Generator, k: int, n: int, size: int, defect: bool
) -> MultimodalSample:
    style = _object_style(k, n)
    u = np.linspace(0.0, 1.0, size, endpoint=False)
    xx, yy = np.meshgrid(u, u)

    cy = 0.5 + rng.uniform(-0.04, 0.04)
    cx = 0.5 + rng.uniform(-0.04, 0.04)
    radius = 0.34 + rng.uniform(-0.03, 0.03)
    dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    fg = dist < radius

    phase = rng.uniform(0.0, 2.0 * np.pi)
    tex = _grating(size, style["theta"], style["freq"], phase)
    rgb = np.empty((3, size, size))
    for c in range(3):
        rgb[c] = style["bg_color"][c] + rng.uniform(-0.015, 0.015, (size, size))
        rgb[c][fg] = style["fg_color"][c] * (0.3 + 0.7 * tex[fg])

    dome = np.sqrt(np.clip(1.0 - (dist / radius) ** 2, 0.0, None))
    depth = 0.05 + rng.uniform(-0.005, 0.005, (size, size))
    depth[fg] = 0.25 + 0.6 * dome[fg]

    mask = np.zeros((size, size))
    if defect:
        # a disk inside the foreground gets a rotated, rescaled grating and
        # a dent in the depth surface; the disk is the ground-truth mask
        ang = rng.uniform(0.0, 2.0 * np.pi)
        off = rng.uniform(0.0, 0.45) * radius
        py, px = cy + off * np.sin(ang), cx + off * np.cos(ang)
        prad = radius * rng.uniform(0.28, 0.42)
        pdist = np.sqrt((xx - px) ** 2 + (yy - py) ** 2)
        patch = (pdist < prad) & fg
        tex2 = _grating(
            size,
            style["theta"] + rng.uniform(0.25, 0.75) * np.pi,
            style["freq"] * rng.uniform(1.6, 2.2),
            rng.uniform(0.0, 2.0 * np.pi),
        )
        # the patch also shifts hue and darkens: contamination-style defects
        # are color- and depth-distinct, not just texture-rotated
        hue2 = (k / n + rng.uniform(0.3, 0.55)) % 1.0
        color2 = np.array(colorsys.hsv_to_rgb(hue2, 0.7, 0.8))
        for c in range(3):
            rgb[c][patch] = color2[c] * (0.15 + 0.85 * tex2[patch])
        bump = 0.5 * (1.0 + np.cos(np.pi * np.clip(pdist / prad, 0.0, 1.0)))
        depth[patch] -= 0.4 * bump[patch]
        depth = np.clip(depth, 0.02, 1.0)
        mask[patch] = 1.0

    return MultimodalSample(
        rgb=_q8(rgb),
        depth=_q16(depth)[None],
        object_id=k,
        object_name=f"object{k:02d}",
        anomaly_mask=mask[None] if defect else np.zeros((1, size, size)),
        is_anomalous=defect,
    )


# -- dataset containers -------------------------------------------------------


class AccessAudit:
    """Counts sample reads per (object, split); the incrementality witness."""

    def __init__(self):
        self.counts: Counter = Counter()

    def record(self, object_name: str, split: str, n: int = 1) -> None:
        self.counts[(object_name, split)] += n

    def count(self, object_name: str, split: str) -> int:
        return self.counts[(object_name, split)]

    def snapshot(self) -> dict:
        return dict(self.counts)


@dataclass
class ObjectData:
    name: str
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)


class Dataset:
    """In-memory dataset; all sample access goes through the audit."""

    def __init__(self, objects: list[ObjectData], image_size: int):
        if not objects:
            raise IngestionError("no objects in dataset")
        self.objects = {o.name: o for o in objects}
        self.names = [o.name for o in objects]
        self.image_size = image_size
        self.audit = AccessAudit()

    def object_id(self, name: str) -> int:
        return self.names.index(name)

    def train_samples(self, names: list[str]) -> list[MultimodalSample]:
        out = []
        for name in names:
            samples = self.objects[name].train
            self.audit.record(name, "train", len(samples))
            out.extend(samples)
        return out

    def test_samples(self, names: list[str]) -> list[MultimodalSample]:
        out = []
        for name in names:
            samples = self.objects[name].test
            self.audit.record(name, "test", len(samples))
            out.extend(samples)
        return out


def generate_synthetic_dataset(
    n_objects: int,
    per_object_train: int,
    per_object_test: int,
    image_hw: int,
    seed: int = 0,
) -> Dataset:
    """Procedural dataset of `n_objects` texture families.

    Test splits hold both good and defective samples (roughly half each,
    at least one of each) so image-level metrics are defined.
    """
    if n_objects < 1:
        raise ValueError("need at least one object")
    if per_object_train < 1:
        raise ValueError("need at least one training sample per object")
    if per_object_test < 2:
        raise ValueError("need at least two test samples per object (good and defect)")
    size = int(image_hw)
    n_defect = max(1, per_object_test // 2)
    n_good = per_object_test - n_defect

    ss = np.random.SeedSequence(seed)
    objects = []
    for k, child in enumerate(ss.spawn(n_objects)):
        rng = np.random.default_rng(child)
        train = [_render_sample(rng, k, n_objects, size, False) for _ in range(per_object_train)]
        test = [_render_sample(rng, k, n_objects, size, False) for _ in range(n_good)]
        test += [_render_sample(rng, k, n_objects, size, True) for _ in range(n_defect)]
        objects.append(ObjectData(name=f"object{k:02d}", train=train, test=test))
    return Dataset(objects, size)


# -- disk layout --------------------------------------------------------------


def _save_sample(sample: MultimodalSample, class_dir: Path, idx: int) -> None:
    rgb8 = np.round(sample.rgb * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(rgb8).save(class_dir / f"rgb_{idx:04d}.png")
    d16 = np.round(sample.depth[0] * 65535.0).astype(np.uint16)
    Image.fromarray(d16).save(class_dir / f"depth_{idx:04d}.png")
    if sample.is_anomalous:
        Image.fromarray(sample.anomaly_mask[0] > 0.5).save(class_dir / f"mask_{idx:04d}.png")


def save_dataset(dataset: Dataset, root: str | Path) -> None:
    """Writes `<object>/<train|test>/<good|defect>/{rgb,depth,mask}_####.png`.

    Masks are stored only for defective samples; good samples carry
    implicit all-zero masks.
    """
    root = Path(root)
    for name in dataset.names:
        obj = dataset.objects[name]
        for split, samples in (("train", obj.train), ("test", obj.test)):
            counters = {"good": 0, "defect": 0}
            for s in samples:
                cls = "defect" if s.is_anomalous else "good"
                class_dir = root / name / split / cls
                class_dir.mkdir(parents=True, exist_ok=True)
                _save_sample(s, class_dir, counters[cls])
                counters[cls] += 1


def _load_image(path: Path, errors: list[str], kind: str, size: int | None):
    try:
        arr = np.asarray(Image.open(path))
    except Exception as e:
        errors.append(f"{path}: unreadable ({e})")
        return None
    if size is not None and arr.shape[:2] != (size, size):
        errors.append(f"{path}: size {arr.shape[:2]} differs from {size}x{size}")
        return None
    if kind == "rgb":
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
            errors.append(f"{path}: expected 8-bit 3-channel rgb")
            return None
        return arr.astype(np.float64).transpose(2, 0, 1) / 255.0
    if kind == "depth":
        if arr.ndim != 2 or arr.dtype not in (np.uint16, np.int32):
            errors.append(f"{path}: expected 16-bit single-channel depth")
            return None
        return arr.astype(np.float64)[None] / 65535.0
    if arr.ndim != 2:
        errors.append(f"{path}: expected single-channel mask")
        return None
    return (arr.astype(np.float64) > 0).astype(np.float64)[None]


def load_dataset(root: str | Path) -> Dataset:
    """Reads the on-disk layout back; validates pairing and sizes.

    Every rgb file needs a matching depth; defect samples also need a mask;
    any stray or unreadable file fails ingestion with its path listed.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} is not a directory")
    names = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not names:
        raise IngestionError(f"no objects found under {root}")

    errors: list[str] = []
    size: int | None = None
    objects = []
    for oid, name in enumerate(names):
        obj = ObjectData(name=name)
        for split in ("train", "test"):
            split_dir = root / name / split
            if not split_dir.is_dir():
                errors.append(f"{split_dir}: missing split directory")
                continue
            for class_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
                cls = class_dir.name
                if cls not in ("good", "defect"):
                    errors.append(f"{class_dir}: unknown class directory")
                    continue
                files = sorted(p.name for p in class_dir.iterdir())
                indices = sorted(
                    int(f[4:8]) for f in files if f.startswith("rgb_") and f.endswith(".png")
                )
                expected = set()
                for i in indices:
                    expected.add(f"rgb_{i:04d}.png")
                    expected.add(f"depth_{i:04d}.png")
                    if cls == "defect":
                        expected.add(f"mask_{i:04d}.png")
                for f in files:
                    if f not in expected:
                        errors.append(f"{class_dir / f}: orphan file")
                for i in indices:
                    rgb = depth = mask = None
                    dpath = class_dir / f"depth_{i:04d}.png"
                    if not dpath.exists():
                        errors.append(f"{dpath}: missing depth for rgb_{i:04d}.png")
                    else:
                        depth = _load_image(dpath, errors, "depth", size)
                    rgb = _load_image(class_dir / f"rgb_{i:04d}.png", errors, "rgb", size)
                    if cls == "defect":
                        mpath = class_dir / f"mask_{i:04d}.png"
                        if not mpath.exists():
                            errors.append(f"{mpath}: missing mask for defect sample")
                        else:
                            mask = _load_image(mpath, errors, "mask", size)
                    if rgb is None or depth is None or (cls == "defect" and mask is None):
                        continue
                    if rgb.shape[1:] != depth.shape[1:] or (
                        mask is not None and mask.shape != depth.shape
                    ):
                        errors.append(
                            f"{class_dir}: modality sizes disagree for index {i:04d}"
                        )
                        continue
                    if size is None:
                        size = rgb.shape[1]
                    sample = MultimodalSample(
                        rgb=rgb,
                        depth=depth,
                        object_id=oid,
                        object_name=name,
                        anomaly_mask=mask if cls == "defect" else np.zeros_like(depth),
                        is_anomalous=cls == "defect",
                    )
                    (obj.train if split == "train" else obj.test).append(sample)
        objects.append(obj)

    if errors:
        raise IngestionError("dataset validation failed:\n  " + "\n  ".join(errors))
    return Dataset(objects, size)


# -- corruption injections ----------------------------------------------------


def _foreground(depth: np.ndarray) -> np.ndarray:
    """Otsu threshold on depth; the raised surface is the foreground."""
    d = depth[0]
    try:
        t = threshold_otsu(d)
    except ValueError:
        # constant depth image: everything counts as background
        return np.zeros_like(d, dtype=bool)
    return d > t


def inject_spurious(
    sample: MultimodalSample,
    source: MultimodalSample,
    strength: float,
    seed: int = 0,
) -> MultimodalSample:
    """Alpha-blends the source's background into the sample's background.

    The blend region is where both depth maps say background, so sample
    foreground pixels are returned bit-identical. Labels and masks are
    unchanged: the corruption is spurious context, not a defect.
    """
    if not 0.0 <= strength <= 1.0:
        raise ValueError("strength must lie in [0, 1]")
    if sample.rgb.shape != source.rgb.shape:
        raise ValueError("sample and source must share image size")
    if strength == 0.0:
        return replace(sample, rgb=sample.rgb.copy(), depth=sample.depth.copy())
    blend = ~_foreground(sample.depth) & ~_foreground(source.depth)
    rgb = sample.rgb.copy()
    depth = sample.depth.copy()
    rgb[:, blend] = (1.0 - strength) * sample.rgb[:, blend] + strength * source.rgb[:, blend]
    depth[:, blend] = (
        (1.0 - strength) * sample.depth[:, blend] + strength * source.depth[:, blend]
    )
    return replace(sample, rgb=rgb, depth=depth)


def inject_redundant(
    sample: MultimodalSample, intensity: float, seed: int = 0
) -> MultimodalSample:
    """Adds an intensity-scaled Perlin field to both modalities, clamped."""
    if intensity < 0.0:
        raise ValueError("intensity must be non-negative")
    if intensity == 0.0:
        return replace(sample, rgb=sample.rgb.copy(), depth=sample.depth.copy())
    h, w = sample.rgb.shape[1:]
    s1, s2 = np.random.SeedSequence(seed).spawn(2)
    f_rgb = perlin_noise(h, w, octaves=2, seed=s1)
    f_depth = perlin_noise(h, w, octaves=2, seed=s2)
    rgb = np.clip(sample.rgb + intensity * f_rgb[None], 0.0, 1.0)
    depth = np.clip(sample.depth + intensity * f_depth[None], 0.0, 1.0)
    return replace(sample, rgb=rgb, depth=depth)


def corrupt_dataset(
    dataset: Dataset,
    redundant_intensity: float = 0.0,
    spurious_strength: float = 0.0,
    seed: int = 0,
) -> Dataset:
    """Derived dataset with corrupted training splits; test data untouched.

    Spurious sources are training samples of other objects, chosen by seed.
    Corruption happens before any training, so the strict-incrementality
    audit of the training loop is unaffected.
    """
    ss = np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss)
    objects = []
    for name in dataset.names:
        obj = dataset.objects[name]
        others = [n for n in dataset.names if n != name]
        train = []
        for s in obj.train:
            out = s
            if spurious_strength > 0.0 and others:
                src_obj = dataset.objects[others[rng.integers(len(others))]]
                src = src_obj.train[rng.integers(len(src_obj.train))]
                out = inject_spurious(out, src, spurious_strength)
            if redundant_intensity > 0.0:
                out = inject_redundant(out, redundant_intensity, seed=int(rng.integers(2**31)))
            train.append(out)
        objects.append(ObjectData(name=name, train=train, test=list(obj.test)))
    return Dataset(objects, dataset.image_size)
