"""Per-modality feature extraction and feature-jitter anomaly synthesis.

Each modality (rgb, depth) gets its own 4-stage convolutional encoder: every
stage is a 3x3 same-padded convolution, ReLU, then 2x average pooling. The
stages yield a feature pyramid at 1/2, 1/4, 1/8, 1/16 of the input
resolution. Training synthesizes pseudo-anomalies by injecting Gaussian
noise into the pyramid (feature jitter), recording the perturbed region as
a mask per level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "MultimodalSample",
    "FeaturePyramid",
    "PyramidEncoder",
    "JitterSpec",
    "feature_jitter",
    "init_conv_weight",
]

LEVELS = (1, 2, 3, 4)


@dataclass
class MultimodalSample:
    """One aligned rgb/depth observation with optional defect ground truth."""

    rgb: np.ndarray  # (3, H, W) in [0, 1]
    depth: np.ndarray  # (1, H, W) in [0, 1]
    object_id: int
    object_name: str = ""
    anomaly_mask: np.ndarray | None = None  # (1, H, W) in {0, 1}
    is_anomalous: bool = False

    def __post_init__(self):
        if self.rgb.shape[0] != 3 or self.depth.shape[0] != 1:
            raise ValueError("rgb must be (3,H,W) and depth (1,H,W)")
        if self.rgb.shape[1:] != self.depth.shape[1:]:
            raise ValueError("rgb and depth must share spatial dims")
        if self.anomaly_mask is not None:
            if self.anomaly_mask.shape != self.depth.shape:
                raise ValueError("mask must be (1,H,W)")
            has_defect = bool(self.anomaly_mask.max() > 0)
            if has_defect != self.is_anomalous:
                raise ValueError("is_anomalous inconsistent with mask contents")


@dataclass
class FeaturePyramid:
    """Levels 1..4 of one modality; level i has spatial extent H/2^i."""

    levels: dict[int, Tensor] = field(default_factory=dict)

    def __getitem__(self, i: int) -> Tensor:
        return self.levels[i]

    def detached(self) -> "FeaturePyramid":
        return FeaturePyramid({i: t.detach() for i, t in self.levels.items()})


def init_conv_weight(rng: np.random.Generator, co: int, ci: int, k: int) -> np.ndarray:
    """He-style init scaled by fan-in."""
    std = np.sqrt(2.0 / (ci * k * k))
    return rng.standard_normal((co, ci, k, k)) * std


class PyramidEncoder:
    """4-stage conv/ReLU/avg-pool encoder for one modality."""

    def __init__(
        self,
        in_channels: int,
        rng: np.random.Generator,
        channels: tuple[int, ...] = (16, 32, 64, 128),
        name: str = "enc",
    ):
        if len(channels) != 4:
            raise ValueError("encoder needs exactly 4 stage widths")
        self.channels = tuple(int(c) for c in channels)
        self.name = name
        self.params: dict[str, Tensor] = {}
        ci = in_channels
        for i, co in enumerate(self.channels, start=1):
            self.params[f"{name}.conv{i}.w"] = Tensor(
                init_conv_weight(rng, co, ci, 3), requires_grad=True
            )
            ci = co

    def encode(self, x: Tensor) -> FeaturePyramid:
        """(B, C0, H, W) -> 4-level pyramid; H and W must be divisible by 16."""
        _, _, h, w = x.shape
        if h % 16 or w % 16:
            raise ValueError(f"input spatial dims must be divisible by 16, got {h}x{w}")
        pyr = FeaturePyramid()
        cur = x
        for i in range(1, 5):
            cur = ad.conv2d(cur, self.params[f"{self.name}.conv{i}.w"])
            cur = ad.relu(cur)
            cur = ad.avg_pool2d(cur)
            pyr.levels[i] = cur
        return pyr


@dataclass
class JitterSpec:
    """Noise scale plus an optional relative rectangle (y0, x0, y1, x1)."""

    alpha: float
    region: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("jitter alpha must be nonnegative")
        if self.region is not None:
            y0, x0, y1, x1 = self.region
            if not (0 <= y0 < y1 <= 1 and 0 <= x0 < x1 <= 1):
                raise ValueError("jitter region must be a nonempty relative rect")


def _region_slice(extent: int, lo: float, hi: float) -> slice:
    a = int(np.floor(lo * extent))
    b = int(np.ceil(hi * extent))
    return slice(max(a, 0), min(max(b, a + 1), extent))


def feature_jitter(
    pyramid: FeaturePyramid,
    specs: "JitterSpec | list[JitterSpec]",
    rng: np.random.Generator,
) -> tuple[FeaturePyramid, dict[int, np.ndarray]]:
    """Inject Gaussian noise of std alpha*mean(|level|) inside each region.

    ``specs`` is one spec applied to every sample or a per-sample list.
    Returns the perturbed pyramid and per-level {0,1} masks of shape
    (B, h, w) marking jittered cells. alpha == 0 leaves a sample unchanged.
    The noise enters through the graph, so gradients still reach the
    encoder through the jittered path.
    """
    first = next(iter(pyramid.levels.values()))
    bsz = first.shape[0]
    if isinstance(specs, JitterSpec):
        spec_list = [specs] * bsz
    else:
        spec_list = list(specs)
        if len(spec_list) != bsz:
            raise ValueError(f"need {bsz} specs, got {len(spec_list)}")

    out = FeaturePyramid()
    masks: dict[int, np.ndarray] = {}
    for i, level in pyramid.levels.items():
        b, c, h, w = level.shape
        mask = np.zeros((b, h, w))
        noise = np.zeros(level.shape)
        touched = False
        for bi, spec in enumerate(spec_list):
            if spec.alpha == 0.0:
                continue
            if spec.region is None:
                ys, xs = slice(0, h), slice(0, w)
            else:
                y0, x0, y1, x1 = spec.region
                ys = _region_slice(h, y0, y1)
                xs = _region_slice(w, x0, x1)
            mask[bi, ys, xs] = 1.0
            std = spec.alpha * float(np.abs(level.data[bi]).mean())
            noise[bi, :, ys, xs] = rng.normal(
                0.0, std, size=(c, ys.stop - ys.start, xs.stop - xs.start)
            )
            touched = True
        out.levels[i] = ad.add(level, Tensor(noise)) if touched else level
        masks[i] = mask
    return out, masks


def sample_jitter_spec(rng: np.random.Generator, prob: float = 0.5) -> JitterSpec:
    """Training-time draw: with ``prob``, alpha ~ U(0.5, 2) on a random
    rectangle covering 10-40% of the map; otherwise no jitter."""
    if rng.random() >= prob:
        return JitterSpec(alpha=0.0)
    alpha = float(rng.uniform(0.5, 2.0))
    area = float(rng.uniform(0.10, 0.40))
    aspect = float(rng.uniform(0.5, 2.0))
    dy = min(1.0, np.sqrt(area * aspect))
    dx = min(1.0, area / dy)
    y0 = float(rng.uniform(0.0, 1.0 - dy))
    x0 = float(rng.uniform(0.0, 1.0 - dx))
    return JitterSpec(alpha=alpha, region=(y0, x0, y0 + dy, x0 + dx))
