"""Cross-modal fusion with an information-bottleneck projection.

The two reconstruction scales of each modality are concatenated into a
fine-grid operand (scale 2) and a coarse-grid operand (scale 4), combined
by one of four interchangeable fusion kinds, then squeezed through a
two-layer bottleneck whose output is trained to stay label-predictive (a
KL term against the unbottlenecked prediction) while matching the clean
RGB feature (the fusion loss).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .reconstruction import ReconstructionOutput

__all__ = [
    "FUSION_KINDS",
    "FusionModule",
    "IBProjection",
    "PredictiveHead",
    "LossBundle",
    "ib_loss",
    "fusion_loss",
    "total_loss",
]

FUSION_KINDS = ("addition", "concatfc", "linearglu", "cross_attention")


def _tokens(x: Tensor) -> tuple[Tensor, tuple[int, int, int, int]]:
    """(B, C, H, W) -> (B, H*W, C) plus the original shape."""
    b, c, h, w = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 3, 1)), (b, h * w, c)), (b, c, h, w)


def _from_tokens(tok: Tensor, b: int, h: int, w: int) -> Tensor:
    c = tok.shape[-1]
    return ad.transpose(ad.reshape(tok, (b, h, w, c)), (0, 3, 1, 2))


def _upsample_to(x: Tensor, target_hw: tuple[int, int]) -> Tensor:
    cur = x
    while cur.shape[-1] < target_hw[1]:
        cur = ad.upsample2x(cur)
    if cur.shape[2:] != tuple(target_hw):
        raise ValueError(f"cannot reach {target_hw} from {x.shape} by 2x upsampling")
    return cur


class FusionModule:
    """Combine per-modality reconstruction scales into one fused map.

    kinds: 'addition' (projected sum), 'concatfc' (concat then 1x1 linear),
    'linearglu' (gated linear unit on tokens), 'cross_attention' (queries
    from the fine scale, keys/values from the coarse scale; default).
    """

    def __init__(
        self,
        rng: np.random.Generator,
        kind: str,
        d1: int,
        d2: int,
        c_fu: int,
        name: str = "fuse",
    ):
        """``d1``/``d2`` are the channel counts of the concatenated fine and
        coarse operands (per-modality width times modality count)."""
        if kind not in FUSION_KINDS:
            raise ValueError(f"unknown fusion kind {kind!r}; expected one of {FUSION_KINDS}")
        self.kind = kind
        self.name = name
        self.c_fu = c_fu
        p: dict[str, Tensor] = {}
        if kind == "addition":
            p[f"{name}.w1"] = Tensor(
                rng.standard_normal((c_fu, d1, 1, 1)) / np.sqrt(d1), requires_grad=True
            )
            p[f"{name}.w2"] = Tensor(
                rng.standard_normal((c_fu, d2, 1, 1)) / np.sqrt(d2), requires_grad=True
            )
        elif kind == "concatfc":
            p[f"{name}.w"] = Tensor(
                rng.standard_normal((c_fu, d1 + d2, 1, 1)) / np.sqrt(d1 + d2),
                requires_grad=True,
            )
        elif kind == "linearglu":
            p[f"{name}.wg"] = Tensor(
                rng.standard_normal((d1 + d2, c_fu)) / np.sqrt(d1 + d2), requires_grad=True
            )
            p[f"{name}.wv"] = Tensor(
                rng.standard_normal((d1 + d2, c_fu)) / np.sqrt(d1 + d2), requires_grad=True
            )
        else:  # cross_attention
            p[f"{name}.wq"] = Tensor(
                rng.standard_normal((d1, c_fu)) / np.sqrt(d1), requires_grad=True
            )
            p[f"{name}.wk"] = Tensor(
                rng.standard_normal((d2, c_fu)) / np.sqrt(d2), requires_grad=True
            )
            p[f"{name}.wv"] = Tensor(
                rng.standard_normal((d2, c_fu)) / np.sqrt(d2), requires_grad=True
            )
        self.params = p

    def __call__(self, rec_rgb: ReconstructionOutput, rec_depth: ReconstructionOutput) -> Tensor:
        f1 = ad.concat([rec_rgb.rec[2], rec_depth.rec[2]], axis=1)
        f2 = ad.concat([rec_rgb.rec[4], rec_depth.rec[4]], axis=1)
        return self.fuse_operands(f1, f2)

    def fuse_operands(self, f1: Tensor, f2: Tensor) -> Tensor:
        """Combine the fine (f1) and coarse (f2) operands on f1's grid."""
        n = self.name
        b, _, h1, w1 = f1.shape
        if self.kind == "addition":
            up = _upsample_to(f2, (h1, w1))
            return ad.add(
                ad.conv2d(f1, self.params[f"{n}.w1"]),
                ad.conv2d(up, self.params[f"{n}.w2"]),
            )
        if self.kind == "concatfc":
            up = _upsample_to(f2, (h1, w1))
            both = ad.concat([f1, up], axis=1)
            return ad.conv2d(both, self.params[f"{n}.w"])
        if self.kind == "linearglu":
            up = _upsample_to(f2, (h1, w1))
            tok, _ = _tokens(ad.concat([f1, up], axis=1))
            gate = ad.sigmoid(ad.matmul(tok, self.params[f"{n}.wg"]))
            value = ad.matmul(tok, self.params[f"{n}.wv"])
            return _from_tokens(ad.mul(gate, value), b, h1, w1)
        # cross_attention: queries from the fine tokens, keys/values coarse
        tok1, _ = _tokens(f1)
        tok2, _ = _tokens(f2)
        q = ad.matmul(tok1, self.params[f"{self.name}.wq"])
        k = ad.matmul(tok2, self.params[f"{self.name}.wk"])
        v = ad.matmul(tok2, self.params[f"{self.name}.wv"])
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(self.c_fu))
        out = ad.matmul(ad.softmax(scores), v)
        return _from_tokens(out, b, h1, w1)


class IBProjection:
    """Token-wise two-layer bottleneck: Linear, Dropout, ReLU, twice over.

    The first linear maps each spatial token down to ``d_z`` (the
    compressed code z); the second restores the original channel count.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        c_fu: int,
        d_z: int,
        dropout: float = 0.1,
        name: str = "ib",
    ):
        if d_z >= c_fu:
            raise ValueError(
                f"bottleneck width d_z={d_z} must be smaller than the token dim {c_fu}"
            )
        if d_z < 1:
            raise ValueError("d_z must be positive")
        self.dropout = float(dropout)
        self.name = name
        # biases get a small random init rather than zeros so no ReLU sits
        # exactly on its kink at the starting point (a zero bias meeting a
        # dead token would make the objective nondifferentiable there)
        self.params = {
            f"{name}.w1": Tensor(rng.standard_normal((c_fu, d_z)) / np.sqrt(c_fu), requires_grad=True),
            f"{name}.b1": Tensor(0.01 * rng.standard_normal(d_z), requires_grad=True),
            f"{name}.w2": Tensor(rng.standard_normal((d_z, c_fu)) / np.sqrt(d_z), requires_grad=True),
            f"{name}.b2": Tensor(0.01 * rng.standard_normal(c_fu), requires_grad=True),
        }

    def __call__(
        self, f_fu: Tensor, rng: np.random.Generator, training: bool
    ) -> tuple[Tensor, Tensor]:
        n = self.name
        tok, (b, c, h, w) = _tokens(f_fu)
        z = ad.add(ad.matmul(tok, self.params[f"{n}.w1"]), self.params[f"{n}.b1"])
        z = ad.relu(ad.dropout(z, self.dropout, rng, training))
        g = ad.add(ad.matmul(z, self.params[f"{n}.w2"]), self.params[f"{n}.b2"])
        g = ad.relu(ad.dropout(g, self.dropout, rng, training))
        return z, _from_tokens(g, b, h, w)


class PredictiveHead:
    """Shared pooled linear head turning a fused map into a label posterior."""

    def __init__(self, rng: np.random.Generator, c_fu: int, n_classes: int, name: str = "ibhead"):
        self.name = name
        self.params = {
            f"{name}.w": Tensor(
                rng.standard_normal((c_fu, n_classes)) / np.sqrt(c_fu), requires_grad=True
            ),
            f"{name}.b": Tensor(np.zeros(n_classes), requires_grad=True),
        }

    def distribution(self, x: Tensor) -> Tensor:
        pooled = ad.global_avg_pool(x)
        logits = ad.add(ad.matmul(pooled, self.params[f"{self.name}.w"]), self.params[f"{self.name}.b"])
        return ad.softmax(logits)

    def __call__(self, f_fu: Tensor, f_fu_g: Tensor) -> tuple[Tensor, Tensor]:
        """(Y over F_fu with gradient stopped, Y over F_fu_g)."""
        y_ffu = ad.stop_gradient(self.distribution(f_fu))
        y_ffug = self.distribution(f_fu_g)
        return y_ffu, y_ffug


def ib_loss(y_ffu: Tensor, y_ffug: Tensor) -> Tensor:
    """Batch-mean KL from the full-feature posterior to the bottlenecked one."""
    return ad.tensor_mean(ad.kl_divergence(y_ffu, y_ffug))


def fusion_loss(f_org_rgb: Tensor, f_fu_g: Tensor) -> Tensor:
    """Squared distance to the projected clean RGB feature per grid cell.

    Normalized by the grid area (and batch), not the channel count.
    """
    if f_org_rgb.shape != f_fu_g.shape:
        raise ValueError(f"shape mismatch: {f_org_rgb.shape} vs {f_fu_g.shape}")
    if f_org_rgb.ndim == 3:
        b, (h, w) = 1, f_org_rgb.shape[1:]
    else:
        b, _, h, w = f_org_rgb.shape
    return ad.mse(f_org_rgb, f_fu_g, normalizer=float(b * h * w))


@dataclass
class LossBundle:
    """The five objective components and the lambda weights for four of them."""

    l_r: Tensor
    l_d: Tensor
    l_fusion: Tensor
    l_ib: Tensor
    l_rec: Tensor
    lambdas: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    def values(self) -> dict[str, float]:
        return {
            "l_r": self.l_r.item(),
            "l_d": self.l_d.item(),
            "l_fusion": self.l_fusion.item(),
            "l_ib": self.l_ib.item(),
            "l_rec": self.l_rec.item(),
        }


def total_loss(bundle: LossBundle) -> Tensor:
    """lambda-weighted sum of the four named terms plus reconstruction."""
    l1, l2, l3, l4 = bundle.lambdas
    out = ad.scale(bundle.l_r, l1)
    out = ad.add(out, ad.scale(bundle.l_d, l2))
    out = ad.add(out, ad.scale(bundle.l_fusion, l3))
    out = ad.add(out, ad.scale(bundle.l_ib, l4))
    return ad.add(out, bundle.l_rec)
