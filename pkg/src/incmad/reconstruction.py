"""Reconstruction decoder restoring jittered feature pyramids.

Four stages mirror the encoder widths in reverse with 2x nearest-neighbor
upsampling between them. Stage i consumes the previous stage output, the
(jittered) pyramid skip at its scale, and the i-th decoder-chain feature
resized to its grid, then applies a 3x3 convolution and ReLU. The stages
whose grids match pyramid levels 4 and 2 are exposed as the reconstruction
scales used by fusion and the loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import FeaturePyramid, init_conv_weight

__all__ = ["ReconstructionOutput", "ReconstructionDecoder", "reconstruction_loss"]


@dataclass
class ReconstructionOutput:
    """rec holds scales {2, 4}; stages holds all four outputs coarse-to-fine."""

    rec: dict[int, Tensor] = field(default_factory=dict)
    stages: list[Tensor] = field(default_factory=list)


class ReconstructionDecoder:
    """Per-modality 4-stage decoder with pyramid skips and chain injections."""

    def __init__(
        self,
        rng: np.random.Generator,
        channels: tuple[int, ...] = (16, 32, 64, 128),
        name: str = "dec",
    ):
        if len(channels) != 4:
            raise ValueError("decoder needs the 4 encoder stage widths")
        c1, c2, c3, c4 = channels
        self.channels = (c1, c2, c3, c4)
        self.name = name
        in_out = [
            (c4 + c4, c4),  # stage 1 at H/16: pyramid L4 + chain feat
            (c4 + c3 + c4, c3),  # stage 2 at H/8
            (c3 + c2 + c4, c2),  # stage 3 at H/4
            (c2 + c1 + c4, c1),  # stage 4 at H/2
        ]
        self.params: dict[str, Tensor] = {}
        for i, (ci, co) in enumerate(in_out, start=1):
            self.params[f"{name}.stage{i}.w"] = Tensor(
                init_conv_weight(rng, co, ci, 3), requires_grad=True
            )

    def _resize_to(self, feat: Tensor, target_hw: tuple[int, int]) -> Tensor:
        cur = feat
        while cur.shape[-1] < target_hw[1]:
            cur = ad.upsample2x(cur)
        if cur.shape[2:] != tuple(target_hw):
            raise ValueError(
                f"chain feature {feat.shape} cannot reach grid {target_hw} by 2x upsampling"
            )
        return cur

    def reconstruct(
        self, pyramid: FeaturePyramid, chain_feats: list[Tensor]
    ) -> ReconstructionOutput:
        """Decode the (jittered) pyramid with the four chain injections."""
        if len(chain_feats) != 4:
            raise ValueError("expected exactly 4 chain features")
        for f in chain_feats:
            if f.shape != pyramid[4].shape:
                raise ValueError(
                    f"chain feature shape {f.shape} does not match pyramid level 4 "
                    f"{pyramid[4].shape}"
                )
        out = ReconstructionOutput()
        skips = {1: pyramid[4], 2: pyramid[3], 3: pyramid[2], 4: pyramid[1]}
        prev: Tensor | None = None
        for i in range(1, 5):
            skip = skips[i]
            target_hw = skip.shape[2:]
            inj = self._resize_to(chain_feats[i - 1], target_hw)
            parts = [] if prev is None else [ad.upsample2x(prev)]
            parts += [skip, inj]
            x = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
            prev = ad.relu(ad.conv2d(x, self.params[f"{self.name}.stage{i}.w"]))
            out.stages.append(prev)
        out.rec[4] = out.stages[0]
        out.rec[2] = out.stages[2]
        return out


def reconstruction_loss(rec: ReconstructionOutput, clean: FeaturePyramid) -> Tensor:
    """Mean over scales {2, 4} of elementwise MSE against the clean pyramid.

    The clean features act as a fixed target: gradients flow into the
    decoder and chain, not into the encoder through the target branch.
    """
    terms = []
    for s in (2, 4):
        target = ad.stop_gradient(clean[s])
        if rec.rec[s].shape != target.shape:
            raise ValueError(
                f"scale-{s} shape mismatch: {rec.rec[s].shape} vs {target.shape}"
            )
        terms.append(ad.mse(rec.rec[s], target, normalizer=float(target.size)))
    return ad.scale(ad.add(terms[0], terms[1]), 0.5)
