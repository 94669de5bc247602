"""Full detection model: encoders, decoder chains, reconstruction, fusion.

One model instance covers all object categories. Components are switchable
for ablations: the state-space decoder chain (with its per-modality label
losses) and the bottleneck fusion module (with its fusion/KL losses) can
each be disabled, and either modality can be dropped.

Scoring: with fusion enabled, the anomaly map is the squared channel
residual between a frozen projection of the clean level-2 feature and the
bottlenecked fused feature. With fusion disabled it falls back to the
reconstruction residual at scale 2. An optional learned per-pixel head
(1x1 conv on the stopped residual, trained with binary cross-entropy
against the jitter masks) can replace the residual map at eval time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import (
    FeaturePyramid,
    JitterSpec,
    MultimodalSample,
    PyramidEncoder,
    feature_jitter,
    sample_jitter_spec,
)
from .fusion import (
    FusionModule,
    IBProjection,
    LossBundle,
    PredictiveHead,
    fusion_loss,
    ib_loss,
    total_loss,
)
from .reconstruction import ReconstructionDecoder, reconstruction_loss
from .scoring import AnomalyScoreMap, anomaly_map, anomaly_map_from_logits
from .state_space import Classifier, MambaChain

__all__ = ["ModelSettings", "DetectionModel", "batch_arrays"]

MODALITIES = ("rgb", "depth")


@dataclass
class ModelSettings:
    """Architecture and objective switches for one model instance."""

    n_objects: int
    image_size: int = 64
    channels: tuple[int, ...] = (16, 32, 64, 128)
    c_fu: int = 64
    d_z: int = 16
    dropout: float = 0.1
    fusion_kind: str = "cross_attention"
    modalities: tuple[str, ...] = ("rgb", "depth")
    use_mamba: bool = True
    use_ibfm: bool = True
    lambdas: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    jitter_prob: float = 0.5
    train_encoder: bool = True
    ib_head_trainable: bool = False
    use_discriminator: bool = False
    depth_replicate: bool = False
    smooth_sigma: float = 4.0

    def __post_init__(self):
        if self.image_size % 16:
            raise ValueError("image_size must be divisible by 16")
        mods = tuple(self.modalities)
        if not mods or any(m not in MODALITIES for m in mods):
            raise ValueError(f"modalities must be a nonempty subset of {MODALITIES}")
        self.modalities = mods
        self.channels = tuple(int(c) for c in self.channels)
        self.lambdas = tuple(float(v) for v in self.lambdas)


def batch_arrays(samples: list[MultimodalSample]) -> dict[str, np.ndarray]:
    """Stack samples into (B, C, H, W) arrays plus integer labels."""
    return {
        "rgb": np.stack([s.rgb for s in samples]),
        "depth": np.stack([s.depth for s in samples]),
        "labels": np.asarray([s.object_id for s in samples], dtype=np.int64),
    }


class DetectionModel:
    """All trainable components plus the frozen scoring projection."""

    def __init__(self, settings: ModelSettings, seed: int = 0):
        self.settings = settings
        ss = np.random.SeedSequence(seed)
        keys = (
            "enc_rgb", "enc_depth", "chain_rgb", "chain_depth", "clf_rgb",
            "clf_depth", "dec_rgb", "dec_depth", "fusion", "ib", "ibhead",
            "target_proj", "disc",
        )
        streams = dict(zip(keys, (np.random.default_rng(c) for c in ss.spawn(len(keys)))))

        c1, c2, c3, c4 = settings.channels
        mods = settings.modalities
        self.encoders: dict[str, PyramidEncoder] = {}
        self.chains: dict[str, MambaChain] = {}
        self.classifiers: dict[str, Classifier] = {}
        self.decoders: dict[str, ReconstructionDecoder] = {}
        for m in mods:
            in_ch = 3 if (m == "rgb" or settings.depth_replicate) else 1
            self.encoders[m] = PyramidEncoder(
                in_ch, streams[f"enc_{m}"], settings.channels, name=f"enc_{m}"
            )
            # the block chain is always present; the scan-ablation arm
            # (use_mamba=False) bypasses only the directional scan stage
            # inside each block, keeping the rest of the pipeline identical
            self.chains[m] = MambaChain(
                c4, streams[f"chain_{m}"], name=f"chain_{m}", use_scan=settings.use_mamba
            )
            self.classifiers[m] = Classifier(
                c4, settings.n_objects, streams[f"clf_{m}"], name=f"clf_{m}"
            )
            self.decoders[m] = ReconstructionDecoder(
                streams[f"dec_{m}"], settings.channels, name=f"dec_{m}"
            )

        # fusion and its frozen regression target are always built; the
        # bottleneck-ablation arm (use_ibfm=False) regresses the fused
        # feature on the target directly, without the compression stage or
        # its KL and predictive losses
        self.fusion = FusionModule(
            streams["fusion"],
            settings.fusion_kind,
            d1=c2 * len(mods),
            d2=c4 * len(mods),
            c_fu=settings.c_fu,
        )
        self.ib: IBProjection | None = None
        self.ib_head: PredictiveHead | None = None
        if settings.use_ibfm:
            self.ib = IBProjection(
                streams["ib"], settings.c_fu, settings.d_z, settings.dropout
            )
            self.ib_head = PredictiveHead(
                streams["ibhead"], settings.c_fu, settings.n_objects
            )
        # frozen seeded 1x1 projection of the clean level-2 feature to
        # the fused channel count; target side of the fusion loss and
        # the reference operand at scoring time. The weights are kept
        # nonnegative: the encoder feature is already nonnegative, so a
        # nonnegative mixing preserves its magnitude contrast where a
        # signed random projection would cancel it, and the rectified
        # target stays an exact linear image of the feature
        tp = np.abs(streams["target_proj"].standard_normal((settings.c_fu, c2, 1, 1)))
        self.target_proj = Tensor(tp / tp.sum(axis=1, keepdims=True))

        self.disc_w: Tensor | None = None
        self.disc_b: Tensor | None = None
        if settings.use_discriminator:
            dc = settings.c_fu
            self.disc_w = Tensor(
                streams["disc"].standard_normal((1, dc, 1, 1)) / np.sqrt(dc),
                requires_grad=True,
            )
            self.disc_b = Tensor(np.zeros(1), requires_grad=True)

    # -- parameter bookkeeping ------------------------------------------------

    def all_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for comp in (*self.encoders.values(), *self.chains.values(),
                     *self.classifiers.values(), *self.decoders.values()):
            out.update(comp.params)
        out.update(self.fusion.params)
        if self.ib is not None:
            out.update(self.ib.params)
            out.update(self.ib_head.params)
        if self.disc_w is not None:
            out["disc.w"] = self.disc_w
            out["disc.b"] = self.disc_b
        return out

    def trainable_params(self) -> dict[str, Tensor]:
        s = self.settings
        out = dict(self.all_params())
        if not s.train_encoder:
            for enc in self.encoders.values():
                for k in enc.params:
                    out.pop(k, None)
        if self.ib_head is not None and not s.ib_head_trainable:
            for k in self.ib_head.params:
                out.pop(k, None)
        return out

    def state_arrays(self) -> dict[str, Tensor]:
        """Every stored tensor, including the frozen scoring projection."""
        out = dict(self.all_params())
        out["target_proj"] = self.target_proj
        return out

    # -- forward passes -------------------------------------------------------

    def _modality_input(self, batch: dict[str, np.ndarray], m: str) -> Tensor:
        x = batch[m]
        if m == "depth" and self.settings.depth_replicate:
            x = np.repeat(x, 3, axis=1)
        return Tensor(x)

    def _fusion_target(self, pyramids: dict[str, FeaturePyramid]) -> Tensor:
        """Frozen rectified projection of the clean level-2 feature.

        The rectification keeps the target inside the nonnegative cone the
        bottleneck output lives in (its last stage is a ReLU); without it
        the regression residual has an unreachable floor that swamps the
        anomaly signal at scoring time.
        """
        ref = "rgb" if "rgb" in pyramids else self.settings.modalities[0]
        proj = ad.relu(ad.conv2d(pyramids[ref][2], self.target_proj))
        return ad.stop_gradient(proj)

    @staticmethod
    def _pinned(cache: dict | None, key: str, fn) -> Tensor:
        """A stop-gradient value, optionally replayed from a cache.

        backward() treats every stop-gradient input as a constant, but the
        raw value still moves when upstream weights move, so a finite
        difference of the objective would disagree with the analytic
        gradient. Passing a dict pins each detached value at its first
        evaluation, making later calls a fixed function of the parameters
        (the function whose gradient backward() actually computes).
        """
        if cache is None:
            return fn()
        if key not in cache:
            cache[key] = fn().data
        return Tensor(cache[key])

    def forward_train(
        self,
        batch: dict[str, np.ndarray],
        rng: np.random.Generator,
        detach_cache: dict | None = None,
    ) -> tuple[LossBundle, Tensor, dict]:
        """One training forward pass; returns (bundle, objective, extras)."""
        s = self.settings
        bsz = batch["labels"].shape[0]
        labels = batch["labels"]

        clean: dict[str, FeaturePyramid] = {}
        jittered: dict[str, FeaturePyramid] = {}
        jitter_masks: dict[str, dict[int, np.ndarray]] = {}
        specs = [sample_jitter_spec(rng, s.jitter_prob) for _ in range(bsz)]
        for m in s.modalities:
            pyr = self.encoders[m].encode(self._modality_input(batch, m))
            clean[m] = pyr
            jittered[m], jitter_masks[m] = feature_jitter(pyr, specs, rng)

        zero = Tensor(np.zeros(()))
        l_r, l_d = zero, zero
        recs = {}
        for m in s.modalities:
            feats = self.chains[m](jittered[m][4])
            logits = self.classifiers[m](feats[-1])
            ce = ad.cross_entropy(logits, labels)
            if m == "rgb":
                l_r = ce
            else:
                l_d = ce
            recs[m] = self.decoders[m].reconstruct(jittered[m], feats)

        rec_targets: dict[str, FeaturePyramid] = clean
        if detach_cache is not None:
            rec_targets = {}
            for m in s.modalities:
                key = f"clean.{m}"
                if key not in detach_cache:
                    detach_cache[key] = {k: v.data for k, v in clean[m].levels.items()}
                rec_targets[m] = FeaturePyramid(
                    {k: Tensor(a) for k, a in detach_cache[key].items()}
                )
        rec_losses = [reconstruction_loss(recs[m], rec_targets[m]) for m in s.modalities]
        l_rec = rec_losses[0]
        for t in rec_losses[1:]:
            l_rec = ad.add(l_rec, t)
        l_rec = ad.scale(l_rec, 1.0 / len(s.modalities))

        extras: dict = {"jitter_masks": jitter_masks, "specs": specs}
        l_ib = zero
        f_fu = self._fuse(recs)
        if s.use_ibfm:
            _, f_fu_g = self.ib(f_fu, rng, training=True)
            y_raw, y_ffug = self.ib_head(f_fu, f_fu_g)
            y_ffu = self._pinned(detach_cache, "y_ffu", lambda: y_raw)
            l_ib = ib_loss(y_ffu, y_ffug)
        else:
            # bottleneck ablated: the fused feature itself must match the
            # target, with no compression stage and no predictive KL term
            f_fu_g = f_fu
        target = self._pinned(
            detach_cache, "fusion_target", lambda: self._fusion_target(clean)
        )
        l_fusion = fusion_loss(target, f_fu_g)
        extras["f_fu_g"] = f_fu_g
        extras["fusion_target"] = target

        bundle = LossBundle(
            l_r=l_r, l_d=l_d, l_fusion=l_fusion, l_ib=l_ib, l_rec=l_rec,
            lambdas=s.lambdas,
        )
        objective = total_loss(bundle)

        if self.disc_w is not None:
            residual = self._pinned(
                detach_cache,
                "disc_residual",
                lambda: ad.stop_gradient(self._disc_residual(extras)),
            )
            logits = ad.add(ad.conv2d(residual, self.disc_w), self.disc_b)
            # jitter mask at the residual grid (level 2)
            ref = "rgb" if "rgb" in jitter_masks else s.modalities[0]
            target_mask = jitter_masks[ref][2][:, None, :, :]
            l_disc = ad.bce_logits(logits, target_mask)
            objective = ad.add(objective, l_disc)
            extras["l_disc"] = l_disc

        return bundle, objective, extras

    def _fuse(self, recs: dict) -> Tensor:
        mods = self.settings.modalities
        if len(mods) == 2:
            return self.fusion(recs["rgb"], recs["depth"])
        only = recs[mods[0]]
        return self.fusion.fuse_operands(only.rec[2], only.rec[4])

    def _disc_residual(self, extras: dict) -> Tensor:
        return ad.sub(extras["fusion_target"], extras["f_fu_g"])

    def score_sample(
        self, sample: MultimodalSample, profile: np.ndarray | None = None
    ) -> AnomalyScoreMap:
        """Eval-mode anomaly map and image score for one sample.

        ``profile`` is an optional per-object normal reference map (the
        pixelwise max of the object's training-set score maps, built at the
        end of the object's own training step). When given, the image score
        becomes the largest exceedance of the map over the profile, which
        isolates hot regions the training data never produced instead of
        rewarding whatever stable reconstruction peak the object always has.
        The pixel map itself is returned unchanged.
        """
        s = self.settings
        batch = batch_arrays([sample])
        rng = np.random.default_rng(0)  # dropout disabled; never drawn from

        clean: dict[str, FeaturePyramid] = {}
        recs = {}
        for m in s.modalities:
            pyr = self.encoders[m].encode(self._modality_input(batch, m))
            clean[m] = pyr
            feats = self.chains[m](pyr[4])
            recs[m] = self.decoders[m].reconstruct(pyr, feats)

        hw = (s.image_size, s.image_size)
        f_fu = self._fuse(recs)
        if s.use_ibfm:
            _, f_fu_g = self.ib(f_fu, rng, training=False)
        else:
            f_fu_g = f_fu
        target = self._fusion_target(clean)
        if self.disc_w is not None:
            residual = ad.sub(target, f_fu_g)
            logits = ad.add(ad.conv2d(residual, self.disc_w), self.disc_b)
            res = anomaly_map_from_logits(logits.data[0, 0], hw, s.smooth_sigma)
        else:
            res = anomaly_map(target.data[0], f_fu_g.data[0], hw, s.smooth_sigma)
        if profile is None:
            return res
        return AnomalyScoreMap(res.map, float(np.max(res.map - profile)))
