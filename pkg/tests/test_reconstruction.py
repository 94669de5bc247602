"""Reconstruction decoder and loss tests."""

import numpy as np
import pytest

from incmad import autodiff as ad
from incmad.autodiff import Tensor
from incmad.encoder import FeaturePyramid, JitterSpec, PyramidEncoder, feature_jitter
from incmad.gradcheck import finite_diff_check
from incmad.reconstruction import ReconstructionDecoder, reconstruction_loss
from incmad.state_space import MambaChain


def _pyramid(rng, channels=(2, 3, 4, 5), size=32, b=1, requires_grad=False):
    pyr = FeaturePyramid()
    for i, c in enumerate(channels, start=1):
        s = size // (2**i)
        pyr.levels[i] = Tensor(rng.random((b, c, s, s)), requires_grad=requires_grad)
    return pyr


def _chain_feats(pyr):
    return [pyr[4]] * 4


class TestDecoder:
    def test_output_shapes(self):
        rng = np.random.default_rng(0)
        channels = (2, 3, 4, 5)
        dec = ReconstructionDecoder(rng, channels)
        pyr = _pyramid(rng, channels)
        out = dec.reconstruct(pyr, _chain_feats(pyr))
        assert sorted(out.rec) == [2, 4]
        assert out.rec[4].shape == pyr[4].shape
        assert out.rec[2].shape == pyr[2].shape
        assert len(out.stages) == 4
        assert out.stages[3].shape == pyr[1].shape

    def test_zero_weights_zero_outputs(self):
        rng = np.random.default_rng(1)
        dec = ReconstructionDecoder(rng, (2, 3, 4, 5))
        for t in dec.params.values():
            t.data = np.zeros_like(t.data)
        pyr = _pyramid(rng)
        out = dec.reconstruct(pyr, _chain_feats(pyr))
        for s in (2, 4):
            assert np.all(out.rec[s].data == 0.0)

    def test_shape_mismatch_error(self):
        rng = np.random.default_rng(2)
        dec = ReconstructionDecoder(rng, (2, 3, 4, 5))
        pyr = _pyramid(rng)
        bad = [Tensor(np.zeros((1, 5, 4, 4)))] * 4  # wrong grid (pyramid L4 is 2x2)
        with pytest.raises(ValueError):
            dec.reconstruct(pyr, bad)
        with pytest.raises(ValueError):
            dec.reconstruct(pyr, _chain_feats(pyr)[:3])

    def test_gradients_through_decoder_and_chain(self):
        rng = np.random.default_rng(3)
        channels = (2, 2, 2, 2)
        dec = ReconstructionDecoder(rng, channels)
        chain = MambaChain(2, rng, "chain", depth=4)
        pyr = _pyramid(rng, channels, size=32)
        target = Tensor(np.random.default_rng(4).random(pyr[4].shape))

        def fn():
            feats = chain(pyr[4])
            out = dec.reconstruct(pyr, feats)
            return ad.mse(out.rec[4], target, normalizer=float(target.size))

        leaves = list(dec.params.values()) + list(chain.params.values())
        finite_diff_check(fn, leaves, max_coords=4, rng=np.random.default_rng(5))


class TestReconstructionLoss:
    def test_equal_features_zero_loss(self):
        rng = np.random.default_rng(6)
        pyr = _pyramid(rng)
        rec = type("R", (), {})()
        from incmad.reconstruction import ReconstructionOutput

        out = ReconstructionOutput()
        out.rec[2] = Tensor(pyr[2].data.copy())
        out.rec[4] = Tensor(pyr[4].data.copy())
        assert reconstruction_loss(out, pyr).item() == 0.0

    def test_constant_offset_worked_example(self):
        rng = np.random.default_rng(7)
        pyr = _pyramid(rng)
        from incmad.reconstruction import ReconstructionOutput

        out = ReconstructionOutput()
        out.rec[2] = Tensor(pyr[2].data + 1.0)  # per-element sq diff 1
        out.rec[4] = Tensor(pyr[4].data.copy())
        assert reconstruction_loss(out, pyr).item() == pytest.approx(0.5, abs=1e-12)

    def test_nonnegative(self):
        rng = np.random.default_rng(8)
        from incmad.reconstruction import ReconstructionOutput

        for _ in range(10):
            pyr = _pyramid(rng)
            out = ReconstructionOutput()
            out.rec[2] = Tensor(rng.standard_normal(pyr[2].shape))
            out.rec[4] = Tensor(rng.standard_normal(pyr[4].shape))
            assert reconstruction_loss(out, pyr).item() >= 0.0

    def test_target_is_gradient_stopped(self):
        rng = np.random.default_rng(9)
        pyr = _pyramid(rng, requires_grad=True)
        from incmad.reconstruction import ReconstructionOutput

        out = ReconstructionOutput()
        out.rec[2] = Tensor(rng.random(pyr[2].shape), requires_grad=True)
        out.rec[4] = Tensor(rng.random(pyr[4].shape), requires_grad=True)
        loss = reconstruction_loss(out, pyr)
        loss.backward()
        assert pyr[2].grad is None
        assert pyr[4].grad is None
        assert np.any(out.rec[2].grad != 0.0)


class TestOverfitToy:
    def test_restoration_improves_with_training(self):
        """200 SGD steps on one object: jittered-input reconstruction error
        against the clean features drops by at least half."""
        rng = np.random.default_rng(10)
        channels = (2, 3, 4, 5)
        enc = PyramidEncoder(3, rng, channels)
        dec = ReconstructionDecoder(rng, channels)
        x = Tensor(np.random.default_rng(11).random((2, 3, 32, 32)))
        clean = enc.encode(x)
        clean_detached = FeaturePyramid({i: t.detach() for i, t in clean.levels.items()})

        from incmad.optim import SGD

        opt = SGD(dec.params, lr=0.05, momentum=0.9)
        spec = JitterSpec(alpha=1.0)

        def loss_once(jrng):
            jit, _ = feature_jitter(clean_detached, spec, jrng)
            out = dec.reconstruct(jit, [jit[4]] * 4)
            return reconstruction_loss(out, clean_detached)

        initial = loss_once(np.random.default_rng(99)).item()
        for step in range(200):
            opt.zero_grad()
            loss = loss_once(np.random.default_rng(1000 + step))
            loss.backward()
            opt.step()
        final = loss_once(np.random.default_rng(99)).item()
        assert final <= 0.5 * initial
