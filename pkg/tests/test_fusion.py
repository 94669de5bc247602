"""Fusion kinds, bottleneck projection, heads, and loss composition tests."""

import numpy as np
import pytest

from incmad import autodiff as ad
from incmad.autodiff import Tensor
from incmad.fusion import (
    FUSION_KINDS,
    FusionModule,
    IBProjection,
    LossBundle,
    PredictiveHead,
    fusion_loss,
    ib_loss,
    total_loss,
)
from incmad.gradcheck import finite_diff_check
from incmad.reconstruction import ReconstructionOutput


def _rec_pair(rng, c2=4, c4=8, h2=8, h4=2, b=2):
    def mk():
        out = ReconstructionOutput()
        out.rec[2] = Tensor(rng.random((b, c2, h2, h2)))
        out.rec[4] = Tensor(rng.random((b, c4, h4, h4)))
        return out

    return mk(), mk()


class TestFusionKinds:
    def test_all_kinds_same_shape_finite(self):
        rng = np.random.default_rng(0)
        rec_r, rec_d = _rec_pair(rng)
        shapes = set()
        for kind in FUSION_KINDS:
            fuse = FusionModule(np.random.default_rng(1), kind, d1=8, d2=16, c_fu=6)
            out = fuse(rec_r, rec_d)
            assert np.all(np.isfinite(out.data))
            shapes.add(out.shape)
        assert shapes == {(2, 6, 8, 8)}

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            FusionModule(np.random.default_rng(0), "bilinear", d1=4, d2=8, c_fu=4)

    def test_addition_identity_when_coarse_zero(self):
        rng = np.random.default_rng(2)
        rec_r, rec_d = _rec_pair(rng)
        rec_r.rec[4] = Tensor(np.zeros((2, 8, 2, 2)))
        rec_d.rec[4] = Tensor(np.zeros((2, 8, 2, 2)))
        fuse = FusionModule(np.random.default_rng(3), "addition", d1=8, d2=16, c_fu=6)
        out = fuse(rec_r, rec_d)
        f1 = ad.concat([rec_r.rec[2], rec_d.rec[2]], axis=1)
        proj1 = ad.conv2d(f1, fuse.params["fuse.w1"])
        assert np.allclose(out.data, proj1.data, atol=1e-12)

    def test_cross_attention_single_key_token(self):
        rng = np.random.default_rng(4)
        # coarse grid 1x1 -> exactly one key/value token
        rec_r, rec_d = _rec_pair(rng, h4=1)
        fuse = FusionModule(np.random.default_rng(5), "cross_attention", d1=8, d2=16, c_fu=6)
        out = fuse(rec_r, rec_d)
        f2 = np.concatenate([rec_r.rec[4].data, rec_d.rec[4].data], axis=1)
        tok2 = f2.reshape(2, 16, 1).transpose(0, 2, 1)
        v = tok2 @ fuse.params["fuse.wv"].data
        for bi in range(2):
            for pos in range(64):
                r, c = divmod(pos, 8)
                assert np.allclose(out.data[bi, :, r, c], v[bi, 0], atol=1e-12)

    def test_gradients_each_kind(self):
        rng = np.random.default_rng(6)
        for kind in FUSION_KINDS:
            rec_r, rec_d = _rec_pair(rng, c2=2, c4=3, h2=4, h4=2, b=1)
            for s in (2, 4):
                rec_r.rec[s].requires_grad = True
                rec_d.rec[s].requires_grad = True
            fuse = FusionModule(np.random.default_rng(7), kind, d1=4, d2=6, c_fu=3)
            t = Tensor(rng.standard_normal((1, 3, 4, 4)))

            def fn():
                return ad.tensor_sum(ad.mul(fuse(rec_r, rec_d), t))

            leaves = [rec_r.rec[2], rec_r.rec[4], rec_d.rec[2], rec_d.rec[4]]
            leaves += list(fuse.params.values())
            finite_diff_check(fn, leaves, max_coords=8, rng=np.random.default_rng(8))


class TestIBProjection:
    def test_bottleneck_width_validation(self):
        with pytest.raises(ValueError):
            IBProjection(np.random.default_rng(0), c_fu=8, d_z=8)
        with pytest.raises(ValueError):
            IBProjection(np.random.default_rng(0), c_fu=8, d_z=0)

    def test_zero_weights_broadcast_bias(self):
        rng = np.random.default_rng(1)
        ib = IBProjection(rng, c_fu=6, d_z=2, dropout=0.1)
        for k, t in ib.params.items():
            t.data = np.zeros_like(t.data)
        ib.params["ib.b2"].data = np.array([1.0, -2.0, 0.5, 0.0, 3.0, -1.0])
        x = Tensor(rng.random((2, 6, 4, 4)))
        _, g = ib(x, np.random.default_rng(2), training=False)
        want = np.maximum(ib.params["ib.b2"].data, 0.0)
        for bi in range(2):
            for r in range(4):
                for c in range(4):
                    assert np.allclose(g.data[bi, :, r, c], want, atol=1e-12)

    def test_output_shape_contract_10_configs(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            c_fu = int(rng.integers(4, 20))
            d_z = int(rng.integers(1, c_fu))
            b = int(rng.integers(1, 4))
            h = int(rng.integers(2, 6))
            ib = IBProjection(np.random.default_rng(4), c_fu, d_z)
            x = Tensor(rng.random((b, c_fu, h, h)))
            z, g = ib(x, np.random.default_rng(5), training=False)
            assert g.shape == x.shape
            assert z.shape == (b, h * h, d_z)

    def test_gradients_through_projection(self):
        rng = np.random.default_rng(6)
        ib = IBProjection(rng, c_fu=4, d_z=2, dropout=0.0)
        x = Tensor(rng.random((1, 4, 2, 2)), requires_grad=True)
        t = Tensor(rng.standard_normal((1, 4, 2, 2)))

        def fn():
            _, g = ib(x, np.random.default_rng(7), training=True)
            return ad.tensor_sum(ad.mul(g, t))

        finite_diff_check(fn, [x] + list(ib.params.values()))


class TestPredictiveHeads:
    def test_identical_inputs_zero_kl(self):
        rng = np.random.default_rng(8)
        head = PredictiveHead(rng, c_fu=5, n_classes=4)
        x = Tensor(rng.random((3, 5, 4, 4)))
        y1, y2 = head(x, x)
        assert np.allclose(y1.data, y2.data, atol=1e-15)
        assert ib_loss(y1, y2).item() == 0.0

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(9)
        head = PredictiveHead(rng, c_fu=5, n_classes=7)
        y1, y2 = head(Tensor(rng.random((4, 5, 2, 2))), Tensor(rng.random((4, 5, 2, 2))))
        assert np.all(np.abs(y1.data.sum(axis=-1) - 1.0) < 1e-12)
        assert np.all(np.abs(y2.data.sum(axis=-1) - 1.0) < 1e-12)

    def test_stop_gradient_on_full_feature_path(self):
        rng = np.random.default_rng(10)
        head = PredictiveHead(rng, c_fu=4, n_classes=3)
        f_fu = Tensor(rng.random((2, 4, 2, 2)), requires_grad=True)
        f_fu_g = Tensor(rng.random((2, 4, 2, 2)), requires_grad=True)
        y1, y2 = head(f_fu, f_fu_g)
        loss = ib_loss(y1, y2)
        loss.backward()
        assert f_fu.grad is None  # target branch carries no gradient
        assert f_fu_g.grad is not None
        assert np.any(f_fu_g.grad != 0.0)


class TestLosses:
    def test_ib_loss_worked_example(self):
        p = Tensor(np.array([[1.0, 0.0], [1.0, 0.0]]))
        q = Tensor(np.array([[0.5, 0.5], [0.5, 0.5]]))
        assert np.isclose(ib_loss(p, q).item(), np.log(2.0), atol=1e-12)

    def test_ib_loss_nonnegative_sweep(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            p = rng.random((3, 5)) + 1e-6
            q = rng.random((3, 5)) + 1e-6
            p /= p.sum(axis=1, keepdims=True)
            q /= q.sum(axis=1, keepdims=True)
            assert ib_loss(Tensor(p), Tensor(q)).item() >= -1e-15

    def test_fusion_loss_worked_example(self):
        a = Tensor(np.ones((2, 2, 2)))
        b = Tensor(np.zeros((2, 2, 2)))
        assert fusion_loss(a, b).item() == pytest.approx(2.0, abs=0.0)

    def test_fusion_loss_batched_mean(self):
        a = Tensor(np.ones((3, 2, 2, 2)))
        b = Tensor(np.zeros((3, 2, 2, 2)))
        assert fusion_loss(a, b).item() == pytest.approx(2.0, abs=1e-15)

    def test_fusion_loss_quadratic_scaling(self):
        rng = np.random.default_rng(12)
        a = Tensor(rng.random((2, 3, 4, 4)))
        b = Tensor(rng.random((2, 3, 4, 4)))
        one = fusion_loss(a, b).item()
        doubled = fusion_loss(a, Tensor(a.data + 2.0 * (b.data - a.data))).item()
        assert doubled == pytest.approx(4.0 * one, rel=1e-12)

    def test_total_loss_linear_sum(self):
        vals = (0.5, 0.3, 0.1, 0.2, 0.0)
        bundle = LossBundle(*(Tensor(np.asarray(v)) for v in vals))
        assert total_loss(bundle).item() == pytest.approx(1.1, abs=1e-15)

    def test_total_loss_zero_components(self):
        bundle = LossBundle(*(Tensor(np.asarray(0.0)) for _ in range(5)))
        assert total_loss(bundle).item() == 0.0

    def test_total_loss_linear_in_each_lambda(self):
        rng = np.random.default_rng(13)
        comps = tuple(Tensor(np.asarray(v)) for v in rng.random(5))
        for i in range(4):
            vals = []
            for lam in (0.0, 1.0, 2.0):
                lambdas = [1.0] * 4
                lambdas[i] = lam
                vals.append(total_loss(LossBundle(*comps, lambdas=tuple(lambdas))).item())
            assert vals[2] - vals[1] == pytest.approx(vals[1] - vals[0], rel=1e-12)

    def test_lambda4_zero_removes_ib_term(self):
        comps = [Tensor(np.asarray(v)) for v in (0.1, 0.2, 0.3, 7.0, 0.4)]
        with_ib = total_loss(LossBundle(*comps, lambdas=(1, 1, 1, 0)))
        assert with_ib.item() == pytest.approx(1.0, abs=1e-12)
