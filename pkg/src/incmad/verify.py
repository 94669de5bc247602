"""Self-verification suites: gradients, information corollaries, metrics.

Each suite checks one family of invariant gates and reports pass/fail with
its worst observed error and wall-clock. The oracles here are independent
re-derivations (pairwise counting, dense threshold sweeps, direct formula
evaluation), not calls back into the implementations they check.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor
from .data import generate_synthetic_dataset
from .gradcheck import GradCheckFailure, finite_diff_check
from .infotheory import (
    make_deterministic_joint,
    mutual_information,
    verify_corollary1,
    verify_corollary2,
)
from .model import DetectionModel, ModelSettings, batch_arrays
from .scoring import MetricsHistory, aupro, auroc, forgetting_metric
from .state_space import MambaBlock, es2d, ssm_scan
from .fusion import IBProjection

__all__ = [
    "VerifyResult",
    "verify_gradients",
    "verify_information_corollaries",
    "verify_metric_oracles",
    "verify_fm_examples",
    "run_all",
]


@dataclass
class VerifyResult:
    name: str
    passed: bool
    detail: str
    seconds: float


# -- criterion: gradient suite -------------------------------------------------


def _op_cases(rng: np.random.Generator):
    """One random instance per differentiable op; returns (name, fn, params)."""

    def t(*shape, lo=-1.0, hi=1.0):
        return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)

    cases = []
    a, b = t(3, 4), t(3, 4)
    cases.append(("add", lambda: ad.tensor_sum(ad.add(a, b)), [a, b]))
    c, d = t(2, 3, 4), t(4)
    cases.append(("add_broadcast", lambda: ad.tensor_sum(ad.add(c, d)), [c, d]))
    e, f = t(3, 4), t(3, 4)
    cases.append(("sub", lambda: ad.tensor_sum(ad.sub(e, f)), [e, f]))
    g, h = t(2, 5), t(2, 5)
    cases.append(("mul", lambda: ad.tensor_sum(ad.mul(g, h)), [g, h]))
    i = t(4, 3)
    cases.append(("neg", lambda: ad.tensor_sum(ad.neg(i)), [i]))
    j = t(3, 3)
    cases.append(("scale", lambda: ad.tensor_sum(ad.scale(j, 1.7)), [j]))
    k = t(3, 4, lo=0.5, hi=2.0)
    cases.append(("power", lambda: ad.tensor_sum(ad.power(k, 1.7)), [k]))
    m1, m2 = t(3, 4), t(4, 5)
    cases.append(("matmul", lambda: ad.tensor_sum(ad.matmul(m1, m2)), [m1, m2]))
    r = Tensor(
        rng.uniform(0.2, 1.5, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4)),
        requires_grad=True,
    )
    cases.append(("relu", lambda: ad.tensor_sum(ad.relu(r)), [r]))
    s = t(3, 4, lo=-2.0, hi=2.0)
    cases.append(("sigmoid", lambda: ad.tensor_sum(ad.sigmoid(s)), [s]))
    ex = t(3, 3)
    cases.append(("exp", lambda: ad.tensor_sum(ad.exp(ex)), [ex]))
    lg = t(3, 3, lo=0.2, hi=2.0)
    cases.append(("log", lambda: ad.tensor_sum(ad.log(lg)), [lg]))
    sm = t(4, 6)
    cases.append(("tensor_sum", lambda: ad.tensor_sum(ad.mul(sm, sm)), [sm]))
    mn = t(4, 6)
    cases.append(("tensor_mean", lambda: ad.tensor_mean(ad.mul(mn, mn)), [mn]))
    rs = t(2, 6)
    rsw = Tensor(rng.uniform(-1, 1, (3, 4)))
    cases.append(
        ("reshape", lambda: ad.tensor_sum(ad.mul(ad.reshape(rs, (3, 4)), rsw)), [rs])
    )
    tp = t(3, 5)
    tpw = Tensor(rng.uniform(-1, 1, (5, 3)))
    cases.append(
        ("transpose", lambda: ad.tensor_sum(ad.mul(ad.transpose(tp, (1, 0)), tpw)), [tp])
    )
    c1, c2 = t(2, 3), t(2, 4)
    w = Tensor(rng.uniform(-1, 1, (2, 7)))
    cases.append(("concat", lambda: ad.tensor_sum(ad.mul(ad.concat([c1, c2], axis=1), w)), [c1, c2]))
    ix = t(4, 6)
    cases.append(("index", lambda: ad.tensor_sum(ad.index(ix, (slice(1, 3), slice(0, None, 2)))), [ix]))
    pt = t(2, 3)
    pw = Tensor(rng.uniform(-1, 1, (4, 6)))
    cases.append(
        ("put", lambda: ad.tensor_sum(ad.mul(ad.put((4, 6), (slice(0, 2), slice(0, 3)), pt), pw)), [pt])
    )
    sf = t(4, 5)
    sfw = Tensor(rng.uniform(-1, 1, (4, 5)))
    cases.append(("softmax", lambda: ad.tensor_sum(ad.mul(ad.softmax(sf), sfw)), [sf]))
    ls = t(4, 5)
    cases.append(("log_softmax", lambda: ad.tensor_sum(ad.mul(ad.log_softmax(ls), sfw)), [ls]))
    ln = t(3, 6)
    gamma, beta = t(6, lo=0.5, hi=1.5), t(6)
    cases.append(("layer_norm", lambda: ad.tensor_sum(ad.layer_norm(ln, gamma, beta)), [ln, gamma, beta]))
    cx = t(1, 2, 6, 6)
    cw = t(3, 2, 3, 3)
    cases.append(("conv2d", lambda: ad.tensor_sum(ad.conv2d(cx, cw)), [cx, cw]))
    dx = t(1, 3, 6, 6)
    dw = t(3, 1, 3, 3)
    cases.append(("conv2d_depthwise", lambda: ad.tensor_sum(ad.conv2d(dx, dw, groups=3)), [dx, dw]))
    px = t(1, 2, 6, 6)
    pxw = Tensor(rng.uniform(-1, 1, (1, 2, 3, 3)))
    cases.append(("avg_pool2d", lambda: ad.tensor_sum(ad.mul(ad.avg_pool2d(px), pxw)), [px]))
    ux = t(1, 2, 3, 3)
    uxw = Tensor(rng.uniform(-1, 1, (1, 2, 6, 6)))
    cases.append(("upsample2x", lambda: ad.tensor_sum(ad.mul(ad.upsample2x(ux), uxw)), [ux]))
    gp = t(2, 4, 4, 4)
    cases.append(("global_avg_pool", lambda: ad.tensor_sum(ad.global_avg_pool(gp)), [gp]))
    dr = t(3, 8)
    seed = int(rng.integers(2**31))
    cases.append(
        ("dropout", lambda: ad.tensor_sum(ad.dropout(dr, 0.3, np.random.default_rng(seed), True)), [dr])
    )
    ce = t(4, 5)
    labels = rng.integers(0, 5, 4)
    cases.append(("cross_entropy", lambda: ad.cross_entropy(ad.scale(ce, 2.0), labels), [ce]))
    kp, kq = t(3, 6), t(3, 6)
    cases.append(
        (
            "kl_divergence",
            lambda: ad.tensor_mean(ad.kl_divergence(ad.softmax(kp), ad.softmax(kq))),
            [kp, kq],
        )
    )
    bl = t(2, 6)
    targets = rng.uniform(0, 1, (2, 6))
    cases.append(("bce_logits", lambda: ad.bce_logits(bl, targets), [bl]))
    ma, mb = t(3, 4), t(3, 4)
    cases.append(("mse", lambda: ad.mse(ma, mb, 12.0), [ma, mb]))
    sa = Tensor(rng.uniform(0.05, 0.9, 4), requires_grad=True)
    sb, sc, sd = t(4), t(4), t(4)
    sx = t(2, 7, 4)
    cases.append(
        ("ssm_scan", lambda: ad.tensor_sum(ssm_scan(sx, sa, sb, sc, sd)), [sx, sa, sb, sc, sd])
    )
    return cases


def _composite_cases(rng: np.random.Generator):
    cases = []

    ch = 4
    block = MambaBlock(ch, np.random.default_rng(rng.integers(2**31)), name="blk")
    bx = Tensor(rng.uniform(-1, 1, (1, ch, 4, 4)), requires_grad=True)
    bw = Tensor(rng.uniform(-1, 1, (1, ch, 4, 4)))
    params = [bx] + list(block.params.values())
    cases.append(
        ("block_composite", lambda: ad.tensor_sum(ad.mul(block(bx), bw)), params)
    )

    es_params = {
        direction: {
            "abar": Tensor(rng.uniform(0.05, 0.9, ch), requires_grad=True),
            "bbar": Tensor(rng.uniform(-1, 1, ch), requires_grad=True),
            "c": Tensor(rng.uniform(-1, 1, ch), requires_grad=True),
            "d": Tensor(rng.uniform(-1, 1, ch), requires_grad=True),
        }
        for direction in ("right", "left", "down", "up")
    }
    ex = Tensor(rng.uniform(-1, 1, (1, ch, 4, 4)), requires_grad=True)
    flat = [ex] + [p for d in es_params.values() for p in d.values()]
    cases.append(
        ("es2d", lambda: ad.tensor_sum(es2d(ex, es_params)), flat)
    )

    ib = IBProjection(np.random.default_rng(rng.integers(2**31)), 6, 2, dropout=0.0)
    fx = Tensor(rng.uniform(-1, 1, (1, 6, 3, 3)), requires_grad=True)
    seed = int(rng.integers(2**31))

    def ib_fn():
        _, g = ib(fx, np.random.default_rng(seed), training=True)
        return ad.tensor_sum(g)

    cases.append(("ib_projection", ib_fn, [fx] + list(ib.params.values())))
    return cases


def _objective_case(seed: int):
    settings = ModelSettings(
        n_objects=2,
        image_size=32,
        channels=(2, 2, 2, 2),
        c_fu=4,
        d_z=2,
        dropout=0.0,
        jitter_prob=0.0,
    )
    model = DetectionModel(settings, seed=seed)
    rng = np.random.default_rng(seed + 1)
    ds = generate_synthetic_dataset(2, 1, 2, 32, seed=seed)
    batch = batch_arrays([ds.objects[n].train[0] for n in ds.names])
    cache: dict = {}

    def fn():
        _, objective, _ = model.forward_train(batch, np.random.default_rng(7), detach_cache=cache)
        return objective

    params = list(model.trainable_params().values())
    pick = rng.choice(len(params), size=min(10, len(params)), replace=False)
    return fn, [params[i] for i in pick]


def verify_gradients(instances: int = 20) -> VerifyResult:
    """Finite-difference checks: every op and composite, `instances` each."""
    t0 = time.perf_counter()
    worst = 0.0
    failures = []
    n_cases = 0
    for inst in range(instances):
        rng = np.random.default_rng(1000 + inst)
        for name, fn, params in _op_cases(rng) + _composite_cases(rng):
            n_cases += 1
            try:
                err = finite_diff_check(
                    fn, params, max_coords=3, rng=np.random.default_rng(inst)
                )
                worst = max(worst, err)
            except GradCheckFailure as e:
                failures.append(f"{name}[{inst}]: {e}")
    for inst in range(instances):
        n_cases += 1
        fn, params = _objective_case(inst)
        try:
            err = finite_diff_check(fn, params, max_coords=2, rng=np.random.default_rng(inst))
            worst = max(worst, err)
        except GradCheckFailure as e:
            failures.append(f"objective[{inst}]: {e}")
    detail = f"{n_cases} checks, worst rel err {worst:.3g}"
    if failures:
        detail += "; FAILED: " + "; ".join(failures[:4])
    return VerifyResult("gradient suite", not failures, detail, time.perf_counter() - t0)


# -- criterion: information corollaries -----------------------------------------


def _random_channel_setup(rng: np.random.Generator):
    nf = int(rng.integers(2, 7))
    ny = int(rng.integers(2, 5))
    pf = rng.dirichlet(np.ones(nf))
    py_f = rng.dirichlet(np.ones(ny), size=nf)
    ng = int(rng.integers(1, nf + 1))
    g = rng.integers(0, ng, nf)
    return pf, py_f, g


def verify_information_corollaries(
    triples: int = 200, dpi_trials: int = 1000
) -> VerifyResult:
    t0 = time.perf_counter()
    failures = []
    worst1 = 0.0
    rng = np.random.default_rng(42)
    for i in range(triples):
        pf, py_f, g = _random_channel_setup(rng)
        residual = verify_corollary1(pf, g, py_f)
        worst1 = max(worst1, residual)
        if residual >= 1e-10:
            failures.append(f"corollary1[{i}]: residual {residual:.3g}")

    # corollary 2: when the coarse prediction matches exactly, MI is equal.
    # Injective relabelings satisfy the premise by construction; random
    # lossy maps exercise the conditional.
    checked = 0
    for i in range(triples):
        pf, py_f, _ = _random_channel_setup(rng)
        nf = len(pf)
        if i % 2 == 0:
            g = rng.permutation(nf)  # injective: premise holds exactly
        else:
            g = rng.integers(0, max(1, nf - 1), nf)
        kl_max, mi_gap = verify_corollary2(pf, py_f, g)
        if kl_max < 1e-12:
            checked += 1
            if abs(mi_gap) >= 1e-10:
                failures.append(f"corollary2[{i}]: kl {kl_max:.3g} but gap {mi_gap:.3g}")
    if checked == 0:
        failures.append("corollary2: premise never satisfied, nothing checked")

    worst_dpi = -np.inf
    for i in range(dpi_trials):
        pf, py_f, g = _random_channel_setup(rng)
        i_yf = mutual_information(pf[:, None] * py_f)
        joint_fgy = make_deterministic_joint(pf, py_f, g)
        i_yg = mutual_information(joint_fgy.sum(axis=0))
        worst_dpi = max(worst_dpi, i_yg - i_yf)
        if i_yg > i_yf + 1e-12:
            failures.append(f"dpi[{i}]: I(Y;G)={i_yg:.12f} > I(Y;F)={i_yf:.12f}")
    detail = (
        f"corollary1 worst residual {worst1:.3g}; corollary2 checked {checked}; "
        f"dpi worst slack {worst_dpi:.3g}"
    )
    if failures:
        detail += "; FAILED: " + "; ".join(failures[:4])
    return VerifyResult(
        "information corollaries", not failures, detail, time.perf_counter() - t0
    )


# -- criterion: metric oracles ---------------------------------------------------


def _auroc_oracle(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (len(pos) * len(neg)))


def _aupro_oracle(maps, masks, fpr_limit=0.3) -> float:
    """Dense threshold sweep over every distinct score value."""
    maps = np.asarray(maps, dtype=np.float64)
    masks = np.asarray(masks) > 0
    regions = []
    for i_img, mask in enumerate(masks):
        lab, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
        for r in range(1, n + 1):
            regions.append((i_img, lab == r))
    neg = ~masks
    n_neg = neg.sum()
    thresholds = np.unique(maps.ravel())[::-1]
    fprs, pros = [0.0], [0.0]
    for th in thresholds:
        pred = maps >= th
        fpr = (pred & neg).sum() / n_neg
        overlaps = [
            (pred[i_img] & region).sum() / region.sum() for i_img, region in regions
        ]
        fprs.append(float(fpr))
        pros.append(float(np.mean(overlaps)))
    fprs = np.asarray(fprs)
    pros = np.asarray(pros)
    if fprs[-1] < fpr_limit:
        fprs = np.append(fprs, fpr_limit)
        pros = np.append(pros, pros[-1])
    keep = fprs <= fpr_limit
    xs, ys = list(fprs[keep]), list(pros[keep])
    if xs[-1] < fpr_limit:
        j = int(keep.sum())
        x0, x1 = fprs[j - 1], fprs[j]
        y0, y1 = pros[j - 1], pros[j]
        t = (fpr_limit - x0) / (x1 - x0)
        xs.append(fpr_limit)
        ys.append(y0 + t * (y1 - y0))
    return float(np.trapezoid(ys, xs) / fpr_limit)


def _fm_oracle(history_rows: dict) -> float:
    """Direct evaluation: mean over early objects of max accuracy drop."""
    steps = sorted({s for s, _ in history_rows})
    final = steps[-1]
    per_obj = {}
    for (s, o), v in history_rows.items():
        per_obj.setdefault(o, {})[s] = v
    drops = []
    for o, row in per_obj.items():
        first = min(row)
        if first >= final:
            continue
        drops.append(max(row[s] - row[final] for s in row if s < final))
    return float(np.mean(drops))


def verify_metric_oracles(
    auroc_instances: int = 100, aupro_instances: int = 50, fm_instances: int = 100
) -> VerifyResult:
    t0 = time.perf_counter()
    failures = []
    rng = np.random.default_rng(7)
    worst_auroc = 0.0
    for i in range(auroc_instances):
        n = int(rng.integers(5, 40))
        scores = np.round(rng.normal(size=n), 2)  # rounding forces ties
        labels = np.zeros(n, dtype=int)
        labels[rng.choice(n, size=int(rng.integers(1, n)), replace=False)] = 1
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        err = abs(auroc(scores, labels) - _auroc_oracle(scores, labels))
        worst_auroc = max(worst_auroc, err)
        if err >= 1e-9:
            failures.append(f"auroc[{i}]: err {err:.3g}")

    worst_aupro = 0.0
    for i in range(aupro_instances):
        maps = rng.random((2, 16, 16))
        masks = np.zeros((2, 16, 16))
        for m in masks:
            cy, cx = rng.integers(3, 13, 2)
            r = int(rng.integers(2, 4))
            yy, xx = np.ogrid[:16, :16]
            m[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 1.0
        err = abs(aupro(maps, masks) - _aupro_oracle(maps, masks))
        worst_aupro = max(worst_aupro, err)
        if err >= 1e-3:
            failures.append(f"aupro[{i}]: err {err:.3g}")

    worst_fm = 0.0
    for i in range(fm_instances):
        n_steps = int(rng.integers(2, 6))
        n_obj = int(rng.integers(1, 5))
        history = MetricsHistory()
        rows = {}
        for o in range(n_obj):
            first = int(rng.integers(0, n_steps - 1))
            for s in range(first, n_steps):
                v = float(np.round(rng.uniform(50, 100), 3))
                history.add(s, f"obj{o}", iauroc=v)
                rows[(s, f"obj{o}")] = v
        err = abs(forgetting_metric(history, "iauroc") - _fm_oracle(rows))
        worst_fm = max(worst_fm, err)
        if err >= 1e-12:
            failures.append(f"fm[{i}]: err {err:.3g}")

    detail = (
        f"auroc worst {worst_auroc:.3g}; aupro worst {worst_aupro:.3g}; "
        f"fm worst {worst_fm:.3g}"
    )
    if failures:
        detail += "; FAILED: " + "; ".join(failures[:4])
    return VerifyResult("metric oracles", not failures, detail, time.perf_counter() - t0)


def verify_fm_examples() -> VerifyResult:
    t0 = time.perf_counter()
    failures = []
    h1 = MetricsHistory()
    for s, v in enumerate((90.0, 85.0, 80.0)):
        h1.add(s, "a", iauroc=v)
    if forgetting_metric(h1, "iauroc") != 10.0:
        failures.append(f"[90,85,80] gave {forgetting_metric(h1, 'iauroc')}, want 10")
    h2 = MetricsHistory()
    for s in range(3):
        h2.add(s, "a", iauroc=77.0)
    if forgetting_metric(h2, "iauroc") != 0.0:
        failures.append(f"constant history gave {forgetting_metric(h2, 'iauroc')}, want 0")
    h3 = MetricsHistory()
    for s, v in enumerate((90.0, 85.0, 80.0)):
        h3.add(s, "a", iauroc=v)
    for s, v in enumerate((70.0, 75.0, 80.0)):
        h3.add(s, "b", iauroc=v)
    if forgetting_metric(h3, "iauroc") != 2.5:
        failures.append(f"two-object gave {forgetting_metric(h3, 'iauroc')}, want 2.5")
    detail = "3 worked examples exact" if not failures else "; ".join(failures)
    return VerifyResult("fm worked examples", not failures, detail, time.perf_counter() - t0)


def run_all() -> list:
    return [
        verify_gradients(),
        verify_information_corollaries(),
        verify_metric_oracles(),
        verify_fm_examples(),
    ]
