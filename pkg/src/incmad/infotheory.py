"""Exact information theory on finite discrete distributions.

Everything here is computed by direct summation over probability tables in
nats, with the 0*log(0) = 0 convention. The module serves as an oracle for
two facts the fusion objective leans on:

1. For a variable G = g(F) computed deterministically from F,
   I(F;G) = I(F;G|Y) + I(G;Y). The decomposition does NOT hold for general
   joints: with F, G iid fair bits and Y = F xor G, the left side is 0 while
   I(F;G|Y) = ln 2, so the residual is ln 2. The oracle therefore only
   accepts deterministic channels and rejects anything else.

2. If P(Y|f) = P(Y|g(f)) for every f (zero KL everywhere), then
   I(Y;F) = I(Y;G); and for deterministic g the gap I(Y;F) - I(Y;G) is
   never negative (data processing).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "validate_joint",
    "entropy",
    "mutual_information",
    "conditional_mi",
    "make_deterministic_joint",
    "verify_corollary1",
    "verify_corollary2",
    "xor_counterexample_residual",
]

_ATOL = 1e-12


def validate_joint(p: np.ndarray) -> np.ndarray:
    """Check nonnegativity and unit total mass; returns the validated table."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("joint table has negative entries")
    total = p.sum()
    if abs(total - 1.0) > _ATOL:
        raise ValueError(f"joint table sums to {total!r}, not 1")
    return p


def _xlogx(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    mask = p > 0
    out[mask] = p[mask] * np.log(p[mask])
    return out


def entropy(p: np.ndarray) -> float:
    """Shannon entropy in nats of a distribution (any shape, summed flat)."""
    p = validate_joint(p)
    return float(-_xlogx(p).sum())


def mutual_information(joint: np.ndarray) -> float:
    """I(A;B) in nats from a 2-D joint table, by exact summation."""
    joint = validate_joint(joint)
    if joint.ndim != 2:
        raise ValueError("mutual_information expects a 2-D joint")
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    mi = 0.0
    for a in range(joint.shape[0]):
        for b in range(joint.shape[1]):
            pab = joint[a, b]
            if pab > 0:
                mi += pab * np.log(pab / (pa[a] * pb[b]))
    return float(mi)


def conditional_mi(joint: np.ndarray) -> float:
    """I(F;G|Y) in nats from a 3-D joint table with axes (F, G, Y)."""
    joint = validate_joint(joint)
    if joint.ndim != 3:
        raise ValueError("conditional_mi expects a 3-D joint over (F, G, Y)")
    py = joint.sum(axis=(0, 1))
    total = 0.0
    for y in range(joint.shape[2]):
        if py[y] <= 0:
            continue
        total += py[y] * mutual_information(joint[:, :, y] / py[y])
    return float(total)


def _validate_channel(g_of_f, n_f: int) -> np.ndarray:
    """A deterministic channel is a total map from F-indices to G-indices."""
    g = np.asarray(g_of_f)
    if g.ndim == 2:
        # A stochastic matrix is only accepted when it is one-hot in every
        # row, i.e. secretly deterministic.
        if g.shape[0] != n_f:
            raise ValueError("channel matrix row count must equal |F|")
        if not np.allclose(g.sum(axis=1), 1.0, atol=_ATOL):
            raise ValueError("channel rows must sum to 1")
        if not np.all(np.isin(g, (0.0, 1.0))):
            raise ValueError(
                "non-deterministic channel: the chain-rule identity is only "
                "verified for G computed as a function of F"
            )
        g = g.argmax(axis=1)
    if g.ndim != 1 or g.shape[0] != n_f:
        raise ValueError("channel must map every F-index to a G-index")
    if not np.issubdtype(g.dtype, np.integer):
        if not np.allclose(g, np.round(g)):
            raise ValueError("channel indices must be integers")
        g = np.round(g).astype(np.int64)
    if np.any(g < 0):
        raise ValueError("channel indices must be nonnegative")
    return g.astype(np.int64)


def make_deterministic_joint(
    p_f: np.ndarray, p_y_given_f: np.ndarray, g_of_f
) -> np.ndarray:
    """Joint p(f, g, y) = p(f) * p(y|f) * [g == g(f)].

    ``p_f`` is a length-|F| distribution, ``p_y_given_f`` a |F| x |Y| row
    stochastic matrix, and ``g_of_f`` a total map from F-indices to
    G-indices (or an equivalent one-hot matrix).
    """
    p_f = validate_joint(p_f)
    if p_f.ndim != 1:
        raise ValueError("p_f must be a 1-D distribution")
    n_f = p_f.shape[0]
    p_y_given_f = np.asarray(p_y_given_f, dtype=np.float64)
    if p_y_given_f.ndim != 2 or p_y_given_f.shape[0] != n_f:
        raise ValueError("p_y_given_f must be |F| x |Y|")
    if np.any(p_y_given_f < 0) or not np.allclose(p_y_given_f.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("p_y_given_f rows must be distributions")
    g = _validate_channel(g_of_f, n_f)
    n_g = int(g.max()) + 1
    n_y = p_y_given_f.shape[1]
    joint = np.zeros((n_f, n_g, n_y))
    for f in range(n_f):
        joint[f, g[f], :] = p_f[f] * p_y_given_f[f]
    return joint


def verify_corollary1(p_f: np.ndarray, g_of_f, p_y_given_f: np.ndarray) -> float:
    """Residual |I(F;G) - I(F;G|Y) - I(G;Y)| for G = g(F); must be ~0."""
    joint = make_deterministic_joint(p_f, p_y_given_f, g_of_f)
    i_fg = mutual_information(joint.sum(axis=2))
    i_fg_given_y = conditional_mi(joint)
    i_gy = mutual_information(joint.sum(axis=0))
    return float(abs(i_fg - i_fg_given_y - i_gy))


def verify_corollary2(
    p_f: np.ndarray, p_y_given_f: np.ndarray, g_of_f
) -> tuple[float, float]:
    """Return (kl_max, mi_gap) for the compressed variable G = g(F).

    kl_max is the worst KL(P(Y|f) || P(Y|g(f))) over f in the support of
    p_f; mi_gap is I(Y;F) - I(Y;G). Zero kl_max forces a zero gap, and the
    gap can never be meaningfully negative.
    """
    joint = make_deterministic_joint(p_f, p_y_given_f, g_of_f)
    p_f = np.asarray(p_f, dtype=np.float64)
    p_y_given_f = np.asarray(p_y_given_f, dtype=np.float64)
    g = _validate_channel(g_of_f, p_f.shape[0])

    # P(Y|g) by Bayes over the fibers of g
    joint_gy = joint.sum(axis=0)
    p_g = joint_gy.sum(axis=1)
    kl_max = 0.0
    for f in range(p_f.shape[0]):
        if p_f[f] <= 0:
            continue
        row_f = p_y_given_f[f]
        row_g = joint_gy[g[f]] / p_g[g[f]]
        kl = 0.0
        for y in range(row_f.shape[0]):
            if row_f[y] > 0:
                if row_g[y] <= 0:
                    kl = np.inf
                    break
                kl += row_f[y] * np.log(row_f[y] / row_g[y])
        kl_max = max(kl_max, float(kl))

    joint_fy = joint.sum(axis=1)
    mi_gap = mutual_information(joint_fy.T) - mutual_information(joint_gy.T)
    return kl_max, float(mi_gap)


def xor_counterexample_residual() -> float:
    """Chain-rule residual for the non-deterministic joint F,G iid bits, Y=F^G.

    Documents why the oracle insists on deterministic channels: here
    I(F;G)=0 but I(F;G|Y)=ln 2 and I(G;Y)=0, so the would-be identity is
    off by exactly ln 2.
    """
    joint = np.zeros((2, 2, 2))
    for f in range(2):
        for g in range(2):
            joint[f, g, f ^ g] = 0.25
    i_fg = mutual_information(joint.sum(axis=2))
    i_fg_given_y = conditional_mi(joint)
    i_gy = mutual_information(joint.sum(axis=0))
    return float(abs(i_fg - i_fg_given_y - i_gy))
