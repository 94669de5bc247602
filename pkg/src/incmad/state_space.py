"""State-space decoder blocks with 2-D stride-2 scanning.

The core primitive is a per-channel diagonal linear recurrence

    h_t = abar * h_{t-1} + bbar * x_t,    y_t = c * h_t + d * x_t,  h_0 = 0

with abar constrained to (0, 1) for stability. A feature map is scanned in
four directions (left-to-right, right-to-left, top-down, bottom-up); along
each direction the scan axis is split into even/odd stride-2 sub-sequences
that are scanned independently and scattered back, and the four direction
outputs are averaged.

A decoder block combines a depthwise 3x3 convolution (residual path), the
scan on channel-normalized features, and single-head dot-product attention
over flattened spatial tokens:

    xhat = dwconv(x)
    xtil = scan2d(ln(x))
    out  = attention(ln(xtil)) @ wo + xhat
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _node

__all__ = [
    "ssm_scan",
    "es2d",
    "MambaBlock",
    "MambaChain",
    "Classifier",
    "disentangle_loss",
]

DIRECTIONS = ("right", "left", "down", "up")


def ssm_scan(x: Tensor, abar: Tensor, bbar: Tensor, c: Tensor, d: Tensor) -> Tensor:
    """Diagonal linear state-space scan over (B, T, C) sequences.

    Parameters are per-channel vectors of length C. ``abar`` must satisfy
    0 <= abar < 1 for stability; abar == 0 is the memoryless limit, and the
    sigmoid parameterization used by the blocks keeps it strictly inside
    (0, 1). Differentiable in the input and all four parameter vectors via
    the adjoint recurrence.
    """
    if x.ndim != 3:
        raise ValueError("ssm_scan expects (B, T, C) input")
    bsz, t_len, ch = x.shape
    for name, v in (("abar", abar), ("bbar", bbar), ("c", c), ("d", d)):
        if v.shape != (ch,):
            raise ValueError(f"{name} must be a length-C vector, got {v.shape}")
    av, bv, cv, dv = abar.data, bbar.data, c.data, d.data
    if np.any(av < 0.0) or np.any(av >= 1.0):
        raise ValueError("abar decay must lie in [0, 1)")

    h = np.zeros((bsz, t_len, ch))
    prev = np.zeros((bsz, ch))
    for t in range(t_len):
        prev = av * prev + bv * x.data[:, t]
        h[:, t] = prev
    y = cv * h + dv * x.data

    def vjp(g):
        lam = np.zeros((bsz, t_len, ch))
        nxt = np.zeros((bsz, ch))
        for t in range(t_len - 1, -1, -1):
            nxt = cv * g[:, t] + av * nxt
            lam[:, t] = nxt
        dx = dv * g + bv * lam
        h_prev = np.concatenate([np.zeros((bsz, 1, ch)), h[:, :-1]], axis=1)
        da = (lam * h_prev).sum(axis=(0, 1))
        db = (lam * x.data).sum(axis=(0, 1))
        dc = (g * h).sum(axis=(0, 1))
        dd = (g * x.data).sum(axis=(0, 1))
        return dx, da, db, dc, dd

    return _node(y, (x, abar, bbar, c, d), vjp)


def _scan_axis(x: Tensor, params: dict[str, Tensor], reverse: bool) -> Tensor:
    """Scan the last spatial axis of (B, C, H, W), stride-2 parity split.

    Even- and odd-indexed positions along the axis form two sub-sequences,
    each scanned causally (reversed when ``reverse``); outputs return to
    their original positions.
    """
    bsz, ch, h, w = x.shape
    out_parts = []
    for start in (0, 1):
        key = (slice(None), slice(None), slice(None), slice(start, None, 2))
        sub = ad.index(x, key)  # (B, C, H, Ws)
        ws = sub.shape[-1]
        if reverse:
            sub = ad.index(sub, (slice(None), slice(None), slice(None), slice(None, None, -1)))
        seq = ad.reshape(
            ad.transpose(sub, (0, 2, 3, 1)), (bsz * h, ws, ch)
        )
        scanned = ssm_scan(seq, params["abar"], params["bbar"], params["c"], params["d"])
        sub_out = ad.transpose(
            ad.reshape(scanned, (bsz, h, ws, ch)), (0, 3, 1, 2)
        )
        if reverse:
            sub_out = ad.index(
                sub_out, (slice(None), slice(None), slice(None), slice(None, None, -1))
            )
        out_parts.append(ad.put((bsz, ch, h, w), key, sub_out))
    return ad.add(out_parts[0], out_parts[1])


def es2d(x: Tensor, params: dict[str, dict[str, Tensor]]) -> Tensor:
    """Four-direction stride-2 scan of a (B, C, H, W) map, outputs averaged.

    ``params`` maps each direction name to its scan parameter dict. H and W
    must be even so the parity sub-grids are well formed.
    """
    _, _, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError("es2d requires even spatial dims")
    xt = ad.transpose(x, (0, 1, 3, 2))
    outs = [
        _scan_axis(x, params["right"], reverse=False),
        _scan_axis(x, params["left"], reverse=True),
        ad.transpose(_scan_axis(xt, params["down"], reverse=False), (0, 1, 3, 2)),
        ad.transpose(_scan_axis(xt, params["up"], reverse=True), (0, 1, 3, 2)),
    ]
    total = ad.add(ad.add(outs[0], outs[1]), ad.add(outs[2], outs[3]))
    return ad.scale(total, 0.25)


def _channel_layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """LayerNorm over the channel dim of (B, C, H, W) via token reshape."""
    bsz, ch, h, w = x.shape
    tokens = ad.reshape(ad.transpose(x, (0, 2, 3, 1)), (bsz * h * w, ch))
    normed = ad.layer_norm(tokens, gamma, beta)
    return ad.transpose(ad.reshape(normed, (bsz, h, w, ch)), (0, 3, 1, 2))


class MambaBlock:
    """One decoder block: depthwise conv, normalized 2-D scan, attention.

    With ``use_scan=False`` the directional scan stage becomes an identity
    (its parameters exist but are bypassed), leaving the rest of the block
    intact. That is the scan-ablation arm of the component study: one
    mechanism removed, everything around it unchanged.
    """

    def __init__(self, channels: int, rng: np.random.Generator, name: str, use_scan: bool = True):
        self.channels = channels
        self.name = name
        self.use_scan = use_scan
        p: dict[str, Tensor] = {}
        std = np.sqrt(2.0 / (channels * 9))
        p[f"{name}.dw.w"] = Tensor(
            rng.standard_normal((channels, 1, 3, 3)) * std, requires_grad=True
        )
        for ln in ("ln1", "ln2"):
            p[f"{name}.{ln}.gamma"] = Tensor(np.ones(channels), requires_grad=True)
            p[f"{name}.{ln}.beta"] = Tensor(np.zeros(channels), requires_grad=True)
        for direction in DIRECTIONS:
            # raw decay starts near sigmoid(0)=0.5; b, c near identity scale
            p[f"{name}.ssm.{direction}.araw"] = Tensor(
                rng.normal(0.0, 0.5, size=channels), requires_grad=True
            )
            p[f"{name}.ssm.{direction}.b"] = Tensor(
                rng.normal(0.0, 0.2, size=channels) + 1.0, requires_grad=True
            )
            p[f"{name}.ssm.{direction}.c"] = Tensor(
                rng.normal(0.0, 0.2, size=channels), requires_grad=True
            )
            p[f"{name}.ssm.{direction}.d"] = Tensor(
                np.ones(channels), requires_grad=True
            )
        wstd = 1.0 / np.sqrt(channels)
        for wname in ("wq", "wk", "wv", "wo"):
            p[f"{name}.attn.{wname}"] = Tensor(
                rng.standard_normal((channels, channels)) * wstd, requires_grad=True
            )
        self.params = p

    def _scan_params(self) -> dict[str, dict[str, Tensor]]:
        out = {}
        for direction in DIRECTIONS:
            out[direction] = {
                "abar": ad.sigmoid(self.params[f"{self.name}.ssm.{direction}.araw"]),
                "bbar": self.params[f"{self.name}.ssm.{direction}.b"],
                "c": self.params[f"{self.name}.ssm.{direction}.c"],
                "d": self.params[f"{self.name}.ssm.{direction}.d"],
            }
        return out

    def __call__(self, x: Tensor) -> Tensor:
        n = self.name
        xhat = ad.conv2d(x, self.params[f"{n}.dw.w"], groups=self.channels)
        normed = _channel_layer_norm(
            x, self.params[f"{n}.ln1.gamma"], self.params[f"{n}.ln1.beta"]
        )
        xtil = es2d(normed, self._scan_params()) if self.use_scan else normed
        tokens_in = _channel_layer_norm(
            xtil, self.params[f"{n}.ln2.gamma"], self.params[f"{n}.ln2.beta"]
        )
        bsz, ch, h, w = tokens_in.shape
        tok = ad.reshape(ad.transpose(tokens_in, (0, 2, 3, 1)), (bsz, h * w, ch))
        q = ad.matmul(tok, self.params[f"{n}.attn.wq"])
        k = ad.matmul(tok, self.params[f"{n}.attn.wk"])
        v = ad.matmul(tok, self.params[f"{n}.attn.wv"])
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(ch))
        attn = ad.matmul(ad.softmax(scores), v)
        out_tok = ad.matmul(attn, self.params[f"{n}.attn.wo"])
        out_map = ad.transpose(ad.reshape(out_tok, (bsz, h, w, ch)), (0, 3, 1, 2))
        return ad.add(out_map, xhat)


class MambaChain:
    """Four chained blocks; every intermediate output is exposed."""

    def __init__(
        self,
        channels: int,
        rng: np.random.Generator,
        name: str,
        depth: int = 4,
        use_scan: bool = True,
    ):
        self.blocks = [
            MambaBlock(channels, rng, f"{name}.block{i + 1}", use_scan=use_scan)
            for i in range(depth)
        ]
        self.params: dict[str, Tensor] = {}
        for b in self.blocks:
            self.params.update(b.params)

    def __call__(self, x: Tensor) -> list[Tensor]:
        feats = []
        cur = x
        for block in self.blocks:
            cur = block(cur)
            feats.append(cur)
        return feats


class Classifier:
    """Global-average-pool then linear map to object logits."""

    def __init__(self, channels: int, n_classes: int, rng: np.random.Generator, name: str):
        self.name = name
        wstd = 1.0 / np.sqrt(channels)
        self.params = {
            f"{name}.w": Tensor(rng.standard_normal((channels, n_classes)) * wstd, requires_grad=True),
            f"{name}.b": Tensor(np.zeros(n_classes), requires_grad=True),
        }

    def __call__(self, x: Tensor) -> Tensor:
        pooled = ad.global_avg_pool(x)
        return ad.add(ad.matmul(pooled, self.params[f"{self.name}.w"]), self.params[f"{self.name}.b"])


def disentangle_loss(logits_rgb: Tensor, logits_depth: Tensor, labels) -> tuple[Tensor, Tensor]:
    """Per-modality cross-entropy against object labels."""
    return ad.cross_entropy(logits_rgb, labels), ad.cross_entropy(logits_depth, labels)
