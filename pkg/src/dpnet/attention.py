"""Lightweight self- and cross-correlation attention (LSCM, LCCM-TD, LCCM-BU).

All three share one gate computation. Given a key sequence ``X_key`` (M x C)
and two pooled k*k summaries:

* spatial gate  ``S_sp = sigmoid(LN((X_key Wsp_k)(X_q' Wsp_q)^T Wsp_o))``, one value per key position
* channel gate  ``S_ch = sigmoid(LN((Wch_k X_k'^T)(Wch_q X_q'^T)^T Wch_o))``, one value per channel

and the target sequence ``X_t`` is reweighted column-wise by ``S_sp`` and
row-wise by ``S_ch``, with the two results summed. LN normalises each logit
vector over its full length with a scalar affine.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import List, Mapping, Tuple

from dpnet import counting, ops
from dpnet.tensor import ShapeError, Tensor
from dpnet.weights import Slot

LN_EPS = 1e-5


@dataclass(frozen=True)
class AttentionConfig:
    channels: int
    k: int = 5
    r: int = 8

    def __post_init__(self) -> None:
        if self.k < 1 or self.r < 1 or self.channels < 1:
            raise ValueError(f"attention config needs k, r, channels >= 1, got {self}")
        if self.channels % self.r:
            raise ValueError(f"channels={self.channels} not divisible by reduction ratio r={self.r}")

    @property
    def reduced(self) -> int:
        return self.channels // self.r

    def check_site(self, h: int, w: int) -> None:
        if self.k > min(h, w) or self.k * self.k >= h * w:
            raise ShapeError(f"pooling size k={self.k} too large for a {h}x{w} map (need k*k < H*W and k <= min(H, W))")


@dataclass
class LscmWeights:
    sp_k: Tensor
    sp_q: Tensor
    sp_o: Tensor
    ch_k: Tensor
    ch_q: Tensor
    ch_o: Tensor
    ln_sp_gamma: Tensor
    ln_sp_beta: Tensor
    ln_ch_gamma: Tensor
    ln_ch_beta: Tensor

    @classmethod
    def slots(cls, prefix: str, cfg: AttentionConfig) -> List[Slot]:
        c, cr, kk = cfg.channels, cfg.reduced, cfg.k * cfg.k
        return [
            Slot(f"{prefix}.sp_k", (c, cr), fan_in=c),
            Slot(f"{prefix}.sp_q", (c, cr), fan_in=c),
            Slot(f"{prefix}.sp_o", (kk, 1), init="zeros"),
            Slot(f"{prefix}.ch_k", (c, c), fan_in=c),
            Slot(f"{prefix}.ch_q", (cr, c), fan_in=c),
            Slot(f"{prefix}.ch_o", (cr, 1), init="zeros"),
            Slot(f"{prefix}.ln_sp_gamma", (1,), init="ones", decay=False),
            Slot(f"{prefix}.ln_sp_beta", (1,), init="zeros", decay=False),
            Slot(f"{prefix}.ln_ch_gamma", (1,), init="ones", decay=False),
            Slot(f"{prefix}.ln_ch_beta", (1,), init="zeros", decay=False),
        ]

    @classmethod
    def from_store(cls, store: Mapping[str, Tensor], prefix: str) -> "LscmWeights":
        try:
            return cls(**{f.name: store[f"{prefix}.{f.name}"] for f in fields(cls)})
        except KeyError as exc:
            raise KeyError(f"missing weight {exc.args[0]!r}") from None

    def check(self, cfg: AttentionConfig) -> None:
        c, cr, kk = cfg.channels, cfg.reduced, cfg.k * cfg.k
        expected = {"sp_k": (c, cr), "sp_q": (c, cr), "sp_o": (kk, 1), "ch_k": (c, c),
                    "ch_q": (cr, c), "ch_o": (cr, 1)}
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ShapeError(f"attention weight {name}: shape {got}, expected {shape}")


# LCCM sites carry the same six projections and two LN affines.
LccmWeights = LscmWeights


def _as_batch(f: Tensor) -> Tuple[Tensor, bool]:
    if f.ndim == 3:
        return ops.reshape(f, (1,) + f.shape), True
    if f.ndim != 4:
        raise ShapeError(f"attention expects (C,H,W) or (N,C,H,W), got {f.shape}")
    return f, False


def _flatten(f: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, HW, C)."""
    n, c, h, w = f.shape
    return ops.transpose(ops.reshape(f, (n, c, h * w)), (0, 2, 1))


def _unflatten(x: Tensor, like: Tuple[int, ...], squeeze: bool) -> Tensor:
    n, c, h, w = like
    out = ops.reshape(ops.transpose(x, (0, 2, 1)), (n, c, h, w))
    return ops.reshape(out, (c, h, w)) if squeeze else out


def _pooled(f: Tensor, k: int) -> Tensor:
    return _flatten(ops.adaptive_avg_pool2d(f, k))


def correlation_gates(x_key: Tensor, xq_pooled: Tensor, xk_pooled: Tensor, w: LscmWeights) -> Tuple[Tensor, Tensor]:
    """Return ``(S_sp, S_ch)`` of shapes ``(N, M, 1)`` and ``(N, C, 1)``."""
    with counting.scope("spatial"):
        k_sp = ops.matmul(x_key, w.sp_k)
        q_sp = ops.matmul(xq_pooled, w.sp_q)
        sim = ops.matmul(k_sp, ops.transpose(q_sp, (0, 2, 1)))
        logits = ops.matmul(sim, w.sp_o)
        s_sp = ops.sigmoid(ops.layer_norm(logits, 1, w.ln_sp_gamma, w.ln_sp_beta, LN_EPS))
    with counting.scope("channel"):
        k_ch = ops.matmul(w.ch_k, ops.transpose(xk_pooled, (0, 2, 1)))
        q_ch = ops.matmul(w.ch_q, ops.transpose(xq_pooled, (0, 2, 1)))
        sim = ops.matmul(k_ch, ops.transpose(q_ch, (0, 2, 1)))
        logits = ops.matmul(sim, w.ch_o)
        s_ch = ops.sigmoid(ops.layer_norm(logits, 1, w.ln_ch_gamma, w.ln_ch_beta, LN_EPS))
    return s_sp, s_ch


def reweight(x: Tensor, s_sp: Tensor, s_ch: Tensor) -> Tensor:
    """``(S_sp * X) + (S_ch * X)``: column reweight by position, row reweight by channel."""
    with counting.scope("reweight"):
        return ops.add(ops.mul(s_sp, x), ops.mul(ops.transpose(s_ch, (0, 2, 1)), x))


def lscm_forward(f: Tensor, cfg: AttentionConfig, w: LscmWeights, return_gates: bool = False):
    f4, squeeze = _as_batch(f)
    n, c, h, wd = f4.shape
    if c != cfg.channels:
        raise ShapeError(f"lscm: input has {c} channels, config expects {cfg.channels}")
    cfg.check_site(h, wd)
    x = _flatten(f4)
    xp = _pooled(f4, cfg.k)
    s_sp, s_ch = correlation_gates(x, xp, xp, w)
    out = _unflatten(reweight(x, s_sp, s_ch), f4.shape, squeeze)
    return (out, s_sp, s_ch) if return_gates else out


def _check_pair(f_high: Tensor, f_low: Tensor, cfg: AttentionConfig, name: str) -> None:
    _, ch, hh, wh = f_high.shape
    _, cl, hl, wl = f_low.shape
    if ch != cl or ch != cfg.channels:
        raise ShapeError(f"{name}: channel mismatch high={ch} low={cl} config={cfg.channels}")
    if hh != 2 * hl or wh != 2 * wl:
        raise ShapeError(f"{name}: high-res {hh}x{wh} is not exactly twice low-res {hl}x{wl}")
    cfg.check_site(hl, wl)


def lccm_td_forward(f_high: Tensor, f_low: Tensor, cfg: AttentionConfig, w: LccmWeights,
                    return_gates: bool = False):
    """Top-down: reweight the high-resolution input, plus a residual."""
    fh, squeeze = _as_batch(f_high)
    fl, _ = _as_batch(f_low)
    _check_pair(fh, fl, cfg, "lccm_td")
    x_h = _flatten(fh)
    xh_p = _pooled(fh, cfg.k)
    xl_p = _pooled(fl, cfg.k)
    s_sp, s_ch = correlation_gates(x_h, xl_p, xh_p, w)
    out = ops.add(reweight(x_h, s_sp, s_ch), x_h)
    out = _unflatten(out, fh.shape, squeeze)
    return (out, s_sp, s_ch) if return_gates else out


def lccm_bu_forward(f_low: Tensor, f_high: Tensor, cfg: AttentionConfig, w: LccmWeights,
                    return_gates: bool = False):
    """Bottom-up: spatial keys from the 2x-downsampled high-res map, target is the low-res input."""
    fl, squeeze = _as_batch(f_low)
    fh, _ = _as_batch(f_high)
    _check_pair(fh, fl, cfg, "lccm_bu")
    x_l = _flatten(fl)
    x_key = _flatten(ops.resample2d(fh, "down2"))
    xh_p = _pooled(fh, cfg.k)
    xl_p = _pooled(fl, cfg.k)
    s_sp, s_ch = correlation_gates(x_key, xl_p, xh_p, w)
    out = ops.add(reweight(x_l, s_sp, s_ch), x_l)
    out = _unflatten(out, fl.shape, squeeze)
    return (out, s_sp, s_ch) if return_gates else out


def lscm_macs(n: int, cfg: AttentionConfig) -> int:
    """Exact multiply-accumulates of one gate computation with ``n`` key positions."""
    c, cr, kk = cfg.channels, cfg.reduced, cfg.k * cfg.k
    spatial = n * c * cr + kk * c * cr + n * cr * kk + n * kk
    channel = c * c * kk + cr * c * kk + c * kk * cr + c * cr
    return spatial + channel


def lscm_spatial_macs(n: int, cfg: AttentionConfig) -> int:
    c, cr, kk = cfg.channels, cfg.reduced, cfg.k * cfg.k
    return n * c * cr + kk * c * cr + n * cr * kk + n * kk
