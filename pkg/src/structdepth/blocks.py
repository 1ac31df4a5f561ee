"""Single-sample numpy forward/backward passes for the two attention blocks.

Feature grids are plain ``(C, H, W)`` float arrays. Convolutions are
cross-correlations, as in the usual deep-learning frameworks.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

LAYER_NORM_EPS = 1e-5


def _check_grid(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] < 1:
        raise ValueError(f"{name} must be a (C, H, W) array with C >= 1, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite entries")
    return x


def relu_mask(x):
    # subgradient at exactly 0 is 0
    return x > 0


def conv3x3(x, weight, bias):
    """Zero-padded 3x3 convolution: (Cin, H, W) -> (Cout, H, W)."""
    _, h, w = x.shape
    p = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.broadcast_to(bias[:, None, None], (weight.shape[0], h, w)).copy()
    for ky in range(3):
        for kx in range(3):
            out += np.einsum("oc,chw->ohw", weight[:, :, ky, kx], p[:, ky : ky + h, kx : kx + w])
    return out


def conv3x3_backward(grad_out, x, weight):
    _, h, w = x.shape
    p = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    grad_p = np.zeros_like(p)
    grad_w = np.zeros_like(weight)
    for ky in range(3):
        for kx in range(3):
            window = p[:, ky : ky + h, kx : kx + w]
            grad_w[:, :, ky, kx] = np.einsum("ohw,chw->oc", grad_out, window)
            grad_p[:, ky : ky + h, kx : kx + w] += np.einsum("oc,ohw->chw", weight[:, :, ky, kx], grad_out)
    return grad_p[:, 1:-1, 1:-1], grad_w, grad_out.sum(axis=(1, 2))


# ------------------------------------------------------------------ SAB


@dataclass
class SabParams:
    squeeze_weight: np.ndarray  # (2C,) 1x1 conv 2C -> 1
    squeeze_bias: float
    fuse_weight: np.ndarray  # (C, 2C, 3, 3)
    fuse_bias: np.ndarray  # (C,)

    @property
    def channels(self) -> int:
        return self.fuse_weight.shape[0]

    @classmethod
    def random(cls, channels, rng) -> SabParams:
        rng = np.random.default_rng(rng)
        c2 = 2 * channels
        return cls(
            squeeze_weight=rng.normal(0, 1 / np.sqrt(c2), c2),
            squeeze_bias=float(rng.normal(0, 0.1)),
            fuse_weight=rng.normal(0, 1 / np.sqrt(9 * c2), (channels, c2, 3, 3)),
            fuse_bias=rng.normal(0, 0.1, channels),
        )

    def check(self, channels):
        expected = {
            "squeeze_weight": (2 * channels,),
            "fuse_weight": (channels, 2 * channels, 3, 3),
            "fuse_bias": (channels,),
        }
        for name, shape in expected.items():
            got = np.shape(getattr(self, name))
            if got != shape:
                raise ValueError(f"SabParams.{name} has shape {got}, expected {shape} for C={channels}")


@dataclass
class SabGrads:
    d_next: np.ndarray
    gcb_feat: np.ndarray
    squeeze_weight: np.ndarray
    squeeze_bias: float
    fuse_weight: np.ndarray
    fuse_bias: np.ndarray


@dataclass
class SabCache:
    d_next: np.ndarray
    gcb_feat: np.ndarray
    stacked: np.ndarray
    preact: np.ndarray
    attention: np.ndarray
    fused_in: np.ndarray
    params: SabParams


def sab_forward(d_next, gcb_feat, params: SabParams):
    """Spatial attention block.

    The concatenated features are squeezed by a 1x1 convolution into a
    single-channel map, passed through ReLU, and used to gate ``gcb_feat``.
    The gated features and ``d_next`` are concatenated again and fused by a
    3x3 convolution back to C channels.

    Returns ``(out, attention, cache)``; pass the cache to :func:`sab_backward`.
    """
    d_next = _check_grid(d_next, "d_next")
    gcb_feat = _check_grid(gcb_feat, "gcb_feat")
    if d_next.shape != gcb_feat.shape:
        raise ValueError(f"shape mismatch: d_next {d_next.shape} vs gcb_feat {gcb_feat.shape}")
    params.check(d_next.shape[0])

    stacked = np.concatenate([d_next, gcb_feat], axis=0)
    preact = np.tensordot(params.squeeze_weight, stacked, axes=1) + params.squeeze_bias
    attention = np.where(relu_mask(preact), preact, 0.0)
    gated = gcb_feat * attention[None]
    fused_in = np.concatenate([gated, d_next], axis=0)
    out = conv3x3(fused_in, params.fuse_weight, params.fuse_bias)
    cache = SabCache(d_next, gcb_feat, stacked, preact, attention, fused_in, params)
    return out, attention, cache


def sab_backward(grad_out, cache: SabCache | None, grad_attention=None) -> SabGrads:
    if cache is None:
        raise ValueError("sab_backward needs the cache returned by sab_forward")
    params = cache.params
    c = cache.d_next.shape[0]
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != cache.d_next.shape:
        raise ValueError(f"upstream gradient shape {grad_out.shape} != output shape {cache.d_next.shape}")

    g_fused, g_fuse_w, g_fuse_b = conv3x3_backward(grad_out, cache.fused_in, params.fuse_weight)
    g_gated = g_fused[:c]
    g_d_next = g_fused[c:].copy()

    g_gcb = g_gated * cache.attention[None]
    g_att = (g_gated * cache.gcb_feat).sum(axis=0)
    if grad_attention is not None:
        g_att = g_att + grad_attention
    g_pre = g_att * relu_mask(cache.preact)

    g_sq_w = np.tensordot(cache.stacked, g_pre, axes=([1, 2], [0, 1]))
    g_sq_b = float(g_pre.sum())
    g_stacked = params.squeeze_weight[:, None, None] * g_pre[None]
    g_d_next += g_stacked[:c]
    g_gcb += g_stacked[c:]
    return SabGrads(g_d_next, g_gcb, g_sq_w, g_sq_b, g_fuse_w, g_fuse_b)


# ------------------------------------------------------------------ GCB


@dataclass
class GcbParams:
    key_weight: np.ndarray  # (C,) 1x1 conv C -> 1, no bias: softmax ignores a shift
    down_weight: np.ndarray  # (C/r, C)
    down_bias: np.ndarray  # (C/r,)
    up_weight: np.ndarray  # (C, C/r)
    up_bias: np.ndarray  # (C,)
    norm_scale: np.ndarray  # (C/r,)
    norm_shift: np.ndarray  # (C/r,)
    ratio: int

    @property
    def channels(self) -> int:
        return self.key_weight.shape[0]

    @classmethod
    def random(cls, channels, ratio, rng) -> GcbParams:
        if channels % ratio:
            raise ValueError(f"channels {channels} not divisible by ratio {ratio}")
        rng = np.random.default_rng(rng)
        m = channels // ratio
        return cls(
            key_weight=rng.normal(0, 1, channels),
            down_weight=rng.normal(0, 1 / np.sqrt(channels), (m, channels)),
            down_bias=rng.normal(0, 0.1, m),
            up_weight=rng.normal(0, 1 / np.sqrt(m), (channels, m)),
            up_bias=rng.normal(0, 0.1, channels),
            norm_scale=1.0 + rng.normal(0, 0.1, m),
            norm_shift=rng.normal(0, 0.5, m),
            ratio=ratio,
        )

    def check(self, channels):
        if self.ratio < 1 or channels % self.ratio:
            raise ValueError(f"channels {channels} not divisible by ratio {self.ratio}")
        m = channels // self.ratio
        expected = {
            "key_weight": (channels,),
            "down_weight": (m, channels),
            "down_bias": (m,),
            "up_weight": (channels, m),
            "up_bias": (channels,),
            "norm_scale": (m,),
            "norm_shift": (m,),
        }
        for name, shape in expected.items():
            got = np.shape(getattr(self, name))
            if got != shape:
                raise ValueError(f"GcbParams.{name} has shape {got}, expected {shape} for C={channels}")


@dataclass
class GcbGrads:
    x: np.ndarray
    key_weight: np.ndarray
    down_weight: np.ndarray
    down_bias: np.ndarray
    up_weight: np.ndarray
    up_bias: np.ndarray
    norm_scale: np.ndarray
    norm_shift: np.ndarray


@dataclass
class GcbCache:
    x: np.ndarray
    weights: np.ndarray  # softmax over positions, (H*W,)
    context: np.ndarray
    normed: np.ndarray
    inv_std: float
    layer_out: np.ndarray
    activated: np.ndarray
    params: GcbParams


def softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def gcb_forward(x, params: GcbParams):
    """Global context block: attention-pooled context, bottleneck transform, broadcast add.

    Returns ``(out, cache)``.
    """
    x = _check_grid(x, "x")
    c, h, w = x.shape
    params.check(c)
    flat = x.reshape(c, h * w)
    logits = params.key_weight @ flat
    weights = softmax(logits)
    context = flat @ weights

    hidden = params.down_weight @ context + params.down_bias
    centered = hidden - hidden.mean()
    inv_std = 1.0 / np.sqrt(np.mean(centered**2) + LAYER_NORM_EPS)
    normed = centered * inv_std
    layer_out = normed * params.norm_scale + params.norm_shift
    activated = np.where(relu_mask(layer_out), layer_out, 0.0)
    transform = params.up_weight @ activated + params.up_bias

    out = x + transform[:, None, None]
    return out, GcbCache(x, weights, context, normed, inv_std, layer_out, activated, params)


def gcb_backward(grad_out, cache: GcbCache | None) -> GcbGrads:
    if cache is None:
        raise ValueError("gcb_backward needs the cache returned by gcb_forward")
    p = cache.params
    x = cache.x
    c, h, w = x.shape
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != x.shape:
        raise ValueError(f"upstream gradient shape {grad_out.shape} != input shape {x.shape}")
    flat = x.reshape(c, h * w)

    g_x = grad_out.reshape(c, h * w).copy()
    g_t = grad_out.sum(axis=(1, 2))
    g_up_w = np.outer(g_t, cache.activated)
    g_up_b = g_t
    g_act = p.up_weight.T @ g_t
    g_ln = g_act * relu_mask(cache.layer_out)
    g_scale = g_ln * cache.normed
    g_shift = g_ln
    g_normed = g_ln * p.norm_scale
    g_hidden = cache.inv_std * (g_normed - g_normed.mean() - cache.normed * np.mean(g_normed * cache.normed))
    g_down_w = np.outer(g_hidden, cache.context)
    g_down_b = g_hidden
    g_ctx = p.down_weight.T @ g_hidden

    g_x += np.outer(g_ctx, cache.weights)
    g_weights = flat.T @ g_ctx
    g_logits = cache.weights * (g_weights - cache.weights @ g_weights)
    g_key_w = flat @ g_logits
    g_x += np.outer(p.key_weight, g_logits)

    return GcbGrads(
        x=g_x.reshape(c, h, w),
        key_weight=g_key_w,
        down_weight=g_down_w,
        down_bias=g_down_b,
        up_weight=g_up_w,
        up_bias=g_up_b,
        norm_scale=g_scale,
        norm_shift=g_shift,
    )


def param_names(params) -> list[str]:
    return [f.name for f in fields(params) if f.name != "ratio"]
