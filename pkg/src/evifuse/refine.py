"""Activity-guided event refinement (stage id: ``aefrm``).

The activity map drives a multi-scale pyramid whose output gates the
signed event projection through a residual multiplicative mask: each bin
of the activity tensor is treated as an independent single-channel image,
pushed through a stride-4 stem plus two pooled branches, recombined, and
reduced to a per-pixel mask that rescales the event tensor without ever
moving its zeros.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .params import conv_params, norm_params
from .tensor import ShapeError, Tensor, reshape


@dataclass
class RefineParams:
    stem_w: Tensor
    stem_b: Tensor
    p1_w: Tensor
    p1_b: Tensor
    p2_w: Tensor
    p2_b: Tensor
    cbr_w: Tensor
    cbr_g: Tensor
    cbr_beta: Tensor
    attn_w: Tensor
    attn_b: Tensor
    mask_w: Tensor
    mask_b: Tensor
    width: int


def init_refine_params(store, rng, width=8, prefix="aefrm", dtype=np.float32):
    if width < 1:
        raise ValueError("refinement width must be >= 1")
    stem_w, stem_b = conv_params(store, f"{prefix}.stem", rng, width, 1, 7, 7, dtype)
    p1_w, p1_b = conv_params(store, f"{prefix}.p1", rng, width, 1, 3, 3, dtype)
    p2_w, p2_b = conv_params(store, f"{prefix}.p2", rng, width, 1, 3, 3, dtype)
    cbr_w, _ = conv_params(store, f"{prefix}.cbr", rng, width, width, 3, 3,
                           dtype, bias=False)
    cbr_g, cbr_beta = norm_params(store, f"{prefix}.cbr_bn", rng, width, dtype)
    attn_w, attn_b = conv_params(store, f"{prefix}.attn", rng, width, width, 1, 1, dtype)
    mask_w, mask_b = conv_params(store, f"{prefix}.mask", rng, 1, width, 1, 1, dtype)
    return RefineParams(
        stem_w, stem_b, p1_w, p1_b, p2_w, p2_b,
        cbr_w, cbr_g, cbr_beta, attn_w, attn_b, mask_w, mask_b, width,
    )


def build_activity_pyramid(a_cm, p):
    """Multi-scale features [(B*C), width, H/4, W/4] from the activity map."""
    b, c, h, w = a_cm.shape
    if h % 4 or w % 4:
        raise ShapeError(f"spatial dims {h}x{w} must be divisible by 4")
    x = reshape(a_cm, (b * c, 1, h, w))
    target = (h // 4, w // 4)
    f_s = ops.conv2d(x, p.stem_w, p.stem_b, stride=4, pad=3)
    f_p1 = ops.conv2d(ops.pool2d(x, "avg", 3, 3), p.p1_w, p.p1_b, pad=1)
    f_p2 = ops.conv2d(ops.pool2d(x, "avg", 5, 5), p.p2_w, p.p2_b, pad=1)
    merged = f_s + ops.resample(f_p1, target) + ops.resample(f_p2, target)
    return ops.relu(ops.batchnorm2d(ops.conv2d(merged, p.cbr_w, pad=1),
                                    p.cbr_g, p.cbr_beta))


def channel_weights(feat, p):
    """Per-channel gates in (0,1) from globally pooled pyramid features."""
    return ops.sigmoid(ops.conv2d(ops.gap(feat), p.attn_w, p.attn_b))


def attention_mask(feat, weights, target_hw, batch, channels, p):
    """Single-channel mask resampled to the event grid, [B,C,H,W]."""
    m = ops.conv2d(feat * weights, p.mask_w, p.mask_b)
    m = ops.resample(m, target_hw)
    return reshape(m, (batch, channels, *target_hw))


def refine(e_vt, mask):
    """Residual gating e_vt * (1 + mask); zeros of e_vt stay zero."""
    if e_vt.shape != mask.shape:
        raise ShapeError(f"mask shape {mask.shape} != events {e_vt.shape}")
    return e_vt + e_vt * mask


def refine_forward(e_vt, a_cm, p):
    b, c, h, w = e_vt.shape
    feat = build_activity_pyramid(a_cm, p)
    weights = channel_weights(feat, p)
    mask = attention_mask(feat, weights, (h, w), b, c, p)
    return refine(e_vt, mask)
