"""Modality-adaptive recalibration (stage id: ``marm``).

Each stream is first rescaled per channel by gates computed from its own
global statistics, then both streams share a spatial mask derived from
their pooled per-pixel statistics. Learnable scalars gate the residual,
initialized to zero so the whole stage starts as an exact identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .params import conv_params, scalar_param
from .tensor import ShapeError, Tensor, concat, narrow, tmax, tmean


@dataclass
class RecalParams:
    ce_w: Tensor
    ce_b: Tensor
    ci_w: Tensor
    ci_b: Tensor
    s_w: Tensor
    s_b: Tensor
    gamma_e: Tensor
    gamma_i: Tensor


def init_recal_params(store, rng, c_event, c_image, prefix="marm", dtype=np.float32):
    ce_w, ce_b = conv_params(store, f"{prefix}.ce", rng, c_event, c_event, 1, 1, dtype)
    ci_w, ci_b = conv_params(store, f"{prefix}.ci", rng, c_image, c_image, 1, 1, dtype)
    s_w, s_b = conv_params(store, f"{prefix}.spatial", rng, 2, 4, 7, 7, dtype)
    gamma_e = scalar_param(store, f"{prefix}.gamma_e", 0.0, dtype)
    gamma_i = scalar_param(store, f"{prefix}.gamma_i", 0.0, dtype)
    return RecalParams(ce_w, ce_b, ci_w, ci_b, s_w, s_b, gamma_e, gamma_i)


def channel_recalibrate(ev, im, p):
    """Rescale each stream by sigmoid gates over its pooled channels."""
    if ev.shape[2:] != im.shape[2:]:
        raise ShapeError(f"spatial dims differ: {ev.shape} vs {im.shape}")
    w_e = ops.sigmoid(ops.conv2d(ops.gap(ev), p.ce_w, p.ce_b))
    w_i = ops.sigmoid(ops.conv2d(ops.gap(im), p.ci_w, p.ci_b))
    return ev * w_e, im * w_i


def spatial_stats(ev_c, im_c):
    """Per-pixel channel statistics [B,4,H,W]: avg/max of each stream."""
    return concat(
        (
            tmean(ev_c, axis=1, keepdims=True),
            tmax(ev_c, axis=1, keepdims=True),
            tmean(im_c, axis=1, keepdims=True),
            tmax(im_c, axis=1, keepdims=True),
        ),
        axis=1,
    )


def spatial_masks(stats, p):
    """Two masks in (0,1): channel 0 gates events, channel 1 gates the image."""
    if stats.shape[1] != 4:
        raise ShapeError("spatial statistics tensor must have 4 channels")
    return ops.sigmoid(ops.conv2d(stats, p.s_w, p.s_b, pad=3))


def recalibrate(ev, im, p):
    """Residual recalibration; exact identity at gamma = 0."""
    ev_c, im_c = channel_recalibrate(ev, im, p)
    masks = spatial_masks(spatial_stats(ev_c, im_c), p)
    mask_e = narrow(masks, 1, 0, 1)
    mask_i = narrow(masks, 1, 1, 1)
    ev_rec = ev_c * mask_e * p.gamma_e + ev
    im_rec = im_c * mask_i * p.gamma_i + im
    return ev_rec, im_rec
