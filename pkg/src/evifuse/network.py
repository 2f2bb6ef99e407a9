"""Four-stage dual-branch segmentation network and toy trainer.

Both branches are small convolutional stub encoders with the standard
stage geometry (1/4, 1/8, 1/16, 1/32 of the input resolution). At each
stage the event features are projected to the image width, recalibrated,
fused, and the four fused maps are aggregated by a lightweight decoder
into full-resolution class logits. Training is plain gradient descent on
a single synthetic scene; the point is a testable end-to-end gradient
path, not speed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .encoding import encode
from .events import window
from .fusion import fusion_forward, init_fusion_params
from .params import ParamStore, conv_params, make_rng, norm_params
from .recalibrate import init_recal_params, recalibrate
from .refine import init_refine_params, refine_forward
from .tensor import ShapeError, Tape, Tensor, concat, reshape

STAGES = 4


class ConfigError(ValueError):
    """Invalid or inconsistent network configuration."""


class TrainingDiverged(RuntimeError):
    def __init__(self, step):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


@dataclass
class NetworkConfig:
    height: int = 64
    width: int = 64
    classes: int = 3
    image_widths: list = field(default_factory=lambda: [16, 32, 48, 64])
    event_widths: list = None  # default: image widths halved, rounded up
    heads: list = field(default_factory=lambda: [2, 2, 2, 2])
    reduction: int = 2
    decoder_width: int = 32
    refine_width: int = 8
    seed: int = 1
    bins: int = 3
    window_us: int = 50000
    use_aefrm: bool = True
    use_marm: bool = True
    use_mgfm: bool = True

    def __post_init__(self):
        if self.event_widths is None:
            self.event_widths = [(c + 1) // 2 for c in self.image_widths]
        self.validate()

    def validate(self):
        if self.height % 32 or self.width % 32 or self.height < 32 or self.width < 32:
            raise ConfigError(f"dims {self.height}x{self.width} must be divisible by 32")
        for name in ("image_widths", "event_widths", "heads"):
            values = getattr(self, name)
            if len(values) != STAGES or any(v < 1 for v in values):
                raise ConfigError(f"{name} needs {STAGES} positive entries")
        for c, h in zip(self.image_widths, self.heads):
            if c % h:
                raise ConfigError(f"stage width {c} not divisible by head count {h}")
        if self.classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.reduction < 1:
            raise ConfigError("reduction must be >= 1")
        if self.bins < 1 or self.window_us < 1:
            raise ConfigError("encoding needs bins >= 1 and a positive window")

    def stage_dims(self):
        return [(self.height // (4 * 2**s), self.width // (4 * 2**s)) for s in range(STAGES)]


_TOP_KEYS = {
    "height", "width", "classes", "image_widths", "event_widths", "heads",
    "reduction", "decoder_width", "refine_width", "seed", "toggles", "encoding",
}
_TOGGLE_KEYS = {"aefrm", "marm", "mgfm"}
_ENCODING_KEYS = {"bins", "window_us"}


def config_from_dict(raw):
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {k: v for k, v in raw.items() if k not in ("toggles", "encoding")}
    toggles = raw.get("toggles", {})
    if set(toggles) - _TOGGLE_KEYS:
        raise ConfigError(f"unknown toggle keys: {sorted(set(toggles) - _TOGGLE_KEYS)}")
    encoding = raw.get("encoding", {})
    if set(encoding) - _ENCODING_KEYS:
        raise ConfigError(f"unknown encoding keys: {sorted(set(encoding) - _ENCODING_KEYS)}")
    kwargs["use_aefrm"] = bool(toggles.get("aefrm", True))
    kwargs["use_marm"] = bool(toggles.get("marm", True))
    kwargs["use_mgfm"] = bool(toggles.get("mgfm", True))
    if "bins" in encoding:
        kwargs["bins"] = int(encoding["bins"])
    if "window_us" in encoding:
        kwargs["window_us"] = int(encoding["window_us"])
    try:
        return NetworkConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path):
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return config_from_dict(raw)


# ---------------------------------------------------------------------------
# stub encoders and decoder


@dataclass
class EncoderParams:
    convs: list  # [(w, bn_g, bn_b)] per stage
    widths: list


def init_encoder_params(store, rng, in_channels, widths, prefix, dtype=np.float32):
    convs = []
    prev = in_channels
    for s, width in enumerate(widths):
        kernel = 7 if s == 0 else 3
        w, _ = conv_params(store, f"{prefix}.s{s}", rng, width, prev, kernel, kernel,
                           dtype, bias=False)
        g, beta = norm_params(store, f"{prefix}.s{s}_bn", rng, width, dtype)
        convs.append((w, g, beta))
        prev = width
    return EncoderParams(convs, list(widths))


def encode_stages(x, p):
    """Stage pyramid: 7x7 stride-4 stem, then three 3x3 stride-2 blocks."""
    feats = []
    cur = x
    for s, (w, g, beta) in enumerate(p.convs):
        stride, pad = (4, 3) if s == 0 else (2, 1)
        cur = ops.relu(ops.batchnorm2d(ops.conv2d(cur, w, stride=stride, pad=pad), g, beta))
        feats.append(cur)
    return feats


@dataclass
class DecoderParams:
    proj: list  # [(w, b)] per stage
    fuse_w: Tensor
    fuse_g: Tensor
    fuse_beta: Tensor
    cls_w: Tensor
    cls_b: Tensor


def init_decoder_params(store, rng, stage_widths, decoder_width, classes,
                        prefix="decoder", dtype=np.float32):
    proj = [
        conv_params(store, f"{prefix}.proj{s}", rng, decoder_width, c, 1, 1, dtype)
        for s, c in enumerate(stage_widths)
    ]
    fuse_w, _ = conv_params(store, f"{prefix}.fuse", rng,
                            decoder_width, STAGES * decoder_width, 1, 1, dtype,
                            bias=False)
    fuse_g, fuse_beta = norm_params(store, f"{prefix}.fuse_bn", rng, decoder_width, dtype)
    cls_w, cls_b = conv_params(store, f"{prefix}.cls", rng, classes, decoder_width, 1, 1, dtype)
    return DecoderParams(proj, fuse_w, fuse_g, fuse_beta, cls_w, cls_b)


def decode(stages, p, out_hw):
    """Project every stage to a common width on the stage-1 grid, fuse, classify."""
    if len(stages) != STAGES:
        raise ShapeError(f"decoder expects {STAGES} stage tensors")
    grid = stages[0].shape[2:]
    lifted = [
        ops.resample(ops.conv2d(feat, w, b), grid)
        for feat, (w, b) in zip(stages, p.proj)
    ]
    merged = ops.relu(ops.batchnorm2d(
        ops.conv2d(concat(lifted, axis=1), p.fuse_w), p.fuse_g, p.fuse_beta))
    logits = ops.conv2d(merged, p.cls_w, p.cls_b)
    return ops.resample(logits, out_hw)


# ---------------------------------------------------------------------------
# full model


class Model:
    """All parameter groups plus the stage-wise forward dataflow."""

    def __init__(self, cfg, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        self.store = ParamStore()
        rng = make_rng(cfg.seed)
        self.refine = init_refine_params(self.store, rng, cfg.refine_width, dtype=dtype)
        self.event_enc = init_encoder_params(
            self.store, rng, cfg.bins, cfg.event_widths, "event_enc", dtype)
        self.image_enc = init_encoder_params(
            self.store, rng, 3, cfg.image_widths, "image_enc", dtype)
        self.project = [
            conv_params(self.store, f"project.s{s}", rng,
                        cfg.image_widths[s], cfg.event_widths[s], 1, 1, dtype)
            for s in range(STAGES)
        ]
        self.recal = [
            init_recal_params(self.store, rng, cfg.image_widths[s], cfg.image_widths[s],
                              prefix=f"marm.s{s}", dtype=dtype)
            for s in range(STAGES)
        ]
        self.fusion = [
            init_fusion_params(self.store, rng, cfg.image_widths[s], cfg.heads[s],
                               cfg.reduction, prefix=f"mgfm.s{s}", dtype=dtype)
            for s in range(STAGES)
        ]
        self.decoder = init_decoder_params(
            self.store, rng, cfg.image_widths, cfg.decoder_width, cfg.classes, dtype=dtype)

    def forward(self, image, e_vt, a_cm):
        """[B,3,H,W] + [B,bins,H,W] event tensors -> [B,classes,H,W] logits."""
        cfg = self.cfg
        if image.shape[2:] != (cfg.height, cfg.width):
            raise ShapeError(f"image dims {image.shape[2:]} != config "
                             f"{(cfg.height, cfg.width)}")
        if e_vt.shape != a_cm.shape or e_vt.shape[1] != cfg.bins:
            raise ShapeError("event tensors must agree and match config bins")
        refined = refine_forward(e_vt, a_cm, self.refine) if cfg.use_aefrm else e_vt
        e_stages = encode_stages(refined, self.event_enc)
        i_stages = encode_stages(image, self.image_enc)
        fused = []
        for s in range(STAGES):
            w, b = self.project[s]
            ev = ops.conv2d(e_stages[s], w, b)
            im = i_stages[s]
            if cfg.use_marm:
                ev, im = recalibrate(ev, im, self.recal[s])
            if cfg.use_mgfm:
                fused.append(fusion_forward(ev, im, self.fusion[s]))
            else:
                fused.append((ev + im) * 0.5)
        return decode(fused, self.decoder, (cfg.height, cfg.width))

    def forward_encoded(self, image, encoded):
        """Forward from an EncodedEvents pair; adds the batch axis."""
        e_vt = reshape(encoded.e_vt, (1, *encoded.e_vt.shape))
        a_cm = reshape(encoded.a_cm, (1, *encoded.a_cm.shape))
        if image.ndim == 3:
            image = reshape(image, (1, *image.shape))
        if self.dtype != image.dtype:
            image = image.astype(self.dtype)
            e_vt = e_vt.astype(self.dtype)
            a_cm = a_cm.astype(self.dtype)
        return self.forward(image, e_vt, a_cm)


def loss_ce(logits, labels, ignore_id=None):
    return ops.cross_entropy(logits, labels, ignore_id)


def metrics(pred, gt, classes):
    """(mIoU, PA); IoU averaged over classes present in prediction or truth."""
    p = np.rint(np.asarray(pred.data if isinstance(pred, Tensor) else pred)).astype(np.int64)
    g = np.rint(np.asarray(gt.data if isinstance(gt, Tensor) else gt)).astype(np.int64)
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {p.shape} != ground truth {g.shape}")
    pa = float((p == g).mean())
    ious = []
    for c in range(classes):
        inter = int(((p == c) & (g == c)).sum())
        union = int(((p == c) | (g == c)).sum())
        if union:
            ious.append(inter / union)
    miou = float(np.mean(ious)) if ious else 0.0
    return miou, pa


def predict(model, image, encoded):
    """Class map [H,W] from a no-tape forward."""
    logits = model.forward_encoded(image, encoded)
    return logits.data[0].argmax(axis=0)


def encode_scene(scene, cfg):
    win = window(scene.events, scene.window_us, scene.window_us,
                 (scene.height, scene.width))
    return encode(win, cfg.bins)


def train_toy(scene, cfg, steps, lr):
    """Overfit one scene with plain gradient descent.

    Returns (model, per-step losses, final mIoU, final PA). A non-finite
    loss aborts with TrainingDiverged carrying the failing step index.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if scene.height != cfg.height or scene.width != cfg.width:
        raise ConfigError(
            f"scene dims {scene.height}x{scene.width} != config "
            f"{cfg.height}x{cfg.width}")
    model = Model(cfg)
    encoded = encode_scene(scene, cfg)
    history = []
    for step in range(steps):
        model.store.zero_grad()
        try:
            with Tape() as tape:
                logits = model.forward_encoded(scene.image, encoded)
                loss = loss_ce(logits, scene.labels)
            history.append(loss.item())
            tape.backward(loss)
            for _, t in model.store.trainable():
                t.data = t.data - lr * t.grad_array()
        except (FloatingPointError, ArithmeticError) as exc:
            raise TrainingDiverged(step) from exc
    pred = predict(model, scene.image, encoded)
    miou, pa = metrics(pred, scene.labels, cfg.classes)
    return model, history, miou, pa
