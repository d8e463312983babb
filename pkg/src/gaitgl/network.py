"""Backbone and recognition head.

The backbone stacks stages of global+local convolutional layers (GLCL).
Each GLCL runs a global 3D-conv branch and a mask-based local branch over
one drawn complementary mask pair, fusing them by elementwise sum
(variant A) or vertical concatenation (variant B).  The first stage ends
with local temporal aggregation (a strided temporal conv), a later stage
with spatial pooling.  The head maps the final feature map to per-strip
embedding vectors: temporal max, per-strip width reduction (max/avg blend
or generalized mean), then one independent FC per strip.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import masks as mk
from .autodiff import Param, Tensor
from .conv import conv3d, fused_glcl_a, pool
from .errors import ConfigurationError, DimensionError

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3, 3)
    stride: tuple = (1, 1, 1)
    pad: tuple | None = None  # None -> floor(k/2), preserves extents at stride 1
    has_bias: bool = True

    def resolved_pad(self) -> tuple:
        if self.pad is not None:
            return self.pad
        return tuple(k // 2 for k in self.kernel)


@dataclass(frozen=True)
class StageConfig:
    glcl_count: int
    channels: int
    variants: tuple  # 'A' or 'B' per layer
    followed_by: str = "none"  # 'lta' | 'pool' | 'none'
    lta_kernel: int = 3
    lta_stride: int = 3

    def __post_init__(self):
        if len(self.variants) != self.glcl_count:
            raise ConfigurationError(
                f"stage declares {self.glcl_count} layers but {len(self.variants)} variants")
        if any(v not in ("A", "B") for v in self.variants):
            raise ConfigurationError(f"variants must be 'A' or 'B', got {self.variants}")
        if self.followed_by not in ("lta", "pool", "none"):
            raise ConfigurationError(f"unknown stage suffix {self.followed_by!r}")


@dataclass(frozen=True)
class BackboneConfig:
    stages: tuple
    input_extents: tuple  # (T, H, W)
    c_stfm: int
    mask: mk.MaskStrategy = field(default_factory=lambda: mk.MaskStrategy(mk.STRIP_V, 0.2))
    head: str = "gem"  # 'gem' | 'maxavg'
    alpha: float = 1.0
    beta: float = 1.0
    p_init: float = 6.5
    eval_mask: str = "none"  # 'none' | 'fixed2'
    in_channels: int = 1

    def __post_init__(self):
        lta_stages = [s for s in self.stages if s.followed_by == "lta"]
        if len(lta_stages) != 1:
            raise ConfigurationError("exactly one stage must end with temporal aggregation")
        b_positions = [(i, j) for i, s in enumerate(self.stages)
                       for j, v in enumerate(s.variants) if v == "B"]
        last = (len(self.stages) - 1, self.stages[-1].glcl_count - 1)
        if any(pos != last for pos in b_positions):
            raise ConfigurationError("variant B is only allowed as the final layer")
        if self.head not in ("gem", "maxavg"):
            raise ConfigurationError(f"unknown head mode {self.head!r}")
        if self.head == "maxavg" and not (self.alpha in (0.0, 1.0) and self.beta in (0.0, 1.0)):
            raise ConfigurationError("alpha and beta must each be 0 or 1")
        if self.eval_mask not in ("none", "fixed2"):
            raise ConfigurationError(f"unknown eval mask mode {self.eval_mask!r}")

    def final_glcl_b(self) -> bool:
        return self.stages[-1].variants[-1] == "B"

    def embedding_strips(self) -> int:
        h = self.input_extents[1]
        for s in self.stages:
            if s.followed_by == "pool":
                h //= 2
        return h * (2 if self.final_glcl_b() else 1)

    def output_extents(self) -> tuple:
        """(C, T, H, W) of the final feature map for the configured input."""
        t, h, w = self.input_extents
        for s in self.stages:
            if s.followed_by == "lta":
                t = (t - s.lta_kernel) // s.lta_stride + 1
            elif s.followed_by == "pool":
                h //= 2
                w //= 2
        if self.final_glcl_b():
            h *= 2
        return self.stages[-1].channels, t, h, w


def _three_stage(channels, c_stfm, final_b=False, **kw) -> BackboneConfig:
    c1, c2, c3 = channels
    return BackboneConfig(
        stages=(
            StageConfig(1, c1, ("A",), "lta"),
            StageConfig(1, c2, ("A",), "pool"),
            StageConfig(2, c3, ("A", "B" if final_b else "A"), "none"),
        ),
        **kw, c_stfm=c_stfm)


def casia_b_profile(final_b=False, **kw) -> BackboneConfig:
    """Three stages of 1/1/2 layers with 64/128/128 channels, 30x64x44 input."""
    kw.setdefault("input_extents", (30, 64, 44))
    return _three_stage((64, 128, 128), kw.pop("c_stfm", 128), final_b, **kw)


def toy_profile(final_b=False, **kw) -> BackboneConfig:
    """Same layout at desk scale: 8/16/16 channels."""
    kw.setdefault("input_extents", (30, 64, 44))
    return _three_stage((8, 16, 16), kw.pop("c_stfm", 16), final_b, **kw)


def tiny_profile(final_b=False, **kw) -> BackboneConfig:
    """Gradient-check scale: 2/4/4 channels on 4x8x6 input."""
    kw.setdefault("input_extents", (4, 8, 6))
    return _three_stage((2, 4, 4), kw.pop("c_stfm", 4), final_b, **kw)


def large_profile(**kw) -> BackboneConfig:
    """Four-stage 64/128/256/512 layout: pool, LTA, pool, none."""
    kw.setdefault("input_extents", (30, 64, 44))
    c_stfm = kw.pop("c_stfm", 256)
    return BackboneConfig(
        stages=(
            StageConfig(2, 64, ("A", "A"), "pool"),
            StageConfig(2, 128, ("A", "A"), "lta"),
            StageConfig(2, 256, ("A", "A"), "pool"),
            StageConfig(4, 512, ("A", "A", "A", "A"), "none"),
        ),
        **kw, c_stfm=c_stfm)


PROFILES = {
    "casia-b": casia_b_profile,
    "toy": toy_profile,
    "tiny": tiny_profile,
    "large": large_profile,
}


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def _init_uniform(rng, shape, fan_in, dtype):
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, shape).astype(dtype)


class Conv3dLayer:
    def __init__(self, spec: ConvSpec, name: str, rng: np.random.Generator, dtype):
        kt, kh, kw = spec.kernel
        fan_in = spec.in_channels * kt * kh * kw
        self.spec = spec
        self.w = Param(_init_uniform(rng, (spec.out_channels, spec.in_channels, kt, kh, kw),
                                     fan_in, dtype), name=f"{name}.w")
        self.b = Param(np.zeros(spec.out_channels, dtype=dtype), name=f"{name}.b") \
            if spec.has_bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.w, self.b, self.spec.stride, self.spec.resolved_pad())

    def parameters(self):
        return [self.w] + ([self.b] if self.b is not None else [])


def lta(x: Tensor, weight: Param, bias: Param | None, a: int, b: int) -> Tensor:
    """Local temporal aggregation: temporal-kernel-a conv at temporal stride b."""
    if x.data.shape[2] < a:
        raise DimensionError(
            f"temporal aggregation needs T >= {a}, got T = {x.data.shape[2]}")
    return conv3d(x, weight, bias, stride=(b, 1, 1), pad=(0, 0, 0))


def gfr(x: Tensor, conv: Conv3dLayer, slope: float = LEAKY_SLOPE) -> Tensor:
    """Global branch: full-map convolution plus leaky activation."""
    return ad.leaky_relu(conv(x), slope)


def lfr_traditional(x: Tensor, conv: Conv3dLayer, n: int,
                    slope: float = LEAKY_SLOPE) -> Tensor:
    """Fixed-partition local branch: shared conv per part, concatenated."""
    parts = mk.partition_fixed(x, n)
    outs = [ad.leaky_relu(conv(p), slope) for p in parts]
    return ad.concat(outs, 3)


def lfr_masked(x: Tensor, conv: Conv3dLayer, pair: mk.MaskPair,
               slope: float | None = LEAKY_SLOPE) -> Tensor:
    """Mask-based local branch: act(conv(x*p)) + act(conv(x*q)), shared weights.

    slope=None replaces the activation with identity (test mode); the
    branch convolution is expected to be bias-free so the complementary
    pair reduces to a plain convolution under identity activation.
    """
    def act(t):
        return t if slope is None else ad.leaky_relu(t, slope)

    branch_p = act(conv(mk.apply(x, pair.p)))
    branch_q = act(conv(mk.apply(x, pair.q)))
    return ad.add(branch_p, branch_q)


class GLCL:
    """Global and local convolutional layer (variant A: sum, B: concat)."""

    def __init__(self, in_channels: int, out_channels: int, variant: str,
                 strategy: mk.MaskStrategy, name: str, rng, dtype,
                 kernel=(3, 3, 3), eval_mask: str = "none"):
        gspec = ConvSpec(in_channels, out_channels, kernel, has_bias=True)
        lspec = ConvSpec(in_channels, out_channels, kernel, has_bias=False)
        if (gspec.out_channels, gspec.kernel, gspec.resolved_pad()) != \
                (lspec.out_channels, lspec.kernel, lspec.resolved_pad()):
            raise ConfigurationError("global and local branches disagree on output shape")
        self.variant = variant
        self.strategy = strategy
        self.eval_mask = eval_mask
        self.gconv = Conv3dLayer(gspec, f"{name}.gconv", rng, dtype)
        self.lconv = Conv3dLayer(lspec, f"{name}.lconv", rng, dtype)

    def _draw_pair(self, h, w, rng, training):
        if training:
            return mk.generate(self.strategy, h, w, rng)
        if self.eval_mask == "fixed2":
            return mk.generate(mk.MaskStrategy(mk.FIXED_PART, n=2), h, w, rng)
        return mk.no_mask_pair(h, w)

    def __call__(self, x: Tensor, rng, training: bool) -> Tensor:
        h, w = x.data.shape[-2:]
        pair = self._draw_pair(h, w, rng, training)
        log.debug("glcl %s: drew %s mask pair (%dx%d)",
                  self.variant, self.strategy.kind if training else "eval", h, w)
        if self.variant == "A":
            return fused_glcl_a(x, self.gconv.w, self.gconv.b, self.lconv.w,
                                pair.p, pair.q, LEAKY_SLOPE)
        g = gfr(x, self.gconv)
        l = lfr_masked(x, self.lconv, pair)
        return ad.concat([g, l], 3)

    def parameters(self):
        return self.gconv.parameters() + self.lconv.parameters()


class LTALayer:
    def __init__(self, channels: int, a: int, b: int, name: str, rng, dtype):
        self.a, self.b = a, b
        self.w = Param(_init_uniform(rng, (channels, channels, a, 1, 1),
                                     channels * a, dtype), name=f"{name}.w")
        self.bias = Param(np.zeros(channels, dtype=dtype), name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return lta(x, self.w, self.bias, self.a, self.b)

    def parameters(self):
        return [self.w, self.bias]


# ---------------------------------------------------------------------------
# Head
# ---------------------------------------------------------------------------

def temporal_map(x: Tensor) -> Tensor:
    """Max over the full temporal axis: [N,C,T,H,W] -> [N,C,1,H,W]."""
    t = x.data.shape[2]
    return pool(x, "max", (t, 1, 1), (1, 1, 1))


def spatial_map(x: Tensor, mode: str, alpha=1.0, beta=1.0,
                p: Param | None = None) -> Tensor:
    """Reduce each horizontal strip across the width: [N,C,1,H,W] -> [N,C,H]."""
    n, c, _, h, w = x.data.shape
    if mode == "maxavg":
        parts = []
        if alpha:
            parts.append(pool(x, "max", (1, 1, w), (1, 1, 1)))
        if beta:
            parts.append(pool(x, "avg", (1, 1, w), (1, 1, 1)))
        if not parts:
            raise ConfigurationError("maxavg head needs alpha or beta nonzero")
        y = parts[0] if len(parts) == 1 else ad.add(parts[0], parts[1])
        return ad.reshape(y, (n, c, h))
    if mode == "gem":
        if p is None:
            raise ConfigurationError("gem head needs the exponent parameter")
        clamped = ad.leaky_relu(x, 0.0)  # Eq-style power needs non-negative input
        y = ad.gem_lastaxis(clamped, p)
        return ad.reshape(y, (n, c, h))
    raise ConfigurationError(f"unknown spatial mapping mode {mode!r}")


def separate_fc(x: Tensor, weights: Param) -> Tensor:
    """Independent per-strip FC bank: [N,C,S] x [S,C,O] -> [N,S,O], no bias."""
    return ad.strip_fc(x, weights)


@dataclass
class EmbeddingMatrix:
    """Per-sample representation: strips x channels, strip 0 on top."""

    values: np.ndarray

    @property
    def strips(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------

class GaitGLModel:
    """Backbone + head (+ optional training-only classifier bank)."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator,
                 num_classes: int | None = None, dtype=None):
        dtype = dtype or ad.default_dtype()
        self.cfg = cfg
        self.dtype = dtype
        self.stages = []
        cin = cfg.in_channels
        for si, stage in enumerate(cfg.stages):
            layers = [GLCL(cin if li == 0 else stage.channels, stage.channels,
                           stage.variants[li], cfg.mask,
                           f"backbone.stage{si}.glcl{li}", rng, dtype,
                           eval_mask=cfg.eval_mask)
                      for li in range(stage.glcl_count)]
            suffix = None
            if stage.followed_by == "lta":
                suffix = LTALayer(stage.channels, stage.lta_kernel, stage.lta_stride,
                                  f"backbone.stage{si}.lta", rng, dtype)
            self.stages.append((layers, stage.followed_by, suffix))
            cin = stage.channels

        strips = cfg.embedding_strips()
        self.strips = strips
        self.fc = Param(_init_uniform(rng, (strips, cfg.stages[-1].channels, cfg.c_stfm),
                                      cfg.stages[-1].channels, dtype), name="head.fc.w")
        self.gem_p = Param(np.asarray(cfg.p_init, dtype=dtype), name="head.gem.p") \
            if cfg.head == "gem" else None
        self.classifier = None
        if num_classes is not None:
            self.classifier = Param(
                _init_uniform(rng, (strips, cfg.c_stfm, num_classes), cfg.c_stfm, dtype),
                name="classifier.fc.w")

    # -- forward ------------------------------------------------------------

    def backbone_forward(self, x: Tensor, rng, training: bool,
                         stage_outputs: list | None = None) -> Tensor:
        expected = (self.cfg.in_channels,) + tuple(self.cfg.input_extents)
        got = tuple(x.data.shape[1:])
        if training and got != expected:
            raise DimensionError(
                f"input extents {got} do not match configured profile {expected}")
        out = x
        for si, (layers, kind, suffix) in enumerate(self.stages):
            try:
                for layer in layers:
                    out = layer(out, rng, training)
                if kind == "lta":
                    out = suffix(out)
                elif kind == "pool":
                    out = pool(out, "max", (1, 2, 2), (1, 2, 2))
            except DimensionError as exc:
                raise DimensionError(f"stage {si + 1}: {exc}") from exc
            if stage_outputs is not None:
                stage_outputs.append(tuple(out.data.shape))
        return out

    def embed_batch(self, x: Tensor, rng, training: bool) -> Tensor:
        """[N,1,T,H,W] -> per-strip embeddings [N, strips, c_stfm]."""
        fm = self.backbone_forward(x, rng, training)
        y = temporal_map(fm)
        y = spatial_map(y, self.cfg.head, self.cfg.alpha, self.cfg.beta, self.gem_p)
        if y.data.shape[2] != self.strips:
            raise ConfigurationError(
                f"head built for {self.strips} strips but feature map has {y.data.shape[2]}")
        return separate_fc(y, self.fc)

    def embed(self, batch: np.ndarray, rng=None) -> list[EmbeddingMatrix]:
        """Deterministic evaluation-mode embeddings for a [N,1,T,H,W] batch."""
        with ad.no_grad():
            emb = self.embed_batch(Tensor(np.asarray(batch, dtype=self.dtype)),
                                   rng, training=False)
        return [EmbeddingMatrix(v.copy()) for v in emb.data]

    def logits(self, emb: Tensor) -> Tensor:
        if self.classifier is None:
            raise ConfigurationError("model was built without a classifier head")
        # emb is [N,S,C]; the strip-FC bank expects [N,C,S].
        return ad.strip_fc(ad.swap_last2(emb), self.classifier)

    # -- parameters ----------------------------------------------------------

    def parameters(self) -> list[Param]:
        params = []
        for layers, _, suffix in self.stages:
            for layer in layers:
                params.extend(layer.parameters())
            if suffix is not None:
                params.extend(suffix.parameters())
        params.append(self.fc)
        if self.gem_p is not None:
            params.append(self.gem_p)
        if self.classifier is not None:
            params.append(self.classifier)
        return params

    def named_parameters(self) -> dict[str, Param]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()
