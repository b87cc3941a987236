"""The arithmetic temporal block: interaction, clue extraction, projection back
onto the per-frame stem, plus temporal convolution and the MAC estimator."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .interact import (ContextSpec, InteractionTensor, MulParams, apply_op, canonical_op,
                       context_table, out_channels, span_and_interact)
from .nn import HE_GAIN, Conv2d, Module
from .tensor import (Tensor, amin, avg_pool2, concat, conv2d, getitem, make_node, relu,
                     tensor, upsample2)

EXTRACTORS = ("fc", "mlp", "conv_stack")
STYLES = ("single", "cascade", "parallel", "atm_style")


@dataclass
class AtmConfig:
    ops: tuple = ("-",)
    context: ContextSpec = field(default_factory=ContextSpec)
    mul: MulParams = field(default_factory=MulParams)
    eps: float = 1.0
    extractor: str = "conv_stack"
    reduce_spatial: bool = False
    combine: str = "single"
    width: int | None = None  # clue channels C_e; None -> host channels
    div_shift: bool = False  # shift division operands by their per-clip minimum

    def __post_init__(self):
        if isinstance(self.ops, str):
            self.ops = (self.ops,)
        self.ops = tuple(canonical_op(o) for o in self.ops)
        if isinstance(self.context, dict):
            self.context = ContextSpec(**self.context)
        elif isinstance(self.context, int):
            self.context = ContextSpec(self.context)
        if isinstance(self.mul, dict):
            self.mul = MulParams(**self.mul)
        elif isinstance(self.mul, int):
            self.mul = MulParams(self.mul)
        if not self.ops:
            raise ValueError("at least one arithmetic op is required")
        if len(set(self.ops)) != len(self.ops):
            raise ValueError(f"duplicate ops in {self.ops}")
        if self.extractor not in EXTRACTORS:
            raise ValueError(f"extractor must be one of {EXTRACTORS}, got {self.extractor!r}")
        if self.combine not in STYLES:
            raise ValueError(f"combine style must be one of {STYLES}, got {self.combine!r}")
        if self.combine == "single" and len(self.ops) != 1:
            raise ValueError("single style takes exactly one op")
        if self.combine != "single" and len(self.ops) < 2:
            raise ValueError(f"{self.combine} style needs at least two ops")
        if self.width is not None and self.width < 1:
            raise ValueError("width must be positive")

    @property
    def z(self) -> int:
        return self.context.z_range

    def to_dict(self) -> dict:
        return {"ops": list(self.ops), "context": self.z, "mul": self.mul.neighborhood,
                "eps": self.eps, "extractor": self.extractor,
                "reduce_spatial": self.reduce_spatial, "combine": self.combine,
                "width": self.width, "div_shift": self.div_shift}


# ------------------------------------------------------------- extractors
class Extractor(Module):
    """Maps each (t, z) clue slice ``C' x h x w`` to ``C_e x h x w``."""

    def __init__(self, kind: str, c_in: int, c_out: int, rng=None):
        if kind not in EXTRACTORS:
            raise ValueError(f"unknown extractor {kind!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kind = kind
        # He gain: with the 1/fan_in bound the clues shrink layer by layer and
        # the zero-initialised projection barely sees them
        # bias-free, so a zero interaction gives a zero clue
        conv = lambda ci, co, k: Conv2d(ci, co, k, rng=rng, gain=HE_GAIN, bias=False)
        if kind == "fc":
            self.layers = [conv(c_in, c_out, 1)]
        elif kind == "mlp":
            self.layers = [conv(c_in, c_out, 1), conv(c_out, c_out, 1), conv(c_out, c_out, 1)]
        else:
            self.layers = [conv(c_in, c_out, 3), conv(c_out, c_out, 3)]
        self.c_in, self.c_out = c_in, c_out

    def forward(self, y):
        y = tensor(y)
        lead, (c, h, w) = y.shape[:-3], y.shape[-3:]
        out = y.reshape((-1, c, h, w))
        for i, layer in enumerate(self.layers):
            if i:
                out = relu(out)
            out = layer(out)
        return out.reshape(lead + (self.c_out, h, w))

    def macs_per_slice(self, h: int, w: int) -> int:
        return sum(layer.macs(h, w) for layer in self.layers)


def feature_extract(y, extractor: Extractor) -> Tensor:
    """Run ``extractor`` on every (t, z) slice, keeping the T x Z layout."""
    data = y.data if isinstance(y, InteractionTensor) else tensor(y)
    return extractor(data)


class DomainTransform(Module):
    """Bias-free 1x1 projection of the regrouped Z*C_e channels back to C; zero-initialised."""

    def __init__(self, c_in: int, c_out: int):
        self.weight = Tensor(np.zeros((c_out, c_in, 1, 1)), requires_grad=True)

    def forward(self, y, x):
        return domain_transform(y, x, self)


def domain_transform(y, x, proj: DomainTransform) -> Tensor:
    """Regroup ``(..., T, Z, C_e, H, W)`` to ``(..., T, Z*C_e, H, W)``, project, add to x."""
    y = y.data if isinstance(y, InteractionTensor) else tensor(y)
    x = tensor(x)
    if y.ndim != x.ndim + 1 or y.shape[:-4] != x.shape[:-3] or y.shape[-2:] != x.shape[-2:]:
        raise ValueError(f"interaction {y.shape} does not line up with features {x.shape}")
    z, ce, h, w = y.shape[-4:]
    if proj.weight.shape[1] != z * ce or proj.weight.shape[0] != x.shape[-3]:
        raise ValueError(f"projection expects {proj.weight.shape[1]} -> {proj.weight.shape[0]} "
                         f"channels, got {z * ce} -> {x.shape[-3]}")
    flat = y.reshape((-1, z * ce, h, w))
    out = conv2d(flat, proj.weight)
    return x + out.reshape(x.shape)


# ------------------------------------------------------------ the block
def _clip_axes(x: Tensor, n_inner: int):
    return tuple(range(x.ndim - n_inner, x.ndim))


def _shift_nonneg(x: Tensor, n_inner: int) -> Tensor:
    return x - amin(x, axis=_clip_axes(x, n_inner), keepdims=True)


def fuse_parallel(clues: list) -> Tensor:
    out = clues[0]
    for c in clues[1:]:
        out = out + c
    return out


def fuse_concat(clues: list) -> Tensor:
    return concat(clues, axis=-3)


def interact_slots(y, op: str, spec: ContextSpec, p: MulParams, eps: float) -> Tensor:
    """Second-level interaction on a clue stack ``(..., T, Z, C, h, w)``.

    Within each slot z, entry t is paired with the same slot of its z-th
    context frame, so the T x Z layout is kept.
    """
    y = tensor(y)
    t_axis = y.ndim - 5
    T, Z = y.shape[t_axis], y.shape[t_axis + 1]
    table = context_table(T, spec)
    if table.shape[1] != Z:
        raise ValueError("clue stack Z does not match the context spec")
    idx = (slice(None),) * t_axis + (table, np.arange(Z)[None, :])
    return apply_op(op, y, getitem(y, idx), p, eps)


class ATM(Module):
    """Arithmetic temporal block for features with ``channels`` channels.

    Input is ``(T, C, H, W)`` or ``(B, T, C, H, W)``; output has the same shape.
    """

    def __init__(self, cfg: AtmConfig, channels: int, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.channels = channels
        ce = cfg.width or channels
        self.clue_width = ce
        if cfg.combine == "cascade":
            c_in = [out_channels(cfg.ops[0], channels, cfg.mul)]
            c_in += [out_channels(op, ce, cfg.mul) for op in cfg.ops[1:]]
        else:
            c_in = [out_channels(op, channels, cfg.mul) for op in cfg.ops]
        self.extractors = [Extractor(cfg.extractor, c, ce, rng=rng) for c in c_in]
        c_t = ce * len(cfg.ops) if cfg.combine == "atm_style" else ce
        self.transform = DomainTransform(cfg.z * c_t, channels)

    def _span(self, x, op):
        if op == "/" and self.cfg.div_shift:
            x = _shift_nonneg(x, 4)
        return span_and_interact(x, self.cfg.context, op, self.cfg.mul, self.cfg.eps)

    def clues(self, x) -> Tensor:
        """Extracted clue stack ``(..., T, Z, C_t, h, w)`` before projection."""
        cfg = self.cfg
        if cfg.combine == "cascade":
            y = feature_extract(self._span(x, cfg.ops[0]), self.extractors[0])
            for op, ext in zip(cfg.ops[1:], self.extractors[1:]):
                # extracted clues are signed, so a later log ratio always needs the shift
                src = _shift_nonneg(y, 5) if op == "/" else y
                y = feature_extract(interact_slots(src, op, cfg.context, cfg.mul, cfg.eps), ext)
            return y
        clues = [feature_extract(self._span(x, op), ext) for op, ext in zip(cfg.ops, self.extractors)]
        if cfg.combine == "parallel":
            return fuse_parallel(clues)
        if cfg.combine == "atm_style":
            return fuse_concat(clues)
        return clues[0]

    def forward(self, x):
        x = tensor(x)
        if x.ndim not in (4, 5):
            raise ValueError(f"expected (T, C, H, W) or (B, T, C, H, W), got {x.shape}")
        if x.shape[-3] != self.channels:
            raise ValueError(f"block built for {self.channels} channels, got {x.shape[-3]}")
        src = x
        if self.cfg.reduce_spatial:
            src = avg_pool2(x)
        y = self.clues(src)
        if self.cfg.reduce_spatial:
            y = upsample2(y)
        return domain_transform(y, x, self.transform)


def atm_forward(x, block: ATM) -> Tensor:
    if block.cfg.combine != "single":
        raise ValueError("atm_forward takes a single-op block; use combine_atms")
    return block(x)


def combine_atms(x, block: ATM) -> Tensor:
    return block(x)


# ---------------------------------------------------------- temporal conv
def tconv(x, weight, time_axis: int = 0) -> Tensor:
    """Depthwise length-3 convolution along ``time_axis``, zero padded.

    The channel axis follows the time axis; ``weight`` is ``(C, 3)`` with tap
    ``j`` reading frame ``t + j - 1``.
    """
    x, weight = tensor(x), tensor(weight)
    ta = time_axis % x.ndim
    T, C = x.shape[ta], x.shape[ta + 1]
    if weight.shape != (C, 3):
        raise ValueError(f"weight must be ({C}, 3), got {weight.shape}")
    tail = (1,) * (x.ndim - ta - 2)
    taps = [weight.data[:, j].reshape((C,) + tail) for j in range(3)]

    def sl(lo, hi):
        s = [slice(None)] * x.ndim
        s[ta] = slice(lo, hi)
        return tuple(s)

    # (dest, src) frame ranges for shifts -1, 0, +1
    ranges = [(sl(1, T), sl(0, T - 1)), (sl(0, T), sl(0, T)), (sl(0, T - 1), sl(1, T))]
    out = np.zeros_like(x.data)
    for j, (dst, src) in enumerate(ranges):
        out[dst] += taps[j] * x.data[src]

    def bw(g):
        gx = np.zeros_like(x.data)
        gw = np.zeros((C, 3))
        red = tuple(i for i in range(x.ndim) if i != ta + 1)
        for j, (dst, src) in enumerate(ranges):
            gx[src] += taps[j] * g[dst]
            gw[:, j] = (g[dst] * x.data[src]).sum(axis=red)
        return gx, gw

    return make_node(out, (x, weight), bw)


class TConv(Module):
    def __init__(self, channels: int):
        w = np.zeros((channels, 3))
        w[:, 1] = 1.0
        self.weight = Tensor(w, requires_grad=True)

    def forward(self, x, time_axis: int = 0):
        return tconv(x, self.weight, time_axis)


# ------------------------------------------------------------ cost model
def _interaction_macs(op: str, channels: int, p: MulParams, h: int, w: int) -> int:
    per_pos = p.neighborhood ** 2 * channels if op == "*" else channels
    return per_pos * h * w


def _extractor_macs(kind: str, c_in: int, ce: int, h: int, w: int) -> int:
    if kind == "fc":
        per_pos = c_in * ce
    elif kind == "mlp":
        per_pos = c_in * ce + 2 * ce * ce
    else:
        per_pos = 9 * (c_in * ce + ce * ce)
    return per_pos * h * w


def flops_breakdown(cfg: AtmConfig, stem_shape) -> dict[str, int]:
    """MACs of one block on features ``(T, C, H, W)``.

    Elementwise ops count one MAC per output element; pooling, upsampling and
    biases are not counted.
    """
    T, C, H, W = stem_shape
    h, w = (H // 2, W // 2) if cfg.reduce_spatial else (H, W)
    ce = cfg.width or C
    Z = cfg.z
    inter = extr = 0
    for n, op in enumerate(cfg.ops):
        c_src = ce if (cfg.combine == "cascade" and n) else C
        inter += T * Z * _interaction_macs(op, c_src, cfg.mul, h, w)
        extr += T * Z * _extractor_macs(cfg.extractor, out_channels(op, c_src, cfg.mul), ce, h, w)
    c_t = ce * len(cfg.ops) if cfg.combine == "atm_style" else ce
    transform = T * H * W * Z * c_t * C
    return {"interaction": inter, "extractor": extr, "transform": transform}


def estimate_flops(cfg: AtmConfig, stem_shape) -> int:
    return sum(flops_breakdown(cfg, stem_shape).values())
