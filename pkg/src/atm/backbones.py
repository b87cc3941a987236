"""Miniature CNN and attention stems that host one ATM, plus the mean-pool baseline.

Both stems process frames independently and pool over time with
``sorted_mean``, so without an ATM or T-Conv their logits are exactly
invariant to frame order.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .block import ATM, AtmConfig, TConv, estimate_flops
from .nn import HE_GAIN, Conv2d, LayerNorm, Linear, Module
from .tensor import (Tensor, concat, conv_output_size, gelu, relu, softmax, sorted_mean,
                     tensor)


@dataclass
class StemConfig:
    kind: str = "cnn"  # "cnn" or "attention"
    in_channels: int = 1
    image_size: int = 28
    frames: int = 8
    num_classes: int = 2
    atm_site: int = 2  # 1-based stage (cnn) or layer (attention)
    use_tconv: bool = False
    channels: tuple = (8, 16, 32)
    blocks_per_stage: int = 2
    width: int = 32
    heads: int = 4
    layers: int = 4
    patch: int = 4
    mlp_ratio: int = 2

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if self.kind not in ("cnn", "attention"):
            raise ValueError(f"stem kind must be 'cnn' or 'attention', got {self.kind!r}")
        for name in ("in_channels", "image_size", "frames", "num_classes", "blocks_per_stage",
                     "width", "heads", "layers", "patch", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        depth = len(self.channels) if self.kind == "cnn" else self.layers
        if not 1 <= self.atm_site <= depth:
            raise ValueError(f"atm_site {self.atm_site} outside 1..{depth}")
        if self.kind == "attention":
            if self.width % self.heads:
                raise ValueError("attention width must be divisible by heads")
            if self.image_size % self.patch:
                raise ValueError("image size must be divisible by patch size")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


def _check_clips(clips: Tensor, cfg: StemConfig):
    if clips.ndim != 5:
        raise ValueError(f"clips must be (B, T, C, H, W), got {clips.shape}")
    _, T, C, H, W = clips.shape
    if C != cfg.in_channels or H != cfg.image_size or W != cfg.image_size:
        raise ValueError(f"clip frames {C}x{H}x{W} do not match stem config "
                         f"{cfg.in_channels}x{cfg.image_size}x{cfg.image_size}")
    if T != cfg.frames:
        raise ValueError(f"clip has {T} frames, config expects {cfg.frames}")


class CnnStem(Module):
    """Stages of 3x3 conv blocks (stride 2 between stages), GAP, temporal mean, linear.

    The ATM sits after the last block of stage ``atm_site``; T-Conv, when
    enabled, runs at the start of every block in the stages after it.
    """

    def __init__(self, cfg: StemConfig, atm: AtmConfig | None = None, seed: int = 0):
        if cfg.kind != "cnn":
            raise ValueError("CnnStem needs kind='cnn'")
        self.cfg, self.atm_cfg = cfg, atm
        rng = np.random.default_rng(seed)
        self.stages = []
        c_prev = cfg.in_channels
        for s, c in enumerate(cfg.channels):
            blocks = []
            for b in range(cfg.blocks_per_stage):
                stride = 2 if (s > 0 and b == 0) else 1
                blocks.append(Conv2d(c_prev if b == 0 else c, c, 3, stride=stride, rng=rng,
                                     gain=HE_GAIN, zero_bias=True))
            self.stages.append(blocks)
            c_prev = c
        self.head = Linear(c_prev, cfg.num_classes, rng=rng)
        self.tconv_stages = set(range(cfg.atm_site, len(cfg.channels))) if cfg.use_tconv else set()
        self.tconvs = [[TConv(c_in.weight.shape[1]) for c_in in self.stages[s]]
                       if s in self.tconv_stages else [] for s in range(len(cfg.channels))]
        # separate stream so adding a block leaves the stem's init untouched
        self.atm = None
        if atm is not None:
            self.atm = ATM(atm, cfg.channels[cfg.atm_site - 1], rng=np.random.default_rng([seed, 1]))

    def features(self, clips) -> Tensor:
        """Per-frame pooled features ``(B, T, C_last)``."""
        clips = tensor(clips)
        _check_clips(clips, self.cfg)
        B, T = clips.shape[:2]
        x = clips.reshape((B * T,) + clips.shape[2:])
        for s, blocks in enumerate(self.stages):
            for b, conv in enumerate(blocks):
                inp = x
                if self.tconvs[s]:
                    inp = self.tconvs[s][b](x.reshape((B, T) + x.shape[1:]), time_axis=1)
                    inp = inp.reshape(x.shape)
                y = relu(conv(inp))
                x = y if b == 0 else x + y
            if self.atm is not None and s + 1 == self.cfg.atm_site:
                x = self.atm(x.reshape((B, T) + x.shape[1:])).reshape(x.shape)
        feat = x.mean(axis=(2, 3))
        return feat.reshape((B, T, feat.shape[-1]))

    def forward(self, clips) -> Tensor:
        return self.head(sorted_mean(self.features(clips), axis=1))

    def site_shape(self) -> tuple:
        """(T, C, H, W) of the features the ATM sees."""
        size = self.cfg.image_size
        for s in range(self.cfg.atm_site):
            if s > 0:
                size = conv_output_size(size, 3, 2, 1)
        return (self.cfg.frames, self.cfg.channels[self.cfg.atm_site - 1], size, size)

    def macs(self) -> int:
        cfg = self.cfg
        size, total = cfg.image_size, 0
        for s, blocks in enumerate(self.stages):
            for b, conv in enumerate(blocks):
                if conv.stride == 2:
                    size = conv_output_size(size, 3, 2, 1)
                total += conv.macs(size, size)
                if self.tconvs[s]:
                    total += 3 * conv.weight.shape[1] * size * size
        total = total * cfg.frames + cfg.channels[-1] * cfg.num_classes
        if self.atm_cfg is not None:
            total += estimate_flops(self.atm_cfg, self.site_shape())
        return total


def tokens_to_grid(tokens, grid: int) -> Tensor:
    """(N, grid*grid, D) row-major tokens -> (N, D, grid, grid)."""
    tokens = tensor(tokens)
    n, _, d = tokens.shape
    return tokens.reshape((n, grid, grid, d)).transpose((0, 3, 1, 2))


def grid_to_tokens(x) -> Tensor:
    x = tensor(x)
    n, d, h, w = x.shape
    return x.transpose((0, 2, 3, 1)).reshape((n, h * w, d))


class _Layer(Module):
    def __init__(self, d: int, heads: int, mlp_ratio: int, rng):
        self.ln1, self.ln2 = LayerNorm(d), LayerNorm(d)
        self.qkv = Linear(d, 3 * d, rng=rng)
        self.proj = Linear(d, d, rng=rng)
        self.fc1 = Linear(d, mlp_ratio * d, rng=rng)
        self.fc2 = Linear(mlp_ratio * d, d, rng=rng)
        self.heads = heads

    def attention(self, x):
        n, s, d = x.shape
        hd = d // self.heads
        qkv = self.qkv(self.ln1(x)).reshape((n, s, 3, self.heads, hd)).transpose((2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = softmax((q @ k.transpose((0, 1, 3, 2))) * (1.0 / math.sqrt(hd)), axis=-1)
        out = (att @ v).transpose((0, 2, 1, 3)).reshape((n, s, d))
        return self.proj(out)

    def mlp(self, x):
        return self.fc2(gelu(self.fc1(self.ln2(x))))


class VitStem(Module):
    """Pre-norm transformer over per-frame patch tokens with a CLS token.

    The ATM runs on the spatial tokens (as a 2-D grid) after the attention
    sub-block of layer ``atm_site``; T-Conv mixes the CLS token over time at
    the start of every layer.
    """

    def __init__(self, cfg: StemConfig, atm: AtmConfig | None = None, seed: int = 0):
        if cfg.kind != "attention":
            raise ValueError("VitStem needs kind='attention'")
        if atm is not None and "/" in atm.ops and not atm.div_shift:
            # token features can be negative; shift them before the log ratio
            atm = replace(atm, div_shift=True)
        self.cfg, self.atm_cfg = cfg, atm
        rng = np.random.default_rng(seed)
        d, p = cfg.width, cfg.patch
        self.grid = cfg.image_size // p
        self.embed = Linear(p * p * cfg.in_channels, d, rng=rng)
        self.cls = Tensor(rng.normal(0.0, 0.02, (1, 1, d)), requires_grad=True)
        self.pos = Tensor(rng.normal(0.0, 0.02, (1, self.grid ** 2 + 1, d)), requires_grad=True)
        self.layers = [_Layer(d, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.layers)]
        self.norm = LayerNorm(d)
        self.head = Linear(d, cfg.num_classes, rng=rng)
        self.tconvs = [TConv(d) for _ in range(cfg.layers)] if cfg.use_tconv else []
        self.atm = None
        if atm is not None:
            self.atm = ATM(atm, d, rng=np.random.default_rng([seed, 1]))

    def patchify(self, clips: Tensor) -> Tensor:
        B, T, C, H, W = clips.shape
        g, p = self.grid, self.cfg.patch
        x = clips.reshape((B * T, C, g, p, g, p)).transpose((0, 2, 4, 3, 5, 1))
        return x.reshape((B * T, g * g, p * p * C))

    def features(self, clips) -> Tensor:
        """Final CLS embeddings ``(B, T, D)``."""
        clips = tensor(clips)
        _check_clips(clips, self.cfg)
        B, T = clips.shape[:2]
        n, d = B * T, self.cfg.width
        x = self.embed(self.patchify(clips))
        x = concat([self.cls + Tensor(np.zeros((n, 1, d))), x], axis=1) + self.pos
        for i, layer in enumerate(self.layers):
            if self.tconvs:
                cls = self.tconvs[i](x[:, 0, :].reshape((B, T, d)), time_axis=1)
                x = concat([cls.reshape((n, 1, d)), x[:, 1:, :]], axis=1)
            x = x + layer.attention(x)
            if self.atm is not None and i + 1 == self.cfg.atm_site:
                g = self.grid
                sp = tokens_to_grid(x[:, 1:, :], g).reshape((B, T, d, g, g))
                sp = grid_to_tokens(self.atm(sp).reshape((n, d, g, g)))
                x = concat([x[:, :1, :], sp], axis=1)
            x = x + layer.mlp(x)
        return self.norm(x[:, 0, :]).reshape((B, T, d))

    def forward(self, clips) -> Tensor:
        return self.head(sorted_mean(self.features(clips), axis=1))

    def site_shape(self) -> tuple:
        return (self.cfg.frames, self.cfg.width, self.grid, self.grid)

    def macs(self) -> int:
        cfg = self.cfg
        d, s = cfg.width, self.grid ** 2 + 1
        per_layer = s * (3 * d * d + d * d + 2 * cfg.mlp_ratio * d * d) + 2 * s * s * d
        per_frame = self.grid ** 2 * cfg.patch ** 2 * cfg.in_channels * d + cfg.layers * per_layer
        total = per_frame * cfg.frames + d * cfg.num_classes
        if self.tconvs:
            total += cfg.layers * 3 * d * cfg.frames
        if self.atm_cfg is not None:
            total += estimate_flops(self.atm_cfg, self.site_shape())
        return total


def build_model(cfg: StemConfig, atm: AtmConfig | None = None, seed: int = 0):
    cls = CnnStem if cfg.kind == "cnn" else VitStem
    return cls(cfg, atm, seed)


def build_baseline(cfg: StemConfig, seed: int = 0):
    """Temporally blind model: no ATM, no T-Conv, mean pooling over frames."""
    return build_model(replace(cfg, use_tconv=False), None, seed)
