"""Context spanning and the four pair-wise frame operations.

Frames are ``(..., C, H, W)`` arrays; clips are ``(T, C, H, W)`` or batched
``(B, T, C, H, W)``. ``span_and_interact`` pairs every anchor frame with its
``Z`` context frames and stacks the results into ``(..., T, Z, C', H, W)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, log, make_node, sub, take, tensor

OPS = ("+", "-", "*", "/")
_ALIASES = {"add": "+", "sub": "-", "mul": "*", "div": "/",
            "+": "+", "-": "-", "*": "*", "/": "/", "x": "*", "×": "*", "÷": "/", "−": "-"}


def canonical_op(op: str) -> str:
    try:
        return _ALIASES[op]
    except KeyError:
        raise ValueError(f"unknown arithmetic op {op!r}; expected one of {OPS}") from None


@dataclass(frozen=True)
class ContextSpec:
    z_range: int = 4
    boundary: str = "clamp"

    def __post_init__(self):
        z = self.z_range
        if not isinstance(z, (int, np.integer)) or z < 1 or (z > 1 and z % 2):
            raise ValueError(f"context range must be 1 or a positive even number, got {z!r}")
        if self.boundary != "clamp":
            raise ValueError(f"unsupported boundary policy {self.boundary!r}")


@dataclass(frozen=True)
class MulParams:
    neighborhood: int = 9

    def __post_init__(self):
        p = self.neighborhood
        if p < 1 or p % 2 == 0:
            raise ValueError(f"neighborhood size must be odd and positive, got {p}")

    @property
    def max_offset(self) -> int:
        return (self.neighborhood - 1) // 2

    @property
    def offsets(self) -> list[tuple[int, int]]:
        k = self.max_offset
        return [(i, j) for i in range(-k, k + 1) for j in range(-k, k + 1)]


def context_indices(t: int, T: int, spec: ContextSpec) -> list[int]:
    """1-based indices of the context frames of anchor ``t`` in a clip of ``T`` frames."""
    if not 1 <= t <= T:
        raise ValueError(f"anchor {t} outside [1, {T}]")
    z = spec.z_range
    if z == 1:
        raw = [t + 1]
    else:
        half = z // 2
        raw = list(range(t - half, t)) + list(range(t + 1, t + half + 1))
    return [min(max(i, 1), T) for i in raw]


def context_table(T: int, spec: ContextSpec) -> np.ndarray:
    """(T, Z) array of 0-based context indices."""
    return np.array([context_indices(t, T, spec) for t in range(1, T + 1)], dtype=np.intp) - 1


def _check_pair(a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")


def op_add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_pair(a, b)
    return add(a, b)


def op_sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_pair(a, b)
    return sub(a, b)


def op_div_log(a, b, eps: float = 1.0) -> Tensor:
    """log(a + eps) - log(b + eps)."""
    a, b = tensor(a), tensor(b)
    _check_pair(a, b)
    if np.any(a.data + eps <= 0) or np.any(b.data + eps <= 0):
        raise ValueError("log-ratio argument must be positive: need a + eps > 0 and b + eps > 0")
    return sub(log(add(a, eps)), log(add(b, eps)))


def op_mul_local(a, b, p: MulParams = MulParams()) -> Tensor:
    """Local correlation of ``a`` against a P x P neighbourhood of ``b``.

    Output channel ``n`` holds offset ``p.offsets[n]``; the value at (h, w) is
    the channel dot product ``sum_c a[c, h, w] * b[c, h + i, w + j]``, with
    zeros outside the frame. Leading axes are treated as batch.
    """
    a, b = tensor(a), tensor(b)
    _check_pair(a, b)
    if a.ndim < 3:
        raise ValueError("frames must be at least (C, H, W)")
    k = p.max_offset
    C, H, W = a.shape[-3:]
    lead = a.shape[:-3]
    widths = [(0, 0)] * (a.ndim - 2) + [(k, k), (k, k)]
    bp = np.pad(b.data, widths)
    offsets = p.offsets
    out = np.empty(lead + (len(offsets), H, W))
    for n, (i, j) in enumerate(offsets):
        win = bp[..., k + i:k + i + H, k + j:k + j + W]
        acc = np.zeros(lead + (H, W))
        for c in range(C):
            acc += a.data[..., c, :, :] * win[..., c, :, :]
        out[..., n, :, :] = acc

    def bw(g):
        ga = np.zeros_like(a.data)
        gbp = np.zeros_like(bp)
        for n, (i, j) in enumerate(offsets):
            gn = g[..., n:n + 1, :, :]
            ga += gn * bp[..., k + i:k + i + H, k + j:k + j + W]
            gbp[..., k + i:k + i + H, k + j:k + j + W] += gn * a.data
        return ga, gbp[..., k:k + H, k:k + W]

    return make_node(out, (a, b), bw)


def apply_op(op: str, a, b, p: MulParams = MulParams(), eps: float = 1.0) -> Tensor:
    op = canonical_op(op)
    if op == "+":
        return op_add(a, b)
    if op == "-":
        return op_sub(a, b)
    if op == "*":
        return op_mul_local(a, b, p)
    return op_div_log(a, b, eps)


def out_channels(op: str, channels: int, p: MulParams) -> int:
    return p.neighborhood ** 2 if canonical_op(op) == "*" else channels


@dataclass
class InteractionTensor:
    """Pair-wise interaction stack of shape (..., T, Z, C', H, W)."""

    data: Tensor
    channel_kind: str  # "feature" (C' = C) or "offset" (C' = P*P)

    @property
    def shape(self) -> tuple:
        return self.data.shape


def span_and_interact(x, spec: ContextSpec, op: str, p: MulParams = MulParams(),
                      eps: float = 1.0) -> InteractionTensor:
    """Apply ``op(X_t, X_z)`` for every anchor ``t`` and context frame ``z``.

    ``x`` is a clip ``(T, C, H, W)`` or a batch ``(B, T, C, H, W)``. The anchor
    is always the first operand.
    """
    x = tensor(x)
    if x.ndim not in (4, 5) or min(x.shape) < 1:
        raise ValueError(f"expected (T, C, H, W) or (B, T, C, H, W), got {x.shape}")
    op = canonical_op(op)
    t_axis = x.ndim - 4
    T = x.shape[t_axis]
    table = context_table(T, spec)
    anchors = np.repeat(np.arange(T)[:, None], table.shape[1], axis=1)
    y = apply_op(op, take(x, anchors, t_axis), take(x, table, t_axis), p, eps)
    return InteractionTensor(y, "offset" if op == "*" else "feature")
