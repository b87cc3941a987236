"""Finite-difference sweep over every differentiable op, used by tests and the CLI.

Each case draws its inputs from its own seed and contracts the output with a
fixed random tensor, so the scalar under test depends on every output entry.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .backbones import StemConfig, build_model
from .block import ATM, STYLES, AtmConfig, DomainTransform, Extractor, domain_transform, \
    feature_extract, tconv
from .interact import ContextSpec, MulParams, op_add, op_div_log, op_mul_local, op_sub, \
    span_and_interact
from .tensor import Tensor, conv2d, cross_entropy, finite_diff_check

OP_TOL = 1e-4
STEM_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    errors: list
    tol: float

    @property
    def worst(self) -> float:
        return max(self.errors)

    @property
    def ok(self) -> bool:
        return self.worst < self.tol


def _contract(fn, rng):
    R = {}

    def f(t):
        out = fn(t)
        if "r" not in R:
            R["r"] = rng.normal(size=out.shape)
        return (out * Tensor(R["r"])).sum()
    return f


def _pair_case(op):
    def case(rng):
        C, H, W = rng.integers(1, 4), rng.integers(2, 6), rng.integers(2, 6)
        if op == "/":
            a, b = rng.random((C, H, W)) * 2, rng.random((C, H, W)) * 2
            fa = lambda t: op_div_log(t, b)
            fb = lambda t: op_div_log(a, t)
        elif op == "*":
            P = int(rng.choice([1, 3]))
            a, b = rng.normal(size=(C, H, W)), rng.normal(size=(C, H, W))
            fa = lambda t: op_mul_local(t, b, MulParams(P))
            fb = lambda t: op_mul_local(a, t, MulParams(P))
        else:
            fn = op_add if op == "+" else op_sub
            a, b = rng.normal(size=(C, H, W)), rng.normal(size=(C, H, W))
            fa, fb = (lambda t: fn(t, b)), (lambda t: fn(a, t))
        return max(finite_diff_check(_contract(fa, rng), a),
                   finite_diff_check(_contract(fb, rng), b))
    return case


def _span_case(op):
    def case(rng):
        T, C, H = rng.integers(2, 5), rng.integers(1, 3), rng.integers(3, 5)
        Z = int(rng.choice([1, 2, 4]))
        x = rng.random((T, C, H, H)) if op == "/" else rng.normal(size=(T, C, H, H))
        f = lambda t: span_and_interact(t, ContextSpec(Z), op, MulParams(3)).data
        return finite_diff_check(_contract(f, rng), x)
    return case


def _conv_case(rng):
    C, O, H = rng.integers(1, 3), rng.integers(1, 3), rng.integers(3, 6)
    s, p = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x, w, b = rng.normal(size=(2, C, H, H)), rng.normal(size=(O, C, 3, 3)), rng.normal(size=O)
    return max(finite_diff_check(_contract(lambda t: conv2d(t, w, b, s, p), rng), x),
               finite_diff_check(_contract(lambda t: conv2d(x, t, b, s, p), rng), w))


def _tconv_case(rng):
    T, C = rng.integers(1, 5), rng.integers(1, 4)
    x, w = rng.normal(size=(T, C, 3, 2)), rng.normal(size=(C, 3))
    return max(finite_diff_check(_contract(lambda t: tconv(t, w), rng), x),
               finite_diff_check(_contract(lambda t: tconv(x, t), rng), w))


def _extract_case(rng):
    kind = ("fc", "mlp", "conv_stack")[rng.integers(3)]
    ext = Extractor(kind, 2, 3, rng=rng)
    y = rng.normal(size=(2, 2, 2, 4, 4))
    return finite_diff_check(_contract(lambda t: feature_extract(t, ext), rng), y, smooth_only=True)


def _transform_case(rng):
    T, Z, ce, C = 2, int(rng.choice([1, 2])), 2, 3
    proj = DomainTransform(Z * ce, C)
    proj.weight.data = rng.normal(size=proj.weight.shape)
    y, x = rng.normal(size=(T, Z, ce, 4, 4)), rng.normal(size=(T, C, 4, 4))
    return max(finite_diff_check(_contract(lambda t: domain_transform(t, x, proj), rng), y),
               finite_diff_check(_contract(lambda t: domain_transform(y, t, proj), rng), x))


def _randomize(module, rng, scale=0.5):
    for p in module.parameters():
        p.data = rng.normal(0.0, scale, p.shape)


def _block_case(rng):
    style = STYLES[rng.integers(len(STYLES))]
    pool = ["+", "-", "*", "/"]
    if style == "single":
        ops = (pool[rng.integers(4)],)
    else:
        ops = tuple(rng.choice(pool, size=2, replace=False))
    cfg = AtmConfig(ops=ops, context=int(rng.choice([1, 2])), mul=3,
                    extractor=("fc", "mlp", "conv_stack")[rng.integers(3)],
                    combine=style, width=2, div_shift=True,
                    reduce_spatial=bool(rng.integers(2)))
    block = ATM(cfg, 2, rng=rng)
    _randomize(block, rng)
    x = rng.random((3, 2, 4, 4))
    return finite_diff_check(_contract(block, rng), x, smooth_only=True)


def _stem_case(kind):
    def case(rng):
        if kind == "cnn":
            stem = StemConfig(kind="cnn", image_size=8, frames=2, channels=(2, 2, 3),
                              blocks_per_stage=1, atm_site=int(rng.integers(1, 4)),
                              use_tconv=bool(rng.integers(2)))
        else:
            stem = StemConfig(kind="attention", image_size=8, frames=2, width=4, heads=2,
                              layers=2, patch=4, mlp_ratio=1, atm_site=int(rng.integers(1, 3)),
                              use_tconv=bool(rng.integers(2)))
        op = ("+", "-", "*", "/")[rng.integers(4)]
        model = build_model(stem, AtmConfig(ops=(op,), context=2, mul=3, extractor="fc",
                                            width=2, div_shift=True), seed=int(rng.integers(1 << 30)))
        _randomize(model.atm.transform, rng, 0.3)
        labels = rng.integers(0, 2, size=2)
        clips = rng.random((2, 2, 1, 8, 8))
        return finite_diff_check(lambda t: cross_entropy(model(t), labels), clips,
                                 smooth_only=True)
    return case


def suite() -> list[tuple[str, object, float]]:
    cases = [(f"op{name}", _pair_case(op), OP_TOL)
             for name, op in (("_add", "+"), ("_sub", "-"), ("_div_log", "/"), ("_mul_local", "*"))]
    cases += [(f"span_and_interact[{op}]", _span_case(op), OP_TOL) for op in ("+", "-", "*", "/")]
    cases += [("conv2d", _conv_case, OP_TOL), ("tconv", _tconv_case, OP_TOL),
              ("feature_extract", _extract_case, OP_TOL),
              ("domain_transform", _transform_case, OP_TOL), ("atm_block", _block_case, OP_TOL),
              ("cnn_stem", _stem_case("cnn"), STEM_TOL),
              ("attention_stem", _stem_case("attention"), STEM_TOL)]
    return cases


def run_suite(instances: int = 20, seed: int = 0, log=None) -> list[CheckResult]:
    results = []
    for k, (name, case, tol) in enumerate(suite()):
        t0 = time.perf_counter()
        errs = [float(case(np.random.default_rng([seed, k, i]))) for i in range(instances)]
        res = CheckResult(name, errs, tol)
        results.append(res)
        if log is not None:
            log(f"{'ok  ' if res.ok else 'FAIL'} {name:28s} worst {res.worst:.2e} "
                f"(tol {tol:g}, n={instances}, {time.perf_counter() - t0:.1f}s)")
    return results
