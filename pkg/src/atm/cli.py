"""Command-line entry point: gen, train, eval, gradcheck, flops, viz, ablate.

Usage errors (unknown flags, malformed configs) exit with 2; failures while
running exit with 1.
"""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .backbones import StemConfig, build_model
from .block import AtmConfig, flops_breakdown
from .gradcheck import run_suite
from .harness import RunReport, TrainConfig, evaluate, make_data, train
from .interact import MulParams
from .synth import SynthClipSpec, gen_clip, visualize_ops, write_dataset

log = logging.getLogger("atm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _load_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config not found: {path}")
    except json.JSONDecodeError as e:
        raise UsageError(f"malformed config {path}: {e}")
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return data


def _train_config(args) -> TrainConfig:
    raw = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad train config: {e}")


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen(args) -> int:
    cfg = _train_config(args)
    out = _out_dir(args, "data")
    base = cfg.dataset.base_spec()
    for split, n in (("train", cfg.dataset.n_train), ("test", cfg.dataset.n_test)):
        paths = write_dataset(out, split, base, n)
        print(f"{split}: {len(paths)} clips -> {out / split}")
    return 0


def _save_run(out: Path, report: RunReport, model):
    report.to_json(out / "report.json")
    np.savez(out / "weights.npz", **model.state_dict())


def cmd_train(args) -> int:
    cfg = _train_config(args)
    out = _out_dir(args, "run")
    report, model = train(cfg)
    _save_run(out, report, model)
    print(f"test_top1 {report.test_top1:.4f}  macs {report.macs}  -> {out}")
    return 0


def cmd_eval(args) -> int:
    run = Path(args.out or "run")
    report_path, weights_path = run / "report.json", run / "weights.npz"
    if not report_path.exists() or not weights_path.exists():
        raise UsageError(f"{run} does not hold report.json and weights.npz")
    report = RunReport.from_json(report_path)
    cfg = TrainConfig.from_dict(report.config)
    model = build_model(cfg.stem, cfg.atm, seed=cfg.seed)
    with np.load(weights_path) as w:
        model.load_state_dict(dict(w))
    top1 = evaluate(model, make_data(cfg)[1])
    match = top1 == report.test_top1
    print(f"test_top1 {top1:.4f} (report {report.test_top1:.4f}, {'match' if match else 'MISMATCH'})")
    return 0 if match else 1


def cmd_gradcheck(args) -> int:
    results = run_suite(args.instances, seed=args.seed or 0, log=print)
    bad = [r.name for r in results if not r.ok]
    print("gradcheck: " + ("all passed" if not bad else f"FAILED {', '.join(bad)}"))
    return 1 if bad else 0


def cmd_flops(args) -> int:
    raw = _load_json(args.config) if args.config else {}
    try:
        atm = AtmConfig(**raw.get("atm") or {})
        stem = StemConfig(**raw.get("stem") or {})
        model = build_model(stem, atm)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad flops config: {e}")
    shape = model.site_shape()
    print(f"site features T,C,H,W = {shape}")
    print(f"{'Z':>3} {'interaction':>12} {'extractor':>12} {'transform':>12} {'total':>12}")
    for z in (1, 2, 4, 6):
        parts = flops_breakdown(replace(atm, context=z), shape)
        print(f"{z:>3} {parts['interaction']:>12} {parts['extractor']:>12} "
              f"{parts['transform']:>12} {sum(parts.values()):>12}")
    return 0


def cmd_viz(args) -> int:
    out = _out_dir(args, "viz")
    spec = SynthClipSpec(task="direction2", frames=2, radius=3.0, velocity=3.0,
                         seed=args.seed or 0)
    clip = gen_clip(spec)
    visualize_ops(clip[0, 0], clip[1, 0], MulParams(args.neighborhood), out_dir=out)
    for name in ("add", "sub", "mul", "div"):
        print(out / f"{name}.pgm")
    return 0


def _grid_cells(raw: dict):
    grid = raw.get("grid", {})
    unknown = set(grid) - {"ops", "context", "extractor", "combine"}
    if unknown:
        raise UsageError(f"unknown grid axes: {sorted(unknown)}")
    base_atm = raw.get("base", {}).get("atm") or {}
    axes = {k: grid[k] for k in ("ops", "context", "extractor", "combine") if k in grid}
    keys = list(axes)
    for values in itertools.product(*(axes[k] for k in keys)):
        cell = dict(base_atm, **dict(zip(keys, values)))
        if "combine" not in grid:
            cell.setdefault("combine", "single" if len(cell.get("ops", ["-"])) == 1 else "atm_style")
        yield cell


def _cell_name(atm: dict | None) -> str:
    if atm is None:
        return "baseline"
    ops = "".join({"+": "add", "-": "sub", "*": "mul", "/": "div"}[o] for o in
                  AtmConfig(**atm).ops)
    return f"{ops}_z{atm.get('context', 4)}_{atm.get('extractor', 'conv_stack')}_" \
           f"{atm.get('combine', 'single')}"


def _run_cell(job):
    cfg_dict, out = job
    cfg = TrainConfig.from_dict(cfg_dict)
    report, model = train(cfg)
    out.mkdir(parents=True, exist_ok=True)
    _save_run(out, report, model)
    return str(out), report.test_top1


def cmd_ablate(args) -> int:
    raw = _load_json(args.config) if args.config else {}
    unknown = set(raw) - {"base", "grid", "baseline"}
    if unknown:
        raise UsageError(f"unknown ablate keys: {sorted(unknown)}")
    base = dict(raw.get("base", {}))
    if args.seed is not None:
        base["seed"] = args.seed
    atms = list(_grid_cells(raw))
    if raw.get("baseline", True):
        atms.insert(0, None)
    out = _out_dir(args, "ablate")
    jobs = []
    for atm in atms:
        cfg = dict(base, atm=atm)
        try:
            TrainConfig.from_dict(cfg)
        except (TypeError, ValueError) as e:
            raise UsageError(f"bad grid cell {atm}: {e}")
        jobs.append((cfg, out / _cell_name(atm)))
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    for path, top1 in results:
        print(f"{top1:.4f}  {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help="output directory (eval: run directory to check)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="atm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen", parents=[common], help="write a synthetic dataset")
    sub.add_parser("train", parents=[common], help="train one config, write report.json and weights.npz")
    sub.add_parser("eval", parents=[common], help="re-evaluate a trained run directory")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference suite")
    p.add_argument("--instances", type=int, default=20)
    sub.add_parser("flops", parents=[common], help="MAC table over Z in {1, 2, 4, 6}")
    p = sub.add_parser("viz", parents=[common], help="write the four op maps as PGMs")
    p.add_argument("--neighborhood", type=int, default=9)
    p = sub.add_parser("ablate", parents=[common], help="train every grid cell")
    p.add_argument("--workers", type=int, default=1)
    return parser


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "flops": cmd_flops, "viz": cmd_viz, "ablate": cmd_ablate}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s")
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - anything past parsing is an internal failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
