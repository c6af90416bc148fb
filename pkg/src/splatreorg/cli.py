"""Command-line front end: ``splatreorg {reorg,diagnose,validate,toy}``.

Exit codes: 0 success, 1 bad input file, 2 bad flags, 3 numeric failure
(with the stage name), 4 property failure.  Every error path prints a single
JSON line on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import toysplat, validation
from .diagnostics import (TAU_K, curvature_proxy, effective_overlap, opacity_summary, overlap_energy,
                          ray_profile)
from .reorg import ReorgError, reorganize, reorganize_cascaded
from .resample import ResamplePlan, sample
from .spatial_index import PointIndex
from .splat_io import (CurvatureBlock, DiagnosticsReport, EffectiveOverlapBlock, OverlapEnergyBlock,
                       SplatFormatError, dumps_report, read_splat, write_report, write_splat)

log = logging.getLogger("splatreorg")

EXIT_INPUT, EXIT_FLAGS, EXIT_NUMERIC, EXIT_PROPERTY = 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str, **extra):
        super().__init__(message)
        self.code, self.kind, self.extra = code, kind, extra


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_FLAGS, "flags", message)


def _emit_error(err: CliError) -> int:
    payload = {"error": err.kind, "message": str(err), **err.extra}
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    return err.code


def _positive_int(name):
    def parse(s):
        try:
            v = int(s)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer, got {s!r}")
        if v < 1:
            raise argparse.ArgumentTypeError(f"{name} must be >= 1, got {v}")
        return v
    return parse


def _nonneg_int(name):
    def parse(s):
        try:
            v = int(s)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer, got {s!r}")
        if v < 0:
            raise argparse.ArgumentTypeError(f"{name} must be >= 0, got {v}")
        return v
    return parse


def _open_unit(name):
    def parse(s):
        try:
            v = float(s)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a number, got {s!r}")
        if not 0.0 < v < 1.0:
            raise argparse.ArgumentTypeError(f"{name} must lie in (0, 1), got {v}")
        return v
    return parse


def _positive_float(name):
    def parse(s):
        try:
            v = float(s)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a number, got {s!r}")
        if not (v > 0 and np.isfinite(v)):
            raise argparse.ArgumentTypeError(f"{name} must be positive, got {v}")
        return v
    return parse


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="splatreorg", description="Resample-and-reinitialize Gaussian splat models.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("reorg", help="reorganize a splat file")
    r.add_argument("input")
    r.add_argument("output")
    r.add_argument("--samples", type=_positive_int("--samples"), default=None,
                   help="number of new primitives (default: same as input)")
    r.add_argument("--k", type=_positive_int("--k"), default=20)
    r.add_argument("--alpha0", type=_open_unit("--alpha0"), default=0.01)
    r.add_argument("--seed", type=_nonneg_int("--seed"), default=0)
    r.add_argument("--passes", type=_positive_int("--passes"), default=1)
    r.add_argument("--report", default=None, help="write the stats report here instead of stdout")

    d = sub.add_parser("diagnose", help="compute diagnostics on a splat file")
    d.add_argument("input")
    d.add_argument("--overlap-energy", action="store_true")
    d.add_argument("--exact", action="store_true", help="evaluate every pair (no culling)")
    d.add_argument("--cutoff", type=_positive_float("--cutoff"), default=6.0)
    d.add_argument("--rays", default=None, help="JSON list of {origin, direction} or 6 numbers per line")
    d.add_argument("--a-model", choices=("max-response", "integrated"), default="max-response")
    d.add_argument("--probes", type=_nonneg_int("--probes"), default=0,
                   help="effective overlap and curvature proxy at this many sampled probes")
    d.add_argument("--seed", type=_nonneg_int("--seed"), default=0)
    d.add_argument("--report", default=None)

    v = sub.add_parser("validate", help="run the built-in property suites")
    v.add_argument("--suite", choices=validation.SUITES + ("all",), default="all")
    v.add_argument("--seed", type=_nonneg_int("--seed"), default=0)

    t = sub.add_parser("toy", help="run the alpha-compositing toy optimizer")
    t.add_argument("--scene", default="deadlock", help="deadlock, cluster or a JSON scene file")
    t.add_argument("--iters", type=_nonneg_int("--iters"), default=2000)
    t.add_argument("--step", type=_positive_float("--step"), default=0.01)
    t.add_argument("--reorg", action="store_true", help="reorganize the scene before optimizing")
    t.add_argument("--fit-geometry", action="store_true", help="also optimize centers and widths")
    t.add_argument("--k", type=_positive_int("--k"), default=20)
    t.add_argument("--alpha0", type=_open_unit("--alpha0"), default=0.01)
    t.add_argument("--seed", type=_nonneg_int("--seed"), default=0)
    t.add_argument("--csv", default=None, help="per-iteration history (iteration, loss, min_transmittance)")
    return p


def _read(path: str):
    if not Path(path).is_file():
        raise CliError(EXIT_INPUT, "input", f"cannot read {path}")
    try:
        return read_splat(path)
    except SplatFormatError as e:
        raise CliError(EXIT_INPUT, "input", f"{path}: {e}")


def _output(report: DiagnosticsReport, path: str | None) -> None:
    if path:
        write_report(report, path)
    else:
        sys.stdout.write(dumps_report(report))


def cmd_reorg(args) -> int:
    gs = _read(args.input)
    plan = ResamplePlan(samples=args.samples, k=args.k, alpha0=args.alpha0, seed=args.seed)
    m = plan.sample_count(len(gs))
    if m < plan.k + 1:
        raise CliError(EXIT_FLAGS, "flags", f"{m} samples cannot support --k {plan.k} (need k+1)")
    if args.passes > 1:
        log.warning("--passes composes reorganizations back to back; no optimization runs between passes")
    t0 = time.perf_counter()
    try:
        result = reorganize_cascaded(gs, plan, args.passes) if args.passes > 1 else reorganize(gs, plan)
    except ReorgError as e:
        raise CliError(EXIT_NUMERIC, "numeric", str(e), stage=e.stage)
    except ValueError as e:
        raise CliError(EXIT_INPUT, "input", str(e))
    try:
        write_splat(result.output, args.output)
    except ValueError as e:
        raise CliError(EXIT_NUMERIC, "numeric", str(e), stage="write")
    except OSError as e:
        raise CliError(EXIT_INPUT, "input", f"cannot write {args.output}: {e}")
    report = DiagnosticsReport(
        reorg={
            "input_count": len(gs), "output_count": len(result.output), "k": plan.k,
            "alpha0": plan.alpha0, "seed": plan.seed, "passes": args.passes,
            "opacity": opacity_summary(result.output),
            "passes_stats": [s.to_dict() for s in result.passes],
        },
        timing={"total_seconds": time.perf_counter() - t0,
                "stages": [s.timing for s in result.passes]},
    )
    _output(report, args.report)
    return 0


def _load_rays(path: str) -> list[tuple[np.ndarray, np.ndarray]]:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise CliError(EXIT_INPUT, "input", f"cannot read rays file {path}: {e}")
    rays = []
    try:
        data = json.loads(text)
        for item in data:
            rays.append((np.asarray(item["origin"], float), np.asarray(item["direction"], float)))
    except (json.JSONDecodeError, TypeError, KeyError):
        rays = []
        for ln, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            vals = line.replace(",", " ").split()
            if len(vals) != 6:
                raise CliError(EXIT_INPUT, "input", f"{path}:{ln}: expected 6 numbers per ray")
            try:
                nums = np.array([float(v) for v in vals])
            except ValueError:
                raise CliError(EXIT_INPUT, "input", f"{path}:{ln}: not a number")
            rays.append((nums[:3], nums[3:]))
    for o, d in rays:
        if o.shape != (3,) or d.shape != (3,) or not (np.all(np.isfinite(o)) and np.all(np.isfinite(d))):
            raise CliError(EXIT_INPUT, "input", f"{path}: rays need finite 3-vectors")
        if not np.any(d):
            raise CliError(EXIT_INPUT, "input", f"{path}: zero ray direction")
    return rays


def cmd_diagnose(args) -> int:
    gs = _read(args.input)
    rays = _load_rays(args.rays) if args.rays else []
    if len(gs) == 0:
        raise CliError(EXIT_INPUT, "input", f"{args.input}: file holds no primitives")
    report = DiagnosticsReport()
    t0 = time.perf_counter()
    try:
        if args.overlap_energy:
            e = overlap_energy(gs, cutoff_sigma=args.cutoff, exact=args.exact)
            report.overlap_energy = OverlapEnergyBlock(e.value, e.truncation_bound, e.cutoff_sigma,
                                                       e.exact, e.pairs_evaluated)
        report.ray_profiles = [ray_profile(gs, o, d, args.a_model).to_dict() for o, d in rays]
        if args.probes:
            probes = sample(gs, ResamplePlan(samples=args.probes, seed=args.seed)).centers
            counts = effective_overlap(gs, probes)
            report.effective_overlap = EffectiveOverlapBlock(
                TAU_K, counts.tolist(), float(counts.min()), float(np.median(counts)),
                float(counts.mean()), float(counts.max()))
            nn = min(8, len(gs))
            _, d2 = PointIndex(gs.positions).knn_batch(probes, nn)
            radii = np.sqrt(d2[:, -1]) * (1 + 1e-9)
            conds = [curvature_proxy(gs, x, r)[1] for x, r in zip(probes, radii)]
            report.curvature_proxy = CurvatureBlock(-1.0, conds, float(np.median(conds)), float(np.max(conds)))
            report.extra["curvature_radius"] = f"distance to the {nn}th nearest center, per probe"
    except np.linalg.LinAlgError as e:
        raise CliError(EXIT_NUMERIC, "numeric", str(e), stage="diagnostics")
    report.extra["count"] = len(gs)
    report.extra["opacity"] = opacity_summary(gs)
    report.timing = {"total_seconds": time.perf_counter() - t0}
    _output(report, args.report)
    return 0


def cmd_validate(args) -> int:
    results = validation.run_suite(args.suite, args.seed)
    payload = {"passed": all(r.passed for r in results), "suites": [r.to_dict() for r in results]}
    sys.stdout.write(dumps_report(payload))
    failed = [f"{r.suite}.{name}" for r in results for name in r.failures()]
    if failed:
        raise CliError(EXIT_PROPERTY, "property", "property failure: " + ", ".join(failed), failed=failed)
    return 0


def _toy_scene(name: str, seed: int):
    if name == "deadlock":
        return toysplat.deadlock_scene(seed), toysplat.DEADLOCK_TARGET_DEPTH
    if name == "cluster":
        sc = toysplat.cluster_scene()
        return sc, float(sc.depths.max()) + 1.0
    path = Path(name)
    if not path.is_file():
        raise CliError(EXIT_FLAGS, "flags", f"--scene must be deadlock, cluster or a JSON file, got {name!r}")
    try:
        data = json.loads(path.read_text())
        scene = toysplat.scene_from_dict(data)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise CliError(EXIT_INPUT, "input", f"{name}: {e}")
    target = data.get("target_depth", float(scene.depths.max()) + 1.0 if len(scene.depths) else 0.0)
    return scene, float(target)


def cmd_toy(args) -> int:
    scene, target_depth = _toy_scene(args.scene, args.seed)
    if args.reorg:
        try:
            scene = toysplat.toy_reorganize(scene, ResamplePlan(k=args.k, alpha0=args.alpha0, seed=args.seed))
        except ValueError as e:
            raise CliError(EXIT_FLAGS, "flags", str(e))
    state = toysplat.optimize(scene, args.iters, args.step, target_depth, fit_geometry=args.fit_geometry)
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iteration", "loss", "min_transmittance"])
            for i, (L, T) in enumerate(zip(state.loss_history, state.min_transmittance)):
                w.writerow([i, repr(L), repr(T)])
    summary = {
        "scene": args.scene, "reorg": args.reorg, "seed": args.seed, "step": args.step,
        "iterations": state.iterations, "initial_loss": state.loss_history[0],
        "final_loss": state.loss_history[-1], "diverged": state.diverged,
        "target_depth": target_depth, "min_transmittance_initial": state.min_transmittance[0],
        "min_transmittance_final": state.min_transmittance[-1], "primitives": len(scene.depths),
    }
    sys.stdout.write(dumps_report(summary))
    if state.diverged:
        raise CliError(EXIT_NUMERIC, "numeric", f"optimization diverged after {state.iterations} steps",
                       stage="optimize")
    return 0


COMMANDS = {"reorg": cmd_reorg, "diagnose": cmd_diagnose, "validate": cmd_validate, "toy": cmd_toy}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except CliError as e:
        return _emit_error(e)


if __name__ == "__main__":
    sys.exit(main())
