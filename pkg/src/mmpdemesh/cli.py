"""``mmpde-mesh`` command line interface.

Exit status: 0 when every checked property held, 1 on a property
violation, 2 on usage or I/O errors.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import diagnostics, io
from .errors import MeshError, NotCoercive, ParseError
from .functionals import FunctionalSpec
from .integrate import DT_UNDERFLOW, integrate
from .mesh import SimplicialMesh, box_constraints
from .scenarios import SCENARIOS, adaptation_metric, build, custom, nine_spheres, sine_wave


OK, VIOLATION, USAGE = 0, 1, 2
SLOPE_WINDOW = (-1.4, -0.7)
GRADCHECK_TOL = 1e-6

COMMANDS = ("smooth", "adapt", "stats", "verify", "gradcheck", "study")


class UsageError(Exception):
    pass


def parse_config(text):
    """Flat ``key = value`` (or ``key: value`` / ``key value``) pairs, ``#`` comments."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        for sep in ("=", ":"):
            if sep in line:
                key, value = line.split(sep, 1)
                break
        else:
            parts = line.split(None, 1)
            if len(parts) != 2:
                raise ParseError(f"expected 'key = value', got {line!r}", lineno)
            key, value = parts
        out[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return out


def _sizes(text):
    try:
        return [int(s) for s in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size list {text!r}") from None


def build_parser():
    p = argparse.ArgumentParser(prog="mmpde-mesh",
                                description="Moving mesh smoothing and adaptation.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--mesh", nargs=2, metavar=("NODE", "ELE"), help=".node and .ele files")
    p.add_argument("--field", help="nodal scalar field for adapt on a custom mesh")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--functional", choices=("huang", "winslow"))
    p.add_argument("--p", type=float, default=1.5)
    p.add_argument("--theta", type=float, default=1.0 / 3.0)
    p.add_argument("--tau", type=float)
    p.add_argument("--scenario", choices=SCENARIOS)
    p.add_argument("--sizes", type=_sizes, default=[8, 16, 32, 64])
    p.add_argument("--boundary", choices=("fixed", "slide"))
    p.add_argument("--n", type=int, help="grid resolution of builtin scenarios")
    p.add_argument("--t-end", dest="t_end", type=float)
    p.add_argument("--amplitude", type=float, help="perturbation amplitude in grid spacings")
    p.add_argument("--scheme", choices=("euler", "rk2"))
    p.add_argument("--samples", type=int, default=10_000, help="draws per lemma and dimension")
    p.add_argument("--count", type=int, default=10, help="random meshes per dimension")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = parse_config(fh.read())
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from exc
        known = {a.dest for a in parser._actions}
        unknown = set(cfg) - known - {"mesh"}
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.pop("command", None)
        cfg.pop("config", None)
        if "mesh" in cfg:
            cfg["mesh"] = cfg["mesh"].split()
        parser.set_defaults(**cfg)
        args = parser.parse_args(argv)
        if isinstance(args.mesh, list) and len(args.mesh) != 2:
            raise UsageError("mesh needs a .node and an .ele path")
    return args


def _functional(args):
    if args.functional == "winslow":
        return FunctionalSpec.winslow()
    return FunctionalSpec.huang(args.p, args.theta)


def _overrides(args):
    return {"scheme": args.scheme} if args.scheme else {}


def _load_mesh(args):
    mesh = io.load_mesh(*args.mesh)
    if args.boundary == "slide":
        x = mesh.vertices
        mesh = SimplicialMesh(x, mesh.elements,
                              box_constraints(x, x.min(axis=0), x.max(axis=0), "slide"))
    return mesh


def _scenario(args, default):
    name = args.scenario or ("custom" if args.mesh else default)
    if name == "custom":
        if not args.mesh:
            raise UsageError("scenario 'custom' needs --mesh")
        return name
    if args.mesh:
        raise UsageError("--mesh only applies to the custom scenario")
    return name


def _out(args, name):
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _report(msg):
    print(msg, flush=True)


def _run(args, scenario, metric_builder=None):
    """Build and integrate a scenario; returns ``(scenario, result, monitor)``."""
    fn = _functional(args)
    kw = dict(functional=fn, tau=args.tau, t_end=args.t_end, **_overrides(args))
    if scenario == "custom":
        mesh = _load_mesh(args)
        metric = metric_builder(mesh) if metric_builder else None
        sc = custom(mesh, metric, fn, args.tau or 1.0, args.t_end or 1.0, **_overrides(args))
    else:
        sc = build(scenario, n=args.n, boundary=args.boundary, seed=args.seed,
                   amplitude=args.amplitude, **kw)
    monitor = None
    try:
        bounds = diagnostics.theorem_floors(sc.problem)
        monitor = diagnostics.FloorMonitor(sc.problem, bounds)
    except NotCoercive:
        pass
    res = integrate(sc.problem, sc.config, observer=monitor)
    return sc, res, monitor


def _write_outputs(args, sc, res):
    io.save_mesh(res.mesh, _out(args, "mesh"))
    io.atomic_write(_out(args, "trace.csv"), res.trace.to_csv(res.reason))


def _check_run(res, monitor):
    status = OK
    if not res.trace.is_monotone():
        _report("FAIL energy trace is not monotone")
        status = VIOLATION
    if res.trace.column("K_min").min() <= 0:
        _report("FAIL non-positive element volume in trace")
        status = VIOLATION
    if res.reason == DT_UNDERFLOW:
        _report("FAIL time step underflow")
        status = VIOLATION
    if monitor is not None:
        a, v = monitor.worst()
        _report(f"floor margins: altitude x{a:.3g}, volume x{v:.3g}")
        if not monitor.ok:
            _report("FAIL nonsingularity floors violated")
            status = VIOLATION
    return status


def cmd_smooth(args):
    scenario = _scenario(args, "smooth2d")
    sc, res, monitor = _run(args, scenario)
    before = diagnostics.quality_report(sc.problem.mesh)
    after = diagnostics.quality_report(res.mesh)
    _write_outputs(args, sc, res)
    io.atomic_write(_out(args, "quality_before.txt"), before.to_text())
    io.atomic_write(_out(args, "quality_after.txt"), after.to_text())
    _report(f"{scenario}: {res.reason} after {res.steps} steps, "
            f"I_h {res.trace.rows[0][1]:.6g} -> {res.limit:.6g}")
    _report(f"volume ratio {before.volume_ratio:.4g} -> {after.volume_ratio:.4g}")
    if before.dihedral_counts is not None:
        _report(f"dihedral [0,20): {before.dihedral_small} -> {after.dihedral_small}, "
                f"(150,180]: {before.dihedral_large} -> {after.dihedral_large}")
    return _check_run(res, monitor)


def cmd_adapt(args):
    scenario = _scenario(args, "sinewave")
    builder = None
    if scenario == "custom":
        if not args.field:
            raise UsageError("adapt on a custom mesh needs --field")

        def builder(mesh):
            with open(args.field) as fh:
                u = io.parse_field(fh.read(), mesh.n_vertices)
            metric, alpha = adaptation_metric(mesh, u)
            _report(f"alpha = {alpha.value:.6g}" + (" (clamped)" if alpha.clamped else ""))
            return metric
    sc, res, monitor = _run(args, scenario, builder)
    _write_outputs(args, sc, res)
    after = diagnostics.quality_report(res.mesh, sc.problem.metric)
    io.atomic_write(_out(args, "quality_after.txt"), after.to_text())
    if sc.alpha is not None:
        _report(f"alpha = {sc.alpha.value:.6g}")
    if scenario in ("sinewave", "ninespheres"):
        u = (sine_wave if scenario == "sinewave" else nine_spheres)(res.mesh.vertices)
        io.atomic_write(_out(args, "field.txt"), io.format_field(u))
    _report(f"{scenario}: {res.reason} after {res.steps} steps, "
            f"I_h {res.trace.rows[0][1]:.6g} -> {res.limit:.6g}, "
            f"K_min {res.trace.column('K_min').min():.4g}")
    return _check_run(res, monitor)


def cmd_stats(args):
    if args.mesh:
        mesh = _load_mesh(args)
        metric = None
    else:
        sc = build(args.scenario or "smooth2d", n=args.n, boundary=args.boundary,
                   seed=args.seed, amplitude=args.amplitude)
        mesh, metric = sc.problem.mesh, sc.problem.metric
    rep = diagnostics.quality_report(mesh, metric)
    text = rep.to_text()
    sys.stdout.write(text)
    if args.out != ".":
        io.atomic_write(_out(args, "quality.txt"), text)
    return OK


def cmd_verify(args):
    status = OK
    lines = []
    for d in (2, 3):
        for check in (diagnostics.check_lemma_fk2, diagnostics.check_lemma_fk1):
            rep = check(args.samples, args.seed, d)
            lines.append(rep.summary())
            _report(("PASS " if rep.ok else "FAIL ") + rep.summary())
            if not rep.ok:
                status = VIOLATION
    scenario = args.scenario if args.scenario not in (None, "custom") else "sinewave"
    sc = build(scenario, n=args.n, functional=_functional(args), tau=args.tau,
               boundary=args.boundary, seed=args.seed)
    try:
        b = diagnostics.theorem_floors(sc.problem)
        msg = (f"floors on {scenario}: C1 = {b.C1:.6g}, C2 = {b.C2:.6g}, "
               f"altitude {b.altitude_floor:.6g}, volume {b.volume_floor:.6g}")
        ok = b.C1 > 0 and b.altitude_floor > 0 and b.volume_floor > 0
        _report(("PASS " if ok else "FAIL ") + msg)
        lines.append(msg)
        if not ok:
            status = VIOLATION
    except NotCoercive as exc:
        _report(f"floors skipped: {exc}")
    if args.out != ".":
        io.atomic_write(_out(args, "verify.txt"), "\n".join(lines) + "\n")
    return status


def cmd_gradcheck(args):
    specs = [_functional(args)] if args.functional else [FunctionalSpec.winslow(),
                                                         FunctionalSpec.huang(args.p, args.theta)]
    worst = 0.0
    for d in (2, 3):
        for spec in specs:
            for metric in ("identity", "affine"):
                for i in range(args.count):
                    prob = diagnostics.random_test_problem(d, args.seed + i, spec, metric)
                    worst = max(worst, diagnostics.gradient_check(prob))
            _report(f"d={d} {spec.kind}: running max rel err {worst:.3e}")
    ok = worst <= GRADCHECK_TOL
    _report(f"{'PASS' if ok else 'FAIL'} gradient check, max rel err {worst:.3e} "
            f"(tol {GRADCHECK_TOL:g})")
    return OK if ok else VIOLATION


def cmd_study(args):
    scenario = args.scenario or "sinewave"
    if scenario == "custom":
        raise UsageError("study needs a builtin scenario")
    kw = dict(functional=_functional(args), tau=args.tau, t_end=args.t_end,
              boundary=args.boundary, seed=args.seed)
    study = diagnostics.scaling_study(scenario, args.sizes, _overrides(args), **kw)
    io.atomic_write(_out(args, "study.csv"), study.to_csv())
    for r in study.rows:
        _report(f"n={r.n} N={r.N} K_min={r.K_min:.4e} floor={r.volume_floor:.3e} ({r.reason})")
    lo, hi = SLOPE_WINDOW
    status = OK
    if not lo <= study.slope <= hi:
        status = VIOLATION
    below = [r for r in study.rows if r.K_min < r.volume_floor]
    if below:
        status = VIOLATION
    _report(f"{'PASS' if status == OK else 'FAIL'} slope {study.slope:.3f} "
            f"(window [{lo}, {hi}])")
    return status


HANDLERS = {"smooth": cmd_smooth, "adapt": cmd_adapt, "stats": cmd_stats,
            "verify": cmd_verify, "gradcheck": cmd_gradcheck, "study": cmd_study}


def main(argv=None):
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return USAGE if exc.code else OK
    except (UsageError, ParseError) as exc:
        print(f"mmpde-mesh: error: {exc}", file=sys.stderr)
        return USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return HANDLERS[args.command](args)
    except (UsageError, ParseError, OSError) as exc:
        print(f"mmpde-mesh: error: {exc}", file=sys.stderr)
        return USAGE
    except MeshError as exc:
        print(f"mmpde-mesh: {type(exc).__name__}: {exc}", file=sys.stderr)
        return VIOLATION


if __name__ == "__main__":
    sys.exit(main())
