"""Command-line interface.

Exit codes: 0 when every check passes, 2 when a verification check fails, 1 on usage or
configuration errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .apps import build_delay_instance, build_neumann_instance, delayed_mean_reference, DEFAULT_TRACE_GAMMA
from .dynamics import Box, ControlProcess, sample_paths
from .hjb import CostSpec, GridSpec, QuadraticControlCost, SaturatingRidgeCost, feedback_map, feedback_policy, \
    solve_mild_hjb
from .model import check_commutation, check_noise_trace, check_smoothing
from .dynamics import kernel_bound_audit
from .semigroup import CylinderFunction
from .verify import dynkin_residual, simulation_grid, verification_report

log = logging.getLogger("mildhjb")

EXIT_OK, EXIT_USAGE, EXIT_FAILED = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# config helpers
# --------------------------------------------------------------------------

def _load(args):
    """Model, cost and raw config from ``--model``."""
    if not args.model:
        raise UsageError("--model is required")
    try:
        cfg = io.load_config(args.model)
        model = io.model_from_dict(cfg)
    except FileNotFoundError as exc:
        raise UsageError(f"model file not found: {exc.filename}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"malformed config: {exc}") from exc
    return model, _cost_from(cfg.get("cost", {}), model), cfg


def _cost_from(table: dict, model) -> CostSpec:
    weight = np.zeros(model.n_modes)
    w = np.asarray(table.get("weight", [1.0, 1.0][: model.n_modes]), dtype=float)
    if w.size > model.n_modes:
        raise UsageError("cost weight longer than the number of modes")
    weight[: w.size] = w
    radius = table.get("box_radius", 0.5)
    box = Box.symmetric(model.n_controls, float(radius)) if radius is not None else None
    return CostSpec(SaturatingRidgeCost(tuple(weight)), QuadraticControlCost(float(table.get("l2_scale", 1.0))), box)


def _control_from(table: dict, m: int) -> ControlProcess:
    if not table:
        return ControlProcess.simple([0.0, 0.3, 0.6], [[0.0] * m, [0.4] * m, [-0.3] * m], name="two-jump")
    times = table.get("jump_times", [0.0])
    values = np.asarray(table.get("values", [[0.0] * m]), dtype=float).reshape(len(times), m)
    return ControlProcess.simple(times, values, name=table.get("name", "config"))


def _functions_from(items, n: int):
    if not items:
        e = np.eye(n)
        a = e[0] + (0.5 * e[1] if n > 1 else 0)
        return [
            CylinderFunction.trig(e[0]),
            CylinderFunction.trig(a, phase=0.3),
            CylinderFunction.bump(e[min(1, n - 1)], center=0.1, width=0.5),
            CylinderFunction.bump(a, amplitude=2.0, width=1.0),
            CylinderFunction.trig(e[-1], amplitude=0.5),
            CylinderFunction.constant(1.0, n),
        ]
    out = []
    for it in items:
        kind = it.get("kind", "trig")
        direction = it.get("direction", [1.0])
        if kind == "trig":
            out.append(CylinderFunction.trig(direction, it.get("amplitude", 1.0), it.get("phase", 0.0)))
        elif kind == "gauss-bump":
            out.append(CylinderFunction.bump(direction, it.get("amplitude", 1.0), it.get("center", 0.0),
                                             it.get("width", 1.0)))
        elif kind == "constant":
            out.append(CylinderFunction.constant(it.get("amplitude", 1.0), n))
        else:
            raise UsageError(f"unknown cylinder kind {kind!r}")
    return out


def _modes(spec: str):
    try:
        modes = tuple(int(s) for s in spec.split(","))
    except ValueError as exc:
        raise UsageError(f"--modes expects comma-separated integers, got {spec!r}") from exc
    return modes


def _start(cfg, n):
    x = np.zeros(n)
    given = np.asarray(cfg.get("verification", {}).get("x", []), dtype=float)
    x[: given.size] = given
    return x


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _audit(model, gamma=DEFAULT_TRACE_GAMMA):
    return [check_noise_trace(model, gamma), check_smoothing(model), kernel_bound_audit(model),
            check_commutation(model)]


def _solve(args, model, cost, cfg):
    solver = cfg.get("solver", {})
    grid = GridSpec(modes=_modes(args.modes) if args.modes else tuple(solver.get("modes", (0, 1))),
                    n_nodes=int(solver.get("n_nodes", 41)))
    tol = args.tol if args.tol is not None else float(solver.get("tol", 1e-9))
    try:
        return solve_mild_hjb(model, cost, grid, tol=tol)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _field_manifest(v):
    return {"contraction_constant": v.contraction_constant, "measured_ratio": v.measured_ratio,
            "iterations": v.iterations, "residual": v.residual, "budget": v.budget}


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_check_assumptions(args, argv):
    model, _, cfg = _load(args)
    reports = _audit(model, cfg.get("audit", {}).get("gamma", DEFAULT_TRACE_GAMMA))
    out = _outdir(args)
    path = io.write_conditions(out / "conditions.csv", reports)
    io.write_manifest(out / "manifest.json", "check-assumptions", argv, args.seed, model.digest(), [path])
    for r in reports:
        print(f"{r.condition_id:12s} {'ok' if r.satisfied else 'FAILED':6s} witness={r.witness:.4g}  {r.detail}")
    return EXIT_OK if all(r.satisfied for r in reports) else EXIT_FAILED


def cmd_simulate(args, argv):
    model, _, cfg = _load(args)
    control = _control_from(cfg.get("control", {}), model.n_controls)
    grid = simulation_grid(args.horizon, args.dt, control)
    ens = sample_paths(model, _start(cfg, model.n_modes), control, grid, args.paths, args.seed)
    out = _outdir(args)
    path = io.write_paths(out / "paths.csv", ens)
    io.write_manifest(out / "manifest.json", "simulate", argv, args.seed, model.digest(), [path],
                      {"grid": {"T": args.horizon, "dt": args.dt, "n_steps": int(grid.size - 1)}})
    print(f"wrote {ens.n_paths} paths x {grid.size} times to {path}")
    return EXIT_OK


def cmd_verify_dynkin(args, argv):
    model, _, cfg = _load(args)
    section = cfg.get("dynkin", {})
    fs = _functions_from(section.get("functions"), model.n_modes)
    control = _control_from(cfg.get("control", {}), model.n_controls)
    reports = dynkin_residual(model, fs, model.lam, args.horizon, _start(cfg, model.n_modes), control,
                              args.paths, args.seed, dt=args.dt, workers=args.workers)
    out = _outdir(args)
    path = io.append_ledger(out / "ledger.csv", reports)
    io.write_manifest(out / "manifest.json", "verify-dynkin", argv, args.seed, model.digest(), [path])
    for r in reports:
        print(f"{r.check_id} {r.estimate:+.3e} se={r.standard_error:.2e} {'pass' if r.passed else 'FAIL'}  {r.detail}")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAILED


def cmd_solve_hjb(args, argv):
    model, cost, cfg = _load(args)
    v = _solve(args, model, cost, cfg)
    out = _outdir(args)
    path = io.write_value_field(out / "value_field.csv", v)
    io.write_manifest(out / "manifest.json", "solve-hjb", argv, args.seed, model.digest(), [path], _field_manifest(v))
    print(f"kappa={v.contraction_constant:.4f} measured={v.measured_ratio:.4f} iterations={v.iterations} "
          f"budget={v.budget:.3e}")
    return EXIT_OK


def _feedback_run(args, argv, model, cost, cfg, command):
    v = _solve(args, model, cost, cfg)
    x = _start(cfg, model.n_modes)
    rng = np.random.default_rng(args.seed)
    box = cost.control_box(model.n_controls)
    n_cand = int(cfg.get("verification", {}).get("n_candidates", 5))
    cands = [ControlProcess.constant(np.zeros(model.n_controls), name="zero")]
    for i in range(n_cand - 1):
        jumps = np.concatenate([[0.0], np.sort(rng.uniform(0, args.horizon, 2))])
        cands.append(ControlProcess.simple(jumps, box.sample(rng, 3), name=f"random-{i}"))
    fb = feedback_policy(cost, model, v)
    reports = verification_report(model, cost, v, x, cands, fb, T=args.horizon, n_paths=args.paths,
                                  seed=args.seed, dt=args.dt, workers=args.workers)
    out = _outdir(args)
    nodes = v.nodes()
    u = feedback_map(cost, model, v, v.embed(nodes))
    table = [dict({f"x_{m}": nodes[i, j] for j, m in enumerate(v.modes)},
                  **{f"u_{k}": u[i, k] for k in range(u.shape[1])}) for i in range(nodes.shape[0])]
    paths = [io.write_value_field(out / "value_field.csv", v), io.write_rows(out / "feedback.csv", table),
             io.append_ledger(out / "ledger.csv", reports)]
    io.write_manifest(out / "manifest.json", command, argv, args.seed, model.digest(), paths, _field_manifest(v))
    for r in reports:
        print(f"{r.check_id:20s} {r.estimate:+.4e} se={r.standard_error:.2e} tol={r.tolerance:.2e} "
              f"{'pass' if r.passed else 'FAIL'}  {r.detail}")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAILED


def cmd_synthesize_feedback(args, argv):
    model, cost, cfg = _load(args)
    return _feedback_run(args, argv, model, cost, cfg, "synthesize-feedback")


def cmd_run_example(args, argv):
    if args.example == "neumann":
        try:
            inst = build_neumann_instance(d=args.dim, N=args.n_modes, theta=args.theta, epsilon=args.epsilon)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        out = _outdir(args)
        io.save_model(inst.model, out / "model.toml")
        io.write_conditions(out / "conditions.csv", inst.reports)
        if args.dim != 1:
            print(f"audits pass: {inst.audits_pass}; HJB run is shipped for d=1")
            return EXIT_OK
        cfg = {"verification": {"x": [0.1, -0.1], "n_candidates": 5}}
        return _feedback_run(args, argv, inst.model, inst.cost, cfg, "run-example neumann")
    # delay example: simulation and Dynkin verification; the HJB step is experimental
    if args.solve_hjb:
        if not args.experimental:
            raise UsageError("HJB for the delay example is experimental; pass --experimental")
        raise UsageError("the grid HJB solver needs a diagonal model; the delay model is dense")
    inst = build_delay_instance(a0=-1.0, b0=1.0, sigma0=0.5, d_lag=1.0, b1_samples=lambda s: np.exp(s), n_d=args.n_d)
    control = ControlProcess.simple([0.0, 0.25, 0.6], [[1.0], [-0.5], [0.8]], name="three-piece")
    grid = simulation_grid(args.horizon, args.dt, control)
    ens = sample_paths(inst.model, inst.x0, inst.abstract_process(control), grid, args.paths, args.seed)
    reference = delayed_mean_reference(-1.0, 1.0, 1.0, np.exp, control, grid)
    out = _outdir(args)
    rows = [{"t": t, "product_space_mean": m, "delayed_reference": r}
            for t, m, r in zip(grid, ens.states[:, :, 0].mean(axis=0), reference)]
    path = io.write_rows(out / "delay_mean.csv", rows)
    fs = [CylinderFunction.trig(np.eye(inst.model.state_dim)[0]), CylinderFunction.constant(1.0)]
    reports = dynkin_residual(inst.model, fs, inst.model.lam, args.horizon, inst.x0,
                              inst.abstract_process(control), args.paths, args.seed, dt=args.dt)
    ledger = io.append_ledger(out / "ledger.csv", reports)
    io.write_manifest(out / "manifest.json", "run-example delay", argv, args.seed, inst.model.digest(), [path, ledger])
    for r in reports:
        print(f"{r.check_id} {r.estimate:+.3e} se={r.standard_error:.2e} {'pass' if r.passed else 'FAIL'}")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAILED


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _common(p, paths=2000):
    p.add_argument("--model", help="TOML model file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--paths", type=int, default=paths)
    p.add_argument("--modes", help="lead modes for the HJB grid, e.g. 0,1")
    p.add_argument("--tol", type=float, default=None, help="fixed-point tolerance")
    p.add_argument("--horizon", type=float, default=1.0)
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--experimental", action="store_true")
    p.add_argument("--out", default="mildhjb-run")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mildhjb", description="Mild HJB solver and Monte-Carlo verification toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, fn, paths in [
        ("check-assumptions", cmd_check_assumptions, 0),
        ("simulate", cmd_simulate, 100),
        ("solve-hjb", cmd_solve_hjb, 0),
        ("verify-dynkin", cmd_verify_dynkin, 20000),
        ("synthesize-feedback", cmd_synthesize_feedback, 4000),
    ]:
        p = sub.add_parser(name)
        _common(p, paths)
        p.set_defaults(func=fn)
    p = sub.add_parser("run-example")
    p.add_argument("example", choices=["neumann", "delay"])
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--theta", type=float, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--n-modes", type=int, default=8)
    p.add_argument("--n-d", type=int, default=64)
    p.add_argument("--solve-hjb", action="store_true")
    _common(p, 4000)
    p.set_defaults(func=cmd_run_example, horizon=None)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "run-example":
        if args.theta is None:
            args.theta = 0.0 if args.dim == 1 else 0.1
        if args.epsilon is None:
            args.epsilon = 0.05 if args.dim == 1 else 0.01
        if args.horizon is None:
            args.horizon = 1.0 if args.example == "delay" else 4.0
    if args.paths is not None and args.paths < 2 and args.command not in ("check-assumptions", "solve-hjb"):
        print("mildhjb: error: --paths must be at least 2", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args, argv)
    except UsageError as exc:
        print(f"mildhjb: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
