from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from dotenv import load_dotenv

from src.entropic_mot.common import SOLVER_CHOICES, SolverSettings
from src.entropic_mot.errors import MotError
from src.entropic_mot.experiments.diagnostics import bench, gap_curve
from src.entropic_mot.experiments.export import export_coupling, write_bench, write_csv, write_gap_curve, write_report
from src.entropic_mot.experiments.instances import INSTANCE_NAMES, generate_instance, instance_family
from src.entropic_mot.hull.concave import hull_at
from src.entropic_mot.hull.dominators import DOMINATOR_MODES
from src.entropic_mot.model.io import load_instance, save_instance
from src.entropic_mot.oracle.simplex import solve_mot_lp
from src.entropic_mot.repair.penalization import repair_marginals
from src.entropic_mot.solvers.hybrid import InstanceSource, run_hybrid

load_dotenv()

logger = logging.getLogger("entropic_mot")

DEFAULT_CONFIG = Path("config/solver_settings.yaml")


def _floats(text: str) -> List[float]:
    return [float(v) for v in text.replace(";", ",").split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="entropic-mot", description="Entropic martingale optimal transport solvers.")
    parser.add_argument("--config", type=Path, default=None, help="YAML settings (default: $MOT_CONFIG or config/solver_settings.yaml)")
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", type=Path, default=None, help="output directory")
    parser.add_argument("--log-level", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_source(cmd: argparse.ArgumentParser) -> None:
        group = cmd.add_mutually_exclusive_group(required=True)
        group.add_argument("--instance", type=Path, help="instance JSON document")
        group.add_argument("--family", choices=INSTANCE_NAMES, help="named grid family, refined with epsilon")

    solve = sub.add_parser("solve", help="epsilon-scaling solve with dominators")
    add_source(solve)
    solve.add_argument("--solver", choices=SOLVER_CHOICES, default=None)
    solve.add_argument("--eps", type=float, default=None, help="target epsilon")
    solve.add_argument("--run-id", default=None)
    solve.add_argument("--coupling", action="store_true", help="also export the coupling CSV")
    solve.add_argument("--slice", action="append", default=[], type=_floats, help="x point for a conditional slice")

    curve = sub.add_parser("gap-curve", help="duality gap of the dominators against epsilon")
    add_source(curve)
    curve.add_argument("--eps", type=_floats, required=True, help="decreasing comma separated list")
    curve.add_argument("--mode", action="append", choices=DOMINATOR_MODES, default=None)

    timing = sub.add_parser("bench", help="solver traces on one epsilon stage")
    add_source(timing)
    timing.add_argument("--eps", type=float, default=None)
    timing.add_argument("--solver", action="append", choices=SOLVER_CHOICES, default=None)

    repair = sub.add_parser("repair", help="convex-order repair of nu")
    repair.add_argument("--instance", type=Path, required=True)
    repair.add_argument("--output", type=Path, default=None)
    repair.add_argument("--a-weights", default=None)

    hull = sub.add_parser("hull", help="concave envelope of sampled f at given x")
    hull.add_argument("--grid", type=Path, required=True, help="CSV with columns y..., f")
    hull.add_argument("--x", action="append", type=_floats, required=True)

    oracle = sub.add_parser("oracle", help="exact LP value and coupling")
    oracle.add_argument("--instance", type=Path, required=True)

    generate = sub.add_parser("generate", help="write a named instance document")
    generate.add_argument("--name", choices=INSTANCE_NAMES, required=True)
    generate.add_argument("--n", type=int, required=True)
    generate.add_argument("--output", type=Path, default=None)
    return parser


def load_settings(args: argparse.Namespace) -> SolverSettings:
    config_path = args.config or Path(os.getenv("MOT_CONFIG", str(DEFAULT_CONFIG)))
    settings = SolverSettings.from_file(config_path) if config_path.exists() else SolverSettings()
    runtime = settings.runtime
    threads = args.threads if args.threads is not None else int(os.getenv("MOT_THREADS", runtime.threads))
    runtime = replace(
        runtime,
        threads=threads,
        seed=args.seed if args.seed is not None else runtime.seed,
        out_dir=str(args.out) if args.out is not None else runtime.out_dir,
        log_level=args.log_level or runtime.log_level,
    )
    return replace(settings, runtime=runtime)


def _source(args: argparse.Namespace, settings: SolverSettings) -> InstanceSource:
    if args.instance is not None:
        return load_instance(args.instance)
    if args.family == "random":
        return generate_instance("random", settings.schedule.grid_1d[0].size, settings.runtime.seed)
    return instance_family(args.family)


def _with_eps(settings: SolverSettings, eps: Optional[float]) -> SolverSettings:
    if eps is None:
        return settings
    schedule = replace(settings.schedule, eps_start=max(settings.schedule.eps_start, eps), eps_target=eps)
    return replace(settings, schedule=schedule)


def cmd_solve(args: argparse.Namespace, settings: SolverSettings, out: Path) -> int:
    settings = _with_eps(settings, args.eps)
    report = run_hybrid(_source(args, settings), settings, solver=args.solver)
    run_id = args.run_id or time.strftime("run-%Y%m%d-%H%M%S")
    target = write_report(report, out, run_id)
    if args.coupling or args.slice:
        export_coupling(report.problem, report.state, target.parent / "coupling.csv", slices=args.slice)
    print(f"{report.solver} eps={report.epsilon:.3g} converged={report.converged} error={report.grad_error:.3e} -> {target}")
    return 0 if report.converged else 1


def cmd_gap_curve(args: argparse.Namespace, settings: SolverSettings, out: Path) -> int:
    rows = gap_curve(_source(args, settings), args.eps, args.mode or DOMINATOR_MODES, settings)
    target = write_gap_curve(rows, out / "gap_curve.csv")
    for row in rows:
        print(f"eps={row.eps:.3g} {row.mode}: gap={row.gap:.6e} gap/eps={row.gap_over_eps:.4f}")
    print(f"-> {target}")
    return 0


def cmd_bench(args: argparse.Namespace, settings: SolverSettings, out: Path) -> int:
    rows = bench(_source(args, settings), args.eps, settings, args.solver or SOLVER_CHOICES)
    print(f"{len(rows)} trace rows -> {write_bench(rows, out / 'bench.csv')}")
    return 0


def cmd_repair(args: argparse.Namespace, settings: SolverSettings, out: Path) -> int:
    inst = load_instance(args.instance)
    result = repair_marginals(inst, args.a_weights, settings=settings)
    target = save_instance(result.repaired_instance(inst), args.output or out / f"{args.instance.stem}_repaired.json")
    print(f"alpha={result.alpha_final:.3g} f* gap={result.fstar_gap:.6e} -> {target}")
    return 0


def cmd_hull(args: argparse.Namespace, settings: SolverSettings, out: Path) -> int:
    table = np.loadtxt(args.grid, delimiter=",", skiprows=1, ndmin=2)
    grid, f = table[:, :-1], table[:, -1]
    dim = grid.shape[1]
    rows = []
    for x in args.x:
        result = hull_at(grid, f, np.asarray(x), None, settings.hull)
        support = " ".join(str(int(i)) for i in result.support)
        rows.append(tuple(x) + (result.value,) + tuple(np.atleast_1d(result.gradient)) + (support,))
    axes = ["x"] if dim == 1 else [f"x{k + 1}" for k in range(dim)]
    grads = ["gradient"] if dim == 1 else [f"gradient{k + 1}" for k in range(dim)]
    target = write_csv(out / "hull.csv", axes + ["value"] + grads + ["support"], rows)
    print(f"{len(rows)} hull values -> {target}")
    return 0


def cmd_oracle(args: argparse.Namespace, settings: SolverSettings, out: Path) -> int:
    solution = solve_mot_lp(load_instance(args.instance))
    if not solution.optimal:
        print(f"LP status: {solution.status}")
        return 1
    np.savetxt(out / "oracle_coupling.csv", solution.coupling, delimiter=",", fmt="%.17g")
    print(f"LP value {solution.value:.17g} ({solution.iterations} pivots)")
    return 0


def cmd_generate(args: argparse.Namespace, settings: SolverSettings, out: Path) -> int:
    inst = generate_instance(args.name, args.n, settings.runtime.seed)
    target = save_instance(inst, args.output or out / f"{args.name}_{args.n}.json")
    print(f"{args.name}: {inst.mu.size} x {inst.nu.size} -> {target}")
    return 0


COMMANDS = {
    "solve": cmd_solve,
    "gap-curve": cmd_gap_curve,
    "bench": cmd_bench,
    "repair": cmd_repair,
    "hull": cmd_hull,
    "oracle": cmd_oracle,
    "generate": cmd_generate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = load_settings(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(
        level=settings.runtime.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
    out = Path(settings.runtime.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        return COMMANDS[args.command](args, settings, out)
    except (MotError, OSError) as exc:
        logger.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
