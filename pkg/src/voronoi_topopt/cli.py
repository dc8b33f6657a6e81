"""Command-line front end.

    voronoi-topopt run [CONFIG] [--preset NAME] [--seed N] [--out DIR]
                       [--emit-every K] [--max-iter N]
    voronoi-topopt check-gradients [--seed N]
    voronoi-topopt render SITES_DUMP CONFIG [--out FILE] [--steepness G]

Exit codes: 0 success, 1 configuration error, 2 gradient check failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import PRESETS, ConfigError, load_config
from .io import RunWriter, read_sites, write_density_image
from .neighbor_index import build
from .pipeline import first_feasible, optimize, project
from .projection import ProjectionConfig, advance_steepness
from .voronoi_field import rasterize_density

EXIT_OK, EXIT_CONFIG, EXIT_ORACLE = 0, 1, 2

logger = logging.getLogger("voronoi_topopt")


def _parser():
    p = argparse.ArgumentParser(prog="voronoi-topopt",
                                description="Topology optimization on soft Voronoi diagrams.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every iteration")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="optimize a preset or config file")
    run.add_argument("config", nargs="?", help="JSON config file")
    run.add_argument("--preset", choices=sorted(PRESETS))
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="output directory")
    run.add_argument("--emit-every", type=int, dest="emit_every")
    run.add_argument("--max-iter", type=int, dest="max_iter")

    chk = sub.add_parser("check-gradients", help="finite-difference checks of the gradients")
    chk.add_argument("--seed", type=int, default=0)

    ren = sub.add_parser("render", help="rasterize a site dump to a PGM image")
    ren.add_argument("sites")
    ren.add_argument("config", help="JSON config file or preset name")
    ren.add_argument("--out", help="image path (default: next to the dump)")
    ren.add_argument("--steepness", type=float,
                     help="projection steepness (default: from the dump's iteration)")
    return p


def _cmd_run(args) -> int:
    if args.config is None and args.preset is None:
        raise ConfigError("config", "give a config file or --preset")
    overrides = {}
    if args.seed is not None:
        overrides["sites"] = {"seed": args.seed}
    if args.out is not None:
        overrides.setdefault("output", {})["directory"] = args.out
    if args.emit_every is not None:
        overrides.setdefault("output", {})["emit_every"] = args.emit_every
    if args.max_iter is not None:
        overrides["optimizer"] = {"max_iterations": args.max_iter}
    run = load_config(args.config, args.preset, overrides)
    problem = run.problem
    out = run.output_dir
    with RunWriter(out, run.emit_every, run.scale) as writer:
        (out / "config.json").write_text(json.dumps(run.raw, indent=1))
        result = optimize(problem, writer)
        writer.snapshot("final", result.rho_tilde, result.sites)
    hist = result.history
    summary = {"iterations": len(hist), "stop_reason": result.stop_reason}
    if len(hist):
        summary.update(final_compliance=hist[-1].compliance,
                       final_volume_fraction=hist[-1].volume_fraction)
        k = first_feasible(hist, problem.target_volume)
        if k is not None:
            summary["first_feasible_compliance"] = hist[k].compliance
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary))
    return EXIT_OK


def _cmd_check(args) -> int:
    from .gradcheck import run_all
    ok = True
    for res in run_all(args.seed):
        status = "PASS" if res.passed else "FAIL"
        print(f"{status}  {res.name}: max relative error {res.max_relative_error:.3e} "
              f"(threshold {res.threshold:g})")
        ok &= res.passed
    return EXIT_OK if ok else EXIT_ORACLE


def _cmd_render(args) -> int:
    cfg_arg = args.config
    if not Path(cfg_arg).is_file() and cfg_arg in PRESETS:
        run = load_config(None, cfg_arg)
    else:
        run = load_config(cfg_arg)
    problem = run.problem
    dump = Path(args.sites)
    try:
        doc = json.loads(dump.read_text())
        sites = read_sites(dump, run.scale)
    except (OSError, ValueError) as exc:
        raise ConfigError("sites", f"cannot read {dump}: {exc}") from None
    if sites.n_sites < problem.field_config.neighbor_count:
        raise ConfigError("field.neighbor_count", "exceeds the number of sites in the dump")
    if args.steepness is not None:
        proj = ProjectionConfig(steepness=args.steepness)
    else:
        proj = advance_steepness(problem.projection, int(doc.get("iteration", 0)))
    grid = rasterize_density(sites, problem.shape, problem.field_config, build(sites),
                             problem.mask)
    out = Path(args.out) if args.out else dump.with_suffix(".pgm")
    write_density_image(project(grid.values, proj, problem.mask), out)
    print(out)
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "check-gradients":
            return _cmd_check(args)
        return _cmd_render(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
