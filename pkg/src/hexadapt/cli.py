"""Command-line entry point: ``hexadapt {lshape,insert,probe,sweep}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io, scenarios
from .config import config_from_dict, echo_config, load_config
from .errors import ConfigError, HexAdaptError

log = logging.getLogger("hexadapt")

SCENARIO_OF = {"lshape": "lshape", "insert": "insert", "probe": "probe", "sweep": "insert"}


def build_parser():
    p = argparse.ArgumentParser(prog="hexadapt", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("lshape", "uniform vs adaptive refinement study on the L-shaped domain"),
        ("insert", "needle insertion (optionally retraction) force-displacement run"),
        ("probe", "tissue displacement profile through the needle tip"),
        ("sweep", "insertion runs over puncture strength and shaft friction"),
    ]:
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", type=Path, help="YAML scenario file")
        s.add_argument("--out", type=Path, help="output directory (overrides output.directory)")
        s.add_argument("--seed", type=int, help="recorded seed (overrides seed)")
        s.add_argument("--dump-mesh-every", type=int, metavar="K", help="write a VTK mesh every K steps")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args):
    scenario = SCENARIO_OF[args.command]
    if args.config is not None:
        cfg = load_config(args.config, scenario)
        if cfg.scenario != scenario:
            raise ConfigError("scenario", f"{cfg.scenario!r} does not match command {args.command!r}")
    else:
        cfg = config_from_dict({"scenario": scenario})
    if args.out is not None:
        cfg.output.directory = str(args.out)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.dump_mesh_every is not None:
        cfg.output.dump_mesh_every = args.dump_mesh_every
    return cfg.validate()


def _mesh_dumper(out_dir, every):
    if not every:
        return None

    def dump(sim, rec):
        if rec.step % every:
            return
        mesh = sim.mesh
        elems = mesh.live_elements()
        err = np.zeros(len(elems))
        if sim.last_emap is not None:
            lookup = sim.last_emap.as_dict()
            err = np.array([lookup.get(int(e), 0.0) for e in elems])
        x = mesh.field("x")
        io.write_vtk(
            Path(out_dir) / f"mesh_{rec.step:05d}.vtk",
            mesh,
            positions=x,
            cell_data={"level": mesh.levels(elems), "error": err},
            point_data={"displacement": x - mesh.rest_positions},
        )

    return dump


def run(args):
    cfg = resolve_config(args)
    np.random.seed(cfg.seed)
    out = Path(cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(echo_config(cfg), encoding="utf-8")
    say = log.info
    if args.command == "lshape":
        report = scenarios.run_lshape(cfg, log=say)
    elif args.command == "insert":
        dumper = _mesh_dumper(out, cfg.output.dump_mesh_every)
        report = scenarios.run_phantom_insertion(cfg, callback=dumper, log=say)
    elif args.command == "probe":
        report = scenarios.run_displacement_probe(cfg, log=say)
    else:
        report = scenarios.run_sweep(cfg, log=say)
    columns = {k: list(scenarios.STEP_COLUMNS) for k in report.tables if k.startswith("steps")}
    files = io.write_report(report, out, columns, argv=sys.argv[1:])
    for f in files:
        print(f)
    return report


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except HexAdaptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
