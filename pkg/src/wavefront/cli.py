"""Command-line entry point: ``wavefront [global options] <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from . import __version__
from .config import ConfigError, load_config
from .pipeline import STAGES, StageError, run_pipeline, run_stage

log = logging.getLogger("wavefront")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wavefront", description=__doc__)
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("--config", help="INI configuration file")
    ap.add_argument("--seed", type=int, help="master seed (overrides the config)")
    ap.add_argument("--scale", choices=("desk", "paper"), help="MCMC run lengths")
    ap.add_argument("--threads", type=int, help="worker processes and BLAS threads")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    for name in STAGES:
        sp = sub.add_parser(name, help=f"run the {name} stage")
        sp.add_argument("--force", action="store_true", help="rerun even if up to date")
        if name == "infer":
            sp.add_argument("--n-iter", type=int)
            sp.add_argument("--burn-in", type=int)
            sp.add_argument("--thin", type=int)
            sp.add_argument("--mode", choices=("fixed", "joint", "mixture"), dest="hyper_mode")
            sp.add_argument("--prior", action="append", default=[], metavar="NAME=A:B",
                            help="prior override, e.g. nu=3.5:1 or sigma2=5:1e6 (repeatable)")
            sp.add_argument("--sites", help="sites file (overrides the config)")
            sp.add_argument("--emulators", help="work directory holding emulators/ (overrides the config)")

    sp = sub.add_parser("pipeline", help="run every stage in order, skipping those up to date")
    sp.add_argument("--force", action="store_true")
    sp.add_argument("--from", dest="start", choices=STAGES, help="first stage to run")
    sp.add_argument("--to", dest="stop", choices=STAGES, help="last stage to run")

    sp = sub.add_parser("synth", help="write a small synthetic scenario with a ready config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-sites", type=int, default=30)
    return ap


def _config(args):
    overrides = {"seed": args.seed, "threads": args.threads}
    cfg = load_config(args.config, **overrides)
    if args.scale:
        cfg = cfg.with_scale(args.scale)
    if getattr(args, "command", None) == "infer":
        upd = {k: v for k, v in (("mh_n_iter", args.n_iter), ("mh_burn_in", args.burn_in),
                                 ("mh_thin", args.thin), ("hyper_mode", args.hyper_mode),
                                 ("sites", args.sites), ("work_dir", args.emulators)) if v is not None}
        if args.prior:
            upd["prior_overrides"] = " ".join([cfg.prior_overrides, *args.prior]).strip()
        cfg = replace(cfg, **upd)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            from .synthetic import write_scenario
            info = write_scenario(args.out, n_sites=args.n_sites, seed=args.seed or 1)
            print(f"wrote {info['n_sites']} sites and config.ini to {args.out}")
            return EXIT_OK
        cfg = _config(args)
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=cfg.threads):
            if args.command == "pipeline":
                i0 = STAGES.index(args.start) if args.start else 0
                i1 = STAGES.index(args.stop) + 1 if args.stop else len(STAGES)
                if i0 >= i1:
                    raise ConfigError("--from stage comes after --to stage")
                ran = run_pipeline(cfg, STAGES[i0:i1], force=args.force)
                for name, did in ran.items():
                    print(f"{name}: {'ran' if did else 'up to date'}")
            else:
                did = run_stage(args.command, cfg, force=args.force)
                print(f"{args.command}: {'ran' if did else 'up to date'}")
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
