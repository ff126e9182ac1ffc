"""Command-line entry point: ``streetcrop <stage> --config run.ini``.

Exit codes: 0 success, 1 other failure, 2 configuration error,
3 missing upstream artifact, 4 image budget exhausted.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, PipelineConfig, load_config
from .pipeline import (
    STAGE_ORDER,
    DependencyError,
    FunnelReport,
    PipelineLockedError,
    run_stages,
)
from .svclient import BudgetExceededError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_BUDGET = 0, 1, 2, 3, 4

log = logging.getLogger("streetcrop")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("run options")
    g.add_argument("--config", type=Path, help="INI file; defaults apply when omitted")
    g.add_argument("--seed", type=int, help="override [run] seed")
    g.add_argument("--workdir", type=Path, help="override [run] workdir")
    g.add_argument("--threads", type=int, help="override [run] threads")
    g.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config key; repeatable")
    g.add_argument("--force", action="store_true", help="ignore stamps and recompute")
    g.add_argument("-v", "--verbose", action="count", default=0)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(
        prog="streetcrop",
        description="Street-view ground references and crop-type mapping pipeline.",
        parents=[common],
    )
    parser.add_argument("--stage", choices=STAGE_ORDER + ("all",), help="stage to run (same as the subcommand)")
    sub = parser.add_subparsers(dest="command")
    for name in STAGE_ORDER:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    sub.add_parser("all", parents=[common], help="run every stage in order")
    sub.add_parser("funnel", parents=[common], help="print the funnel report")
    c = sub.add_parser("config", parents=[common], help="print the resolved configuration")
    c.add_argument("--defaults", action="store_true", help="print built-in defaults instead")
    s = sub.add_parser("synth", parents=[common], help="write the synthetic desk country and its config")
    s.add_argument("outdir", type=Path)
    s.add_argument("--n-trees", type=int, default=None, help="forest size in the written config")
    return parser


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if args.seed is not None:
        out["run.seed"] = str(args.seed)
    if args.workdir is not None:
        out["run.workdir"] = str(args.workdir)
    if args.threads is not None:
        out["run.threads"] = str(args.threads)
    return out


def _synth(args) -> int:
    from .synthetic import make_country

    seed = args.seed if args.seed is not None else 0
    out = args.outdir.resolve()
    paths = make_country(out, seed)
    cfg = PipelineConfig(
        region="synthetic",
        seed=seed,
        workdir=Path("work"),
        paths={k: p.name for k, p in paths.items()},
        transport="synthetic",
        rate=1000.0,
        workers=1,
        backoff_s=0.01,
    )
    if args.n_trees:
        cfg = replace(cfg, forest=replace(cfg.forest, n_trees=args.n_trees))
    (out / "config.ini").write_text(cfg.to_ini())
    print(f"synthetic country written to {out}; run: streetcrop all --config {out / 'config.ini'}")
    return EXIT_OK


def _print_result(r) -> None:
    state = "unchanged, skipped" if r.skipped else f"done in {r.seconds:.1f}s"
    print(f"[{r.stage}] {state}")
    for k, v in r.summary.items():
        if k == "points":
            continue
        print(f"  {k}: {v:.4f}" if isinstance(v, float) else f"  {k}: {v}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    command = args.command or args.stage
    if command is None:
        parser.print_help()
        return EXIT_CONFIG
    try:
        if command == "synth":
            return _synth(args)
        if command == "config" and args.defaults:
            print(PipelineConfig().to_ini())
            return EXIT_OK
        cfg = load_config(args.config, _overrides(args))
        if command == "config":
            print(cfg.to_ini())
            return EXIT_OK
        if command == "funnel":
            print(FunnelReport.load(Path(cfg.workdir) / "funnel.json").table())
            return EXIT_OK
        names = STAGE_ORDER if command == "all" else (command,)
        for r in run_stages(names, cfg, force=args.force):
            _print_result(r)
        funnel = FunnelReport.load(Path(cfg.workdir) / "funnel.json")
        if funnel.entries:
            print("\n" + funnel.table())
        for problem in funnel.problems():
            log.warning("funnel: %s", problem)
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as e:
        print(f"dependency error: {e}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except BudgetExceededError as e:
        print(f"budget exceeded: {e}", file=sys.stderr)
        return EXIT_BUDGET
    except PipelineLockedError as e:
        print(str(e), file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
