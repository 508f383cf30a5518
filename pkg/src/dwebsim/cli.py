"""Command line front end: run one scenario, sweep a matrix, or dump a topology."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .harness import ScenarioConfig, load_config, parse_sweep, run_matrix, run_scenario
from .simnet import build_topology


def _apply_overrides(config: ScenarioConfig, args) -> ScenarioConfig:
    if args.seed is not None:
        config.seed = args.seed
    if getattr(args, "policy", None):
        from .cache import Policy

        config.policy = Policy.parse(args.policy)
    if getattr(args, "gateways", None):
        config.gateway_count = args.gateways
    config.validate()
    return config


def _cmd_run(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    out = Path(args.out) if args.out else Path("out")
    metrics = run_scenario(config, out_dir=out)
    totals = metrics.totals()
    overall = metrics.overall_hit_ratio()
    print(f"policy={config.policy.value} gateways={config.gateway_count} seed={config.seed}")
    print(
        f"requests={totals['requests']} hits={totals['hits_local'] + totals['hits_remote']} "
        f"producer_fetches={totals['producer_fetches']} failures={totals['failures']}"
    )
    print(f"overall_hit_ratio={overall:.4f}" if overall is not None else "overall_hit_ratio=n/a")
    print(f"wrote {out / 'metrics.csv'} and {out / 'summary.txt'}")
    return 0


def _cmd_matrix(args) -> int:
    configs, seeds = parse_sweep(Path(args.config).read_text())
    if args.seed is not None:
        seeds = [args.seed]
    if args.policy:
        from .cache import Policy

        policy = Policy.parse(args.policy)
        for config in configs:
            config.policy = policy
    if args.gateways:
        for config in configs:
            config.gateway_count = args.gateways
    out = Path(args.out) if args.out else Path("out")
    rows = run_matrix(configs, seeds, out_dir=out, workers=args.workers)
    for row in rows:
        if row["seed_count"] != 1:
            print(
                f"{row['policy']:>11} gw={row['gateways']:<4} seeds={row['seed_count']} "
                f"mean={row['mean_final_hit_ratio']} stddev={row['stddev']}"
            )
    print(f"wrote {out / 'aggregate.csv'} and {out / 'runs.csv'}")
    return 0


def _cmd_topo(args) -> int:
    if args.config:
        config = _apply_overrides(load_config(args.config), args)
        gateways, consumers, seed, latency = (
            config.gateway_count,
            config.consumers_per_gateway,
            config.seed,
            config.latency,
        )
    else:
        gateways = args.gateways or 10
        consumers, seed, latency = 2, args.seed or 0, 1
    topology = build_topology(gateways, consumers, seed, latency)
    text = topology.export_edges()
    if args.out:
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        print(f"wrote {path}")
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dwebsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one scenario from a config file")
    run_p.add_argument("--config", required=True, help="flat key = value scenario file")
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--out", default=None, help="output directory (default: out/)")
    run_p.add_argument("--policy", default=None, help="override cache policy")
    run_p.add_argument("--gateways", type=int, default=None, help="override gateway count")
    run_p.set_defaults(func=_cmd_run)

    matrix_p = sub.add_parser("matrix", help="run a sweep file (Cartesian product)")
    matrix_p.add_argument("--config", required=True, help="sweep file with comma lists")
    matrix_p.add_argument("--seed", type=int, default=None, help="replace the sweep's seed list")
    matrix_p.add_argument("--out", default=None)
    matrix_p.add_argument("--policy", default=None)
    matrix_p.add_argument("--gateways", type=int, default=None)
    matrix_p.add_argument("--workers", type=int, default=1, help="parallel runs")
    matrix_p.set_defaults(func=_cmd_matrix)

    topo_p = sub.add_parser("topo", help="emit a topology edge list")
    topo_p.add_argument("--config", default=None)
    topo_p.add_argument("--seed", type=int, default=None)
    topo_p.add_argument("--out", default=None, help="write to file instead of stdout")
    topo_p.add_argument("--gateways", type=int, default=None)
    topo_p.add_argument("--policy", default=None, help=argparse.SUPPRESS)
    topo_p.set_defaults(func=_cmd_topo)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
