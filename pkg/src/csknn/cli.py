"""Command-line entry point: ``csknn <subcommand> [options]``."""

import argparse
import json
import math
import sys

import numpy as np

from . import bench
from . import cost_geometry as cg
from .classifier import k_schedule, write_eval_rows
from .hard_family import save_distribution
from .neighbours import NeighbourIndex, write_dataset, write_query_dump
from .projection import ProjectionSpec, distortion, sample_projection, theta_from_epsilon


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="base seed")
    p.add_argument("--config", default=argparse.SUPPRESS, help="key = value config file")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output path")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads")
    return p


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(prog="csknn", parents=[common],
                                     description="Cost-sensitive k-NN experiments on embedded manifolds.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a labelled sample")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--spec-out", help="also write the distribution spec here")

    e = sub.add_parser("evaluate", parents=[common], help="one k-NN run, one CSV row")
    e.add_argument("--n", type=int, required=True)
    e.add_argument("--k", type=int, help="default: the configured schedule")

    r = sub.add_parser("rate", parents=[common], help="full rate experiment")
    r.add_argument("--summary", help="summary CSV path (default: <out>.summary.csv)")

    pc = sub.add_parser("project-check", parents=[common], help="distortion and radius-ratio study")
    pc.add_argument("--dims", default="8,16,32,64", help="comma list of target dimensions")
    pc.add_argument("--projections", type=int, default=20, help="projection seeds per dimension")
    pc.add_argument("--points", type=int, default=500)
    pc.add_argument("--queries", type=int, default=200)
    pc.add_argument("--k", default="1,5,10", help="comma list of neighbour counts")
    pc.add_argument("--kind", default="achlioptas")

    v = sub.add_parser("verify", parents=[common], help="invariant battery")
    v.add_argument("--c-scale", type=float, default=1.0,
                   help="multiply the margin-growth constant (fault injection)")

    c = sub.add_parser("calibrate", parents=[common], help="print the cost-matrix calibration")
    c.add_argument("--cost", help="cost matrix file (default: zero-one)")
    c.add_argument("--labels", type=int, default=2, help="label count for the zero-one default")
    return parser


def _settings(args):
    kv = bench.read_key_values(args.config) if getattr(args, "config", None) else {}
    if hasattr(args, "seed"):
        kv["seed"] = str(args.seed)
    return kv


def _write_or_print(path, text):
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_generate(args):
    kv = _settings(args)
    dist = bench.distribution_from_mapping(kv)
    data = dist.sample(args.n, [int(kv.get("seed", 0)), 0])
    if getattr(args, "out", None):
        write_dataset(data, args.out)
    else:
        sys.stdout.write(data.to_text())
    if args.spec_out:
        save_distribution(dist, args.spec_out)
    return 0


def cmd_evaluate(args):
    kv = _settings(args)
    kv.setdefault("n_grid", f"{args.n},{args.n + 1}")
    config = bench.config_from_mapping(kv)
    k = args.k if args.k is not None else k_schedule(config.schedule, args.n, config.xi)
    excess, miss = bench.run_trial(config, args.n, k, config.seed)
    dist = config.distribution
    row = {"family": dist.family, "gamma": dist.manifold.intrinsic_dim,
           "d": dist.manifold.ambient_dim, "n": args.n, "k": k, "mode": config.mode_label,
           "trial": 0, "excess_risk": excess, "misclass_prob": miss, "seed": config.seed}
    write_eval_rows(getattr(args, "out", None) or sys.stdout, [row])
    return 0


def cmd_rate(args):
    config = bench.config_from_mapping(_settings(args))
    report = bench.run_rate(config, getattr(args, "threads", 1))
    out = getattr(args, "out", None)
    if out:
        bench.write_rate_rows(report, out)
        bench.write_rate_summary(report, args.summary or out + ".summary.csv")
    else:
        bench.write_rate_summary(report, args.summary or sys.stdout)
    print(f"slope {report.slope:.4f} (fit stderr {report.fit_stderr:.4f}, "
          f"MC stderr {report.slope_stderr:.4f}); theory {report.theory_exponent:.4f}",
          file=sys.stderr)
    for note in report.notes:
        print("note:", note, file=sys.stderr)
    return 0


def cmd_project_check(args):
    kv = _settings(args)
    kv.setdefault("d", "200")
    seed = int(kv.get("seed", 0))
    dist = bench.distribution_from_mapping(kv)
    m = dist.manifold
    data = dist.sample(args.points, [seed, 0])
    n_query = min(args.queries, args.points - 1)
    queries = data.features[:n_query]
    train = type(data)(data.features[n_query:], data.labels[n_query:], data.num_labels)
    ks = [int(v) for v in args.k.split(",")]
    rows, summary = [], {}
    for h in (int(v) for v in args.dims.split(",")):
        eps_all = []
        for s in range(args.projections):
            proj = sample_projection(ProjectionSpec(args.kind, m.ambient_dim, h, seed=s))
            eps = distortion(proj, data.features).epsilon
            eps_all.append(eps)
            index = NeighbourIndex(train, proj)
            for k in ks:
                _, r0 = index.query_batch(queries, k, "exact")
                _, r1 = index.query_batch(queries, k, "projected")
                for qid, (x, a, b) in enumerate(zip(queries, r0, r1)):
                    theta = b / a if a > 0 else 1.0
                    omega = dist.ball_measure(x, b) / dist.ball_measure(x, a) if a > 0 else 1.0
                    rows.append((qid, k, a, b, theta, omega))
        med = float(np.median(eps_all))
        summary[h] = {"median_epsilon": med,
                      "theta_cap": theta_from_epsilon(med) if med < 1 else math.inf}
    if getattr(args, "out", None):
        write_query_dump(args.out, rows)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_verify(args):
    checks = bench.verify_all(int(_settings(args).get("seed", 0)), args.c_scale)
    ok = all(c.passed for c in checks)
    report = {"passed": ok,
              "checks": [{"name": c.name, "passed": c.passed, "slack": c.slack, "detail": c.detail}
                         for c in checks]}
    _write_or_print(getattr(args, "out", None), json.dumps(report, indent=2) + "\n")
    return 0 if ok else 1


def cmd_calibrate(args):
    phi = cg.read_cost_matrix(args.cost) if args.cost else cg.CostMatrix.zero_one(args.labels)
    cal = cg.calibrate(phi)
    text = json.dumps({"kappa": cal.kappa, "beta": cal.beta, "c": cal.c, "t": cal.t,
                       "j_star": sorted(cal.j_star), "k_star": sorted(cal.k_star),
                       "l_star": sorted(cal.l_star)}, indent=2) + "\n"
    _write_or_print(getattr(args, "out", None), text)
    return 0


COMMANDS = {"generate": cmd_generate, "evaluate": cmd_evaluate, "rate": cmd_rate,
            "project-check": cmd_project_check, "verify": cmd_verify, "calibrate": cmd_calibrate}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError) as exc:
        print(f"csknn {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
