"""Command-line entry point: ``revpomdp <command> ...``.

Instance specs are JSON files in the :class:`HardInstanceSpec` layout, or the
names of shipped instances (``tiny-pac``, ``tiny-single``, ``tiny-regret``).
Tabular output goes to stdout as CSV; reports and experiment runs are written
under ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import divergence as dv
from . import experiments as ex
from .errors import ConfigError, RevPOMDPError
from .instances import (
    FAMILIES,
    SINGLE,
    HardInstanceSpec,
    Theta,
    build,
    claimed_counts,
    construction_counts,
    optimal_policy,
    revealing_window,
)
from .learners import (
    EnvironmentHandle,
    always_explore,
    bruteforce_learn,
    explore_then_exploit,
    omle,
    omle_class_from_family,
    uniform_baseline,
)
from .pomdp import UniformPolicy
from .revealing import certify, decode, emission_action_matrix, lift_inverse

LEARNERS = ("bruteforce", "omle", "explore-then-exploit", "always-explore", "uniform")


def load_spec(ref: str) -> HardInstanceSpec:
    path = Path(ref)
    if not path.exists():
        path = ex.shipped_config_dir() / "instances" / f"{ref}.json"
    if not path.exists():
        raise ConfigError(f"no instance file or shipped instance named {ref!r}")
    try:
        return HardInstanceSpec.from_dict(json.loads(path.read_text()))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{ref}: invalid instance spec ({exc})") from exc


def _spec_from_args(args) -> HardInstanceSpec:
    if args.spec:
        return load_spec(args.spec)
    if args.family is None:
        raise ConfigError("give --spec or --family with its parameters")
    theta = None if args.theta in (None, "null") else Theta.from_dict(json.loads(args.theta))
    return HardInstanceSpec(
        args.family,
        args.epsilon,
        args.sigma,
        args.n,
        args.K,
        args.H,
        args.A,
        m=args.m,
        L=args.L,
        theta=theta,
        mu=None if args.mu is None else json.loads(args.mu),
        unchecked=args.unchecked,
        mu_seed=args.seed,
    )


def _writer(out=None):
    return csv.writer(out or sys.stdout, lineterminator="\n")


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _out_dir(args) -> Path:
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


# commands


def cmd_gen(args) -> int:
    spec = _spec_from_args(args)
    inst = build(spec)
    info = {
        "spec": spec.to_dict(),
        "horizon": inst.pomdp.H,
        "claimed_counts": list(claimed_counts(spec.public())),
        "construction_counts": list(construction_counts(spec.public())),
        **inst.metadata.to_dict(),
    }
    if args.dump:
        out = _out_dir(args)
        inst.pomdp.save(out / "instance.json")
        (out / "metadata.json").write_text(json.dumps(info, indent=2) + "\n")
        info["written"] = [str(out / "instance.json"), str(out / "metadata.json")]
    print(json.dumps(info, indent=2))
    return 0


def cmd_analyze(args) -> int:
    spec = _spec_from_args(args)
    pomdp = build(spec).pomdp
    m = args.window or revealing_window(spec)
    M = emission_action_matrix(pomdp, args.step, m, cap=args.cap)
    w = _writer()
    w.writerow(["actions", "observations", *pomdp.state_labels])
    for i, row in enumerate(M.matrix):
        a_idx, o_idx = divmod(i, M.block_size)
        acts = decode(a_idx, pomdp.A, m - 1)
        obs = decode(o_idx, pomdp.O, m)
        if args.nonzero and not np.any(row):
            continue
        w.writerow(
            [" ".join(map(str, acts)), " ".join(pomdp.obs_labels[o] for o in obs), *(_fmt(x) for x in row)]
        )
    rank = np.linalg.matrix_rank(M.matrix[:, M.live]) if M.live.any() else 0
    print(f"# step={args.step} window={m} rows={M.matrix.shape[0]} live_states={int(M.live.sum())} rank={rank}")
    return 0


def cmd_certify(args) -> int:
    spec = _spec_from_args(args)
    pomdp = build(spec).pomdp
    m = args.window or revealing_window(spec)
    rep = certify(pomdp, m)
    bound = 1.0 if spec.is_null else 1 + 2 / spec.sigma
    w = _writer()
    w.writerow(["step", "window", "alpha_inv", "residual", "valid", "bound", "pass"])
    ok = True
    for c in rep.certificates:
        good = c.valid and c.norm <= bound + ex.CERT_TOL
        ok &= good
        w.writerow([c.h, c.window, _fmt(c.norm), _fmt(c.residual), c.valid, _fmt(bound), good])
        if args.lift and c.h <= pomdp.H - m:
            lc = lift_inverse(c, pomdp, c.h, 0)
            lgood = lc.valid and lc.norm <= c.norm + ex.CERT_TOL
            ok &= lgood
            w.writerow([lc.h, lc.window, _fmt(lc.norm), _fmt(lc.residual), lc.valid, _fmt(c.norm), lgood])
    print(f"# alpha_inv={rep.alpha_inv!r} bound={bound!r} pass={ok}")
    return 0 if ok else 1


def cmd_learn(args) -> int:
    spec = _spec_from_args(args)
    inst = build(spec)
    env = EnvironmentHandle.from_instance(inst, seed=args.seed)
    pub = spec.public()
    alg = args.algorithm
    if alg == "bruteforce":
        rep = bruteforce_learn(pub, env, args.confidence, max_episodes=args.episodes, audit_regret=True)
    elif alg == "omle":
        models = omle_class_from_family(spec, cap=args.cap)
        label = "null" if spec.theta is None else str(spec.theta.to_dict())
        truth = next((i for i, m in enumerate(models) if m.label == label), None)
        rep = omle(models, env, args.episodes, delta=args.delta, audit_index=truth)
    elif alg == "explore-then-exploit":
        rep = explore_then_exploit(pub, env, args.episodes, args.split, args.confidence)
    elif alg == "always-explore":
        rep = always_explore(pub, env, args.episodes)
    else:
        rep = uniform_baseline(env, args.episodes)
    out = _out_dir(args)
    report = rep.to_dict()
    if alg == "bruteforce":
        report["success"] = rep.theta_hat == spec.theta
    (out / "learn-report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    with open(out / "learn-regret.csv", "w") as fh:
        w = _writer(fh)
        w.writerow(["episode", "instantaneous_regret", "cumulative_regret"])
        for t, v, c in rep.regret_rows():
            w.writerow([t, _fmt(v), _fmt(c)])
    print(json.dumps({k: report[k] for k in ("algorithm", "episodes", "verdict", "theta_hat", "cumulative_regret")}))
    return 0


def cmd_diverge(args) -> int:
    spec = _spec_from_args(args)
    w = _writer()
    w.writerow(["check", "detail", "lhs", "rhs_or_bound", "gap", "pass"])
    ok = True
    if args.check == "ingster":
        if spec.family != SINGLE or spec.is_null:
            raise ConfigError("ingster needs a non-null single-step instance")
        mus = list(itertools.product((-1, 1), repeat=spec.K))
        models = [build(spec.with_mu(mu)).pomdp for mu in mus]
        reference = build(spec.with_theta(None)).pomdp
        sched = [UniformPolicy(spec.A), optimal_policy(spec)][: args.T]
        r = dv.ingster_check(models, None, reference, sched, cap=args.cap)
        good = r.gap <= 1e-9
        ok &= good
        w.writerow(["ingster", f"T={len(sched)}", _fmt(r.lhs), _fmt(r.rhs), _fmt(r.gap), good])
    elif args.check == "chi2":
        mu = spec.mu_array
        for name, sched in ex.probe_schedules(spec):
            for label, mu2 in (("same", mu), ("flipped", -mu)):
                r = dv.chi2_inner_product_check(spec, mu, mu2, sched, cap=args.cap)
                good = r.lhs <= r.bound + 1e-9
                ok &= good
                w.writerow(["chi2", f"{name} {label}", _fmt(r.lhs), _fmt(r.bound), _fmt(r.bound - r.lhs), good])
    else:
        mu = spec.mu_array
        recs = dv.conditional_ratio_table(spec, mu, -mu, cap=args.cap)
        for r in recs:
            if r.expected is None:
                continue
            gap = abs(r.value - r.expected)
            good = gap <= 1e-12
            ok &= good
            w.writerow(["ratio", r.kind, _fmt(r.value), _fmt(r.expected), _fmt(gap), good])
    return 0 if ok else 1


def cmd_exp(args) -> int:
    kind = ex.CLI_KINDS[args.experiment]
    if args.config:
        cfg = ex.load_config(args.config)
    else:
        name = {"regret-compare": "regret", "identity-suite": "identities"}.get(kind, kind)
        cfg = ex.shipped_config(name)
    if cfg.kind != kind:
        raise ConfigError(f"config kind {cfg.kind!r} does not match subcommand {args.experiment!r}")
    if args.seeds:
        d = cfg.to_dict()
        d["seeds"] = args.seeds
        cfg = ex.ExperimentConfig.from_dict(d)
    result = ex.run_experiment(cfg, jobs=args.jobs)
    run = ex.persist(result, args.out)
    print(json.dumps({"run": str(run), "passed": result.passed, "config_hash": cfg.config_hash()}))
    if args.verbose:
        print(json.dumps(result.summary, indent=2, sort_keys=True, default=str))
    return 0 if result.passed else 1


# parser


def _add_spec_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--spec", help="instance JSON file or shipped instance name")
    p.add_argument("--family", choices=FAMILIES)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--K", type=int, default=2)
    p.add_argument("--H", type=int, default=4)
    p.add_argument("--A", type=int, default=3)
    p.add_argument("--m", type=int, default=1)
    p.add_argument("--L", type=int, default=1)
    p.add_argument("--theta", help='JSON theta, e.g. {"h_star":2,"s_star":0,"a_star":1,"password":[1]}; omit for null')
    p.add_argument("--mu", help="JSON sign array; drawn from --seed when omitted")
    p.add_argument("--unchecked", action="store_true", help="skip the proposition parameter ranges")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="revpomdp", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--jobs", type=int, default=None, help="worker processes (default: all cores)")
    parser.add_argument("--cap", type=int, default=10**6, help="enumeration cap")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="build an instance and print its summary")
    _add_spec_args(p)
    p.add_argument("--dump", action="store_true", help="write the POMDP to OUT/instance.json and the summary to OUT/metadata.json")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("analyze", help="print an emission-action matrix as CSV")
    _add_spec_args(p)
    p.add_argument("--step", type=int, default=1)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--nonzero", action="store_true", help="skip all-zero rows")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("certify", help="certify revealing constants for every step")
    _add_spec_args(p)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--lift", action="store_true", help="also lift each certificate by one step")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("learn", help="run a learner against a simulated instance")
    _add_spec_args(p)
    p.add_argument("--algorithm", choices=LEARNERS, default="bruteforce")
    p.add_argument("--episodes", type=int, default=None, help="episode budget (T for regret learners)")
    p.add_argument("--confidence", type=float, default=0.25)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--split", type=float, default=0.5)
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("diverge", help="emit divergence identity rows as CSV")
    _add_spec_args(p)
    p.add_argument("--check", choices=("ingster", "chi2", "ratio"), default="chi2")
    p.add_argument("--T", type=int, default=2)
    p.set_defaults(func=cmd_diverge)

    p = sub.add_parser("exp", help="run an experiment config and persist its records")
    p.add_argument("experiment", choices=sorted(ex.CLI_KINDS))
    p.add_argument("--config", help="JSON config; defaults to the shipped one")
    p.add_argument("--seeds", type=int, nargs="+", help="override the config seeds")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_exp)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "learn" and args.episodes is None and args.algorithm != "bruteforce":
        parser.error("--episodes is required for regret learners")
    try:
        return args.func(args)
    except RevPOMDPError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
