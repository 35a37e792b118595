"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line."""

import itertools
import json
import math
import time

import numpy as np
import pytest

from revpomdp import experiments as ex
from revpomdp.divergence import chi2_inner_product_check, inequality_violations, ingster_check
from revpomdp.instances import (
    PAC,
    REGRET,
    SINGLE,
    HardInstanceSpec,
    Theta,
    build,
    closed_form_values,
    optimal_policy,
    random_theta,
    reveal_event,
    revealing_window,
    staying_event,
)
from revpomdp.learners import EnvironmentHandle, bruteforce_learn, omle, omle_class_from_family
from revpomdp.pomdp import (
    RandomHistoryPolicy,
    UniformPolicy,
    enumerate_distribution,
    optimal_value_bruteforce,
    random_pomdp,
)
from revpomdp.psr import build_brep, check_b_stability, default_probes, verify_factorization
from revpomdp.revealing import certify, emission_action_matrix, lift_inverse


@pytest.fixture
def report(capsys):
    t0 = time.perf_counter()

    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n:2d}: {'PASS' if ok else 'FAIL'} ({time.perf_counter() - t0:.1f}s) {detail}")
        assert ok, detail

    return emit


def tiny(family, theta="auto", **kw):
    base = {
        SINGLE: dict(epsilon=0.1, sigma=0.1, n=1, K=1, H=4, A=3),
        REGRET: dict(epsilon=0.1, sigma=0.3, n=1, K=1, H=4, A=2),
        PAC: dict(epsilon=0.1, sigma=0.5, n=1, K=1, H=4, A=2, m=1, L=2),
    }[family]
    base.update(kw)
    spec = HardInstanceSpec(family, unchecked=True, **base)
    if theta == "auto":
        theta = random_theta(spec.public(), np.random.default_rng(0))
    return spec.with_theta(theta)


def identity_templates():
    return ex.shipped_config("identities").templates()


def tiny_pac():
    d = json.loads((ex.shipped_config_dir() / "instances" / "tiny-pac.json").read_text())
    return HardInstanceSpec.from_dict(d)


@pytest.fixture(scope="module")
def certify_sweep():
    return ex.run_experiment(ex.shipped_config("certify-sweep"), jobs=1)


def test_criterion_01_revealing_certificates(report, certify_sweep):
    rows = [r for r in certify_sweep.records if not r["lifted"]]
    per_family = {f: sum(r["family"] == f for r in rows) for f in (SINGLE, REGRET, PAC)}
    bad = [r for r in rows if not (r["pass"] and r["residual"] <= 1e-9)]
    worst = max(r["alpha_inv"] / r["bound"] for r in rows)
    ok = not bad and all(n == 50 for n in per_family.values())
    report(1, ok, f"{len(rows)} certificates, {len(bad)} failures, max alpha_inv/bound {worst:.12f}")


def test_criterion_02_lift_monotonicity(report, certify_sweep):
    rng = np.random.default_rng(2)
    checked, bad = 0, 0
    for _ in range(20):
        S = int(rng.integers(2, 4))
        p = random_pomdp(S, S + int(rng.integers(0, 3)), int(rng.integers(2, 4)), int(rng.integers(3, 5)), rng)
        for c in certify(p, 1).certificates:
            if c.h <= p.H - 1:
                for a in range(p.A):
                    lc = lift_inverse(c, p, c.h, a)
                    checked += 1
                    bad += not (lc.valid and lc.norm <= c.norm + 1e-9)
    lifted = [r for r in certify_sweep.records if r["lifted"]]
    bad += sum(not r["pass"] for r in lifted)
    report(2, bad == 0 and checked > 0 and lifted, f"{checked} random lifts and {len(lifted)} hard-instance lifts, {bad} failures")


def test_criterion_03_non_revealing_witness(report):
    specs = [
        ex.shipped_config("regret").templates()["multi"],
        HardInstanceSpec(REGRET, 0.1, 0.5, 1, 2, 5, 3, theta=Theta(2, 0, 1, (1, 2), 0), mu=(1, -1), unchecked=True),
    ]
    equal = []
    for spec in specs:
        lay = spec.layout
        M = emission_action_matrix(build(spec).pomdp, spec.theta.h_star + 1, spec.m).matrix
        equal.append(bool(np.array_equal(M[:, lay.s_plus()], M[:, lay.s_minus()])))
    report(3, all(equal), f"s+ and s- columns identical on {sum(equal)}/{len(equal)} instances")


def test_criterion_04_closed_form_values(report):
    worst = 0.0
    n = 0
    for family in (SINGLE, REGRET, PAC):
        for null in (False, True):
            spec = tiny(family, theta=None if null else "auto")
            v, _ = optimal_value_bruteforce(build(spec).pomdp)
            want = (1 + spec.epsilon) / 4 if null else (1 + 2 * spec.epsilon) / 4
            assert closed_form_values(spec)[0] == pytest.approx(want)
            worst = max(worst, abs(v - want))
            n += 1
    report(4, worst <= 1e-12, f"{n} instances, max |V* - closed form| = {worst:.2e}")


def test_criterion_05_suboptimality_bound(report):
    violations, checked = 0, 0
    for family in (SINGLE, REGRET, PAC):
        for null in (False, True):
            spec = tiny(family, theta=None if null else "auto")
            inst = build(spec)
            vstar = closed_form_values(spec)[0]
            stay = staying_event(inst)
            rev = reveal_event(inst) if family == REGRET else None
            for seed in range(100):
                law = enumerate_distribution(inst.pomdp, RandomHistoryPolicy(spec.A, seed, stochastic=seed % 2 == 1))
                gap = vstar - math.fsum(p * t.total_reward for t, p in law.items())
                p_stay = math.fsum(p for t, p in law.items() if stay(t))
                lower = spec.epsilon / 4 * ((1 - p_stay) if null else p_stay)
                if rev is not None:
                    lower += math.fsum(p for t, p in law.items() if rev(t)) / 4
                violations += gap < lower - 1e-12
                checked += 1
    report(5, violations == 0, f"{checked} policy checks, {violations} violations")


def test_criterion_06_b_representation(report):
    worst_res, fails, probes_run = 0.0, 0, 0
    for spec in identity_templates().values():
        p = build(spec).pomdp
        m = revealing_window(spec)
        rep = certify(p, m)
        worst_res = max(worst_res, verify_factorization(build_brep(p, m), p))
        brep = build_brep(p, m, rep.certificates)
        probes = {h: default_probes(brep, p, h, 20) for h in range(1, p.H + 1)}
        st = check_b_stability(brep, rep.alpha_inv, probes)
        fails += not st.passes
        probes_run += len(st.results)
    report(6, worst_res <= 1e-10 and fails == 0, f"max residual {worst_res:.2e}, {probes_run} stability probes, {fails} failures")


def test_criterion_07_ingster_and_inequalities(report):
    spec = identity_templates()["single"]
    mus = list(itertools.product((-1, 1), repeat=spec.K))
    models = [build(spec.with_mu(mu)).pomdp for mu in mus]
    reference = build(spec.with_theta(None)).pomdp
    gaps = [
        ingster_check(models, None, reference, [UniformPolicy(spec.A), optimal_policy(spec)][:T]).gap for T in (1, 2)
    ]
    rng = np.random.default_rng(7)
    bad = 0
    for _ in range(200):
        d = int(rng.integers(2, 9))
        bad += bool(inequality_violations(rng.dirichlet(np.full(d, 0.5)), rng.dirichlet(np.full(d, 0.5))))
    report(7, max(gaps) <= 1e-9 and bad == 0, f"ingster gaps {gaps[0]:.1e} (T=1) {gaps[1]:.1e} (T=2), {bad}/200 inequality violations")


def test_criterion_08_chi2_inner_product(report):
    fails, rows = 0, 0
    for name in ("single", "regret"):
        spec = identity_templates()[name]
        mu = spec.mu_array
        for _, sched in ex.probe_schedules(spec):
            for mu2 in (mu, -mu):
                r = chi2_inner_product_check(spec, mu, mu2, sched)
                fails += not (r.lhs <= r.bound + 1e-9)
                rows += 1
    spec = identity_templates()["regret"]
    r = chi2_inner_product_check(spec, spec.mu_array, spec.mu_array, [optimal_policy(spec)])
    err = abs(r.lhs - (1 + 4 * spec.epsilon**2 / 3))
    ok = fails == 0 and err <= 1e-12 and r.max_correct == 1
    report(8, ok, f"{rows} schedules, {fails} over bound; single correct-event value off by {err:.1e}")


def test_criterion_09_uniformity_tester(report):
    cal = ex.calibrate_tester(20, 0.1, 300, seed=0, c=1.0)
    res = ex.run_experiment(ex.shipped_config("tester-scaling"), jobs=1)
    s = res.summary
    ok = cal.converged and max(cal.at_budget) <= 1 / 3 and res.passed
    report(
        9,
        ok,
        f"2K=20 budget {cal.budget}: false alarm {cal.at_budget[0]:.3f}, miss {cal.at_budget[1]:.3f}; "
        f"slope {s['slope']:.3f} in {s['window']}",
    )


def test_criterion_10_bruteforce_learner(report):
    spec = tiny_pac()
    wins = 0
    for seed in range(50):
        env = EnvironmentHandle.from_instance(build(spec), seed=seed)
        wins += bruteforce_learn(spec.public(), env).theta_hat == spec.theta
    k = ex.run_experiment(ex.shipped_config("pac-scaling"))
    s = ex.run_experiment(ex.shipped_config("sigma-scaling"))
    ok = wins / 50 >= 0.75 and k.passed and s.passed
    report(
        10,
        ok,
        f"success {wins}/50; K slope {k.summary['slope']:.3f} in {k.summary['window']}, "
        f"sigma slope {s.summary['slope']:.3f} in {s.summary['window']}",
    )


def test_criterion_11_omle(report):
    cfg = ex.shipped_config("regret")
    spec = cfg.templates()["single"]
    delta = float(cfg.budget("delta", 0.1))
    models = omle_class_from_family(spec)
    truth = [m.label for m in models].index(str(spec.theta.to_dict()))
    survived = 0
    for seed in range(100):
        env = EnvironmentHandle.from_instance(build(spec), seed=1000 + seed)
        survived += omle(models, env, 10**4, delta=delta, audit_index=truth).extras["true_model_survived"]
    # three binomial standard deviations of sampling slack
    need = 1 - delta - 3 * math.sqrt(delta * (1 - delta) / 100)
    res = ex.run_experiment(cfg)
    fam = res.summary["families"]["single"]
    e_o, e_u = fam["omle"]["exponent"], fam["uniform"]["exponent"]
    ok = survived / 100 >= need and e_o <= 0.8 and e_o < e_u
    report(11, ok, f"survival {survived}/100 (need {need:.2f}); exponent omle {e_o:.3f} vs uniform {e_u:.3f}")


def test_criterion_12_structural_separation(report):
    specs = [
        ex.shipped_config("regret").templates()["multi"],
        identity_templates()["regret"],
        tiny(REGRET),
        tiny(REGRET, theta=None),
    ]
    rows = [ex.structural_rows(s) for s in specs]
    total = sum(r["reveal_episodes"] for r in rows)
    zero = sum(r["zero_reward"] for r in rows)
    report(12, total > 0 and zero == total, f"{zero}/{total} enumerated reveal episodes earn zero reward")
