"""Experiment configs, sharded runners, persistence and scaling-law fits.

A config names one experiment kind, one or more family templates, a parameter
grid, seeds and budgets. Work is sharded by (grid point, seed), dispatched to a
process pool and funneled back in shard order so that record files are
byte-identical across runs with the same config.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .divergence import (
    chi2_inner_product_check,
    conditional_ratio_table,
    divergences,
    hellinger_conditioning_check,
    inequality_violations,
    ingster_check,
)
from .errors import BudgetError, ConfigError, ParameterError, RevPOMDPError
from .instances import (
    FAMILIES,
    PAC,
    REGRET,
    SINGLE,
    WAIT,
    HardInstanceSpec,
    Theta,
    build,
    optimal_policy,
    random_theta,
    reveal_event,
    revealing_window,
)
from .learners import (
    DEFAULT_C_TEST,
    EnvironmentHandle,
    always_explore,
    batch_budget,
    bruteforce_learn,
    bruteforce_plan,
    collision_threshold,
    explore_then_exploit,
    omle,
    omle_class_from_family,
    uniform_baseline,
)
from .pomdp import ActionSequencePolicy, UniformPolicy, enumerate_distribution
from .psr import build_brep, check_b_stability, default_probes, verify_factorization
from .revealing import certify, lift_inverse

KINDS = ("pac-scaling", "sigma-scaling", "regret-compare", "certify-sweep", "identity-suite")
CLI_KINDS = {
    "pac-scaling": "pac-scaling",
    "sigma-scaling": "sigma-scaling",
    "regret": "regret-compare",
    "certify-sweep": "certify-sweep",
    "identities": "identity-suite",
}
SLOPE_WINDOWS = {"pac-scaling": (0.35, 0.65), "sigma-scaling": (-2.5, -1.5)}
IDENTITY_CHECKS = (
    "divergence-inequalities",
    "ingster",
    "chi2-bound",
    "chi2-correct",
    "conditional-ratio",
    "hellinger-conditioning",
    "psr-factorization",
    "b-stability",
)
ALGORITHMS = ("omle", "explore-then-exploit", "always-explore", "uniform")
CERT_TOL = 1e-9


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


# Config


def _expand_axis(name: str, values: Any) -> tuple:
    if isinstance(values, int) and not isinstance(values, bool):
        values = list(range(values))
    if not isinstance(values, (list, tuple)):
        raise ConfigError(f"grid axis {name!r} must be a list or a count")
    if not values:
        raise ConfigError(f"grid axis {name!r} is empty")
    return tuple(values)


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: kind, family templates, grid, seeds, budgets, output root.

    ``family`` is either a single template mapping (it has a ``family`` key) or
    a mapping from names to templates. A template without ``theta`` is the null
    model. Integer grid values are shorthand for ``range(n)``.
    """

    kind: str
    family: Mapping[str, Any]
    grid: Mapping[str, Any]
    seeds: tuple[int, ...]
    budgets: Mapping[str, Any] = field(default_factory=dict)
    output_dir: str = "out"

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if not isinstance(self.grid, Mapping) or not self.grid:
            raise ConfigError("grid is empty")
        grid = {k: _expand_axis(k, v) for k, v in sorted(self.grid.items())}
        object.__setattr__(self, "grid", grid)
        seeds = tuple(self.seeds)
        if not seeds:
            raise ConfigError("seeds are empty")
        if any(not isinstance(s, int) or isinstance(s, bool) for s in seeds):
            raise ConfigError("seeds must be integers")
        if len(set(seeds)) != len(seeds):
            raise ConfigError("seeds must be distinct")
        object.__setattr__(self, "seeds", seeds)
        object.__setattr__(self, "budgets", dict(self.budgets))
        self.templates()
        _validate_kind(self)

    def templates(self) -> dict[str, HardInstanceSpec]:
        fam = self.family
        if not isinstance(fam, Mapping) or not fam:
            raise ConfigError("family template is empty")
        named = {"main": fam} if "family" in fam else dict(fam)
        out = {}
        for name, d in named.items():
            if not isinstance(d, Mapping):
                raise ConfigError(f"template {name!r} must be a mapping")
            if d.get("family") not in FAMILIES:
                raise ConfigError(f"template {name!r} names unknown family {d.get('family')!r}")
            try:
                out[name] = HardInstanceSpec.from_dict(dict(d))
            except (ParameterError, KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"template {name!r} is invalid: {exc}") from exc
        return out

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "family": _jsonable(self.family),
            "grid": {k: list(v) for k, v in self.grid.items()},
            "seeds": list(self.seeds),
            "budgets": _jsonable(self.budgets),
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        allowed = {"kind", "family", "grid", "seeds", "budgets", "output_dir"}
        extra = set(d) - allowed
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        missing = {"kind", "family", "grid", "seeds"} - set(d)
        if missing:
            raise ConfigError(f"missing config keys {sorted(missing)}")
        return cls(
            kind=d["kind"],
            family=d["family"],
            grid=d["grid"],
            seeds=tuple(d["seeds"]),
            budgets=d.get("budgets", {}),
            output_dir=d.get("output_dir", "out"),
        )

    def config_hash(self) -> str:
        """sha256 of the canonical JSON config; the output directory is excluded."""
        body = self.to_dict()
        body.pop("output_dir")
        text = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def budget(self, key: str, default: Any) -> Any:
        return self.budgets.get(key, default)


def _jsonable(x: Any) -> Any:
    if isinstance(x, Mapping):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def _validate_kind(cfg: ExperimentConfig) -> None:
    tmpl = cfg.templates()
    if cfg.kind in SLOPE_WINDOWS:
        axis = "K" if cfg.kind == "pac-scaling" else "sigma"
        if set(cfg.grid) != {axis}:
            raise ConfigError(f"{cfg.kind} needs exactly one grid axis {axis!r}")
        if len(cfg.grid[axis]) < 4:
            raise ConfigError(f"{cfg.kind} needs at least 4 grid points")
        if len(set(cfg.grid[axis])) != len(cfg.grid[axis]):
            raise ConfigError("grid points must be distinct")
        if len(tmpl) != 1:
            raise ConfigError(f"{cfg.kind} takes exactly one family template")
        spec = next(iter(tmpl.values()))
        mode = cfg.budget("mode", "learner")
        if mode not in ("tester", "learner"):
            raise ConfigError("budgets.mode must be 'tester' or 'learner'")
        if mode == "learner":
            if spec.family == SINGLE or spec.is_null:
                raise ConfigError("learner calibration needs a non-null multi-step template")
            for v in cfg.grid[axis]:
                try:
                    _scaled_template(spec, axis, v)
                except ParameterError as exc:
                    raise ConfigError(f"grid value {axis}={v} is invalid: {exc}") from exc
        if cfg.kind == "sigma-scaling" and mode == "tester":
            raise ConfigError("sigma-scaling calibrates the learner")
    elif cfg.kind == "regret-compare":
        if set(cfg.grid) != {"T"}:
            raise ConfigError("regret-compare needs exactly one grid axis 'T'")
        if any(not isinstance(t, int) or t < 1 for t in cfg.grid["T"]):
            raise ConfigError("T values must be positive integers")
        algs = cfg.budget("algorithms", list(ALGORITHMS))
        bad = set(algs) - set(ALGORITHMS)
        if bad:
            raise ConfigError(f"unknown algorithms {sorted(bad)}")
    elif cfg.kind == "certify-sweep":
        if set(cfg.grid) != {"draw"}:
            raise ConfigError("certify-sweep needs exactly one grid axis 'draw'")
    elif cfg.kind == "identity-suite":
        if set(cfg.grid) != {"check"}:
            raise ConfigError("identity-suite needs exactly one grid axis 'check'")
        bad = set(cfg.grid["check"]) - set(IDENTITY_CHECKS)
        if bad:
            raise ConfigError(f"unknown identity checks {sorted(bad)}")


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path}: top level must be an object")
    return ExperimentConfig.from_dict(data)


def shipped_config_dir() -> Path:
    return Path(__file__).resolve().parent / "configs"


def shipped_config(name: str) -> ExperimentConfig:
    path = shipped_config_dir() / f"{name}.json"
    if not path.exists():
        raise ConfigError(f"no shipped config named {name!r}")
    return load_config(path)


# Calibration


def _trial_draws(domain_size: int, far_tv: float, trials: int, n_max: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Sample matrices under the uniform law and a perturbed law at TV ``far_tv``.

    Every budget reads a prefix of the same rows, so error rates are common
    random numbers across the search.
    """
    if domain_size % 2:
        raise ParameterError("domain size must be even")
    rng = np.random.default_rng(seed)
    dtype = np.uint8 if domain_size <= 256 else np.int32
    xu = rng.integers(domain_size, size=(trials, n_max)).astype(dtype)
    p = np.tile([(1 + 2 * far_tv) / domain_size, (1 - 2 * far_tv) / domain_size], domain_size // 2)
    cdf = np.cumsum(p)
    xf = np.minimum(np.searchsorted(cdf, rng.random((trials, n_max)) * cdf[-1], side="right"), domain_size - 1)
    return xu, xf.astype(dtype)


def _row_statistics(x: np.ndarray, domain_size: int, n: int) -> np.ndarray:
    T = x.shape[0]
    flat = (x[:, :n].astype(np.int64) + np.arange(T)[:, None] * domain_size).ravel()
    c = np.bincount(flat, minlength=T * domain_size).reshape(T, domain_size).astype(float)
    return (c * (c - 1)).sum(axis=1) / (n * (n - 1))


def tester_error_rates(xu: np.ndarray, xf: np.ndarray, domain_size: int, far_tv: float, n: int) -> tuple[float, float]:
    """(false alarm, miss) rates of the single-batch collision test on prefixes of length ``n``."""
    thr = collision_threshold(domain_size, far_tv)
    return (
        float(np.mean(_row_statistics(xu, domain_size, n) > thr)),
        float(np.mean(_row_statistics(xf, domain_size, n) <= thr)),
    )


@dataclass(frozen=True)
class Calibration:
    budget: int | None
    analytic: int
    converged: bool
    evaluations: int
    at_budget: tuple[float, ...]


def _bracket_search(
    ok: Callable[[int], tuple[bool, tuple[float, ...]]], analytic: int, precision: float, floor: int = 2
) -> Calibration:
    """Smallest budget in ``[analytic/8, 8 analytic]`` with ``ok``.

    Doubles upward from the bottom of the bracket, then bisects geometrically,
    so most evaluations happen near the answer rather than at the top.
    """
    bottom, top = max(floor, analytic // 8), 8 * analytic
    good, stats = ok(bottom)
    evals = 1
    if good:
        return Calibration(bottom, analytic, False, evals, stats)
    lo = bottom
    while True:
        hi = min(2 * lo, top)
        good, best = ok(hi)
        evals += 1
        if good:
            break
        if hi == top:
            return Calibration(None, analytic, False, evals, best)
        lo = hi
    while hi / lo > precision:
        mid = int(round(math.sqrt(lo * hi)))
        if mid in (lo, hi):
            break
        good, s = ok(mid)
        evals += 1
        if good:
            hi, best = mid, s
        else:
            lo = mid
    return Calibration(hi, analytic, True, evals, best)


def calibrate_tester(
    domain_size: int,
    far_tv: float = 0.1,
    trials: int = 300,
    seed: int = 0,
    c: float = DEFAULT_C_TEST,
    level: float = 1 / 3,
    precision: float = 1.02,
) -> Calibration:
    """Minimal single-batch budget with both error rates at most ``level``."""
    analytic = batch_budget(domain_size, far_tv, c)
    xu, xf = _trial_draws(domain_size, far_tv, trials, 8 * analytic, seed)

    def ok(n: int):
        rates = tester_error_rates(xu, xf, domain_size, far_tv, n)
        return max(rates) <= level, rates

    return _bracket_search(ok, analytic, precision)


def _scaled_template(spec: HardInstanceSpec, axis: str, value: Any) -> HardInstanceSpec:
    d = spec.to_dict()
    d[axis] = value
    d["mu"] = None
    return HardInstanceSpec.from_dict(d)


def learner_success_rate(
    template: HardInstanceSpec, cell_budget: int, trials: int, seed: int, confidence: float = 0.25
) -> float:
    """Fraction of trials where brute force recovers ``theta``; ``mu`` is redrawn per trial."""
    pub = template.public()
    shape = (template.L, template.K) if template.family == PAC else (template.K,)
    wins = 0
    for i in range(trials):
        mu = np.random.default_rng([seed, i]).choice([-1, 1], size=shape)
        spec = template.with_mu(mu)
        env = EnvironmentHandle.from_instance(build(spec), seed=seed * 100_000 + i, per_call_streams=True)
        rep = bruteforce_learn(pub, env, confidence, cell_budget=cell_budget)
        wins += rep.theta_hat == spec.theta
    return wins / trials


def calibrate_learner(
    template: HardInstanceSpec,
    trials: int = 50,
    seed: int = 0,
    confidence: float = 0.25,
    target: float = 0.75,
    precision: float = 1.03,
) -> Calibration:
    """Minimal stage-1 per-cell budget with success rate at least ``target``."""
    analytic = bruteforce_plan(template.public(), confidence).cell_budget

    def ok(n: int):
        rate = learner_success_rate(template, n, trials, seed, confidence)
        return rate >= target, (rate,)

    return _bracket_search(ok, analytic, precision)


def fit_loglog(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """(slope, standard error) of least squares ``log y ~ log x``; se is nan with two points."""
    lx, ly = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
    if lx.size < 2 or np.ptp(lx) == 0:
        raise ValueError("need at least two distinct x values")
    slope, icpt = np.polyfit(lx, ly, 1)
    dof = lx.size - 2
    if dof <= 0:
        return float(slope), float("nan")
    resid = ly - (slope * lx + icpt)
    se = math.sqrt(float(resid @ resid) / dof / float(((lx - lx.mean()) ** 2).sum()))
    return float(slope), se


# Shards


def _shards(cfg: ExperimentConfig) -> list[dict]:
    if cfg.kind == "regret-compare":
        algs = cfg.budget("algorithms", list(ALGORITHMS))
        out = []
        for name, spec in cfg.templates().items():
            for alg in algs:
                if alg in ("explore-then-exploit", "always-explore") and spec.family == SINGLE:
                    continue
                out.extend({"template": name, "algorithm": alg, "seed": s} for s in cfg.seeds)
            if spec.family == REGRET:
                out.append({"template": name, "algorithm": "structural", "seed": cfg.seeds[0]})
        return out
    axes = list(cfg.grid)
    points = [dict(zip(axes, vals)) for vals in itertools.product(*(cfg.grid[a] for a in axes))]
    return [{**p, "seed": s} for p in points for s in cfg.seeds]


def _run_scaling(cfg: ExperimentConfig, shard: dict) -> list[dict]:
    axis = "K" if cfg.kind == "pac-scaling" else "sigma"
    spec = next(iter(cfg.templates().values()))
    seed = shard["seed"]
    value = shard[axis]
    if cfg.budget("mode", "learner") == "tester":
        far = float(cfg.budget("far_tv", 0.1))
        c = float(cfg.budget("c", DEFAULT_C_TEST))
        cal = calibrate_tester(2 * int(value), far, int(cfg.budget("trials", 300)), seed, c)
        extra = {"false_alarm": cal.at_budget[0], "miss": cal.at_budget[1]}
    else:
        tmpl = _scaled_template(spec, axis, value)
        cal = calibrate_learner(tmpl, int(cfg.budget("trials", 50)), seed, float(cfg.budget("confidence", 0.25)))
        extra = {"success": cal.at_budget[0]}
    return [
        {
            axis: value,
            "seed": seed,
            "budget": cal.budget,
            "analytic": cal.analytic,
            "converged": cal.converged,
            "evaluations": cal.evaluations,
            **extra,
        }
    ]


def structural_rows(spec: HardInstanceSpec, cap: int = 10**6) -> dict:
    """Exhaustive reveal/zero-reward check under the uniform policy."""
    inst = build(spec)
    ev = reveal_event(inst)
    dist = enumerate_distribution(inst.pomdp, UniformPolicy(spec.A), cap)
    hits = [tr for tr in dist if ev(tr)]
    zero = sum(1 for tr in hits if sum(tr.rewards) == 0)
    return {
        "trajectories": len(dist),
        "reveal_episodes": len(hits),
        "zero_reward": zero,
        "fraction": zero / len(hits) if hits else float("nan"),
    }


def _run_regret(cfg: ExperimentConfig, shard: dict) -> list[dict]:
    spec = cfg.templates()[shard["template"]]
    alg, seed = shard["algorithm"], shard["seed"]
    Ts = sorted(cfg.grid["T"])
    base = {"template": shard["template"], "family": spec.family, "algorithm": alg, "seed": seed}
    if alg == "structural":
        return [{**base, "row": "structural", **structural_rows(spec)}]
    T_max = Ts[-1]
    inst = build(spec)
    pub = spec.public()
    rows = []
    if alg == "explore-then-exploit":
        split = float(cfg.budget("split", 0.5))
        for T in Ts:
            env = EnvironmentHandle.from_instance(inst, seed=seed)
            rep = explore_then_exploit(pub, env, T, split)
            rows.append({**base, "row": "regret", "T": T, "cum_regret": rep.cumulative_regret(T)})
        return rows
    env = EnvironmentHandle.from_instance(inst, seed=seed)
    survived = None
    if alg == "omle":
        models = omle_class_from_family(spec, cap=int(cfg.budget("class_cap", 10**4)))
        truth = next(i for i, m in enumerate(models) if m.label == _label(spec))
        rep = omle(models, env, T_max, delta=float(cfg.budget("delta", 0.1)), audit_index=truth)
        survived = rep.extras["true_model_survived"]
    elif alg == "always-explore":
        rep = always_explore(pub, env, T_max)
    else:
        rep = uniform_baseline(env, T_max)
    curve = rep.cumulative_curve(Ts)
    for T, v in zip(Ts, curve):
        rows.append({**base, "row": "regret", "T": T, "cum_regret": float(v)})
    if survived is not None:
        rows.append({**base, "row": "survival", "T": T_max, "survived": survived})
    return rows


def _label(spec: HardInstanceSpec) -> str:
    return "null" if spec.theta is None else str(spec.theta.to_dict())


def random_parameterization(template: HardInstanceSpec, rng: np.random.Generator, null_rate: float = 0.2):
    """Random ``(epsilon, sigma, theta, mu)`` for an unchecked template; theta is null with ``null_rate``."""
    pub = template.public()
    d = template.to_dict()
    d["epsilon"] = float(rng.uniform(0.01, 0.5))
    d["sigma"] = float(rng.uniform(0.05, 1.0))
    d["unchecked"] = True
    shape = (template.L, template.K) if template.family == PAC else (template.K,)
    d["mu"] = rng.choice([-1, 1], size=shape).tolist()
    d["theta"] = None if rng.random() < null_rate else random_theta(pub, rng).to_dict()
    return HardInstanceSpec.from_dict(d)


def certificate_rows(spec: HardInstanceSpec, lift: bool = True) -> list[dict]:
    """Certificate row at the family window, plus the lifted window when it fits."""
    inst = build(spec)
    m = revealing_window(spec)
    rep = certify(inst.pomdp, m)
    bound = 1.0 if spec.is_null else 1 + 2 / spec.sigma
    residual = max(c.residual for c in rep.certificates)
    base = {
        "family": spec.family,
        "epsilon": spec.epsilon,
        "sigma": spec.sigma,
        "theta": json.dumps(None if spec.theta is None else spec.theta.to_dict(), sort_keys=True),
        "mu": json.dumps(np.asarray(spec.mu).tolist()),
    }
    rows = [
        {
            **base,
            "window": m,
            "lifted": False,
            "alpha_inv": rep.alpha_inv,
            "bound": bound,
            "residual": residual,
            "pass": bool(rep.valid and rep.alpha_inv <= bound + CERT_TOL),
        }
    ]
    if lift and spec.H - m >= 1:
        norms, ok, res = [], True, 0.0
        for cert in rep.certificates:
            if cert.h > spec.H - m:
                continue
            lifted = lift_inverse(cert, inst.pomdp, cert.h, WAIT)
            norms.append(lifted.norm)
            res = max(res, lifted.residual)
            ok &= lifted.valid and lifted.norm <= cert.norm + CERT_TOL
        if norms:
            rows.append(
                {
                    **base,
                    "window": m + 1,
                    "lifted": True,
                    "alpha_inv": max(norms),
                    "bound": rep.alpha_inv,
                    "residual": res,
                    "pass": bool(ok),
                }
            )
    return rows


def _run_certify(cfg: ExperimentConfig, shard: dict) -> list[dict]:
    rows = []
    null_rate = float(cfg.budget("null_rate", 0.2))
    for name, tmpl in cfg.templates().items():
        rng = np.random.default_rng([shard["seed"], shard["draw"], FAMILIES.index(tmpl.family)])
        spec = random_parameterization(tmpl, rng, null_rate)
        for row in certificate_rows(spec, bool(cfg.budget("lift", True))):
            rows.append({"template": name, "draw": shard["draw"], "seed": shard["seed"], **row})
    return rows


# Identity checks


def _template_of(cfg: ExperimentConfig, family: str) -> HardInstanceSpec | None:
    for spec in cfg.templates().values():
        if spec.family == family:
            return spec
    return None


def _row(check: str, detail: str, value: float, bound: float, ok: bool) -> dict:
    return {"check": check, "detail": detail, "value": float(value), "bound": float(bound), "pass": bool(ok)}


def _check_inequalities(cfg, seed):
    rng = np.random.default_rng([seed, 1])
    n_pairs = int(cfg.budget("pairs", 200))
    bad = 0
    for _ in range(n_pairs):
        d = int(rng.integers(2, 9))
        p = rng.dirichlet(np.full(d, 0.5))
        q = rng.dirichlet(np.full(d, 0.5))
        if rng.random() < 0.25:
            p[rng.integers(d)] = 0.0
            p /= p.sum()
        bad += bool(inequality_violations(p, q))
    return [_row("divergence-inequalities", f"{n_pairs} random pairs", bad, 0, bad == 0)]


def _check_ingster(cfg, seed):
    spec = _template_of(cfg, SINGLE)
    if spec is None or spec.is_null:
        raise ConfigError("ingster needs a non-null single-step template")
    K = spec.K
    mus = [tuple(int(x) for x in m) for m in itertools.product((-1, 1), repeat=K)]
    models = [build(spec.with_mu(mu)).pomdp for mu in mus]
    reference = build(spec.with_theta(None)).pomdp
    sched = [UniformPolicy(spec.A), optimal_policy(spec)][: int(cfg.budget("T", 2))]
    res = ingster_check(models, None, reference, sched)
    return [_row("ingster", f"T={len(sched)} tuples={res.n_tuples}", res.gap, 1e-9, res.gap <= 1e-9)]


def probe_schedules(spec: HardInstanceSpec) -> list[tuple[str, list]]:
    H, A = spec.H, spec.A
    wait = ActionSequencePolicy((WAIT,) * H, A)
    out = [("optimal", [optimal_policy(spec)]), ("optimal+wait", [optimal_policy(spec), wait])]
    if spec.family == SINGLE:
        th = spec.theta
        probe = (WAIT,) * (th.h_star - 1) + (th.a_star,) + (WAIT,) * (H - th.h_star)
        out.append(("probe+wait", [ActionSequencePolicy(probe, A), wait]))
    else:
        lay = spec.layout
        rev = lay.a_rev_set[0]
        for l in lay.hset:
            acts = list(optimal_policy(spec).actions)
            acts[l - 1] = rev
            out.append((f"reveal@{l}", [ActionSequencePolicy(tuple(acts), A)]))
    out.append(("uniform", [UniformPolicy(A)]))
    return out


def _check_chi2_bound(cfg, seed):
    rows = []
    for fam in (SINGLE, REGRET):
        spec = _template_of(cfg, fam)
        if spec is None or spec.is_null:
            continue
        mu = spec.mu_array
        for name, sched in probe_schedules(spec):
            for label, mu2 in (("same", mu), ("flipped", -mu)):
                r = chi2_inner_product_check(spec, mu, mu2, sched)
                rows.append(_row("chi2-bound", f"{fam} {name} {label}", r.lhs, r.bound, r.lhs <= r.bound + 1e-9))
    if not rows:
        raise ConfigError("chi2-bound needs a non-null single-step or regret template")
    return rows


def _check_chi2_correct(cfg, seed):
    spec = _template_of(cfg, REGRET)
    if spec is None or spec.is_null:
        raise ConfigError("chi2-correct needs a non-null regret template")
    mu = spec.mu_array
    r = chi2_inner_product_check(spec, mu, mu, [optimal_policy(spec)])
    exact = 1 + 4 * spec.epsilon**2 / 3
    err = abs(r.lhs - exact)
    return [_row("chi2-correct", f"exact {exact!r}", err, 1e-12, err <= 1e-12 and r.max_correct == 1)]


def _check_ratio(cfg, seed):
    spec = _template_of(cfg, REGRET)
    if spec is None or spec.is_null:
        raise ConfigError("conditional-ratio needs a non-null regret template")
    mu = spec.mu_array
    rows = []
    for label, mu2 in (("same", mu), ("flipped", -mu)):
        recs = conditional_ratio_table(spec, mu, mu2)
        err = max(abs(r.value - r.expected) for r in recs)
        rows.append(_row("conditional-ratio", f"{label} records={len(recs)}", err, 1e-12, err <= 1e-12))
    return rows


def _check_hellinger(cfg, seed):
    rng = np.random.default_rng([seed, 2])
    rows = []
    worst = -math.inf
    for _ in range(int(cfg.budget("pairs", 200))):
        nx, ny = int(rng.integers(1, 5)), int(rng.integers(2, 5))
        P = rng.dirichlet(np.full(nx * ny, 0.7)).reshape(nx, ny)
        Q = rng.dirichlet(np.full(nx * ny, 0.7)).reshape(nx, ny)
        r = hellinger_conditioning_check(P, Q)
        worst = max(worst, r.lhs - r.rhs)
    rows.append(_row("hellinger-conditioning", "random joints max(lhs-rhs)", worst, 1e-10, worst <= 1e-10))
    d, e = 1e-4, 1e-12
    P = np.array([[0.0, d], [(1 - d) / 2, (1 - d) / 2]])
    Q = np.array([[e, 0.0], [(1 - e) / 2, (1 - e) / 2]])
    r = hellinger_conditioning_check(P, Q)
    rel = (r.rhs - r.lhs) / r.lhs
    rows.append(_row("hellinger-conditioning", "near-equality relative gap", rel, 1e-3, 0 <= rel <= 1e-3 and r.ok))
    return rows


def _psr_specs(cfg) -> list[tuple[str, HardInstanceSpec]]:
    return list(cfg.templates().items())


def _check_factorization(cfg, seed):
    rows = []
    corrupt = bool(cfg.budget("corrupt", False))
    for name, spec in _psr_specs(cfg):
        inst = build(spec)
        m = revealing_window(spec)
        brep = build_brep(inst.pomdp, m)
        if corrupt:
            brep = brep.corrupted(1, 0, 0, 0.1)
        err = verify_factorization(brep, inst.pomdp)
        detail = f"{name} m={m}" + (" corrupted" if corrupt else "")
        rows.append(_row("psr-factorization", detail, err, 1e-10, err <= 1e-10))
    return rows


def _check_stability(cfg, seed):
    rows = []
    for name, spec in _psr_specs(cfg):
        inst = build(spec)
        m = revealing_window(spec)
        rep = certify(inst.pomdp, m)
        brep = build_brep(inst.pomdp, m, rep.certificates)
        if cfg.budget("corrupt", False):
            brep = brep.corrupted(1, 0, 0, 0.1)
        probes = {
            h: default_probes(brep, inst.pomdp, h, int(cfg.budget("random_probes", 20)), seed)
            for h in range(1, inst.pomdp.H + 1)
        }
        st = check_b_stability(brep, rep.alpha_inv, probes, strong=False)
        worst = min(p.margin for p in st.results)
        rows.append(_row("b-stability", f"{name} lambda={rep.alpha_inv!r}", -worst, 1e-9, st.passes))
    return rows


_CHECKS: dict[str, Callable[[ExperimentConfig, int], list[dict]]] = {
    "divergence-inequalities": _check_inequalities,
    "ingster": _check_ingster,
    "chi2-bound": _check_chi2_bound,
    "chi2-correct": _check_chi2_correct,
    "conditional-ratio": _check_ratio,
    "hellinger-conditioning": _check_hellinger,
    "psr-factorization": _check_factorization,
    "b-stability": _check_stability,
}


def _run_identity(cfg: ExperimentConfig, shard: dict) -> list[dict]:
    rows = _CHECKS[shard["check"]](cfg, shard["seed"])
    return [{"seed": shard["seed"], **r} for r in rows]


_RUNNERS = {
    "pac-scaling": _run_scaling,
    "sigma-scaling": _run_scaling,
    "regret-compare": _run_regret,
    "certify-sweep": _run_certify,
    "identity-suite": _run_identity,
}


def _worker(cfg_dict: dict, shard: dict) -> list[dict]:
    cfg = ExperimentConfig.from_dict(cfg_dict)
    return _RUNNERS[cfg.kind](cfg, shard)


# Summaries


def _summarize_scaling(cfg: ExperimentConfig, records: list[dict]) -> tuple[dict, bool]:
    axis = "K" if cfg.kind == "pac-scaling" else "sigma"
    lo, hi = cfg.budget("slope_window", SLOPE_WINDOWS[cfg.kind])
    if cfg.budget("mode", "learner") == "tester":
        lo, hi = cfg.budget("slope_window", SLOPE_WINDOWS["pac-scaling"])
    good = [r for r in records if r["converged"]]
    flagged = [{axis: r[axis], "seed": r["seed"]} for r in records if not r["converged"]]
    per_point = {}
    for v in cfg.grid[axis]:
        b = [r["budget"] for r in good if r[axis] == v]
        per_point[str(v)] = float(np.exp(np.mean(np.log(b)))) if b else None
    summary: dict[str, Any] = {"axis": axis, "geo_mean_budget": per_point, "non_converged": flagged}
    xs = [r[axis] for r in good]
    if len(set(xs)) < 2:
        summary.update(slope=None, slope_se=None, slope_ci=None, window=[lo, hi], in_window=False)
        return summary, False
    slope, se = fit_loglog(xs, [r["budget"] for r in good])
    ci = None if math.isnan(se) else [slope - 1.96 * se, slope + 1.96 * se]
    ok = lo <= slope <= hi
    summary.update(slope=slope, slope_se=None if math.isnan(se) else se, slope_ci=ci, window=[lo, hi], in_window=ok)
    return summary, ok and not flagged


def _summarize_regret(cfg: ExperimentConfig, records: list[dict]) -> tuple[dict, bool]:
    max_exp = float(cfg.budget("max_exponent", 0.8))
    Ts = sorted(cfg.grid["T"])
    tmpl = cfg.templates()
    curves: dict[str, dict[str, Any]] = {}
    ok = True
    for name, spec in tmpl.items():
        fam: dict[str, Any] = {"family": spec.family}
        for alg in ALGORITHMS:
            rs = [r for r in records if r["template"] == name and r["algorithm"] == alg and r["row"] == "regret"]
            if not rs:
                continue
            mean = [float(np.mean([r["cum_regret"] for r in rs if r["T"] == T])) for T in Ts]
            pos = [(T, v) for T, v in zip(Ts, mean) if v > 0]
            exp = fit_loglog(*zip(*pos))[0] if len({T for T, _ in pos}) >= 2 else None
            fam[alg] = {"T": Ts, "mean_cum_regret": mean, "exponent": exp}
        surv = [r["survived"] for r in records if r["template"] == name and r["row"] == "survival"]
        if surv:
            fam["omle_survival_rate"] = sum(surv) / len(surv)
        st = [r for r in records if r["template"] == name and r["row"] == "structural"]
        if st:
            fam["structural_fraction"] = st[0]["fraction"]
            ok &= st[0]["fraction"] == 1.0
        if spec.family == SINGLE and "omle" in fam and "uniform" in fam:
            e_o, e_u = fam["omle"]["exponent"], fam["uniform"]["exponent"]
            fam["omle_exponent_ok"] = e_o is not None and e_u is not None and e_o <= max_exp and e_o < e_u
            ok &= fam["omle_exponent_ok"]
        if "uniform" in fam and fam["uniform"]["exponent"] is not None:
            fam["uniform_linear"] = fam["uniform"]["exponent"] >= 0.95
            ok &= fam["uniform_linear"]
        if "explore-then-exploit" in fam and "always-explore" in fam:
            fam["ete_below_always_explore"] = (
                fam["explore-then-exploit"]["mean_cum_regret"][-1] < fam["always-explore"]["mean_cum_regret"][-1]
            )
        curves[name] = fam
    return {"families": curves, "max_exponent": max_exp}, bool(ok)


def _summarize_rows(cfg: ExperimentConfig, records: list[dict]) -> tuple[dict, bool]:
    fails = [r for r in records if not r["pass"]]
    summary = {"rows": len(records), "failures": len(fails)}
    if cfg.kind == "certify-sweep":
        summary["max_ratio_to_bound"] = max(
            (r["alpha_inv"] / r["bound"] for r in records if not r["lifted"] and r["bound"] > 0), default=None
        )
    else:
        by = {}
        for r in records:
            by.setdefault(r["check"], True)
            by[r["check"]] &= r["pass"]
        summary["checks"] = by
    return summary, not fails


_SUMMARIES = {
    "pac-scaling": _summarize_scaling,
    "sigma-scaling": _summarize_scaling,
    "regret-compare": _summarize_regret,
    "certify-sweep": _summarize_rows,
    "identity-suite": _summarize_rows,
}


# Orchestration


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list[dict]
    summary: dict
    passed: bool
    wall_clock: float
    errors: list[str] = field(default_factory=list)


def default_jobs() -> int:
    return os.cpu_count() or 1


def run_experiment(cfg: ExperimentConfig, jobs: int | None = None) -> ExperimentResult:
    """Run every shard and summarize; shards that raise become failing error records."""
    jobs = default_jobs() if jobs is None else jobs
    if jobs < 1:
        raise ConfigError("jobs must be >= 1")
    shards = _shards(cfg)
    body = cfg.to_dict()
    t0 = time.perf_counter()
    results: list[list[dict] | str] = []
    if jobs == 1 or len(shards) == 1:
        for sh in shards:
            results.append(_safe(body, sh))
    else:
        with ProcessPoolExecutor(max_workers=min(jobs, len(shards))) as pool:
            results = list(pool.map(_safe, [body] * len(shards), shards))
    records: list[dict] = []
    errors: list[str] = []
    for sh, res in zip(shards, results):
        if isinstance(res, str):
            errors.append(f"{sh}: {res}")
        else:
            records.extend(res)
    summary, ok = _SUMMARIES[cfg.kind](cfg, records) if records else ({}, False)
    if errors:
        summary["errors"] = errors
    return ExperimentResult(cfg, records, summary, ok and not errors, time.perf_counter() - t0, errors)


def _safe(body: dict, shard: dict) -> list[dict] | str:
    try:
        return _worker(body, shard)
    except (RevPOMDPError, BudgetError) as exc:
        return f"{type(exc).__name__}: {exc}"


# Persistence


def _cell(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def records_csv(records: Sequence[Mapping[str, Any]]) -> str:
    """CSV text with columns in first-seen order and ``repr`` floats."""
    cols: list[str] = []
    for r in records:
        for k in r:
            if k not in cols:
                cols.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in records:
        w.writerow([_cell(r.get(c)) for c in cols])
    return buf.getvalue()


def _dump(obj: Any) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2, allow_nan=True) + "\n"


def persist(result: ExperimentResult, out_root: str | os.PathLike | None = None) -> Path:
    """Write a new run directory and append it to the index; earlier runs are never touched.

    Layout: ``<root>/<kind>-<hash>/run-NNNN/{manifest.json, records.csv,
    summary.json, timing.json}`` plus ``<root>/index.jsonl``. Only
    ``timing.json`` and the index carry wall-clock data.
    """
    cfg = result.config
    root = Path(out_root if out_root is not None else cfg.output_dir)
    h = cfg.config_hash()
    base = root / f"{cfg.kind}-{h}"
    base.mkdir(parents=True, exist_ok=True)
    n = 0
    while True:
        run = base / f"run-{n:04d}"
        try:
            run.mkdir()
            break
        except FileExistsError:
            n += 1
    (run / "records.csv").write_text(records_csv(result.records))
    (run / "summary.json").write_text(_dump({"passed": result.passed, **result.summary}))
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": h,
        "code_version": code_version(),
        "files": ["records.csv", "summary.json", "timing.json"],
    }
    (run / "manifest.json").write_text(_dump(manifest))
    (run / "timing.json").write_text(
        _dump({"wall_clock_s": result.wall_clock, "finished_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())})
    )
    entry = {
        "config_hash": h,
        "kind": cfg.kind,
        "run": str(run.relative_to(root)),
        "code_version": code_version(),
        "passed": result.passed,
    }
    with open(root / "index.jsonl", "a") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return run
