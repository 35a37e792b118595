import json
import math

import numpy as np
import pytest

from revpomdp import experiments as ex
from revpomdp.errors import ConfigError
from revpomdp.experiments import (
    KINDS,
    ExperimentConfig,
    calibrate_tester,
    certificate_rows,
    fit_loglog,
    load_config,
    persist,
    records_csv,
    run_experiment,
    shipped_config,
    shipped_config_dir,
    structural_rows,
)
from revpomdp.instances import REGRET, HardInstanceSpec, Theta

SHIPPED = sorted(p.stem for p in shipped_config_dir().glob("*.json"))

TINY_REGRET = {
    "family": REGRET, "epsilon": 0.1, "sigma": 0.5, "n": 1, "K": 2, "H": 5, "A": 2,
    "mu": [1, -1], "unchecked": True,
    "theta": {"h_star": 3, "s_star": 0, "a_star": 1, "password": [1], "a_rev": 0},
}


def scaling_cfg(**budgets):
    d = shipped_config("tester-scaling").to_dict()
    d["budgets"] = {**d["budgets"], **budgets}
    return ExperimentConfig.from_dict(d)


# configs


@pytest.mark.parametrize("name", SHIPPED)
def test_shipped_configs_load(name):
    cfg = shipped_config(name)
    assert cfg.kind in KINDS
    assert ExperimentConfig.from_dict(cfg.to_dict()).config_hash() == cfg.config_hash()


@pytest.mark.parametrize(
    "patch",
    [
        {"kind": "nope"},
        {"grid": {}},
        {"grid": {"check": []}},
        {"grid": {"check": ["nope"]}},
        {"grid": {"draw": 3}},
        {"seeds": []},
        {"seeds": [0, 0]},
        {"seeds": [0.5]},
        {"family": {}},
        {"family": {"x": {"family": "nope"}}},
        {"extra": 1},
    ],
)
def test_config_errors(patch):
    d = shipped_config("identities").to_dict()
    d.update(patch)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(d)


@pytest.mark.parametrize(
    "patch",
    [
        {"grid": {"K": [4, 8, 16]}},
        {"grid": {"K": [4, 4, 8, 16]}},
        {"grid": {"sigma": [0.1, 0.2, 0.4, 0.8]}},
        {"budgets": {"mode": "magic"}},
        {"grid": {"K": [4, 8, 16, 0]}},
    ],
)
def test_scaling_config_errors(patch):
    d = shipped_config("pac-scaling").to_dict()
    d.update(patch)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(d)


def test_missing_keys_and_bad_files(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"kind": "identity-suite"})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)
    bad.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        shipped_config("nope")


def test_config_hash_is_deterministic():
    a = shipped_config("identities")
    d = a.to_dict()
    d["output_dir"] = "elsewhere"
    b = ExperimentConfig.from_dict(d)
    assert a.config_hash() == b.config_hash()
    assert len(a.config_hash()) == 16
    d["seeds"] = [1]
    assert ExperimentConfig.from_dict(d).config_hash() != a.config_hash()


def test_integer_grid_is_a_range():
    cfg = shipped_config("certify-sweep")
    assert cfg.grid["draw"] == tuple(range(50))


# fits and calibration


def test_fit_loglog_exact_power_law():
    x = np.array([1.0, 2.0, 4.0, 8.0])
    slope, se = fit_loglog(x, 3 * x**0.5)
    assert slope == pytest.approx(0.5) and se == pytest.approx(0.0, abs=1e-12)
    slope, se = fit_loglog([1, 2], [1, 4])
    assert slope == pytest.approx(2.0) and math.isnan(se)
    with pytest.raises(ValueError):
        fit_loglog([2, 2], [1, 3])


def test_calibrated_tester_meets_error_level():
    cal = calibrate_tester(20, 0.1, 300, seed=0, c=1.0)
    assert cal.converged
    assert max(cal.at_budget) <= 1 / 3
    # the reported rates are those of the calibrated budget on the same draws
    xu, xf = ex._trial_draws(20, 0.1, 300, 8 * cal.analytic, 0)
    assert ex.tester_error_rates(xu, xf, 20, 0.1, cal.budget) == cal.at_budget


def test_calibration_flags_a_loose_bracket():
    # with a generous analytic constant the bracket bottom already passes
    cal = calibrate_tester(8, 0.1, 300, seed=0, c=8.0)
    assert not cal.converged


def test_doubling_trials_shrinks_slope_ci():
    a = run_experiment(scaling_cfg(trials=300), jobs=1)
    b = run_experiment(scaling_cfg(trials=600), jobs=1)
    assert a.passed and b.passed
    wa = a.summary["slope_ci"][1] - a.summary["slope_ci"][0]
    wb = b.summary["slope_ci"][1] - b.summary["slope_ci"][0]
    assert wb < wa


# persistence


def small_certify_cfg(tmp_path):
    d = shipped_config("certify-sweep").to_dict()
    d["grid"] = {"draw": 3}
    d["output_dir"] = str(tmp_path)
    return ExperimentConfig.from_dict(d)


def test_records_are_byte_identical(tmp_path):
    cfg = small_certify_cfg(tmp_path)
    r1, r2 = run_experiment(cfg, jobs=1), run_experiment(cfg, jobs=2)
    assert records_csv(r1.records) == records_csv(r2.records)
    p1, p2 = persist(r1), persist(r2)
    for name in ("records.csv", "summary.json", "manifest.json"):
        assert (p1 / name).read_bytes() == (p2 / name).read_bytes()


def test_persist_is_append_only(tmp_path):
    cfg = small_certify_cfg(tmp_path)
    res = run_experiment(cfg, jobs=1)
    first = persist(res)
    before = {p.name: p.read_bytes() for p in first.iterdir()}
    second = persist(res)
    assert first.name == "run-0000" and second.name == "run-0001"
    assert {p.name: p.read_bytes() for p in first.iterdir()} == before
    index = [json.loads(line) for line in (tmp_path / "index.jsonl").read_text().splitlines()]
    assert [e["run"].split("/")[-1] for e in index] == ["run-0000", "run-0001"]
    assert all(e["config_hash"] == cfg.config_hash() for e in index)
    manifest = json.loads((first / "manifest.json").read_text())
    assert manifest["config"] == cfg.to_dict() and "wall_clock_s" not in manifest
    assert "wall_clock_s" in json.loads((first / "timing.json").read_text())


def test_records_csv_cells():
    text = records_csv([{"a": 0.1, "b": True}, {"a": None, "c": 3}])
    assert text.splitlines() == ["a,b,c", "0.1,true,", ",,3"]


# experiment kinds


def test_shipped_identity_suites():
    good = run_experiment(shipped_config("identities"), jobs=1)
    assert good.passed and all(good.summary["checks"].values())
    bad = run_experiment(shipped_config("identities-corrupted"), jobs=1)
    assert not bad.passed
    assert bad.summary["checks"]["psr-factorization"] is False


def test_failing_shard_becomes_error():
    d = shipped_config("identities").to_dict()
    d["family"] = {"single": d["family"]["single"]}
    d["grid"] = {"check": ["chi2-correct"]}
    res = run_experiment(ExperimentConfig.from_dict(d), jobs=1)
    assert not res.passed and res.errors and "ConfigError" in res.errors[0]


def test_certificate_rows_bounds():
    spec = HardInstanceSpec(
        "single-step-pac", 0.1, 0.2, 1, 2, 4, 3, theta=Theta(2, 0, 1, (1,)), mu=(1, -1), unchecked=True
    )
    rows = certificate_rows(spec)
    assert rows[0]["bound"] == pytest.approx(11.0) and rows[0]["pass"]
    assert rows[1]["lifted"] and rows[1]["alpha_inv"] <= rows[0]["alpha_inv"] + 1e-9
    null_rows = certificate_rows(spec.with_theta(None))
    assert null_rows[0]["bound"] == 1.0 and null_rows[0]["pass"]


def test_structural_rows_on_tiny_regret():
    r = structural_rows(HardInstanceSpec.from_dict(TINY_REGRET))
    assert r["reveal_episodes"] > 0 and r["fraction"] == 1.0


def test_small_regret_compare():
    d = {
        "kind": "regret-compare",
        "family": {"multi": TINY_REGRET},
        "grid": {"T": [20, 40]},
        "seeds": [0],
        "budgets": {"algorithms": ["uniform", "always-explore"]},
    }
    res = run_experiment(ExperimentConfig.from_dict(d), jobs=1)
    fam = res.summary["families"]["multi"]
    assert fam["structural_fraction"] == 1.0
    assert fam["uniform"]["exponent"] == pytest.approx(1.0)
    assert res.passed
