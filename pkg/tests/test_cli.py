import json
from pathlib import Path

import pandas as pd
import pytest

from teleograsp import cli
from teleograsp.metrics import read_log, read_metrics, write_metrics

ROOT = Path(__file__).resolve().parents[1]


def run(*argv):
    return cli.main([*map(str, argv), "-q"])


def files(d: Path) -> dict:
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    """Plan, simulate and analyse a 2/2/2 cohort once for the whole module."""
    root = tmp_path_factory.mktemp("run")
    assert run("plan", "--out", root / "plans", "--cohort", "2,2,2", "--seed", 7) == 0
    assert run("simulate", "--plans", root / "plans", "--out", root / "logs") == 0
    assert run("analyze", "--logs", root / "logs", "--out", root / "metrics") == 0
    assert run("verdict", "--metrics", root / "metrics", "--out", root / "report") == 0
    return root


# -- plan ---------------------------------------------------------------------------

def test_plan_default_cohort(tmp_path):
    assert run("plan", "--out", tmp_path) == 0
    assert len(list(tmp_path.glob("*.plan"))) == 62
    cohort = json.loads((tmp_path / cli.COHORT_FILE).read_text())
    assert len(cohort["subjects"]) == 31


def test_plan_custom_sizes(tmp_path):
    assert run("plan", "--out", tmp_path, "--cohort", "3,3,3") == 0
    assert len(list(tmp_path.glob("*.plan"))) == 18


def test_plan_byte_identical(tmp_path):
    run("plan", "--out", tmp_path / "a", "--seed", 5, "--cohort", "1,2,1")
    run("plan", "--out", tmp_path / "b", "--seed", 5, "--cohort", "1,2,1")
    assert files(tmp_path / "a") == files(tmp_path / "b")


@pytest.mark.parametrize("cohort", ["1,x,3", "1,2", "0,0,0", "-1,2,2"])
def test_plan_invalid_sizes(tmp_path, cohort):
    assert run("plan", "--out", tmp_path, f"--cohort={cohort}") == 2


def test_plan_out_is_a_file(tmp_path):
    f = tmp_path / "f"
    f.write_text("")
    assert run("plan", "--out", f) == 2


# -- config ----------------------------------------------------------------------------

def test_default_config_file_matches_defaults():
    shipped = json.loads((ROOT / "configs" / "default.json").read_text())
    assert shipped == json.loads(json.dumps(cli.RunConfig().to_dict()))


def test_config_file_overrides_flags(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"stats": {"alpha": 0.01}, "seed": 3}))
    assert run("plan", "--out", tmp_path / "p", "--cohort", "1,1,1", "--seed", 9,
               "--config", conf) == 0
    stored = json.loads((tmp_path / "p" / cli.CONFIG_FILE).read_text())
    assert stored["stats"]["alpha"] == 0.01 and stored["seed"] == 3
    assert stored["cohort"] == {"fine": 1, "normal": 1, "quick": 1}


def test_unknown_config_key_rejected(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"bogus": 1}))
    assert run("plan", "--out", tmp_path / "p", "--config", conf) == 2


def test_missing_config_file(tmp_path):
    assert run("plan", "--out", tmp_path / "p", "--config", tmp_path / "nope.json") == 2


def test_config_hash_stable_and_sensitive():
    a, b = cli.RunConfig(), cli.RunConfig()
    assert a.hash() == b.hash()
    assert a.hash() != cli.RunConfig.from_dict({"stats": {"alpha": 0.01}}).hash()


# -- simulate ----------------------------------------------------------------------------

def test_simulate_requires_plans(tmp_path):
    assert run("simulate", "--plans", tmp_path, "--out", tmp_path / "logs") == 2


def test_simulate_one_subject_action(tmp_path):
    run("plan", "--out", tmp_path / "plans", "--cohort", "1,0,0")
    sid = json.loads((tmp_path / "plans" / cli.COHORT_FILE).read_text())["subjects"][0]["id"]
    assert run("simulate", "--plans", tmp_path / "plans", "--out", tmp_path / "logs", "--subject", sid,
               "--experiment", "action") == 0
    assert len(list((tmp_path / "logs" / sid / "action").glob("trial_*.csv"))) == 110


def test_simulate_worker_count_independent(tmp_path):
    run("plan", "--out", tmp_path / "plans", "--cohort", "0,1,1", "--seed", 11)
    for w in (1, 2):
        assert run("simulate", "--plans", tmp_path / "plans", "--out", tmp_path / f"w{w}", "--workers", w,
                   "--experiment", "perception") == 0
    assert files(tmp_path / "w1") == files(tmp_path / "w2")


def test_simulate_unknown_subject(tmp_path):
    run("plan", "--out", tmp_path / "plans", "--cohort", "1,1,1")
    assert run("simulate", "--plans", tmp_path / "plans", "--out", tmp_path / "logs", "--subject", "nobody") == 2


def test_fine_large_object_logs_flag_clamping(small_run):
    cohort = json.loads((small_run / "plans" / cli.COHORT_FILE).read_text())
    fine = [s["id"] for s in cohort["subjects"] if s["condition"] == "fine"]
    metas = [json.loads(p.read_text()) for sid in fine for p in (small_run / "logs" / sid).glob("*/*.meta.json")]
    big = [m for m in metas if m["diameter_mm"] == 12.0]
    assert big and any(m["clamped_ticks"] > 0 for m in big)
    small = [m for m in metas if m["diameter_mm"] == 4.0]
    assert all(m["clamped_ticks"] == 0 for m in small)


# -- analyze -------------------------------------------------------------------------------

def test_analyze_outputs(small_run):
    agg = read_metrics(small_run / "metrics" / "aggregate.csv")
    for exp in ("action", "perception"):
        assert len(agg[agg["experiment"] == exp]) == 6 * 5
    act = agg[agg["experiment"] == "action"]
    assert act["mga_n"].max() == 20
    trials = read_metrics(small_run / "metrics" / "trials.csv")
    assert len(trials) == 6 * 220
    assert (small_run / "metrics" / "exclusions.csv").is_file()


def test_analyze_empty_dir(tmp_path):
    (tmp_path / "empty").mkdir()
    assert run("analyze", "--logs", tmp_path / "empty", "--out", tmp_path / "m") == 2


def test_analyze_exclusion_bound(tmp_path):
    run("plan", "--out", tmp_path / "plans", "--cohort", "0,1,0")
    run("simulate", "--plans", tmp_path / "plans", "--out", tmp_path / "logs", "--experiment", "action")
    logs = sorted((tmp_path / "logs").rglob("trial_*.csv"))
    for p in logs[20:40]:
        p.write_text("garbage\n")
    assert run("analyze", "--logs", tmp_path / "logs", "--out", tmp_path / "m") == 3
    ex = pd.read_csv(tmp_path / "m" / "exclusions.csv")
    assert len(ex) >= 20 and ex["reason"].str.startswith("corrupt").sum() == 20
    assert run("analyze", "--logs", tmp_path / "logs", "--out", tmp_path / "m2", "--max-exclusion-rate", 0.5) == 0


# -- fit / verdict / report / replay ---------------------------------------------------------

def test_fit_writes_all_models(small_run, tmp_path):
    assert run("fit", "--metrics", small_run / "metrics", "--out", tmp_path) == 0
    fits = json.loads((tmp_path / "fits.json").read_text())
    assert len(fits["models"]) == 12 and not fits["errors"]


def test_fit_failure_exit_code(small_run, tmp_path):
    agg = read_metrics(small_run / "metrics" / "aggregate.csv")
    fine = sorted(agg.loc[agg["condition"] == "fine", "subject"].unique())
    (tmp_path / "m").mkdir()
    write_metrics(agg[agg["subject"] != fine[0]], tmp_path / "m" / "aggregate.csv")
    assert run("fit", "--metrics", tmp_path / "m", "--out", tmp_path / "f") == 4
    assert json.loads((tmp_path / "f" / "fits.json").read_text())["errors"]


def test_verdict_report_contents(small_run):
    rep = json.loads((small_run / "report" / "report.json").read_text())
    assert set(rep["verdict"]["transparent"]) == {"fine", "normal", "quick"}
    assert rep["seed"] == 7
    stored = cli.RunConfig.from_dict(json.loads((small_run / "metrics" / cli.CONFIG_FILE).read_text()))
    assert rep["config_hash"] == stored.hash()
    assert rep["ceilings"]["fine"] == pytest.approx(3 * 0.5235987755982988)
    assert "mga_sd" in rep["bartlett"]


def test_plot_data_carries_ceiling(small_run):
    reg = pd.read_csv(small_run / "report" / "regression_mga_mean.csv")
    assert {"observed_mean", "fitted", "ceiling"} <= set(reg.columns)
    assert reg.loc[reg["condition"] == "quick", "ceiling"].iloc[0] == pytest.approx(7 * 0.5235987755982988)
    slopes = pd.read_csv(small_run / "report" / "slopes.csv")
    assert slopes["ceiling"].notna().all() and len(slopes) == 12 * 3
    assert (small_run / "report" / "qq_ps_sd.csv").is_file()


def test_verdict_rerun_byte_identical(small_run, tmp_path):
    assert run("verdict", "--metrics", small_run / "metrics", "--out", tmp_path) == 0
    assert files(tmp_path) == files(small_run / "report")


def test_verdict_alpha_sensitivity(small_run, tmp_path):
    assert run("verdict", "--metrics", small_run / "metrics", "--out", tmp_path, "--alpha", 1e-9) == 0
    strict = json.loads((tmp_path / "report.json").read_text())["verdict"]
    loose = json.loads((small_run / "report" / "report.json").read_text())["verdict"]
    assert strict["alpha"] == 1e-9

    def flags(v):
        return [(c, k) for c, cv in v["conditions"].items() for k in ("action_mean_ok", "perception_mean_ok",
                                                                      "perception_sd_weber_obeyed") if cv[k]]
    assert set(flags(strict)) < set(flags(loose))


def test_analysis_rerun_byte_identical(small_run, tmp_path):
    assert run("analyze", "--logs", small_run / "logs", "--out", tmp_path) == 0
    assert files(tmp_path) == files(small_run / "metrics")


def test_report_text(small_run, tmp_path, capsys):
    assert run("report", "--report", small_run / "report" / "report.json") == 0
    out = capsys.readouterr().out
    assert "transparent" in out and "fine" in out
    assert run("report", "--report", small_run / "report" / "report.json", "--out", tmp_path / "r.txt") == 0
    assert (tmp_path / "r.txt").read_text() == out


def test_report_missing(tmp_path):
    assert run("report", "--report", tmp_path / "nope.json") == 2


def test_replay(small_run, tmp_path):
    log_path = next((small_run / "logs").rglob("trial_050.csv"))
    assert run("replay", "--log", log_path, "--out", tmp_path / "r.csv") == 0
    df = pd.read_csv(tmp_path / "r.csv")
    assert list(df.columns)[:5] == ["t", "x", "y", "z", "aperture"]
    assert len(df) == len(read_log(log_path).t[::10])
    assert df["t"].diff().dropna().round(6).eq(0.01).all()
