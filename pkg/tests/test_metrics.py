import math

import numpy as np
import pandas as pd
import pytest

from teleograsp.agents import Phenotype, make_subject
from teleograsp.metrics import (
    METRIC_NAMES, AnalysisConfig, FilteredTrial, Unanalyzable, aggregate, analyze_trial, compute_metrics,
    detect_events, preprocess, preprocess_array, read_log, read_metrics, write_log, write_metrics,
    zero_phase_filter,
)
from teleograsp.model import ObjectSpec, Trial
from teleograsp.teleop import run_trial

FS = 100.0


def double_pass_gain(f, fc=10.0, fs=FS, order=4):
    """Hand-derived magnitude of a forward-backward bilinear Butterworth low-pass."""
    r = math.tan(math.pi * f / fs) / math.tan(math.pi * fc / fs)
    return 1.0 / (1.0 + r ** (2 * order))


def tone_gain(f, n=4000):
    t = np.arange(n) / FS
    y = zero_phase_filter(np.sin(2 * np.pi * f * t))
    core = slice(n // 4, 3 * n // 4)
    return np.sqrt(2 * np.mean(y[core] ** 2))


# -- filter -----------------------------------------------------------------------

def test_dc_gain_unity():
    y = zero_phase_filter(np.full(500, 3.25))
    np.testing.assert_allclose(y, 3.25, atol=1e-9)


@pytest.mark.parametrize("f", [2.0, 5.0, 9.0, 20.0, 30.0])
def test_tone_gain_matches_analytic_response(f):
    assert tone_gain(f) == pytest.approx(double_pass_gain(f), rel=0.02, abs=1e-6)


def test_twenty_hz_is_strongly_attenuated():
    assert tone_gain(20.0) < 0.0039  # at least as strong as the analog-prototype bound


def test_minus_three_db_near_nine_hz():
    freqs = np.linspace(8.0, 10.0, 401)
    g = np.array([double_pass_gain(f) for f in freqs])
    f3 = freqs[np.argmin(np.abs(g - 1 / math.sqrt(2)))]
    assert abs(f3 - 9.0) < 0.5
    assert tone_gain(f3) == pytest.approx(1 / math.sqrt(2), rel=0.02)


@pytest.mark.parametrize("f", [1.0, 5.0, 9.0])
def test_zero_phase(f):
    n = 2000
    t = np.arange(n) / FS
    x = np.sin(2 * np.pi * f * t) * np.hanning(n)
    y = zero_phase_filter(x)
    lags = np.arange(-20, 21)
    xc = [np.dot(x[50 + k:n - 50 + k], y[50:n - 50]) for k in lags]
    assert lags[int(np.argmax(xc))] == 0


def test_linearity(rng):
    a, b = rng.normal(size=300), rng.normal(size=300)
    np.testing.assert_allclose(zero_phase_filter(2 * a - 3 * b), 2 * zero_phase_filter(a) - 3 * zero_phase_filter(b),
                               atol=1e-9)


def test_too_short_for_padding():
    with pytest.raises(ValueError):
        zero_phase_filter(np.zeros(12))


def test_preprocess_decimates_then_filters(rng):
    x = rng.normal(size=(1000, 2))
    out = preprocess_array(x)
    assert out.shape == (100, 2)
    np.testing.assert_array_equal(out, zero_phase_filter(x[::10]))
    slow = np.sin(2 * np.pi * 0.5 * np.arange(1000) / 1000.0)
    np.testing.assert_allclose(preprocess_array(slow)[30:-30], slow[::10][30:-30], atol=1e-3)


# -- events -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def during():
    agent = make_subject(4, "normal")
    from dataclasses import replace
    agent = replace(agent, params=replace(agent.params, phenotype=Phenotype.DURING_REACH, mga_timing_fraction=0.65))
    return agent, run_trial(agent, Trial(3, ObjectSpec(8.0), False), "action", seed=5)


def test_onset_near_ground_truth(during):
    _, tl = during
    ev = detect_events(preprocess(tl))
    assert abs(ev["onset"] - tl.t[tl.events["onset"]]) < 0.030


def test_event_ordering(during):
    _, tl = during
    ev = detect_events(preprocess(tl))
    assert ev["go"] < ev["onset"] < ev["mga_time"] < ev["transport_end"] < ev["lift"] < ev["lift_end"]


def test_mga_is_window_maximum(during):
    _, tl = during
    ft = preprocess(tl)
    ev = detect_events(ft)
    w = (ft.t >= ev["go"]) & (ft.t <= ev["transport_end"])
    assert ev["mga"] == ft.aperture[w].max()


def test_straight_reach_path_and_fraction(during):
    _, tl = during
    m = compute_metrics(ft := preprocess(tl), detect_events(ft))
    assert m.path_length == pytest.approx(40.0, abs=0.5)
    assert m.mga_time_fraction == pytest.approx(0.65, abs=0.05)
    assert m.reaction_time > 0 and m.transport_time > 0 and m.total_time > m.reaction_time + m.transport_time
    assert math.isnan(m.ps) and math.isnan(m.perception_time)


def test_zero_motion_is_unanalyzable():
    n = 300
    ft = FilteredTrial(np.arange(n) / FS, np.zeros((n, 3)), np.zeros(n), {"go": 0.3},
                       {"experiment": "action", "object_x": 0.04, "object_y": 0, "object_z": 0,
                        "start_x": 0, "start_y": 0, "start_z": 0})
    with pytest.raises(Unanalyzable):
        detect_events(ft)


def test_pre_opener_fraction_clamped_to_zero():
    from dataclasses import replace
    agent = make_subject(8, "normal")
    agent = replace(agent, params=replace(agent.params, phenotype=Phenotype.PRE_OPENER))
    tl = run_trial(agent, Trial(3, ObjectSpec(6.0), False), "action", seed=2)
    ft = preprocess(tl)
    ev = detect_events(ft)
    assert ev["mga_time"] <= ev["onset"]
    assert compute_metrics(ft, ev).mga_time_fraction == 0.0


def test_perception_trial_metrics():
    agent = make_subject(4, "quick")
    tl = run_trial(agent, Trial(2, ObjectSpec(10.0), False), "perception", seed=9)
    ft = preprocess(tl)
    ev = detect_events(ft)
    assert ev["pantomime_time"] < ft.ui["confirm"]
    m = compute_metrics(ft, ev)
    assert m.ps == pytest.approx(tl.meta["ps_target"], abs=0.02)
    assert m.perception_time == pytest.approx(tl.meta["perception_time_cmd"], abs=0.25)
    assert math.isnan(m.mga)


def test_missing_event_leaves_metrics_missing(during):
    _, tl = during
    ft = preprocess(tl)
    ev = detect_events(ft)
    del ev["transport_end"]
    m = compute_metrics(ft, ev)
    assert all(math.isnan(getattr(m, k)) for k in METRIC_NAMES)


def test_analyze_trial_flags_unanalyzable(during):
    _, tl = during
    from dataclasses import replace
    still = replace(tl, pos=np.repeat(tl.pos[:1], tl.t.size, axis=0))
    row = analyze_trial(still)
    assert row["analyzable"] is False and row["reason"]
    assert math.isnan(row["mga"])


def test_detection_ignores_ground_truth_markers(during):
    _, tl = during
    from dataclasses import replace
    blind = replace(tl, events={k: v for k, v in tl.events.items() if k == "go"})
    a, b = analyze_trial(tl), analyze_trial(blind)
    assert {k: a[k] for k in METRIC_NAMES} == pytest.approx({k: b[k] for k in METRIC_NAMES}, nan_ok=True)


def test_config_changes_threshold(during):
    _, tl = during
    ft = preprocess(tl)
    early = detect_events(ft, AnalysisConfig(onset_fraction=0.02))["onset"]
    late = detect_events(ft, AnalysisConfig(onset_fraction=0.2))["onset"]
    assert early < late


# -- aggregation -----------------------------------------------------------------

def rows_for(values, subject="s1", diameter=8.0, experiment="action", training=None):
    training = training or [False] * len(values)
    return [{"subject": subject, "condition": "normal", "experiment": experiment, "trial": i,
             "diameter_mm": diameter, "is_training": tr, "analyzable": True,
             **{k: math.nan for k in METRIC_NAMES}, "mga": v} for i, (v, tr) in enumerate(zip(values, training))]


def test_aggregate_hand_values():
    agg = aggregate(rows_for([1.0, 2.0, 3.0]))
    assert agg.loc[0, "mga_mean"] == 2.0 and agg.loc[0, "mga_sd"] == 1.0 and agg.loc[0, "mga_n"] == 3


def test_aggregate_identical_values():
    agg = aggregate(rows_for([0.7] * 20))
    assert agg.loc[0, "mga_mean"] == pytest.approx(0.7) and agg.loc[0, "mga_sd"] == 0.0


def test_aggregate_drops_training_and_flags_low_n():
    agg = aggregate(rows_for([1.0, 5.0, 9.0], training=[True, False, False]))
    assert agg.loc[0, "mga_n"] == 2 and agg.loc[0, "mga_mean"] == 7.0
    assert bool(agg.loc[0, "mga_low_confidence"])


def test_aggregate_never_mixes_groups():
    rows = (rows_for([1.0, 2.0]) + rows_for([10.0, 20.0], subject="s2") + rows_for([5.0, 6.0], diameter=4.0)
            + rows_for([7.0, 8.0], experiment="perception"))
    agg = aggregate(rows)
    assert len(agg) == 4
    assert sorted(agg["mga_mean"]) == [1.5, 5.5, 7.5, 15.0]


def test_aggregate_missing_values_excluded_from_n():
    rows = rows_for([1.0, 2.0, 3.0])
    rows[0]["mga"] = math.nan
    agg = aggregate(rows)
    assert agg.loc[0, "mga_n"] == 2 and agg.loc[0, "mga_mean"] == 2.5


# -- files ------------------------------------------------------------------------

def test_log_roundtrip(during, tmp_path):
    _, tl = during
    p = write_log(tl, tmp_path / "trial_003.csv")
    back = read_log(p)
    np.testing.assert_allclose(back.pos, tl.pos, rtol=1e-11, atol=1e-15)
    np.testing.assert_allclose(back.t, tl.t)
    assert back.events == tl.events
    assert back.meta["diameter_mm"] == tl.meta["diameter_mm"]
    assert analyze_trial(back)["mga"] == pytest.approx(analyze_trial(tl)["mga"], rel=1e-9)


def test_log_header_checked(tmp_path):
    (tmp_path / "bad.csv").write_text("t,x\n0,0\n")
    with pytest.raises(ValueError):
        read_log(tmp_path / "bad.csv")


def test_metrics_roundtrip(tmp_path):
    df = pd.DataFrame(rows_for([1.0, 2.5]))
    back = read_metrics(write_metrics(df, tmp_path / "m.csv"))
    pd.testing.assert_frame_equal(back, df, check_dtype=False)
