import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from escada.metrics import (
    AGGREGATE_COLUMNS,
    RECORD_COLUMNS,
    RunSummary,
    aggregate,
    cumulative_regret,
    make_record,
    read_records,
    regret_curve,
    summarize_run,
    violation_frequencies,
    write_aggregate,
    write_records,
)

T, LO, HI = 112.5, 70.0, 180.0


def _records(fs, policy="ESCADA", run_id="r0", ys=None):
    ys = fs if ys is None else ys
    return [
        make_record(run_id, policy, 0, 0, n, 0, (50.0, 120.0), 1.0, y, f, T, LO, HI, "target-feasible", 1.0, 0.1, 3.0)
        for n, (f, y) in enumerate(zip(fs, ys), start=1)
    ]


def _summary(policy, final):
    return RunSummary(f"{policy}/{final}", policy, 0, 1, [final], 0.0, 0.0, final, T, T, 0.0)


def test_regret_all_on_target_is_zero():
    assert np.all(cumulative_regret(_records([T] * 10)) == 0)


def test_constant_regret_is_linear():
    r = cumulative_regret(_records([T + 4.0] * 25))
    assert r[-1] == 100.0
    np.testing.assert_array_equal(r, 4.0 * np.arange(1, 26))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 600.0, allow_nan=False), min_size=1, max_size=60))
def test_regret_recomputed_from_truth(fs):
    r = cumulative_regret(_records(fs))
    np.testing.assert_allclose(r, np.cumsum(np.abs(np.asarray(fs) - T)), rtol=1e-12, atol=1e-9)
    hypo, hyper = violation_frequencies(_records(fs))
    assert hypo == pytest.approx(np.mean(np.asarray(fs) < LO))
    assert hyper == pytest.approx(np.mean(np.asarray(fs) > HI))


def test_violation_frequencies():
    assert violation_frequencies(_records([T] * 100)) == (0.0, 0.0)
    assert violation_frequencies(_records([T] * 99 + [60.0])) == (0.01, 0.0)
    assert violation_frequencies([]) == (0.0, 0.0)


def test_record_validation():
    with pytest.raises(ValueError):
        _records([T])[0].__class__(*(["r", "p", 0, 0, 1, 0, 1.0, 1.0, 1.0, 1.0, 1.0, -1.0, 0, 0, "b", 0.0, 0.0, 0.0]))


def test_summarize_run():
    s = summarize_run(_records([T + 2.0, T - 4.0, 60.0], ys=[T, T, 62.0]), rounds_to_safe_optimal=2)
    assert s.rounds == 3 and s.cumulative == pytest.approx(58.5)
    assert s.mean_abs_error == pytest.approx(19.5)
    assert s.hypo == pytest.approx(1 / 3) and s.hyper == 0.0
    assert s.mean_y == pytest.approx((2 * T + 62.0) / 3)
    assert s.to_dict()["cumulative_regret"] == s.cumulative
    with pytest.raises(ValueError):
        summarize_run([])


def test_aggregate_identical_and_pair():
    same = aggregate([_summary("A", 5.0), _summary("A", 5.0)])["A"]
    assert same["cumulative_regret_sd"] == 0.0
    a, b = 3.0, 11.0
    row = aggregate([_summary("A", a), _summary("A", b), _summary("B", 1.0), _summary("B", 2.0)])["A"]
    assert row["runs"] == 2
    assert row["cumulative_regret_mean"] == pytest.approx((a + b) / 2)
    assert row["cumulative_regret_sd"] == pytest.approx(abs(a - b) / math.sqrt(2))
    with pytest.raises(ValueError):
        aggregate([_summary("A", 1.0)])
    single = aggregate([_summary("A", 1.0), _summary("B", 2.0)])["A"]
    assert math.isnan(single["cumulative_regret_sd"])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 1e4, allow_nan=False), min_size=2, max_size=40))
def test_aggregate_matches_streaming(values):
    row = aggregate([_summary("A", v) for v in values])["A"]
    # Welford streaming pass as an independent computation
    n, mean, m2 = 0, 0.0, 0.0
    for v in values:
        n += 1
        delta = v - mean
        mean += delta / n
        m2 += delta * (v - mean)
    assert row["cumulative_regret_mean"] == pytest.approx(mean, rel=1e-9, abs=1e-9)
    assert row["cumulative_regret_sd"] == pytest.approx(math.sqrt(m2 / (n - 1)), rel=1e-7, abs=1e-7)


def test_regret_curve_band():
    runs = [RunSummary("a", "P", 0, 2, [1.0, 3.0], 0, 0, 0, 0, 0, 0),
            RunSummary("b", "P", 0, 2, [3.0, 7.0], 0, 0, 0, 0, 0, 0)]
    c = regret_curve(runs, band=0.25)
    np.testing.assert_allclose(c["mean"], [2.0, 5.0])
    np.testing.assert_allclose(c["upper"] - c["mean"], 0.25 * np.array([math.sqrt(2), 2 * math.sqrt(2)]))
    assert c["round"].tolist() == [1, 2]


def test_csv_round_trip(tmp_path):
    recs = _records([T, 60.0, 200.0])
    path = tmp_path / "records.csv"
    write_records(path, recs, header_comment="hello")
    lines = path.read_text().splitlines()
    assert lines[0] == "# hello"
    assert lines[1].split(",") == list(RECORD_COLUMNS)
    assert read_records(path) == recs
    agg = tmp_path / "aggregate.csv"
    write_aggregate(agg, aggregate([_summary("A", 1.0), _summary("A", 2.0)]))
    assert agg.read_text().splitlines()[0].split(",") == list(AGGREGATE_COLUMNS)
