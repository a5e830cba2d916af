import math

import numpy as np
import pytest

from pamm.ped import (
    CutPoints,
    PedDataset,
    SurvivalRecord,
    as_ped,
    make_cut_points,
    read_ped_csv,
    write_ped_csv,
)


def rec(id, time, event, group="all", **covs):
    return SurvivalRecord(id=str(id), time=time, event=event, covariates=covs, group=group)


def random_records(rng, n, with_covs=True, groups=("g1", "g2")):
    out = []
    for i in range(n):
        covs = {"x1": float(rng.uniform()), "x2": float(rng.uniform())} if with_covs else {}
        out.append(
            SurvivalRecord(
                id=f"s{i}",
                time=float(rng.uniform(0.05, 10.0)),
                event=bool(rng.uniform() < 0.7),
                covariates=covs,
                group=str(rng.choice(groups)),
            )
        )
    return out


# ---------------------------------------------------------------- cut points


def test_unique_times_cuts():
    recs = [rec(1, 5, True), rec(2, 3, False), rec(3, 5, True), rec(4, 2, True)]
    cuts = make_cut_points(recs, "unique-event-times")
    assert cuts.kappas == (0.0, 2.0, 3.0, 5.0)


def test_equidistant_cuts():
    recs = [rec(1, 1, True), rec(2, 2, True)]
    cuts = make_cut_points(recs, "equidistant", n_intervals=4)
    assert cuts.kappas == (0.0, 0.5, 1.0, 1.5, 2.0)


def test_explicit_cuts_below_max_time_rejected():
    recs = [rec(1, 5, True)]
    with pytest.raises(ValueError):
        make_cut_points(recs, "explicit", explicit=[0, 2, 4])


def test_explicit_cuts_zero_prepended():
    recs = [rec(1, 3, True)]
    cuts = make_cut_points(recs, "explicit", explicit=[2, 4])
    assert cuts.kappas == (0.0, 2.0, 4.0)


def test_cut_points_validation():
    with pytest.raises(ValueError):
        CutPoints((0.0, 2.0, 2.0))
    with pytest.raises(ValueError):
        CutPoints((1.0, 2.0))
    with pytest.raises(ValueError):
        CutPoints((0.0,))
    with pytest.raises(ValueError):
        make_cut_points([], "unique-event-times")


# ------------------------------------------------------------------- as_ped


def test_event_subject_end_convention():
    ped = as_ped([rec(1, 5.0, True)], CutPoints((0.0, 2.0, 5.0)), "end")
    rows = list(ped.rows())
    assert len(rows) == 2
    r1, r2 = rows
    assert (r1.interval, r1.exposure, r1.delta, r1.t_rep) == (1, 2.0, 0, 2.0)
    assert r1.offset == math.log(2.0)
    assert (r2.interval, r2.exposure, r2.delta, r2.t_rep) == (2, 3.0, 1, 5.0)
    assert r2.offset == math.log(3.0)


def test_censored_subject_partial_last_interval():
    ped = as_ped([rec(1, 3.0, False)], CutPoints((0.0, 2.0, 5.0)), "end")
    rows = list(ped.rows())
    assert [(r.interval, r.exposure, r.delta) for r in rows] == [(1, 2.0, 0), (2, 1.0, 0)]
    assert rows[1].t_rep == 5.0


def test_event_on_boundary_mid_convention():
    ped = as_ped([rec(1, 2.0, True)], CutPoints((0.0, 2.0, 5.0)), "mid")
    rows = list(ped.rows())
    assert len(rows) == 1
    r = rows[0]
    assert (r.interval, r.exposure, r.delta, r.t_rep) == (1, 2.0, 1, 1.0)


def test_time_beyond_last_cut_rejected():
    with pytest.raises(ValueError):
        as_ped([rec(1, 6.0, True)], CutPoints((0.0, 2.0, 5.0)))


def test_nonpositive_time_rejected():
    with pytest.raises(ValueError):
        rec(1, 0.0, True)
    with pytest.raises(ValueError):
        rec(1, -1.0, True)


def test_exposure_sums_to_followup_time():
    rng = np.random.default_rng(7)
    recs = random_records(rng, 40)
    cuts = make_cut_points(recs, "unique-event-times")
    ped = as_ped(recs, cuts)
    for r in recs:
        mask = ped.ids == r.id
        assert np.isclose(ped.exposure[mask].sum(), r.time, rtol=0, atol=1e-12)
        # delta sums to the event indicator once per subject
        assert ped.delta[mask].sum() == int(r.event)
    # offsets are exactly the log exposures
    assert np.array_equal(ped.offset, np.log(ped.exposure))
    assert np.all(ped.exposure > 0)


def test_convention_changes_only_t_rep():
    rng = np.random.default_rng(8)
    recs = random_records(rng, 25)
    cuts = make_cut_points(recs, "equidistant", n_intervals=7)
    a = as_ped(recs, cuts, "end")
    b = as_ped(recs, cuts, "mid")
    assert np.array_equal(a.exposure, b.exposure)
    assert np.array_equal(a.delta, b.delta)
    assert np.array_equal(a.interval, b.interval)
    assert np.array_equal(a.t_rep, a.t_end)
    assert np.allclose(b.t_rep, 0.5 * (b.t_start + b.t_end))


def test_roundtrip_reconstruction():
    rng = np.random.default_rng(9)
    recs = random_records(rng, 30)
    cuts = make_cut_points(recs, "unique-event-times")
    ped = as_ped(recs, cuts)
    back = ped.to_records()
    assert len(back) == len(recs)
    for orig, rebuilt in zip(recs, back):
        assert rebuilt.id == orig.id
        assert math.isclose(rebuilt.time, orig.time, rel_tol=0, abs_tol=1e-12)
        assert rebuilt.event == orig.event
        assert rebuilt.group == orig.group
        assert rebuilt.covariates == orig.covariates


def test_covariates_constant_within_subject():
    rng = np.random.default_rng(10)
    recs = random_records(rng, 10)
    ped = as_ped(recs, make_cut_points(recs, "unique-event-times"))
    for r in recs:
        mask = ped.ids == r.id
        for name, val in r.covariates.items():
            assert np.all(ped.covariate_columns[name][mask] == val)


def test_schema_mismatch_rejected():
    recs = [rec(1, 1.0, True, x=1.0), rec(2, 2.0, False, y=1.0)]
    with pytest.raises(ValueError):
        as_ped(recs, CutPoints((0.0, 2.0)))


# ---------------------------------------------------------------------- csv


def test_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(11)
    recs = random_records(rng, 20)
    cuts = make_cut_points(recs, "unique-event-times")
    ped = as_ped(recs, cuts)
    path = tmp_path / "ped.csv"
    write_ped_csv(ped, path)

    header = path.read_text().splitlines()[0]
    assert header == "id,interval,t_start,t_end,t_rep,exposure,offset,delta,x1,x2,group"

    back = read_ped_csv(path)
    assert back.schema == ped.schema
    assert back.cuts.kappas == ped.cuts.kappas
    assert np.array_equal(back.interval, ped.interval)
    assert np.array_equal(back.delta, ped.delta)
    for col in ("t_start", "t_end", "t_rep", "exposure", "offset"):
        assert np.array_equal(getattr(back, col), getattr(ped, col)), col
    for name in ped.schema.covariates:
        assert np.array_equal(back.covariate_columns[name], ped.covariate_columns[name])


def test_csv_17_digit_roundtrip(tmp_path):
    # a time whose decimal expansion does not terminate
    recs = [rec(1, 1.0 / 3.0, True), rec(2, math.pi / 7.0, False)]
    ped = as_ped(recs, make_cut_points(recs, "unique-event-times"))
    path = tmp_path / "ped.csv"
    write_ped_csv(ped, path)
    back = read_ped_csv(path)
    assert np.array_equal(back.exposure, ped.exposure)
    assert np.array_equal(back.offset, ped.offset)
