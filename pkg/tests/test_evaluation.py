import dataclasses

import numpy as np
import pytest

from elasticopf.dataset import bus_loads, daily_profile, generate_dataset, generate_tracking_dataset
from elasticopf.evaluation import (MissingLabel, PredictionRecord, TrackingPoint, compute_metrics,
                                   load_satisfaction, oracle_predictions, postprocess_prediction,
                                   predict_testset, storage_comparison, tracking_csv,
                                   tracking_eval)
from elasticopf.grid_model import build_admittance, builtin_case, derive_subnetwork
from elasticopf.neuralnet import init_elastic_dnn
from elasticopf.powerflow import DimensionMismatch


@pytest.fixture(scope="module")
def ds9():
    return generate_dataset([builtin_case("case9")], 25, split_fraction=0.6, seed=21)


def model(ds, hidden=(8,), seed=0):
    lay = ds.layout
    return init_elastic_dnn((lay.in_sizes, lay.out_sizes), hidden, seed=seed, va_mask=lay.va_mask)


def metrics_of(ds, preds, **kw):
    return compute_metrics(ds.cases, ds.test, [preds], **kw).networks[0]


# --------------------------------------------------------------------------
# post-processing


def test_zero_admittance_gives_local_loads():
    c = builtin_case("case14")
    pd, qd = c.pd_pu, c.qd_pu
    pg, qg, ipd, iqd = postprocess_prediction(c, np.zeros((14, 14), complex), np.ones(14),
                                              np.zeros(14), pd, qd)
    np.testing.assert_allclose(pg, pd[c.gen_bus])
    np.testing.assert_allclose(qg, qd[c.gen_bus])
    other = np.setdiff1d(np.arange(14), c.gen_bus)
    np.testing.assert_allclose(ipd[other], 0.0)
    np.testing.assert_allclose(ipd[c.gen_bus], pd[c.gen_bus])


def test_colocated_units_split_by_range():
    c = builtin_case("case9")
    g = list(c.generators)
    # put a second unit with twice the range on bus of unit 0
    g.append(dataclasses.replace(g[0], pmin=10.0, pmax=10.0 + 2 * (g[0].pmax - g[0].pmin)))
    c2 = dataclasses.replace(c, generators=tuple(g))
    Y = build_admittance(c2).entries
    P_total = 1.2
    vm, va = np.ones(9), np.zeros(9)
    pd = np.zeros(9)
    b = c2.gen_bus[0]
    pd[b] = P_total  # zero injection, so the bus total is the local load
    pg = postprocess_prediction(c2, Y, vm, va, pd, np.zeros(9))[0]
    lim = c2.gen_limits_pu
    assert pg[0] + pg[-1] == pytest.approx(P_total)
    excess = P_total - lim["pmin"][0] - lim["pmin"][-1]
    assert pg[-1] - lim["pmin"][-1] == pytest.approx(2 * (pg[0] - lim["pmin"][0]))
    assert pg[0] - lim["pmin"][0] == pytest.approx(excess / 3)


def test_angle_perturbation_is_local():
    c = builtin_case("case14")
    Y = build_admittance(c).entries
    rng = np.random.default_rng(3)
    vm, va = rng.uniform(0.95, 1.05, 14), rng.uniform(-0.2, 0.0, 14)
    base = postprocess_prediction(c, Y, vm, va, c.pd_pu, c.qd_pu)
    i = 8
    va2 = va.copy()
    va2[i] += 0.01
    moved = postprocess_prediction(c, Y, vm, va2, c.pd_pu, c.qd_pu)
    changed = np.flatnonzero(np.abs(moved[2] - base[2]) > 1e-12)
    neighbours = np.flatnonzero(np.abs(Y[i]) > 0)
    assert i in changed and set(changed) <= set(neighbours)


def test_postprocess_dimension_check():
    c = builtin_case("case9")
    with pytest.raises(DimensionMismatch):
        postprocess_prediction(c, build_admittance(c).entries, np.ones(8), np.zeros(9),
                               c.pd_pu, c.qd_pu)


def test_postprocess_idempotent(ds9):
    c = ds9.cases[0]
    Y = build_admittance(c).entries
    s = ds9.test[0][0]
    pd, qd = bus_loads(c, s.loads_p, s.loads_q)
    a = postprocess_prediction(c, Y, s.label.v.vm, s.label.v.va, pd, qd)
    b = postprocess_prediction(c, Y, s.label.v.vm, s.label.v.va, pd, qd)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


# --------------------------------------------------------------------------
# metrics


def test_ground_truth_metrics(ds9):
    m = metrics_of(ds9, oracle_predictions(ds9, 0))
    assert m.n_samples == 10
    assert m.eta_opt < 1e-4
    assert (m.eta_pg, m.eta_qg, m.eta_v, m.eta_sl) == (100.0, 100.0, 100.0, 100.0)
    assert m.eta_pd > 99.99 and m.eta_qd > 99.99
    assert m.speedup is not None and m.speedup > 0


def test_single_voltage_violation(ds9):
    preds = oracle_predictions(ds9, 0)
    c = ds9.cases[0]
    r = preds[3]
    vm = r.vm.copy()
    vm[4] = c.vmax[4] + 0.01
    preds[3] = dataclasses.replace(r, vm=vm)
    m = metrics_of(ds9, preds)
    N = len(preds) * c.n_bus
    assert m.eta_v == pytest.approx(100 * (1 - 1 / N))


def test_cost_scale_invariance(ds9):
    c = ds9.cases[0]
    scaled = dataclasses.replace(c, generators=tuple(
        dataclasses.replace(g, cost=tuple(3.0 * x for x in g.cost)) for g in c.generators))
    preds = predict_testset(model(ds9), ds9, 0)
    tests = [dataclasses.replace(s, label=dataclasses.replace(s.label,
                                                              objective=3.0 * s.label.objective))
             for s in ds9.test[0]]
    a = compute_metrics([c], ds9.test, [preds], timing=False).networks[0]
    b = compute_metrics([scaled], [tests], [preds], timing=False).networks[0]
    assert a.eta_opt == pytest.approx(b.eta_opt, rel=1e-12)
    assert a.speedup is None


def test_load_satisfaction_formula():
    req = np.array([0.5, 0.0, 2e-4, 1.0])
    got = np.array([0.4, 0.3, 0.0, 3.5])
    np.testing.assert_allclose(load_satisfaction(got, req, [0, 2, 3]), [0.8, 0.8, 0.0])


def test_missing_label(ds9):
    preds = oracle_predictions(ds9, 0)
    with pytest.raises(MissingLabel):
        compute_metrics(ds9.cases, ds9.test, [preds[:-1]])
    unlabeled = [dataclasses.replace(s, label=None) for s in ds9.test[0]]
    with pytest.raises(MissingLabel):
        compute_metrics(ds9.cases, [unlabeled], [preds])


def test_predictions_are_within_voltage_limits(ds9):
    preds = predict_testset(model(ds9, seed=1), ds9, 0)
    c = ds9.cases[0]
    for r in preds:
        assert isinstance(r, PredictionRecord)
        assert np.all(r.vm >= c.vmin - 1e-12) and np.all(r.vm <= c.vmax + 1e-12)
    assert metrics_of(ds9, preds).eta_v == 100.0


# --------------------------------------------------------------------------
# storage


def test_storage_single_network_ratio_one():
    dnn = init_elastic_dnn(((10,), (18,)), (16, 8))
    s = storage_comparison(dnn)
    assert s["ratio"] == 1.0 and s["unified_bytes"] == 4 * s["unified_params"]


def test_storage_large_cases():
    # input slots of case57/118/300 and two outputs per bus
    dnn = init_elastic_dnn(((84, 189, 374), (114, 236, 600)), (1024, 512, 256))
    s = storage_comparison(dnn)
    assert s["unified_params"] == 1_194_328
    assert s["separate_params"] == 2_878_134
    assert 0.40 <= s["ratio"] <= 0.50
    assert storage_comparison(dnn, bytes_per_param=8)["ratio"] == s["ratio"]


# --------------------------------------------------------------------------
# tracking


@pytest.fixture(scope="module")
def tracking_ds():
    base = builtin_case("case_ieee30")
    nets = [derive_subnetwork(base, n) for n in (24, 30)]
    return generate_tracking_dataset(nets, daily_profile(0.54, 6), per_slot_n=1, seed=2)


def test_untrained_tracking_series(tracking_ds):
    dnn = model(tracking_ds)
    pts = tracking_eval(dnn, tracking_ds)
    assert [p.t for p in pts] == list(range(6))
    assert [p.network_id for p in pts] == [0, 0, 0, 1, 1, 1]
    assert all(np.isfinite(p.cost_pred) and p.cost_oracle > 0 for p in pts)


def test_tracking_missing_slots(tracking_ds):
    ds = dataclasses.replace(tracking_ds, test=[tracking_ds.test[0], tracking_ds.test[1][:-1]])
    with pytest.raises(MissingLabel):
        tracking_eval(model(ds), ds)


def test_tracking_csv_format():
    pts = [TrackingPoint(0, 0, 101.5, 100.0), TrackingPoint(1, 1, 99.0, 100.0)]
    assert tracking_csv(pts) == "t,network_id,cost_pred,cost_oracle\n0,0,101.5,100.0\n1,1,99.0,100.0\n"
    assert pts[0].rel_gap == pytest.approx(0.015)
