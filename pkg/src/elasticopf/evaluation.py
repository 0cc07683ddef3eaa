"""Prediction post-processing, quality metrics, storage comparison and tracking."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import Dataset, bus_loads
from .grid_model import NetworkCase, branch_admittances, build_admittance
from .neuralnet import ElasticDnn, inference_view, param_count, param_count_separate
from .opf import objective
from .powerflow import (FEAS_TOL, DimensionMismatch, VoltageSolution, complex_injections,
                        evaluate_constraints)

LOAD_EPS = 1e-3


class MissingLabel(ValueError):
    pass


class DispatchRule:
    """Precomputed split of bus injections onto generators, plus non-generator bus indices.

    Co-located units share a bus total in proportion to (max - min); with
    zero total range the shares are equal. Per unit: g = offset + share * T[bus].
    """

    def __init__(self, case: NetworkCase):
        lim = case.gen_limits_pu
        bus = case.gen_bus
        self.gen_bus = bus
        self.n_bus = case.n_bus
        self.other = np.setdiff1d(np.arange(case.n_bus), bus)
        self.p = self._coeffs(bus, lim["pmin"], lim["pmax"], case.n_bus)
        self.q = self._coeffs(bus, lim["qmin"], lim["qmax"], case.n_bus)

    @staticmethod
    def _coeffs(bus, lo, hi, nb):
        room = hi - lo
        room_bus = np.bincount(bus, room, nb)[bus]
        count_bus = np.bincount(bus, minlength=nb)[bus]
        share = np.where(room_bus > 0, room / np.where(room_bus > 0, room_bus, 1.0), 1.0 / count_bus)
        lo_bus = np.bincount(bus, lo, nb)[bus]
        return lo - share * lo_bus, share

    def __call__(self, P, Q, pd, qd):
        bus = self.gen_bus
        pg = self.p[0] + self.p[1] * (P[bus] + pd[bus])
        qg = self.q[0] + self.q[1] * (Q[bus] + qd[bus])
        implied_pd = np.array(pd, dtype=float)
        implied_qd = np.array(qd, dtype=float)
        implied_pd[self.other] = -P[self.other]
        implied_qd[self.other] = -Q[self.other]
        return pg, qg, implied_pd, implied_qd


def postprocess_prediction(case: NetworkCase, Y, vm, va, pd, qd, rule: DispatchRule | None = None):
    """Recover (pg, qg, implied_pd, implied_qd) from predicted voltages.

    Generator buses absorb whatever the injections imply (pg = P + Pd), split
    across co-located units by their limit ranges; at the other buses the
    implied load is simply minus the injection.
    """
    vm = np.asarray(vm, dtype=float)
    va = np.asarray(va, dtype=float)
    if vm.shape != (case.n_bus,) or va.shape != (case.n_bus,):
        raise DimensionMismatch(f"voltage vectors must have {case.n_bus} entries")
    V = vm * np.exp(1j * va)
    S = V * np.conj(Y @ V)
    rule = rule or DispatchRule(case)
    return rule(S.real, S.imag, np.asarray(pd, dtype=float), np.asarray(qd, dtype=float))


@dataclass
class PredictionRecord:
    network: int
    index: int
    vm: np.ndarray
    va: np.ndarray
    pg: np.ndarray
    qg: np.ndarray
    implied_pd: np.ndarray
    implied_qd: np.ndarray
    dnn_time: float


class Predictor:
    """Forward + unscale + post-process for one network, with everything precomputed."""

    def __init__(self, dnn: ElasticDnn, ds: Dataset, k: int, network_index: int | None = None):
        self.k = k
        # a standalone model is trained on a single network and uses index 0
        self.net = inference_view(dnn, k if network_index is None else network_index)
        self.case = case = ds.cases[k]
        self.Y = build_admittance(case).entries
        self.rule = DispatchRule(case)
        lay, sc = ds.layout, ds.scaler
        self.in_index = lay.in_index[k]
        self.in_lo, in_hi = sc._range(k, "input")
        self.in_scale = 1.0 / (in_hi - self.in_lo)
        self.out_lo, out_hi = sc._range(k, "target")
        self.out_span = out_hi - self.out_lo
        self.out_index = lay.out_index[k]
        self.p_buses, self.q_buses = case.p_load_buses, case.q_load_buses

    def __call__(self, sample, index: int = 0) -> PredictionRecord:
        t0 = time.perf_counter()
        nb = self.case.n_bus
        u = (np.concatenate([sample.loads_p, sample.loads_q])[self.in_index] - self.in_lo) \
            * self.in_scale
        y = self.out_lo + self.net(u) * self.out_span
        full = np.empty(2 * nb)
        full[self.out_index] = y
        vm, va = full[:nb], full[nb:]
        pd = np.zeros(nb)
        qd = np.zeros(nb)
        pd[self.p_buses] = sample.loads_p
        qd[self.q_buses] = sample.loads_q
        V = vm * np.exp(1j * va)
        S = V * np.conj(self.Y @ V)
        pg, qg, ipd, iqd = self.rule(S.real, S.imag, pd, qd)
        return PredictionRecord(self.k, index, vm, va, pg, qg, ipd, iqd,
                                time.perf_counter() - t0)


def oracle_predictions(ds: Dataset, k: int) -> list[PredictionRecord]:
    """Debug path: feed the oracle's own voltages through the post-processing."""
    case = ds.cases[k]
    Y = build_admittance(case).entries
    rule = DispatchRule(case)
    out = []
    for i, s in enumerate(ds.test[k]):
        if s.label is None:
            raise MissingLabel(f"{case.name} test sample {i} has no label")
        t0 = time.perf_counter()
        pd, qd = bus_loads(case, s.loads_p, s.loads_q)
        pg, qg, ipd, iqd = postprocess_prediction(case, Y, s.label.v.vm, s.label.v.va, pd, qd,
                                                   rule)
        out.append(PredictionRecord(k, i, s.label.v.vm, s.label.v.va, pg, qg, ipd, iqd,
                                    time.perf_counter() - t0))
    return out


def predict_testset(dnn: ElasticDnn, ds: Dataset, k: int, network_index=None):
    pred = Predictor(dnn, ds, k, network_index)
    return [pred(s, i) for i, s in enumerate(ds.test[k])]


@dataclass
class NetworkMetrics:
    name: str
    n_samples: int
    eta_opt: float
    eta_v: float
    eta_pg: float
    eta_qg: float
    eta_sl: float
    eta_pd: float
    eta_qd: float
    speedup: float | None
    oracle_time: float | None
    dnn_time: float | None
    tolerance: float = FEAS_TOL


@dataclass
class MetricsReport:
    networks: list[NetworkMetrics]
    storage: dict | None = None
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"networks": [asdict(m) for m in self.networks], "storage": self.storage,
                "notes": self.notes}


def _pct(ok: int, total: int) -> float:
    return 100.0 * ok / total if total else 100.0


def load_satisfaction(implied, requested, buses) -> np.ndarray:
    """Per-bus satisfaction max(0, 1 - |implied - requested| / max(|requested|, eps))."""
    req = requested[buses]
    return np.maximum(0.0, 1.0 - np.abs(implied[buses] - req) / np.maximum(np.abs(req), LOAD_EPS))


def compute_metrics(cases, tests, predictions, tol: float = FEAS_TOL,
                    timing: bool = True) -> MetricsReport:
    """Aggregate metrics per network.

    ``tests[k]`` holds labelled samples and ``predictions[k]`` one record per
    sample. Constraint percentages count (sample, constraint) pairs; the load
    metrics average over samples and the non-generator buses with a nonzero
    active (resp. reactive) load.
    """
    report = []
    for case, samples, preds in zip(cases, tests, predictions):
        if len(samples) != len(preds):
            raise MissingLabel(f"{case.name}: {len(preds)} predictions for {len(samples)} samples")
        mats = branch_admittances(case)
        gens = set(case.gen_bus.tolist())
        p_buses = np.array([b for b in case.p_load_buses if b not in gens], dtype=int)
        q_buses = np.array([b for b in case.q_load_buses if b not in gens], dtype=int)
        gaps, sat_p, sat_q = [], [], []
        counts = {f: [0, 0] for f in ("pg_limits", "qg_limits", "v_limits", "branch_limits")}
        for s, r in zip(samples, preds):
            if s.label is None:
                raise MissingLabel(f"{case.name}: unlabelled test sample")
            c_star = s.label.objective
            gaps.append(abs(objective(case, r.pg) - c_star) / abs(c_star))
            rep = evaluate_constraints(case, VoltageSolution(r.vm, r.va), r.pg, r.qg, tol, mats)
            for f in counts:
                fam = getattr(rep, f)
                counts[f][0] += fam.n_satisfied
                counts[f][1] += fam.count
            pd, qd = bus_loads(case, s.loads_p, s.loads_q)
            sat_p.append(load_satisfaction(r.implied_pd, pd, p_buses))
            sat_q.append(load_satisfaction(r.implied_qd, qd, q_buses))
        sat_p = np.concatenate(sat_p) if sat_p else np.zeros(0)
        sat_q = np.concatenate(sat_q) if sat_q else np.zeros(0)
        t_oracle = t_dnn = speed = None
        if timing and samples:
            times = [s.label.solve_time for s in samples]
            if all(t is not None for t in times):
                t_oracle = float(np.mean(times))
                t_dnn = float(np.mean([r.dnn_time for r in preds]))
                speed = t_oracle / t_dnn if t_dnn > 0 else None
        report.append(NetworkMetrics(
            name=case.name, n_samples=len(samples),
            eta_opt=100.0 * float(np.mean(gaps)) if gaps else 0.0,
            eta_pg=_pct(*counts["pg_limits"]), eta_qg=_pct(*counts["qg_limits"]),
            eta_v=_pct(*counts["v_limits"]), eta_sl=_pct(*counts["branch_limits"]),
            eta_pd=100.0 * float(sat_p.mean()) if sat_p.size else 100.0,
            eta_qd=100.0 * float(sat_q.mean()) if sat_q.size else 100.0,
            speedup=speed, oracle_time=t_oracle, dnn_time=t_dnn, tolerance=tol))
    return MetricsReport(report, notes={
        "reference": "ground truth from the built-in interior-point oracle",
        "load_eps": LOAD_EPS})


def storage_comparison(dnn: ElasticDnn, slot_maps=None, hidden_dims=None,
                       bytes_per_param: int = 4) -> dict:
    """Parameter payload of the unified model vs one standalone MLP per network."""
    slot_maps = slot_maps or (dnn.in_sizes, dnn.out_sizes)
    hidden_dims = hidden_dims or dnn.hidden_dims
    unified = param_count(dnn)
    separate = param_count_separate(slot_maps, hidden_dims)
    return {"unified_params": unified, "separate_params": separate,
            "bytes_per_param": bytes_per_param,
            "unified_bytes": unified * bytes_per_param,
            "separate_bytes": separate * bytes_per_param,
            "ratio": unified / separate}


@dataclass
class TrackingPoint:
    t: int
    network_id: int
    cost_pred: float
    cost_oracle: float

    @property
    def rel_gap(self) -> float:
        return abs(self.cost_pred - self.cost_oracle) / abs(self.cost_oracle)


def tracking_eval(dnn: ElasticDnn, ds: Dataset) -> list[TrackingPoint]:
    """Predicted vs oracle cost at every slot of a tracking dataset, in time order."""
    if ds.schedule is None:
        raise ValueError("dataset has no slot schedule; build it with generate_tracking_dataset")
    points = []
    for k in range(len(ds.cases)):
        pred = Predictor(dnn, ds, k)
        for s in ds.test[k]:
            if s.label is None:
                raise MissingLabel(f"slot {s.slot} has no oracle label")
            r = pred(s)
            points.append(TrackingPoint(s.slot, k, objective(ds.cases[k], r.pg),
                                        s.label.objective))
    covered = {p.t for p in points}
    missing = [t for t in range(len(ds.schedule)) if t not in covered]
    if missing:
        raise MissingLabel(f"{len(missing)} slots lack oracle labels, first {missing[:5]}")
    return sorted(points, key=lambda p: p.t)


def tracking_csv(points: list[TrackingPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "network_id", "cost_pred", "cost_oracle"])
    for p in points:
        w.writerow([p.t, p.network_id, repr(p.cost_pred), repr(p.cost_oracle)])
    return buf.getvalue()
