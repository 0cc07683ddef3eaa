"""Load sampling, oracle labelling, slot layouts, scaling and dataset files."""
from __future__ import annotations

import datetime as _dt
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid_model import NetworkCase, load_case, write_case
from .opf import OPTIMAL, OpfProblem, OpfSolution, SolverOptions, solve_opf
from .powerflow import VoltageSolution

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAX_FAILURE_RATE = 0.10


class TooFewLabeled(RuntimeError):
    pass


class InvalidSlotMap(ValueError):
    pass


class UnfittedDimension(ValueError):
    pass


@dataclass
class LoadSample:
    network_id: int
    loads_p: np.ndarray  # over case.p_load_buses
    loads_q: np.ndarray  # over case.q_load_buses
    label: OpfSolution | None = None
    slot: int | None = None


def bus_loads(case: NetworkCase, loads_p, loads_q):
    """Expand slot-ordered load vectors back to per-bus (pd, qd) arrays."""
    pd = np.zeros(case.n_bus)
    qd = np.zeros(case.n_bus)
    pd[case.p_load_buses] = loads_p
    qd[case.q_load_buses] = loads_q
    return pd, qd


def sample_uniform_loads(case: NetworkCase, load_range=(0.9, 1.1), n: int = 1, seed=0,
                         network_id: int = 0, base_scale: float = 1.0) -> list[LoadSample]:
    """Scale each load bus by an independent U[lo, hi] factor (same factor for P and Q)."""
    lo, hi = load_range
    if not 0 < lo <= hi:
        raise ValueError(f"invalid load range {load_range}")
    rng = np.random.default_rng(seed)
    factors = rng.uniform(lo, hi, size=(n, case.n_bus))
    pd0 = case.pd_pu * base_scale
    qd0 = case.qd_pu * base_scale
    pb, qb = case.p_load_buses, case.q_load_buses
    return [LoadSample(network_id, pd0[pb] * f[pb], qd0[qb] * f[qb]) for f in factors]


# --------------------------------------------------------------------------
# slot layout


@dataclass
class SlotLayout:
    """Positions of loads and voltages inside the elastic input/output vectors.

    Network k's input is the concatenation over blocks j <= k of the active
    loads of its P-load buses ``[n^P_{j-1}, n^P_j)`` followed by the reactive
    loads of its Q-load buses ``[n^Q_{j-1}, n^Q_j)``; the output stacks, per
    block, voltage magnitudes then angles of buses ``[N_{j-1}, N_j)`` in slot
    order. For nested networks this is exactly U_k = [U_{k-1}; u_k].
    """
    in_sizes: tuple[int, ...]
    out_sizes: tuple[int, ...]
    in_index: list[np.ndarray]   # gather from concat(loads_p, loads_q)
    out_index: list[np.ndarray]  # gather from concat(vm, va) in bus order
    va_mask: np.ndarray          # over the largest output vector

    @classmethod
    def from_cases(cls, cases: list[NetworkCase]) -> "SlotLayout":
        nP = [len(c.p_load_buses) for c in cases]
        nQ = [len(c.q_load_buses) for c in cases]
        nB = [c.n_bus for c in cases]
        for counts, what in ((nP, "P-load"), (nQ, "Q-load")):
            if any(x > y for x, y in zip(counts, counts[1:])):
                raise InvalidSlotMap(f"{what} counts must be nondecreasing, got {counts}")
        in_sizes = tuple(p + q for p, q in zip(nP, nQ))
        if any(x >= y for x, y in zip(in_sizes, in_sizes[1:])) or in_sizes[0] == 0:
            raise InvalidSlotMap(f"input widths must be positive and strictly increasing: {in_sizes}")
        if any(x >= y for x, y in zip(nB, nB[1:])):
            raise InvalidSlotMap(f"bus counts must be strictly increasing: {nB}")
        in_index, out_index = [], []
        for k, case in enumerate(cases):
            bounds_p = [0] + nP[:k + 1]
            bounds_q = [0] + nQ[:k + 1]
            bounds_b = [0] + nB[:k + 1]
            idx_in, idx_out = [], []
            order = np.array(case.slot_order)
            for j in range(k + 1):
                idx_in.append(np.arange(bounds_p[j], bounds_p[j + 1]))
                idx_in.append(nP[k] + np.arange(bounds_q[j], bounds_q[j + 1]))
                buses = order[bounds_b[j]:bounds_b[j + 1]]
                idx_out.append(buses)
                idx_out.append(case.n_bus + buses)
            in_index.append(np.concatenate(idx_in).astype(int))
            out_index.append(np.concatenate(idx_out).astype(int))
        va_mask = np.concatenate([
            np.repeat([False, True], nB[j] - ([0] + nB)[j]) for j in range(len(cases))])
        return cls(in_sizes, tuple(2 * n for n in nB), in_index, out_index, va_mask)

    def input_vector(self, k: int, loads_p, loads_q) -> np.ndarray:
        return np.concatenate([loads_p, loads_q])[self.in_index[k]]

    def output_vector(self, k: int, vm, va) -> np.ndarray:
        return np.concatenate([vm, va])[self.out_index[k]]

    def voltages(self, k: int, y) -> tuple[np.ndarray, np.ndarray]:
        """Inverse of :meth:`output_vector`: per-bus (vm, va)."""
        nb = self.out_sizes[k] // 2
        full = np.empty(2 * nb)
        full[self.out_index[k]] = y
        return full[:nb], full[nb:]


# --------------------------------------------------------------------------
# scaling


@dataclass
class Scaler:
    """Per-network min-max ranges for inputs and targets (layout order)."""
    in_lo: list[np.ndarray] = field(default_factory=list)
    in_hi: list[np.ndarray] = field(default_factory=list)
    out_lo: list[np.ndarray] = field(default_factory=list)
    out_hi: list[np.ndarray] = field(default_factory=list)

    def _range(self, k: int, kind: str):
        lo, hi = (self.in_lo, self.in_hi) if kind == "input" else (self.out_lo, self.out_hi)
        if kind not in ("input", "target"):
            raise ValueError(f"unknown kind {kind!r}")
        if k >= len(lo) or lo[k] is None:
            raise UnfittedDimension(f"no {kind} range fitted for network {k}")
        return lo[k], hi[k]

    def to_dict(self) -> dict:
        return {name: [None if a is None else a.tolist() for a in getattr(self, name)]
                for name in ("in_lo", "in_hi", "out_lo", "out_hi")}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(**{name: [None if a is None else np.asarray(a, dtype=float) for a in d[name]]
                      for name in ("in_lo", "in_hi", "out_lo", "out_hi")})


def apply_scaler(scaler: Scaler, k: int, x, kind: str = "input", inverse: bool = False):
    """Map x -> (x - lo) / (hi - lo), or back when ``inverse``; no clamping."""
    lo, hi = scaler._range(k, kind)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != lo.shape[0]:
        raise UnfittedDimension(f"vector of length {x.shape[-1]} but {kind} range of network "
                                f"{k} has {lo.shape[0]} dimensions")
    if inverse:
        return lo + x * (hi - lo)
    return (x - lo) / (hi - lo)


def invert_scaler(scaler: Scaler, k: int, y, kind: str = "target"):
    return apply_scaler(scaler, k, y, kind, inverse=True)


def _widened(lo, hi, margin):
    span = np.maximum(hi - lo, 1e-3)
    return lo - margin * span, hi + margin * span


def fit_scaler(cases, layout: SlotLayout, train: list[list[LoadSample]],
               angle_margin: float = 0.1, vm_range: str = "data") -> Scaler:
    """Min-max ranges fitted on the training split of every network.

    Inputs use the train min/max. Angles use the train min/max widened by
    ``angle_margin`` of their span. Magnitudes use either the bus limits
    (``vm_range="limits"``) or the train min/max widened the same way and then
    clipped to [vmin, vmax] (``"data"``); both keep every sigmoid output inside
    the voltage limits, the latter with far finer resolution.
    """
    if vm_range not in ("data", "limits"):
        raise ValueError(f"vm_range must be 'data' or 'limits', got {vm_range!r}")
    sc = Scaler()
    for k, (case, samples) in enumerate(zip(cases, train)):
        if not samples:
            for part in (sc.in_lo, sc.in_hi, sc.out_lo, sc.out_hi):
                part.append(None)
            continue
        U = np.array([layout.input_vector(k, s.loads_p, s.loads_q) for s in samples])
        lo, hi = U.min(axis=0), U.max(axis=0)
        flat = (hi - lo) <= 1e-12 * np.maximum(np.abs(lo), 1.0)
        lo = np.where(flat, lo - 0.5 * np.maximum(np.abs(lo), 1e-3), lo)
        hi = np.where(flat, hi + 0.5 * np.maximum(np.abs(hi), 1e-3), hi)
        sc.in_lo.append(lo)
        sc.in_hi.append(hi)

        va = np.array([s.label.v.va for s in samples])
        a_lo, a_hi = _widened(va.min(axis=0), va.max(axis=0), angle_margin)
        if vm_range == "limits":
            m_lo, m_hi = case.vmin, case.vmax
        else:
            vm = np.array([s.label.v.vm for s in samples])
            m_lo, m_hi = _widened(vm.min(axis=0), vm.max(axis=0), angle_margin)
            m_lo = np.clip(m_lo, case.vmin, case.vmax)
            m_hi = np.clip(m_hi, case.vmin, case.vmax)
            # a bus pinned at a limit over the whole train set still needs a range
            pinned = m_hi - m_lo < 1e-6
            m_lo = np.where(pinned & (m_hi >= case.vmax), case.vmax - 1e-3, m_lo)
            m_hi = np.where(pinned & (m_lo <= case.vmin), case.vmin + 1e-3, m_hi)
        sc.out_lo.append(layout.output_vector(k, m_lo, a_lo))
        sc.out_hi.append(layout.output_vector(k, m_hi, a_hi))
    return sc


# --------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    cases: list[NetworkCase]
    train: list[list[LoadSample]]
    test: list[list[LoadSample]]
    scaler: Scaler
    layout: SlotLayout
    provenance: dict = field(default_factory=dict)
    schedule: list[int] | None = None  # tracking only: network index of every slot

    def arrays(self, k: int, split: str = "train", scaled: bool = True):
        """(U, X) matrices for network k in layout order."""
        samples = self.train[k] if split == "train" else self.test[k]
        n_in, n_out = self.layout.in_sizes[k], self.layout.out_sizes[k]
        U = np.array([self.layout.input_vector(k, s.loads_p, s.loads_q) for s in samples])
        X = np.array([self.layout.output_vector(k, s.label.v.vm, s.label.v.va) for s in samples])
        U, X = U.reshape(-1, n_in), X.reshape(-1, n_out)
        if scaled:
            U = apply_scaler(self.scaler, k, U, "input")
            X = apply_scaler(self.scaler, k, X, "target")
        return U, X


def _label_chunk(args):
    case, loads, opts = args
    prob = None
    out = []
    for pd, qd in loads:
        if prob is None:
            prob = OpfProblem(case, pd, qd)
        sol = solve_opf(case, pd, qd, opts, problem=prob)
        sol.multipliers = {}
        out.append(sol)
    return out


def label_samples(case: NetworkCase, samples: list[LoadSample], opts: SolverOptions,
                  jobs: int = 1, chunk: int = 64) -> list[OpfSolution]:
    """Run the oracle on every sample; results come back in input order for any ``jobs``."""
    loads = [bus_loads(case, s.loads_p, s.loads_q) for s in samples]
    chunks = [(case, loads[i:i + chunk], opts) for i in range(0, len(loads), chunk)]
    if jobs > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_label_chunk, chunks))
    else:
        parts = [_label_chunk(c) for c in chunks]
    return [sol for part in parts for sol in part]


def _attach(case, samples, sols, what):
    ok = []
    for s, sol in zip(samples, sols):
        if sol.status == OPTIMAL:
            s.label = sol
            ok.append(s)
    failed = len(samples) - len(ok)
    if failed:
        logger.info("%s %s: %d/%d oracle failures dropped", case.name, what, failed, len(samples))
    if samples and failed > MAX_FAILURE_RATE * len(samples):
        raise TooFewLabeled(f"{case.name}: {failed} of {len(samples)} {what} samples failed "
                            f"(limit {MAX_FAILURE_RATE:.0%})")
    return ok, failed


def generate_dataset(cases: list[NetworkCase], n_per_network: int, split_fraction: float = 0.8,
                     seed: int = 0, opts: SolverOptions | None = None,
                     load_range=(0.9, 1.1), jobs: int = 1, vm_range: str = "data") -> Dataset:
    opts = opts or SolverOptions()
    layout = SlotLayout.from_cases(cases)
    train, test, failures = [], [], []
    for k, case in enumerate(cases):
        samples = sample_uniform_loads(case, load_range, n_per_network, seed=[seed, k],
                                       network_id=k)
        sols = label_samples(case, samples, opts, jobs)
        ok, failed = _attach(case, samples, sols, "sampled")
        failures.append(failed)
        perm = np.random.default_rng([seed, k, 1]).permutation(len(ok))
        n_train = int(round(split_fraction * len(ok)))
        train.append([ok[i] for i in perm[:n_train]])
        test.append([ok[i] for i in perm[n_train:]])
    scaler = fit_scaler(cases, layout, train, vm_range=vm_range)
    prov = {"kind": "uniform", "vm_range": vm_range, "seed": seed, "n_per_network": n_per_network,
            "split_fraction": split_fraction, "load_range": list(load_range),
            "oracle": opts.to_dict(), "oracle_failures": failures,
            "generated_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")}
    return Dataset(list(cases), train, test, scaler, layout, prov)


def daily_profile(swing: float = 0.54, slots: int = 288) -> np.ndarray:
    """Synthetic double-peaked daily load multiplier spanning exactly ``swing``.

    Night trough, a morning peak near 10:30 and a larger evening peak near
    19:00; values lie in [1 - swing/2, 1 + swing/2].
    """
    if not 0 <= swing < 1:
        raise ValueError(f"swing must lie in [0, 1), got {swing}")
    if slots < 1:
        raise ValueError("slots must be >= 1")
    if swing == 0 or slots == 1:
        return np.ones(slots)
    hours = np.arange(slots) * 24.0 / slots
    raw = (0.75 * np.exp(-0.5 * ((hours - 10.5) / 2.2) ** 2)
           + 1.0 * np.exp(-0.5 * ((hours - 19.0) / 2.0) ** 2)
           + 0.25 * np.exp(-0.5 * ((hours - 15.0) / 5.0) ** 2))
    unit = (raw - raw.min()) / (raw.max() - raw.min())
    return 1.0 - swing / 2 + swing * unit


def segment_schedule(n_slots: int, n_networks: int) -> list[int]:
    """Contiguous, near-equal partition of the slots, smallest network first."""
    return [k for k, part in enumerate(np.array_split(np.arange(n_slots), n_networks))
            for _ in part]


def generate_tracking_dataset(cases: list[NetworkCase], profile, per_slot_n: int, seed: int = 0,
                              opts: SolverOptions | None = None, load_range=(0.9, 1.1),
                              jobs: int = 1, vm_range: str = "data") -> Dataset:
    """Time-varying set for an expanding network; ``Dataset.schedule`` maps slots to networks.

    Training samples are drawn around every slot's base load (case base times
    the profile value); the exact slot base loads form each network's test
    trajectory, tagged with their slot number.
    """
    opts = opts or SolverOptions()
    profile = np.asarray(profile, dtype=float)
    layout = SlotLayout.from_cases(cases)
    schedule = segment_schedule(len(profile), len(cases))
    train, test = [], []
    failures = []
    for k, case in enumerate(cases):
        slots = [t for t, net in enumerate(schedule) if net == k]
        tr, te = [], []
        for t in slots:
            if per_slot_n:
                tr += sample_uniform_loads(case, load_range, per_slot_n, seed=[seed, k, t],
                                           network_id=k, base_scale=profile[t])
            s = LoadSample(k, case.pd_pu[case.p_load_buses] * profile[t],
                           case.qd_pu[case.q_load_buses] * profile[t], slot=t)
            te.append(s)
        tr_ok, f1 = _attach(case, tr, label_samples(case, tr, opts, jobs), "training")
        te_ok, f2 = _attach(case, te, label_samples(case, te, opts, jobs), "trajectory")
        failures.append(f1 + f2)
        train.append(tr_ok)
        test.append(te_ok)
    scaler = fit_scaler(cases, layout, train, vm_range=vm_range)
    prov = {"kind": "tracking", "vm_range": vm_range, "seed": seed, "per_slot_n": per_slot_n,
            "load_range": list(load_range), "slots": len(profile),
            "profile": profile.tolist(), "oracle": opts.to_dict(), "oracle_failures": failures,
            "generated_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")}
    return Dataset(list(cases), train, test, scaler, layout, prov, schedule)


# --------------------------------------------------------------------------
# files


def _record(s: LoadSample, timing: bool) -> dict:
    sol = s.label
    rec = {"loads_p": s.loads_p.tolist(), "loads_q": s.loads_q.tolist(),
           "vm": sol.v.vm.tolist(), "va": sol.v.va.tolist(),
           "pg": sol.pg.tolist(), "qg": sol.qg.tolist(), "objective": sol.objective,
           "solve_time": sol.solve_time if timing else None}
    if s.slot is not None:
        rec["slot"] = s.slot
    return rec


def _sample(rec: dict, k: int) -> LoadSample:
    sol = OpfSolution(v=VoltageSolution(vm=rec["vm"], va=rec["va"]),
                      pg=np.array(rec["pg"]), qg=np.array(rec["qg"]),
                      objective=rec["objective"], status=OPTIMAL, iterations=0,
                      solve_time=rec["solve_time"])
    return LoadSample(k, np.array(rec["loads_p"], dtype=float),
                      np.array(rec["loads_q"], dtype=float), sol, rec.get("slot"))


def save_dataset(ds: Dataset, directory, provenance: bool = True) -> list[Path]:
    """Write ``<name>.train.jsonl``/``<name>.test.jsonl`` per network, case files and
    ``manifest.json``. With ``provenance=False`` wall-clock fields are written as null so
    reruns are byte-identical."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    networks = []
    for k, case in enumerate(ds.cases):
        case_file = d / f"{case.name}.m"
        case_file.write_text(write_case(case))
        for split, samples in (("train", ds.train[k]), ("test", ds.test[k])):
            p = d / f"{case.name}.{split}.jsonl"
            with p.open("w") as fh:
                for s in samples:
                    fh.write(json.dumps(_record(s, provenance)) + "\n")
            written.append(p)
        networks.append({"name": case.name, "case_file": case_file.name,
                         "n_train": len(ds.train[k]), "n_test": len(ds.test[k])})
    prov = dict(ds.provenance)
    if not provenance:
        prov["generated_at"] = None
    manifest = {"format_version": FORMAT_VERSION, "networks": networks,
                "in_sizes": list(ds.layout.in_sizes), "out_sizes": list(ds.layout.out_sizes),
                "scaler": ds.scaler.to_dict(),
                "provenance": prov}
    if ds.schedule is not None:
        sched = d / "schedule.json"
        sched.write_text(json.dumps({"slots": len(ds.schedule), "network": ds.schedule}) + "\n")
        written.append(sched)
    mpath = d / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=1) + "\n")
    written.append(mpath)
    return written


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format {manifest.get('format_version')}")
    cases, train, test = [], [], []
    for k, net in enumerate(manifest["networks"]):
        case = load_case(d / net["case_file"])
        cases.append(case)
        for split, bucket in (("train", train), ("test", test)):
            with (d / f"{net['name']}.{split}.jsonl").open() as fh:
                bucket.append([_sample(json.loads(line), k) for line in fh if line.strip()])
    layout = SlotLayout.from_cases(cases)
    scaler = Scaler.from_dict(manifest["scaler"])
    schedule = None
    if (d / "schedule.json").exists():
        schedule = json.loads((d / "schedule.json").read_text())["network"]
    return Dataset(cases, train, test, scaler, layout, manifest["provenance"], schedule)
