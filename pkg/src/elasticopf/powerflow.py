"""Power-flow equations, Newton-Raphson solution, branch flows and limit checks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import ClassVar

import numpy as np

from .derivatives import dsbus_dv
from .grid_model import AdmittanceMatrix, NetworkCase, branch_admittances

FEAS_TOL = 1e-4


class PowerFlowError(RuntimeError):
    pass


class DimensionMismatch(ValueError):
    pass


class SingularJacobian(PowerFlowError):
    pass


class MaxIterationsExceeded(PowerFlowError):
    pass


@dataclass
class VoltageSolution:
    vm: np.ndarray
    va: np.ndarray
    converged: bool = True
    iterations: int = 0
    max_mismatch: float = 0.0

    def __post_init__(self):
        self.vm = np.asarray(self.vm, dtype=float)
        self.va = np.asarray(self.va, dtype=float)
        if self.vm.shape != self.va.shape:
            raise DimensionMismatch(f"vm has shape {self.vm.shape}, va {self.va.shape}")

    @property
    def V(self) -> np.ndarray:
        return self.vm * np.exp(1j * self.va)


def _as_matrix(Y) -> np.ndarray:
    return Y.entries if isinstance(Y, AdmittanceMatrix) else np.asarray(Y)


def _as_complex(v) -> np.ndarray:
    return v.V if isinstance(v, VoltageSolution) else np.asarray(v, dtype=complex)


def complex_injections(Y, v):
    """Net injections S_i = V_i conj(sum_j Y_ij V_j), returned as (P, Q) in p.u."""
    Y = _as_matrix(Y)
    V = _as_complex(v)
    if Y.shape != (len(V), len(V)):
        raise DimensionMismatch(f"Y is {Y.shape} but V has {len(V)} entries")
    S = V * np.conj(Y @ V)
    return S.real, S.imag


def bus_types(case: NetworkCase):
    """(ref, pv, pq) index arrays. A pv-coded bus without generators is treated as pq."""
    has_gen = np.zeros(case.n_bus, dtype=bool)
    has_gen[case.gen_bus] = True
    kinds = np.array([b.kind for b in case.buses])
    pv = np.flatnonzero((kinds == "pv") & has_gen)
    pq = np.flatnonzero(((kinds == "pq") | ((kinds == "pv") & ~has_gen)))
    return case.ref, pv, pq


def solve_powerflow(case: NetworkCase, Y, pd, qd, pg=None, qg=None, vm_set=None,
                    v0: VoltageSolution | None = None, tol: float = 1e-8, max_iter: int = 20,
                    raise_on_failure: bool = True) -> VoltageSolution:
    """Polar Newton-Raphson power flow.

    ``pd``/``qd`` are per-bus loads and ``pg``/``qg`` per-generator injections
    (p.u.; defaults are the case file's dispatch). ``vm_set`` holds per-bus
    magnitudes used at pv and slack buses, defaulting to generator setpoints.
    Generator reactive limits are not enforced.
    """
    Y = _as_matrix(Y)
    nb = case.n_bus
    pd = np.asarray(pd, dtype=float)
    qd = np.asarray(qd, dtype=float)
    if pd.shape != (nb,) or qd.shape != (nb,) or Y.shape != (nb, nb):
        raise DimensionMismatch("loads and Y must match the bus count")
    if pg is None:
        pg = np.array([g.pg0 for g in case.generators]) / case.base_mva
    if qg is None:
        qg = np.array([g.qg0 for g in case.generators]) / case.base_mva
    ref, pv, pq = bus_types(case)

    if v0 is not None:
        vm, va = v0.vm.copy(), v0.va.copy()
    else:
        vm, va = np.ones(nb), np.zeros(nb)
    if vm_set is None:
        vm_set = vm.copy()
        for g in case.generators:
            vm_set[g.bus] = g.vg
    fixed = np.concatenate([[ref], pv])
    vm[fixed] = np.asarray(vm_set)[fixed]

    Cg = case.gen_incidence
    sbus = Cg @ (np.asarray(pg) + 1j * np.asarray(qg)) - (pd + 1j * qd)
    pvpq = np.concatenate([pv, pq])
    n_a = len(pvpq)

    def mismatch(vm, va):
        V = vm * np.exp(1j * va)
        dS = V * np.conj(Y @ V) - sbus
        return np.concatenate([dS.real[pvpq], dS.imag[pq]]), V

    F, V = mismatch(vm, va)
    norm = np.max(np.abs(F)) if F.size else 0.0
    it = 0
    while norm >= tol and it < max_iter and np.isfinite(norm):
        it += 1
        dS_dVa, dS_dVm = dsbus_dv(Y, V)
        J = np.block([
            [dS_dVa.real[np.ix_(pvpq, pvpq)], dS_dVm.real[np.ix_(pvpq, pq)]],
            [dS_dVa.imag[np.ix_(pq, pvpq)], dS_dVm.imag[np.ix_(pq, pq)]],
        ])
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            if raise_on_failure:
                raise SingularJacobian(f"{case.name}: singular Jacobian at iteration {it}") from None
            break
        va[pvpq] += dx[:n_a]
        vm[pq] += dx[n_a:]
        F, V = mismatch(vm, va)
        norm = np.max(np.abs(F)) if F.size else 0.0

    converged = bool(np.isfinite(norm) and norm < tol)
    if not converged and raise_on_failure:
        raise MaxIterationsExceeded(
            f"{case.name}: no convergence after {it} iterations (mismatch {norm:.3g})")
    return VoltageSolution(vm=vm, va=va, converged=converged, iterations=it,
                           max_mismatch=float(norm))


def branch_flows(case: NetworkCase, v, matrices=None):
    """Apparent-power magnitudes (|S_from|, |S_to|) of every branch, p.u."""
    V = _as_complex(v)
    if len(V) != case.n_bus:
        raise DimensionMismatch(f"{len(V)} voltages for {case.n_bus} buses")
    Yf, Yt, Cf, Ct = matrices if matrices is not None else branch_admittances(case)
    sf = (Cf @ V) * np.conj(Yf @ V)
    st = (Ct @ V) * np.conj(Yt @ V)
    return np.abs(sf), np.abs(st)


@dataclass
class FamilyCheck:
    """Per-constraint outcome for one inequality family (one entry per box / branch)."""
    violation: np.ndarray
    tol: float

    @property
    def satisfied(self) -> np.ndarray:
        return self.violation <= self.tol

    @property
    def count(self) -> int:
        return int(self.violation.size)

    @property
    def n_satisfied(self) -> int:
        return int(self.satisfied.sum())

    @property
    def max_violation(self) -> float:
        return float(self.violation.max()) if self.violation.size else 0.0

    def to_dict(self) -> dict:
        return {"count": self.count, "satisfied": self.n_satisfied,
                "max_violation": self.max_violation}


@dataclass
class ConstraintReport:
    pg_limits: FamilyCheck
    qg_limits: FamilyCheck
    v_limits: FamilyCheck
    branch_limits: FamilyCheck
    tol: float = FEAS_TOL

    families: ClassVar[tuple[str, ...]] = ("pg_limits", "qg_limits", "v_limits", "branch_limits")

    @property
    def all_satisfied(self) -> bool:
        return all(getattr(self, f).n_satisfied == getattr(self, f).count for f in self.families)

    def to_dict(self) -> dict:
        return {"tolerance": self.tol, **{f: getattr(self, f).to_dict() for f in self.families}}


def _box_violation(x, lo, hi):
    return np.maximum(np.maximum(lo - x, x - hi), 0.0)


def evaluate_constraints(case: NetworkCase, v: VoltageSolution, pg, qg, tol: float = FEAS_TOL,
                         matrices=None) -> ConstraintReport:
    """Check generator, voltage and branch-flow limits at a candidate point (all p.u.).

    Branches with ``smax == 0`` are unlimited and excluded from the branch family.
    """
    pg = np.asarray(pg, dtype=float)
    qg = np.asarray(qg, dtype=float)
    if pg.shape != (case.n_gen,) or qg.shape != (case.n_gen,) or v.vm.shape != (case.n_bus,):
        raise DimensionMismatch("dispatch or voltage length does not match the case")
    lim = case.gen_limits_pu
    limited = case.smax_pu > 0
    if limited.any():
        sf, st = branch_flows(case, v, matrices)
        sflow = np.maximum(sf, st)[limited]
        br_viol = np.maximum(sflow - case.smax_pu[limited], 0.0)
    else:
        br_viol = np.zeros(0)
    return ConstraintReport(
        pg_limits=FamilyCheck(_box_violation(pg, lim["pmin"], lim["pmax"]), tol),
        qg_limits=FamilyCheck(_box_violation(qg, lim["qmin"], lim["qmax"]), tol),
        v_limits=FamilyCheck(_box_violation(v.vm, case.vmin, case.vmax), tol),
        branch_limits=FamilyCheck(br_viol, tol),
        tol=tol,
    )
