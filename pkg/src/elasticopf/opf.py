"""AC OPF ground-truth solver: primal-dual interior-point method in polar coordinates.

Problem layout
--------------
x = [va (nb), vm (nb), pg (ng), qg (ng)], powers in p.u., cost in $/h.

* equalities g(x) = 0: active and reactive bus balance, slack angle = 0, and
  any variable whose lower and upper bound coincide;
* inequalities h(x) <= 0: squared from/to flow magnitudes of rated branches,
  then the remaining variable bounds.

The iteration is the classic MIPS-style scheme: slacks z with h + z = 0,
Newton steps on the reduced KKT system, fraction-to-boundary step lengths and
barrier update gamma = sigma * z'mu / m.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .derivatives import d2abr_dv2, d2sbus_dv2, dabr_dv, dsbr_dv, dsbus_dv
from .grid_model import NetworkCase, branch_admittances, build_admittance
from .powerflow import VoltageSolution

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"
NUMERICAL_FAILURE = "numerical_failure"


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-6
    max_iter: int = 150
    sigma: float = 0.1
    initial_mu: float = 1.0
    step_safety: float = 0.9995
    slack_floor: float = 1e-2

    def __post_init__(self):
        if not 0 < self.sigma < 1:
            raise ValueError(f"sigma must lie in (0, 1), got {self.sigma}")
        if self.tol <= 0:
            raise ValueError(f"tol must be positive, got {self.tol}")

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class OpfSolution:
    v: VoltageSolution
    pg: np.ndarray
    qg: np.ndarray
    objective: float
    status: str
    iterations: int
    solve_time: float
    # equality multipliers (lam) and inequality multipliers (mu) in problem order
    multipliers: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def objective(case: NetworkCase, pg) -> float:
    """Total generation cost in $/h for per-unit dispatch ``pg``."""
    pg = np.asarray(pg, dtype=float)
    if pg.shape != (case.n_gen,):
        raise ValueError(f"pg has {pg.size} entries for {case.n_gen} generators")
    p_mw = pg * case.base_mva
    c = case.cost_coeffs
    return float(np.sum(c[:, 0] * p_mw**2 + c[:, 1] * p_mw + c[:, 2]))


class OpfProblem:
    """Function, gradient and Hessian evaluations for one case and load vector."""

    def __init__(self, case: NetworkCase, pd, qd):
        self.case = case
        nb, ng = case.n_bus, case.n_gen
        self.nb, self.ng = nb, ng
        self.nx = 2 * nb + 2 * ng
        self.pd = np.asarray(pd, dtype=float)
        self.qd = np.asarray(qd, dtype=float)
        if self.pd.shape != (nb,) or self.qd.shape != (nb,):
            raise ValueError("loads must have one entry per bus")
        self.Y = build_admittance(case).entries
        Yf, Yt, Cf, Ct = branch_admittances(case)
        self.lim_br = np.flatnonzero(case.smax_pu > 0)
        self.Yf, self.Yt = Yf[self.lim_br], Yt[self.lim_br]
        self.Cf, self.Ct = Cf[self.lim_br], Ct[self.lim_br]
        self.smax2 = case.smax_pu[self.lim_br] ** 2
        self.Cg = case.gen_incidence
        self.ref = case.ref

        lim = case.gen_limits_pu
        lb = np.concatenate([np.full(nb, -np.inf), case.vmin, lim["pmin"], lim["qmin"]])
        ub = np.concatenate([np.full(nb, np.inf), case.vmax, lim["pmax"], lim["qmax"]])
        self.lb, self.ub = lb, ub
        fixed = np.isfinite(lb) & (lb == ub)
        self.fixed = np.flatnonzero(fixed)
        self.lower = np.flatnonzero(np.isfinite(lb) & ~fixed)
        self.upper = np.flatnonzero(np.isfinite(ub) & ~fixed)
        self.nl_lim = len(self.lim_br)
        self.neq = 2 * nb + 1 + len(self.fixed)
        self.niq = 2 * self.nl_lim + len(self.lower) + len(self.upper)

        # constant Jacobian rows of the linear constraints
        self.dg_lin = np.zeros((1 + len(self.fixed), self.nx))
        self.dg_lin[0, self.ref] = 1.0
        self.dg_lin[1 + np.arange(len(self.fixed)), self.fixed] = 1.0
        self.dh_lin = np.zeros((len(self.lower) + len(self.upper), self.nx))
        self.dh_lin[np.arange(len(self.lower)), self.lower] = -1.0
        self.dh_lin[len(self.lower) + np.arange(len(self.upper)), self.upper] = 1.0

        base = case.base_mva
        c = case.cost_coeffs
        self.cost_q = c[:, 0] * base**2
        self.cost_l = c[:, 1] * base
        self.cost_c = c[:, 2]

    def split(self, x):
        nb, ng = self.nb, self.ng
        return x[:nb], x[nb:2 * nb], x[2 * nb:2 * nb + ng], x[2 * nb + ng:]

    def f(self, x):
        pg = self.split(x)[2]
        return float(np.sum(self.cost_q * pg**2 + self.cost_l * pg + self.cost_c))

    def df(self, x):
        pg = self.split(x)[2]
        grad = np.zeros(self.nx)
        grad[2 * self.nb:2 * self.nb + self.ng] = 2 * self.cost_q * pg + self.cost_l
        return grad

    def constraints(self, x):
        """(g, h, dg, dh) with Jacobians stored row-per-constraint."""
        nb, ng = self.nb, self.ng
        va, vm, pg, qg = self.split(x)
        V = vm * np.exp(1j * va)
        S = V * np.conj(self.Y @ V)
        gp = S.real - self.Cg @ pg + self.pd
        gq = S.imag - self.Cg @ qg + self.qd
        g = np.concatenate([gp, gq, [va[self.ref]], x[self.fixed] - self.lb[self.fixed]])

        dS_dVa, dS_dVm = dsbus_dv(self.Y, V)
        dg = np.zeros((self.neq, self.nx))
        dg[:nb, :nb] = dS_dVa.real
        dg[:nb, nb:2 * nb] = dS_dVm.real
        dg[:nb, 2 * nb:2 * nb + ng] = -self.Cg
        dg[nb:2 * nb, :nb] = dS_dVa.imag
        dg[nb:2 * nb, nb:2 * nb] = dS_dVm.imag
        dg[nb:2 * nb, 2 * nb + ng:] = -self.Cg
        dg[2 * nb:] = self.dg_lin

        dh = np.zeros((self.niq, self.nx))
        nl = self.nl_lim
        if nl:
            dSf_a, dSf_m, Sf = dsbr_dv(self.Yf, self.Cf, V)
            dSt_a, dSt_m, St = dsbr_dv(self.Yt, self.Ct, V)
            dAf_a, dAf_m = dabr_dv(dSf_a, dSf_m, Sf)
            dAt_a, dAt_m = dabr_dv(dSt_a, dSt_m, St)
            hflow = np.concatenate([np.abs(Sf)**2 - self.smax2, np.abs(St)**2 - self.smax2])
            dh[:nl, :nb], dh[:nl, nb:2 * nb] = dAf_a, dAf_m
            dh[nl:2 * nl, :nb], dh[nl:2 * nl, nb:2 * nb] = dAt_a, dAt_m
        else:
            hflow = np.zeros(0)
        hbox = np.concatenate([self.lb[self.lower] - x[self.lower],
                               x[self.upper] - self.ub[self.upper]])
        dh[2 * nl:] = self.dh_lin
        h = np.concatenate([hflow, hbox])
        return g, h, dg, dh

    def hessian(self, x, lam, mu):
        """Hessian of f + lam'g + mu'h."""
        nb, ng = self.nb, self.ng
        va, vm = self.split(x)[:2]
        V = vm * np.exp(1j * va)
        H = np.zeros((self.nx, self.nx))
        ip = 2 * nb + np.arange(ng)
        H[ip, ip] = 2 * self.cost_q

        Gp = d2sbus_dv2(self.Y, V, lam[:nb])
        Gq = d2sbus_dv2(self.Y, V, lam[nb:2 * nb])
        blocks = [a.real + b.imag for a, b in zip(Gp, Gq)]
        nl = self.nl_lim
        if nl:
            dSf_a, dSf_m, Sf = dsbr_dv(self.Yf, self.Cf, V)
            dSt_a, dSt_m, St = dsbr_dv(self.Yt, self.Ct, V)
            Hf = d2abr_dv2(dSf_a, dSf_m, Sf, self.Cf, self.Yf, V, mu[:nl])
            Ht = d2abr_dv2(dSt_a, dSt_m, St, self.Ct, self.Yt, V, mu[nl:2 * nl])
            blocks = [b + f + t for b, f, t in zip(blocks, Hf, Ht)]
        aa, av, va_, vv = blocks
        H[:nb, :nb] += aa
        H[:nb, nb:2 * nb] += av
        H[nb:2 * nb, :nb] += va_
        H[nb:2 * nb, nb:2 * nb] += vv
        return H

    def initial_point(self):
        case = self.case
        lim = case.gen_limits_pu
        vm = 0.5 * (case.vmin + case.vmax)
        pg = 0.5 * (lim["pmin"] + lim["pmax"])
        qg = 0.5 * (lim["qmin"] + lim["qmax"])
        return np.concatenate([np.zeros(self.nb), vm, pg, qg])


def kkt_conditions(x, f, df, g, h, dg, dh, lam, mu, z=None):
    """(primal, dual, complementarity) residuals in the MIPS normalisation.

    primal = max(|g|_inf, max h) / (1 + max(|x|_inf, |z|_inf))
    dual   = |df + dg'lam + dh'mu|_inf / (1 + max(|lam|_inf, |mu|_inf))
    comp   = z'mu / (1 + |x|_inf), with z = -h when slacks are not supplied
    """
    if z is None:
        z = np.maximum(-h, 0.0)
    maxh = max(float(h.max()), 0.0) if h.size else 0.0
    ng = float(np.abs(g).max()) if g.size else 0.0
    xn = float(np.abs(x).max())
    zn = float(np.abs(z).max()) if z.size else 0.0
    lamn = float(np.abs(lam).max()) if lam.size else 0.0
    mun = float(np.abs(mu).max()) if mu.size else 0.0
    Lx = df + dg.T @ lam + dh.T @ mu
    primal = max(ng, maxh) / (1 + max(xn, zn))
    dual = float(np.abs(Lx).max()) / (1 + max(lamn, mun))
    comp = float(z @ mu) / (1 + xn) if z.size else 0.0
    return primal, dual, comp


def _solution(prob, x, status, it, t0, lam, mu):
    va, vm, pg, qg = prob.split(x)
    return OpfSolution(
        v=VoltageSolution(vm=vm.copy(), va=va.copy(), converged=status == OPTIMAL),
        pg=pg.copy(), qg=qg.copy(), objective=objective(prob.case, pg), status=status,
        iterations=it, solve_time=time.perf_counter() - t0,
        multipliers={"lam": lam.copy(), "mu": mu.copy()})


def solve_opf(case: NetworkCase, pd=None, qd=None, opts: SolverOptions | None = None,
              problem: OpfProblem | None = None) -> OpfSolution:
    """Solve AC OPF for per-bus loads ``pd``/``qd`` (p.u.; default: the case's base loads).

    ``problem`` may be a pre-built :class:`OpfProblem` to reuse the network
    matrices across many load samples of the same case.
    """
    t0 = time.perf_counter()
    opts = opts or SolverOptions()
    pd = case.pd_pu if pd is None else np.asarray(pd, dtype=float)
    qd = case.qd_pu if qd is None else np.asarray(qd, dtype=float)
    if problem is None:
        prob = OpfProblem(case, pd, qd)
    else:
        prob = problem
        prob.pd, prob.qd = pd, qd

    x = prob.initial_point()
    lam = np.zeros(prob.neq)
    mu = np.zeros(prob.niq)

    # total generation must at least cover the load (losses are nonnegative)
    if np.sum(case.gen_limits_pu["pmax"]) < np.sum(pd):
        return _solution(prob, x, INFEASIBLE, 0, t0, lam, mu)

    xi, sigma = opts.step_safety, opts.sigma
    gamma = opts.initial_mu
    f = prob.f(x)
    df = prob.df(x)
    g, h, dg, dh = prob.constraints(x)
    z = np.maximum(-h, opts.slack_floor)
    mu = np.maximum(gamma / z, opts.slack_floor)
    e = np.ones(prob.niq)
    nx = prob.nx
    best_primal = np.inf

    status = MAX_ITER
    it = 0
    while True:
        primal, dual, comp = kkt_conditions(x, f, df, g, h, dg, dh, lam, mu, z)
        best_primal = min(best_primal, primal)
        if primal < opts.tol and dual < opts.tol and comp < opts.tol:
            status = OPTIMAL
            break
        if it >= opts.max_iter:
            status = INFEASIBLE if best_primal > 1e-3 else MAX_ITER
            break
        it += 1

        Lx = df + dg.T @ lam + dh.T @ mu
        Lxx = prob.hessian(x, lam, mu)
        zinv = 1.0 / z
        dh_zinv = dh.T * zinv[None, :]
        M = Lxx + (dh_zinv * mu[None, :]) @ dh
        N = Lx + dh_zinv @ (mu * h + gamma * e)
        kkt = np.block([[M, dg.T], [dg, np.zeros((prob.neq, prob.neq))]])
        rhs = -np.concatenate([N, g])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            status = NUMERICAL_FAILURE
            break
        if not np.all(np.isfinite(sol)):
            status = NUMERICAL_FAILURE
            break
        dx, dlam = sol[:nx], sol[nx:]
        dz = -h - z - dh @ dx
        dmu = -mu + zinv * (gamma * e - mu * dz)

        neg = dz < 0
        alphap = min(xi * np.min(z[neg] / -dz[neg]), 1.0) if neg.any() else 1.0
        neg = dmu < 0
        alphad = min(xi * np.min(mu[neg] / -dmu[neg]), 1.0) if neg.any() else 1.0

        x = x + alphap * dx
        z = z + alphap * dz
        lam = lam + alphad * dlam
        mu = mu + alphad * dmu
        if prob.niq:
            gamma = sigma * float(z @ mu) / prob.niq

        f = prob.f(x)
        df = prob.df(x)
        g, h, dg, dh = prob.constraints(x)
        if not (np.all(np.isfinite(x)) and np.isfinite(f)) or np.abs(x).max() > 1e10:
            status = INFEASIBLE
            break

    return _solution(prob, x, status, it, t0, lam, mu)


def kkt_residuals(case: NetworkCase, pd, qd, sol: OpfSolution):
    """Recompute (primal, dual, complementarity) residuals of ``sol`` from scratch."""
    if "lam" not in sol.multipliers:
        raise ValueError("solution carries no multipliers")
    prob = OpfProblem(case, pd, qd)
    x = np.concatenate([sol.v.va, sol.v.vm, sol.pg, sol.qg])
    g, h, dg, dh = prob.constraints(x)
    return kkt_conditions(x, prob.f(x), prob.df(x), g, h, dg, dh,
                          sol.multipliers["lam"], sol.multipliers["mu"])
