"""First and second derivatives of bus injections and branch flows in polar coordinates.

All matrices are dense. Angles come first in every (angle, magnitude) pair,
so Hessian blocks are returned as (aa, av, va, vv) where ``av`` holds
d2/(d angle d magnitude).
"""
import numpy as np


def dsbus_dv(Y, V):
    """Partial derivatives of S = diag(V) conj(Y V) w.r.t. angle and magnitude."""
    Ibus = Y @ V
    Vnorm = V / np.abs(V)
    dS_dVm = V[:, None] * np.conj(Y * Vnorm[None, :]) + np.diag(np.conj(Ibus) * Vnorm)
    dS_dVa = 1j * V[:, None] * (np.diag(np.conj(Ibus)) - np.conj(Y * V[None, :]))
    return dS_dVa, dS_dVm


def d2sbus_dv2(Y, V, lam):
    """Second derivatives of lam^T S as complex blocks.

    The real part of the result is the Hessian of lam^T P, the imaginary part
    that of lam^T Q.
    """
    Ibus = Y @ V
    A = lam * V
    C = A[:, None] * np.conj(Y * V[None, :])
    D = Y.conj().T * V[None, :]
    E = np.conj(V)[:, None] * (D * lam[None, :] - np.diag(D @ lam))
    F = C - np.diag(A * np.conj(Ibus))
    G = 1.0 / np.abs(V)
    Gaa = E + F
    Gva = 1j * G[:, None] * (E - F)
    Gav = Gva.T
    Gvv = G[:, None] * (C + C.T) * G[None, :]
    return Gaa, Gav, Gva, Gvv


def dsbr_dv(Yb, Cb, V):
    """Derivatives of one end's branch flows S = (Cb V) * conj(Yb V)."""
    Ib = Yb @ V
    Vb = Cb @ V
    Vnorm = V / np.abs(V)
    dVb_dVa = Cb * (1j * V)[None, :]
    dVb_dVm = Cb * Vnorm[None, :]
    dIb_dVa = Yb * (1j * V)[None, :]
    dIb_dVm = Yb * Vnorm[None, :]
    dS_dVa = np.conj(Ib)[:, None] * dVb_dVa + Vb[:, None] * np.conj(dIb_dVa)
    dS_dVm = np.conj(Ib)[:, None] * dVb_dVm + Vb[:, None] * np.conj(dIb_dVm)
    S = Vb * np.conj(Ib)
    return dS_dVa, dS_dVm, S


def dabr_dv(dS_dVa, dS_dVm, S):
    """Derivatives of squared flow magnitudes |S|^2."""
    dA_dVa = 2 * (S.real[:, None] * dS_dVa.real + S.imag[:, None] * dS_dVa.imag)
    dA_dVm = 2 * (S.real[:, None] * dS_dVm.real + S.imag[:, None] * dS_dVm.imag)
    return dA_dVa, dA_dVm


def d2sbr_dv2(Cb, Yb, V, lam):
    A = Yb.conj().T @ (lam[:, None] * Cb)
    B = np.conj(V)[:, None] * A * V[None, :]
    D = np.diag((A @ V) * np.conj(V))
    E = np.diag((A.T @ np.conj(V)) * V)
    F = B + B.T
    G = 1.0 / np.abs(V)
    Haa = F - D - E
    Hva = 1j * G[:, None] * (B - B.T - D + E)
    Hav = Hva.T
    Hvv = G[:, None] * F * G[None, :]
    return Haa, Hav, Hva, Hvv


def d2abr_dv2(dS_dVa, dS_dVm, S, Cb, Yb, V, lam):
    """Hessian blocks of lam^T |S|^2 (real)."""
    Saa, Sav, Sva, Svv = d2sbr_dv2(Cb, Yb, V, np.conj(S) * lam)
    la = lam[:, None]
    Haa = 2 * np.real(Saa + dS_dVa.T @ (la * np.conj(dS_dVa)))
    Hva = 2 * np.real(Sva + dS_dVm.T @ (la * np.conj(dS_dVa)))
    Hav = 2 * np.real(Sav + dS_dVa.T @ (la * np.conj(dS_dVm)))
    Hvv = 2 * np.real(Svv + dS_dVm.T @ (la * np.conj(dS_dVm)))
    return Haa, Hav, Hva, Hvv
