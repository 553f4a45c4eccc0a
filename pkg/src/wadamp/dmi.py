"""Data-driven matrix inequalities: assembly, feasibility, and gain synthesis.

The per-area inequality couples a quadratic storage matrix P, the local gain
row K, an input-feedthrough excess eps_ii, per-neighbor impact coefficients
eps_ij, and an output-damping level rho. Synthesis alternates a gain design
step with an exact storage step: for fixed gains and scalars, the inequality
pinned at a uniform margin is an algebraic Riccati equation, so the storage
solve is a single `solve_continuous_are` call and feasibility of a scalar
choice is decided by whether that equation admits a positive definite
solution. The scalars are then optimized by coordinate bisection against
this oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from .errors import DimensionMismatch, Infeasible, NonPositiveEpsilon, ZeroCouplingGain


@dataclass(frozen=True)
class DmiWeights:
    """Objective weights: alpha_ii on the self excess, alpha_ij per neighbor."""

    alpha_ii: float = 0.2
    alpha_ij: float = 0.2

    def validate(self, n_neighbors):
        if not 0.0 < self.alpha_ii < 1.0:
            raise ValueError("alpha_ii must lie in (0, 1)")
        if self.alpha_ij < 0.0:
            raise ValueError("alpha_ij must be nonnegative")
        if self.alpha_ii + n_neighbors * self.alpha_ij >= 1.0:
            raise ValueError("alpha_ii + sum(alpha_ij) must be < 1")


@dataclass(frozen=True)
class DmiCertificate:
    """Synthesized passivity-shortage certificate of one area."""

    P: np.ndarray
    K: np.ndarray
    eps_ii: float
    eps_ij: dict          # neighbor index -> coefficient
    rho: float
    margin: float         # lambda_max of the optimized inequality
    objective: float
    iterations: int = 0

    def neighbor_eps(self, order):
        return [self.eps_ij[j] for j in order]


@dataclass(frozen=True)
class SynthesisOptions:
    margin: float = 1e-3
    rho_cap: float = 5.0
    passes: int = 3
    lqr_q_output: float = 10.0
    lqr_r: float = 0.1
    ladder_growth: float = 10.0
    ladder_steps: int = 4
    eps_backoff: float = 1.2
    eps_ii_min: float = 1e-6
    eps_ij_min: float = 1e-9
    feas_tol: float = 1e-8


def _as_column(B):
    B = np.asarray(B, float)
    if B.ndim == 1:
        B = B[:, None]
    return B


def assemble_Mi(Abar, B, C, P, rho, eps_ii):
    """Nominal inequality matrix with the feedthrough block folded in.

    The scalar input channel is broadcast across the output dimension, so the
    rank-deficient block (P B 1' - C') replaces the paper-style column form.
    """
    if eps_ii <= 0:
        raise NonPositiveEpsilon("eps_ii must be positive")
    B = _as_column(B)
    l = C.shape[0]
    Z = P @ B @ np.ones((1, l)) - C.T
    M = Abar.T @ P + P @ Abar + rho * (C.T @ C) + (1.0 / eps_ii) * (Z @ Z.T)
    return 0.5 * (M + M.T)


def assemble_Mbar(Abar, B, C, P, rho, eps_ii, H_list, eps_list):
    """Full block matrix whose Schur complement is the reduced inequality."""
    if eps_ii <= 0 or any(e <= 0 for e in eps_list):
        raise NonPositiveEpsilon("all eps must be positive in the block form")
    B = _as_column(B)
    n = Abar.shape[0]
    l = C.shape[0]
    m = len(H_list)
    if len(eps_list) != m:
        raise DimensionMismatch("one eps per coupling block required")
    M11 = Abar.T @ P + P @ Abar + rho * (C.T @ C)
    for H in H_list:
        PH = P @ H
        M11 = M11 - (PH @ C + C.T @ PH.T)
    dim = n + l * m + l
    Mb = np.zeros((dim, dim))
    Mb[:n, :n] = M11
    for k, (H, e) in enumerate(zip(H_list, eps_list)):
        s = n + l * k
        PH = P @ H
        Mb[:n, s:s + l] = PH
        Mb[s:s + l, :n] = PH.T
        Mb[s:s + l, s:s + l] = -e * np.eye(l)
    Z = P @ B @ np.ones((1, l)) - C.T
    Mb[:n, -l:] = Z
    Mb[-l:, :n] = Z.T
    Mb[-l:, -l:] = -eps_ii * np.eye(l)
    return 0.5 * (Mb + Mb.T)


def assemble_Mprime(Abar, B, C, P, rho, eps_ii, H_list, eps_list):
    """Reduced-dimension inequality: nominal part plus coupling corrections."""
    M = assemble_Mi(Abar, B, C, P, rho, eps_ii)
    for H, e in zip(H_list, eps_list):
        PH = P @ H
        if e <= 0.0:
            if np.allclose(H, 0.0):
                continue
            raise NonPositiveEpsilon("eps_ij must be positive for a nonzero coupling")
        M = M - (PH @ C + C.T @ PH.T) + (1.0 / e) * (PH @ PH.T)
    return 0.5 * (M + M.T)


def check_feasible(M, tol=1e-8):
    """Largest-eigenvalue feasibility verdict on a (symmetrized) matrix."""
    M = 0.5 * (M + M.T)
    margin = float(np.linalg.eigvalsh(M)[-1])
    return margin <= tol, margin


def _storage_from_riccati(A, B, C, K, eps_ii, eps_list, rho, H_list, shift):
    """Solve M'(P) = -shift*I for P, or None when no PD solution exists.

    Collecting the quadratic and linear P terms turns the pinned inequality
    into A2' P + P A2 + P S P + Q = 0, an H-infinity-type Riccati handled by
    solve_continuous_are with an indefinite R = -I.
    """
    B = _as_column(B)
    n = A.shape[0]
    l = C.shape[0]
    Abar = A - B @ K
    cbar = C.T @ np.ones((l, 1))
    active = [(H, e) for H, e in zip(H_list, eps_list) if not np.allclose(H, 0.0)]
    W = (B @ cbar.T) / eps_ii
    for H, _ in active:
        W = W + H @ C
    A2 = Abar - W
    S = (l / eps_ii) * (B @ B.T)
    for H, e in active:
        if e <= 0.0:
            return None
        S = S + (1.0 / e) * (H @ H.T)
    Q = (rho + 1.0 / eps_ii) * (C.T @ C) + shift * np.eye(n)
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    Bs = V @ np.diag(np.sqrt(np.clip(w, 0.0, None)))
    try:
        P = sla.solve_continuous_are(A2, Bs, Q, -np.eye(n))
    except Exception:
        return None
    P = 0.5 * (P + P.T)
    if not np.all(np.isfinite(P)) or np.linalg.eigvalsh(P)[0] <= 0.0:
        return None
    return P


def _feasible_point(A, B, C, K, eps_ii, eps_list, rho, H_list, opts):
    P = _storage_from_riccati(A, B, C, K, eps_ii, eps_list, rho, H_list, opts.margin)
    if P is None:
        return None
    Mp = assemble_Mprime(A - _as_column(B) @ K, B, C, P, rho, eps_ii, H_list, eps_list)
    ok, margin = check_feasible(Mp, -opts.feas_tol)
    if not ok:
        return None
    return P


def _lqr_gain(A, B, q_out, r):
    n = A.shape[0]
    q = np.full(n, 0.01)
    q[0] = q[1] = q_out
    X = sla.solve_continuous_are(A, B, np.diag(q), r * np.eye(1))
    return (B.T @ X) / r


def _coordinate_optimize(A, B, C, K, H_list, weights, opts, state):
    """Gauss-Seidel passes: shrink every eps to its floor, then raise rho."""
    eps_ii, eps_list, rho = state
    iters = 0
    for _ in range(opts.passes):
        for k in range(len(eps_list)):
            if np.allclose(H_list[k], 0.0):
                eps_list[k] = 0.0
                continue
            lo, hi = opts.eps_ij_min, max(eps_list[k], opts.eps_ij_min * 10)
            for _ in range(40):
                mid = np.sqrt(lo * hi)
                trial = list(eps_list)
                trial[k] = mid
                iters += 1
                if _feasible_point(A, B, C, K, eps_ii, trial, rho, H_list, opts) is not None:
                    hi = mid
                else:
                    lo = mid
                if hi / lo < 1.05:
                    break
            eps_list[k] = hi * opts.eps_backoff
        lo, hi = opts.eps_ii_min, eps_ii
        for _ in range(40):
            mid = np.sqrt(lo * hi)
            iters += 1
            if _feasible_point(A, B, C, K, mid, eps_list, rho, H_list, opts) is not None:
                hi = mid
            else:
                lo = mid
            if hi / lo < 1.05:
                break
        eps_ii = hi * opts.eps_backoff
        iters += 1
        if _feasible_point(A, B, C, K, eps_ii, eps_list, opts.rho_cap, H_list, opts) is not None:
            rho = opts.rho_cap
        else:
            lo, hi = rho, opts.rho_cap
            for _ in range(40):
                mid = 0.5 * (lo + hi)
                iters += 1
                if _feasible_point(A, B, C, K, eps_ii, eps_list, mid, H_list, opts) is not None:
                    lo = mid
                else:
                    hi = mid
                if hi - lo < 1e-3 * max(1.0, lo):
                    break
            rho = 0.9 * lo
    return eps_ii, eps_list, rho, iters


def optimize_combined(A, B, C, H_list, neighbor_ids=None, weights=None, warm=None,
                      options=None) -> DmiCertificate:
    """Joint synthesis of (P, K, eps_ii, eps_ij, rho) for one area.

    A carries the full open-loop drift (AGC row included); H_list the coupling
    blocks toward each neighbor. Raises Infeasible when no gain level on the
    design ladder admits a certificate.
    """
    opts = options or SynthesisOptions()
    weights = weights or DmiWeights()
    weights.validate(len(H_list))
    B = _as_column(B)
    if neighbor_ids is None:
        neighbor_ids = list(range(len(H_list)))
    if len(neighbor_ids) != len(H_list):
        raise DimensionMismatch("one neighbor id per coupling block")

    candidates = []
    if warm is not None:
        candidates.append(np.atleast_2d(np.asarray(warm, float)))
    q = opts.lqr_q_output
    for _ in range(opts.ladder_steps):
        try:
            candidates.append(_lqr_gain(A, B, q, opts.lqr_r))
        except Exception:
            pass
        q *= opts.ladder_growth

    total_iters = 0
    for K in candidates:
        if K.shape != (1, A.shape[0]):
            continue
        eps_ii, eps_list, rho = 1.0, [1.0] * len(H_list), 0.01
        found = _feasible_point(A, B, C, K, eps_ii, eps_list, rho, H_list, opts)
        if found is None:
            for e_try in (10.0, 100.0):
                eps_ii = e_try
                eps_list = [e_try] * len(H_list)
                found = _feasible_point(A, B, C, K, eps_ii, eps_list, rho, H_list, opts)
                if found is not None:
                    break
        if found is None:
            continue
        eps_ii, eps_list, rho, iters = _coordinate_optimize(
            A, B, C, K, H_list, weights, opts, (eps_ii, eps_list, rho))
        total_iters += iters
        P = _feasible_point(A, B, C, K, eps_ii, eps_list, rho, H_list, opts)
        if P is None:
            continue
        Abar = A - B @ K
        Mp = assemble_Mprime(Abar, B, C, P, rho, eps_ii, H_list, eps_list)
        _, margin = check_feasible(Mp)
        asum = weights.alpha_ii + weights.alpha_ij * len(H_list)
        obj = (weights.alpha_ii * eps_ii
               + weights.alpha_ij * sum(eps_list)
               - (1.0 - asum) * rho)
        eps_map = {j: (0.0 if np.allclose(H_list[k], 0.0) else eps_list[k])
                   for k, j in enumerate(neighbor_ids)}
        return DmiCertificate(P=P, K=K, eps_ii=eps_ii, eps_ij=eps_map, rho=rho,
                              margin=margin, objective=obj, iterations=total_iters)
    raise Infeasible("no certificate found on the gain design ladder")


def optimize_local(A, B, C, weights=None, warm=None, options=None) -> DmiCertificate:
    """Nominal-only synthesis: the combined problem with no coupling blocks."""
    w = weights or DmiWeights()
    if not 0.0 < w.alpha_ii < 1.0:
        raise ValueError("alpha_ii must lie in (0, 1)")
    return optimize_combined(A, B, C, [], neighbor_ids=[], weights=w, warm=warm,
                             options=options)


def optimize_interconnection(A, B, C, cert: DmiCertificate, H_list, neighbor_ids=None,
                             weights=None, options=None):
    """Minimal per-neighbor coefficients with P and K frozen from a certificate.

    Bisects each eps_ij against the eigenvalue test directly (P fixed, no
    Riccati re-solve). Raises Infeasible when the nominal margin cannot
    absorb a coupling cross-term.
    """
    opts = options or SynthesisOptions()
    B = _as_column(B)
    if neighbor_ids is None:
        neighbor_ids = list(range(len(H_list)))
    Abar = A - B @ cert.K
    P, rho, eps_ii = cert.P, cert.rho, cert.eps_ii

    def ok(eps_list):
        Mp = assemble_Mprime(Abar, B, C, P, rho, eps_ii, H_list, eps_list)
        return check_feasible(Mp, -opts.feas_tol)[0]

    eps = []
    for k, H in enumerate(H_list):
        if np.allclose(H, 0.0):
            eps.append(0.0)
            continue
        # grow until feasible, then bisect down
        hi = 1.0
        trial = eps + [hi] + [1e6] * (len(H_list) - k - 1)
        grow = 0
        while not ok(trial):
            hi *= 10.0
            grow += 1
            trial[k] = hi
            if grow > 12:
                raise Infeasible(f"coupling block {neighbor_ids[k]} cannot be absorbed")
        lo = opts.eps_ij_min
        for _ in range(60):
            mid = np.sqrt(lo * hi)
            trial[k] = mid
            if ok(trial):
                hi = mid
            else:
                lo = mid
            if hi / lo < 1.01:
                break
        eps.append(hi * opts.eps_backoff)
    if not ok(eps + []):
        raise Infeasible("joint eps assignment infeasible at P, K fixed")
    return {j: e for j, e in zip(neighbor_ids, eps)}


def delay_robustness_bound(P, C, H, eps_ij, h_prev, margin):
    """Largest tolerable coupling-gain error preserving the inequality.

    margin is the feasibility margin of the lagged inequality (nonnegative,
    the distance of its top eigenvalue below zero). Solves the quadratic
    norm bound for the positive root.
    """
    if h_prev == 0.0:
        raise ZeroCouplingGain("delay bound undefined at zero coupling gain")
    if eps_ij <= 0:
        raise NonPositiveEpsilon("eps_ij must be positive")
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    PH = P @ H
    N = (PH @ PH.T) / (eps_ij * h_prev)
    Nprime = (2.0 * (PH @ PH.T) - eps_ij * (PH @ C + C.T @ PH.T)) / (eps_ij * h_prev)
    nn = np.linalg.norm(N, 2)
    npr = np.linalg.norm(Nprime, 2)
    if nn < 1e-300:
        return margin / npr if npr > 0 else np.inf
    if npr == 0.0:
        return float(np.sqrt(margin / nn))
    return float((-npr + np.sqrt(npr ** 2 + 4.0 * nn * margin)) / (2.0 * nn))


def storage_value(P, x):
    return 0.5 * float(x @ P @ x)


def dissipation_gap(cert: DmiCertificate, Abar, B, C, H_list, eps_list, x, u, y_neighbors):
    """V_dot minus the certified bound at one sample; nonpositive when valid.

    u is the wide-area input in output coordinates (the applied scalar is its
    channel sum); y_neighbors holds each neighbor's output deviation.
    """
    B = _as_column(B)
    l = C.shape[0]
    y = C @ x
    xdot = Abar @ x + (B * float(np.ones(l) @ u)).ravel()
    for H, yj in zip(H_list, y_neighbors):
        xdot = xdot + H @ (yj - y)
    vdot = float(x @ cert.P @ xdot)
    bound = float(u @ y) + 0.5 * cert.eps_ii * float(u @ u) - 0.5 * cert.rho * float(y @ y)
    for e, yj in zip(eps_list, y_neighbors):
        bound += 0.5 * e * float(yj @ yj)
    return vdot - bound
