"""Per-area swing-equation models, coupling gains, equilibrium, and closed-loop dynamics.

Each area is an aggregated generator, either a conventional machine (5 states:
angle deviation, speed deviation, mechanical power, governor output, AGC
integrator) or an inverter-based source emulating one (3 states). Speed
deviations are in per unit; rotor angles advance at `w_base * omega`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DimensionMismatch, NoConvergence

W_BASE_DEFAULT = 2.0 * np.pi * 60.0

# removable singularity threshold for the coupling-gain divided difference
_SING_TOL = 1e-9


class GeneratorKind(str, Enum):
    CONVENTIONAL = "conventional"
    INVERTER = "inverter"


@dataclass(frozen=True)
class GeneratorParams:
    """Physical parameters of one aggregated area.

    inertia multiplies the per-unit speed derivative; damping acts on speed.
    tau1/tau2 are the turbine and governor lags (conventional machines only).
    agc_gain is the integral-control row vector acting on the deviation state.
    """

    kind: GeneratorKind
    inertia: float
    damping: float
    xd_prime: float
    internal_voltage: float
    pg_ref: float
    tau1: float = 0.0
    tau2: float = 0.0
    agc_gain: tuple = ()

    def __post_init__(self):
        if self.inertia <= 0:
            raise ValueError("inertia must be positive")
        if self.damping < 0:
            raise ValueError("damping must be nonnegative")
        if self.internal_voltage <= 0:
            raise ValueError("internal voltage must be positive")
        if self.kind == GeneratorKind.CONVENTIONAL and (self.tau1 <= 0 or self.tau2 <= 0):
            raise ValueError("conventional machine needs positive tau1, tau2")
        n = self.nstates
        agc = tuple(self.agc_gain) if self.agc_gain else (0.0,) * n
        if len(agc) != n:
            raise DimensionMismatch(f"agc_gain must have {n} entries, got {len(agc)}")
        object.__setattr__(self, "agc_gain", agc)

    @property
    def nstates(self) -> int:
        return 5 if self.kind == GeneratorKind.CONVENTIONAL else 3


@dataclass(frozen=True)
class ReducedNetwork:
    """Generator-level equivalent admittance and internal voltage magnitudes."""

    G: np.ndarray
    B: np.ndarray
    E: np.ndarray

    def __post_init__(self):
        G = np.asarray(self.G, float)
        B = np.asarray(self.B, float)
        E = np.asarray(self.E, float)
        n = len(E)
        if G.shape != (n, n) or B.shape != (n, n):
            raise DimensionMismatch("G, B must be n x n with n = len(E)")
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "E", E)

    @property
    def n(self) -> int:
        return len(self.E)


@dataclass(frozen=True)
class Equilibrium:
    delta_star: np.ndarray
    pg_star: np.ndarray
    qg_star: np.ndarray
    alpha_star: np.ndarray


@dataclass(frozen=True)
class SystemMatrices:
    """State-space maps of one area plus its closed-loop drift Abar = A - B K."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Abar: np.ndarray


def coupling_gain(g_ij, b_ij, e_i, e_j, delta_ij, delta_ij_star):
    """Synchronizing-power divided difference between a pair of areas.

    Returns the analytic limit e_i e_j (b cos d* - g sin d*) when the angle
    difference sits on the removable singularity.
    """
    d = delta_ij - delta_ij_star
    ee = e_i * e_j
    if abs(d) < _SING_TOL:
        return ee * (b_ij * np.cos(delta_ij_star) - g_ij * np.sin(delta_ij_star))
    num = g_ij * (np.cos(delta_ij) - np.cos(delta_ij_star)) + b_ij * (
        np.sin(delta_ij) - np.sin(delta_ij_star)
    )
    return ee * num / d


def coupling_matrix(net: ReducedNetwork, delta, delta_star):
    """All pairwise coupling gains h[i, j] at the given angles (diagonal zero)."""
    delta = np.asarray(delta, float)
    delta_star = np.asarray(delta_star, float)
    n = net.n
    h = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            h[i, j] = coupling_gain(
                net.G[i, j], net.B[i, j], net.E[i], net.E[j],
                delta[i] - delta[j], delta_star[i] - delta_star[j],
            )
    return h


def electrical_power(net: ReducedNetwork, delta):
    """Active and reactive injections of every area at angles delta."""
    delta = np.asarray(delta, float)
    if delta.shape != (net.n,):
        raise DimensionMismatch("delta length must match network size")
    d = delta[:, None] - delta[None, :]
    ee = net.E[:, None] * net.E[None, :]
    pg = (ee * (net.G * np.cos(d) + net.B * np.sin(d))).sum(axis=1)
    qg = (ee * (net.G * np.sin(d) - net.B * np.cos(d))).sum(axis=1)
    return pg, qg


def solve_equilibrium(net: ReducedNetwork, pg_ref, tol=1e-12, max_iter=50) -> Equilibrium:
    """Newton solve of the reduced power-flow equilibrium.

    Area 1 is the angle reference (delta_1 = 0) and absorbs the network
    losses: the dispatch equations are enforced for areas 2..n and the
    reference area's injection is whatever the flow solution yields.
    alpha_star then accounts for the gap between injections and set points.
    """
    pg_ref = np.asarray(pg_ref, float)
    n = net.n
    if pg_ref.shape != (n,):
        raise DimensionMismatch("pg_ref length must match network size")
    delta = np.zeros(n)
    for _ in range(max_iter):
        pg, _ = electrical_power(net, delta)
        resid = pg[1:] - pg_ref[1:]
        if np.max(np.abs(resid)) < tol:
            break
        jac = _pg_jacobian(net, delta)[1:, 1:]
        try:
            step = np.linalg.solve(jac, resid)
        except np.linalg.LinAlgError as exc:
            raise NoConvergence("singular power-flow Jacobian") from exc
        if not np.all(np.isfinite(step)):
            raise NoConvergence("non-finite Newton step")
        delta[1:] -= step
    else:
        raise NoConvergence(f"equilibrium Newton did not converge in {max_iter} iterations")
    pg, qg = electrical_power(net, delta)
    return Equilibrium(delta_star=delta, pg_star=pg, qg_star=qg, alpha_star=pg - pg_ref)


def _pg_jacobian(net: ReducedNetwork, delta):
    """d pg_i / d delta_k of the reduced flow equations."""
    n = net.n
    d = delta[:, None] - delta[None, :]
    ee = net.E[:, None] * net.E[None, :]
    off = ee * (-net.G * np.sin(d) + net.B * np.cos(d))
    np.fill_diagonal(off, 0.0)
    jac = -off.copy()
    np.fill_diagonal(jac, off.sum(axis=1))
    return jac


def system_matrices(params: GeneratorParams, K, w_base=W_BASE_DEFAULT) -> SystemMatrices:
    """State-space matrices of one area and the closed-loop drift for gain K.

    The output picks the angle and speed deviations. Rotor angles advance at
    w_base times the per-unit speed deviation, so A[0, 1] = w_base.
    """
    n = params.nstates
    K = np.atleast_2d(np.asarray(K, float))
    if K.shape != (1, n):
        raise DimensionMismatch(f"K must be a length-{n} row vector")
    M, D = params.inertia, params.damping
    if params.kind == GeneratorKind.CONVENTIONAL:
        A = np.zeros((5, 5))
        A[0, 1] = w_base
        A[1, 1] = -D / M
        A[1, 2] = 1.0 / M
        A[2, 2] = -1.0 / params.tau1
        A[2, 3] = 1.0 / params.tau1
        A[3, 3] = -1.0 / params.tau2
        A[3, 4] = 1.0 / params.tau2
        A[4, :] = -np.asarray(params.agc_gain)
        B = np.zeros((5, 1))
        B[3, 0] = 1.0 / params.tau2
        C = np.zeros((2, 5))
    else:
        A = np.zeros((3, 3))
        A[0, 1] = w_base
        A[1, 1] = -D / M
        A[1, 2] = 1.0 / M
        A[2, :] = -np.asarray(params.agc_gain)
        B = np.zeros((3, 1))
        B[1, 0] = 1.0 / M
        C = np.zeros((2, 3))
    C[0, 0] = 1.0
    C[1, 1] = 1.0
    return SystemMatrices(A=A, B=B, C=C, Abar=A - B @ K)


def coupling_block(h_ij, params: GeneratorParams):
    """The n x 2 interconnection block: h_ij / M in the speed row, first column."""
    H = np.zeros((params.nstates, 2))
    H[1, 0] = h_ij / params.inertia
    return H


@dataclass
class AreaState:
    """Physical (non-deviation) state of one area."""

    delta: float
    omega: float
    pm: float = 0.0
    yg: float = 0.0
    alpha: float = 0.0


def pack_states(gens, areas):
    out = []
    for p, a in zip(gens, areas):
        if p.kind == GeneratorKind.CONVENTIONAL:
            out.extend([a.delta, a.omega, a.pm, a.yg, a.alpha])
        else:
            out.extend([a.delta, a.omega, a.alpha])
    return np.array(out)

def unpack_states(gens, vec):
    areas = []
    k = 0
    for p in gens:
        if p.kind == GeneratorKind.CONVENTIONAL:
            areas.append(AreaState(*vec[k:k + 5]))
            k += 5
        else:
            d, w, al = vec[k:k + 3]
            areas.append(AreaState(delta=d, omega=w, alpha=al))
            k += 3
    return areas


def deviation_state(params: GeneratorParams, area: AreaState, eq: Equilibrium, idx: int):
    """Deviation coordinates of one area relative to an equilibrium."""
    if params.kind == GeneratorKind.CONVENTIONAL:
        return np.array([
            area.delta - eq.delta_star[idx],
            area.omega,
            area.pm - eq.pg_star[idx],
            area.yg - eq.pg_star[idx],
            area.alpha - eq.alpha_star[idx],
        ])
    return np.array([
        area.delta - eq.delta_star[idx],
        area.omega,
        area.alpha - eq.alpha_star[idx],
    ])


def dynamics_rhs(vec, gens, net: ReducedNetwork, eq: Equilibrium, K_list, u,
                 w_base=W_BASE_DEFAULT):
    """Closed-loop state derivative for the interconnected system.

    vec packs the physical per-area states; u holds the scalar wide-area
    input applied to each area (zero-order held by the caller). The local
    feedback -K x and the AGC integral act on deviation coordinates.
    """
    u = np.asarray(u, float)
    n = len(gens)
    areas = unpack_states(gens, vec)
    delta = np.array([a.delta for a in areas])
    pg, _ = electrical_power(net, delta)
    out = np.empty_like(np.asarray(vec, float))
    k = 0
    for i, (p, a) in enumerate(zip(gens, areas)):
        x = deviation_state(p, a, eq, i)
        v = -(np.asarray(K_list[i], float) @ x).item() + u[i]
        dalpha = -(np.asarray(p.agc_gain) @ x)
        if p.kind == GeneratorKind.CONVENTIONAL:
            U = v + a.alpha + p.pg_ref
            out[k] = w_base * a.omega
            out[k + 1] = (a.pm - pg[i] - p.damping * a.omega) / p.inertia
            out[k + 2] = (a.yg - a.pm) / p.tau1
            out[k + 3] = (U - a.yg) / p.tau2
            out[k + 4] = dalpha
            k += 5
        else:
            U = v + a.alpha + p.pg_ref
            out[k] = w_base * a.omega
            out[k + 1] = (U - pg[i] - p.damping * a.omega) / p.inertia
            out[k + 2] = dalpha
            k += 3
    return out
