"""Communication topology, Laplacian analysis, and cooperative gain selection."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DimensionMismatch, Infeasible, NotStronglyConnected

_NULL_TOL = 1e-9


class TopologyKind(str, Enum):
    ALL_TO_ALL = "all_to_all"
    SPARSEST = "sparsest"


@dataclass(frozen=True)
class CommTopology:
    S_c: np.ndarray
    L: np.ndarray
    gamma: np.ndarray

    @property
    def n(self):
        return self.S_c.shape[0]

    @property
    def Gamma(self):
        return np.diag(self.gamma)


class GainCase(str, Enum):
    PHI_NONNEG = "phi_nonneg"
    PHI_MIXED = "phi_mixed"
    INFEASIBLE = "infeasible"


@dataclass(frozen=True)
class WideAreaDesign:
    W: np.ndarray
    Phi: np.ndarray
    lambda_a: float
    lambda_b: float
    k_c: float
    case: GainCase
    interval: tuple


def build_topology(n, kind=TopologyKind.ALL_TO_ALL, groups=None) -> CommTopology:
    """Selector matrix, Laplacian, and positive left null vector.

    All-to-all keeps the self-loops of the ones matrix; they cancel in L.
    The sparsest variant fully links members within each coherent group and
    places exactly one link between the lowest-index members of every group
    pair.
    """
    if n < 2:
        raise DimensionMismatch("need at least two areas")
    kind = TopologyKind(kind)
    if kind == TopologyKind.ALL_TO_ALL:
        S = np.ones((n, n))
    else:
        if not groups:
            raise DimensionMismatch("sparsest topology needs coherent groups")
        flat = sorted(i for g in groups for i in g)
        if flat != list(range(n)):
            raise DimensionMismatch("groups must partition 0..n-1")
        S = np.zeros((n, n))
        for g in groups:
            for i in g:
                for j in g:
                    if i != j:
                        S[i, j] = 1.0
        for a in range(len(groups)):
            for b in range(a + 1, len(groups)):
                i, j = min(groups[a]), min(groups[b])
                S[i, j] = S[j, i] = 1.0
    D = np.diag(S.sum(axis=1))
    L = D - S
    gamma = left_eigenvector(L)
    return CommTopology(S_c=S, L=L, gamma=gamma)


def left_eigenvector(L):
    """Positive left null vector of a strongly connected Laplacian, sum one."""
    L = np.asarray(L, float)
    w, V = np.linalg.eig(L.T)
    k = int(np.argmin(np.abs(w)))
    if abs(w[k]) > 1e-8:
        raise NotStronglyConnected("no null eigenvalue in the transposed Laplacian")
    gamma = np.real(V[:, k])
    s = gamma.sum()
    if abs(s) < 1e-12:
        raise NotStronglyConnected("degenerate null vector")
    gamma = gamma / s
    if np.any(gamma <= _NULL_TOL):
        raise NotStronglyConnected("left null vector is not elementwise positive")
    if np.max(np.abs(gamma @ L)) > 1e-10:
        raise NotStronglyConnected("left null vector residual too large")
    return gamma


def phi_vector(topology: CommTopology, rho, eps_matrix):
    """Output-damping surplus per area: gamma_i rho_i minus incoming eps mass.

    eps_matrix[j, i] is area j's coefficient on neighbor i's output.
    """
    g = topology.gamma
    n = topology.n
    rho = np.asarray(rho, float)
    eps_matrix = np.asarray(eps_matrix, float)
    phi = np.empty(n)
    for i in range(n):
        phi[i] = g[i] * rho[i] - sum(g[j] * eps_matrix[j, i] for j in range(n) if j != i)
    return phi


def _lambda_prime(M, tol=_NULL_TOL):
    """Smallest eigenvalue strictly above tol of the symmetrized matrix."""
    w = np.linalg.eigvalsh(0.5 * (M + M.T))
    above = w[w > tol]
    if len(above) == 0:
        raise Infeasible("matrix has no eigenvalue above the null tolerance")
    return float(above[0])


def assemble_Q(topology: CommTopology, W, rho, eps_matrix, K_c):
    """Stability certificate matrix for a diagonal cooperative gain K_c."""
    L = topology.L
    G = topology.Gamma
    K_c = np.asarray(K_c, float)
    if K_c.ndim == 1:
        K_c = np.diag(K_c)
    if np.any(np.diag(K_c) <= 0):
        raise DimensionMismatch("cooperative gains must be positive")
    W = np.asarray(W, float)
    if W.ndim == 1:
        W = np.diag(W)
    g = topology.gamma
    kc = np.diag(K_c)
    n = topology.n
    rho = np.asarray(rho, float)
    eps_matrix = np.asarray(eps_matrix, float)
    psi = np.empty(n)
    for i in range(n):
        psi[i] = g[i] * rho[i] / kc[i] - sum(
            g[j] * eps_matrix[j, i] / kc[j] for j in range(n) if j != i)
    Q = G @ L.T + L @ G - L.T @ K_c @ W @ L + np.diag(psi)
    return 0.5 * (Q + Q.T)


def select_kc(topology: CommTopology, eps_ii, rho, eps_matrix, k_c_max=10.0) -> WideAreaDesign:
    """Uniform cooperative gain inside the admissible stability interval.

    Case one (all phi nonnegative) takes half the upper bound; case two takes
    the interval midpoint. The upper end is capped at k_c_max to guard the
    W = 0 degeneracy.
    """
    eps_ii = np.asarray(eps_ii, float)
    W = np.diag(eps_ii)
    L = topology.L
    G = topology.Gamma
    phi = phi_vector(topology, rho, eps_matrix)
    lambda_a = float(np.linalg.eigvalsh(0.5 * ((L.T @ W @ L) + (L.T @ W @ L).T))[-1])
    lambda_b = _lambda_prime(G @ L.T + L @ G)
    if np.all(phi >= 0.0):
        hi = lambda_b / lambda_a if lambda_a > _NULL_TOL else np.inf
        hi = min(hi, k_c_max)
        kc = 0.5 * hi
        return WideAreaDesign(W=W, Phi=np.diag(phi), lambda_a=lambda_a,
                              lambda_b=lambda_b, k_c=kc, case=GainCase.PHI_NONNEG,
                              interval=(0.0, hi))
    disc = lambda_b ** 2 + 4.0 * lambda_a * float(phi.min())
    if phi.sum() > 0.0 and disc >= 0.0:
        if lambda_a > _NULL_TOL:
            root = np.sqrt(disc)
            lo = (lambda_b - root) / (2.0 * lambda_a)
            hi = (lambda_b + root) / (2.0 * lambda_a)
        else:
            lo = -float(phi.min()) / lambda_b
            hi = np.inf
        hi_c = min(hi, k_c_max)
        kc = 0.5 * (lo + hi_c)
        return WideAreaDesign(W=W, Phi=np.diag(phi), lambda_a=lambda_a,
                              lambda_b=lambda_b, k_c=kc, case=GainCase.PHI_MIXED,
                              interval=(lo, hi))
    return WideAreaDesign(W=W, Phi=np.diag(phi), lambda_a=lambda_a, lambda_b=lambda_b,
                          k_c=float("nan"), case=GainCase.INFEASIBLE,
                          interval=(float("nan"), float("nan")))


def cooperative_control(y, topology: CommTopology, k_c, channel_weights=(1.0, 1.0)):
    """Consensus feedback on stacked outputs; returns per-area scalar inputs.

    y is (n, 2) output deviations. Each area's vector disagreement sum is
    collapsed onto the scalar actuation channel by the channel weights.
    """
    y = np.asarray(y, float)
    n = topology.n
    if y.shape != (n, 2):
        raise DimensionMismatch(f"y must be ({n}, 2)")
    w = np.asarray(channel_weights, float)
    u = np.zeros(n)
    S = topology.S_c
    for i in range(n):
        acc = np.zeros(2)
        for j in range(n):
            if j == i:
                continue
            if S[i, j] != 0.0:
                acc += S[i, j] * (y[j] - y[i])
        u[i] = -k_c * float(w @ acc)
    return u


def cooperative_control_vec(y_own, y_neighbors, topology: CommTopology, k_c, i):
    """Output-space consensus input of area i (used by audits), possibly delayed."""
    acc = np.zeros(2)
    for j, yj in y_neighbors.items():
        if j != i and topology.S_c[i, j] != 0.0:
            acc += topology.S_c[i, j] * (np.asarray(yj) - np.asarray(y_own))
    return -k_c * acc
