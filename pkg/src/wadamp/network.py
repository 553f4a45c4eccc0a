"""Bus admittance assembly, Kron reduction, and reduced-parameter estimation.

The full network carries numbered buses, branch data, and one internal node
per generator behind its transient reactance. Loads are folded in as constant
shunt admittances evaluated at 1.0 p.u. voltage, which keeps the reduction
well defined through fault switching.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatch,
    DisconnectedNetwork,
    RankDeficient,
    SingularInteriorBlock,
)
from .models import ReducedNetwork, coupling_gain


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_shunt: float = 0.0

    def __post_init__(self):
        if self.x <= 0:
            raise ValueError(f"line {self.from_bus}-{self.to_bus}: X must be positive")
        if self.r < 0:
            raise ValueError(f"line {self.from_bus}-{self.to_bus}: R must be nonnegative")


@dataclass(frozen=True)
class GeneratorBranch:
    bus: int
    xd_prime: float
    internal_voltage: float


@dataclass(frozen=True)
class FullNetwork:
    """Bus-level network: loads, branches, and generator internal branches."""

    loads: dict            # bus id -> (p_load, q_load)
    lines: tuple
    generators: tuple      # GeneratorBranch per area, order defines area order

    def __post_init__(self):
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "generators", tuple(self.generators))

    @property
    def bus_ids(self):
        ids = set()
        for ln in self.lines:
            ids.add(ln.from_bus)
            ids.add(ln.to_bus)
        for g in self.generators:
            ids.add(g.bus)
        ids.update(self.loads.keys())
        return sorted(ids)


def admittance_from_lines(fn: FullNetwork, fault_bus=None, fault_admittance=-1e4j,
                          load_overrides=None):
    """Assemble the complex bus admittance including internal generator nodes.

    Returns (Y, bus_index, internal_index): Y spans the physical buses followed
    by one internal node per generator. A faulted bus receives a large shunt.
    """
    ids = fn.bus_ids
    bus_index = {b: k for k, b in enumerate(ids)}
    nb = len(ids)
    ng = len(fn.generators)
    N = nb + ng
    Y = np.zeros((N, N), dtype=complex)
    for ln in fn.lines:
        i, j = bus_index[ln.from_bus], bus_index[ln.to_bus]
        y = 1.0 / complex(ln.r, ln.x)
        Y[i, j] -= y
        Y[j, i] -= y
        Y[i, i] += y + 0.5j * ln.b_shunt
        Y[j, j] += y + 0.5j * ln.b_shunt
    loads = dict(fn.loads)
    if load_overrides:
        loads.update(load_overrides)
    for bus, (p, q) in loads.items():
        Y[bus_index[bus], bus_index[bus]] += complex(p, -q)
    internal_index = {}
    for k, g in enumerate(fn.generators):
        i = bus_index[g.bus]
        m = nb + k
        internal_index[k] = m
        y = 1.0 / complex(0.0, g.xd_prime)
        Y[i, m] -= y
        Y[m, i] -= y
        Y[i, i] += y
        Y[m, m] += y
    if fault_bus is not None:
        if fault_bus not in bus_index:
            raise DimensionMismatch(f"fault bus {fault_bus} not in network")
        Y[bus_index[fault_bus], bus_index[fault_bus]] += fault_admittance
    _check_connected(Y)
    return Y, bus_index, internal_index


def _check_connected(Y):
    n = Y.shape[0]
    adj = np.abs(Y) > 1e-12
    seen = np.zeros(n, bool)
    stack = [0]
    seen[0] = True
    while stack:
        k = stack.pop()
        for j in np.nonzero(adj[k])[0]:
            if not seen[j]:
                seen[j] = True
                stack.append(j)
    if not seen.all():
        raise DisconnectedNetwork("bus graph is not connected")


def kron_reduce(Y, keep):
    """Schur-complement elimination of every node not in `keep`.

    Returns the reduced complex matrix ordered as `keep`.
    """
    Y = np.asarray(Y, dtype=complex)
    n = Y.shape[0]
    keep = list(keep)
    elim = [k for k in range(n) if k not in set(keep)]
    if not elim:
        return Y[np.ix_(keep, keep)]
    Ykk = Y[np.ix_(keep, keep)]
    Yke = Y[np.ix_(keep, elim)]
    Yek = Y[np.ix_(elim, keep)]
    Yee = Y[np.ix_(elim, elim)]
    try:
        X = np.linalg.solve(Yee, Yek)
    except np.linalg.LinAlgError as exc:
        raise SingularInteriorBlock("eliminated block is singular") from exc
    if not np.all(np.isfinite(X)):
        raise SingularInteriorBlock("eliminated block is numerically singular")
    return Ykk - Yke @ X


def reduce_network(fn: FullNetwork, fault_bus=None, load_overrides=None) -> ReducedNetwork:
    """Kron-reduce the full network to the generator internal nodes."""
    Y, bus_index, internal_index = admittance_from_lines(
        fn, fault_bus=fault_bus, load_overrides=load_overrides)
    keep = [internal_index[k] for k in range(len(fn.generators))]
    Yred = kron_reduce(Y, keep)
    E = np.array([g.internal_voltage for g in fn.generators])
    return ReducedNetwork(G=Yred.real, B=Yred.imag, E=E)


class VoltageReconstructor:
    """Bus-voltage recovery for one network condition, reusable across samples.

    Eliminated-node voltages follow from zero injection at non-generator
    nodes: V_e = -Y_ee^-1 Y_ek V_k with V_k the internal phasors.
    """

    def __init__(self, fn: FullNetwork, fault_bus=None, load_overrides=None):
        self.fn = fn
        Y, bus_index, internal_index = admittance_from_lines(
            fn, fault_bus=fault_bus, load_overrides=load_overrides)
        keep = [internal_index[k] for k in range(len(fn.generators))]
        elim = [k for k in range(Y.shape[0]) if k not in set(keep)]
        self._bus_index = bus_index
        self._elim = elim
        self._keep = keep
        self._Yee_inv_Yek = np.linalg.solve(Y[np.ix_(elim, elim)], Y[np.ix_(elim, keep)])
        self._E = np.array([g.internal_voltage for g in fn.generators])

    def voltages(self, delta):
        Vk = self._E * np.exp(1j * np.asarray(delta, float))
        Ve = -self._Yee_inv_Yek @ Vk
        volts = {}
        for bus, k in self._bus_index.items():
            volts[bus] = Ve[self._elim.index(k)] if k in self._elim else Vk[self._keep.index(k)]
        return volts


def bus_voltages(fn: FullNetwork, delta, fault_bus=None, load_overrides=None):
    """One-shot bus-voltage recovery (see VoltageReconstructor)."""
    return VoltageReconstructor(fn, fault_bus, load_overrides).voltages(delta)


def line_flow(fn: FullNetwork, volts, from_bus, to_bus):
    """Active power entering the branch at from_bus."""
    for ln in fn.lines:
        if {ln.from_bus, ln.to_bus} == {from_bus, to_bus}:
            y = 1.0 / complex(ln.r, ln.x)
            va = volts[from_bus]
            vb = volts[to_bus]
            s = va * np.conj(y * (va - vb) + 0.5j * ln.b_shunt * va)
            return float(s.real)
    raise DimensionMismatch(f"no line {from_bus}-{to_bus} in network")


@dataclass(frozen=True)
class MeasurementWindow:
    """Sampled (E, delta, P, Q) series used for reduced-parameter fitting."""

    E: np.ndarray        # (T, n)
    delta: np.ndarray    # (T, n)
    pg: np.ndarray       # (T, n)
    qg: np.ndarray       # (T, n)
    sample_period: float

    def __post_init__(self):
        for name in ("E", "delta", "pg", "qg"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), float))
        if not (self.E.shape == self.delta.shape == self.pg.shape == self.qg.shape):
            raise DimensionMismatch("window arrays must share one (T, n) shape")

    @property
    def nsamples(self):
        return self.E.shape[0]

    @property
    def nareas(self):
        return self.E.shape[1]


def _pair_index(n):
    pairs = [(i, j) for i in range(n) for j in range(i, n)]
    return pairs, {p: k for k, p in enumerate(pairs)}


def estimate_reduced_params(window: MeasurementWindow, rank_rtol=1e-8):
    """Least-squares fit of the symmetric reduced (G, B) from a window.

    Stacks the active and reactive flow equations over all samples with one
    shared unknown per (i, j) pair. Returns (G, B, residual 2-norm).
    """
    n = window.nareas
    pairs, pidx = _pair_index(n)
    npairs = len(pairs)
    rows = []
    rhs = []
    for t in range(window.nsamples):
        E = window.E[t]
        dl = window.delta[t]
        for i in range(n):
            rp = np.zeros(2 * npairs)
            rq = np.zeros(2 * npairs)
            for j in range(n):
                dij = dl[i] - dl[j]
                k = pidx[(min(i, j), max(i, j))]
                ee = E[i] * E[j]
                rp[k] += ee * np.cos(dij)
                rp[npairs + k] += ee * np.sin(dij)
                rq[k] += ee * np.sin(dij)
                rq[npairs + k] += -ee * np.cos(dij)
            rows.append(rp)
            rhs.append(window.pg[t, i])
            rows.append(rq)
            rhs.append(window.qg[t, i])
    A = np.asarray(rows)
    b = np.asarray(rhs)
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] < rank_rtol * sv[0]:
        raise RankDeficient(
            f"regressor condition {sv[0] / max(sv[-1], 1e-300):.2e}; widen the window")
    theta, res, *_ = np.linalg.lstsq(A, b, rcond=None)
    G = np.zeros((n, n))
    B = np.zeros((n, n))
    for k, (i, j) in enumerate(pairs):
        G[i, j] = G[j, i] = theta[k]
        B[i, j] = B[j, i] = theta[npairs + k]
    residual = float(np.linalg.norm(A @ theta - b))
    return G, B, residual


def synthesize_window(net: ReducedNetwork, deltas, sample_period=0.02,
                      noise_sigma=0.0, rng=None):
    """Build a measurement window from a reduced network at given angle samples.

    Gaussian noise of the given sigma, when requested, lands on the measured
    injections and angles alike.
    """
    from .models import electrical_power

    deltas = np.atleast_2d(np.asarray(deltas, float))
    T, n = deltas.shape
    if n != net.n:
        raise DimensionMismatch("angle samples must have one column per area")
    pg = np.empty((T, n))
    qg = np.empty((T, n))
    for t in range(T):
        pg[t], qg[t] = electrical_power(net, deltas[t])
    E = np.tile(net.E, (T, 1))
    dl = deltas.copy()
    if noise_sigma > 0:
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        pg = pg + rng.normal(0, noise_sigma, pg.shape)
        qg = qg + rng.normal(0, noise_sigma, qg.shape)
        dl = dl + rng.normal(0, noise_sigma, dl.shape)
    return MeasurementWindow(E=E, delta=dl, pg=pg, qg=qg, sample_period=sample_period)


def h_bounds(g_ij, b_ij, e_i, e_j, delta_ij_star, window, step=1e-3):
    """Range of the coupling gain over a dense sweep of the angle deviation.

    window is (lo, hi) on delta_ij - delta_ij_star; the sweep always includes
    the limit point when the window brackets zero.
    """
    lo, hi = float(window[0]), float(window[1])
    if hi < lo:
        raise DimensionMismatch("window must be (lo, hi) with lo <= hi")
    npts = max(2, int(np.ceil((hi - lo) / step)) + 1)
    devs = np.linspace(lo, hi, npts)
    if lo <= 0.0 <= hi:
        devs = np.append(devs, 0.0)
    vals = [coupling_gain(g_ij, b_ij, e_i, e_j, delta_ij_star + d, delta_ij_star)
            for d in devs]
    return float(min(vals)), float(max(vals))
