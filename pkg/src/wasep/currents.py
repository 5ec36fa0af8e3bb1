"""Exact bookkeeping of empirical currents on the discrete torus.

Currents are stored as signed integer flows on ordered bonds.  The pairing
of a flow ``W`` with a vector field ``F`` is ``(2 N^d)^{-1} sum_b W_b F_N(b)``
where ``F_N(b)`` is the line integral of ``F`` along the bond; for a flow of
net jump counts this is the integrated empirical current.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from fractions import Fraction

import numba
import numpy as np

from .fields import bond_line_integrals
from .lattice import Configuration, TorusGeometry

__all__ = [
    "DiscreteVectorField",
    "FourierCurrent",
    "PeriodizedPath",
    "TimeAveragedPair",
    "BinSpec",
    "LevelTwoMeasure",
    "LevelTwoAccumulator",
    "jump_counts",
    "net_flow",
    "integrated_current",
    "beckmann_flow",
    "periodize",
    "continuity_residual",
    "sobolev_norm",
    "time_averaged_pair",
    "level_two_measure",
    "exact_site_values",
]


# --------------------------------------------------------------------------
# discrete vector fields


@dataclass(frozen=True)
class DiscreteVectorField:
    """Antisymmetric function on ordered bonds."""

    geometry: TorusGeometry
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.shape != (self.geometry.n_bonds,):
            raise ValueError(f"expected {self.geometry.n_bonds} bond values, got {v.shape}")
        if np.any(v != -v[self.geometry.bond_reverse]):
            raise ValueError("vector field is not antisymmetric under bond reversal")
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, geometry: TorusGeometry) -> "DiscreteVectorField":
        return cls(geometry, np.zeros(geometry.n_bonds, dtype=np.int64))

    def __getitem__(self, bond):
        return self.values[bond]

    def __add__(self, other):
        return DiscreteVectorField(self.geometry, self.values + other.values)

    def __sub__(self, other):
        return DiscreteVectorField(self.geometry, self.values - other.values)

    def __mul__(self, c):
        return DiscreteVectorField(self.geometry, self.values * c)

    __rmul__ = __mul__

    def divergence(self) -> np.ndarray:
        """``(div W)(x) = sum_y W(x, y)`` over the ``2d`` neighbours of ``x``."""
        return self.values.reshape(self.geometry.n_sites, 2 * self.geometry.d).sum(axis=1)

    def half_total_variation(self):
        """``sum_b |W_b| / 2``, i.e. the sum over unordered bonds."""
        return abs(self.values[self.geometry.forward_bonds]).sum()

    def pair(self, F) -> float:
        """``(2 N^d)^{-1} sum_b W_b F_N(b)``; ``F`` is a callable field or per-bond integrals."""
        g = self.geometry
        FN = _bond_values(F, g)
        fwd = g.forward_bonds
        if FN.dtype == object or self.values.dtype == object:
            return sum(w * f for w, f in zip(self.values[fwd], FN[fwd])) / g.n_sites
        return float(np.dot(self.values[fwd].astype(float), FN[fwd])) / g.n_sites

    def to_csv(self, path) -> None:
        """One row per forward bond: site coordinates, axis and value."""
        g = self.geometry
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{k}" for k in range(g.d)] + ["axis", "bond", "value"])
            for b in g.forward_bonds:
                w.writerow(list(g.coords[g.bond_source[b]]) + [g.bond_direction[b] // 2, b,
                                                               self.values[b]])


def _bond_values(F, geometry: TorusGeometry) -> np.ndarray:
    if callable(F):
        return bond_line_integrals(F, geometry)
    FN = np.asarray(F)
    if FN.shape != (geometry.n_bonds,):
        raise ValueError(f"per-bond values must have shape ({geometry.n_bonds},)")
    return FN


def _site_values(f, geometry: TorusGeometry) -> np.ndarray:
    if callable(f):
        return np.asarray(f(geometry.positions))
    return np.asarray(f).ravel()


# --------------------------------------------------------------------------
# jump counts and currents


def jump_counts(traj, s: float, t: float) -> np.ndarray:
    """Number of jumps across every ordered bond during ``(s, t]``."""
    if not s < t:
        raise ValueError("need s < t")
    lo = np.searchsorted(traj.times, s, side="right")
    hi = np.searchsorted(traj.times, t, side="right")
    return np.bincount(traj.bonds[lo:hi], minlength=traj.geometry.n_bonds).astype(np.int64)


def net_flow(traj, s: float, t: float) -> DiscreteVectorField:
    """Signed net jump counts ``N^{x,y} - N^{y,x}`` over ``(s, t]``."""
    if isinstance(traj, PeriodizedPath):
        return traj.net_flow(s, t)
    g = traj.geometry
    if s == t:
        return DiscreteVectorField.zeros(g)
    c = jump_counts(traj, s, t)
    return DiscreteVectorField(g, c - c[g.bond_reverse])


def integrated_current(traj, t: float, F) -> float:
    """``<J_N(t), F>``; negative ``t`` is allowed for periodized paths."""
    if isinstance(traj, PeriodizedPath):
        return traj.integrated_current(t, F)
    if t < 0 or t > traj.T:
        raise ValueError(f"t={t} outside the horizon [0, {traj.T}]")
    return net_flow(traj, 0.0, t).pair(F)


# --------------------------------------------------------------------------
# Beckmann flows


@numba.njit(cache=True)
def _beckmann_kernel(sources, sinks, coords, nbr, N, d, W):
    n = sources.size
    used = np.zeros(sinks.size, dtype=np.bool_)
    half = N // 2
    for i in range(n):
        s = sources[i]
        best = -1
        best_dist = 1 << 60
        for j in range(sinks.size):
            if used[j]:
                continue
            dist = 0
            for k in range(d):
                a = abs(coords[s, k] - coords[sinks[j], k])
                dist += min(a, N - a)
            if dist < best_dist:
                best_dist = dist
                best = j
        used[best] = True
        z = s
        target = sinks[best]
        for k in range(d):
            delta = (coords[target, k] - coords[z, k]) % N
            if delta <= half:
                steps = delta
                direction = 2 * k
            else:
                steps = N - delta
                direction = 2 * k + 1
            for _ in range(steps):
                b = z * 2 * d + direction
                y = nbr[b]
                W[b] += 1
                W[y * 2 * d + (direction ^ 1)] -= 1
                z = y


def beckmann_flow(eta: Configuration, xi: Configuration) -> DiscreteVectorField:
    """Integer flow ``W`` with ``div W = eta - xi`` and ``sum |W| / 2 <= d N^{d+1}``.

    Sources (``eta = 1, xi = 0``) are visited in lexicographic order; each is
    matched to the nearest unmatched sink in torus ``l^1`` distance (ties go
    to the lexicographically smallest sink) and one unit is routed along the
    shortest path that moves through the axes in order.
    """
    g = eta.geometry
    if xi.geometry != g:
        raise ValueError("configurations live on different tori")
    if eta.K != xi.K:
        raise ValueError(f"particle numbers differ: {eta.K} != {xi.K}")
    diff = eta.occupancy.astype(np.int64) - xi.occupancy.astype(np.int64)
    sources = np.flatnonzero(diff > 0)
    sinks = np.flatnonzero(diff < 0)
    W = np.zeros(g.n_bonds, dtype=np.int64)
    if sources.size:
        _beckmann_kernel(sources, sinks, g.coords, np.ascontiguousarray(g.bond_target),
                         g.N, g.d, W)
    return DiscreteVectorField(g, W)


# --------------------------------------------------------------------------
# periodization


@dataclass(frozen=True)
class PeriodizedPath:
    """``T``-periodic extension of a trajectory closed by a Beckmann flow at ``kT``.

    On ``[nT, (n+1)T)`` the configuration follows the trajectory shifted by
    ``nT``; at every multiple of ``T`` the configuration jumps from
    ``eta(T)`` back to ``eta(0)`` carrying the flow ``correction``.
    """

    trajectory: object
    T: float
    correction: DiscreteVectorField

    @property
    def geometry(self) -> TorusGeometry:
        return self.trajectory.geometry

    def _split(self, t: float):
        n = int(np.floor(t / self.T))
        r = t - n * self.T
        if r >= self.T:  # guard against rounding in t / T
            n, r = n + 1, 0.0
        return n, r

    @property
    def period_flow(self) -> DiscreteVectorField:
        """Net flow accumulated over one full period, correction included."""
        return net_flow(self.trajectory, 0.0, self.T) + self.correction

    def cumulative_flow(self, t: float) -> DiscreteVectorField:
        n, r = self._split(t)
        base = self.period_flow * n
        if r > 0:
            base = base + net_flow(self.trajectory, 0.0, r)
        return base

    def net_flow(self, s: float, t: float) -> DiscreteVectorField:
        return self.cumulative_flow(t) - self.cumulative_flow(s)

    def occupancy_at(self, t: float) -> np.ndarray:
        _, r = self._split(t)
        return self.trajectory.occupancy_at(r)

    def integrated_current(self, t: float, F) -> float:
        return self.cumulative_flow(t).pair(F)

    def discrepancy(self, F) -> float:
        """``sup_t |<J(periodized)(t) - J(t), F>|`` over ``[0, T]``."""
        return abs(self.correction.pair(F))


def periodize(traj, T: float | None = None) -> PeriodizedPath:
    """Close ``traj`` restricted to ``[0, T]`` into a ``T``-periodic path."""
    T = traj.T if T is None else float(T)
    if T <= 0 or T > traj.T:
        raise ValueError(f"period {T} must lie in (0, {traj.T}]")
    base = traj.truncate(T) if T < traj.T else traj
    corr = beckmann_flow(base.configuration_at(T), base.initial)
    return PeriodizedPath(base, T, corr)


# --------------------------------------------------------------------------
# continuity equation


def continuity_residual(traj, f, s: float, t: float, grad=None):
    """``<pi(t) - pi(s), f> - <J(t) - J(s), grad f>``.

    The bond integrals of ``grad f`` are ``f(y) - f(x)`` unless an explicit
    gradient field ``grad`` is supplied, in which case they are computed by
    Gauss-Legendre quadrature.  Object arrays of site values (e.g.
    ``Fraction``) are handled in exact arithmetic.
    """
    g = traj.geometry
    fv = _site_values(f, g)
    d_occ = traj.occupancy_at(t).astype(np.int64) - traj.occupancy_at(s).astype(np.int64)
    W = net_flow(traj, s, t) if s != t else DiscreteVectorField.zeros(g)
    if grad is not None:
        gradN = bond_line_integrals(grad, g)
    elif fv.dtype == object:
        gradN = np.array([fv[y] - fv[x] for x, y in zip(g.bond_source, g.bond_target)],
                         dtype=object)
    else:
        gradN = fv[g.bond_target] - fv[g.bond_source]
    if fv.dtype == object:
        dens = sum(int(o) * v for o, v in zip(d_occ, fv) if o) / g.n_sites
        return dens - W.pair(gradN)
    return float(np.dot(d_occ, fv)) / g.n_sites - W.pair(gradN)


# --------------------------------------------------------------------------
# Fourier tables and negative Sobolev norms


@dataclass(frozen=True)
class FourierCurrent:
    """Coefficients ``J(H^{k,n})`` with ``H^{k,n}(x) = exp(2 pi i n.x) e_k``.

    ``table`` has shape ``(d, 2 n_max + 1, ..., 2 n_max + 1)``; index ``i``
    along a mode axis stands for ``n = i - n_max``.
    """

    d: int
    n_max: int
    table: np.ndarray = field(repr=False)

    def __post_init__(self):
        shape = (self.d,) + (2 * self.n_max + 1,) * self.d
        t = np.asarray(self.table, dtype=complex)
        if t.shape != shape:
            raise ValueError(f"table shape {t.shape} != {shape}")
        object.__setattr__(self, "table", t)

    @classmethod
    def zeros(cls, d: int, n_max: int) -> "FourierCurrent":
        return cls(d, n_max, np.zeros((d,) + (2 * n_max + 1,) * d, dtype=complex))

    def modes(self) -> np.ndarray:
        """Integer mode vectors, shape ``(2 n_max + 1,)*d + (d,)``."""
        r = np.arange(-self.n_max, self.n_max + 1)
        return np.stack(np.meshgrid(*([r] * self.d), indexing="ij"), axis=-1)

    def coefficient(self, k: int, n) -> complex:
        idx = tuple(int(v) + self.n_max for v in np.atleast_1d(n))
        return complex(self.table[(k,) + idx])

    def with_coefficient(self, k: int, n, value) -> "FourierCurrent":
        t = self.table.copy()
        t[(k,) + tuple(int(v) + self.n_max for v in np.atleast_1d(n))] = value
        return FourierCurrent(self.d, self.n_max, t)

    def is_conjugate_symmetric(self, tol: float = 1e-12) -> bool:
        flipped = self.table[(slice(None),) + (slice(None, None, -1),) * self.d]
        return bool(np.max(np.abs(self.table - np.conj(flipped)), initial=0.0) <= tol)

    @classmethod
    def from_flow(cls, W: DiscreteVectorField, n_max: int | None = None) -> "FourierCurrent":
        """Fourier table of the current functional of the flow ``W``.

        Along the forward bond from ``x`` to ``x + e_k / N`` the line
        integral of ``H^{k,n}`` is ``exp(2 pi i n.x) (e^{i theta} - 1) /
        (i theta N)`` with ``theta = 2 pi n_k / N`` (``1 / N`` when ``n_k = 0``).
        """
        g = W.geometry
        N, d = g.N, g.d
        n_max = N // 2 if n_max is None else int(n_max)
        vals = W.values.reshape(g.n_sites, 2 * d)
        r = np.arange(-n_max, n_max + 1)
        table = np.empty((d,) + (r.size,) * d, dtype=complex)
        idx = np.ix_(*([r % N] * d))
        for k in range(d):
            a = vals[:, 2 * k].astype(float).reshape(g.shape)
            # sum_x a(x) exp(2 pi i n.x/N) = N^d * ifftn(a)[n]
            s = np.fft.ifftn(a) * g.n_sites
            theta = 2 * np.pi * r / N
            with np.errstate(invalid="ignore", divide="ignore"):
                fac = np.where(r == 0, 1.0, (np.exp(1j * theta) - 1) / (1j * theta))
            shape = [1] * d
            shape[k] = r.size
            table[k] = s[idx] * fac.reshape(shape) / (N * g.n_sites)
        return cls(d, n_max, table)

    def to_json(self, path=None):
        recs = []
        modes = self.modes().reshape(-1, self.d)
        for k in range(self.d):
            for n, c in zip(modes, self.table[k].ravel()):
                recs.append({"k": k + 1, "n": n.tolist(), "re": c.real, "im": c.imag})
        if path is None:
            return recs
        with open(path, "w") as fh:
            json.dump(recs, fh)
        return recs


def sobolev_norm(J: FourierCurrent, p: float) -> float:
    """``(sum_k sum_n |J(H^{k,n})|^2 (1 + 4 pi^2 |n|^2)^{-p})^{1/2}`` over the table."""
    n2 = np.sum(J.modes() ** 2, axis=-1)
    weight = (1.0 + 4 * np.pi**2 * n2) ** (-float(p))
    return float(np.sqrt(np.sum(np.abs(J.table) ** 2 * weight[None])))


# --------------------------------------------------------------------------
# time averages


@dataclass(frozen=True)
class TimeAveragedPair:
    """Time-averaged empirical density and current over ``[0, T]``.

    ``occupation`` holds ``int_0^T eta_x(t) dt`` per site, ``flow`` the net
    jump counts and ``correction`` the closing Beckmann flow.
    """

    geometry: TorusGeometry
    T: float
    occupation: np.ndarray = field(repr=False)
    flow: DiscreteVectorField = field(repr=False)
    correction: DiscreteVectorField = field(repr=False)

    @property
    def density(self) -> np.ndarray:
        """Time-averaged mass per site, on the site grid."""
        return (self.occupation / (self.T * self.geometry.n_sites)).reshape(self.geometry.shape)

    def pair_density(self, f) -> float:
        return float(np.dot(self.occupation, _site_values(f, self.geometry))) / (
            self.T * self.geometry.n_sites)

    def pair_current(self, F) -> float:
        """``<J_N(T), F> / T``."""
        return self.flow.pair(F) / self.T

    def pair_error(self, F) -> float:
        """Periodization term ``<E_{T,N}, F> / T``."""
        return self.correction.pair(F) / self.T


def time_averaged_pair(traj, T: float | None = None) -> TimeAveragedPair:
    """Event-exact time averages of density and current on ``[0, T]``."""
    T = traj.T if T is None else float(T)
    if T <= 0:
        raise ValueError("T must be positive")
    base = traj.truncate(T) if T < traj.T else traj
    g = base.geometry
    # int_0^T eta_x = eta_x(0) T + sum_i (T - t_i) (1[x = y_i] - 1[x = x_i])
    rem = T - base.times
    occ = base.initial.occupancy * T
    occ = occ + np.bincount(base.targets, weights=rem, minlength=g.n_sites)
    occ = occ - np.bincount(base.sources, weights=rem, minlength=g.n_sites)
    flow = net_flow(base, 0.0, T) if base.n_events else DiscreteVectorField.zeros(g)
    corr = beckmann_flow(base.configuration_at(T), base.initial)
    return TimeAveragedPair(g, T, occ, flow, corr)


# --------------------------------------------------------------------------
# level-two empirical measure


@dataclass(frozen=True)
class BinSpec:
    """Coarse profile: particle counts in ``blocks`` equal boxes per axis.

    Box boundaries are shifted by ``offset`` (a fraction of the torus
    length) along every axis.  ``N`` must be divisible by ``blocks``.
    """

    blocks: int = 2
    offset: float = 0.25

    def labels(self, geometry: TorusGeometry) -> np.ndarray:
        N, B = geometry.N, self.blocks
        if N % B:
            raise ValueError(f"N={N} is not divisible by blocks={B}")
        shift = int(round(self.offset * N))
        per_axis = ((geometry.coords - shift) % N) // (N // B)
        return np.ravel_multi_index(per_axis.T, (B,) * geometry.d)

    def n_bins(self, geometry: TorusGeometry) -> int:
        return self.blocks**geometry.d

    def block_size(self, geometry: TorusGeometry) -> int:
        return (geometry.N // self.blocks) ** geometry.d

    def project(self, values, geometry: TorusGeometry) -> np.ndarray:
        """Block averages of a site function."""
        lab = self.labels(geometry)
        v = np.asarray(values, dtype=float).ravel()
        return np.bincount(lab, weights=v, minlength=self.n_bins(geometry)) / self.block_size(
            geometry)


@dataclass(frozen=True)
class LevelTwoMeasure:
    """Occupation-time distribution of binned density profiles."""

    geometry: TorusGeometry
    bins: BinSpec
    profiles: np.ndarray  # (n_profiles, n_bins) block densities
    weights: np.ndarray

    def l1_distances(self, target) -> np.ndarray:
        """Block-averaged L^1 distance of every profile to ``target`` (site values or callable)."""
        g = self.geometry
        t = target(g.positions) if callable(target) else np.asarray(target, float)
        if t.size == g.n_sites:
            t = self.bins.project(t, g)
        return np.abs(self.profiles - t[None, :]).mean(axis=1)

    def mass_within(self, target, radius: float) -> float:
        return float(self.weights[self.l1_distances(target) < radius].sum())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"block{i}" for i in range(self.profiles.shape[1])] + ["weight"])
            for p, wt in zip(self.profiles, self.weights):
                w.writerow([f"{v:.10g}" for v in p] + [f"{wt:.12g}"])


class LevelTwoAccumulator:
    """Streaming occupation times of binned profiles along a trajectory."""

    def __init__(self, initial: Configuration, bins: BinSpec, t0: float = 0.0):
        g = initial.geometry
        self.geometry = g
        self.bins = bins
        self.labels = bins.labels(g)
        self.nb = bins.n_bins(g)
        self.base = bins.block_size(g) + 1
        if self.base ** self.nb >= 2**62:
            raise ValueError("too many blocks for integer profile codes")
        self.radix = self.base ** np.arange(self.nb, dtype=np.int64)
        counts = np.bincount(self.labels, weights=initial.occupancy, minlength=self.nb)
        self.code = int(np.dot(counts.astype(np.int64), self.radix))
        self.t = float(t0)
        self.time_in = {}

    def update(self, times: np.ndarray, bonds: np.ndarray) -> None:
        if times.size == 0:
            return
        g = self.geometry
        src = self.labels[g.bond_source[bonds]]
        dst = self.labels[g.bond_target[bonds]]
        delta = self.radix[dst] - self.radix[src]
        codes = self.code + np.cumsum(delta)
        starts = np.concatenate([[self.t], times[:-1]])
        prev = np.concatenate([[self.code], codes[:-1]])
        uniq, inv = np.unique(prev, return_inverse=True)
        dur = np.bincount(inv, weights=times - starts)
        for c, w in zip(uniq.tolist(), dur.tolist()):
            self.time_in[c] = self.time_in.get(c, 0.0) + w
        self.code = int(codes[-1])
        self.t = float(times[-1])

    def finalize(self, T: float) -> LevelTwoMeasure:
        time_in = dict(self.time_in)
        time_in[self.code] = time_in.get(self.code, 0.0) + (T - self.t)
        codes = np.array(sorted(time_in), dtype=np.int64)
        w = np.array([time_in[c] for c in codes.tolist()])
        counts = (codes[:, None] // self.radix[None, :]) % self.base
        profiles = counts / (self.base - 1)
        return LevelTwoMeasure(self.geometry, self.bins, profiles, w / w.sum())


def level_two_measure(traj, T: float | None = None, bins: BinSpec | None = None) -> LevelTwoMeasure:
    """Fraction of ``[0, T]`` spent in each binned density profile."""
    T = traj.T if T is None else float(T)
    if T <= 0:
        raise ValueError("T must be positive")
    bins = BinSpec() if bins is None else bins
    base = traj.truncate(T) if T < traj.T else traj
    acc = LevelTwoAccumulator(base.initial, bins)
    acc.update(base.times, base.bonds)
    return acc.finalize(T)


def exact_site_values(f, geometry: TorusGeometry) -> np.ndarray:
    """Site values of ``f`` as ``Fraction`` objects (for exact identities)."""
    return np.array([Fraction(v) for v in _site_values(f, geometry)], dtype=object)

