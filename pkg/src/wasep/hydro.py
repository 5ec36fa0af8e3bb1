"""Explicit finite-volume solver for ``d rho = Lap rho - div(sigma(rho) (E + F))``.

Unknowns live at the grid nodes ``x_i = i / M``.  The flux through the face
between ``x_i`` and ``x_i + e_k / M`` is

    j = -(rho_{i+e_k} - rho_i) / dx + sigma_face * G_face,

with ``sigma_face`` the arithmetic mean of ``sigma`` at the two nodes and
``G_face`` the mean of the field along the face segment (its line integral
divided by ``dx``).  Forward Euler in time with ``dt <= 0.4 dx^2 / d`` and
``|G| dx <= 2`` makes each step monotone, so the scheme preserves ``[0, 1]``
and contracts the discrete ``L^1`` distance between solutions.
"""

from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.optimize import brentq

from .fields import FieldSpec, bond_line_integrals
from .lattice import TorusGeometry

__all__ = [
    "CFLError",
    "NonConvergenceError",
    "DensityField",
    "DensityPath",
    "HydroGrid",
    "PeriodicSolution",
    "ContractionFit",
    "evolve",
    "poincare_map",
    "find_periodic_solution",
    "l1_contraction_rate",
    "l1_distance",
    "fermi_profile",
    "stable_dt",
    "MOBILITIES",
]

CFL = 0.4
MOBILITIES = ("exclusion", "linear")


class CFLError(ValueError):
    """Requested time step or grid violates the stability conditions."""

    def __init__(self, message, required_dt=None, required_M=None):
        super().__init__(message)
        self.required_dt = required_dt
        self.required_M = required_M


class NonConvergenceError(RuntimeError):
    """Fixed-point iteration did not reach the tolerance; carries the diagnostic."""

    def __init__(self, message, result):
        super().__init__(message)
        self.result = result


def stable_dt(M: int, d: int) -> float:
    """Largest time step accepted by the solver on an ``M``-point grid."""
    return CFL / (d * M * M)


# --------------------------------------------------------------------------
# grid and field tabulation


@dataclass(frozen=True)
class HydroGrid:
    """Node grid ``i / M`` on the ``d``-torus with face-averaged field tables."""

    d: int
    M: int

    @property
    def geometry(self) -> TorusGeometry:
        return TorusGeometry(self.d, self.M)

    @property
    def dx(self) -> float:
        return 1.0 / self.M

    @property
    def shape(self):
        return (self.M,) * self.d

    @property
    def cell_volume(self) -> float:
        return self.dx**self.d

    def nodes(self) -> np.ndarray:
        return self.geometry.positions

    def face_centers(self) -> np.ndarray:
        """Midpoints of the faces, shape ``(n_nodes, d, d)``."""
        x = self.nodes()
        return x[:, None, :] + 0.5 * self.dx * np.eye(self.d)[None]

    def face_average(self, V) -> np.ndarray:
        """Mean of ``V . e_k`` along each face segment, shape ``(n_nodes, d)``."""
        g = self.geometry
        integrals = bond_line_integrals(V, g).reshape(g.n_sites, 2 * self.d)
        return integrals[:, 0::2] / self.dx

    def face_difference(self, values) -> np.ndarray:
        """``(v_{i+e_k} - v_i) / dx``, shape ``(n_nodes, d)``."""
        v = np.asarray(values).reshape(-1)
        nbr = self.geometry.neighbors[:, 0::2]
        return (v[nbr] - v[:, None]) / self.dx

    def face_mean(self, values) -> np.ndarray:
        v = np.asarray(values).reshape(-1)
        nbr = self.geometry.neighbors[:, 0::2]
        return 0.5 * (v[nbr] + v[:, None])

    def divergence(self, flux) -> np.ndarray:
        """Discrete divergence of face fluxes ``(n_nodes, d)``, per node."""
        flux = np.asarray(flux)
        back = self.geometry.neighbors[:, 1::2]
        return (flux - flux[back, np.arange(self.d)[None, :]]).sum(axis=1) / self.dx


def sigma(rho, mobility: str = "exclusion"):
    if mobility == "exclusion":
        return rho * (1.0 - rho)
    if mobility == "linear":
        return rho
    raise ValueError(f"unknown mobility {mobility!r}; choose from {MOBILITIES}")


@dataclass(frozen=True)
class FieldTable:
    """Face averages of ``E`` and of each perturbation term."""

    E: np.ndarray
    G: np.ndarray  # (n_terms, n_nodes, d)
    harmonic: np.ndarray
    phase: np.ndarray
    period: float

    @classmethod
    def build(cls, field_spec: FieldSpec, grid: HydroGrid) -> "FieldTable":
        if field_spec.d != grid.d:
            raise ValueError(f"field dimension {field_spec.d} != grid dimension {grid.d}")
        E = grid.face_average(field_spec.E)
        G = np.array([grid.face_average(p.spatial) for p in field_spec.perturbation])
        G = G.reshape(len(field_spec.perturbation), *E.shape)
        return cls(E, G,
                   np.array([p.harmonic for p in field_spec.perturbation], dtype=float),
                   np.array([p.phase for p in field_spec.perturbation], dtype=float),
                   float(field_spec.period or 1.0))

    def at(self, t) -> np.ndarray:
        """Face field at time(s) ``t``; shape ``(n_nodes, d)`` or ``(len(t), n_nodes, d)``."""
        t_arr = np.asarray(t, dtype=float)
        out = np.broadcast_to(self.E, t_arr.shape + self.E.shape).copy()
        for k in range(self.G.shape[0]):
            mod = np.cos(2 * np.pi * self.harmonic[k] * t_arr / self.period + self.phase[k])
            out += mod[..., None, None] * self.G[k]
        return out

    def sup(self) -> float:
        return float(np.max(np.abs(self.E) + np.abs(self.G).sum(axis=0), initial=0.0))


# --------------------------------------------------------------------------
# data types


@dataclass(frozen=True)
class DensityField:
    """Node values of a density on the ``M``-point grid of the ``d``-torus."""

    values: np.ndarray = field(repr=False)
    d: int = 1
    bounded: bool = True

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1 and self.d > 1:
            M = round(v.size ** (1.0 / self.d))
            v = v.reshape((M,) * self.d)
        if v.ndim != self.d or len(set(v.shape)) != 1:
            raise ValueError(f"density grid must be a {self.d}-dimensional cube, got {v.shape}")
        if self.bounded and (v.min() < -1e-12 or v.max() > 1 + 1e-12):
            raise ValueError("density values must lie in [0, 1]")
        if not np.all(np.isfinite(v)):
            raise ValueError("density contains non-finite values")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, f, M: int, d: int = 1, **kw) -> "DensityField":
        g = HydroGrid(d, M)
        return cls(np.asarray(f(g.nodes()), dtype=float).reshape(g.shape), d, **kw)

    @classmethod
    def constant(cls, m: float, M: int, d: int = 1) -> "DensityField":
        return cls(np.full((M,) * d, float(m)), d)

    @property
    def M(self) -> int:
        return self.values.shape[0]

    @property
    def grid(self) -> HydroGrid:
        return HydroGrid(self.d, self.M)

    @property
    def mass(self) -> float:
        return float(self.values.mean())

    def with_mass(self, m: float) -> "DensityField":
        """Affine rescaling towards the nearest constant preserving ``[0, 1]``."""
        v = self.values
        cur = v.mean()
        if m <= cur:
            w = v * (m / cur) if cur > 0 else np.zeros_like(v)
        else:
            w = 1 - (1 - v) * ((1 - m) / (1 - cur)) if cur < 1 else np.ones_like(v)
        return DensityField(w, self.d, self.bounded)


@dataclass
class DensityPath:
    """Space-time grids of density and face current.

    ``rho[n]`` is the density at ``times[n]`` for ``n = 0..Nt``; ``j[n]`` is
    the face current used on ``[times[n], times[n+1])`` and has shape
    ``(Nt, n_nodes, d)``.  A path produced by the solver satisfies
    ``(rho[n+1] - rho[n]) / dt_n + div j[n] = 0`` to rounding.
    """

    times: np.ndarray
    rho: np.ndarray
    j: np.ndarray | None
    d: int
    mobility: str = "exclusion"

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.rho = np.asarray(self.rho, dtype=float)
        n = self.times.size
        self.rho = self.rho.reshape(n, -1)
        if self.j is not None:
            self.j = np.asarray(self.j, dtype=float).reshape(n - 1, self.rho.shape[1], self.d)

    @property
    def M(self) -> int:
        return round(self.rho.shape[1] ** (1.0 / self.d))

    @property
    def grid(self) -> HydroGrid:
        return HydroGrid(self.d, self.M)

    @property
    def T(self) -> float:
        return float(self.times[-1] - self.times[0])

    @property
    def masses(self) -> np.ndarray:
        return self.rho.mean(axis=1)

    @property
    def mass(self) -> float:
        return float(self.masses[0])

    def density(self, n: int = -1) -> DensityField:
        return DensityField(self.rho[n].reshape(self.grid.shape), self.d,
                            bounded=self.mobility == "exclusion")

    @property
    def final(self) -> DensityField:
        return self.density(-1)

    def continuity_residual(self) -> np.ndarray:
        """Max-norm of ``d_t rho + div j`` at every time level."""
        if self.j is None:
            raise ValueError("path stores no current")
        g = self.grid
        dt = np.diff(self.times)
        res = np.diff(self.rho, axis=0) / dt[:, None]
        res = res + np.stack([g.divergence(jn) for jn in self.j])
        return np.max(np.abs(res), axis=1)

    def shifted(self, s: int) -> "DensityPath":
        """Cyclic time shift by ``s`` steps of a periodic path (``rho[0] == rho[-1]``)."""
        n = self.times.size - 1
        s %= n
        rho = np.concatenate([self.rho[s:n], self.rho[:s + 1]])
        j = None if self.j is None else np.concatenate([self.j[s:], self.j[:s]])
        return DensityPath(self.times, rho, j, self.d, self.mobility)

    # export ------------------------------------------------------------

    def to_csv(self, path) -> None:
        """Long format ``t, x_1..x_d, rho, j_1..j_d`` (current blank at the last time)."""
        g = self.grid
        x = g.nodes()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{k + 1}" for k in range(self.d)] + ["rho"]
                       + [f"j{k + 1}" for k in range(self.d)])
            for n, t in enumerate(self.times):
                for i in range(x.shape[0]):
                    jr = ([f"{v:.17g}" for v in self.j[n, i]]
                          if self.j is not None and n < self.j.shape[0] else [""] * self.d)
                    w.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in x[i]]
                               + [f"{self.rho[n, i]:.17g}"] + jr)

    _MAGIC = b"WHYD"
    _HEADER = struct.Struct("<4sIIII?")

    def save(self, path) -> None:
        """Binary: header ``(d, M, n_times, has_j)`` then float64 times, rho, j."""
        with open(path, "wb") as fh:
            fh.write(self._HEADER.pack(self._MAGIC, 1, self.d, self.M, self.times.size,
                                       self.j is not None))
            fh.write(self.times.astype("<f8").tobytes())
            fh.write(self.rho.astype("<f8").tobytes())
            if self.j is not None:
                fh.write(self.j.astype("<f8").tobytes())

    @classmethod
    def load(cls, path, mobility: str = "exclusion") -> "DensityPath":
        data = open(path, "rb").read()
        magic, _, d, M, n, has_j = cls._HEADER.unpack_from(data)
        if magic != cls._MAGIC:
            raise ValueError(f"{path} is not a density path file")
        arr = np.frombuffer(data, dtype="<f8", offset=cls._HEADER.size)
        sites = M**d
        times = arr[:n]
        rho = arr[n:n + n * sites].reshape(n, sites)
        j = arr[n + n * sites:].reshape(n - 1, sites, d) if has_j else None
        return cls(times.copy(), rho.copy(), None if j is None else j.copy(), d, mobility)


# --------------------------------------------------------------------------
# time stepping


@numba.njit(cache=True)
def _evolve_kernel(rho, nsteps, dt, dx, t0, E, G, harmonic, phase, period, nbr_p, nbr_m,
                   linear, stride, out_rho, out_j):
    n, d = E.shape
    n_terms = G.shape[0]
    flux = np.empty((n, d))
    face = np.empty((n, d))
    new = np.empty(n)
    k_out = 0
    out_rho[0, :] = rho
    for step in range(nsteps):
        t = t0 + step * dt
        for i in range(n):
            for k in range(d):
                face[i, k] = E[i, k]
        for q in range(n_terms):
            c = np.cos(2.0 * np.pi * harmonic[q] * t / period + phase[q])
            for i in range(n):
                for k in range(d):
                    face[i, k] += c * G[q, i, k]
        for i in range(n):
            ri = rho[i]
            si = ri if linear else ri * (1.0 - ri)
            for k in range(d):
                rj = rho[nbr_p[i, k]]
                sj = rj if linear else rj * (1.0 - rj)
                flux[i, k] = -(rj - ri) / dx + 0.5 * (si + sj) * face[i, k]
        for i in range(n):
            acc = 0.0
            for k in range(d):
                acc += flux[i, k] - flux[nbr_m[i, k], k]
            new[i] = rho[i] - dt / dx * acc
        if step % stride == 0:
            for i in range(n):
                for k in range(d):
                    out_j[k_out, i, k] = flux[i, k]
        for i in range(n):
            rho[i] = new[i]
        if (step + 1) % stride == 0:
            k_out += 1
            for i in range(n):
                out_rho[k_out, i] = rho[i]
    return rho


def _prepare(rho0, field_spec: FieldSpec, mobility: str):
    if mobility not in MOBILITIES:
        raise ValueError(f"unknown mobility {mobility!r}; choose from {MOBILITIES}")
    if not isinstance(rho0, DensityField):
        rho0 = DensityField(rho0, field_spec.d, bounded=mobility == "exclusion")
    grid = rho0.grid
    table = FieldTable.build(field_spec, grid)
    return rho0, grid, table


def _check_stability(grid: HydroGrid, table: FieldTable, dt: float):
    dt_max = stable_dt(grid.M, grid.d)
    if dt > dt_max * (1 + 1e-12):
        raise CFLError(f"time step {dt:.3e} exceeds the stability bound; "
                       f"required dt <= {dt_max:.6e}", required_dt=dt_max)
    G = table.sup()
    if G * grid.dx > 2.0:
        need = int(np.ceil(G / 2.0))
        raise CFLError(f"cell Peclet number |G| dx = {G * grid.dx:.3f} > 2; "
                       f"use M >= {need}", required_dt=dt_max, required_M=need)


def evolve(rho0, field_spec: FieldSpec, t_end: float, dt: float | None = None,
           t0: float = 0.0, store: int | str = 1, mobility: str = "exclusion") -> DensityPath:
    """Solve the drift-diffusion equation from ``rho0`` on ``[t0, t0 + t_end]``.

    Parameters
    ----------
    rho0 : DensityField or array
        Initial node values.
    field_spec : FieldSpec
        Driving field ``E`` and optional periodic perturbation ``F``.
    t_end : float
        Duration of the run.
    dt : float, optional
        Time step; defaults to the largest stable step that divides ``t_end``
        into a multiple of ``store`` steps.
    store : int or "final"
        Keep every ``store``-th level (1 keeps all, which the action needs).
    mobility : {"exclusion", "linear"}
        ``sigma(rho) = rho (1 - rho)`` or ``sigma(rho) = rho``.

    Raises
    ------
    CFLError
        If ``dt`` or the grid spacing violates the stability conditions;
        the required step is attached as ``required_dt``.
    """
    rho0, grid, table = _prepare(rho0, field_spec, mobility)
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    dt_max = stable_dt(grid.M, grid.d)
    if dt is None:
        nsteps = int(np.ceil(t_end / dt_max - 1e-9))
        if isinstance(store, (int, np.integer)) and store > 1:
            nsteps = -(-nsteps // int(store)) * int(store)
        dt = t_end / nsteps
    else:
        nsteps = int(round(t_end / dt))
        if abs(nsteps * dt - t_end) > 1e-9 * t_end:
            raise ValueError("dt must divide t_end")
    _check_stability(grid, table, dt)
    stride = nsteps if store == "final" else int(store)
    if stride < 1 or nsteps % stride:
        raise ValueError(f"store stride {stride} must divide the step count {nsteps}")
    n_out = nsteps // stride
    g = grid.geometry
    out_rho = np.empty((n_out + 1, g.n_sites))
    out_j = np.empty((n_out, g.n_sites, grid.d))
    rho = rho0.values.reshape(-1).astype(float).copy()
    _evolve_kernel(rho, nsteps, dt, grid.dx, float(t0), table.E, table.G, table.harmonic,
                   table.phase, table.period, np.ascontiguousarray(g.neighbors[:, 0::2]),
                   np.ascontiguousarray(g.neighbors[:, 1::2]), mobility == "linear", stride,
                   out_rho, out_j)
    times = t0 + dt * stride * np.arange(n_out + 1)
    j = out_j if stride == 1 else None
    return DensityPath(times, out_rho, j, grid.d, mobility)


def flux(rho, grid: HydroGrid, face_field, mobility: str = "exclusion") -> np.ndarray:
    """Face current ``-grad rho + sigma_face G`` for node values ``rho``."""
    s = sigma(np.asarray(rho).reshape(-1), mobility)
    return -grid.face_difference(rho) + grid.face_mean(s) * face_field


def poincare_map(rho, T_per: float, field_spec: FieldSpec, mobility: str = "exclusion",
                 return_path: bool = False):
    """Solution after one period ``T_per`` started at ``t = 0``."""
    path = evolve(rho, field_spec, T_per, store=1 if return_path else "final",
                  mobility=mobility)
    return path if return_path else path.final


def l1_distance(a, b, d: int | None = None) -> float:
    """Grid ``L^1`` norm: sum of ``|a - b|`` times the cell volume."""
    va = a.values if isinstance(a, DensityField) else np.asarray(a)
    vb = b.values if isinstance(b, DensityField) else np.asarray(b)
    return float(np.abs(va - vb).mean())


# --------------------------------------------------------------------------
# periodic solutions


@dataclass
class PeriodicSolution:
    path: DensityPath | None
    iterations: int
    increments: np.ndarray
    decay_rate: float
    converged: bool

    @property
    def profile(self) -> DensityField:
        return self.path.density(0)


def _decay_fit(increments, T_per, floor=1e-13):
    inc = np.asarray(increments, dtype=float)
    idx = np.flatnonzero(inc > floor)
    if idx.size < 2:
        return float("nan"), float("nan")
    slope, intercept = np.polyfit(idx * T_per, np.log(inc[idx]), 1)
    return float(-slope), float(np.exp(intercept))


def find_periodic_solution(m: float, T_per: float, field_spec: FieldSpec, tol: float = 1e-10,
                           M: int = 128, rho0=None, max_iter: int = 200,
                           mobility: str = "exclusion", store_path: bool = True
                           ) -> PeriodicSolution:
    """Iterate the Poincaré map from ``rho0`` (default: constant ``m``).

    Stops when the ``L^1`` increment drops below ``tol``.  The decay rate of
    the increments is fitted on a logarithmic scale per unit time.

    Raises
    ------
    NonConvergenceError
        After ``max_iter`` iterations; the partial result with the observed
        decay rate is attached.
    """
    if rho0 is None:
        rho0 = DensityField.constant(m, M, field_spec.d)
    elif not isinstance(rho0, DensityField):
        rho0 = DensityField(rho0, field_spec.d)
    if abs(rho0.mass - m) > 1e-10:
        raise ValueError(f"initial mass {rho0.mass} differs from m={m}")
    rho = rho0
    incs = []
    converged = False
    for it in range(1, max_iter + 1):
        nxt = poincare_map(rho, T_per, field_spec, mobility)
        incs.append(l1_distance(nxt, rho))
        rho = nxt
        if incs[-1] < tol:
            converged = True
            break
    rate, _ = _decay_fit(incs, T_per)
    path = poincare_map(rho, T_per, field_spec, mobility, return_path=True) if store_path else None
    result = PeriodicSolution(path, it, np.array(incs), rate, converged)
    if not converged:
        raise NonConvergenceError(
            f"no convergence after {max_iter} iterations (last increment {incs[-1]:.3e}, "
            f"observed decay rate {rate:.4g})", result)
    return result


# --------------------------------------------------------------------------
# contraction


@dataclass
class ContractionFit:
    A: float
    rate: float
    times: np.ndarray
    distances: np.ndarray
    skipped: bool = False

    @property
    def nonincreasing(self) -> bool:
        return bool(np.all(np.diff(self.distances) <= 1e-15))


def l1_contraction_rate(rho1, rho2, field_spec: FieldSpec, horizon: float,
                        store: int = 1, mobility: str = "exclusion") -> ContractionFit:
    """Track ``||u_1(t) - u_2(t)||_{L^1}`` and fit ``A exp(-lambda t)``."""
    p1 = evolve(rho1, field_spec, horizon, store=store, mobility=mobility)
    p2 = evolve(rho2, field_spec, horizon, store=store, mobility=mobility)
    if abs(p1.mass - p2.mass) > 1e-12:
        raise ValueError("the two densities must carry equal mass")
    dist = np.abs(p1.rho - p2.rho).mean(axis=1)
    t = p1.times - p1.times[0]
    if dist[0] == 0.0:
        return ContractionFit(0.0, float("nan"), t, dist, skipped=True)
    mask = dist > 1e-13 * dist[0]
    slope, intercept = np.polyfit(t[mask], np.log(dist[mask]), 1)
    return ContractionFit(float(np.exp(intercept)), float(-slope), t, dist)


# --------------------------------------------------------------------------
# stationary profiles


def fermi_profile(U, m: float, M: int = 256, d: int = 1) -> DensityField:
    """``1 / (1 + exp(U - lambda))`` with ``lambda`` fixing the grid mean ``m``.

    ``U`` is a callable on positions or an array of node values.
    """
    if not 0 < m < 1:
        raise ValueError("mass must lie in (0, 1)")
    g = HydroGrid(d, M)
    u = np.asarray(U(g.nodes()) if callable(U) else U, dtype=float).reshape(-1)

    def profile(lam):
        return 0.5 * (1.0 - np.tanh(0.5 * (u - lam)))

    lo, hi = u.min() + np.log(m / (1 - m)) - 1.0, u.max() + np.log(m / (1 - m)) + 1.0
    lam = brentq(lambda s: profile(s).mean() - m, lo, hi, xtol=1e-15, rtol=1e-15, maxiter=500)
    vals = profile(lam)
    if abs(vals.mean() - m) > 1e-12:
        warnings.warn(f"Fermi profile mass error {vals.mean() - m:.2e}")
    return DensityField(vals.reshape(g.shape), d)
