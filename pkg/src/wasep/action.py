"""Large-deviation functionals of density-current paths on the solver grid.

All functionals use the staggered discretisation of :mod:`wasep.hydro`: on
the face between ``x_i`` and ``x_i + e_k / M`` the residual current is

    a = j + (rho_{i+e_k} - rho_i) / dx - sigma_face G_face,

and the action density is ``|a|^2 / (4 sigma_face)``.  Time integrals use the
left-endpoint rule on each solver interval, the rule under which the
explicit scheme has exactly zero action; for periodic paths it coincides
with the trapezoidal rule.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .fields import FieldSpec
from .hydro import DensityField, DensityPath, FieldTable, HydroGrid, sigma

__all__ = [
    "PathDensityCurrent",
    "HolonomicMeasure",
    "InvalidPathError",
    "SIGMA_FLOOR",
    "action",
    "action_report",
    "holonomic_rate",
    "dual_functional",
    "w_hat",
    "fisher_functional",
    "fisher_gradient",
    "convex_hull_gap",
    "HullEstimate",
    "path_from_densities",
    "constant_path",
]

PathDensityCurrent = DensityPath

SIGMA_FLOOR = 1e-12
CONTINUITY_TOL = 1e-8


class InvalidPathError(ValueError):
    """The path violates the continuity equation or is malformed."""


# --------------------------------------------------------------------------
# helpers


def _check_path(path: DensityPath, tol: float = CONTINUITY_TOL) -> None:
    if path.j is None:
        raise InvalidPathError("path carries no current")
    res = path.continuity_residual()
    if res.size and res.max() > tol:
        raise InvalidPathError(f"continuity residual {res.max():.3e} exceeds {tol:.1e}")
    if path.rho.min() < -1e-12 or path.rho.max() > 1 + 1e-12:
        raise InvalidPathError("density leaves [0, 1]")


def _faces(path: DensityPath, field_spec: FieldSpec):
    """Residual current ``a`` and face mobility per interval, shapes ``(Nt, n, d)``."""
    grid = path.grid
    table = FieldTable.build(field_spec, grid)
    G = table.at(path.times[:-1])
    rho = path.rho[:-1]
    nbr = grid.geometry.neighbors[:, 0::2]
    grad = (rho[:, nbr] - rho[:, :, None]) / grid.dx
    s = sigma(rho)
    s_face = 0.5 * (s[:, nbr] + s[:, :, None])
    return path.j + grad - s_face * G, s_face


def _density(a, s):
    """``|a|^2 / (4 s)`` with the degeneracy convention; returns ``(values, finite)``."""
    degenerate = s < SIGMA_FLOOR
    bad = degenerate & (np.abs(a) > SIGMA_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.where(degenerate, 0.0, a * a / (4.0 * np.where(degenerate, 1.0, s)))
    return val, not bool(bad.any())


def _weights(path: DensityPath) -> np.ndarray:
    return np.diff(path.times)


# --------------------------------------------------------------------------
# action


def action(path: DensityPath, field_spec: FieldSpec, T: float | None = None,
           tol: float = CONTINUITY_TOL) -> float:
    """``int int |j + grad rho - sigma(rho) E|^2 / (4 sigma(rho))`` over the path.

    Returns ``+inf`` when ``sigma`` vanishes on a face carrying a nonzero
    residual current.

    Raises
    ------
    InvalidPathError
        If the discrete continuity equation fails beyond ``tol``.
    """
    if T is not None and abs(T - path.T) > 1e-12 * max(1.0, T):
        raise ValueError(f"horizon {T} does not match the path duration {path.T}")
    _check_path(path, tol)
    a, s = _faces(path, field_spec)
    val, finite = _density(a, s)
    if not finite:
        return float("inf")
    per_level = val.sum(axis=(1, 2)) * path.grid.cell_volume
    return float(np.dot(_weights(path), per_level))


def action_report(path: DensityPath, field_spec: FieldSpec, tol: float = CONTINUITY_TOL,
                  name: str = "action") -> dict:
    """Action together with the weighted norms of ``grad rho`` and ``j``."""
    value = action(path, field_spec, tol=tol)
    grid = path.grid
    rho = path.rho[:-1]
    nbr = grid.geometry.neighbors[:, 0::2]
    grad = (rho[:, nbr] - rho[:, :, None]) / grid.dx
    s = sigma(rho)
    s_face = 0.5 * (s[:, nbr] + s[:, :, None])
    w = _weights(path)[:, None, None] * grid.cell_volume
    g2, gfin = _density(grad, s_face)
    j2, jfin = _density(path.j, s_face)
    return {
        "functional": name,
        "value": value,
        "mass": path.mass,
        "grid": {"d": grid.d, "M": grid.M, "n_times": int(path.times.size), "T": path.T},
        "tolerances": {"continuity": tol, "sigma_floor": SIGMA_FLOOR},
        "finite": bool(np.isfinite(value)),
        "grad_rho_norm": float((g2 * w).sum()) if gfin else float("inf"),
        "current_norm": float((j2 * w).sum()) if jfin else float("inf"),
    }


def write_records(records, path) -> None:
    with open(path, "w") as fh:
        json.dump(records, fh, indent=2, default=float)


# --------------------------------------------------------------------------
# holonomic measures


@dataclass(frozen=True)
class HolonomicMeasure:
    """Time average of a periodic density-current path."""

    representative: DensityPath
    tol: float = 1e-8

    def __post_init__(self):
        r = self.representative
        gap = np.abs(r.rho[0] - r.rho[-1]).max()
        if gap > self.tol:
            raise ValueError(f"representative is not periodic (endpoint mismatch {gap:.2e})")

    @property
    def T(self) -> float:
        return self.representative.T

    def mean_current(self) -> np.ndarray:
        """Time-averaged face current, shape ``(n_nodes, d)``."""
        r = self.representative
        return np.tensordot(_weights(r), r.j, axes=1) / r.T

    def mean_current_divergence(self) -> float:
        return float(np.abs(self.representative.grid.divergence(self.mean_current())).max())


def holonomic_rate(P, field_spec: FieldSpec) -> float:
    """``A_T(representative) / T`` for a periodic representative."""
    if not isinstance(P, HolonomicMeasure):
        P = HolonomicMeasure(P)
    return action(P.representative, field_spec) / P.T


# --------------------------------------------------------------------------
# duality


def _test_field_values(w, path: DensityPath) -> np.ndarray:
    shape = path.j.shape
    if callable(w):
        grid = path.grid
        x = grid.face_centers()  # (n, d, d): axis-k face centre in x[:, k, :]
        out = np.empty(shape)
        for n, t in enumerate(path.times[:-1]):
            vals = np.asarray(w(t, x), dtype=float)
            out[n] = np.einsum("ikk->ik", vals.reshape(x.shape))
        return out
    w = np.asarray(w, dtype=float)
    if w.shape != shape:
        raise ValueError(f"test field must have shape {shape}")
    return w


def dual_functional(path: DensityPath, w, field_spec: FieldSpec,
                    tol: float = CONTINUITY_TOL) -> float:
    """``(1/T) int int w . (j + grad rho - sigma E) - sigma |w|^2``.

    ``w`` is a callable ``w(t, x) -> (..., d)`` evaluated at face centres or
    an array of face values with the shape of ``path.j``.
    """
    _check_path(path, tol)
    a, s = _faces(path, field_spec)
    wv = _test_field_values(w, path)
    per_level = (wv * a - s * wv * wv).sum(axis=(1, 2)) * path.grid.cell_volume
    return float(np.dot(_weights(path), per_level)) / path.T


def w_hat(path: DensityPath, field_spec: FieldSpec) -> np.ndarray:
    """Optimal test field ``(j + grad rho - sigma E) / (2 sigma)`` (0 where ``sigma`` vanishes)."""
    a, s = _faces(path, field_spec)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(s < SIGMA_FLOOR, 0.0, a / (2.0 * np.where(s < SIGMA_FLOOR, 1.0, s)))


# --------------------------------------------------------------------------
# Fisher-type functional


def _potential_values(U, grid: HydroGrid) -> np.ndarray:
    if U is None:
        return np.zeros(grid.geometry.n_sites)
    if callable(U):
        return np.asarray(U(grid.nodes()), dtype=float).reshape(-1)
    return np.asarray(U, dtype=float).reshape(-1)


def _fisher_parts(rho: np.ndarray, u: np.ndarray, grid: HydroGrid):
    nbr = grid.geometry.neighbors[:, 0::2]
    grad = (rho[nbr] - rho[:, None]) / grid.dx
    gU = (u[nbr] - u[:, None]) / grid.dx
    s = sigma(rho)
    s_face = 0.5 * (s[nbr] + s[:, None])
    return grad + s_face * gU, s_face, gU, nbr


def fisher_functional(rho, U, m: float | None = None, d: int = 1,
                      mass_tol: float = 1e-10) -> float:
    """``int |grad rho + sigma(rho) grad U|^2 / (4 sigma(rho))`` on the grid.

    The potential gradient on a face is the difference quotient of ``U``,
    i.e. the exact mean of ``grad U`` along the face.

    Raises
    ------
    ValueError
        If the mean of ``rho`` differs from ``m`` by more than ``mass_tol``.
    """
    if not isinstance(rho, DensityField):
        rho = DensityField(rho, d)
    if m is not None and abs(rho.mass - m) > mass_tol:
        raise ValueError(f"profile mass {rho.mass:.12g} differs from m={m}")
    grid = rho.grid
    r = rho.values.reshape(-1)
    a, s, _, _ = _fisher_parts(r, _potential_values(U, grid), grid)
    val, finite = _density(a, s)
    return float(val.sum() * grid.cell_volume) if finite else float("inf")


def fisher_gradient(rho: np.ndarray, u: np.ndarray, grid: HydroGrid) -> tuple[float, np.ndarray]:
    """Value and node gradient of the discrete Fisher functional (interior profiles)."""
    a, s, gU, nbr = _fisher_parts(rho, u, grid)
    val = float((a * a / (4 * s)).sum() * grid.cell_volume)
    ca = a / (2 * s)                      # d/da
    cs = ca * gU - a * a / (4 * s * s)    # d/ds_face
    ds = 0.5 * (1 - 2 * rho)              # half of sigma'
    n = rho.size
    g = np.zeros(n)
    g += np.bincount(nbr.ravel(), weights=(ca / grid.dx + cs * ds[nbr]).ravel(), minlength=n)
    g += (-ca / grid.dx + cs * ds[:, None]).sum(axis=1)
    return val, g * grid.cell_volume


@dataclass
class HullEstimate:
    """Upper estimate of the convex envelope at ``rho``."""

    value: float
    fisher: float
    components: np.ndarray
    weights: np.ndarray

    @property
    def gap(self) -> float:
        return self.fisher - self.value


def convex_hull_gap(rho, U, m: float, K_mix: int = 2, n_starts: int = 8, n_iter: int = 400,
                    delta: float = 1e-4, modes: int = 4, seed: int = 0, d: int = 1) -> HullEstimate:
    """Minimise ``sum_i alpha_i V(rho_i)`` over mixtures with ``sum_i alpha_i rho_i = rho``.

    Each start draws weights ``alpha`` from a Dirichlet law (the first start
    uses equal weights) and smooth mean-zero perturbations ``psi_i`` with
    ``sum_i alpha_i psi_i = 0``; the free perturbations are refined by
    projected gradient descent with backtracking, keeping every component
    in ``[delta, 1 - delta]``.  The trivial decomposition is always a
    candidate, so the estimate never exceeds ``V(rho)``.
    """
    if K_mix < 2:
        raise ValueError("need at least two mixture components")
    if not isinstance(rho, DensityField):
        rho = DensityField(rho, d)
    grid = rho.grid
    r = rho.values.reshape(-1)
    u = _potential_values(U, grid)
    base = fisher_functional(rho, u, m)
    best = HullEstimate(base, base, r[None, :].copy(), np.ones(1))
    if not np.isfinite(base):
        return best
    rng = np.random.default_rng(seed)
    x = grid.nodes()
    n = r.size

    def project(z):
        return z - z.mean(axis=1, keepdims=True)

    def assemble(z, alpha):
        last = -(alpha[:-1, None] * z).sum(axis=0) / alpha[-1]
        return r[None, :] + np.vstack([z, last[None, :]])

    def feasible(comps):
        return comps.min() >= delta and comps.max() <= 1 - delta

    def objective(z, alpha):
        comps = assemble(z, alpha)
        vals, grads = zip(*(fisher_gradient(c, u, grid) for c in comps))
        f = float(np.dot(alpha, vals))
        G = np.array(grads)
        # chain rule through the eliminated last component
        gz = alpha[:-1, None] * (G[:-1] - G[-1][None, :])
        return f, project(gz), comps

    room = np.minimum(r - delta, 1 - delta - r).min()
    for start in range(n_starts):
        alpha = np.full(K_mix, 1.0 / K_mix) if start == 0 else rng.dirichlet(np.ones(K_mix))
        z = np.zeros((K_mix - 1, n))
        for i in range(K_mix - 1):
            for _ in range(modes):
                kv = rng.integers(1, 4, size=d)
                ph = rng.uniform(0, 2 * np.pi)
                z[i] += rng.normal() * np.cos(2 * np.pi * (x @ kv) + ph)
        z = project(z)
        comps = assemble(z, alpha)
        scale = np.abs(comps - r).max()
        if scale > 0:
            z *= 0.5 * room / scale
        f, g, comps = objective(z, alpha)
        step = 1.0
        for _ in range(n_iter):
            gn = np.abs(g).max()
            if gn < 1e-14:
                break
            while step > 1e-14:
                z_new = z - step * g / gn
                comps_new = assemble(z_new, alpha)
                if feasible(comps_new):
                    f_new, g_new, comps_new = objective(z_new, alpha)
                    if f_new < f - 1e-4 * step * gn:
                        z, f, g, comps = z_new, f_new, g_new, comps_new
                        step *= 2.0
                        break
                step *= 0.5
            else:
                break
        if f < best.value:
            best = HullEstimate(f, base, comps.copy(), alpha.copy())
    return best


# --------------------------------------------------------------------------
# path construction


def path_from_densities(rho, times, d: int = 1, mean_current=None) -> DensityPath:
    """Complete a density history into a path with the minimal potential current.

    On each interval ``j^n = grad phi`` with ``Lap_h phi = -(rho^{n+1} -
    rho^n) / dt`` solved by FFT, plus an optional constant
    (divergence-free) current ``mean_current``.
    """
    times = np.asarray(times, dtype=float)
    rho = np.asarray(rho, dtype=float).reshape(times.size, -1)
    M = round(rho.shape[1] ** (1.0 / d))
    grid = HydroGrid(d, M)
    if np.abs(rho.mean(axis=1) - rho[0].mean()).max() > 1e-12:
        raise InvalidPathError("densities must share one mass")
    shape = grid.shape
    freqs = np.meshgrid(*([np.arange(M)] * d), indexing="ij")
    lap = sum((2 * np.cos(2 * np.pi * f / M) - 2) for f in freqs) / grid.dx**2
    lap = np.where(lap == 0, 1.0, lap)
    dt = np.diff(times)
    j = np.empty((times.size - 1, rho.shape[1], d))
    nbr = grid.geometry.neighbors[:, 0::2]
    for n in range(times.size - 1):
        rhs = -(rho[n + 1] - rho[n]).reshape(shape) / dt[n]
        ph = np.fft.fftn(rhs) / lap
        ph.flat[0] = 0.0
        phi = np.real(np.fft.ifftn(ph)).reshape(-1)
        j[n] = (phi[nbr] - phi[:, None]) / grid.dx
    if mean_current is not None:
        j += np.broadcast_to(np.asarray(mean_current, dtype=float), (d,))
    return DensityPath(times, rho, j, d)


def constant_path(m: float, jbar, T: float, M: int = 16, d: int = 1, n_steps: int = 4
                  ) -> DensityPath:
    """Spatially and temporally constant path ``rho = m``, ``j = jbar``."""
    times = np.linspace(0.0, T, n_steps + 1)
    rho = np.full((n_steps + 1, M**d), float(m))
    j = np.broadcast_to(np.asarray(jbar, dtype=float), (n_steps, M**d, d)).copy()
    return DensityPath(times, rho, j, d)
