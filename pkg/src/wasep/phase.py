"""Traveling-wave minimisation of the time-averaged current rate in one dimension.

A wave is a periodic profile ``rho(y)`` moving at speed ``v``.  Continuity
forces the current ``j(y) = jbar + v (rho(y) - m)``, and the cost per unit
time of the moving path is

    R(rho, v) = int (jbar + v (rho - m) + rho' - E sigma(rho))^2 / (4 sigma(rho)) dy.

The cross term ``b(rho) rho' / (2 sigma(rho))`` is an exact derivative, so
the ``reduced`` form used by the optimiser is

    R(rho, v) = int [b(rho)^2 + rho'^2] / (4 sigma(rho)),   b = jbar + v (rho - m) - E sigma.

For fixed ``rho`` this is a quadratic in ``v`` and the optimal speed is
explicit.  The ``lattice`` form evaluates the same cost on the space-time
path obtained by shifting the profile one cell per step, which is what
:func:`unroll` builds.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hydro import DensityPath

__all__ = [
    "TravelingWave",
    "TWResult",
    "PhaseScan",
    "constant_profile_rate",
    "tw_rate",
    "optimal_speed",
    "unroll",
    "minimize_tw",
    "phase_scan",
    "stability_threshold",
]


def _sigma(r):
    return r * (1.0 - r)


# --------------------------------------------------------------------------
# waves


@dataclass
class TravelingWave:
    """Profile on the grid ``y_i = i / M`` with speed ``v``, mass ``m`` and mean current ``jbar``."""

    profile: np.ndarray = field(repr=False)
    v: float
    m: float
    jbar: float

    def __post_init__(self):
        self.profile = np.asarray(self.profile, dtype=float).ravel()
        if abs(self.profile.mean() - self.m) > 1e-10:
            raise ValueError(f"profile mass {self.profile.mean():.12g} differs from m={self.m}")

    @property
    def M(self) -> int:
        return self.profile.size

    @property
    def y(self) -> np.ndarray:
        return np.arange(self.M) / self.M

    @property
    def current(self) -> np.ndarray:
        """Node current ``jbar + v (rho - m)``."""
        return self.jbar + self.v * (self.profile - self.m)

    @property
    def amplitude(self) -> float:
        return float(np.abs(self.profile - self.m).max())

    def is_flat(self, tol: float = 1e-3) -> bool:
        return self.amplitude < tol

    @classmethod
    def flat(cls, m: float, jbar: float, M: int = 128, v: float = 0.0) -> "TravelingWave":
        return cls(np.full(M, float(m)), v, m, jbar)

    @classmethod
    def from_fourier(cls, m: float, jbar: float, v: float, cos_coeffs=(), sin_coeffs=(),
                     M: int = 128) -> "TravelingWave":
        """``rho(y) = m + sum_k a_k cos(2 pi k y) + b_k sin(2 pi k y)``."""
        y = np.arange(M) / M
        rho = np.full(M, float(m))
        for k, a in enumerate(cos_coeffs, start=1):
            rho += a * np.cos(2 * np.pi * k * y)
        for k, b in enumerate(sin_coeffs, start=1):
            rho += b * np.sin(2 * np.pi * k * y)
        return cls(rho, v, m, jbar)

    def fourier(self, n_modes: int = 16) -> np.ndarray:
        """Complex Fourier coefficients ``c_0..c_{n_modes}`` of the profile."""
        return np.fft.rfft(self.profile)[: n_modes + 1] / self.M

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["y", "rho", "j"])
            for yi, r, j in zip(self.y, self.profile, self.current):
                w.writerow([f"{yi:.10g}", f"{r:.17g}", f"{j:.17g}"])


def constant_profile_rate(m: float, E: float, jbar: float) -> float:
    """``(jbar - sigma(m) E)^2 / (4 sigma(m))``."""
    if not 0 < m < 1:
        raise ValueError(f"mass must lie strictly between 0 and 1, got {m}")
    s = m * (1 - m)
    return (jbar - s * E) ** 2 / (4 * s)


def stability_threshold(m: float, jbar: float) -> float:
    """Field strength above which the flat profile stops being a local minimiser.

    The second variation of the reduced rate at ``rho = m`` in the direction
    ``sin(2 pi y)``, with the speed optimised, is negative exactly when
    ``E^2 sigma^2 > 4 pi^2 sigma + jbar^2``.
    """
    s = m * (1 - m)
    return float(np.sqrt(4 * np.pi**2 * s + jbar**2) / s)


def optimal_speed(rho: np.ndarray, m: float, E: float, jbar: float) -> float:
    """Minimiser over ``v`` of the reduced rate for a fixed profile (0 for flat profiles)."""
    u = rho - m
    s = _sigma(rho)
    den = np.sum(u * u / s)
    if den <= 1e-300:
        return 0.0
    # sum (jbar - E s) u / s with sum u = 0 used exactly:
    # u / s = u / s_m + u^2 (u + 2m - 1) / (s s_m)
    sm = m * (1 - m)
    num = jbar * np.sum(u * u * (u + 2 * m - 1) / (s * sm))
    return float(-num / den)


def _reduced(rho, v, m, E, jbar, grad: bool = False):
    M = rho.size
    dy = 1.0 / M
    s = _sigma(rho)
    sp = 1.0 - 2.0 * rho
    b = jbar + v * (rho - m) - E * s
    nxt = np.roll(rho, -1)
    D = (nxt - rho) / dy
    sf = 0.5 * (s + np.roll(s, -1))
    val = dy * (np.sum(b * b / (4 * s)) + np.sum(D * D / (4 * sf)))
    if not grad:
        return val
    g = 2 * b * (v - E * sp) / (4 * s) - b * b * sp / (4 * s * s)
    cD = D / (2 * sf)                 # d/dD
    cs = -D * D / (4 * sf * sf)       # d/dsf
    g_face_next = cD / dy + cs * 0.5 * np.roll(sp, -1)
    g_face_self = -cD / dy + cs * 0.5 * sp
    g = g + g_face_self + np.roll(g_face_next, 1)
    return val, dy * g


def _lattice(rho, v, m, E, jbar):
    M = rho.size
    dy = 1.0 / M
    s = _sigma(rho)
    up = rho if v >= 0 else np.roll(rho, -1)
    jf = jbar + v * (up - m)
    D = (np.roll(rho, -1) - rho) / dy
    sf = 0.5 * (s + np.roll(s, -1))
    a = jf + D - E * sf
    return dy * float(np.sum(a * a / (4 * sf)))


def tw_rate(wave: TravelingWave, E: float, form: str = "reduced") -> float:
    """Cost per unit time of the traveling wave; ``+inf`` if the profile touches 0 or 1."""
    rho = wave.profile
    if rho.min() <= 0.0 or rho.max() >= 1.0:
        return float("inf")
    if form == "reduced":
        return float(_reduced(rho, wave.v, wave.m, E, wave.jbar))
    if form == "lattice":
        return _lattice(rho, wave.v, wave.m, E, wave.jbar)
    raise ValueError(f"unknown form {form!r}; use 'reduced' or 'lattice'")


def unroll(wave: TravelingWave, n_periods: int = 1) -> DensityPath:
    """Space-time path ``rho(y - v t)`` shifted by one cell per step of length ``dy / |v|``.

    The face current ``jbar + v (rho_upwind - m)`` makes the discrete
    continuity equation hold exactly.  For ``v = 0`` a static path on
    ``[0, 1]`` is returned.
    """
    M = wave.M
    rho = wave.profile
    if wave.v == 0.0:
        times = np.linspace(0.0, 1.0, 5)
        levels = np.repeat(rho[None, :], 5, axis=0)
        j = np.full((4, M, 1), wave.jbar)
        return DensityPath(times, levels, j, 1)
    sgn = 1 if wave.v > 0 else -1
    dt = (1.0 / M) / abs(wave.v)
    steps = M * n_periods
    times = dt * np.arange(steps + 1)
    levels = np.stack([np.roll(rho, sgn * n) for n in range(steps + 1)])
    up = levels[:-1] if sgn > 0 else np.roll(levels[:-1], -1, axis=1)
    j = (wave.jbar + wave.v * (up - wave.m))[..., None]
    return DensityPath(times, levels, j, 1)


# --------------------------------------------------------------------------
# optimisation


def _project(y, m, lo, hi):
    """Euclidean projection onto ``{mean = m, lo <= rho <= hi}``."""
    def mean_at(tau):
        return np.clip(y - tau, lo, hi).mean() - m

    a, b = y.min() - hi, y.max() - lo
    for _ in range(200):
        c = 0.5 * (a + b)
        if mean_at(c) > 0:
            a = c
        else:
            b = c
        if b - a < 1e-16:
            break
    out = np.clip(y - 0.5 * (a + b), lo, hi)
    # remove the residual rounding in the mean on interior nodes
    free = (out > lo) & (out < hi)
    if free.any():
        out[free] -= (out.mean() - m) * out.size / free.sum()
    return out


def _preconditioner(M, m, E, jbar):
    s = m * (1 - m)
    k = np.fft.fftfreq(M, d=1.0 / M)
    lap = (2 - 2 * np.cos(2 * np.pi * k / M)) * M * M
    curv = abs(E) ** 2 / 2 + jbar**2 / (2 * s * s) + 1.0
    return 1.0 / ((lap / (2 * s) + curv) / M)


def _descend(rho, m, E, jbar, delta, max_iter, tol, n_modes=None):
    M = rho.size
    P = _preconditioner(M, m, E, jbar)
    if n_modes is not None:
        k = np.abs(np.fft.fftfreq(M, d=1.0 / M))
        P = np.where(k <= n_modes, P, 0.0)
    lo, hi = delta, 1 - delta
    rho = _project(rho, m, lo, hi)
    v = optimal_speed(rho, m, E, jbar)
    f, g = _reduced(rho, v, m, E, jbar, grad=True)
    step = 1.0
    stall = 0
    it = 0
    for it in range(1, max_iter + 1):
        d = -np.real(np.fft.ifft(np.fft.fft(g) * P))
        d -= d.mean()
        if not np.any(d):
            return rho, v, f, it, "converged"
        while True:
            trial = _project(rho + step * d, m, lo, hi)
            vt = optimal_speed(trial, m, E, jbar)
            ft = _reduced(trial, vt, m, E, jbar)
            if ft <= f + 1e-4 * np.dot(g, trial - rho):
                break
            step *= 0.5
            if step < 1e-12:
                return rho, v, f, it, "stagnated"
        decrease = f - ft
        rho, v = trial, vt
        f, g = _reduced(rho, v, m, E, jbar, grad=True)
        step = min(step * 2.0, 1.0)
        stall = stall + 1 if decrease <= tol * max(1.0, abs(f)) else 0
        if stall >= 5:
            return rho, v, f, it, "converged"
    return rho, v, f, it, "max_iter"


def _starts(m, M, restarts, seed, delta):
    """Flat start, smooth bumps, a cosine ansatz and random smooth profiles."""
    rng = np.random.default_rng(seed)
    y = np.arange(M) / M
    room = min(m - delta, 1 - delta - m)
    out = [np.full(M, float(m))]
    k = 1
    while len(out) < restarts:
        kind = k % 3
        amp = room * rng.uniform(0.3, 0.95)
        if kind == 1:
            width = rng.uniform(0.05, 0.3)
            centre = rng.uniform()
            dist = (y - centre + 0.5) % 1.0 - 0.5
            bump = np.exp(-0.5 * (dist / width) ** 2)
            bump -= bump.mean()
            prof = m + amp * np.sign(rng.uniform(-1, 1)) * bump / np.abs(bump).max()
        elif kind == 2:
            prof = m + amp * np.cos(2 * np.pi * (y - rng.uniform()))
        else:
            prof = np.zeros(M)
            for q in range(1, 5):
                prof += rng.normal() / q**2 * np.cos(2 * np.pi * q * y + rng.uniform(0, 2 * np.pi))
            prof = m + amp * prof / max(np.abs(prof).max(), 1e-12)
        out.append(prof)
        k += 1
    return out


@dataclass
class TWResult:
    wave: TravelingWave
    rate: float
    constant_rate: float
    restarts: list = field(default_factory=list, repr=False)
    status: str = "converged"

    @property
    def gap(self) -> float:
        return self.constant_rate - self.rate

    @property
    def relative_gap(self) -> float:
        return self.gap / self.constant_rate if self.constant_rate > 0 else 0.0


def minimize_tw(m: float, E: float, jbar: float, restarts: int = 8, M: int = 128,
                seed: int = 0, delta: float = 1e-4, max_iter: int = 4000, tol: float = 1e-14,
                n_modes: int | None = None) -> TWResult:
    """Best traveling wave over deterministic multi-start projected-gradient descent.

    The speed is eliminated analytically at every iterate; descent
    directions are preconditioned by the inverse of ``-Lap / (2 sigma(m)) +
    c`` and projected onto equal mass and ``[delta, 1 - delta]``.  With
    ``n_modes`` the search is restricted to the first Fourier modes.  The
    flat profile is always the first start, so the returned rate never
    exceeds the constant-profile rate.
    """
    const = constant_profile_rate(m, E, jbar)
    best = None
    records = []
    status_best = "converged"
    for r, start in enumerate(_starts(m, M, max(1, restarts), seed, delta)):
        rho, v, f, it, status = _descend(start, m, E, jbar, delta, max_iter, tol, n_modes)
        if r == 0:
            rho, v, f = np.full(M, float(m)), 0.0, const
        records.append({"restart": r, "rate": f, "iterations": it, "status": status,
                        "amplitude": float(np.abs(rho - m).max()), "v": v})
        if best is None or f < best[2]:
            best = (rho, v, f)
            status_best = status
    rho, v, f = best
    if status_best == "stagnated":
        warnings.warn("traveling-wave descent stagnated; returning the best iterate found")
    wave = TravelingWave(rho, v, m, jbar)
    return TWResult(wave, float(min(f, const)), const, records, status_best)


# --------------------------------------------------------------------------
# scans


@dataclass
class PhaseScan:
    m: float
    E_grid: np.ndarray
    j_grid: np.ndarray
    rows: list
    gap_tol: float

    def gap_table(self) -> np.ndarray:
        """Gaps indexed ``[j_index, E_index]``."""
        tab = np.zeros((self.j_grid.size, self.E_grid.size))
        for r in self.rows:
            tab[r["j_index"], r["E_index"]] = r["gap"]
        return tab

    def thresholds(self) -> list[dict]:
        """Per ``jbar`` bracket ``(E_below, E_above)`` of the first positive gap and up-closure."""
        tab = self.gap_table()
        out = []
        for i, jb in enumerate(self.j_grid):
            pos = tab[i] > self.gap_tol
            first = int(np.argmax(pos)) if pos.any() else None
            out.append({
                "jbar": float(jb),
                "E_below": float(self.E_grid[first - 1]) if first else None,
                "E_above": float(self.E_grid[first]) if first is not None else None,
                "up_closed": bool(pos[first:].all()) if first is not None else True,
                "stability_threshold": stability_threshold(self.m, jb),
            })
        return out

    def to_csv(self, path) -> None:
        keys = ["m", "E", "jbar", "constant_rate", "tw_rate", "gap", "relative_gap", "v",
                "amplitude", "profile_file"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow(r)

    def thresholds_to_csv(self, path) -> None:
        rows = self.thresholds()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


def phase_scan(m: float, E_grid, j_grid, restarts: int = 6, M: int = 96, seed: int = 0,
               gap_tol: float = 1e-8, profile_dir=None, map_fn=map, **kw) -> PhaseScan:
    """Gap between constant and best traveling-wave rates over an ``(E, jbar)`` grid.

    ``map_fn`` may be a parallel map; cells are returned in grid order.
    """
    E_grid = np.asarray(E_grid, dtype=float)
    j_grid = np.asarray(j_grid, dtype=float)
    cells = [(i, a, jb, e, ee) for i, jb in enumerate(j_grid) for a, (e, ee)
             in enumerate(zip(range(E_grid.size), E_grid))]
    args = [(m, ee, jb, restarts, M, seed, kw) for (_, _, jb, _, ee) in cells]
    results = list(map_fn(_scan_cell, args))
    rows = []
    for (i, a, jb, _, ee), res in zip(cells, results):
        row = {"m": m, "E": ee, "jbar": jb, "constant_rate": res.constant_rate,
               "tw_rate": res.rate, "gap": max(res.gap, 0.0), "relative_gap": res.relative_gap,
               "v": res.wave.v, "amplitude": res.wave.amplitude, "j_index": i, "E_index": a,
               "profile_file": ""}
        if profile_dir is not None:
            name = f"profile_E{ee:g}_j{jb:g}.csv"
            res.wave.to_csv(Path(profile_dir) / name)
            row["profile_file"] = name
        rows.append(row)
    return PhaseScan(m, E_grid, j_grid, rows, gap_tol)


def _scan_cell(args):
    m, E, jb, restarts, M, seed, kw = args
    return minimize_tw(m, E, jb, restarts=restarts, M=M, seed=seed, **kw)
