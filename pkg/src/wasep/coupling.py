"""Reflection coupling of drifted Brownian motions on the torus.

Both marginals follow the Euler-Maruyama scheme for ``dZ = G(t, Z) dt +
sqrt(2) dW``.  Before coupling, the second copy uses the noise mirrored
across the hyperplane orthogonal to the shortest separation vector; once
the separation drops below ``2 sqrt(2 dt)`` the copies are merged and move
together.

The generator ``Lap + G . grad`` has diffusion coefficient 2, so the
noise enters as ``sqrt(2) dW`` directly instead of through a time change
of a standard Brownian motion.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .fields import FieldSpec
from .hydro import DensityField, evolve, l1_contraction_rate

__all__ = [
    "DriftField",
    "CoupledRun",
    "TailFit",
    "FeynmanKacResult",
    "simulate_coupled",
    "coupling_tail_fit",
    "feynman_kac_check",
    "torus_displacement",
]


@dataclass(frozen=True)
class DriftField:
    """Bounded drift ``G(t, x)`` built from a ``FieldSpec`` (``E + F``)."""

    field_spec: FieldSpec
    check_points: int = 256
    bound: float = field(init=False)

    def __post_init__(self):
        fs = self.field_spec
        x = fs.check_grid(self.check_points if fs.d == 1 else 32)
        period = fs.period or 1.0
        ts = np.linspace(0.0, period, 17) if not fs.is_static else [0.0]
        b = max(float(np.max(np.linalg.norm(fs.total(t, x), axis=-1), initial=0.0)) for t in ts)
        object.__setattr__(self, "bound", b)

    @property
    def d(self) -> int:
        return self.field_spec.d

    def __call__(self, t, x):
        return self.field_spec.total(t, x)

    @classmethod
    def zero(cls, d: int = 1) -> "DriftField":
        return cls(FieldSpec.zero(d))

    @classmethod
    def constant(cls, vector) -> "DriftField":
        return cls(FieldSpec.constant(vector))

    @classmethod
    def sine(cls, M: float, d: int = 1) -> "DriftField":
        """``G(x) = M sin(2 pi x_1) e_1``."""
        from .fields import PRESETS
        return cls(PRESETS["sine"](d=d, amplitude=M))


def torus_displacement(x, y) -> np.ndarray:
    """Shortest representative of ``y - x`` in ``[-1/2, 1/2)^d``."""
    return (np.asarray(y) - np.asarray(x) + 0.5) % 1.0 - 0.5


@dataclass
class CoupledRun:
    """Coupling times of an ensemble (``inf`` when not coupled before ``T``)."""

    tau: np.ndarray
    T: float
    dt: float
    X: np.ndarray = field(repr=False)
    Y: np.ndarray = field(repr=False)
    seed: int | None = None
    bound: float = 0.0

    @property
    def coupled_fraction(self) -> float:
        return float(np.isfinite(self.tau).mean())

    def survival(self, t_grid) -> np.ndarray:
        """Fraction of replicas with ``tau > t``."""
        t = np.asarray(t_grid, dtype=float)
        srt = np.sort(self.tau)
        return 1.0 - np.searchsorted(srt, t, side="right") / srt.size


def simulate_coupled(x, y, T: float, drift: DriftField, dt: float = 1e-3, seed: int = 0,
                     n_replicas: int = 1, threshold: float | None = None) -> CoupledRun:
    """Run ``n_replicas`` reflection-coupled pairs started at ``x`` and ``y``.

    ``x`` and ``y`` are points of the torus (shape ``(d,)``) or per-replica
    arrays of shape ``(n_replicas, d)``.
    """
    d = drift.d
    if n_replicas < 1:
        raise ValueError("need at least one replica")
    X = np.broadcast_to(np.asarray(x, dtype=float).reshape(-1, d), (n_replicas, d)) % 1.0
    Y = np.broadcast_to(np.asarray(y, dtype=float).reshape(-1, d), (n_replicas, d)) % 1.0
    X, Y = X.copy(), Y.copy()
    thr = 2 * np.sqrt(2 * dt) if threshold is None else threshold
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    tau = np.full(n_replicas, np.inf)
    sep = np.linalg.norm(torus_displacement(X, Y), axis=1)
    identical = sep == 0.0
    tau[identical] = 0.0
    live = ~identical
    n_steps = int(np.ceil(T / dt - 1e-9))
    sq = np.sqrt(2 * dt)
    for n in range(n_steps):
        t = n * dt
        dW = rng.standard_normal((n_replicas, d))
        GX = drift(t, X)
        coupled = ~live
        Xn = X + GX * dt + sq * dW
        if live.any():
            idx = np.flatnonzero(live)
            disp = torus_displacement(X[idx], Y[idx])
            e = disp / np.linalg.norm(disp, axis=1, keepdims=True)
            mirrored = dW[idx] - 2 * e * np.sum(e * dW[idx], axis=1, keepdims=True)
            Y[idx] = Y[idx] + drift(t, Y[idx]) * dt + sq * mirrored
        X = Xn % 1.0
        Y = Y % 1.0
        Y[coupled] = X[coupled]
        if live.any():
            idx = np.flatnonzero(live)
            dist = np.linalg.norm(torus_displacement(X[idx], Y[idx]), axis=1)
            hit = idx[dist < thr]
            tau[hit] = t + dt
            Y[hit] = X[hit]
            live[hit] = False
        if not live.any():
            break
    return CoupledRun(tau, T, dt, X, Y, seed, drift.bound)


@dataclass
class TailFit:
    A: float
    rate: float
    rate_ci: tuple
    r2: float
    t: np.ndarray = field(repr=False)
    survival: np.ndarray = field(repr=False)
    survival_ci: np.ndarray = field(repr=False)
    tail_mask: np.ndarray = field(repr=False)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "surviving_fraction", "ci_low", "ci_high", "in_tail"])
            for row in zip(self.t, self.survival, self.survival_ci[0], self.survival_ci[1],
                           self.tail_mask):
                w.writerow([f"{row[0]:.6g}", f"{row[1]:.8g}", f"{row[2]:.8g}",
                            f"{row[3]:.8g}", int(row[4])])

    def to_json(self, path=None) -> dict:
        rec = {"A": self.A, "lambda": self.rate, "lambda_ci": list(self.rate_ci),
               "r2": self.r2, "tail_points": int(self.tail_mask.sum())}
        if path is not None:
            with open(path, "w") as fh:
                json.dump(rec, fh, indent=2)
        return rec


def coupling_tail_fit(tau, t_grid, tail_start: float = 0.5, min_survivors: int = 30,
                      level: float = 0.95) -> TailFit:
    """Log-linear fit ``P[tau > t] ~ A exp(-lambda t)`` on the tail of the survival curve.

    The tail consists of grid points where the survival fraction is at most
    ``tail_start`` and at least ``min_survivors`` replicas remain.  The
    interval for ``lambda`` comes from the regression standard error.
    """
    tau = np.asarray(tau.tau if isinstance(tau, CoupledRun) else tau, dtype=float)
    n = tau.size
    if n == 0:
        raise ValueError("empty ensemble")
    t = np.asarray(t_grid, dtype=float)
    srt = np.sort(tau)
    surv = 1.0 - np.searchsorted(srt, t, side="right") / n
    z = stats.norm.ppf(0.5 + level / 2)
    half = z * np.sqrt(surv * (1 - surv) / n)
    ci = np.vstack([np.clip(surv - half, 0, 1), np.clip(surv + half, 0, 1)])
    mask = (surv <= tail_start) & (surv * n >= min_survivors)
    if mask.sum() < 3:
        alive = surv * n >= min_survivors
        if not alive.any():
            warnings.warn("all replicas coupled before the first grid point; fit skipped")
            return TailFit(float("nan"), float("nan"), (float("nan"),) * 2, float("nan"),
                           t, surv, ci, mask)
        warnings.warn("short tail; fitting on all available points")
        mask = alive & (surv > 0)
    res = stats.linregress(t[mask], np.log(surv[mask]))
    dof = max(int(mask.sum()) - 2, 1)
    q = stats.t.ppf(0.5 + level / 2, dof)
    rate = -res.slope
    return TailFit(float(np.exp(res.intercept)), float(rate),
                   (float(rate - q * res.stderr), float(rate + q * res.stderr)),
                   float(res.rvalue**2), t, surv, ci, mask)


# --------------------------------------------------------------------------
# Feynman-Kac dual


@dataclass
class FeynmanKacResult:
    tv_distance: float
    tolerance: float
    monte_carlo: np.ndarray = field(repr=False)
    pde: np.ndarray = field(repr=False)

    @property
    def ok(self) -> bool:
        return self.tv_distance <= self.tolerance


def _sample_density(w0: np.ndarray, n: int, rng) -> np.ndarray:
    M = w0.size
    p = np.clip(w0, 0, None)
    p = p / p.sum()
    cells = rng.choice(M, size=n, p=p)
    return ((cells + rng.uniform(-0.5, 0.5, size=n)) / M) % 1.0


def feynman_kac_check(w0, drift: DriftField, t: float, n_particles: int = 100_000,
                      dt: float = 1e-3, seed: int = 0, scheme_tol: float = 5e-3
                      ) -> FeynmanKacResult:
    """Compare a particle histogram of ``dZ = G dt + sqrt(2) dW`` with the linear PDE.

    ``w0`` holds node values of a probability density on a one-dimensional
    ``M``-point grid.  Particles start uniformly within the cell of their
    node; at time ``t`` they are binned into the same cells.  The PDE is
    solved with linear mobility.  The tolerance adds three times the
    expected Monte Carlo total-variation error to ``scheme_tol``.
    """
    if drift.d != 1:
        raise ValueError("the particle check is implemented in one dimension")
    w0 = np.asarray(w0.values if isinstance(w0, DensityField) else w0, dtype=float).ravel()
    M = w0.size
    if abs(w0.mean() - 1.0) > 1e-8 or w0.min() < 0:
        raise ValueError("w0 must be a probability density (nonnegative, mean 1)")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    Z = _sample_density(w0, n_particles, rng)
    n_steps = int(np.ceil(t / dt - 1e-9))
    h = t / n_steps
    for n in range(n_steps):
        Z = (Z + drift(n * h, Z[:, None])[:, 0] * h
             + np.sqrt(2 * h) * rng.standard_normal(n_particles)) % 1.0
    cells = np.floor(Z * M + 0.5).astype(int) % M
    hist = np.bincount(cells, minlength=M) / n_particles * M
    pde = evolve(DensityField(w0, 1, bounded=False), drift.field_spec, t, store="final",
                 mobility="linear").final.values
    tv = 0.5 * np.abs(hist - pde).mean()
    p = np.clip(pde / M, 0, 1)
    mc = 0.5 * np.sum(np.sqrt(2 / np.pi) * np.sqrt(p * (1 - p) / n_particles))
    return FeynmanKacResult(float(tv), float(3 * mc + scheme_tol), hist, pde)


def feynman_kac_decay(w1, w2, drift: DriftField, horizon: float):
    """``L^1`` distance between two linear Fokker-Planck solutions over time."""
    return l1_contraction_rate(DensityField(w1, 1, bounded=False),
                               DensityField(w2, 1, bounded=False), drift.field_spec,
                               horizon, mobility="linear")


__all__.append("feynman_kac_decay")
