"""External fields on the torus and their bond line integrals.

A field is a vectorised callable ``E(x)`` mapping positions of shape
``(..., d)`` to vectors of the same shape.  Time-periodic perturbations are
finite sums ``F(t, x) = sum_k cos(2 pi n_k t / T + phase_k) G_k(x)``, which keeps
the microscopic simulator free of Python callbacks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .lattice import TorusGeometry

__all__ = [
    "Perturbation",
    "FieldSpec",
    "line_integral",
    "bond_line_integrals",
    "gradient",
    "divergence",
    "PRESETS",
    "field_from_preset",
]

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)
_GL_NODES = 0.5 * (_GL_NODES + 1.0)
_GL_WEIGHTS = 0.5 * _GL_WEIGHTS

VectorField = Callable[[np.ndarray], np.ndarray]


def _zero(x):
    return np.zeros(np.shape(x), dtype=np.result_type(x, float))


def line_integral(E: VectorField, start, displacement) -> np.ndarray:
    """Integral of ``E . dl`` along the straight segments ``start -> start + displacement``.

    Uses 8-point Gauss-Legendre quadrature; ``start`` and ``displacement``
    broadcast over leading axes with trailing dimension ``d``.
    """
    start = np.asarray(start, dtype=float)
    disp = np.asarray(displacement, dtype=float)
    pts = start[..., None, :] + _GL_NODES[:, None] * disp[..., None, :]
    vals = np.asarray(E(pts), dtype=float)
    return np.einsum("...qd,...d,q->...", vals, disp, _GL_WEIGHTS)


def bond_line_integrals(E: VectorField, geometry: TorusGeometry) -> np.ndarray:
    """Line integral of ``E`` along every ordered bond; antisymmetric by construction."""
    g = geometry
    fwd = g.forward_bonds
    values = np.empty(g.n_bonds)
    values[fwd] = line_integral(E, g.positions[g.bond_source[fwd]], g.bond_displacement[fwd])
    values[g.bond_reverse[fwd]] = -values[fwd]
    return values


def _derivative(f, x, k, h=1e-20):
    """d f / d x_k by complex step, falling back to a 4th-order stencil."""
    x = np.asarray(x, dtype=float)
    step = np.zeros(x.shape[-1])
    try:
        step[k] = h
        val = f(x + 1j * step)
        if np.iscomplexobj(val):
            return np.imag(val) / h
    except (TypeError, ValueError):
        pass
    h = 1e-3
    step[:] = 0.0
    step[k] = h
    return (-f(x + 2 * step) + 8 * f(x + step) - 8 * f(x - step) + f(x - 2 * step)) / (12 * h)


def gradient(U, x) -> np.ndarray:
    """Gradient of a scalar field ``U(x)``, shape ``x.shape``."""
    x = np.asarray(x, dtype=float)
    return np.stack([_derivative(U, x, k) for k in range(x.shape[-1])], axis=-1)


def divergence(V, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return sum(_derivative(lambda y: V(y)[..., k], x, k) for k in range(x.shape[-1]))


@dataclass(frozen=True)
class Perturbation:
    """One separable term ``cos(2 pi harmonic t / period + phase) * spatial(x)``."""

    spatial: VectorField
    period: float
    harmonic: int = 1
    phase: float = 0.0

    def modulation(self, t):
        return np.cos(2 * np.pi * self.harmonic * np.asarray(t) / self.period + self.phase)


@dataclass(frozen=True)
class FieldSpec:
    """Driving field ``E(x)`` plus an optional periodic perturbation ``F(t, x)``.

    ``U`` and ``E_tilde`` record an orthogonal decomposition
    ``E = -grad U + E_tilde`` when one is known.
    """

    d: int
    E: VectorField = _zero
    U: Callable | None = None
    E_tilde: VectorField | None = None
    perturbation: Sequence[Perturbation] = field(default_factory=tuple)
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "perturbation", tuple(self.perturbation))
        periods = {p.period for p in self.perturbation if p.harmonic != 0}
        if len(periods) > 1:
            raise ValueError("all perturbation terms must share one period")

    @property
    def is_static(self) -> bool:
        return not self.perturbation

    @property
    def period(self) -> float | None:
        for p in self.perturbation:
            if p.harmonic != 0:
                return p.period
        return None

    def F(self, t, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for p in self.perturbation:
            out = out + p.modulation(t) * np.asarray(p.spatial(x), dtype=float)
        return out

    def total(self, t, x) -> np.ndarray:
        """``E(x) + F(t, x)``."""
        x = np.asarray(x, dtype=float)
        return np.asarray(self.E(x), dtype=float) + self.F(t, x)

    def check_grid(self, M: int = 32) -> np.ndarray:
        axes = [np.arange(M) / M] * self.d
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.d)

    def sup_norms(self, M: int = 64) -> tuple[float, float]:
        """Grid estimates of ``sup |E|`` and ``sup_t |F(t, .)|``."""
        x = self.check_grid(M)
        e = float(np.max(np.linalg.norm(self.E(x), axis=-1), initial=0.0))
        f = sum(float(np.max(np.linalg.norm(p.spatial(x), axis=-1), initial=0.0))
                for p in self.perturbation)
        return e, f

    def check_decomposition(self, M: int = 32, tol: float = 1e-10) -> dict:
        """Verify ``E = -grad U + E_tilde``, ``div E_tilde = 0`` and orthogonality."""
        if self.U is None or self.E_tilde is None:
            raise ValueError("field carries no orthogonal decomposition")
        x = self.check_grid(M)
        gU = gradient(self.U, x)
        Et = np.asarray(self.E_tilde(x), dtype=float)
        report = {
            "reconstruction": float(np.max(np.abs(self.E(x) - (-gU + Et)))),
            "divergence": float(np.max(np.abs(divergence(self.E_tilde, x)))),
            "orthogonality": float(np.max(np.abs(np.sum(gU * Et, axis=-1)))),
        }
        report["ok"] = all(v <= tol for v in report.values())
        return report

    # constructors -----------------------------------------------------

    @classmethod
    def zero(cls, d: int) -> "FieldSpec":
        return cls(d, U=lambda x: np.zeros(np.shape(x)[:-1], dtype=np.result_type(x, float)),
                   E_tilde=_zero, name="zero")

    @classmethod
    def constant(cls, vector) -> "FieldSpec":
        c = np.atleast_1d(np.asarray(vector, dtype=float))
        return cls(len(c), E=lambda x: np.broadcast_to(c, np.shape(x)).astype(float),
                   U=lambda x: np.zeros(np.shape(x)[:-1], dtype=np.result_type(x, float)),
                   E_tilde=lambda x: np.broadcast_to(c, np.shape(x)).astype(float),
                   name=f"constant{tuple(c.tolist())}")

    @classmethod
    def gradient_field(cls, U, d: int, name: str = "gradient") -> "FieldSpec":
        """``E = -grad U`` with the gradient taken by complex step."""
        return cls(d, E=lambda x: -gradient(U, x), U=U, E_tilde=_zero, name=name)

    def with_perturbation(self, *terms: Perturbation) -> "FieldSpec":
        return FieldSpec(self.d, self.E, self.U, self.E_tilde,
                         tuple(self.perturbation) + terms, self.name)


def _cos_potential(amplitude=1.0, d=1):
    def U(x):
        return amplitude * np.cos(2 * np.pi * x[..., 0])

    def E(x):
        x = np.asarray(x)
        out = np.zeros(x.shape, dtype=np.result_type(x, float))
        out[..., 0] = 2 * np.pi * amplitude * np.sin(2 * np.pi * x[..., 0])
        return out

    return FieldSpec(d, E=E, U=U, E_tilde=_zero, name=f"cos_potential({amplitude})")


def _sine(amplitude=1.0, d=1):
    def E(x):
        x = np.asarray(x)
        out = np.zeros(x.shape, dtype=np.result_type(x, float))
        out[..., 0] = amplitude * np.sin(2 * np.pi * x[..., 0])
        return out

    return FieldSpec(d, E=E, name=f"sine({amplitude})")


def _shear(amplitude=1.0, d=2):
    if d < 2:
        raise ValueError("shear field needs d >= 2")

    def E(x):
        x = np.asarray(x)
        out = np.zeros(x.shape, dtype=np.result_type(x, float))
        out[..., 0] = amplitude * np.sin(2 * np.pi * x[..., 1])
        return out

    return FieldSpec(d, E=E, U=lambda x: np.zeros(np.shape(x)[:-1], dtype=np.result_type(x, float)),
                     E_tilde=E, name=f"shear({amplitude})")


def _traveling_cos(amplitude=1.0, period=0.1, d=1):
    """``F(t, x) = a cos(2 pi (x_1 - t / period)) e_1`` split into two separable terms."""
    def cos_part(x):
        out = np.zeros(np.shape(x))
        out[..., 0] = amplitude * np.cos(2 * np.pi * np.asarray(x)[..., 0])
        return out

    def sin_part(x):
        out = np.zeros(np.shape(x))
        out[..., 0] = amplitude * np.sin(2 * np.pi * np.asarray(x)[..., 0])
        return out

    return (Perturbation(cos_part, period, 1, 0.0),
            Perturbation(sin_part, period, 1, -np.pi / 2))


PRESETS = {
    "zero": lambda d=1, **_: FieldSpec.zero(d),
    "constant": lambda d=1, value=1.0, **_: FieldSpec.constant(
        np.broadcast_to(np.asarray(value, dtype=float), (d,))),
    "cos_potential": lambda d=1, amplitude=1.0, **_: _cos_potential(amplitude, d),
    "sine": lambda d=1, amplitude=1.0, **_: _sine(amplitude, d),
    "shear": lambda d=2, amplitude=1.0, **_: _shear(amplitude, d),
}


def field_from_preset(spec: dict | str, d: int = 1) -> FieldSpec:
    """Build a field from a preset description.

    ``spec`` is a preset name or a dict ``{"preset": name, ...params,
    "perturbation": {"preset": "traveling_cos", "amplitude": a, "period": T}}``.
    """
    if isinstance(spec, str):
        spec = {"preset": spec}
    spec = dict(spec)
    name = spec.pop("preset")
    pert = spec.pop("perturbation", None)
    if name not in PRESETS:
        raise ValueError(f"unknown field preset {name!r}; choose from {sorted(PRESETS)}")
    fs = PRESETS[name](d=d, **spec)
    if pert:
        pert = dict(pert)
        kind = pert.pop("preset", "traveling_cos")
        if kind != "traveling_cos":
            raise ValueError(f"unknown perturbation preset {kind!r}")
        fs = fs.with_perturbation(*_traveling_cos(d=d, **pert))
    return fs
