"""Discrete torus geometry, particle configurations and local exchange moves.

Sites are indexed row-major over their integer coordinates.  Ordered
nearest-neighbour bonds are indexed as ``site * 2d + direction`` where
direction ``2k`` points along ``+e_k`` and ``2k + 1`` along ``-e_k``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import ndimage

__all__ = [
    "TorusGeometry",
    "Configuration",
    "swap",
    "empirical_density",
    "pair_density",
    "coarse_grain",
    "configuration_from_profile",
]


@dataclass(frozen=True)
class TorusGeometry:
    """The discrete torus with ``N`` sites per side in ``d`` dimensions."""

    d: int
    N: int

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.d}")
        if self.N < 2:
            raise ValueError(f"need at least 2 sites per side, got {self.N}")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.d

    @property
    def n_sites(self) -> int:
        return self.N**self.d

    @property
    def n_bonds(self) -> int:
        return 2 * self.d * self.n_sites

    @cached_property
    def coords(self) -> np.ndarray:
        """Integer coordinates of every site, shape ``(n_sites, d)``."""
        idx = np.unravel_index(np.arange(self.n_sites), self.shape)
        return np.stack(idx, axis=1).astype(np.int64)

    @cached_property
    def positions(self) -> np.ndarray:
        """Site positions in ``[0, 1)^d``."""
        return self.coords / self.N

    @cached_property
    def neighbors(self) -> np.ndarray:
        """``neighbors[s, dir]`` is the site reached from ``s`` along ``dir``."""
        nbr = np.empty((self.n_sites, 2 * self.d), dtype=np.int64)
        for k in range(self.d):
            for sign, col in ((1, 2 * k), (-1, 2 * k + 1)):
                c = self.coords.copy()
                c[:, k] = (c[:, k] + sign) % self.N
                nbr[:, col] = np.ravel_multi_index(c.T, self.shape)
        nbr.setflags(write=False)
        return nbr

    @cached_property
    def bond_source(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_sites, dtype=np.int64), 2 * self.d)

    @cached_property
    def bond_target(self) -> np.ndarray:
        return self.neighbors.ravel()

    @cached_property
    def bond_direction(self) -> np.ndarray:
        return np.tile(np.arange(2 * self.d, dtype=np.int64), self.n_sites)

    @cached_property
    def bond_reverse(self) -> np.ndarray:
        """Index of the reversed bond ``(y, x)`` for every bond ``(x, y)``."""
        return self.bond_target * 2 * self.d + (self.bond_direction ^ 1)

    @cached_property
    def bond_displacement(self) -> np.ndarray:
        """Unwrapped displacement ``y - x`` of every bond, shape ``(n_bonds, d)``."""
        disp = np.zeros((2 * self.d, self.d))
        for k in range(self.d):
            disp[2 * k, k] = 1.0 / self.N
            disp[2 * k + 1, k] = -1.0 / self.N
        return disp[self.bond_direction]

    @cached_property
    def forward_bonds(self) -> np.ndarray:
        """Bonds pointing along ``+e_k``; one representative per unordered pair."""
        return np.flatnonzero(self.bond_direction % 2 == 0)

    def site_index(self, coord) -> int:
        return int(np.ravel_multi_index(tuple(np.mod(coord, self.N)), self.shape))

    def bond_index(self, site: int, direction: int) -> int:
        if not 0 <= site < self.n_sites or not 0 <= direction < 2 * self.d:
            raise ValueError(f"no bond at site {site}, direction {direction}")
        return site * 2 * self.d + direction

    def find_bond(self, x: int, y: int) -> int:
        """Index of the ordered bond from site ``x`` to site ``y``."""
        hits = np.flatnonzero(self.neighbors[x] == y)
        if hits.size == 0:
            raise ValueError(f"sites {x} and {y} are not nearest neighbours")
        return self.bond_index(x, int(hits[0]))

    def check_bond(self, bond: int) -> int:
        bond = int(bond)
        if not 0 <= bond < self.n_bonds:
            raise ValueError(f"bond index {bond} outside [0, {self.n_bonds})")
        return bond


@dataclass(frozen=True)
class Configuration:
    """Occupation numbers on the torus; immutable."""

    geometry: TorusGeometry
    occupancy: np.ndarray = field(repr=False)

    def __post_init__(self):
        occ = np.ascontiguousarray(self.occupancy, dtype=np.uint8).ravel()
        if occ.size != self.geometry.n_sites:
            raise ValueError(
                f"expected {self.geometry.n_sites} sites, got {occ.size}")
        if occ.max(initial=0) > 1:
            raise ValueError("occupation numbers must be 0 or 1")
        occ = occ.copy()
        occ.setflags(write=False)
        object.__setattr__(self, "occupancy", occ)

    @property
    def K(self) -> int:
        return int(self.occupancy.sum())

    @property
    def density(self) -> float:
        return self.K / self.geometry.n_sites

    def grid(self) -> np.ndarray:
        return self.occupancy.reshape(self.geometry.shape)

    def to_bitstring(self) -> str:
        return "".join("1" if v else "0" for v in self.occupancy)

    @classmethod
    def from_bitstring(cls, geometry: TorusGeometry, bits: str) -> "Configuration":
        bits = "".join(bits.split())
        if set(bits) - {"0", "1"}:
            raise ValueError("bit-string may only contain '0' and '1'")
        return cls(geometry, np.frombuffer(bits.encode(), dtype=np.uint8) - ord("0"))

    @classmethod
    def empty(cls, geometry: TorusGeometry) -> "Configuration":
        return cls(geometry, np.zeros(geometry.n_sites, dtype=np.uint8))

    @classmethod
    def full(cls, geometry: TorusGeometry) -> "Configuration":
        return cls(geometry, np.ones(geometry.n_sites, dtype=np.uint8))

    @classmethod
    def random(cls, geometry: TorusGeometry, K: int, rng=None) -> "Configuration":
        """Uniform configuration with exactly ``K`` particles."""
        if not 0 <= K <= geometry.n_sites:
            raise ValueError(f"K={K} outside [0, {geometry.n_sites}]")
        rng = np.random.default_rng(rng)
        occ = np.zeros(geometry.n_sites, dtype=np.uint8)
        occ[rng.choice(geometry.n_sites, size=K, replace=False)] = 1
        return cls(geometry, occ)

    def __eq__(self, other):
        if not isinstance(other, Configuration):
            return NotImplemented
        return (self.geometry == other.geometry
                and np.array_equal(self.occupancy, other.occupancy))

    def __hash__(self):
        return hash((self.geometry, self.occupancy.tobytes()))


def swap(config: Configuration, bond: int) -> Configuration:
    """Exchange the occupation variables at the two ends of ``bond``."""
    g = config.geometry
    bond = g.check_bond(bond)
    x, y = g.bond_source[bond], g.bond_target[bond]
    occ = config.occupancy.copy()
    occ[x], occ[y] = occ[y], occ[x]
    return Configuration(g, occ)


def empirical_density(config: Configuration) -> np.ndarray:
    """Mass ``eta_x / N^d`` carried by each site, on the site grid."""
    return config.grid() / config.geometry.n_sites


def pair_density(config: Configuration, f) -> float:
    """Integral of ``f`` against the empirical density.

    ``f`` is either a callable on positions ``(n_sites, d)`` or an array of
    site values.  Object arrays (e.g. of ``Fraction``) are summed exactly.
    """
    g = config.geometry
    values = f(g.positions) if callable(f) else np.asarray(f).ravel()
    occ = config.occupancy.astype(np.int64)
    if values.dtype == object:
        return sum(v for v, o in zip(values, occ) if o) / g.n_sites
    return float(np.dot(occ, values)) / g.n_sites


def coarse_grain(config: Configuration, eps: float) -> np.ndarray:
    """Average density in the closed periodic box of half-width ``eps``.

    The box holds ``(2r + 1)^d`` sites with ``r = floor(eps N)`` and that
    site count is the divisor, so the spatial mean is exactly ``K / N^d``.
    """
    if not 0 < eps < 0.5:
        raise ValueError(f"eps must lie in (0, 1/2), got {eps}")
    r = int(np.floor(eps * config.geometry.N))
    return box_average(config.grid().astype(float), r)


def box_average(values: np.ndarray, r: int) -> np.ndarray:
    """Periodic moving average over boxes of ``2r + 1`` sites per axis."""
    return ndimage.uniform_filter(values, size=2 * r + 1, mode="wrap")


def configuration_from_profile(geometry: TorusGeometry, profile, K: int | None = None,
                               rng=None) -> Configuration:
    """Configuration whose empirical density approximates ``profile``.

    In one dimension particles are placed deterministically by rounding the
    cumulative mass; in higher dimension sites are drawn independently with
    probability ``profile(x)`` and the count is then corrected to ``K`` by
    uniform additions or removals.
    """
    g = geometry
    rho = profile(g.positions) if callable(profile) else np.asarray(profile, float).ravel()
    rho = np.clip(np.asarray(rho, dtype=float).ravel(), 0.0, 1.0)
    if K is None:
        K = int(round(rho.sum()))
    if g.d == 1:
        cum = np.concatenate([[0.0], np.cumsum(rho)])
        cum *= K / cum[-1] if cum[-1] > 0 else 0.0
        marks = np.floor(cum + 0.5).astype(np.int64)
        occ = np.minimum(np.diff(marks), 1).astype(np.uint8)
        deficit = K - int(occ.sum())
        if deficit:
            holes = np.flatnonzero(occ == 0)
            order = holes[np.argsort(-rho[holes], kind="stable")]
            occ[order[:deficit]] = 1
        return Configuration(g, occ)
    rng = np.random.default_rng(rng)
    occ = (rng.random(g.n_sites) < rho).astype(np.uint8)
    diff = K - int(occ.sum())
    if diff > 0:
        occ[rng.choice(np.flatnonzero(occ == 0), size=diff, replace=False)] = 1
    elif diff < 0:
        occ[rng.choice(np.flatnonzero(occ == 1), size=-diff, replace=False)] = 0
    return Configuration(g, occ)
