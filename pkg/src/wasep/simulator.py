"""Exact continuous-time simulation of the weakly asymmetric exclusion process.

Static fields use the direct (Gillespie) method with a Fenwick tree over bond
rates.  Time-periodic perturbations are handled by thinning against the
uniform bound ``N^2 exp(max_b (E_N + |F_N|) / 2)``.  Both kernels run in numba
and consume a Philox generator seeded from ``SeedSequence(seed,
spawn_key=(replica,))``, so each replica stream is reproducible on its own.
"""

from __future__ import annotations

import inspect
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .fields import FieldSpec, _GL_NODES, _GL_WEIGHTS, bond_line_integrals
from .lattice import Configuration, TorusGeometry

__all__ = [
    "RateOverflowError",
    "Trajectory",
    "WasepSimulator",
    "bond_rate",
    "simulate",
    "girsanov_log_weight",
    "make_rng",
    "precompute_bond_fields",
]

_REBUILD_EVERY = 1 << 20


class RateOverflowError(RuntimeError):
    """Total jump rate exceeded the sanity bound or became non-finite."""


def make_rng(seed: int, replica: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(replica),))
    return np.random.Generator(np.random.Philox(ss))


# --------------------------------------------------------------------------
# Fenwick tree


@numba.njit(cache=True)
def _fenwick_build(rates, tree):
    n = rates.size
    tree[:] = 0.0
    for i in range(n):
        tree[i + 1] = rates[i]
    for i in range(1, n + 1):
        j = i + (i & -i)
        if j <= n:
            tree[j] += tree[i]


@numba.njit(cache=True)
def _fenwick_add(tree, i, delta):
    n = tree.size - 1
    i += 1
    while i <= n:
        tree[i] += delta
        i += i & -i


@numba.njit(cache=True)
def _fenwick_total(tree):
    n = tree.size - 1
    s = 0.0
    i = n
    while i > 0:
        s += tree[i]
        i -= i & -i
    return s


@numba.njit(cache=True)
def _fenwick_find(tree, u):
    """Smallest index whose inclusive prefix sum exceeds ``u``."""
    n = tree.size - 1
    pos = 0
    step = 1
    while step * 2 <= n:
        step *= 2
    while step > 0:
        nxt = pos + step
        if nxt <= n and tree[nxt] <= u:
            pos = nxt
            u -= tree[nxt]
        step //= 2
    if pos >= n:
        pos = n - 1
    return pos


# --------------------------------------------------------------------------
# kernels


@numba.njit(cache=True)
def _set_rate(b, occ, nbr, two_d, base, rates, tree):
    x = b // two_d
    new = base[b] if (occ[x] == 1 and occ[nbr[b]] == 0) else 0.0
    old = rates[b]
    if new != old:
        rates[b] = new
        _fenwick_add(tree, b, new - old)


@numba.njit(cache=True)
def _refresh_site(s, occ, nbr, two_d, base, rates, tree):
    for k in range(two_d):
        b = s * two_d + k
        _set_rate(b, occ, nbr, two_d, base, rates, tree)
        z = nbr[b]
        _set_rate(z * two_d + (k ^ 1), occ, nbr, two_d, base, rates, tree)


@numba.njit(cache=True)
def _run_direct(rng, occ, rates, tree, state, T, base, nbr, two_d, out_t, out_b):
    """Advance until ``T`` or until the output buffer is full.

    ``state = [t, events_since_rebuild, pending]`` where ``pending`` holds a
    drawn jump time beyond the previous horizon (negative when none), so
    that resuming consumes the random stream exactly as one long run.  Returns the number of recorded
    events and whether the horizon was reached.
    """
    n = 0
    cap = out_t.size
    t = state[0]
    while n < cap:
        total = _fenwick_total(tree)
        if total <= 0.0:
            t = T
            break
        if state[2] >= 0.0:
            t_new = state[2]
        else:
            t_new = t + rng.exponential() / total
        if t_new > T:
            state[2] = t_new
            t = T
            break
        state[2] = -1.0
        b = _fenwick_find(tree, rng.random() * total)
        while rates[b] == 0.0:
            b = _fenwick_find(tree, rng.random() * total)
        t = t_new
        x = b // two_d
        y = nbr[b]
        occ[x] = 0
        occ[y] = 1
        _refresh_site(x, occ, nbr, two_d, base, rates, tree)
        _refresh_site(y, occ, nbr, two_d, base, rates, tree)
        out_t[n] = t
        out_b[n] = b
        n += 1
        state[1] += 1.0
        if state[1] >= _REBUILD_EVERY:
            _fenwick_build(rates, tree)
            state[1] = 0.0
    state[0] = t
    return n, t >= T


@numba.njit(cache=True)
def _update_active(b, occ, nbr, two_d, active, pos, count):
    x = b // two_d
    on = occ[x] == 1 and occ[nbr[b]] == 0
    p = pos[b]
    if on and p < 0:
        active[count[0]] = b
        pos[b] = count[0]
        count[0] += 1
    elif not on and p >= 0:
        last = active[count[0] - 1]
        active[p] = last
        pos[last] = p
        pos[b] = -1
        count[0] -= 1


@numba.njit(cache=True)
def _refresh_active_site(s, occ, nbr, two_d, active, pos, count):
    for k in range(two_d):
        b = s * two_d + k
        _update_active(b, occ, nbr, two_d, active, pos, count)
        _update_active(nbr[b] * two_d + (k ^ 1), occ, nbr, two_d, active, pos, count)


@numba.njit(cache=True)
def _run_thinning(rng, occ, active, pos, count, state, T, EN, FN, harmonic, phase,
                  period, N2, bound, nbr, two_d, out_t, out_b):
    n = 0
    cap = out_t.size
    t = state[0]
    eb = np.exp(bound)
    n_terms = FN.shape[0]
    while n < cap:
        if count[0] == 0:
            t = T
            break
        if state[2] >= 0.0:
            t_cand = state[2]
        else:
            t_cand = t + rng.exponential() / (count[0] * N2 * eb)
        if t_cand > T:
            state[2] = t_cand
            t = T
            break
        state[2] = -1.0
        t = t_cand
        idx = int(rng.random() * count[0])
        if idx >= count[0]:
            idx = count[0] - 1
        b = active[idx]
        f = 0.0
        for k in range(n_terms):
            f += np.cos(2.0 * np.pi * harmonic[k] * t / period + phase[k]) * FN[k, b]
        if rng.random() < np.exp(0.5 * (EN[b] + f) - bound):
            x = b // two_d
            y = nbr[b]
            occ[x] = 0
            occ[y] = 1
            _refresh_active_site(x, occ, nbr, two_d, active, pos, count)
            _refresh_active_site(y, occ, nbr, two_d, active, pos, count)
            out_t[n] = t
            out_b[n] = b
            n += 1
    state[0] = t
    return n, t >= T


# --------------------------------------------------------------------------
# public API


def precompute_bond_fields(field: FieldSpec, geometry: TorusGeometry):
    """Bond integrals ``E_N`` and, per perturbation term, ``G_{k,N}``."""
    if field.d != geometry.d:
        raise ValueError(f"field dimension {field.d} != lattice dimension {geometry.d}")
    EN = bond_line_integrals(field.E, geometry)
    FN = np.array([bond_line_integrals(p.spatial, geometry) for p in field.perturbation])
    return EN, FN.reshape(len(field.perturbation), geometry.n_bonds)


def _bond_F(field: FieldSpec, FN: np.ndarray, t) -> np.ndarray:
    """``F_N(t, b)`` for an array of times, shape ``(len(t), n_bonds)``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.zeros((t.size, FN.shape[1]))
    for k, p in enumerate(field.perturbation):
        out += p.modulation(t)[:, None] * FN[k][None, :]
    return out


def bond_rate(config: Configuration, bond: int, field: FieldSpec, t: float = 0.0) -> float:
    """Jump rate ``N^2 eta_x (1 - eta_y) exp((E_N + F_N(t)) / 2)`` across ``bond``."""
    g = config.geometry
    bond = g.check_bond(bond)
    x, y = g.bond_source[bond], g.bond_target[bond]
    if config.occupancy[x] == 0 or config.occupancy[y] == 1:
        return 0.0
    EN, FN = precompute_bond_fields(field, g)
    f = _bond_F(field, FN, t)[0, bond] if FN.size else 0.0
    return float(g.N**2 * np.exp(0.5 * (EN[bond] + f)))


@dataclass(frozen=True)
class Trajectory:
    """Initial configuration plus the time-ordered list of jumps in ``(0, T]``."""

    initial: Configuration
    times: np.ndarray = field(repr=False)
    bonds: np.ndarray = field(repr=False)
    T: float
    seed: int | None = None
    replica: int = 0

    def __post_init__(self):
        times = np.ascontiguousarray(self.times, dtype=np.float64)
        bonds = np.ascontiguousarray(self.bonds, dtype=np.int64)
        if times.shape != bonds.shape:
            raise ValueError("times and bonds must have equal length")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "bonds", bonds)

    @property
    def geometry(self) -> TorusGeometry:
        return self.initial.geometry

    @property
    def n_events(self) -> int:
        return self.times.size

    @property
    def sources(self) -> np.ndarray:
        return self.geometry.bond_source[self.bonds]

    @property
    def targets(self) -> np.ndarray:
        return self.geometry.bond_target[self.bonds]

    def occupancy_at(self, t: float) -> np.ndarray:
        """Occupation numbers at time ``t`` (right-continuous)."""
        n = int(np.searchsorted(self.times, t, side="right"))
        g = self.geometry
        occ = self.initial.occupancy.astype(np.int64)
        occ += np.bincount(self.targets[:n], minlength=g.n_sites)
        occ -= np.bincount(self.sources[:n], minlength=g.n_sites)
        return occ

    def configuration_at(self, t: float) -> Configuration:
        return Configuration(self.geometry, self.occupancy_at(t))

    @property
    def final(self) -> Configuration:
        return self.configuration_at(self.T)

    def validate(self) -> None:
        """Replay every jump; raise if exclusion or time ordering is violated."""
        if self.n_events:
            if np.any(np.diff(self.times) <= 0) or self.times[0] <= 0 or self.times[-1] > self.T:
                raise ValueError("event times must be strictly increasing in (0, T]")
        ok = _replay_ok(self.initial.occupancy.copy(), self.sources, self.targets)
        if ok >= 0:
            raise ValueError(f"event {ok} violates the exclusion rule")

    def truncate(self, T: float) -> "Trajectory":
        n = int(np.searchsorted(self.times, T, side="right"))
        return Trajectory(self.initial, self.times[:n], self.bonds[:n], T, self.seed, self.replica)

    # serialisation ----------------------------------------------------

    _MAGIC = b"WSEP"
    _HEADER = struct.Struct("<4sIIIqdqqq")
    _RECORD = np.dtype([("t", "<f8"), ("bond", "<u4")])

    def save(self, path) -> None:
        """Binary format: header (d, N, K, T, seed, replica, n) + occupancy + records."""
        g = self.geometry
        seed = -1 if self.seed is None else int(self.seed)
        rec = np.empty(self.n_events, dtype=self._RECORD)
        rec["t"] = self.times
        rec["bond"] = self.bonds
        with open(path, "wb") as fh:
            fh.write(self._HEADER.pack(self._MAGIC, 1, g.d, g.N, self.initial.K,
                                       float(self.T), seed, int(self.replica), self.n_events))
            fh.write(self.initial.occupancy.tobytes())
            fh.write(rec.tobytes())

    @classmethod
    def load(cls, path) -> "Trajectory":
        data = Path(path).read_bytes()
        magic, version, d, N, K, T, seed, replica, n = cls._HEADER.unpack_from(data)
        if magic != cls._MAGIC or version != 1:
            raise ValueError(f"{path} is not a trajectory file")
        g = TorusGeometry(d, N)
        off = cls._HEADER.size
        occ = np.frombuffer(data, dtype=np.uint8, count=g.n_sites, offset=off)
        rec = np.frombuffer(data, dtype=cls._RECORD, count=n, offset=off + g.n_sites)
        init = Configuration(g, occ)
        if init.K != K:
            raise ValueError("header particle number does not match occupancy")
        return cls(init, rec["t"].copy(), rec["bond"].astype(np.int64), T,
                   None if seed < 0 else seed, replica)

    def save_jsonl(self, path) -> None:
        g = self.geometry
        with open(path, "w") as fh:
            fh.write(json.dumps({"d": g.d, "N": g.N, "K": self.initial.K, "T": self.T,
                                 "seed": self.seed, "replica": self.replica,
                                 "initial": self.initial.to_bitstring()}) + "\n")
            for t, b in zip(self.times.tolist(), self.bonds.tolist()):
                fh.write(json.dumps({"t": t, "bond": b}) + "\n")

    @classmethod
    def load_jsonl(cls, path) -> "Trajectory":
        with open(path) as fh:
            head = json.loads(fh.readline())
            recs = [json.loads(line) for line in fh if line.strip()]
        g = TorusGeometry(head["d"], head["N"])
        init = Configuration.from_bitstring(g, head["initial"])
        return cls(init, np.array([r["t"] for r in recs], dtype=float),
                   np.array([r["bond"] for r in recs], dtype=np.int64),
                   head["T"], head.get("seed"), head.get("replica", 0))


@numba.njit(cache=True)
def _replay_ok(occ, src, dst):
    for i in range(src.size):
        if occ[src[i]] != 1 or occ[dst[i]] != 0:
            return i
        occ[src[i]] = 0
        occ[dst[i]] = 1
    return -1


class WasepSimulator:
    """Resumable WASEP sampler holding the full kernel state.

    ``advance`` may be called repeatedly with increasing horizons; the
    concatenated output is identical to a single call with the final
    horizon.
    """

    def __init__(self, config0: Configuration, field: FieldSpec, seed: int, replica: int = 0):
        g = config0.geometry
        self.geometry = g
        self.field = field
        self.seed = int(seed)
        self.replica = int(replica)
        self.initial = config0
        self.rng = make_rng(seed, replica)
        self.occ = config0.occupancy.copy()
        self.nbr = np.ascontiguousarray(g.bond_target)
        self.two_d = 2 * g.d
        self.EN, self.FN = precompute_bond_fields(field, g)
        self._check_rates()
        self.state = np.array([0.0, 0.0, -1.0])
        if field.is_static:
            self.base = g.N**2 * np.exp(0.5 * self.EN)
            active = (self.occ[g.bond_source] == 1) & (self.occ[g.bond_target] == 0)
            self.rates = np.where(active, self.base, 0.0)
            self.tree = np.zeros(g.n_bonds + 1)
            _fenwick_build(self.rates, self.tree)
        else:
            self.bound = float(np.max(0.5 * (self.EN + np.abs(self.FN).sum(axis=0))))
            self.harmonic = np.array([p.harmonic for p in field.perturbation], dtype=float)
            self.phase = np.array([p.phase for p in field.perturbation], dtype=float)
            self.period = float(field.period or 1.0)
            self.active = np.full(g.n_bonds, -1, dtype=np.int64)
            self.pos = np.full(g.n_bonds, -1, dtype=np.int64)
            self.count = np.zeros(1, dtype=np.int64)
            for b in np.flatnonzero((self.occ[g.bond_source] == 1)
                                    & (self.occ[g.bond_target] == 0)):
                self.active[self.count[0]] = b
                self.pos[b] = self.count[0]
                self.count[0] += 1

    def _check_rates(self):
        g = self.geometry
        top = 0.5 * np.max(self.EN + np.abs(self.FN).sum(axis=0))
        if not np.isfinite(top):
            raise RateOverflowError("non-finite bond field integrals")
        e_sup, f_sup = self.field.sup_norms()
        limit = 2 * g.d * float(g.N) ** (g.d + 2) * np.exp(e_sup + f_sup)
        total = g.n_bonds * g.N**2 * np.exp(top)
        if total > limit * (1 + 1e-9) or not np.isfinite(total):
            raise RateOverflowError(f"total rate bound {total:.3e} exceeds {limit:.3e}")

    @property
    def time(self) -> float:
        return float(self.state[0])

    def configuration(self) -> Configuration:
        return Configuration(self.geometry, self.occ)

    def advance(self, T: float, max_events: int = 1 << 16):
        """Run until time ``T`` or ``max_events`` jumps; returns ``(times, bonds, done)``."""
        out_t = np.empty(max_events)
        out_b = np.empty(max_events, dtype=np.int64)
        if self.field.is_static:
            n, done = _run_direct(self.rng, self.occ, self.rates, self.tree, self.state,
                                  float(T), self.base, self.nbr, self.two_d, out_t, out_b)
        else:
            n, done = _run_thinning(self.rng, self.occ, self.active, self.pos, self.count,
                                    self.state, float(T), self.EN, self.FN, self.harmonic,
                                    self.phase, self.period, float(self.geometry.N**2),
                                    self.bound, self.nbr, self.two_d, out_t, out_b)
        return out_t[:n], out_b[:n], bool(done)

    def chunks(self, T: float, chunk_size: int = 1 << 16):
        """Yield ``(times, bonds)`` blocks until the horizon ``T`` is reached."""
        done = False
        while not done:
            t, b, done = self.advance(T, chunk_size)
            if t.size:
                yield t, b


def simulate(config0: Configuration, T: float, field: FieldSpec, rng_seed: int,
             replica: int = 0, chunk_size: int = 1 << 16) -> Trajectory:
    """Sample a WASEP trajectory on ``[0, T]``; deterministic given the seed."""
    if T <= 0:
        raise ValueError("horizon T must be positive")
    sim = WasepSimulator(config0, field, rng_seed, replica)
    parts = list(sim.chunks(T, chunk_size))
    times = np.concatenate([p[0] for p in parts]) if parts else np.empty(0)
    bonds = np.concatenate([p[1] for p in parts]) if parts else np.empty(0, dtype=np.int64)
    return Trajectory(config0, times, bonds, float(T), int(rng_seed), int(replica))


# --------------------------------------------------------------------------
# exponential martingale


def _tilt_evaluator(tilt, n_bonds):
    if callable(tilt):
        n_args = len(inspect.signature(tilt).parameters)
        if n_args >= 2:
            return lambda t, occ: np.asarray(tilt(t, occ), dtype=float), True, True
        return lambda t, occ: np.asarray(tilt(t), dtype=float), True, False
    phi = np.asarray(tilt, dtype=float)
    if phi.shape != (n_bonds,):
        raise ValueError(f"constant tilt must have shape ({n_bonds},)")
    return lambda t, occ: np.broadcast_to(phi, (np.size(t), n_bonds)), False, False


def girsanov_log_weight(traj: Trajectory, tilt, field: FieldSpec,
                        chunk: int | None = None) -> float:
    """Logarithm of the exponential martingale for the tilt ``phi``.

    ``tilt`` is a constant per-bond array, a callable ``phi(t) -> (len(t),
    n_bonds)``, or a callable ``phi(t, occ)`` that also receives the
    configuration just before each evaluation time (rows of ``occ``).  The
    compensator is integrated exactly between jumps when neither the tilt
    nor the rates depend on time, and by 8-point Gauss-Legendre per
    inter-jump interval otherwise.
    """
    g = traj.geometry
    EN, FN = precompute_bond_fields(field, g)
    evaluate, time_dependent, _ = _tilt_evaluator(tilt, g.n_bonds)
    time_dependent = time_dependent or not field.is_static
    N2 = float(g.N**2)
    src_b, dst_b = g.bond_source, g.bond_target

    edges = np.concatenate([[0.0], traj.times, [traj.T]])
    n_int = edges.size - 1
    if chunk is None:
        chunk = max(1, 2_000_000 // (8 * g.n_bonds))
    occ = traj.initial.occupancy.astype(np.int8)
    log_w = 0.0
    src_e, dst_e = traj.sources, traj.targets
    for lo in range(0, n_int, chunk):
        hi = min(n_int, lo + chunk)
        # configuration on each interval [edges[i], edges[i+1])
        delta = np.zeros((hi - lo, g.n_sites), dtype=np.int8)
        ev = np.arange(lo, hi - 1)
        ev = ev[ev < traj.n_events]
        delta[ev - lo + 1, dst_e[ev]] += 1
        delta[ev - lo + 1, src_e[ev]] -= 1
        hist = occ[None, :] + np.cumsum(delta, axis=0, dtype=np.int8)
        active = (hist[:, src_b] == 1) & (hist[:, dst_b] == 0)
        a, b = edges[lo:hi], edges[lo + 1:hi + 1]
        if time_dependent:
            nodes = a[:, None] + (b - a)[:, None] * _GL_NODES[None, :]
            flat_t = nodes.ravel()
            occ_rep = np.repeat(hist, _GL_NODES.size, axis=0)
            phi = evaluate(flat_t, occ_rep).reshape(hi - lo, _GL_NODES.size, g.n_bonds)
            expo = 0.5 * EN[None, None, :]
            if FN.size:
                expo = expo + 0.5 * _bond_F(field, FN, flat_t).reshape(phi.shape)
            integrand = np.where(active[:, None, :], N2 * np.exp(expo) * np.expm1(phi), 0.0)
            comp = np.einsum("iqb,q,i->", integrand, _GL_WEIGHTS, b - a)
        else:
            phi = evaluate(np.zeros(1), occ[None, :])[0]
            per_bond = N2 * np.exp(0.5 * EN) * np.expm1(phi)
            comp = float(np.sum((active * per_bond[None, :]).sum(axis=1) * (b - a)))
        log_w -= comp
        # jumps ending in this chunk: event i closes interval i
        jumps = np.arange(lo, min(hi, traj.n_events))
        if jumps.size:
            tj = traj.times[jumps]
            occ_before = hist[jumps - lo]
            phi_j = evaluate(tj, occ_before)
            log_w += float(phi_j[np.arange(jumps.size), traj.bonds[jumps]].sum())
        occ = hist[-1].copy()
        if hi - 1 < traj.n_events:
            e = hi - 1
            occ[dst_e[e]] += 1
            occ[src_e[e]] -= 1
    return float(log_w)
