"""Experiment configuration, replica orchestration, manifests and drivers.

A run is described by one JSON document (``kind`` plus parameters).  Every
driver returns a :class:`Report` whose ``checks`` dictionary records the
pass/fail status of the properties the experiment is meant to exhibit and
which embeds the :class:`RunManifest` of the run.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .action import (InvalidPathError, action, dual_functional, path_from_densities,
                     w_hat, write_records)
from .coupling import DriftField, coupling_tail_fit, simulate_coupled
from .currents import BinSpec, LevelTwoAccumulator, continuity_residual
from .fields import FieldSpec, field_from_preset
from .hydro import (DensityField, evolve, fermi_profile, find_periodic_solution,
                    l1_contraction_rate)
from .lattice import (Configuration, TorusGeometry, box_average, coarse_grain,
                      configuration_from_profile)
from .phase import constant_profile_rate, phase_scan
from .simulator import WasepSimulator, girsanov_log_weight, simulate

__all__ = [
    "ValidationError",
    "DEFAULTS",
    "ExperimentConfig",
    "RunManifest",
    "Report",
    "profile_from_preset",
    "replica_map",
    "n_workers",
    "SmoothTilt",
    "random_density_path",
    "random_test_field",
    "run_simulate",
    "run_hydro",
    "run_hydro_limit",
    "run_hydrostatics",
    "run_martingale_suite",
    "run_coupling_suite",
    "run_phase_scan",
    "run_action_suite",
    "run_duality_suite",
    "run_periodic",
    "run_contraction",
    "run_continuity_suite",
    "DRIVERS",
    "run_experiment",
]


class ValidationError(ValueError):
    """Rejected experiment configuration."""


# --------------------------------------------------------------------------
# configuration

_COMMON = {"seed": 0, "output": None}

DEFAULTS: dict[str, dict] = {
    "simulate": {"d": 1, "N": 128, "m": 0.5, "field": {"preset": "constant", "value": 1.0},
                 "rho0": {"preset": "constant"}, "T": 0.01, "replicas": 1},
    "hydro": {"d": 1, "M": 128, "m": 0.5, "field": {"preset": "constant", "value": 1.0},
              "rho0": {"preset": "sine", "amplitude": 0.3}, "t": 0.1, "store": 16,
              "mobility": "exclusion"},
    "hydro_limit": {"d": 1, "N_ladder": [64, 128, 256], "m": 0.5,
                    "field": {"preset": "constant", "value": 1.0},
                    "rho0": {"preset": "sine", "amplitude": 0.3}, "t": 0.1, "eps": 0.125,
                    "replicas": 100, "max_error": 0.05},
    "hydrostatics": {"d": 1, "N": 128, "m": 0.5,
                     "field": {"preset": "cos_potential", "amplitude": 1.0}, "T": 50.0,
                     "burn_in": 0.0, "blocks": 2, "offset": 0.25, "radius": 0.1,
                     "min_fraction": 0.95, "batches": 10},
    "martingale": {"d": 1, "N": 8, "m": 0.5, "field": {"preset": "constant", "value": 1.0},
                   "T": 1.0, "replicas": 10_000, "tilt_amplitude": 0.05, "n_se": 3.0},
    "coupling": {"d": 1, "bound": 2.0, "drifts": ["sine", "constant"], "x": [0.0],
                 "y": [0.5], "T": 1.0, "dt": 1e-3, "replicas": 10_000, "t_step": 0.005,
                 "min_r2": 0.98},
    "phase_scan": {"m": 0.5, "E_grid": [0.0, 5.0, 10.0, 12.0, 13.0, 15.0],
                   "j_grid": [0.0, 0.5, 1.0, 2.0], "restarts": 6, "M": 96,
                   "zero_field_restarts": 20, "zero_gap_tol": 1e-8, "target_E": 10.0,
                   "target_relative_gap": 0.01, "closed_form_tol": 1e-12},
    "action": {"d": 1, "M": 64, "configs": 10, "t": 0.05, "tol": 1e-8},
    "duality": {"d": 1, "M": 32, "paths": 20, "test_fields": 100, "T": 0.5, "n_steps": 20,
                "tol": 1e-8, "attain_rtol": 1e-6},
    "periodic": {"d": 1, "M": 256, "m": 0.5,
                 "field": {"preset": "cos_potential", "amplitude": 0.5,
                           "perturbation": {"preset": "traveling_cos", "amplitude": 1.0,
                                            "period": 0.1}},
                 "T_per": 0.1, "tol": 1e-10, "max_iter": 200, "agree_tol": 2e-8,
                 "mobility": "exclusion"},
    "contraction": {"d": 1, "M": 256, "m": 0.5,
                    "field": {"preset": "cos_potential", "amplitude": 0.5,
                              "perturbation": {"preset": "traveling_cos", "amplitude": 1.0,
                                               "period": 0.1}},
                    "horizon": 0.3, "mobility": "exclusion"},
    "continuity": {"ladders": [[1, 128], [2, 32]], "replicas": 50, "min_events": 100_000,
                   "m": 0.5, "field": {"preset": "constant", "value": 1.0}, "tol": 1e-9},
}

_SEEDLESS = {"seed", "output", "workers"}


def _positive(cfg: dict, *keys):
    for k in keys:
        if k in cfg and not (isinstance(cfg[k], (int, float)) and cfg[k] > 0):
            raise ValidationError(f"{k} must be positive, got {cfg[k]!r}")


@dataclass
class ExperimentConfig:
    """A validated experiment description (``kind`` plus parameters)."""

    kind: str
    params: dict

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        kind = doc.pop("kind", None)
        if kind not in DEFAULTS:
            raise ValidationError(f"unknown experiment kind {kind!r}; choose from {sorted(DEFAULTS)}")
        params = copy.deepcopy(_COMMON)
        params.update(copy.deepcopy(DEFAULTS[kind]))
        unknown = set(doc) - set(params)
        if unknown:
            raise ValidationError(f"unknown keys for {kind}: {sorted(unknown)}")
        for key, value in doc.items():
            params[key] = _merge(params.get(key), value)
        cfg = cls(kind, params)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides=()) -> "ExperimentConfig":
        with open(path) as fh:
            doc = json.load(fh)
        return cls.from_dict(apply_overrides(doc, overrides))

    def validate(self) -> None:
        p = self.params
        if "replicas" in p and (not isinstance(p["replicas"], (int, float)) or p["replicas"] < 1):
            raise ValidationError("empty ensemble: replicas must be at least 1")
        _positive(p, "N", "M", "T", "t", "replicas", "eps", "dt", "radius", "T_per",
                  "horizon", "restarts", "paths", "test_fields", "configs", "batches",
                  "max_error", "tol", "agree_tol", "min_r2", "t_step", "n_se",
                  "zero_gap_tol", "closed_form_tol", "attain_rtol", "min_fraction")
        if "m" in p and not 0 < p["m"] < 1:
            raise ValidationError(f"mass m must lie in (0, 1), got {p['m']}")
        if "d" in p and p["d"] not in (1, 2, 3):
            raise ValidationError("dimension d must be 1, 2 or 3")
        if "eps" in p and not p["eps"] < 0.5:
            raise ValidationError("eps must be below 1/2")
        if "rho0" in p:
            M = p.get("M") or p.get("N") or max(p.get("N_ladder", [64]))
            rho = profile_from_preset(p["rho0"], p["m"], p.get("d", 1), M)
            if abs(rho.mean() - p["m"]) > 1e-9:
                raise ValidationError(f"initial profile mass {rho.mean():.6g} differs from m={p['m']}")
            if rho.min() < 0 or rho.max() > 1:
                raise ValidationError("initial profile leaves [0, 1]")
        if "field" in p:
            try:
                field_from_preset(p["field"], p.get("d", 1))
            except (TypeError, ValueError) as exc:
                raise ValidationError(str(exc)) from exc

    def K(self, N: int) -> int:
        return int(round(self.params["m"] * N ** self.params.get("d", 1)))

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}

    def lineage_hash(self) -> str:
        """SHA-256 of the canonical configuration without seed and output location."""
        doc = {k: v for k, v in self.to_dict().items() if k not in _SEEDLESS}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()

    def config_hash(self) -> str:
        doc = {k: v for k, v in self.to_dict().items() if k not in ("output", "workers")}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _merge(default, value):
    """Nested update of a preset dictionary unless the preset name changes."""
    if (isinstance(default, dict) and isinstance(value, dict)
            and value.get("preset", default.get("preset")) == default.get("preset")):
        out = copy.deepcopy(default)
        for k, v in value.items():
            out[k] = _merge(out.get(k), v)
        return out
    return copy.deepcopy(value)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``key=value`` overrides; dotted keys address nested dictionaries."""
    doc = copy.deepcopy(doc)
    for item in overrides:
        item = item[2:] if item.startswith("--") else item
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        parts = key.replace("-", "_").split(".")
        node = doc
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValidationError(f"cannot override inside non-object key {part!r}")
        node[parts[-1]] = _parse_value(text)
    return doc


__all__.append("apply_overrides")


def profile_from_preset(spec, m: float, d: int = 1, M: int = 128) -> np.ndarray:
    """Node values of an initial profile on the ``M``-point grid.

    Presets: ``constant``; ``sine`` with ``amplitude`` and ``mode`` (mean
    ``m`` by construction); ``values`` with an explicit list.
    """
    if isinstance(spec, str):
        spec = {"preset": spec}
    spec = dict(spec)
    kind = spec.pop("preset", "constant")
    g = TorusGeometry(d, M)
    x = g.positions
    if kind == "constant":
        return np.full(g.n_sites, float(spec.get("value", m)))
    if kind == "sine":
        a, k = float(spec.get("amplitude", 0.3)), int(spec.get("mode", 1))
        return float(spec.get("mean", m)) + a * np.sin(2 * np.pi * k * x[:, 0])
    if kind == "values":
        vals = np.asarray(spec["values"], dtype=float).ravel()
        if vals.size != g.n_sites:
            raise ValidationError(f"tabulated profile has {vals.size} values, expected {g.n_sites}")
        return vals
    raise ValidationError(f"unknown profile preset {kind!r}")


# --------------------------------------------------------------------------
# manifests and reports


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    config: dict
    config_hash: str
    lineage_hash: str
    version: str
    seeds: list
    wall_clock: float = 0.0
    files: dict = field(default_factory=dict)

    @classmethod
    def start(cls, cfg: ExperimentConfig, seeds) -> "RunManifest":
        return cls(cfg.to_dict(), cfg.config_hash(), cfg.lineage_hash(), __version__,
                   [list(map(int, s)) if np.ndim(s) else int(s) for s in seeds])

    def index(self, directory) -> None:
        """Record the SHA-256 of every file written to ``directory``."""
        d = Path(directory)
        self.files = {p.name: _sha256(p) for p in sorted(d.iterdir())
                      if p.is_file() and p.name not in ("manifest.json", "report.json")}

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Report:
    kind: str
    results: dict
    checks: dict
    manifest: RunManifest

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        return {"kind": self.kind, "passed": self.passed, "checks": self.checks,
                "results": _jsonable(self.results), "manifest": self.manifest.to_dict()}

    def write(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.manifest.index(d)
        with open(d / "manifest.json", "w") as fh:
            json.dump(_jsonable(self.manifest.to_dict()), fh, indent=2, sort_keys=True)
        with open(d / "report.json", "w") as fh:
            json.dump(_jsonable(self.to_dict()), fh, indent=2, sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    return obj


def _out_dir(cfg: ExperimentConfig) -> Path | None:
    out = cfg.params.get("output")
    if out is None:
        return None
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


# --------------------------------------------------------------------------
# worker pool


def n_workers(default: int = 1) -> int:
    """Worker count from ``WASEP_WORKERS`` (``default`` when unset)."""
    raw = os.environ.get("WASEP_WORKERS")
    if not raw:
        return default
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValidationError(f"WASEP_WORKERS must be an integer, got {raw!r}") from exc
    return max(1, n)


def replica_map(fn, tasks, workers: int | None = None) -> list:
    """Apply ``fn`` to every task; results are returned in task order."""
    tasks = list(tasks)
    workers = n_workers() if workers is None else workers
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


def _mean_ci(values, level_z: float = 1.96):
    v = np.asarray(values, dtype=float)
    se = v.std(ddof=1) / np.sqrt(v.size) if v.size > 1 else float("nan")
    return float(v.mean()), float(se), (float(v.mean() - level_z * se), float(v.mean() + level_z * se))


# --------------------------------------------------------------------------
# microscopic drivers


def _initial_config(p: dict, N: int) -> Configuration:
    g = TorusGeometry(p.get("d", 1), N)
    rho = profile_from_preset(p.get("rho0", "constant"), p["m"], g.d, N)
    K = int(round(p["m"] * g.n_sites))
    return configuration_from_profile(g, rho, K=K, rng=p["seed"])


def run_simulate(cfg: ExperimentConfig) -> Report:
    """Sample trajectories and store them in the binary event format."""
    p = cfg.params
    out = _out_dir(cfg)
    field_spec = field_from_preset(p["field"], p["d"])
    config0 = _initial_config(p, p["N"])
    rows = []
    for r in range(int(p["replicas"])):
        traj = simulate(config0, p["T"], field_spec, p["seed"], replica=r)
        traj.validate()
        if out is not None:
            traj.save(out / f"trajectory_{r:04d}.wsep")
        rows.append({"replica": r, "events": traj.n_events,
                     "final_density": float(traj.final.occupancy.mean())})
    manifest = RunManifest.start(cfg, [(p["seed"], r) for r in range(int(p["replicas"]))])
    return Report(cfg.kind, {"replicas": rows}, {"replay": True}, manifest)


def _hydro_limit_task(args):
    p, N, r = args
    g = TorusGeometry(p["d"], N)
    field_spec = field_from_preset(p["field"], p["d"])
    config0 = _initial_config(p, N)
    sim = WasepSimulator(config0, field_spec, p["seed"], replica=r)
    for _ in sim.chunks(p["t"], 1 << 18):
        pass
    emp = coarse_grain(sim.configuration(), p["eps"])
    return emp.reshape(g.shape)


def run_hydro_limit(cfg: ExperimentConfig) -> Report:
    """Replica-averaged ``L^1`` error between coarse-grained density and the PDE."""
    p = cfg.params
    out = _out_dir(cfg)
    field_spec = field_from_preset(p["field"], p["d"])
    rows, seeds = [], []
    for N in p["N_ladder"]:
        rho0 = profile_from_preset(p["rho0"], p["m"], p["d"], N)
        pde = evolve(DensityField(rho0.reshape((N,) * p["d"]), p["d"]), field_spec, p["t"],
                     store="final").final.values
        r_box = int(np.floor(p["eps"] * N))
        target = box_average(pde, r_box)
        tasks = [(p, N, r) for r in range(int(p["replicas"]))]
        emps = replica_map(_hydro_limit_task, tasks)
        errs = [float(np.abs(e - target).mean()) for e in emps]
        mean, se, ci = _mean_ci(errs)
        rows.append({"N": N, "mean_l1": mean, "se": se, "ci_low": ci[0], "ci_high": ci[1],
                     "replicas": len(errs)})
        seeds.extend((p["seed"], r) for r in range(int(p["replicas"])))
    means = [r["mean_l1"] for r in rows]
    checks = {"decreasing": bool(np.all(np.diff(means) < 0)),
              "final_below_max_error": bool(means[-1] < p["max_error"])}
    if out is not None:
        _write_csv(out / "hydro_limit.csv", rows)
    return Report(cfg.kind, {"ladder": rows}, checks, RunManifest.start(cfg, seeds))


def run_hydrostatics(cfg: ExperimentConfig) -> Report:
    """Time fraction spent near the stationary profile, with batch-means CI."""
    p = cfg.params
    out = _out_dir(cfg)
    field_spec = field_from_preset(p["field"], p["d"])
    N, d = p["N"], p["d"]
    g = TorusGeometry(d, N)
    if field_spec.U is None:
        raise ValidationError("hydrostatics needs a field with a known potential")
    target = fermi_profile(field_spec.U, p["m"], N, d).values.ravel()
    if field_spec.E_tilde is not None:
        x = field_spec.check_grid(16)
        if np.abs(field_spec.E_tilde(x)).max() > 0:
            # a divergence-free component leaves the flat profile invariant only when U = 0
            if np.abs(field_spec.U(x)).max() > 0:
                raise ValidationError("stationary profile unknown for mixed fields")
    bins = BinSpec(p["blocks"], p["offset"])
    config0 = _initial_config(p, N)
    sim = WasepSimulator(config0, field_spec, p["seed"])
    if p["burn_in"] > 0:
        for _ in sim.chunks(p["burn_in"], 1 << 18):
            pass
    nb = int(p["batches"])
    t0 = sim.time
    width = p["T"] / nb
    fractions, measures = [], []
    for k in range(1, nb + 1):
        acc = LevelTwoAccumulator(sim.configuration(), bins, t0=sim.time)
        stop = t0 + k * width
        for times, bonds in sim.chunks(stop, 1 << 18):
            acc.update(times, bonds)
        meas = acc.finalize(stop)
        measures.append(meas)
        fractions.append(meas.mass_within(target, p["radius"]))
    mean, se, ci = _mean_ci(fractions)
    results = {"fraction_within": mean, "batch_se": se, "ci": ci, "batches": fractions,
               "target_blocks": bins.project(target, g)}
    if out is not None:
        _write_csv(out / "hydrostatics_batches.csv",
                   [{"batch": i, "fraction_within": f} for i, f in enumerate(fractions)])
        measures[-1].to_csv(out / "level_two_last_batch.csv")
    checks = {"concentration": bool(mean >= p["min_fraction"])}
    return Report(cfg.kind, results, checks, RunManifest.start(cfg, [p["seed"]]))


class SmoothTilt:
    """Space-time tilt ``a cos(2 pi t) (sin(2 pi x) + 1/2)`` signed by bond direction."""

    def __init__(self, d: int, N: int, amplitude: float = 0.05):
        g = TorusGeometry(d, N)
        x = g.positions[g.bond_source]
        disp = g.bond_displacement
        sign = np.sign(disp.sum(axis=1))
        self.spatial = amplitude * (np.sin(2 * np.pi * x[:, 0]) + 0.5) * sign

    def __call__(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.cos(2 * np.pi * t)[:, None] * self.spatial[None, :]


def _martingale_task(args):
    p, lo, hi = args
    g = TorusGeometry(p["d"], p["N"])
    field_spec = field_from_preset(p["field"], p["d"])
    tilt = SmoothTilt(p["d"], p["N"], p["tilt_amplitude"])
    config0 = _initial_config(p, p["N"])
    out = []
    for r in range(lo, hi):
        traj = simulate(config0, p["T"], field_spec, p["seed"], replica=r)
        out.append(np.exp(girsanov_log_weight(traj, tilt, field_spec)))
    del g
    return out


def run_martingale_suite(cfg: ExperimentConfig) -> Report:
    """Monte Carlo mean of the exponential martingale at the horizon."""
    p = cfg.params
    R = int(p["replicas"])
    step = max(1, R // 64)
    tasks = [(p, lo, min(R, lo + step)) for lo in range(0, R, step)]
    weights = np.concatenate([np.asarray(w) for w in replica_map(_martingale_task, tasks)])
    mean, se, ci = _mean_ci(weights)
    results = {"mean": mean, "se": se, "ci": ci, "replicas": R,
               "z_score": (mean - 1.0) / se if se > 0 else 0.0,
               "positive": bool(np.all(weights > 0))}
    out = _out_dir(cfg)
    if out is not None:
        np.savetxt(out / "martingale_weights.csv", weights, fmt="%.17g", header="weight",
                   comments="")
    checks = {"mean_one": bool(abs(mean - 1.0) <= p["n_se"] * se),
              "positive": results["positive"]}
    return Report(cfg.kind, results, checks, RunManifest.start(cfg, [(p["seed"], r) for r in range(R)]))


def _drift_from_name(name: str, bound: float, d: int) -> DriftField:
    if name == "zero":
        return DriftField.zero(d)
    if name == "sine":
        return DriftField.sine(bound, d)
    if name == "constant":
        return DriftField.constant([bound] + [0.0] * (d - 1))
    raise ValidationError(f"unknown drift {name!r}")


def run_coupling_suite(cfg: ExperimentConfig) -> Report:
    """Coupling-time survival curves and exponential tail fits for several drifts."""
    p = cfg.params
    out = _out_dir(cfg)
    t_grid = np.arange(0.0, p["T"] + 1e-12, p["t_step"])
    results, checks = {}, {}
    for i, name in enumerate(p["drifts"]):
        drift = _drift_from_name(name, p["bound"], p["d"])
        run = simulate_coupled(p["x"], p["y"], p["T"], drift, dt=p["dt"], seed=p["seed"] + i,
                               n_replicas=int(p["replicas"]))
        fit = coupling_tail_fit(run, t_grid)
        results[name] = {**fit.to_json(), "bound": drift.bound,
                         "coupled_fraction": run.coupled_fraction}
        checks[f"{name}_rate_positive"] = bool(fit.rate > 0)
        checks[f"{name}_log_linear"] = bool(fit.r2 > p["min_r2"])
        if out is not None:
            fit.to_csv(out / f"survival_{name}.csv")
            fit.to_json(out / f"tail_fit_{name}.json")
    seeds = [p["seed"] + i for i in range(len(p["drifts"]))]
    return Report(cfg.kind, results, checks, RunManifest.start(cfg, seeds))


def run_continuity_suite(cfg: ExperimentConfig) -> Report:
    """Exact continuity identity for simulated trajectories and smooth test functions."""
    p = cfg.params
    field_spec_d = {d: field_from_preset(p["field"], d) for d, _ in p["ladders"]}
    tests = _continuity_test_functions()
    worst, rows = 0.0, []
    for d, N in p["ladders"]:
        g = TorusGeometry(d, N)
        fs = field_spec_d[d]
        K = int(round(p["m"] * g.n_sites))
        rate = K * (1 - p["m"]) * 2 * d * N**2
        T = 1.2 * p["min_events"] / rate
        for r in range(int(p["replicas"])):
            config0 = Configuration.random(g, K, rng=np.random.default_rng((p["seed"], d, r)))
            traj = simulate(config0, T, fs, p["seed"], replica=r)
            while traj.n_events < p["min_events"]:
                T *= 1.5
                traj = simulate(config0, T, fs, p["seed"], replica=r)
            res = max(abs(continuity_residual(traj, f, 0.0, traj.T)) for f in tests)
            worst = max(worst, res)
            rows.append({"d": d, "N": N, "replica": r, "events": traj.n_events, "residual": res})
    out = _out_dir(cfg)
    if out is not None:
        _write_csv(out / "continuity.csv", rows)
    checks = {"residual": bool(worst <= p["tol"])}
    return Report(cfg.kind, {"max_residual": worst, "trajectories": len(rows)}, checks,
                  RunManifest.start(cfg, [p["seed"]]))


def _continuity_test_functions():
    def f1(x):
        return np.sin(2 * np.pi * x[..., 0])

    def f2(x):
        return np.cos(2 * np.pi * np.sum(x, axis=-1))

    def f3(x):
        return np.exp(np.sin(2 * np.pi * x[..., -1]))

    def f4(x):
        return np.sin(4 * np.pi * x[..., 0] + 0.3) ** 2

    def f5(x):
        return np.cos(2 * np.pi * x[..., 0]) * np.sin(2 * np.pi * x[..., -1] + 1.0)

    return [f1, f2, f3, f4, f5]


# --------------------------------------------------------------------------
# macroscopic drivers


def run_hydro(cfg: ExperimentConfig) -> Report:
    """Solve the hydrodynamic equation and store the density history."""
    p = cfg.params
    field_spec = field_from_preset(p["field"], p["d"])
    rho0 = profile_from_preset(p["rho0"], p["m"], p["d"], p["M"])
    path = evolve(DensityField(rho0.reshape((p["M"],) * p["d"]), p["d"]), field_spec, p["t"],
                  store=p["store"], mobility=p["mobility"])
    out = _out_dir(cfg)
    if out is not None:
        path.to_csv(out / "density.csv")
        path.save(out / "path.whyd")
    results = {"mass": path.mass, "levels": int(path.times.size),
               "min": float(path.rho.min()), "max": float(path.rho.max())}
    checks = {"mass_conserved": bool(np.ptp(path.masses) < 1e-12),
              "bounded": bool(path.rho.min() >= -1e-12 and path.rho.max() <= 1 + 1e-12)}
    return Report(cfg.kind, results, checks, RunManifest.start(cfg, [p["seed"]]))


def _random_smooth(rng, M: int, d: int, modes: int = 3, scale: float = 1.0) -> np.ndarray:
    x = TorusGeometry(d, M).positions
    out = np.zeros(M**d)
    for _ in range(modes):
        k = rng.integers(-2, 3, size=d)
        if not k.any():
            k[0] = 1
        out += scale * rng.normal() * np.cos(2 * np.pi * x @ k + rng.uniform(0, 2 * np.pi))
    return out


def random_density_path(rng, M: int = 32, d: int = 1, T: float = 0.5, n_steps: int = 20,
                        m: float | None = None):
    """Smooth random path with densities in ``(0.1, 0.9)`` and a random mean current."""
    m = rng.uniform(0.3, 0.7) if m is None else m
    times = np.linspace(0.0, T, n_steps + 1)
    a, b = _random_smooth(rng, M, d), _random_smooth(rng, M, d)
    omega = rng.uniform(0.5, 3.0) * 2 * np.pi / T
    raw = a[None, :] * np.cos(omega * times)[:, None] + b[None, :] * np.sin(omega * times)[:, None]
    amp = 0.3 * min(m, 1 - m) / max(np.abs(raw).max(), 1e-12)
    rho = m + amp * raw
    return path_from_densities(rho, times, d, mean_current=rng.normal(size=d))


def random_test_field(rng, path, scale: float = 1.0) -> np.ndarray:
    """Smooth random test field with the face shape of ``path.j``."""
    n_t, n, d = path.j.shape
    M = round(n ** (1.0 / d))
    out = np.empty(path.j.shape)
    tt = path.times[:-1]
    for k in range(d):
        a, b = _random_smooth(rng, M, d, scale=scale), _random_smooth(rng, M, d, scale=scale)
        om = rng.uniform(0.5, 3.0) * 2 * np.pi / path.T
        out[:, :, k] = a[None, :] * np.cos(om * tt)[:, None] + b[None, :] * np.sin(om * tt)[:, None]
    return out


def run_action_suite(cfg: ExperimentConfig) -> Report:
    """Action of hydrodynamic solutions for random ``(m, E, rho0)``."""
    p = cfg.params
    rng = np.random.default_rng(p["seed"])
    rows = []
    for i in range(int(p["configs"])):
        m = float(rng.uniform(0.2, 0.8))
        preset = ["constant", "sine", "cos_potential"][i % 3]
        fs = field_from_preset({"preset": preset, ("value" if preset == "constant" else
                                                   "amplitude"): float(rng.uniform(-2, 2))},
                               p["d"])
        bump = _random_smooth(rng, p["M"], p["d"])
        bump -= bump.mean()
        rho0 = m + 0.9 * min(m, 1 - m) * bump / max(np.abs(bump).max(), 1e-12)
        path = evolve(DensityField(rho0.reshape((p["M"],) * p["d"]), p["d"]), fs, p["t"])
        val = action(path, fs)
        rows.append({"config": i, "m": m, "field": fs.name, "action": val})
    out = _out_dir(cfg)
    if out is not None:
        write_records(rows, out / "actions.jsonl")
    worst = max(r["action"] for r in rows)
    return Report(cfg.kind, {"rows": rows, "max_action": worst},
                  {"zero_action": bool(worst < p["tol"])}, RunManifest.start(cfg, [p["seed"]]))


def run_duality_suite(cfg: ExperimentConfig) -> Report:
    """Dual functional against random test fields and the optimal field."""
    p = cfg.params
    rng = np.random.default_rng(p["seed"])
    zero = FieldSpec.zero(p["d"])
    rows = []
    for i in range(int(p["paths"])):
        path = random_density_path(rng, p["M"], p["d"], p["T"], p["n_steps"])
        fs = field_from_preset({"preset": "sine", "amplitude": float(rng.uniform(-3, 3))},
                               p["d"]) if i % 2 else zero
        A = action(path, fs)
        best = max(path.T * dual_functional(path, random_test_field(rng, path,
                                                                    10 ** rng.uniform(-1, 1)), fs)
                   for _ in range(int(p["test_fields"])))
        attained = path.T * dual_functional(path, w_hat(path, fs), fs)
        rows.append({"path": i, "action": A, "max_random": best, "attained": attained,
                     "relative_error": abs(attained - A) / max(A, 1e-300)})
    out = _out_dir(cfg)
    if out is not None:
        _write_csv(out / "duality.csv", rows)
    checks = {"upper_bound": all(r["max_random"] <= r["action"] + p["tol"] for r in rows),
              "attained": all(r["relative_error"] <= p["attain_rtol"] for r in rows)}
    return Report(cfg.kind, {"rows": rows}, checks, RunManifest.start(cfg, [p["seed"]]))


def _second_start(m: float, M: int, d: int) -> DensityField:
    x = TorusGeometry(d, M).positions[:, 0]
    return DensityField((m + 0.8 * min(m, 1 - m) * np.cos(2 * np.pi * x)).reshape((M,) * d), d)


def run_periodic(cfg: ExperimentConfig) -> Report:
    """Poincaré iteration from two distinct starts."""
    p = cfg.params
    fs = field_from_preset(p["field"], p["d"])
    M, d, m = p["M"], p["d"], p["m"]
    sols = []
    for start in (None, _second_start(m, M, d)):
        sols.append(find_periodic_solution(m, p["T_per"], fs, tol=p["tol"], M=M, rho0=start,
                                           max_iter=p["max_iter"], mobility=p["mobility"]))
    a, b = sols
    gap = float(np.max(np.abs(a.path.rho - b.path.rho)))
    results = {"iterations": [s.iterations for s in sols],
               "decay_rates": [s.decay_rate for s in sols], "path_distance": gap,
               "increments": [s.increments for s in sols]}
    out = _out_dir(cfg)
    if out is not None:
        a.path.to_csv(out / "periodic_path.csv")
        _write_csv(out / "increments.csv",
                   [{"iteration": i + 1, "start_a": x, "start_b": y} for i, (x, y) in
                    enumerate(zip(np.pad(a.increments, (0, max(0, b.increments.size - a.increments.size)), constant_values=np.nan),
                                  np.pad(b.increments, (0, max(0, a.increments.size - b.increments.size)), constant_values=np.nan)))])
    checks = {"converged": all(s.converged and s.iterations <= p["max_iter"] for s in sols),
              "agree": bool(gap <= p["agree_tol"]),
              "geometric": all(_geometric(s.increments) for s in sols)}
    return Report(cfg.kind, results, checks, RunManifest.start(cfg, [p["seed"]]))


def _geometric(inc, floor: float = 1e-13) -> bool:
    """Increments decrease and their successive ratios stay bounded below one."""
    inc = np.asarray(inc, dtype=float)
    inc = inc[inc > floor]
    if inc.size < 3:
        return True
    ratios = inc[1:] / inc[:-1]
    return bool(np.all(ratios < 1.0) and np.max(ratios[1:]) < 0.99)


def run_contraction(cfg: ExperimentConfig) -> Report:
    """Pairwise ``L^1`` distance between two solutions with equal mass."""
    p = cfg.params
    fs = field_from_preset(p["field"], p["d"])
    M, d, m = p["M"], p["d"], p["m"]
    u1 = DensityField.constant(m, M, d)
    u2 = _second_start(m, M, d)
    fit = l1_contraction_rate(u1, u2, fs, p["horizon"], mobility=p["mobility"])
    out = _out_dir(cfg)
    if out is not None:
        _write_csv(out / "contraction.csv",
                   [{"t": t, "l1": x} for t, x in zip(fit.times, fit.distances)])
    results = {"A": fit.A, "rate": fit.rate, "initial": float(fit.distances[0]),
               "final": float(fit.distances[-1])}
    checks = {"nonincreasing": fit.nonincreasing, "rate_positive": bool(fit.rate > 0)}
    return Report(cfg.kind, results, checks, RunManifest.start(cfg, [p["seed"]]))


def run_phase_scan(cfg: ExperimentConfig) -> Report:
    """Constant versus traveling-wave rates over an ``(E, jbar)`` grid."""
    p = cfg.params
    out = _out_dir(cfg)
    workers = n_workers()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            scan = phase_scan(p["m"], p["E_grid"], p["j_grid"], restarts=p["restarts"],
                              M=p["M"], seed=p["seed"], profile_dir=out, map_fn=pool.map)
    else:
        scan = phase_scan(p["m"], p["E_grid"], p["j_grid"], restarts=p["restarts"], M=p["M"],
                          seed=p["seed"], profile_dir=out)
    zero = phase_scan(p["m"], [0.0], [j for j in p["j_grid"] if j > 0],
                      restarts=p["zero_field_restarts"], M=p["M"], seed=p["seed"])
    closed = max(abs(r["constant_rate"] - constant_profile_rate(r["m"], r["E"], r["jbar"]))
                 for r in scan.rows)
    target = [r for r in scan.rows if r["E"] == p["target_E"]]
    if out is not None:
        scan.to_csv(out / "phase_scan.csv")
        scan.thresholds_to_csv(out / "thresholds.csv")
    results = {"rows": scan.rows, "thresholds": scan.thresholds(),
               "zero_field_max_gap": max(r["gap"] for r in zero.rows),
               "target_max_relative_gap": max((r["relative_gap"] for r in target), default=0.0),
               "closed_form_error": closed}
    checks = {"no_transition_at_zero_field": bool(results["zero_field_max_gap"] < p["zero_gap_tol"]),
              "transition_at_target_field": any(
                  r["relative_gap"] > p["target_relative_gap"] and r["amplitude"] > 1e-6
                  for r in target),
              "closed_form": bool(closed <= p["closed_form_tol"])}
    return Report(cfg.kind, results, checks, RunManifest.start(cfg, [p["seed"]]))


def _write_csv(path, rows) -> None:
    rows = list(rows)
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in r.items()})


DRIVERS = {
    "simulate": run_simulate,
    "hydro": run_hydro,
    "hydro_limit": run_hydro_limit,
    "hydrostatics": run_hydrostatics,
    "martingale": run_martingale_suite,
    "coupling": run_coupling_suite,
    "phase_scan": run_phase_scan,
    "action": run_action_suite,
    "duality": run_duality_suite,
    "periodic": run_periodic,
    "contraction": run_contraction,
    "continuity": run_continuity_suite,
}


def run_experiment(cfg: ExperimentConfig) -> Report:
    """Run the driver for ``cfg.kind``, time it and write outputs when requested."""
    start = time.perf_counter()
    try:
        report = DRIVERS[cfg.kind](cfg)
    except InvalidPathError as exc:
        raise ValidationError(str(exc)) from exc
    report.manifest.wall_clock = time.perf_counter() - start
    out = cfg.params.get("output")
    if out is not None:
        report.write(out)
    return report
