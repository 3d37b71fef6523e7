"""Run artifacts: config files, datasets, checkpoints, and prediction tables.

Everything on disk is either canonical JSON (sorted keys, round-trip float
repr) or flat little-endian float64 binary, so reruns with the same config
and seed are byte-identical and the files parse from any language.
"""
from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import bayes, datagen, systems
from .bayes import Dataset, EnsembleConfig, TrainResult
from .datagen import CaseSpec, Trajectory
from .moments import GridSpec
from .systems import NormSpec, SystemSpec


class RunIoError(Exception):
    """Malformed artifact: unreadable table, manifest, or binary blob."""


class ConfigError(RunIoError):
    """Invalid configuration value; message carries the field path."""


# --- canonical json ----------------------------------------------------------

def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path: str, obj) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(dump_json(obj))


def read_json(path: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e


def config_hash(resolved: dict) -> str:
    text = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


# --- config schema -----------------------------------------------------------

_MISSING = object()


class _Section:
    """Cursor over one config object; tracks consumed keys for typo checks."""

    def __init__(self, data, path: str):
        if not isinstance(data, dict):
            raise ConfigError(f"{path} must be an object")
        self.data = data
        self.path = path
        self.seen = set()

    def _at(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def take(self, key: str, default=_MISSING):
        self.seen.add(key)
        if key in self.data:
            return self.data[key]
        if default is _MISSING:
            raise ConfigError(f"{self._at(key)} is required")
        return default

    def child(self, key: str, required: bool = True) -> Optional["_Section"]:
        raw = self.take(key, default=None)
        if raw is None:
            if required:
                raise ConfigError(f"{self._at(key)} is required")
            return None
        return _Section(raw, self._at(key))

    def take_str(self, key: str, choices: Sequence[str], default=_MISSING) -> str:
        v = self.take(key, default)
        if v not in choices:
            raise ConfigError(f"{self._at(key)} must be one of {sorted(choices)}, got {v!r}")
        return v

    def take_int(self, key: str, default=_MISSING, lo: Optional[int] = None) -> int:
        v = self.take(key, default)
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{self._at(key)} must be an integer, got {v!r}")
        if lo is not None and v < lo:
            raise ConfigError(f"{self._at(key)} must be >= {lo}, got {v}")
        return v

    def take_float(self, key: str, default=_MISSING, lo: Optional[float] = None,
                   lo_open: bool = False) -> float:
        v = self.take(key, default)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{self._at(key)} must be a number, got {v!r}")
        v = float(v)
        if lo is not None and (v < lo or (lo_open and v == lo)):
            op = ">" if lo_open else ">="
            raise ConfigError(f"{self._at(key)} must be {op} {lo}, got {v}")
        return v

    def take_bool(self, key: str, default=_MISSING) -> bool:
        v = self.take(key, default)
        if not isinstance(v, bool):
            raise ConfigError(f"{self._at(key)} must be true or false, got {v!r}")
        return v

    def take_floats(self, key: str, length: int, default=_MISSING,
                    lo: Optional[float] = None) -> Optional[Tuple[float, ...]]:
        v = self.take(key, default)
        if v is None:
            return None
        if not isinstance(v, list) or len(v) != length:
            raise ConfigError(f"{self._at(key)} must be a list of {length} numbers")
        out = []
        for x in v:
            if isinstance(x, bool) or not isinstance(x, (int, float)):
                raise ConfigError(f"{self._at(key)} must hold numbers, got {x!r}")
            if lo is not None and x < lo:
                raise ConfigError(f"{self._at(key)} entries must be >= {lo}, got {x}")
            out.append(float(x))
        return tuple(out)

    def finish(self) -> None:
        extra = set(self.data) - self.seen
        if extra:
            raise ConfigError(f"{self.path or 'config'}: unknown key(s) {sorted(extra)}")


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved experiment configuration; ``resolved`` is the hash source."""

    resolved: dict
    kind: str
    grid: GridSpec
    method: str
    unknown: str
    model_diffusion: Optional[Tuple[float, float]]
    norm_mode: str
    data_seed: int
    noise: Tuple[float, float]
    ic: dict
    truth_method: str
    truth_dt: float
    truth_diffusion: Optional[Tuple[float, float]]
    case: CaseSpec
    train: Optional[EnsembleConfig]
    workers: int
    predict_steps: int
    predict_draws: int
    predict_seed: int

    @property
    def hash(self) -> str:
        return config_hash(self.resolved)

    def system_spec(self, norm: Optional[NormSpec] = None) -> SystemSpec:
        if self.kind == "pendulum":
            return SystemSpec.pendulum(dt=self.grid.dt, n_t=self.grid.n_t,
                                       method=self.method, unknown=self.unknown,
                                       norm=norm)
        return SystemSpec.reaction_diffusion(n=self.grid.n_x, dt=self.grid.dt,
                                             n_t=self.grid.n_t, method=self.method,
                                             unknown=self.unknown, norm=norm,
                                             diffusion=self.model_diffusion)


def load_config(path: str) -> RunConfig:
    if not os.path.isfile(path):
        raise RunIoError(f"config file not found: {path}")
    return parse_config(read_json(path))


def parse_config(raw: dict) -> RunConfig:
    root = _Section(raw, "")

    sys_s = root.child("system")
    kind = sys_s.take_str("kind", ("pendulum", "reaction_diffusion"))
    method = sys_s.take_str("method", ("euler", "rk4"), default="euler")
    unknown = sys_s.take_str("unknown", ("nn", "true"), default="nn")
    norm_mode = sys_s.take_str("norm", ("auto", "identity"), default="auto")
    is_rd = kind == "reaction_diffusion"
    model_diffusion = sys_s.take_floats("diffusion", 2, default=None, lo=0.0)
    if model_diffusion is not None and not is_rd:
        raise ConfigError("system.diffusion only applies to reaction_diffusion")
    sys_s.finish()

    grid_s = root.child("grid")
    dt = grid_s.take_float("dt", lo=0.0, lo_open=True)
    n_t = grid_s.take_int("n_t", lo=2)
    if is_rd:
        n = grid_s.take_int("n", lo=3)
        grid = GridSpec.unit_square(n, n_v=2, dt=dt, n_t=n_t)
    else:
        grid = GridSpec.ode(n_v=2, dt=dt, n_t=n_t)
    grid_s.finish()

    data_s = root.child("data")
    data_seed = data_s.take_int("seed", default=0, lo=0)
    noise = data_s.take_floats("noise", 2, lo=0.0)
    ic = _parse_ic(data_s.child("ic"), kind, grid)
    truth_s = data_s.child("truth", required=False)
    if truth_s is None:
        truth_s = _Section({}, "data.truth")
    truth_method = truth_s.take_str("method", ("euler", "rk4"), default="rk4")
    truth_dt = truth_s.take_float("dt", default=grid.dt, lo=0.0, lo_open=True)
    ratio = grid.dt / truth_dt
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        raise ConfigError(f"data.truth.dt must evenly divide grid.dt, got {truth_dt}")
    truth_diffusion = truth_s.take_floats("diffusion", 2,
                                          default=[2.8e-4, 5.0e-2] if is_rd else None,
                                          lo=0.0)
    if truth_diffusion is not None and not is_rd:
        raise ConfigError("data.truth.diffusion only applies to reaction_diffusion")
    truth_s.finish()
    case = _parse_case(data_s.child("case"), grid, is_rd)
    data_s.finish()

    train_s = root.child("train", required=False)
    train = None
    workers = 1
    if train_s is not None:
        kwargs = dict(
            epochs=train_s.take_int("epochs", lo=1),
            n_members=train_s.take_int("n_members", default=4, lo=2),
            draws=train_s.take_int("draws", default=32, lo=1),
            swag_start=train_s.take_float("swag_start", default=0.75, lo=0.0),
            rank=train_s.take_int("rank", default=20, lo=2),
            interval=train_s.take_int("interval", default=1, lo=1),
            lr_explore=train_s.take_float("lr_explore", default=1e-2, lo=0.0, lo_open=True),
            lr_swag=train_s.take_float("lr_swag", default=1e-3, lo=0.0, lo_open=True),
            seed=train_s.take_int("seed", default=0, lo=0),
        )
        workers = train_s.take_int("workers", default=1, lo=1)
        train_s.finish()
        try:
            train = EnsembleConfig(**kwargs)
        except bayes.BayesError as e:
            raise ConfigError(f"train: {e}") from e

    pred_s = root.child("predict", required=False)
    if pred_s is None:
        pred_s = _Section({}, "predict")
    predict_steps = pred_s.take_int("steps", default=grid.n_t - 1, lo=0)
    predict_draws = pred_s.take_int("draws", default=train.draws if train else 32, lo=1)
    predict_seed = pred_s.take_int("seed", default=0, lo=0)
    pred_s.finish()
    root.finish()

    resolved = {
        "system": {"kind": kind, "method": method, "unknown": unknown,
                   "norm": norm_mode,
                   "diffusion": list(model_diffusion) if model_diffusion else None},
        "grid": ({"n": grid.n_x, "dt": grid.dt, "n_t": grid.n_t} if is_rd
                 else {"dt": grid.dt, "n_t": grid.n_t}),
        "data": {"seed": data_seed, "noise": list(noise), "ic": ic,
                 "truth": {"method": truth_method, "dt": truth_dt,
                           "diffusion": list(truth_diffusion) if truth_diffusion else None},
                 "case": {"variables": list(case.variables),
                          "t_start": case.t_start, "t_stop": case.t_stop,
                          "t_step": case.t_step,
                          "interior_only": case.interior_only}},
        "train": None if train is None else {
            "epochs": train.epochs, "n_members": train.n_members,
            "draws": train.draws, "swag_start": train.swag_start,
            "rank": train.rank, "interval": train.interval,
            "lr_explore": train.lr_explore, "lr_swag": train.lr_swag,
            "seed": train.seed, "workers": workers},
        "predict": {"steps": predict_steps, "draws": predict_draws,
                    "seed": predict_seed},
    }

    cfg = RunConfig(resolved=resolved, kind=kind, grid=grid, method=method,
                    unknown=unknown, model_diffusion=model_diffusion,
                    norm_mode=norm_mode, data_seed=data_seed, noise=noise,
                    ic=ic, truth_method=truth_method, truth_dt=truth_dt,
                    truth_diffusion=truth_diffusion, case=case, train=train,
                    workers=workers, predict_steps=predict_steps,
                    predict_draws=predict_draws, predict_seed=predict_seed)
    try:
        cfg.system_spec()
    except systems.SystemError as e:
        raise ConfigError(f"system: {e}") from e
    return cfg


def _parse_ic(ic_s: _Section, kind: str, grid: GridSpec) -> dict:
    forms = [k for k in ("mu0", "grf", "values") if ic_s.take(k, default=None) is not None]
    if len(forms) != 1:
        raise ConfigError("data.ic must give exactly one of mu0, grf, values")
    form = forms[0]
    if form == "mu0":
        mu0 = ic_s.take_floats("mu0", 2)
        ic_s.finish()
        return {"mu0": list(mu0)}
    if kind == "pendulum":
        raise ConfigError(f"data.ic.{form} needs a spatial grid; pendulum takes mu0")
    if form == "grf":
        grf_s = ic_s.child("grf")
        out = {"length_scale": None, "amplitude": grf_s.take_float("amplitude", default=1.0, lo=0.0),
               "seed": grf_s.take_int("seed", default=0, lo=0)}
        ls = grf_s.take("length_scale", default=None)
        if ls is not None:
            if isinstance(ls, bool) or not isinstance(ls, (int, float)) or ls <= 0:
                raise ConfigError("data.ic.grf.length_scale must be a positive number")
            out["length_scale"] = float(ls)
        grf_s.finish()
        ic_s.finish()
        return {"grf": out}
    values = ic_s.take("values")
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != (grid.n_v, grid.n_points):
        raise ConfigError(f"data.ic.values must be shaped "
                          f"({grid.n_v}, {grid.n_points}), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError("data.ic.values must be finite")
    ic_s.finish()
    return {"values": arr.tolist()}


def _parse_case(case_s: _Section, grid: GridSpec, is_rd: bool) -> CaseSpec:
    raw_vars = case_s.take("variables")
    if (not isinstance(raw_vars, list) or not raw_vars
            or not all(isinstance(v, int) and not isinstance(v, bool) for v in raw_vars)):
        raise ConfigError("data.case.variables must be a non-empty list of integers")
    variables = tuple(sorted(set(raw_vars)))
    if variables[0] < 0 or variables[-1] >= grid.n_v:
        raise ConfigError(f"data.case.variables must lie in 0..{grid.n_v - 1}")
    t_start = case_s.take_float("t_start", default=0.0, lo=0.0)
    t_stop = case_s.take_float("t_stop", lo=t_start)
    t_step_raw = case_s.take("t_step", default=None)
    t_step = None
    if t_step_raw is not None:
        if isinstance(t_step_raw, bool) or not isinstance(t_step_raw, (int, float)) or t_step_raw <= 0:
            raise ConfigError("data.case.t_step must be a positive number")
        t_step = float(t_step_raw)
    # Spatial grids default to interior sensors: the solver pins boundary
    # variance to zero, so a boundary observation cannot be scored by the
    # Gaussian likelihood and would swamp the loss through the floor.
    interior_only = case_s.take_bool("interior_only", default=is_rd)
    if interior_only and not is_rd:
        raise ConfigError("data.case.interior_only needs a spatial grid")
    case_s.finish()
    return CaseSpec(variables=variables, t_start=t_start, t_stop=t_stop,
                    t_step=t_step, interior_only=interior_only)


# --- tables ------------------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x))


def write_table(path: str, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def read_table(path: str, header: Sequence[str]) -> List[List[str]]:
    if not os.path.isfile(path):
        raise RunIoError(f"table not found: {path}")
    with open(path) as fh:
        first = fh.readline().rstrip("\n")
        if first.split(",") != list(header):
            raise RunIoError(f"{path}: expected header {','.join(header)!r}, got {first!r}")
        rows = []
        for ln, line in enumerate(fh, start=2):
            cells = line.rstrip("\n").split(",")
            if len(cells) != len(header):
                raise RunIoError(f"{path}:{ln}: expected {len(header)} fields")
            rows.append(cells)
    return rows


def _frame_of(t: float, dt: float, where: str) -> int:
    k = int(round(t / dt))
    if abs(k * dt - t) > 1e-9 or k < 0:
        raise RunIoError(f"{where}: time {t} does not align with frame spacing {dt}")
    return k


# --- datasets ----------------------------------------------------------------

_ODE_HEADER = ("t", "var", "value")
_FIELD_HEADER = ("t", "var", "point", "value")


def write_dataset(path: str, ds: Dataset) -> None:
    g = ds.grid
    if g.n_points == 1:
        rows = ((_fmt(f * g.dt), str(v), _fmt(x))
                for f, v, x in zip(ds.frames, ds.var_idx, ds.values))
        write_table(path, _ODE_HEADER, rows)
    else:
        rows = ((_fmt(f * g.dt), str(v), str(p), _fmt(x))
                for f, v, p, x in zip(ds.frames, ds.var_idx, ds.points, ds.values))
        write_table(path, _FIELD_HEADER, rows)


def read_dataset(path: str, grid: GridSpec) -> Dataset:
    with_points = grid.n_points > 1
    rows = read_table(path, _FIELD_HEADER if with_points else _ODE_HEADER)
    try:
        frames = [_frame_of(float(r[0]), grid.dt, path) for r in rows]
        var_idx = [int(r[1]) for r in rows]
        points = [int(r[2]) if with_points else 0 for r in rows]
        values = [float(r[-1]) for r in rows]
    except ValueError as e:
        raise RunIoError(f"{path}: {e}") from e
    try:
        return Dataset(grid=grid, frames=frames, var_idx=var_idx,
                       points=points, values=values)
    except bayes.BayesError as e:
        raise RunIoError(f"{path}: {e}") from e


# --- truth trajectories ------------------------------------------------------

def write_ode_truth(path: str, traj: Trajectory) -> None:
    g = traj.grid
    rows = ((_fmt(k * g.dt), str(v), _fmt(traj.frames[k, v, 0]))
            for k in range(g.n_t) for v in range(g.n_v))
    write_table(path, _ODE_HEADER, rows)


def read_ode_truth(path: str) -> Tuple[np.ndarray, np.ndarray]:
    rows = read_table(path, _ODE_HEADER)
    if not rows:
        raise RunIoError(f"{path}: empty trajectory")
    try:
        t = np.array([float(r[0]) for r in rows])
        v = np.array([int(r[1]) for r in rows])
        x = np.array([float(r[2]) for r in rows])
    except ValueError as e:
        raise RunIoError(f"{path}: {e}") from e
    n_v = int(v.max()) + 1
    times = np.unique(t)
    n_t = times.size
    if rows and n_t * n_v != len(rows):
        raise RunIoError(f"{path}: expected a complete {n_t} x {n_v} trajectory")
    values = np.full((n_t, n_v, 1), np.nan)
    values[np.searchsorted(times, t), v, 0] = x
    if not np.all(np.isfinite(values)):
        raise RunIoError(f"{path}: trajectory has missing entries")
    return times, values


def write_field_truth(manifest_path: str, traj: Trajectory,
                      extra: Optional[dict] = None) -> None:
    g = traj.grid
    bin_name = os.path.splitext(os.path.basename(manifest_path))[0] + ".bin"
    manifest = {"n_x": g.n_x, "n_y": g.n_y, "n_v": g.n_v, "n_t": g.n_t,
                "dt": g.dt, "dx": g.dx, "dy": g.dy,
                "byte_order": "little", "float_width": 64, "data": bin_name}
    manifest.update(extra or {})
    with open(os.path.join(os.path.dirname(manifest_path), bin_name), "wb") as fh:
        fh.write(np.ascontiguousarray(traj.frames, dtype="<f8").tobytes())
    write_json(manifest_path, manifest)


def read_field_truth(manifest_path: str) -> Tuple[np.ndarray, np.ndarray, dict]:
    man = read_json(manifest_path)
    for key in ("n_x", "n_y", "n_v", "n_t", "dt", "data"):
        if key not in man:
            raise RunIoError(f"{manifest_path}: missing field {key!r}")
    if man.get("byte_order") != "little" or man.get("float_width") != 64:
        raise RunIoError(f"{manifest_path}: unsupported number encoding")
    shape = (man["n_t"], man["n_v"], man["n_y"] * man["n_x"])
    bin_path = os.path.join(os.path.dirname(manifest_path), man["data"])
    if not os.path.isfile(bin_path):
        raise RunIoError(f"field data not found: {bin_path}")
    with open(bin_path, "rb") as fh:
        raw = fh.read()
    want = int(np.prod(shape)) * 8
    if len(raw) != want:
        raise RunIoError(f"{bin_path}: expected {want} bytes, got {len(raw)}")
    values = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    times = np.arange(man["n_t"]) * man["dt"]
    return times, values, man


def read_truth(path: str) -> Tuple[np.ndarray, np.ndarray, Optional[str]]:
    """Load a truth file of either format; returns (times, values, config hash).

    The hash comes from the field manifest, or from a manifest.json sitting
    next to a delimited trajectory; None when no provenance is recorded.
    """
    if not os.path.isfile(path):
        raise RunIoError(f"truth file not found: {path}")
    if path.endswith(".json"):
        times, values, man = read_field_truth(path)
        return times, values, man.get("config_hash")
    times, values = read_ode_truth(path)
    sibling = os.path.join(os.path.dirname(path) or ".", "manifest.json")
    if os.path.isfile(sibling):
        return times, values, read_json(sibling).get("config_hash")
    return times, values, None


# --- dataset generation ------------------------------------------------------

def resolve_ic(config: RunConfig) -> np.ndarray:
    g = config.grid
    ic = config.ic
    if "values" in ic:
        return np.asarray(ic["values"], dtype=np.float64)
    if "mu0" in ic:
        return np.repeat(np.asarray(ic["mu0"], dtype=np.float64)[:, None],
                         g.n_points, axis=1)
    grf = ic["grf"]
    seqs = np.random.SeedSequence(grf["seed"]).spawn(g.n_v)
    return np.stack([datagen.grf_initial(g, length_scale=grf["length_scale"],
                                         amplitude=grf["amplitude"], seed=seqs[i])
                     for i in range(g.n_v)])


def generate(config: RunConfig, out_dir: str, seed: Optional[int] = None) -> dict:
    """Solve the truth, add noise, mask observations, and write the artifacts."""
    eff_seed = config.data_seed if seed is None else int(seed)
    g = config.grid
    mu0 = resolve_ic(config)
    ratio = int(round(g.dt / config.truth_dt))
    fine = g if ratio == 1 else GridSpec(n_x=g.n_x, n_y=g.n_y, n_v=g.n_v,
                                         dx=g.dx, dy=g.dy, dt=config.truth_dt,
                                         n_t=(g.n_t - 1) * ratio + 1)
    if config.kind == "pendulum":
        traj = datagen.pendulum_truth(fine, mu0[:, 0], method=config.truth_method)
    else:
        traj = datagen.rd_truth(fine, mu0, diffusion=config.truth_diffusion,
                                method=config.truth_method)
    if ratio > 1:
        traj = datagen.subsample(traj, g)
    full = datagen.add_noise(traj, config.noise, seed=eff_seed)
    try:
        ds = datagen.mask_case(full, config.case)
    except datagen.DatagenError as e:
        raise ConfigError(f"data.case: {e}") from e
    if ds.n_entries == 0 or ds.max_frame < 1:
        raise ConfigError("data.case keeps too few observations to fit")

    os.makedirs(out_dir, exist_ok=True)
    h = config.hash
    is_field = g.n_points > 1
    truth_name = "truth.json" if is_field else "truth.csv"
    if is_field:
        write_field_truth(os.path.join(out_dir, truth_name), traj,
                          extra={"config_hash": h})
    else:
        write_ode_truth(os.path.join(out_dir, truth_name), traj)
    write_dataset(os.path.join(out_dir, "data.csv"), ds)
    write_json(os.path.join(out_dir, "ic.json"),
               {"kind": config.kind, "n_v": g.n_v, "n_points": g.n_points,
                "mu0": mu0.tolist()})
    manifest = {"config": config.resolved, "config_hash": h, "seed": eff_seed,
                "kind": config.kind,
                "grid": {"n_x": g.n_x, "n_y": g.n_y, "n_v": g.n_v, "dx": g.dx,
                         "dy": g.dy, "dt": g.dt, "n_t": g.n_t},
                "n_entries": ds.n_entries, "t_train_stop": config.case.t_stop,
                "files": {"truth": truth_name, "data": "data.csv", "ic": "ic.json"}}
    write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


# --- normalization from observations -----------------------------------------

def norm_from_dataset(ds: Dataset) -> NormSpec:
    """Per-variable constants from the observation table (rectangular masks)."""
    g = ds.grid
    samples: Dict[int, np.ndarray] = {}
    stride = None
    for v in sorted(set(ds.var_idx.tolist())):
        sel = ds.var_idx == v
        frames = np.unique(ds.frames[sel])
        points = np.unique(ds.points[sel])
        idx = {(f, p): val for f, p, val in
               zip(ds.frames[sel], ds.points[sel], ds.values[sel])}
        if len(idx) != frames.size * points.size:
            raise RunIoError(f"variable {v}: observation mask varies over time")
        samples[v] = np.array([[idx[(f, p)] for p in points] for f in frames])
        if frames.size >= 2:
            steps = np.unique(np.diff(frames))
            if steps.size != 1:
                raise RunIoError(f"variable {v}: uneven observation spacing")
            if stride is not None and steps[0] != stride:
                raise RunIoError("variables are observed at different strides")
            stride = int(steps[0])
    return systems.norm_from_samples(g.n_v, samples, (stride or 1) * g.dt)


# --- checkpoints -------------------------------------------------------------

def write_checkpoint(run_dir: str, index: int, result: TrainResult,
                     config_hash_hex: str) -> str:
    swag = result.swag
    name = f"member_{index:02d}"
    cols = swag.dhat
    parts = [("theta_swa", swag.mean), ("swag_second", swag.second),
             ("sigma_diag", swag.sigma_diag),
             ("dhat", cols.T.reshape(-1)), ("params", result.params.flat)]
    segments = {}
    offset = 0
    blobs = []
    for seg_name, arr in parts:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        segments[seg_name] = {"offset": offset, "count": int(arr.size)}
        offset += arr.size * 8
        blobs.append(arr.tobytes())
    with open(os.path.join(run_dir, name + ".bin"), "wb") as fh:
        fh.write(b"".join(blobs))
    manifest = {"config_hash": config_hash_hex, "member": index,
                "n_params": int(swag.mean.size), "rank": swag.rank,
                "count": swag.count, "interval": swag.interval,
                "columns": int(cols.shape[1]),
                "byte_order": "little", "float_width": 64,
                "data": name + ".bin", "segments": segments,
                "final_loss": float(result.losses[-1])}
    write_json(os.path.join(run_dir, name + ".json"), manifest)
    return name + ".json"


def read_checkpoint(manifest_path: str) -> Tuple[bayes.SwagStats, np.ndarray, dict]:
    man = read_json(manifest_path)
    if man.get("byte_order") != "little" or man.get("float_width") != 64:
        raise RunIoError(f"{manifest_path}: unsupported number encoding")
    bin_path = os.path.join(os.path.dirname(manifest_path), man["data"])
    if not os.path.isfile(bin_path):
        raise RunIoError(f"checkpoint data not found: {bin_path}")
    with open(bin_path, "rb") as fh:
        raw = fh.read()

    def seg(seg_name: str) -> np.ndarray:
        info = man["segments"][seg_name]
        lo = info["offset"]
        hi = lo + info["count"] * 8
        if hi > len(raw):
            raise RunIoError(f"{bin_path}: segment {seg_name} exceeds file size")
        return np.frombuffer(raw[lo:hi], dtype="<f8").astype(np.float64)

    n = man["n_params"]
    k = man["columns"]
    mean, second = seg("theta_swa"), seg("swag_second")
    sigma_diag, dhat_flat, params = seg("sigma_diag"), seg("dhat"), seg("params")
    if mean.size != n or second.size != n or params.size != n or dhat_flat.size != n * k:
        raise RunIoError(f"{manifest_path}: segment sizes disagree with n_params")
    stats = bayes.SwagStats(mean=mean, second=second,
                            dev_cols=[dhat_flat[j * n:(j + 1) * n] for j in range(k)],
                            rank=man["rank"], count=man["count"],
                            interval=man["interval"])
    if not np.array_equal(stats.sigma_diag, sigma_diag):
        raise RunIoError(f"{manifest_path}: sigma_diag disagrees with running moments")
    return stats, params, man


# --- training runs -----------------------------------------------------------

def _train_job(args):
    spec, ds, cfg, seed, mu0 = args
    return bayes.train_member(spec, ds, cfg, seed, mu0)


def train_run(config: RunConfig, data_dir: str, run_dir: str,
              seed: Optional[int] = None) -> dict:
    """Fit the ensemble against a generated dataset and write checkpoints."""
    if config.train is None:
        raise ConfigError("config has no train section")
    man_path = os.path.join(data_dir, "manifest.json")
    if not os.path.isfile(man_path):
        raise RunIoError(f"dataset manifest not found: {man_path}")
    data_man = read_json(man_path)
    if data_man.get("config_hash") != config.hash:
        raise ConfigError("dataset was generated from a different config")
    ds = read_dataset(os.path.join(data_dir, data_man["files"]["data"]), config.grid)
    ic = read_json(os.path.join(data_dir, data_man["files"]["ic"]))
    mu0 = np.asarray(ic["mu0"], dtype=np.float64)
    if mu0.shape != (config.grid.n_v, config.grid.n_points):
        raise ConfigError(f"initial condition shape {mu0.shape} does not match the grid")

    cfg_train = config.train if seed is None else replace(config.train, seed=int(seed))
    norm = NormSpec.identity(config.grid.n_v) if config.norm_mode == "identity" \
        else norm_from_dataset(ds)
    spec = config.system_spec(norm=norm)
    seeds = bayes.member_seeds(cfg_train)

    jobs = [(spec, ds, cfg_train, seeds[i], mu0) for i in range(cfg_train.n_members)]
    results: List[Optional[TrainResult]] = [None] * len(jobs)
    errors: List[Optional[str]] = [None] * len(jobs)
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = [pool.submit(_train_job, job) for job in jobs]
            for i, fut in enumerate(futures):
                try:
                    results[i] = fut.result()
                except bayes.BayesError as e:
                    errors[i] = str(e)
    else:
        for i, job in enumerate(jobs):
            try:
                results[i] = _train_job(job)
            except bayes.BayesError as e:
                errors[i] = str(e)
    if all(r is None for r in results):
        raise bayes.BayesError("all ensemble members failed: " + "; ".join(
            e for e in errors if e))

    os.makedirs(run_dir, exist_ok=True)
    h = config.hash
    members = []
    log_rows = []
    for i, res in enumerate(results):
        if res is None:
            members.append({"index": i, "status": "failed", "error": errors[i]})
            continue
        fname = write_checkpoint(run_dir, i, res, h)
        members.append({"index": i, "status": "ok", "file": fname,
                        "final_loss": float(res.losses[-1])})
        log_rows.extend((str(i), str(e), _fmt(res.losses[e]))
                        for e in range(res.losses.size))
    write_table(os.path.join(run_dir, "train_log.csv"),
                ("member", "epoch", "loss"), log_rows)

    files = {"log": "train_log.csv"}
    if spec.n_lam:
        rows = []
        for e in range(cfg_train.epochs):
            for i, res in enumerate(results):
                if res is None:
                    continue
                d = np.exp(res.lam_trace[e])
                s = np.sqrt(res.lam_var_trace[e]) * d
                cells = [str(e), str(i), _fmt(d[0]), _fmt(d[1])]
                cells += ["" if np.isnan(x) else _fmt(x) for x in s]
                rows.append(cells)
        write_table(os.path.join(run_dir, "coef_trace.csv"),
                    ("epoch", "member", "d1", "d2", "d1_std", "d2_std"), rows)
        files["coefficients"] = "coef_trace.csv"

    run_man = {"config": config.resolved, "config_hash": h,
               "train_seed": cfg_train.seed, "norm": norm.as_dict(),
               "mu0": mu0.tolist(), "t_train_stop": config.case.t_stop,
               "members": members, "files": files}
    write_json(os.path.join(run_dir, "run.json"), run_man)
    return run_man


# --- prediction --------------------------------------------------------------

_PRED_HEADER = ("t", "var", "point", "mean", "aleatoric", "epistemic", "total")


def predict_run(run_dir: str, out_dir: str, ic_path: Optional[str] = None,
                steps: Optional[int] = None, seed: Optional[int] = None,
                draws: Optional[int] = None) -> dict:
    """Posterior-averaged rollout from a training run's checkpoints."""
    run_path = os.path.join(run_dir, "run.json")
    if not os.path.isfile(run_path):
        raise RunIoError(f"run manifest not found: {run_path}")
    run_man = read_json(run_path)
    config = parse_config(run_man["config"])
    norm = NormSpec.from_dict(run_man["norm"])
    spec = config.system_spec(norm=norm)
    stats = []
    for m in sorted(run_man["members"], key=lambda m: m["index"]):
        if m["status"] != "ok":
            continue
        st, _, ck_man = read_checkpoint(os.path.join(run_dir, m["file"]))
        if ck_man.get("config_hash") != run_man["config_hash"]:
            raise ConfigError(f"checkpoint {m['file']} belongs to a different config")
        stats.append(st)

    if ic_path is not None:
        ic = read_json(ic_path)
        mu0 = np.asarray(ic["mu0"], dtype=np.float64)
    else:
        mu0 = np.asarray(run_man["mu0"], dtype=np.float64)
    g = config.grid
    if mu0.shape != (g.n_v, g.n_points):
        raise ConfigError(f"initial condition shape {mu0.shape} does not match "
                          f"({g.n_v}, {g.n_points})")

    eff_steps = config.predict_steps if steps is None else int(steps)
    if eff_steps < 0:
        raise ConfigError("steps must be >= 0")
    eff_seed = config.predict_seed if seed is None else int(seed)
    eff_draws = config.predict_draws if draws is None else int(draws)
    pred = bayes.bma_predict(stats, spec, mu0, eff_steps, eff_draws, eff_seed)

    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for k in range(eff_steps + 1):
        t = _fmt(k * g.dt)
        for v in range(g.n_v):
            for p in range(g.n_points):
                rows.append((t, str(v), str(p), _fmt(pred.mean[k, v, p]),
                             _fmt(pred.aleatoric[k, v, p]),
                             _fmt(pred.epistemic[k, v, p]),
                             _fmt(pred.total[k, v, p])))
    write_table(os.path.join(out_dir, "predictions.csv"), _PRED_HEADER, rows)
    manifest = {"config_hash": run_man["config_hash"], "steps": eff_steps,
                "draws": eff_draws, "draws_used": pred.draws_used,
                "draws_failed": pred.draws_failed, "seed": eff_seed,
                "dt": g.dt, "n_v": g.n_v, "n_points": g.n_points,
                "n_x": g.n_x, "n_y": g.n_y,
                "t_train_stop": run_man["t_train_stop"],
                "data": "predictions.csv"}
    write_json(os.path.join(out_dir, "pred.json"), manifest)
    return manifest


def read_predictions(pred_dir: str) -> Tuple[dict, np.ndarray, np.ndarray,
                                             np.ndarray, np.ndarray, np.ndarray]:
    man_path = os.path.join(pred_dir, "pred.json")
    if not os.path.isfile(man_path):
        raise RunIoError(f"prediction manifest not found: {man_path}")
    man = read_json(man_path)
    rows = read_table(os.path.join(pred_dir, man["data"]), _PRED_HEADER)
    n_f, n_v, n_p = man["steps"] + 1, man["n_v"], man["n_points"]
    if len(rows) != n_f * n_v * n_p:
        raise RunIoError(f"{pred_dir}: expected {n_f * n_v * n_p} rows, got {len(rows)}")
    try:
        flat = np.array([[float(c) for c in r] for r in rows])
    except ValueError as e:
        raise RunIoError(f"{pred_dir}: {e}") from e
    cube = flat.reshape(n_f, n_v, n_p, len(_PRED_HEADER))
    times = cube[:, 0, 0, 0]
    return man, times, cube[..., 3], cube[..., 4], cube[..., 5], cube[..., 6]


# --- evaluation --------------------------------------------------------------

def _spearman(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    if a.size < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return None
    from scipy.stats import spearmanr
    return float(spearmanr(a, b).statistic)


def evaluate_run(pred_dir: str, truth_path: str, out_path: str) -> dict:
    """Error, calibration, and correlation metrics against a truth file."""
    man, times, mean, aleat, epist, total = read_predictions(pred_dir)
    t_truth, v_truth, truth_hash = read_truth(truth_path)
    if truth_hash is not None and truth_hash != man["config_hash"]:
        raise ConfigError("prediction and truth carry different config hashes")
    if v_truth.shape[1:] != mean.shape[1:]:
        raise RunIoError(f"truth shape {v_truth.shape[1:]} does not match "
                         f"predictions {mean.shape[1:]}")
    idx = np.searchsorted(t_truth, times)
    idx = np.minimum(idx, t_truth.size - 1)
    # each prediction frame must land on a truth frame
    misses = np.abs(t_truth[idx] - times) > 1e-9
    if np.any(misses):
        raise RunIoError(f"misaligned frames: prediction time "
                         f"{times[misses][0]} missing from the truth file")
    truth = v_truth[idx]

    t_stop = man["t_train_stop"]
    masks = {"all": np.ones(times.size, dtype=bool),
             "train": times <= t_stop + 1e-9,
             "forecast": times > t_stop + 1e-9}
    err = mean - truth
    total_std = np.sqrt(total)
    windows = {}
    for name, sel in masks.items():
        if not np.any(sel):
            continue
        e = err[sel]
        windows[name] = {
            "n_frames": int(sel.sum()),
            "rmse": np.sqrt((e * e).mean(axis=(0, 2))).tolist(),
            "mean_aleatoric_var": aleat[sel].mean(axis=(0, 2)).tolist(),
            "mean_aleatoric_std": np.sqrt(aleat[sel]).mean(axis=(0, 2)).tolist(),
            "mean_epistemic_var": epist[sel].mean(axis=(0, 2)).tolist(),
            "coverage": float((np.abs(e) <= 3.0 * total_std[sel]).mean()),
            "spearman_abs_err_std": _spearman(np.abs(e).ravel(),
                                              total_std[sel].ravel()),
        }
    metrics = {"config_hash": man["config_hash"], "t_train_stop": t_stop,
               "windows": windows}
    write_json(out_path, metrics)
    return metrics


# --- gradient audit ----------------------------------------------------------

def gradcheck_run(config: RunConfig, steps: int = 10,
                  seed: Optional[int] = None) -> dict:
    """Finite-difference audit of the training objective at initialization.

    Relative errors on well-scaled segments land near 1e-8; parameters whose
    true gradient sits below ~1e-4 of an O(1) loss are limited by central
    difference roundoff (eps |f| / h), so the overall figure is judged
    against 5e-4 rather than the sharp single-segment level.
    """
    if steps < 1:
        raise ConfigError("gradcheck needs at least one step")
    eff_seed = config.data_seed if seed is None else int(seed)
    g = config.grid
    mu0 = resolve_ic(config)
    ratio = int(round(g.dt / config.truth_dt))
    fine = g if ratio == 1 else GridSpec(n_x=g.n_x, n_y=g.n_y, n_v=g.n_v,
                                         dx=g.dx, dy=g.dy, dt=config.truth_dt,
                                         n_t=(g.n_t - 1) * ratio + 1)
    if config.kind == "pendulum":
        traj = datagen.pendulum_truth(fine, mu0[:, 0], method=config.truth_method)
    else:
        traj = datagen.rd_truth(fine, mu0, diffusion=config.truth_diffusion,
                                method=config.truth_method)
    if ratio > 1:
        traj = datagen.subsample(traj, g)
    full = datagen.add_noise(traj, config.noise, seed=eff_seed)
    try:
        ds = datagen.mask_case(full, config.case)
    except datagen.DatagenError as e:
        raise ConfigError(f"data.case: {e}") from e
    keep = (ds.frames <= steps) & (ds.frames >= 1)
    if not np.any(keep):
        raise ConfigError(f"no observations inside the first {steps} steps")
    keep |= ds.frames == 0
    ds = Dataset(grid=g, frames=ds.frames[keep], var_idx=ds.var_idx[keep],
                 points=ds.points[keep], values=ds.values[keep])

    norm = NormSpec.identity(g.n_v) if config.norm_mode == "identity" \
        else norm_from_dataset(ds)
    spec = config.system_spec(norm=norm)
    objective = bayes.nll_objective(spec, ds, mu0)
    p0 = systems.build_params(spec, seed=config.train.seed if config.train else 0)
    theta0 = p0.flat
    n_lam, n_nn = p0.lam.size, p0.nn.size
    bounds = {"coefficients": (0, n_lam),
              "network": (n_lam, n_lam + n_nn),
              "initial_variance": (n_lam + n_nn, theta0.size)}
    t0 = time.perf_counter()
    segments = {}
    for seg_name, (lo, hi) in bounds.items():
        if lo == hi:
            segments[seg_name] = None
            continue

        def restricted(sub, with_grad=False, lo=lo, hi=hi):
            th = theta0.copy()
            th[lo:hi] = sub
            if with_grad:
                value, grad = objective(th, with_grad=True)
                return value, grad[lo:hi]
            return objective(th)

        segments[seg_name] = float(ad.gradcheck(restricted, theta0[lo:hi]))
    overall = max(v for v in segments.values() if v is not None)
    return {"n_params": int(theta0.size), "steps": steps,
            "observations": int(ds.n_entries), "loss": float(objective(theta0)),
            "segments": segments, "overall": overall,
            "elapsed_s": time.perf_counter() - t0}
