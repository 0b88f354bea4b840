"""Scenario description and its JSON form.

A scenario file is a JSON object. Agents are listed landmarks first; their
position in the list fixes their 1-based id, and neighbours are referred to
by agent name. Unknown keys are rejected with the path of the offending key.

Example (abridged)::

    {
      "name": "demo", "duration": 60.0, "dt": 0.016666666666666666, "seed": 0,
      "communication": "topological", "visibility": false, "noise_enabled": true,
      "noise": {"sigma_v": 0.1, "sigma_omega": 0.01, "bearing_bound": 0.005},
      "gains": {"k": 1.0, "q": 10.0, "V_diag": [0.1, 0.1, 0.1, 1, 1, 1],
                "P0_diag": [1, 1, 1, 100, 100, 100]},
      "agents": [
        {"name": "SL1", "kind": "landmark",
         "trajectory": {"kind": "static", "start": [-4, 5, 3]}},
        ...
        {"name": "f1", "kind": "vehicle", "neighbors": ["SL1", "SL2", "SL3"],
         "trajectory": {"kind": "linear", "start": [-2, -16, 2.5], "velocity": [0, 0.6, 0]},
         "initial_estimate": {"quaternion": [0.7071, 0, 0, 0.7071], "position": [0, -5, 5]}}
      ],
      "occlusions": [{"observer": "f1", "targets": ["SL2"], "start": 21, "end": 25}]
    }

See ``docs/scenario_schema.md`` for every key and its default.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .geom3 import rotation_from_quat
from .observer import ObserverGains
from .sensing import CameraModel, NoiseConfig
from .topology import InteractionGraph, validate_graph
from .world import LANDMARK, VEHICLE, Trajectory

SCHEMA_VERSION = 1
COMM_MODES = ("topological", "delayed")
SCENARIO_PACKAGE = "cooploc.scenarios"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class InitialEstimate:
    """Initial ``(R_hat, p_hat)``; ``position_frame`` says how ``position`` is expressed.

    ``inertial``: ``position`` is ``R_hat p_hat``. ``body``: it is ``p_hat``.
    """
    quaternion: Tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    position: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    position_frame: str = "inertial"

    def rotation(self) -> np.ndarray:
        q = self.quaternion
        return rotation_from_quat((q[0], np.asarray(q[1:], dtype=float)))

    def body_position(self) -> np.ndarray:
        p = np.asarray(self.position, dtype=float)
        return p if self.position_frame == "body" else self.rotation().T @ p


@dataclass
class AgentSpec:
    name: str
    kind: str
    trajectory: Trajectory
    radius: float = 0.25
    neighbors: Tuple[str, ...] = ()
    initial_estimate: Optional[InitialEstimate] = None
    gains: Optional[Dict[str, Any]] = None
    raw_trajectory: Dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Occlusion:
    """Scripted loss of the edges ``observer -> targets`` for ``start <= t < end``."""
    observer: int
    targets: Tuple[int, ...]
    start: float
    end: float

    def active(self, t: float) -> bool:
        return self.start <= t < self.end


@dataclass
class ScenarioConfig:
    name: str
    agents: List[AgentSpec]
    graph: InteractionGraph
    gains: Dict[int, ObserverGains]
    initial_estimates: Dict[int, InitialEstimate]
    duration: float = 60.0
    dt: float = 1.0 / 60.0
    seed: int = 0
    communication: str = "topological"
    visibility: bool = False
    noise_enabled: bool = True
    observability: bool = True
    camera: CameraModel = field(default_factory=CameraModel)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    occlusions: List[Occlusion] = field(default_factory=list)
    observability_window: float = 0.5
    observability_threshold: float = 1e-6
    correction: str = "zoh"
    init_jitter_position: float = 0.0
    init_jitter_angle: float = 0.0
    error_threshold: float = 0.1
    raw: Dict[str, Any] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        errs = []
        if not self.dt > 0:
            errs.append(f"dt must be positive (got {self.dt})")
        if not self.duration >= self.dt:
            errs.append(f"duration must be at least dt (got {self.duration})")
        if self.communication not in COMM_MODES:
            errs.append(f"communication must be one of {COMM_MODES} (got {self.communication!r})")
        if self.correction not in ("zoh", "euler"):
            errs.append(f"correction must be 'zoh' or 'euler' (got {self.correction!r})")
        if not self.observability_window > 0:
            errs.append("observability_window must be positive")
        rep = validate_graph(self.graph)
        if not rep.ok:
            errs.append(f"interaction graph: {rep}")
        for i in self.graph.vehicle_ids:
            if i not in self.gains:
                errs.append(f"vehicle {i} has no observer gains")
            if i not in self.initial_estimates:
                errs.append(f"vehicle {i} has no initial estimate")
        if errs:
            raise ConfigError("; ".join(errs))

    @property
    def n_steps(self) -> int:
        # tolerate duration/dt landing a hair above an integer
        return int(math.ceil(self.duration / self.dt - 1e-9))

    @property
    def names(self) -> Dict[int, str]:
        return {k: a.name for k, a in enumerate(self.agents, start=1)}

    def vehicle_name(self, i: int) -> str:
        return self.agents[i - 1].name

    def replace(self, **changes) -> "ScenarioConfig":
        """Copy with top-level changes, re-validated through the JSON form."""
        d = to_dict(self)
        for k, v in changes.items():
            if k == "noise":
                d["noise"].update(v)
            else:
                d[k] = v
        return from_dict(d)


# ---------------------------------------------------------------- parsing

_TOP_KEYS = {
    "schema_version", "name", "description", "duration", "dt", "seed", "communication",
    "visibility", "noise_enabled", "observability", "camera", "noise", "gains", "agents",
    "occlusions", "observability_window", "observability_threshold", "correction",
    "init_jitter", "error_threshold",
}
_AGENT_KEYS = {"name", "kind", "trajectory", "radius", "neighbors", "initial_estimate", "gains"}
_TRAJ_KEYS = {"kind", "start", "velocity", "waypoints", "expression", "orientation", "yaw_deg",
              "mount", "quaternion"}
_GAIN_KEYS = {"k", "q", "V_diag", "P0_diag"}
_CAMERA_KEYS = {"h_half_angle_deg", "v_half_angle_deg", "max_range", "boresight", "right"}
_NOISE_KEYS = {"sigma_v", "sigma_omega", "bearing_bound"}
_EST_KEYS = {"quaternion", "position", "position_frame"}
_OCC_KEYS = {"observer", "targets", "start", "end"}
_JITTER_KEYS = {"position", "angle"}

DEFAULT_GAINS = {"k": 1.0, "q": 10.0, "V_diag": [0.1, 0.1, 0.1, 1.0, 1.0, 1.0],
                 "P0_diag": [1.0, 1.0, 1.0, 100.0, 100.0, 100.0]}


def _check_keys(obj: Any, allowed: set, where: str) -> None:
    if not isinstance(obj, Mapping):
        raise ConfigError(f"{where}: expected an object")
    extra = sorted(set(obj) - allowed)
    if extra:
        raise ConfigError(f"{where}: unknown key(s) {extra}; allowed: {sorted(allowed)}")


def _vec(x, n: int, where: str) -> Tuple[float, ...]:
    try:
        v = tuple(float(a) for a in x)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: expected {n} numbers") from None
    if len(v) != n or not all(math.isfinite(a) for a in v):
        raise ConfigError(f"{where}: expected {n} finite numbers, got {x!r}")
    return v


def _num(x, where: str) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
        raise ConfigError(f"{where}: expected a finite number, got {x!r}")
    return float(x)


def _trajectory(d: Mapping, where: str) -> Trajectory:
    _check_keys(d, _TRAJ_KEYS, where)
    kw: Dict[str, Any] = {"kind": d.get("kind", "static")}
    if "start" in d:
        kw["start"] = _vec(d["start"], 3, f"{where}.start")
    if "velocity" in d:
        kw["velocity"] = _vec(d["velocity"], 3, f"{where}.velocity")
    if "waypoints" in d:
        kw["waypoints"] = [_vec(r, 4, f"{where}.waypoints[{k}]") for k, r in enumerate(d["waypoints"])]
    if "expression" in d:
        kw["expression"] = tuple(str(e) for e in d["expression"])
    for key in ("orientation", "mount"):
        if key in d:
            kw[key] = str(d[key])
    if "yaw_deg" in d:
        kw["yaw"] = math.radians(_num(d["yaw_deg"], f"{where}.yaw_deg"))
    if "quaternion" in d:
        kw["quaternion"] = _vec(d["quaternion"], 4, f"{where}.quaternion")
    try:
        return Trajectory(**kw)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _gains(d: Mapping, names: Mapping[str, int], nbrs: Sequence[int], where: str) -> ObserverGains:
    _check_keys(d, _GAIN_KEYS, where)
    q = d["q"]
    if isinstance(q, Mapping):
        qmap = {}
        for nm, w in q.items():
            if nm not in names:
                raise ConfigError(f"{where}.q: unknown agent {nm!r}")
            qmap[names[nm]] = _num(w, f"{where}.q.{nm}")
        missing = [j for j in nbrs if j not in qmap]
        if missing:
            raise ConfigError(f"{where}.q: no weight for neighbours {missing}")
        q = qmap
    else:
        q = _num(q, f"{where}.q")
    try:
        return ObserverGains(k=_num(d["k"], f"{where}.k"), q=q,
                             V=np.diag(_vec(d["V_diag"], 6, f"{where}.V_diag")),
                             P0=np.diag(_vec(d["P0_diag"], 6, f"{where}.P0_diag")))
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_dict(d: Mapping[str, Any], source: str = "<scenario>") -> ScenarioConfig:
    """Validate a scenario object and build a :class:`ScenarioConfig`."""
    _check_keys(d, _TOP_KEYS, source)
    if d.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f"{source}.schema_version: unsupported version {d['schema_version']!r}")
    raw = copy.deepcopy(dict(d))
    agents_raw = d.get("agents")
    if not isinstance(agents_raw, list) or not agents_raw:
        raise ConfigError(f"{source}.agents: expected a non-empty list")

    names: Dict[str, int] = {}
    for k, a in enumerate(agents_raw):
        where = f"{source}.agents[{k}]"
        _check_keys(a, _AGENT_KEYS, where)
        nm = a.get("name")
        if not isinstance(nm, str) or not nm:
            raise ConfigError(f"{where}.name: required string")
        if nm in names:
            raise ConfigError(f"{where}.name: duplicate agent name {nm!r}")
        names[nm] = k + 1
    kinds = [a.get("kind") for a in agents_raw]
    for k, kind in enumerate(kinds):
        if kind not in (LANDMARK, VEHICLE):
            raise ConfigError(f"{source}.agents[{k}].kind: expected 'landmark' or 'vehicle', got {kind!r}")
    n_l = kinds.count(LANDMARK)
    if n_l < 3:
        raise ConfigError(f"{source}.agents: landmark assumption violated: at least three landmark agents "
                          f"are required (got {n_l})")
    if kinds != sorted(kinds, key=lambda s: s != LANDMARK):
        raise ConfigError(f"{source}.agents: landmarks must be listed before vehicles")

    base_gains = dict(DEFAULT_GAINS)
    if "gains" in d:
        _check_keys(d["gains"], _GAIN_KEYS, f"{source}.gains")
        base_gains.update(d["gains"])

    agents: List[AgentSpec] = []
    neighbors: Dict[int, Tuple[int, ...]] = {}
    gains: Dict[int, ObserverGains] = {}
    inits: Dict[int, InitialEstimate] = {}
    for k, a in enumerate(agents_raw):
        where = f"{source}.agents[{k}]"
        i = k + 1
        traj = _trajectory(a.get("trajectory", {}), f"{where}.trajectory")
        nb_names = a.get("neighbors", [])
        nb = []
        for nm in nb_names:
            if nm not in names:
                raise ConfigError(f"{where}.neighbors: unknown agent {nm!r}")
            nb.append(names[nm])
        spec = AgentSpec(a["name"], a["kind"], traj, _num(a.get("radius", 0.25), f"{where}.radius"),
                         tuple(nb_names), raw_trajectory=dict(a.get("trajectory", {})))
        if a["kind"] == VEHICLE:
            neighbors[i] = tuple(nb)
            g = dict(base_gains)
            if "gains" in a:
                _check_keys(a["gains"], _GAIN_KEYS, f"{where}.gains")
                g.update(a["gains"])
            spec.gains = a.get("gains")
            gains[i] = _gains(g, names, nb, f"{where}.gains")
            est = a.get("initial_estimate")
            if est is None:
                raise ConfigError(f"{where}.initial_estimate: required for vehicles")
            _check_keys(est, _EST_KEYS, f"{where}.initial_estimate")
            frame = est.get("position_frame", "inertial")
            if frame not in ("inertial", "body"):
                raise ConfigError(f"{where}.initial_estimate.position_frame: 'inertial' or 'body'")
            ie = InitialEstimate(_vec(est.get("quaternion", (1, 0, 0, 0)), 4, f"{where}.initial_estimate.quaternion"),
                                 _vec(est.get("position", (0, 0, 0)), 3, f"{where}.initial_estimate.position"),
                                 frame)
            try:
                ie.rotation()
            except ValueError as exc:
                raise ConfigError(f"{where}.initial_estimate.quaternion: {exc}") from None
            spec.initial_estimate = ie
            inits[i] = ie
        elif nb_names:
            raise ConfigError(f"{where}.neighbors: landmark agents cannot have neighbours")
        agents.append(spec)

    graph = InteractionGraph(n_l, len(agents) - n_l, neighbors)
    rep = validate_graph(graph)
    if not rep.ok:
        raise ConfigError(f"{source}: interaction graph invalid: {rep}")

    cam_d = d.get("camera", {})
    _check_keys(cam_d, _CAMERA_KEYS, f"{source}.camera")
    try:
        cam = CameraModel(
            math.radians(_num(cam_d.get("h_half_angle_deg", 60.0), f"{source}.camera.h_half_angle_deg")),
            math.radians(_num(cam_d.get("v_half_angle_deg", 45.0), f"{source}.camera.v_half_angle_deg")),
            _num(cam_d.get("max_range", 50.0), f"{source}.camera.max_range"),
            _vec(cam_d.get("boresight", (0, 0, 1)), 3, f"{source}.camera.boresight"),
            _vec(cam_d.get("right", (1, 0, 0)), 3, f"{source}.camera.right"))
    except ValueError as exc:
        raise ConfigError(f"{source}.camera: {exc}") from None

    seed = d.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"{source}.seed: expected a non-negative integer, got {seed!r}")
    nz = d.get("noise", {})
    _check_keys(nz, _NOISE_KEYS, f"{source}.noise")
    try:
        noise = NoiseConfig(_num(nz.get("sigma_v", 0.1), f"{source}.noise.sigma_v"),
                            _num(nz.get("sigma_omega", 0.01), f"{source}.noise.sigma_omega"),
                            _num(nz.get("bearing_bound", 0.005), f"{source}.noise.bearing_bound"),
                            seed)
    except ValueError as exc:
        raise ConfigError(f"{source}.noise: {exc}") from None

    occ = []
    for k, o in enumerate(d.get("occlusions", [])):
        where = f"{source}.occlusions[{k}]"
        _check_keys(o, _OCC_KEYS, where)
        obs = names.get(o.get("observer"))
        if obs is None or kinds[obs - 1] != VEHICLE:
            raise ConfigError(f"{where}.observer: unknown vehicle {o.get('observer')!r}")
        tg = []
        for nm in o.get("targets", []):
            if nm not in names:
                raise ConfigError(f"{where}.targets: unknown agent {nm!r}")
            tg.append(names[nm])
        t0, t1 = _num(o.get("start"), f"{where}.start"), _num(o.get("end"), f"{where}.end")
        if not t1 > t0:
            raise ConfigError(f"{where}: end must be after start")
        occ.append(Occlusion(obs, tuple(tg), t0, t1))

    jit = d.get("init_jitter", {})
    _check_keys(jit, _JITTER_KEYS, f"{source}.init_jitter")

    def flag(key, default):
        v = d.get(key, default)
        if not isinstance(v, bool):
            raise ConfigError(f"{source}.{key}: expected true or false")
        return v

    try:
        return ScenarioConfig(
            name=str(d.get("name", Path(source).stem)), agents=agents, graph=graph, gains=gains,
            initial_estimates=inits,
            duration=_num(d.get("duration", 60.0), f"{source}.duration"),
            dt=_num(d.get("dt", 1.0 / 60.0), f"{source}.dt"),
            seed=seed, communication=d.get("communication", "topological"),
            visibility=flag("visibility", False), noise_enabled=flag("noise_enabled", True),
            observability=flag("observability", True), camera=cam, noise=noise, occlusions=occ,
            observability_window=_num(d.get("observability_window", 0.5), f"{source}.observability_window"),
            observability_threshold=_num(d.get("observability_threshold", 1e-6),
                                         f"{source}.observability_threshold"),
            correction=d.get("correction", "zoh"),
            init_jitter_position=_num(jit.get("position", 0.0), f"{source}.init_jitter.position"),
            init_jitter_angle=_num(jit.get("angle", 0.0), f"{source}.init_jitter.angle"),
            error_threshold=_num(d.get("error_threshold", 0.1), f"{source}.error_threshold"),
            raw=raw)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def to_dict(cfg: ScenarioConfig) -> Dict[str, Any]:
    """Effective configuration with every default filled in (round-trips through :func:`from_dict`)."""
    names = cfg.names
    agents = []
    for i, a in enumerate(cfg.agents, start=1):
        ad: Dict[str, Any] = {"name": a.name, "kind": a.kind, "radius": a.radius,
                              "trajectory": copy.deepcopy(a.raw_trajectory)}
        if a.kind == VEHICLE:
            ad["neighbors"] = [names[j] for j in cfg.graph.neighbors_of(i)]
            g = cfg.gains[i]
            q = ({names[j]: w for j, w in g.q.items()} if isinstance(g.q, Mapping) else g.q)
            ad["gains"] = {"k": g.k, "q": q, "V_diag": np.diag(g.V).tolist(),
                           "P0_diag": np.diag(g.P0).tolist()}
            e = cfg.initial_estimates[i]
            ad["initial_estimate"] = {"quaternion": list(e.quaternion), "position": list(e.position),
                                      "position_frame": e.position_frame}
        agents.append(ad)
    cam = cfg.camera
    return {
        "schema_version": SCHEMA_VERSION,
        "name": cfg.name,
        "duration": cfg.duration, "dt": cfg.dt, "seed": cfg.seed,
        "communication": cfg.communication, "visibility": cfg.visibility,
        "noise_enabled": cfg.noise_enabled, "observability": cfg.observability,
        "correction": cfg.correction,
        "observability_window": cfg.observability_window,
        "observability_threshold": cfg.observability_threshold,
        "error_threshold": cfg.error_threshold,
        "init_jitter": {"position": cfg.init_jitter_position, "angle": cfg.init_jitter_angle},
        "camera": {"h_half_angle_deg": math.degrees(cam.h_half_angle),
                   "v_half_angle_deg": math.degrees(cam.v_half_angle),
                   "max_range": cam.max_range, "boresight": list(cam.boresight),
                   "right": list(cam.right)},
        "noise": {"sigma_v": cfg.noise.sigma_v, "sigma_omega": cfg.noise.sigma_omega,
                  "bearing_bound": cfg.noise.bearing_bound},
        "agents": agents,
        "occlusions": [{"observer": names[o.observer], "targets": [names[j] for j in o.targets],
                        "start": o.start, "end": o.end} for o in cfg.occlusions],
    }


def parse_scenario(path: Union[str, Path]) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return from_dict(d, str(path))


def list_scenarios() -> List[str]:
    root = resources.files(SCENARIO_PACKAGE)
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_scenario(name_or_path: Union[str, Path]) -> ScenarioConfig:
    """A shipped scenario by name, or a scenario file by path."""
    name = str(name_or_path)
    if name in list_scenarios():
        res = resources.files(SCENARIO_PACKAGE) / f"{name}.json"
        return from_dict(json.loads(res.read_text()), name)
    if Path(name).exists():
        return parse_scenario(name)
    raise ConfigError(f"no shipped scenario or file named {name!r}; shipped: {list_scenarios()}")
