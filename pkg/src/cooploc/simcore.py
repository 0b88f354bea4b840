"""Fixed-step decentralized simulation.

Each step ``k -> k+1`` runs, in this order:

1. truth: every agent is propagated with the body velocities of its
   trajectory sampled at the middle of the step;
2. sensing: bearings at ``t_{k+1}`` for every visible, non-occluded edge;
3. exchange: landmarks publish their true pose, vehicles their estimates
   (this step's in ``topological`` mode, last step's in ``delayed`` mode);
4. observe: vehicles step their observers in topological order;
5. record.

Record 0 holds the initial state at ``t = 0``, so a run of ``N`` steps yields
``N + 1`` records.
"""
from __future__ import annotations

import logging
import math
import time as _time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .config import ScenarioConfig, load_scenario
from .geom3 import exp_so3
from .observability import gramian_batch, ideal_output_matrix
from .observer import (ErrorDiagnostics, ObserverState, assemble_measurement, diagnostics,
                       min_eig, observer_step, system_matrix)
from .sensing import (INIT_STREAM, VELOCITY_STREAM, BearingMeasurement, EstimateMessage,
                      NoiseConfig, NoiseStreams, noisy_velocities, sense_all, substream)
from .topology import InteractionGraph, topological_order
from .world import (AgentState, make_scenario_agents, min_pairwise_distance, propagate,
                    velocities_for_trajectory)

log = logging.getLogger(__name__)

MIN_SEPARATION = 0.1


class SimulationError(RuntimeError):
    def __init__(self, step: int, msg: str):
        super().__init__(f"step {step}: {msg}")
        self.step = step


@dataclass
class VehicleRecord:
    truth_pbar: np.ndarray
    est_pbar: np.ndarray
    diag: ErrorDiagnostics
    active: Tuple[int, ...]
    bitmask: int
    innovation_norm: float
    min_eig_P: float
    observable: Optional[bool] = None


@dataclass
class StepRecord:
    step: int
    t: float
    vehicles: Dict[int, VehicleRecord]
    landmarks: Dict[int, np.ndarray] = field(default_factory=dict)


def exchange_estimates(mode: str, graph: InteractionGraph, i: int,
                       landmarks: Mapping[int, EstimateMessage],
                       current: Mapping[int, EstimateMessage],
                       previous: Mapping[int, EstimateMessage]) -> Dict[int, EstimateMessage]:
    """Messages vehicle ``i`` receives from its declared neighbours.

    ``current`` holds estimates already updated this step (vehicles earlier
    in topological order), ``previous`` those of the last step.
    """
    out = {}
    for j in graph.neighbors_of(i):
        if graph.is_landmark(j):
            out[j] = landmarks[j]
        elif mode == "topological":
            if j not in current:
                raise RuntimeError(f"vehicle {i} stepped before its neighbour {j}")
            out[j] = current[j]
        elif mode == "delayed":
            out[j] = previous[j]
        else:
            raise ValueError(f"unknown communication mode {mode!r}")
    return out


def _truth_message(s: AgentState, t: float) -> EstimateMessage:
    return EstimateMessage.trusted(s.id, s.pose.R, s.pose.p, t)


def initial_observers(cfg: ScenarioConfig) -> Dict[int, ObserverState]:
    obs = {}
    for i in cfg.graph.vehicle_ids:
        est = cfg.initial_estimates[i]
        R = est.rotation()
        p = est.body_position()
        if cfg.init_jitter_position > 0 or cfg.init_jitter_angle > 0:
            z = substream(cfg.seed, i, INIT_STREAM).standard_normal(6)
            R = R @ exp_so3(cfg.init_jitter_angle * z[:3])
            # jitter the inertial position, keep it expressed in the new body frame
            p = R.T @ (est.rotation() @ p + cfg.init_jitter_position * z[3:])
        obs[i] = ObserverState(i, cfg.graph.neighbors_of(i), R, p, cfg.gains[i].P0.copy(), cfg.gains[i])
    return obs


class _ObservabilityLog:
    """Tiles the run into windows and back-fills each record's flag once a window closes."""

    def __init__(self, cfg: ScenarioConfig, records: List[StepRecord]):
        self.cfg = cfg
        self.records = records
        self.per = max(1, int(round(cfg.observability_window / cfg.dt)))
        self.A: Dict[int, list] = {i: [] for i in cfg.graph.vehicle_ids}
        self.C: Dict[int, list] = {i: [] for i in cfg.graph.vehicle_ids}  # holds C^T C
        self.start = 0  # first record index of the open window
        self.schedules: Dict[int, Tuple[list, list]] = {i: ([], []) for i in cfg.graph.vehicle_ids}
        self.lost: Dict[int, bool] = {i: False for i in cfg.graph.vehicle_ids}

    def add(self, world: Mapping[int, AgentState], active: Mapping[int, Sequence[int]]):
        for i in self.A:
            s = world[i]
            C = ideal_output_matrix(s, [world[j].inertial for j in active[i]])
            A = system_matrix(s.omega)
            self.A[i].append(A)
            self.C[i].append(C.T @ C)
            self.schedules[i][0].append(A)
            self.schedules[i][1].append(C)
        if len(next(iter(self.A.values()))) >= self.per:
            self.flush()

    def flush(self):
        n = len(next(iter(self.A.values()), []))
        if n == 0:
            return
        t0 = self.start * self.cfg.dt
        stop = self.start + n + 1
        first = 0 if self.start == 0 else self.start + 1
        ids = list(self.A)
        W = gramian_batch(np.array([self.A[i] for i in ids]), np.array([self.C[i] for i in ids]),
                          self.cfg.dt)
        lo = np.linalg.eigvalsh(W)[:, 0]
        for i, w in zip(ids, lo):
            ok = bool(w >= self.cfg.observability_threshold)
            if not ok and not self.lost[i]:
                # estimates keep running on prediction and partial corrections
                log.warning("vehicle %s not observable from t=%.2f s (min Gramian eig %.2e)",
                            self.cfg.vehicle_name(i), t0, w)
            self.lost[i] = not ok
            for r in self.records[first:stop]:
                r.vehicles[i].observable = ok
            self.A[i] = []
            self.C[i] = []
        self.start += n


def run_scenario(cfg: ScenarioConfig, on_step: Optional[Callable[[StepRecord], None]] = None,
                 keep_schedules: bool = False) -> List[StepRecord]:
    """Run a scenario and return one record per step plus the initial record.

    With ``keep_schedules`` the per-step ``(A, C*)`` pairs used for the
    observability flags are attached to the returned list as ``.schedules``.
    """
    graph = cfg.graph
    dt = cfg.dt
    order = topological_order(graph)
    world = {s.id: s for s in make_scenario_agents(cfg)}
    trajs = {k: a.trajectory for k, a in enumerate(cfg.agents, start=1)}
    obs = initial_observers(cfg)
    noise = cfg.noise if cfg.noise_enabled else NoiseConfig.off(cfg.seed)
    noisy = cfg.noise_enabled and (noise.sigma_v > 0 or noise.sigma_omega > 0)
    cam = cfg.camera if cfg.visibility else None
    bearing_noise = noise if noise.bearing_bound > 0 else None
    streams = NoiseStreams(cfg.seed)
    landmark_ids = list(graph.landmark_ids)

    def blocked_at(t):
        out: Dict[int, List[int]] = {}
        for o in cfg.occlusions:
            if o.active(t):
                out.setdefault(o.observer, []).extend(o.targets)
        return out

    def by_observer(meas: Sequence[BearingMeasurement]):
        out: Dict[int, List[BearingMeasurement]] = {i: [] for i in graph.vehicle_ids}
        for m in meas:
            out[m.observer].append(m)
        return out

    records: List[StepRecord] = []
    obs_log = _ObservabilityLog(cfg, records) if cfg.observability else None

    # initial record: innovations of the initial estimates against t=0 bearings
    snap, meas = sense_all(list(world.values()), graph, cam, bearing_noise, streams, 0.0, blocked_at(0.0))
    mine = by_observer(meas)
    lm_msgs = {j: _truth_message(world[j], 0.0) for j in landmark_ids}
    msgs = {i: obs[i].message() for i in obs}
    vrec = {}
    for i in graph.vehicle_ids:
        inbox = {j: (lm_msgs[j] if graph.is_landmark(j) else msgs[j]) for j in graph.neighbors_of(i)}
        model = assemble_measurement(obs[i], mine[i], inbox)
        e = model.innovation(obs[i].p_hat)
        vrec[i] = _vehicle_record(obs[i], world[i], snap, graph, i,
                                  math.sqrt(float(e @ e)), None)
    records.append(StepRecord(0, 0.0, vrec, {j: world[j].inertial for j in landmark_ids}))
    if on_step:
        on_step(records[-1])

    for k in range(cfg.n_steps):
        t = k * dt
        t_next = (k + 1) * dt
        # 1. truth
        for a, s in world.items():
            v, w = velocities_for_trajectory(trajs[a], t + 0.5 * dt)
            world[a] = propagate(s.with_inputs(v, w), dt)
        d = min_pairwise_distance(list(world.values()))
        if not d > MIN_SEPARATION:
            raise SimulationError(k + 1, f"agents closer than {MIN_SEPARATION} m ({d:.3g} m)")
        # 2. sensing
        snap, meas = sense_all(list(world.values()), graph, cam, bearing_noise, streams, t_next,
                               blocked_at(t_next))
        mine = by_observer(meas)
        # 3./4. exchange and observe
        lm_msgs = {j: _truth_message(world[j], t_next) for j in landmark_ids}
        previous = {i: obs[i].message() for i in obs}
        current: Dict[int, EstimateMessage] = {}
        infos = {}
        for i in order:
            s = world[i]
            v_m, w_m = s.v, s.omega
            if noisy:
                v_m, w_m = noisy_velocities(s.v, s.omega, noise, streams.get(i, VELOCITY_STREAM))
            inbox = exchange_estimates(cfg.communication, graph, i, lm_msgs, current, previous)
            try:
                obs[i], info = observer_step(obs[i], v_m, w_m, mine[i], inbox, dt, cfg.correction)
            except Exception as exc:
                raise SimulationError(k + 1, f"vehicle {i}: {exc}") from exc
            current[i] = obs[i].message(info.path)
            infos[i] = info
        # one batched eigenvalue call for all vehicles
        lows = np.linalg.eigvalsh(np.array([obs[i].P for i in order]))[:, 0]
        vrec = {i: _vehicle_record(obs[i], world[i], snap, graph, i, infos[i].innovation_norm,
                                   infos[i].omega_hat, float(lo)) for i, lo in zip(order, lows)}
        # 5. record
        rec = StepRecord(k + 1, t_next, {i: vrec[i] for i in graph.vehicle_ids},
                         {j: world[j].inertial for j in landmark_ids})
        records.append(rec)
        if obs_log is not None:
            obs_log.add(world, snap.active_edges)
        if on_step:
            on_step(rec)
    if obs_log is not None:
        obs_log.flush()
        if keep_schedules:
            records = _RecordList(records)
            records.schedules = obs_log.schedules
    return records


class _RecordList(list):
    schedules: Dict[int, Tuple[list, list]]


def _vehicle_record(state: ObserverState, truth: AgentState, snap, graph, i, innov, omega_hat, lo=None):
    d = diagnostics(state, truth, omega_hat)
    lo = min_eig(state.P) if lo is None else lo
    if not lo > 0:
        raise SimulationError(-1, f"vehicle {i}: Riccati matrix not positive definite")
    return VehicleRecord(truth.inertial, state.inertial, d, snap.active(i), snap.bitmask(graph, i),
                         innov, lo)


# ------------------------------------------------------------ scenarios

def busy_intersection_scenario() -> ScenarioConfig:
    return load_scenario("busy_intersection")


def crossing_path_scenario() -> ScenarioConfig:
    return load_scenario("crossing_path")


def overtaking_scenario() -> ScenarioConfig:
    return load_scenario("overtaking")


def timed_run(cfg: ScenarioConfig, **kw) -> Tuple[List[StepRecord], float]:
    t0 = _time.perf_counter()
    recs = run_scenario(cfg, **kw)
    return recs, _time.perf_counter() - t0
