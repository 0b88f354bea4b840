"""Command line front end: run scenarios, write CSVs, export plot data.

Files written by ``run`` into the output directory:

``states.csv``
    one row per record per vehicle (schema ``STATES_SCHEMA``)
``landmarks.csv``
    one row per record per landmark with its inertial position
``summary.csv``
    one row per vehicle with the run statistics (see :class:`RunSummary`)
``config.json``
    the effective configuration, every default filled in

Every CSV starts with a ``# schema: <name>/<version>`` line followed by the
header. Floats use 17 significant digits so values round-trip exactly.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import optimize

from .config import ConfigError, ScenarioConfig, list_scenarios, load_scenario, to_dict
from .simcore import SimulationError, StepRecord, timed_run

log = logging.getLogger(__name__)

OUTPUT_ENV = "COOPLOC_OUTPUT_DIR"
DEFAULT_OUTPUT = "cooploc-out"

STATES_SCHEMA = "cooploc.states/1"
LANDMARKS_SCHEMA = "cooploc.landmarks/1"
SUMMARY_SCHEMA = "cooploc.summary/1"

STATES_COLUMNS = [
    "t", "vehicle", "name",
    "truth_x", "truth_y", "truth_z",
    "est_x", "est_y", "est_z",
    "err_x", "err_y", "err_z",            # inertial error pbar - R_hat p_hat
    "ptilde_x", "ptilde_y", "ptilde_z",   # body-frame error p - p_hat
    "lam_x", "lam_y", "lam_z",            # vector part of the quaternion of R_hat^T R
    "angle", "innovation_norm", "active_bitmask", "min_eig_P", "observable",
]
LANDMARK_COLUMNS = ["t", "landmark", "name", "x", "y", "z"]
SUMMARY_COLUMNS = [
    "vehicle", "name", "final_error", "final_angle", "decay_rate", "fit_r2",
    "time_to_threshold", "steady_rms", "threshold", "runtime_s", "steps", "seed",
]

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3, 4


class SchemaError(ValueError):
    pass


def fmt(x: float) -> str:
    return f"{x:.16e}"


# ------------------------------------------------------------ writing

def _write_csv(path: Path, schema: str, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {schema}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def state_rows(records: Sequence[StepRecord], names: Dict[int, str]):
    for r in records:
        t = fmt(r.t)
        for i, v in r.vehicles.items():
            d = v.diag
            obs = "" if v.observable is None else str(int(v.observable))
            yield ([t, i, names[i]]
                   + [fmt(x) for x in v.truth_pbar] + [fmt(x) for x in v.est_pbar]
                   + [fmt(x) for x in d.pbar_tilde] + [fmt(x) for x in d.p_tilde]
                   + [fmt(x) for x in d.lam]
                   + [fmt(d.angle), fmt(v.innovation_norm), v.bitmask, fmt(v.min_eig_P), obs])


def landmark_rows(records: Sequence[StepRecord], names: Dict[int, str]):
    for r in records:
        t = fmt(r.t)
        for j, p in r.landmarks.items():
            yield [t, j, names[j]] + [fmt(x) for x in p]


# ------------------------------------------------------------ reading

def _read_csv(path: Path, schema: str, header: Sequence[str]) -> List[List[str]]:
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise SchemaError(f"{path}: {exc.strerror}") from None
    with fh:
        first = fh.readline().strip()
        if first != f"# schema: {schema}":
            raise SchemaError(f"{path}: expected schema line '# schema: {schema}', got {first!r}")
        rd = csv.reader(fh)
        got = next(rd, None)
        if got != list(header):
            raise SchemaError(f"{path}: header mismatch")
        rows = list(rd)
    for n, row in enumerate(rows, start=3):
        if len(row) != len(header):
            raise SchemaError(f"{path}:{n}: expected {len(header)} fields, got {len(row)}")
    return rows


def read_states(path) -> Dict[int, Dict[str, np.ndarray]]:
    """Parse ``states.csv`` into per-vehicle column arrays (name under ``"name"``)."""
    rows = _read_csv(path, STATES_SCHEMA, STATES_COLUMNS)
    out: Dict[int, Dict[str, list]] = {}
    for n, row in enumerate(rows, start=3):
        try:
            i = int(row[1])
            vals = [float(x) for x in row[3:20]] + [int(row[20]), float(row[21])]
            obs = math.nan if row[22] == "" else float(int(row[22]))
            t = float(row[0])
        except ValueError:
            raise SchemaError(f"{path}:{n}: malformed value") from None
        col = out.setdefault(i, {"name": row[2], **{c: [] for c in STATES_COLUMNS if c not in ("vehicle", "name")}})
        col["t"].append(t)
        for c, x in zip(STATES_COLUMNS[3:22], vals):
            col[c].append(x)
        col["observable"].append(obs)
    return {i: {k: (v if k == "name" else np.asarray(v)) for k, v in c.items()} for i, c in out.items()}


def read_landmarks(path) -> Dict[int, Dict[str, np.ndarray]]:
    rows = _read_csv(path, LANDMARKS_SCHEMA, LANDMARK_COLUMNS)
    out: Dict[int, Dict[str, list]] = {}
    for n, row in enumerate(rows, start=3):
        try:
            j = int(row[1])
            t, x, y, z = (float(a) for a in (row[0], *row[3:]))
        except ValueError:
            raise SchemaError(f"{path}:{n}: malformed value") from None
        col = out.setdefault(j, {"name": row[2], "t": [], "x": [], "y": [], "z": []})
        for k, a in zip("txyz", (t, x, y, z)):
            col[k].append(a)
    return {j: {k: (v if k == "name" else np.asarray(v)) for k, v in c.items()} for j, c in out.items()}


def read_summary(path) -> List[Dict[str, str]]:
    rows = _read_csv(path, SUMMARY_SCHEMA, SUMMARY_COLUMNS)
    return [dict(zip(SUMMARY_COLUMNS, r)) for r in rows]


# ------------------------------------------------------------ statistics

@dataclass
class RunSummary:
    vehicle: int
    name: str
    final_error: float
    final_angle: float
    decay_rate: float
    fit_r2: float
    time_to_threshold: float
    steady_rms: float
    threshold: float
    runtime_s: float = math.nan
    steps: int = 0
    seed: int = 0

    def row(self) -> list:
        return [self.vehicle, self.name, fmt(self.final_error), fmt(self.final_angle),
                fmt(self.decay_rate), fmt(self.fit_r2), fmt(self.time_to_threshold),
                fmt(self.steady_rms), fmt(self.threshold), fmt(self.runtime_s), self.steps, self.seed]


def time_to_threshold(t: np.ndarray, err: np.ndarray, threshold: float) -> float:
    """First time the error drops below ``threshold`` (``inf`` if it never does)."""
    below = np.nonzero(err < threshold)[0]
    return float(t[below[0]]) if below.size else math.inf


def _amp(b, t, x):
    w = np.exp(-b * t)
    return float(x @ w) / float(w @ w), w


def _profile_grad(b, t, x):
    # d/db of the squared residual with a = a(b) held at its optimum
    a, w = _amp(b, t, x)
    return float(((x - a * w) * t * w).sum())


def decay_fit(t: np.ndarray, x_norm: np.ndarray, t_end: float, b_max: float = 1e3):
    """Least-squares fit of ``a exp(-b t)`` to ``x_norm`` over ``t <= t_end``.

    For fixed ``b`` the best ``a`` is linear, so ``b`` solves a 1-D stationarity
    condition; among the sign changes found on a log grid of ``b`` the root
    with the smallest residual wins. Returns ``(b, R^2)`` with ``R^2`` computed
    on ``x_norm`` itself. ``b`` is ``nan`` when no decaying fit exists.
    """
    m = t <= t_end
    t, x = t[m] - t[m][0], x_norm[m]
    if len(t) < 3 or not np.any(x > 0):
        return math.nan, math.nan
    grid = np.geomspace(1e-6, b_max, 400)
    g = np.array([_profile_grad(b, t, x) for b in grid])
    best = None
    for k in np.nonzero(np.sign(g[:-1]) * np.sign(g[1:]) < 0)[0]:
        b = optimize.brentq(_profile_grad, grid[k], grid[k + 1], args=(t, x), xtol=1e-14, rtol=1e-15)
        a, w = _amp(b, t, x)
        sse = float(((x - a * w) ** 2).sum())
        if best is None or sse < best[1]:
            best = (b, sse)
    if best is None:
        return math.nan, math.nan
    sst = float(((x - x.mean()) ** 2).sum())
    return float(best[0]), (1.0 - best[1] / sst) if sst > 0 else math.nan


def summarize_vehicle(vehicle: int, name: str, col: Dict[str, np.ndarray], threshold: float) -> RunSummary:
    t = col["t"]
    err = np.sqrt(col["err_x"] ** 2 + col["err_y"] ** 2 + col["err_z"] ** 2)
    x = np.sqrt(4.0 * (col["lam_x"] ** 2 + col["lam_y"] ** 2 + col["lam_z"] ** 2)
                + col["ptilde_x"] ** 2 + col["ptilde_y"] ** 2 + col["ptilde_z"] ** 2)
    ttt = time_to_threshold(t, err, threshold)
    b, r2 = decay_fit(t, x, ttt if math.isfinite(ttt) else float(t[-1]))
    tail = t >= t[0] + 0.8 * (t[-1] - t[0])
    rms = float(np.sqrt(np.mean(err[tail] ** 2)))
    return RunSummary(vehicle, name, float(err[-1]), float(col["angle"][-1]), b, r2, ttt, rms, threshold)


def summarize(states: Dict[int, Dict[str, np.ndarray]], threshold: float, runtime: float = math.nan,
              steps: int = 0, seed: int = 0) -> List[RunSummary]:
    out = []
    for i in sorted(states):
        s = summarize_vehicle(i, states[i]["name"], states[i], threshold)
        s.runtime_s, s.steps, s.seed = runtime, steps, seed
        out.append(s)
    return out


def print_summary(rows: Sequence[RunSummary], stream=None) -> None:
    stream = stream or sys.stdout
    print(f"{'vehicle':<8}{'final |p|':>12}{'final ang':>12}{'b [1/s]':>10}{'R^2':>8}"
          f"{'t_thr [s]':>11}{'rms tail':>11}", file=stream)
    for s in rows:
        print(f"{s.name:<8}{s.final_error:>12.4g}{s.final_angle:>12.4g}{s.decay_rate:>10.3g}"
              f"{s.fit_r2:>8.3f}{s.time_to_threshold:>11.3f}{s.steady_rms:>11.4g}", file=stream)
    if rows:
        print(f"steps {rows[0].steps}, seed {rows[0].seed}, runtime {rows[0].runtime_s:.2f} s", file=stream)


# ------------------------------------------------------------ commands

def apply_overrides(cfg: ScenarioConfig, args: argparse.Namespace) -> ScenarioConfig:
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.dt is not None:
        changes["dt"] = args.dt
    if args.duration is not None:
        changes["duration"] = args.duration
    if args.no_noise:
        changes["noise_enabled"] = False
    if args.no_visibility:
        changes["visibility"] = False
    if args.comm is not None:
        changes["communication"] = args.comm
    if args.threshold is not None:
        changes["error_threshold"] = args.threshold
    return cfg.replace(**changes) if changes else cfg


def output_dir(args: argparse.Namespace, cfg: ScenarioConfig) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT) / cfg.name


def write_run(out: Path, cfg: ScenarioConfig, records: Sequence[StepRecord], runtime: float) -> List[RunSummary]:
    out.mkdir(parents=True, exist_ok=True)
    names = cfg.names
    _write_csv(out / "states.csv", STATES_SCHEMA, STATES_COLUMNS, state_rows(records, names))
    _write_csv(out / "landmarks.csv", LANDMARKS_SCHEMA, LANDMARK_COLUMNS, landmark_rows(records, names))
    rows = summarize(read_states(out / "states.csv"), cfg.error_threshold, runtime, cfg.n_steps, cfg.seed)
    _write_csv(out / "summary.csv", SUMMARY_SCHEMA, SUMMARY_COLUMNS, [s.row() for s in rows])
    with open(out / "config.json", "w") as fh:
        json.dump(to_dict(cfg), fh, indent=2)
        fh.write("\n")
    return rows


def run_command(args: argparse.Namespace) -> int:
    if args.list_scenarios:
        for name in list_scenarios():
            print(name)
        return EXIT_OK
    if not args.scenario:
        print("error: --scenario is required (or use --list-scenarios)", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = apply_overrides(load_scenario(args.scenario), args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        records, runtime = timed_run(cfg)
    except SimulationError as exc:
        print(f"error: numerical failure at {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    out = output_dir(args, cfg)
    rows = write_run(out, cfg, records, runtime)
    print_summary(rows)
    print(f"wrote {out}")
    return EXIT_OK


def export_plotdata(states_csv, out_dir) -> List[Path]:
    """Per-vehicle error and trajectory series plus one landmark file.

    ``landmarks.csv`` is read from the directory holding ``states_csv``.
    """
    states_csv = Path(states_csv)
    states = read_states(states_csv)
    lms = read_landmarks(states_csv.with_name("landmarks.csv"))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i in sorted(states):
        c = states[i]
        err = np.sqrt(c["err_x"] ** 2 + c["err_y"] ** 2 + c["err_z"] ** 2)
        p = out / f"error_{c['name']}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "position_error", "angle", "err_x", "err_y", "err_z"])
            for row in zip(c["t"], err, c["angle"], c["err_x"], c["err_y"], c["err_z"]):
                w.writerow([fmt(x) for x in row])
        written.append(p)
        p = out / f"trajectory_{c['name']}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "truth_x", "truth_y", "truth_z", "est_x", "est_y", "est_z"])
            for row in zip(c["t"], c["truth_x"], c["truth_y"], c["truth_z"], c["est_x"], c["est_y"], c["est_z"]):
                w.writerow([fmt(x) for x in row])
        written.append(p)
    p = out / "landmarks.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["landmark", "name", "t", "x", "y", "z"])
        for j in sorted(lms):
            c = lms[j]
            P = np.column_stack([c["x"], c["y"], c["z"]])
            # a static landmark is a single row
            keep = range(1) if np.all(P == P[0]) else range(len(P))
            for k in keep:
                w.writerow([j, c["name"], fmt(c["t"][k])] + [fmt(x) for x in P[k]])
    written.append(p)
    return written


def export_command(args: argparse.Namespace) -> int:
    try:
        files = export_plotdata(args.states_csv, args.out_dir)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"wrote {len(files)} files to {args.out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cooploc", description="Decentralized bearing-based cooperative localization.")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a scenario and write CSV output")
    r.add_argument("--scenario", help="shipped scenario name or path to a JSON file")
    r.add_argument("--list-scenarios", action="store_true", help="list shipped scenarios and exit")
    r.add_argument("--seed", type=int)
    r.add_argument("--dt", type=float, help="step size in seconds")
    r.add_argument("--duration", type=float, help="run length in seconds")
    r.add_argument("--no-noise", action="store_true", help="disable velocity and bearing noise")
    r.add_argument("--no-visibility", action="store_true", help="disable field-of-view and occlusion gating")
    r.add_argument("--comm", choices=("topological", "delayed"), help="estimate exchange mode")
    r.add_argument("--threshold", type=float, help="position error threshold for time-to-threshold [m]")
    r.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT}, plus scenario name)")
    r.add_argument("-v", "--verbose", action="store_true")
    r.set_defaults(func=run_command)
    e = sub.add_parser("export-plotdata", help="write columnar plot files from a states.csv")
    e.add_argument("states_csv")
    e.add_argument("out_dir")
    e.set_defaults(func=export_command)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
