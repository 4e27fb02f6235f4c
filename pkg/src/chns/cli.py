"""Scenario configuration, run orchestration, reproducible outputs.

Config files are flat ``key = value`` text ('#' starts a comment).  Every run
writes into its output directory: diagnostics.csv (the ledger contract),
newton.csv, adaptation.csv, periodic legacy-VTK snapshots named
``fields_<stepindex>.vtk``, and manifest.txt echoing the resolved
configuration, package version and seed.
"""

import argparse
import os
import sys
import time

import numpy as np

from . import __version__
from .diagnostics import (
    DiagnosticsWriter,
    LedgerRow,
    center_of_mass,
    circularity,
    energy_step_report,
    rising_velocity,
    state_energies,
)
from .estimator import AdaptConfig, adapt_cycle
from .fem import BoundarySpec, l2_project_p1
from .mesh import rect_mesh, refine, write_vtk
from .physics import PhysParams
from .stepper import (
    DiscreteState,
    SolverOptions,
    StepContext,
    StepFailure,
    initialization_step,
    leray_project,
    two_step,
)

__all__ = ["ScenarioConfig", "load_config", "run", "main", "PRESETS", "ConfigError"]


class ConfigError(ValueError):
    pass


_KEY_TYPES = {
    "scenario": str,
    "domain": "vec4",
    "nx": int, "ny": int,
    "rho1": float, "rho2": float, "eta1": float, "eta2": float,
    "mobility": float, "sigma": float, "epsilon": float, "s": float,
    "gravity": "vec2",
    "tau": float, "nsteps": int, "end_time": float,
    "output_cadence": float,
    "seed": int,
    "postprocessing_enabled": bool,
    "linear_backend": str,
    "adapt": bool,
    "theta_r": float, "theta_c": float, "a_min": float, "a_max": float,
    "bc_left": str, "bc_right": str, "bc_bottom": str, "bc_top": str,
    "transport_form": str,
    "initial_refine": str,
    "initial_amplitude": float,
    "bubble_center": "vec2", "bubble_radius": float,
}

_REQUIRED_CUSTOM = ["domain", "nx", "ny", "rho1", "rho2", "eta1", "eta2",
                    "mobility", "sigma", "epsilon", "tau", "nsteps"]


def _base(scenario):
    return {
        "scenario": scenario,
        "s": 10000.0,
        "seed": 7,
        "postprocessing_enabled": True,
        "linear_backend": "block_lu",
        "adapt": True,
        "theta_r": 0.5,
        "theta_c": 0.1,
        "transport_form": "ibp",
        "output_cadence": 0.0,
        "initial_refine": "none",
        "bc_left": "noslip", "bc_right": "noslip",
        "bc_bottom": "noslip", "bc_top": "noslip",
    }


def _spinodal(desk):
    cfg = _base("spinodal_desk" if desk else "spinodal")
    cfg.update({
        "domain": (0.0, 1.0, 0.0, 1.0),
        "rho1": 1.0, "rho2": 1.0, "eta1": 1.0, "eta2": 1.0,
        "gravity": (0.0, 0.0),
        "sigma": 0.01,
        "initial_amplitude": 0.1,
    })
    if desk:
        # desk scaling: coarser mesh/steps, a mobility large enough for the
        # coarsening regime to show up within the short horizon, and an
        # initial amplitude that forms interfaces right away
        cfg.update({"nx": 32, "ny": 32, "epsilon": 0.02, "tau": 1e-4,
                    "nsteps": 300, "mobility": 1.0, "initial_amplitude": 0.75,
                    "a_max": 2.5e-4, "a_min": 1.2e-4})
    else:
        cfg.update({"nx": 64, "ny": 64, "epsilon": 0.01, "tau": 1e-5,
                    "nsteps": 60000, "mobility": 1e-5,
                    "a_max": 6.2e-5, "a_min": 1.5e-6})
    return cfg


def _bubble(desk):
    cfg = _base("rising_bubble_desk" if desk else "rising_bubble")
    cfg.update({
        "domain": (0.0, 1.0, 0.0, 2.0),
        # rho/eta at phi=-1 (inside the bubble) and phi=+1 (ambient fluid)
        "rho1": 100.0, "rho2": 1000.0, "eta1": 1.0, "eta2": 10.0,
        "gravity": (0.0, -0.98),
        "sigma": 15.5972,
        "bc_left": "slip", "bc_right": "slip",
        "bc_bottom": "noslip", "bc_top": "noslip",
        "initial_refine": "interface",
        "bubble_center": (0.5, 0.5), "bubble_radius": 0.25,
    })
    if desk:
        cfg.update({"nx": 8, "ny": 16, "epsilon": 0.04, "tau": 1e-3,
                    "nsteps": 3000, "mobility": 4e-5,
                    "a_max": 4.0e-3, "a_min": 3.0e-5})
    else:
        cfg.update({"nx": 32, "ny": 64, "epsilon": 0.02, "tau": 2.5e-5,
                    "nsteps": 120000, "mobility": 2e-5,
                    "a_max": 2.5e-4, "a_min": 7.0e-6})
    return cfg


PRESETS = {
    "spinodal": lambda: _spinodal(False),
    "spinodal_desk": lambda: _spinodal(True),
    "rising_bubble": lambda: _bubble(False),
    "rising_bubble_desk": lambda: _bubble(True),
    "custom": lambda: _base("custom"),
}


def _parse_value(key, raw):
    kind = _KEY_TYPES[key]
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "vec2" or kind == "vec4":
            parts = [float(p) for p in raw.replace(",", " ").split()]
            n = 2 if kind == "vec2" else 4
            if len(parts) != n:
                raise ValueError(f"expected {n} numbers")
            return tuple(parts)
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"config key '{key}': cannot parse {raw!r} ({exc})")


class ScenarioConfig:
    """Resolved run configuration (preset merged with file overrides)."""

    def __init__(self, values):
        self.values = values
        scenario = values.get("scenario", "custom")
        missing = [k for k in _REQUIRED_CUSTOM if k not in values]
        if missing:
            raise ConfigError("missing required config keys: " + ", ".join(missing))
        if "nsteps" not in values and "end_time" in values:
            values["nsteps"] = int(round(values["end_time"] / values["tau"]))
        if values["nsteps"] <= 0:
            raise ConfigError("nsteps must be positive (end_time > 0)")
        if values.get("output_cadence", 0.0) and \
                values["output_cadence"] < values["tau"]:
            raise ConfigError("output_cadence must be at least tau")
        if values.get("linear_backend", "block_lu") not in \
                ("direct", "gmres_block", "block_lu"):
            raise ConfigError("linear_backend must be direct, gmres_block or block_lu")
        if values.get("transport_form", "ibp") not in ("ibp", "advective"):
            raise ConfigError("transport_form must be ibp or advective")
        if values.get("initial_refine", "none") not in ("none", "interface"):
            raise ConfigError("initial_refine must be none or interface")
        self.scenario = scenario
        self.params = PhysParams(
            rho1=values["rho1"], rho2=values["rho2"],
            eta1=values["eta1"], eta2=values["eta2"],
            mobility_scale=values["mobility"], sigma=values["sigma"],
            epsilon=values["epsilon"], s=values.get("s", 10000.0),
            gravity=values.get("gravity", (0.0, 0.0)), tau=values["tau"])
        if values.get("adapt", True):
            self.adapt_cfg = AdaptConfig(
                theta_r=values.get("theta_r", 0.5),
                theta_c=values.get("theta_c", 0.1),
                a_min=values.get("a_min", 1e-12),
                a_max=values.get("a_max", 1e12))
        else:
            self.adapt_cfg = None
        self.bc = BoundarySpec(values.get("bc_left", "noslip"),
                               values.get("bc_right", "noslip"),
                               values.get("bc_bottom", "noslip"),
                               values.get("bc_top", "noslip"))
        self.solver = SolverOptions(backend=values.get("linear_backend", "block_lu"),
                                    transport_form=values.get("transport_form", "ibp"))

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key)


def load_config(path, overrides=None):
    """Parse a flat key=value config file into a ScenarioConfig."""
    raw = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in _KEY_TYPES:
                raise ConfigError(f"{path}:{ln}: unknown config key '{key}'")
            raw[key] = val
    scenario = raw.get("scenario", "custom")
    if scenario not in PRESETS:
        raise ConfigError(f"unknown scenario '{scenario}' "
                          f"(choose from {sorted(PRESETS)})")
    values = PRESETS[scenario]()
    if "end_time" in raw and "nsteps" not in raw:
        values.pop("nsteps", None)  # an explicit horizon overrides the preset
    for key, val in raw.items():
        values[key] = _parse_value(key, val) if isinstance(val, str) else val
    for key, val in (overrides or {}).items():
        values[key] = val
    return ScenarioConfig(values)


# ---------------------------------------------------------------------------
# initial conditions

def _initial_phi_fn(cfg, rng):
    if cfg.scenario.startswith("spinodal") or "bubble_center" not in cfg.values:
        amp = cfg.values.get("initial_amplitude", 0.1)

        def nodal(mesh):
            return rng.uniform(-amp, amp, mesh.num_vertices)
        return None, nodal
    cx, cy = cfg.values["bubble_center"]
    r = cfg.values["bubble_radius"]
    eps = cfg.params.epsilon

    def fn(x, y):
        d = np.sqrt((x - cx) ** 2 + (y - cy) ** 2) - r
        return np.tanh(d / (np.sqrt(2.0) * eps))
    return fn, None


def _initial_interface_refine(mesh, fn, a_min):
    """Refine until interface triangles reach the area floor."""
    while True:
        phi_v = fn(mesh.vertices[:, 0], mesh.vertices[:, 1])
        band = np.abs(phi_v[mesh.triangles]).min(axis=1) < 0.9
        big = mesh.areas() > 2.0 * a_min
        marked = np.nonzero(band & big)[0]
        if marked.size == 0:
            return mesh
        mesh, _ = refine(mesh, marked)


def run(cfg, out_dir, progress=None):
    """Execute a configured run; returns the output directory path."""
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(cfg.values["seed"])
    x0, x1, y0, y1 = cfg.values["domain"]
    mesh = rect_mesh(cfg.values["nx"], cfg.values["ny"],
                     domain=(x0, x1, y0, y1), pattern="crossed")
    phi_fn, nodal_fn = _initial_phi_fn(cfg, rng)
    if cfg.values.get("initial_refine") == "interface" and phi_fn is not None \
            and cfg.adapt_cfg is not None:
        mesh = _initial_interface_refine(mesh, phi_fn, cfg.adapt_cfg.a_min)

    ctx = StepContext(mesh, cfg.params, cfg.bc)
    if phi_fn is not None:
        phi0 = l2_project_p1(ctx.p1, phi_fn)
    else:
        phi0 = nodal_fn(mesh)
    v0 = leray_project(ctx, np.zeros(ctx.vspace.ndof))
    state0 = DiscreteState(mesh, v0, np.zeros(ctx.np1), phi0, np.zeros(ctx.np1), 0)

    writer = DiagnosticsWriter(os.path.join(out_dir, "diagnostics.csv"),
                               os.path.join(out_dir, "newton.csv"),
                               os.path.join(out_dir, "adaptation.csv"))
    _write_manifest(cfg, out_dir)
    is_bubble = "bubble_center" in cfg.values
    cadence = cfg.values.get("output_cadence", 0.0)
    next_output = 0.0
    par = cfg.params
    status = 0
    try:
        kin0, gl0 = state_energies(ctx, state0)
        mass0 = float(ctx.pressure_one @ state0.phi)
        row0 = LedgerRow(t=0.0, kinetic=kin0, gl_energy=gl0, mass=mass0,
                         NT=mesh.num_triangles, NP=mesh.num_vertices)
        _add_bubble(row0, ctx, state0, is_bubble)
        writer.write_row(row0)
        next_output = _maybe_vtk(cfg, out_dir, ctx, state0, 0, cadence, next_output)

        state1 = initialization_step(state0, ctx, cfg.solver)
        kin1, gl1 = state_energies(ctx, state1, rho_phi=state0.phi)
        row1 = LedgerRow(t=par.tau, kinetic=kin1, gl_energy=gl1,
                         mass=float(ctx.pressure_one @ state1.phi),
                         NT=mesh.num_triangles, NP=mesh.num_vertices)
        row1.mass_dev = abs(row1.mass - mass0)
        _add_bubble(row1, ctx, state1, is_bubble)
        writer.write_row(row1)
        next_output = _maybe_vtk(cfg, out_dir, ctx, state1, 1, cadence, next_output)

        prev, curr = state0, state1
        carried = 0.0
        for k in range(1, cfg.values["nsteps"]):
            if cfg.adapt_cfg is not None:
                res = adapt_cycle(prev, curr, ctx, cfg.adapt_cfg, cfg.solver,
                                  postprocess_enabled=cfg.values["postprocessing_enabled"])
                nxt = res.solution
                row = energy_step_report(prev, curr, nxt, ctx, carried)
                writer.write_newton(k + 1, res.report)
                writer.write_adapt(k + 1, ctx.mesh.num_triangles, res.n_refined,
                                   res.n_coarsened_stars, res.n_rejected_stars,
                                   res.energy_production)
                carried = res.energy_production
                changed = res.n_refined > 0 or res.n_coarsened_stars > 0
                row.mass_dev = abs(row.mass - mass0)
                _add_bubble(row, ctx, nxt, is_bubble)
                writer.write_row(row)
                next_output = _maybe_vtk(cfg, out_dir, ctx, nxt, k + 1,
                                         cadence, next_output)
                if changed:
                    ctx = StepContext(res.mesh, cfg.params, cfg.bc)
                    prev, curr = res.prev_state, res.curr_state
                else:
                    # mesh untouched: keep the context and the exact dof arrays
                    prev, curr = curr, nxt
            else:
                nxt, report = two_step(prev, curr, ctx, cfg.solver)
                row = energy_step_report(prev, curr, nxt, ctx, 0.0)
                writer.write_newton(k + 1, report)
                row.mass_dev = abs(row.mass - mass0)
                _add_bubble(row, ctx, nxt, is_bubble)
                writer.write_row(row)
                next_output = _maybe_vtk(cfg, out_dir, ctx, nxt, k + 1,
                                         cadence, next_output)
                prev, curr = curr, nxt
            if progress and (k + 1) % progress == 0:
                print(f"step {k + 1}/{cfg.values['nsteps']}  NT={ctx.mesh.num_triangles}",
                      flush=True)
    except StepFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        status = 1
    finally:
        writer.close()
    return status


def _add_bubble(row, ctx, state, is_bubble):
    if not is_bubble:
        return
    try:
        row.circularity = circularity(ctx.mesh, state.phi)
        row.V = rising_velocity(ctx, state.phi, state.v)
        row.M = center_of_mass(ctx.mesh, state.phi)
    except ValueError:
        pass


def _maybe_vtk(cfg, out_dir, ctx, state, step, cadence, next_output):
    if cadence <= 0.0:
        return next_output
    t = cfg.params.tau * state.time_index
    if t + 1e-12 >= next_output:
        path = os.path.join(out_dir, f"fields_{step}.vtk")
        v_at_verts = np.column_stack([state.v[:ctx.mesh.num_vertices],
                                      state.v[ctx.vspace.nsc:
                                              ctx.vspace.nsc + ctx.mesh.num_vertices]])
        write_vtk(ctx.mesh, path,
                  point_data={"phi": state.phi, "mu": state.mu, "p": state.p,
                              "v": v_at_verts})
        return next_output + cadence
    return next_output


def _write_manifest(cfg, out_dir):
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write(f"chns version = {__version__}\n")
        for key in sorted(cfg.values):
            val = cfg.values[key]
            if isinstance(val, tuple):
                val = ",".join(repr(v) for v in val)
            fh.write(f"{key} = {val}\n")


# ---------------------------------------------------------------------------

def main(argv=None):
    parser = argparse.ArgumentParser(prog="chns",
                                     description="Two-phase Cahn-Hilliard/"
                                                 "Navier-Stokes simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a scenario")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--threads", type=int, default=1,
                       help="BLAS thread hint; assembly is single-threaded")
    p_run.add_argument("--no-postprocess", action="store_true")
    p_run.add_argument("--backend", choices=["direct", "gmres"], default=None)
    p_run.add_argument("--progress", type=int, default=0,
                       help="print a status line every N steps")

    p_val = sub.add_parser("validate", help="check a config file")
    p_val.add_argument("config")

    p_seed = sub.add_parser("perturb-seed", help="run with a different RNG seed")
    p_seed.add_argument("config")
    p_seed.add_argument("seed", type=int)
    p_seed.add_argument("--out", default=None)

    args = parser.parse_args(argv)
    if args.command == "validate":
        try:
            load_config(args.config)
        except ConfigError as exc:
            print(f"invalid config: {exc}", file=sys.stderr)
            return 2
        print("config ok")
        return 0

    overrides = {}
    if args.command == "perturb-seed":
        overrides["seed"] = args.seed
    else:
        if args.no_postprocess:
            overrides["postprocessing_enabled"] = False
        if args.backend:
            overrides["linear_backend"] = ("gmres_block" if args.backend == "gmres"
                                           else args.backend)
        if args.threads and args.threads > 1:
            os.environ.setdefault("OMP_NUM_THREADS", str(args.threads))
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    out = args.out or time.strftime(f"chns_{cfg.scenario}_%Y%m%d_%H%M%S")
    progress = getattr(args, "progress", 0)
    status = run(cfg, out, progress=progress)
    print(f"outputs in {out}" + (" (incomplete)" if status else ""))
    return status


if __name__ == "__main__":
    sys.exit(main())
