"""Batch scenarios, run configuration, exporters and the CLI entry point.

Three experiments are built in:

* ``point`` -- the uniform-field constitutive driver cycling a single
  material point; writes the dielectric (D-E) and butterfly (S-E) curves.
* ``repoling_cube`` -- a pre-poled cube, poling direction at angle theta to
  the z axis, re-poled by an electrode field ramped to a multiple of the
  coercive field.  The initial polarization magnitude is the remanent value
  computed with the point driver; the mismatch charges on the non-electroded
  faces are fixed surface charges.  Writes the electrode-charge curve, a
  Newton log and one VTK file per load step.
* ``hole_plate`` -- one eighth of a 20 x 20 x 6 mm block with a 4 mm
  cylindrical hole under electrode voltage applied in five steps; writes the
  final fields and the Newton log.

Runs are configured by a JSON document (see ``config_schema`` in the README)
and are fully deterministic: identical configurations produce bit-identical
output files in serial mode.

Command line::

    ferro-mixed run config.json [--out DIR] [--threads N] [--log-level L]

Exit codes: 0 success, 1 configuration/mesh errors, 2 solver non-convergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import material as mt
from .assembly import Assembler, FieldSpaces, LoadData, SystemState
from .mesh import Mesh, MeshError, box_mesh, load_mesh, structured_tets
from .solver import (LoadProgram, NewtonError, NewtonSettings,
                     StepLog, newton_step_solve, run_load_program)
from .spaces import (build_h1_vector_space, build_hdiv_space, build_l2_space,
                     l2_project)

__all__ = [
    "ConfigError",
    "export_csv",
    "export_vtk",
    "main",
    "quarter_hole_plate_mesh",
    "run_scenario",
    "scenario_hole_plate",
    "scenario_point",
    "scenario_repoling_cube",
]

log = logging.getLogger("ferromixed.scenarios")


class ConfigError(ValueError):
    """Invalid run configuration."""


# ---------------------------------------------------------------------------
# Configuration handling
# ---------------------------------------------------------------------------

_MATERIAL_KEYS = {
    "youngs_modulus", "poisson_ratio", "permittivity", "permittivity_flavor",
    "d31", "d33", "d15", "coercive_field", "saturation_polarization",
    "saturation_strain", "hardening_h0", "shape_m", "hardening_law",
    "eps_dissipation", "eps_hardening", "poling_axis", "coupling_smoothing",
}

_NEWTON_KEYS = {"max_iterations", "rtol", "atol", "ls_backtrack",
                "ls_max_backtracks", "ls_sufficient_decrease"}


def material_from_config(cfg: dict) -> mt.MaterialParams:
    unknown = set(cfg) - _MATERIAL_KEYS
    if unknown:
        raise ConfigError(f"unknown material keys: {sorted(unknown)}")
    try:
        params = mt.MaterialParams(**cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid material parameters: {exc}") from exc
    return params


def newton_from_config(cfg: dict | None) -> NewtonSettings:
    cfg = cfg or {}
    unknown = set(cfg) - _NEWTON_KEYS
    if unknown:
        raise ConfigError(f"unknown newton keys: {sorted(unknown)}")
    try:
        return NewtonSettings(**cfg)
    except ValueError as exc:
        raise ConfigError(f"invalid newton settings: {exc}") from exc


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg


def _mesh_from_config(cfg: dict, default_size: float) -> Mesh:
    spec = cfg.get("mesh", {"box": {"n": 4}})
    if "file" in spec:
        return load_mesh(spec["file"])
    if "box" in spec:
        box = spec["box"]
        return box_mesh(int(box.get("n", 4)),
                        float(box.get("size", default_size)))
    raise ConfigError("mesh config needs either 'file' or 'box'")


def _order_from_config(cfg: dict) -> int:
    k = int(cfg.get("order", 1))
    if k not in (1, 2):
        raise ConfigError(f"order k={k} unsupported (use 1 or 2)")
    return k


# ---------------------------------------------------------------------------
# Exporters
# ---------------------------------------------------------------------------

def export_csv(path, header: str, rows) -> None:
    """Write rows of floats as CSV with a units-carrying header line."""
    lines = [header]
    for row in rows:
        lines.append(",".join(f"{float(v):.12g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def export_vtk(state: SystemState, assembler: Assembler, path,
               title: str = "ferromixed fields") -> None:
    """Legacy ASCII VTK unstructured grid with the standard field set.

    Point data: displacement (vertex values).  Cell data (centroid samples):
    dielectric displacement, remanent polarization and its magnitude, the
    remanent strain tensor, total strain S_zz, and div D.
    """
    mesh = assembler.mesh
    spaces = assembler.spaces
    mat = assembler.material
    nv = mesh.num_vertices
    nt = mesh.num_tets

    centroid = np.array([[0.25, 0.25, 0.25]])
    from .spaces import evaluate_basis, evaluate_field

    u_pts = state.u.reshape(-1, 3)[:nv]
    D_c = np.empty((nt, 3))
    Pi_c = np.empty((nt, 3))
    Szz_c = np.empty(nt)
    for e in range(nt):
        D_c[e] = evaluate_field(spaces.dielectric, state.D, e, centroid)[0]
        Pi_c[e] = evaluate_field(spaces.polarization, state.Pi, e,
                                 centroid)[0]
        tab = evaluate_basis(spaces.displacement, e, centroid)
        loc = state.u[spaces.displacement.elem_dofs[e]]
        grad = np.einsum("n,nqcd->cd", loc, tab["gradients"])
        Szz_c[e] = 0.5 * (grad[2, 2] + grad[2, 2])
    Sr_c = mt.remanent_strain(Pi_c, mat.params)
    div_c = assembler.element_divergence(state)

    def fmt(v):
        return f"{float(v):.12g}"

    out = ["# vtk DataFile Version 2.0", title, "ASCII",
           "DATASET UNSTRUCTURED_GRID", f"POINTS {nv} double"]
    for p in mesh.vertices:
        out.append(" ".join(fmt(c) for c in p))
    out.append(f"CELLS {nt} {5 * nt}")
    for t in mesh.tets:
        out.append("4 " + " ".join(str(int(v)) for v in t))
    out.append(f"CELL_TYPES {nt}")
    out.extend(["10"] * nt)

    out.append(f"POINT_DATA {nv}")
    out.append("VECTORS displacement double")
    for v in u_pts:
        out.append(" ".join(fmt(c) for c in v))

    out.append(f"CELL_DATA {nt}")
    out.append("VECTORS dielectric_displacement double")
    for v in D_c:
        out.append(" ".join(fmt(c) for c in v))
    out.append("VECTORS remanent_polarization double")
    for v in Pi_c:
        out.append(" ".join(fmt(c) for c in v))
    out.append("SCALARS remanent_polarization_magnitude double")
    out.append("LOOKUP_TABLE default")
    for v in np.linalg.norm(Pi_c, axis=1):
        out.append(fmt(v))
    out.append("TENSORS remanent_strain double")
    for T in Sr_c:
        for row in T:
            out.append(" ".join(fmt(c) for c in row))
        out.append("")
    out.append("SCALARS strain_zz double")
    out.append("LOOKUP_TABLE default")
    for v in Szz_c:
        out.append(fmt(v))
    out.append("SCALARS div_dielectric_displacement double")
    out.append("LOOKUP_TABLE default")
    for v in div_c:
        out.append(fmt(v))
    Path(path).write_text("\n".join(out) + "\n")


def write_newton_log(path, logs) -> None:
    lines = [StepLog.CSV_HEADER] + [entry.csv_row() for entry in logs]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Scenario: material point
# ---------------------------------------------------------------------------

def scenario_point(config: dict, outdir) -> dict:
    """Cycle a single material point and write the hysteresis curves."""
    params = material_from_config(config.get("material", {}))
    pc = config.get("point", {})
    e0 = params.coercive_field
    emax = float(pc.get("e_max_over_e0", 2.0)) * e0
    steps = int(pc.get("steps_per_leg", 50))
    axis = np.asarray(pc.get("axis", (0.0, 0.0, 1.0)), dtype=float)
    axis = axis / np.linalg.norm(axis)
    stress_free = bool(pc.get("stress_free", True))

    if "e_history" in pc:
        history = [np.asarray(E, dtype=float) for E in pc["e_history"]]
    else:
        legs = np.concatenate([
            np.linspace(0.0, emax, steps + 1)[1:],
            np.linspace(emax, -emax, 2 * steps + 1)[1:],
            np.linspace(-emax, emax, 2 * steps + 1)[1:],
        ])
        history = [v * axis for v in legs]

    records = mt.run_pointwise_driver(params, history,
                                      stress_free=stress_free)

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    de_rows = [np.concatenate([r["E"], r["D"], r["Pi"]]) for r in records]
    export_csv(outdir / "de_curve.csv",
               "E_x[V/m],E_y[V/m],E_z[V/m],D_x[C/m^2],D_y[C/m^2],D_z[C/m^2],"
               "Pi_x[C/m^2],Pi_y[C/m^2],Pi_z[C/m^2]", de_rows)
    se_rows = [[r["E"][2], r["S"][0, 0], r["S"][1, 1], r["S"][2, 2],
                r["S"][1, 2], r["S"][0, 2], r["S"][0, 1]] for r in records]
    export_csv(outdir / "se_curve.csv",
               "E_z[V/m],S_xx[-],S_yy[-],S_zz[-],S_yz[-],S_xz[-],S_xy[-]",
               se_rows)
    return {"records": records, "params": params}


# ---------------------------------------------------------------------------
# Scenario: repoling cube
# ---------------------------------------------------------------------------

def _find_vertex(mesh: Mesh, target) -> int:
    d = np.linalg.norm(mesh.vertices - np.asarray(target), axis=1)
    idx = int(np.argmin(d))
    if d[idx] > 1e-9 * max(1.0, np.abs(mesh.vertices).max()):
        raise ConfigError(f"mesh has no vertex at {target}")
    return idx


def build_repoling_setup(mesh: Mesh, k: int, params: mt.MaterialParams,
                         theta_deg: float, e_max_over_e0: float,
                         threads: int = 1,
                         settings: NewtonSettings | None = None,
                         remanent_magnitude: float | None = None):
    """Assemble the pre-poled cube problem; returns (assembler, state0, info).

    The cube occupies [0, L]^3 with electrodes on the z faces.  The initial
    polarization is uniform with the driver's remanent magnitude, tilted by
    theta against the z axis in the x-z plane; its normal traces on the
    side faces are imposed as fixed surface charges.  The returned state is
    the consistent equilibrium at zero applied voltage (one frozen
    polarization solve for the displacement).
    """
    L = float(mesh.vertices[:, 0].max())
    theta = np.deg2rad(theta_deg)
    if remanent_magnitude is None:
        remanent_magnitude = mt.remanent_magnitude_after_poling(params)
    Pi0 = remanent_magnitude * np.array([np.sin(theta), 0.0, np.cos(theta)])

    sides = ("xmin", "xmax", "ymin", "ymax")
    V = build_h1_vector_space(mesh, k)
    D = build_hdiv_space(mesh, k, insulated_regions=sides)
    P = build_l2_space(mesh, k, 3)
    Q = build_l2_space(mesh, 0, 1)
    spaces = FieldSpaces(V, D, P, Q)

    normals = {"xmin": np.array([-1.0, 0.0, 0.0]),
               "xmax": np.array([1.0, 0.0, 0.0]),
               "ymin": np.array([0.0, -1.0, 0.0]),
               "ymax": np.array([0.0, 1.0, 0.0])}
    charges = {tag: float(Pi0 @ n) for tag, n in normals.items()}

    # 3-2-1 rigid-body fixing; compatible with arbitrary uniform strain.
    vA = _find_vertex(mesh, (0.0, 0.0, 0.0))
    vB = _find_vertex(mesh, (L, 0.0, 0.0))
    vC = _find_vertex(mesh, (0.0, L, 0.0))
    constraints = ((vA, 0, 0.0), (vA, 1, 0.0), (vA, 2, 0.0),
                   (vB, 1, 0.0), (vB, 2, 0.0), (vC, 2, 0.0))

    delta_v = e_max_over_e0 * params.coercive_field * L
    loads = LoadData(electrode_potentials={"zmin": delta_v, "zmax": 0.0},
                     insulated_charges=charges,
                     point_constraints=constraints)
    assembler = Assembler(mesh, spaces, mt.Material(params), loads,
                          threads=threads)

    state = SystemState.zero(spaces)
    state.Pi = l2_project(P, lambda x: np.tile(Pi0, (len(x), 1)))
    state.D = l2_project(D, lambda x: np.tile(Pi0, (len(x), 1)))
    state.Pi0 = state.Pi.copy()
    state.D0 = state.D.copy()
    state0, _ = newton_step_solve(assembler, state, 0.0, settings,
                                  frozen_polarization=True)
    info = {"edge": L, "Pi0": Pi0, "remanent_magnitude": remanent_magnitude,
            "electrode_area": L * L, "delta_v": delta_v}
    return assembler, state0, info


def scenario_repoling_cube(config: dict, outdir,
                           threads: int = 1) -> dict:
    """Re-pole the cube and record the electrode-charge change per step."""
    params = material_from_config(config.get("material", {}))
    rc = config.get("repoling_cube", {})
    theta = float(rc.get("theta_deg", 90.0))
    if not 0.0 <= theta <= 180.0:
        raise ConfigError("theta_deg must lie in [0, 180]")
    emax = float(rc.get("e_max_over_e0", 2.0))
    steps = int(rc.get("steps", 20))
    edge = float(rc.get("edge", 0.005))
    k = _order_from_config(config)
    mesh = _mesh_from_config(config, default_size=edge)
    settings = newton_from_config(config.get("newton"))
    write_vtk = bool(rc.get("write_vtk", True))

    assembler, state0, info = build_repoling_setup(
        mesh, k, params, theta, emax, threads=threads, settings=settings,
        remanent_magnitude=rc.get("remanent_magnitude"))
    area = info["electrode_area"]
    flux0 = assembler.boundary_flux(state0, "zmax")

    program = LoadProgram(tuple(np.linspace(0.0, 1.0, steps + 1)[1:]),
                          max_substep_depth=int(
                              rc.get("max_substep_depth", 4)))
    history, logs = run_load_program(assembler, state0, program, settings)

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = [(0.0, 0.0, 0.0)]
    for state in history:
        dq = (assembler.boundary_flux(state, "zmax") - flux0) / area
        rows.append((state.lam, state.lam * emax, dq))
    export_csv(outdir / "curve.csv",
               "lambda[-],E_over_E0[-],dD_z[C/m^2]", rows)
    write_newton_log(outdir / "newton_log.csv", logs)
    if write_vtk:
        export_vtk(state0, assembler, outdir / "step_0000.vtk",
                   "repoling cube initial state")
        for i, state in enumerate(history, start=1):
            export_vtk(state, assembler, outdir / f"step_{i:04d}.vtk",
                       f"repoling cube lam={state.lam:.6g}")
    return {"assembler": assembler, "initial": state0, "history": history,
            "logs": logs, "curve": np.array(rows), "info": info}


# ---------------------------------------------------------------------------
# Scenario: hexahedron with cylindrical hole (one eighth)
# ---------------------------------------------------------------------------

def quarter_hole_plate_mesh(nr: int = 3, ntheta: int = 6, nz: int = 2,
                            half_width: float = 0.010,
                            half_height: float = 0.003,
                            hole_radius: float = 0.002) -> Mesh:
    """Structured tet mesh of the symmetric eighth of the holed block.

    The in-plane region between the quarter circle r = hole_radius and the
    square [0, half_width]^2 is covered by rays from the hole surface to the
    outer boundary, extruded through the thickness.  Boundary regions:
    ``hole``, ``symx`` (x = 0), ``symy`` (y = 0), ``symz`` (z = 0, the
    mid-plane), ``top`` (the electrode) and ``outer``.
    """
    if min(nr, ntheta, nz) < 1:
        raise ValueError("all mesh subdivisions must be >= 1")
    mi, mj, mk = nr + 1, ntheta + 1, nz + 1
    verts = np.empty((mi * mj * mk, 3))

    def vid(i, j, k):
        return (i * mj + j) * mk + k

    for j in range(mj):
        th = 0.5 * np.pi * j / ntheta
        direction = np.array([np.cos(th), np.sin(th)])
        router = half_width / max(abs(direction[0]), abs(direction[1]))
        for i in range(mi):
            s = i / nr
            radius = (1.0 - s) * hole_radius + s * router
            xy = radius * direction
            for k in range(mk):
                verts[vid(i, j, k)] = (xy[0], xy[1],
                                       half_height * k / nz)
    tets = structured_tets(nr, ntheta, nz, vid)

    tol = 1e-9 * half_width
    regions = {tag: [] for tag in
               ("hole", "symx", "symy", "symz", "top", "outer")}
    from .mesh import LOCAL_FACES
    incident = {}
    for e, tet in enumerate(tets):
        for loc in LOCAL_FACES:
            key = tuple(sorted((int(tet[loc[0]]), int(tet[loc[1]]),
                                int(tet[loc[2]]))))
            incident[key] = incident.get(key, 0) + 1
    for key, count in incident.items():
        if count != 1:
            continue
        pts = verts[list(key)]
        r = np.linalg.norm(pts[:, :2], axis=1)
        if np.all(np.abs(pts[:, 2]) < tol):
            regions["symz"].append(list(key))
        elif np.all(np.abs(pts[:, 2] - half_height) < tol):
            regions["top"].append(list(key))
        elif np.all(np.abs(r - hole_radius) < 1e-6 * hole_radius):
            regions["hole"].append(list(key))
        elif np.all(np.abs(pts[:, 0]) < tol):
            regions["symx"].append(list(key))
        elif np.all(np.abs(pts[:, 1]) < tol):
            regions["symy"].append(list(key))
        else:
            regions["outer"].append(list(key))
    return Mesh(verts, tets, regions)


def scenario_hole_plate(config: dict, outdir, threads: int = 1) -> dict:
    """Five-step poling of the holed block; exports final fields and the log."""
    params = material_from_config(config.get("material", {}))
    hp = config.get("hole_plate", {})
    k = _order_from_config(config)
    voltages = [1e3 * float(v) for v in hp.get("voltages_kv",
                                               (5.0, 8.0, 9.0, 10.0, 15.0))]
    if any(b <= a for a, b in zip(voltages, voltages[1:])) or voltages[0] <= 0:
        raise ConfigError("voltages_kv must be positive and increasing")
    mesh = quarter_hole_plate_mesh(int(hp.get("nr", 3)),
                                   int(hp.get("ntheta", 6)),
                                   int(hp.get("nz", 2)))
    settings = newton_from_config(config.get("newton"))

    V = build_h1_vector_space(mesh, k, fixed_regions={"symx": (0,),
                                                      "symy": (1,),
                                                      "symz": (2,)})
    D = build_hdiv_space(mesh, k,
                         insulated_regions=("hole", "symx", "symy", "outer"))
    P = build_l2_space(mesh, k, 3)
    Q = build_l2_space(mesh, 0, 1)
    spaces = FieldSpaces(V, D, P, Q)

    # Half of the full plate voltage across half the thickness; the mid-plane
    # is a grounded (natural, V0 = 0) electrode by antisymmetry.
    v_full = voltages[-1]
    loads = LoadData(
        electrode_potentials={"top": 0.5 * v_full, "symz": 0.0},
        insulated_charges={t: 0.0 for t in ("hole", "symx", "symy", "outer")})
    assembler = Assembler(mesh, spaces, mt.Material(params), loads,
                          threads=threads)
    state0 = SystemState.zero(spaces)
    program = LoadProgram(tuple(v / v_full for v in voltages))
    history, logs = run_load_program(assembler, state0, program, settings)

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_newton_log(outdir / "newton_log.csv", logs)
    final = history[-1]
    export_vtk(final, assembler, outdir / "final_fields.vtk",
               f"hole plate, applied voltage {v_full:.6g} V (half model)")

    # locate the polarization maximum and whether it touches the hole surface
    from .spaces import evaluate_field
    centroid = np.array([[0.25, 0.25, 0.25]])
    pi_mag = np.array([
        np.linalg.norm(evaluate_field(spaces.polarization, final.Pi, e,
                                      centroid)[0])
        for e in range(mesh.num_tets)])
    hole_faces = set(int(f) for f in mesh.region_faces("hole"))
    hole_elems = set(int(mesh.face_elems[f, 0]) for f in hole_faces)
    e_max = int(np.argmax(pi_mag))
    return {"assembler": assembler, "history": history, "logs": logs,
            "pi_magnitude": pi_mag, "max_element": e_max,
            "max_on_hole": e_max in hole_elems, "hole_elements": hole_elems,
            "mesh": mesh}


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

_SCENARIOS = {
    "point": lambda cfg, out, threads: scenario_point(cfg, out),
    "repoling_cube": scenario_repoling_cube,
    "hole_plate": scenario_hole_plate,
}


def run_scenario(config: dict, outdir, threads: int = 1) -> dict:
    name = config.get("scenario")
    if name not in _SCENARIOS:
        raise ConfigError(
            f"unknown scenario '{name}'; choose from {sorted(_SCENARIOS)}")
    if name != "point" and "material" not in config:
        raise ConfigError("config must provide a 'material' section")
    if name == "point" and "material" not in config:
        raise ConfigError("config must provide a 'material' section")
    return _SCENARIOS[name](config, outdir, threads)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ferro-mixed",
        description="Mixed finite-element ferroelectric polarization solver")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario from a JSON config")
    run.add_argument("config", help="path to the JSON run configuration")
    run.add_argument("--out", default=None,
                     help="output directory (default: config output_dir or 'out')")
    run.add_argument("--threads", type=int, default=1,
                     help="assembly thread count")
    run.add_argument("--log-level", default="INFO",
                     choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    args = parser.parse_args(argv)

    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        outdir = args.out or config.get("output_dir", "out")
        run_scenario(config, outdir, threads=max(1, args.threads))
    except (ConfigError, MeshError) as exc:
        log.error("%s", exc)
        return 1
    except (NewtonError, mt.PointDriverError) as exc:
        log.error("solver did not converge: %s", exc)
        return 2
    log.info("outputs written to %s", outdir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
