"""Global residual and consistent tangent of the four-field formulation.

Unknowns per load increment: displacement u (continuous vector elements),
dielectric displacement D (normal-continuous elements), remanent polarization
P (discontinuous vector elements) and the electric-potential multiplier phi
(piecewise constants).  The weak form of one increment reads

    int [ T:dS + E.dD - Ehat.dP - div(dD) phi - div(D - D_ref) dphi
          + dphi_eps(P - P_ref).dP ] dx  =  dW_ext

with T, E, Ehat evaluated from the free energy at the end of the increment,
and the external work

    dW_ext = int f.du dx + int_traction t.du ds - int_electrode lam V0 dD.n ds.

The residual is exactly the gradient of the incremental potential

    Psi(t1) - Psi(t0) + Phi_eps(P - P_ref) - W_ext - int div(D - D_ref) phi dx,

which the tests verify by finite differences.  The tangent is its symmetric
(indefinite) Hessian.  Because the divergence of every dielectric basis
function is constant per element and the multiplier is piecewise constant,
a vanishing multiplier residual forces div D = 0 pointwise.

Element loops are vectorized over groups of elements sharing an orientation
signature; an optional thread pool splits groups into chunks (results are
independent of the chunking because contributions are concatenated in
element order before summation).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse

from .material import Material, MaterialDomainError, dphi_eps, d2phi_eps, phi_eps
from .mesh import Mesh
from .spaces import (FESpace, face_reference_points, hdiv_face_moments,
                     tet_rule, triangle_rule)

__all__ = [
    "Assembler",
    "BoundaryConditions",
    "ConstraintConflictError",
    "FieldSpaces",
    "LoadData",
    "SystemState",
    "apply_essential_bcs",
    "assemble_residual",
    "assemble_tangent",
    "external_work_vector",
]


class ConstraintConflictError(ValueError):
    """Raised when one dof receives conflicting essential assignments."""


@dataclass
class FieldSpaces:
    """The four discrete spaces of the formulation, in block order."""

    displacement: FESpace
    dielectric: FESpace
    polarization: FESpace
    potential: FESpace

    def __post_init__(self):
        sizes = [self.displacement.ndof, self.dielectric.ndof,
                 self.polarization.ndof, self.potential.ndof]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])

    @property
    def total_dofs(self) -> int:
        return int(self.offsets[-1])

    def blocks(self):
        return (self.displacement, self.dielectric, self.polarization,
                self.potential)

    def split(self, x: np.ndarray):
        o = self.offsets
        return x[o[0]:o[1]], x[o[1]:o[2]], x[o[2]:o[3]], x[o[3]:o[4]]


@dataclass
class SystemState:
    """Coefficient vectors at the end of an increment plus the reference state."""

    u: np.ndarray
    D: np.ndarray
    Pi: np.ndarray
    phi: np.ndarray
    u0: np.ndarray
    D0: np.ndarray
    Pi0: np.ndarray
    lam: float = 0.0
    converged: bool = False
    newton_iterations: int = 0
    residual_norm: float = np.nan

    @classmethod
    def zero(cls, spaces: FieldSpaces) -> "SystemState":
        z = lambda sp: np.zeros(sp.ndof)
        return cls(u=z(spaces.displacement), D=z(spaces.dielectric),
                   Pi=z(spaces.polarization), phi=z(spaces.potential),
                   u0=z(spaces.displacement), D0=z(spaces.dielectric),
                   Pi0=z(spaces.polarization))

    def pack(self) -> np.ndarray:
        return np.concatenate([self.u, self.D, self.Pi, self.phi])

    def with_vector(self, spaces: FieldSpaces, x: np.ndarray) -> "SystemState":
        u, D, Pi, phi = spaces.split(x)
        return SystemState(u=u.copy(), D=D.copy(), Pi=Pi.copy(),
                           phi=phi.copy(), u0=self.u0, D0=self.D0,
                           Pi0=self.Pi0, lam=self.lam)

    def advance(self, lam: float) -> "SystemState":
        """New increment: current solution becomes the reference state."""
        return SystemState(u=self.u.copy(), D=self.D.copy(),
                           Pi=self.Pi.copy(), phi=self.phi.copy(),
                           u0=self.u.copy(), D0=self.D.copy(),
                           Pi0=self.Pi.copy(), lam=lam)


@dataclass
class LoadData:
    """External loads and essential boundary values.

    ``volume_force``: constant body force (N/m^3).  ``tractions``: region tag
    -> surface traction vector (N/m^2), scaled by the load factor.
    ``electrode_potentials``: region tag -> applied voltage (V), scaled by the
    load factor; enters the dielectric equations as a natural boundary term.
    ``insulated_charges``: region tag -> prescribed normal charge density
    (C/m^2, constant or callable of position); fixed, not scaled by the load
    factor.  ``point_constraints``: (vertex id, component, value) triples for
    rigid-body fixing of the displacement.
    """

    volume_force: np.ndarray = field(default_factory=lambda: np.zeros(3))
    tractions: dict = field(default_factory=dict)
    electrode_potentials: dict = field(default_factory=dict)
    insulated_charges: dict = field(default_factory=dict)
    point_constraints: tuple = ()


@dataclass
class BoundaryConditions:
    """Combined essential-dof mask and prescribed values for all blocks."""

    mask: np.ndarray
    values: np.ndarray


def apply_essential_bcs(spaces: FieldSpaces, loads: LoadData,
                        mesh: Mesh) -> BoundaryConditions:
    """Resolve essential boundary data into per-dof assignments.

    Displacement dofs on fixed regions and point constraints are pinned;
    dielectric face moments on insulated regions are set to the face-wise
    projection of the prescribed charge density (zero by default).  Raises
    :class:`ConstraintConflictError` on contradictory assignments.
    """
    total = spaces.total_dofs
    mask = np.zeros(total, dtype=bool)
    values = np.zeros(total)

    V = spaces.displacement
    off_u = spaces.offsets[0]
    mask[off_u:off_u + V.ndof] = V.constrained_mask
    assigned = {}
    for vertex, comp, value in loads.point_constraints:
        dof = off_u + 3 * int(vertex) + int(comp)
        if dof in assigned and assigned[dof] != value:
            raise ConstraintConflictError(
                f"point constraint conflict at vertex {vertex} comp {comp}")
        if V.constrained_mask[dof - off_u] and value != 0.0:
            raise ConstraintConflictError(
                f"vertex {vertex} comp {comp} already fixed to zero by region")
        assigned[dof] = value
        mask[dof] = True
        values[dof] = value

    Dsp = spaces.dielectric
    off_d = spaces.offsets[1]
    mask[off_d:off_d + Dsp.ndof] = Dsp.constrained_mask
    insulated = getattr(Dsp, "insulated_regions", ())
    electro = set(loads.electrode_potentials)
    overlap = electro.intersection(insulated)
    if overlap:
        raise ConstraintConflictError(
            f"regions {sorted(overlap)} are tagged both electrode and insulated")
    nqf = Dsp.n_face_dofs_elem // 4
    for tag, density in loads.insulated_charges.items():
        if tag not in insulated:
            raise ConstraintConflictError(
                f"charge prescribed on region '{tag}' that is not insulated")
        if density is None:
            continue
        for fid in mesh.region_faces(tag):
            dofs = off_d + fid * nqf + np.arange(nqf)
            values[dofs] = hdiv_face_moments(Dsp, int(fid), density)
    return BoundaryConditions(mask=mask, values=values)


# ---------------------------------------------------------------------------
# Assembler
# ---------------------------------------------------------------------------

class Assembler:
    """Precomputes basis tables and assembles residuals/tangents.

    The quadrature degree defaults to 2(k+1)+2; the integrands are not
    polynomial (through |P| in the hardening and coupling), so the rule is a
    fixed consistent choice rather than exact.
    """

    def __init__(self, mesh: Mesh, spaces: FieldSpaces, material: Material,
                 loads: LoadData, quad_degree: int | None = None,
                 threads: int = 1):
        self.mesh = mesh
        self.spaces = spaces
        self.material = material
        self.loads = loads
        k = spaces.dielectric.order
        self.quad_degree = quad_degree if quad_degree is not None \
            else 2 * (k + 1) + 2
        self.rule = tet_rule(self.quad_degree)
        self.face_rule = triangle_rule(2 * (k + 1) + 2)
        self.threads = max(1, threads)
        self.bcs = apply_essential_bcs(spaces, loads, mesh)
        self._build_groups()
        self._ext_unit = None  # cache: external work vector at lam = 1
        # Temporary inflation of the dissipation smoothing; the solver walks
        # this back to 1 when continuation is needed to start a hard step.
        self.dissipation_scale = 1.0

    def _dissipation_params(self):
        params = self.material.params
        if self.dissipation_scale == 1.0:
            return params
        return replace(params, eps_dissipation=self.dissipation_scale
                       * params.eps_dissipation)

    # -- precomputation ----------------------------------------------------

    def _build_groups(self):
        mesh = self.mesh
        V, Dsp, Psp, Qsp = self.spaces.blocks()
        pts = self.rule.points
        wq = self.rule.weights
        Nu, Gu_ref = V.scalar_tables(pts)
        Np, _ = Psp.scalar_tables(pts)
        origin, J, det, Jinv = mesh.element_maps()

        self.groups = []
        for sig, elems in Dsp.element_groups():
            Vd_ref, divs = Dsp.hdiv_tables(sig, pts)
            g = {
                "elems": elems,
                "det": det[elems],
                "J": J[elems],
                "Jinv": Jinv[elems],
                "Nu": Nu, "Gu_ref": Gu_ref, "Np": Np,
                "Vd_ref": Vd_ref, "divs": divs,
                "w": wq[None, :] * det[elems, None],
                "vol": det[elems] / 6.0,
            }
            # physical tables
            g["Gu"] = np.einsum("sqr,erd->esqd", Gu_ref, Jinv[elems])
            g["Vd"] = np.einsum("ecr,iqr->eiqc",
                                J[elems] / det[elems, None, None], Vd_ref)
            g["divd"] = divs[None, :] / det[elems, None]
            # dof gathering (with signs folded in)
            g["dofs_u"] = V.elem_dofs[elems]
            g["signs_u"] = V.elem_signs[elems]
            g["dofs_d"] = Dsp.elem_dofs[elems]
            g["signs_d"] = Dsp.elem_signs[elems]
            g["dofs_p"] = Psp.elem_dofs[elems]
            g["dofs_q"] = Qsp.elem_dofs[elems]
            o = self.spaces.offsets
            g["gdofs"] = np.concatenate(
                [o[0] + g["dofs_u"], o[1] + g["dofs_d"],
                 o[2] + g["dofs_p"], o[3] + g["dofs_q"]], axis=1)
            g["gsigns"] = np.concatenate(
                [g["signs_u"], g["signs_d"],
                 np.ones_like(g["dofs_p"], dtype=float),
                 np.ones_like(g["dofs_q"], dtype=float)], axis=1)
            # state-independent tangent blocks (the SS and DD material
            # moduli are constant, as is the divergence coupling)
            c_d = self.material.tensors.stiffness_d
            beta = self.material.tensors.beta_s
            ne = len(elems)
            nsu = Nu.shape[0]
            g["kuu"] = np.einsum("eq,esqi,aibj,etqj->esatb", g["w"], g["Gu"],
                                 c_d, g["Gu"],
                                 optimize=True).reshape(ne, 3 * nsu, 3 * nsu)
            g["kdd"] = np.einsum("eq,eiqc,cd,ejqd->eij", g["w"], g["Vd"],
                                 beta, g["Vd"], optimize=True)
            g["kdq"] = -(g["divd"] * g["vol"][:, None])[:, :, None]
            self.groups.append(g)
        self.n_upos = V.elem_dofs.shape[1]
        self.n_dpos = Dsp.elem_dofs.shape[1]
        self.n_ppos = Psp.elem_dofs.shape[1]
        self._paths = {}

    # -- field evaluation at quadrature points ------------------------------

    def _local_fields(self, g, state: SystemState):
        V, Dsp, Psp, Qsp = self.spaces.blocks()
        nsu = g["Nu"].shape[0]
        nsp = g["Np"].shape[0]
        u_loc = (state.u[g["dofs_u"]] * g["signs_u"]).reshape(-1, nsu, 3)
        d_loc = state.D[g["dofs_d"]] * g["signs_d"]
        d0_loc = state.D0[g["dofs_d"]] * g["signs_d"]
        p_loc = state.Pi[g["dofs_p"]].reshape(-1, nsp, 3)
        p0_loc = state.Pi0[g["dofs_p"]].reshape(-1, nsp, 3)
        q_loc = state.phi[g["dofs_q"]]

        grad_u = np.einsum("esa,esqb->eqab", u_loc, g["Gu"])
        S = 0.5 * (grad_u + np.swapaxes(grad_u, -1, -2))
        Dv = np.einsum("ei,eiqc->eqc", d_loc, g["Vd"])
        Pv = np.einsum("esc,sq->eqc", p_loc, g["Np"])
        P0v = np.einsum("esc,sq->eqc", p0_loc, g["Np"])
        div_dD = np.einsum("ei,ei->e", d_loc - d0_loc, g["divd"])
        phi_v = q_loc[:, 0]
        return {"S": S, "D": Dv, "Pi": Pv, "Pi0": P0v, "div_dD": div_dD,
                "phi": phi_v, "u_loc": u_loc, "d_loc": d_loc}

    def _check_domain(self, g, Pv):
        params = self.material.params
        if params.eps_hardening > 0:
            return
        r = np.linalg.norm(Pv, axis=-1)
        bad = np.argwhere(r >= params.saturation_polarization)
        if len(bad):
            e, q = bad[0]
            raise MaterialDomainError(
                f"|P| >= P0 at element {g['elems'][e]}, quadrature point {q} "
                f"(|P| = {r[e, q]:.6g})")

    # -- residual ------------------------------------------------------------

    def _residual_group(self, g, state: SystemState):
        mat = self.material
        params = self._dissipation_params()
        f = self._local_fields(g, state)
        self._check_domain(g, f["Pi"])
        ne, nq = f["S"].shape[:2]
        Sf = f["S"].reshape(-1, 3, 3)
        Df = f["D"].reshape(-1, 3)
        Pf = f["Pi"].reshape(-1, 3)
        T, E, Ehat = mat.dpsi(Sf, Df, Pf)
        dphi = dphi_eps((f["Pi"] - f["Pi0"]).reshape(-1, 3), params)
        rpi_density = (-Ehat + dphi).reshape(ne, nq, 3)
        T = T.reshape(ne, nq, 3, 3)
        E = E.reshape(ne, nq, 3)
        w = g["w"]

        r_u = np.einsum("eq,eqab,esqb->esa", w, T, g["Gu"])
        r_d = np.einsum("eq,eqc,eiqc->ei", w, E, g["Vd"])
        r_d -= (f["phi"] * g["vol"])[:, None] * g["divd"]
        r_p = np.einsum("eq,eqc,sq->esc", w, rpi_density, g["Np"])
        r_q = -(f["div_dD"] * g["vol"])[:, None]

        local = np.concatenate(
            [r_u.reshape(ne, -1), r_d, r_p.reshape(ne, -1), r_q], axis=1)
        return (local * g["gsigns"]).ravel(), g["gdofs"].ravel()

    def assemble_residual(self, state: SystemState,
                          include_external: bool = True) -> np.ndarray:
        """Global residual; rows of constrained dofs are zeroed."""
        res = np.zeros(self.spaces.total_dofs)
        for vals, dofs in self._map_groups(self._residual_group, state):
            np.add.at(res, dofs, vals)
        if include_external:
            res -= self.external_work_vector(state.lam)
        res[self.bcs.mask] = 0.0
        return res

    # -- tangent --------------------------------------------------------------

    def _einsum(self, subs, *ops):
        """einsum with the contraction path cached per shape signature."""
        key = (subs, tuple(op.shape for op in ops))
        path = self._paths.get(key)
        if path is None:
            path = np.einsum_path(subs, *ops, optimize="optimal")[0]
            self._paths[key] = path
        return np.einsum(subs, *ops, optimize=path)

    def _tangent_group(self, g, state: SystemState):
        mat = self.material
        params = self._dissipation_params()
        f = self._local_fields(g, state)
        self._check_domain(g, f["Pi"])
        ne, nq = f["S"].shape[:2]
        H = mat.d2psi(f["S"].reshape(-1, 3, 3), f["D"].reshape(-1, 3),
                      f["Pi"].reshape(-1, 3))
        Hpp = H["PiPi"] + d2phi_eps((f["Pi"] - f["Pi0"]).reshape(-1, 3),
                                    params)
        SD = H["SD"].reshape(ne, nq, 3, 3, 3)
        SP = H["SPi"].reshape(ne, nq, 3, 3, 3)
        DP = H["DPi"].reshape(ne, nq, 3, 3)
        PP = Hpp.reshape(ne, nq, 3, 3)
        w = g["w"]
        Gu = g["Gu"]
        Vd = g["Vd"]
        Np = g["Np"]

        kud = self._einsum("eq,esqb,eqabc,eiqc->esai", w, Gu, SD, Vd)
        kup = self._einsum("eq,esqb,eqabm,tq->esatm", w, Gu, SP, Np)
        kdp = self._einsum("eq,eiqk,eqkm,tq->eitm", w, Vd, DP, Np)
        kpp = self._einsum("eq,sq,eqab,tq->esatb", w, Np, PP, Np)

        nu = self.n_upos
        nd = self.n_dpos
        npi = self.n_ppos
        ntot = nu + nd + npi + 1
        K = np.zeros((ne, ntot, ntot))
        su, sd, sp, sq = (slice(0, nu), slice(nu, nu + nd),
                          slice(nu + nd, nu + nd + npi),
                          slice(nu + nd + npi, ntot))
        K[:, su, su] = g["kuu"]
        K[:, su, sd] = kud.reshape(ne, nu, nd)
        K[:, sd, su] = np.swapaxes(kud.reshape(ne, nu, nd), 1, 2)
        K[:, su, sp] = kup.reshape(ne, nu, npi)
        K[:, sp, su] = np.swapaxes(kup.reshape(ne, nu, npi), 1, 2)
        K[:, sd, sd] = g["kdd"]
        K[:, sd, sp] = kdp.reshape(ne, nd, npi)
        K[:, sp, sd] = np.swapaxes(kdp.reshape(ne, nd, npi), 1, 2)
        K[:, sp, sp] = kpp.reshape(ne, npi, npi)
        K[:, sd, sq] = g["kdq"]
        K[:, sq, sd] = np.swapaxes(g["kdq"], 1, 2)

        K *= g["gsigns"][:, :, None] * g["gsigns"][:, None, :]
        rows = np.repeat(g["gdofs"], ntot, axis=1).ravel()
        cols = np.tile(g["gdofs"], (1, ntot)).ravel()
        return K.ravel(), rows, cols

    def assemble_tangent(self, state: SystemState) -> scipy.sparse.csr_matrix:
        """Symmetric tangent; constrained rows/columns replaced by identity."""
        n = self.spaces.total_dofs
        data, rows, cols = [], [], []
        for vals, r, c in self._map_groups(self._tangent_group, state):
            data.append(vals)
            rows.append(r)
            cols.append(c)
        A = scipy.sparse.coo_matrix(
            (np.concatenate(data), (np.concatenate(rows),
                                    np.concatenate(cols))),
            shape=(n, n)).tocsr()
        free = (~self.bcs.mask).astype(float)
        Dfree = scipy.sparse.diags(free)
        A = Dfree @ A @ Dfree + scipy.sparse.diags(
            self.bcs.mask.astype(float))
        return A.tocsr()

    def _map_groups(self, fn, state):
        """Apply fn to each group, optionally in a thread pool.

        Results are collected in group order, so the assembled result does
        not depend on the thread count.
        """
        if self.threads == 1 or len(self.groups) == 1:
            return [fn(g, state) for g in self.groups]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(lambda g: fn(g, state), self.groups))

    # -- external work -------------------------------------------------------

    def external_work_vector(self, lam: float) -> np.ndarray:
        """Linear form of the external loads at load factor ``lam``."""
        if self._ext_unit is None:
            self._ext_unit = self._build_external_unit()
        return lam * self._ext_unit

    def _build_external_unit(self) -> np.ndarray:
        spaces = self.spaces
        mesh = self.mesh
        loads = self.loads
        vec = np.zeros(spaces.total_dofs)
        V = spaces.displacement
        off_u, off_d = spaces.offsets[0], spaces.offsets[1]

        fvol = np.asarray(loads.volume_force, dtype=float)
        if np.any(fvol != 0.0):
            for g in self.groups:
                nsu = g["Nu"].shape[0]
                r = np.einsum("eq,sq,a->esa", g["w"], g["Nu"], fvol)
                local = (r.reshape(len(g["elems"]), -1)
                         * g["signs_u"])
                np.add.at(vec, off_u + g["dofs_u"].ravel(), local.ravel())

        tri = self.face_rule
        for tag, traction in loads.tractions.items():
            t = np.asarray(traction, dtype=float)
            for fid in mesh.region_faces(tag):
                elem = int(mesh.face_elems[fid, 0])
                lf = int(mesh.face_local[fid, 0])
                ref = face_reference_points(lf, tri.points)
                Nf, _ = V.scalar_tables(ref)
                scale = 2.0 * mesh.face_areas[fid]
                r = scale * np.einsum("q,sq,a->sa", tri.weights, Nf, t)
                dofs = V.elem_dofs[elem].reshape(-1, 3)
                signs = V.elem_signs[elem].reshape(-1, 3)
                np.add.at(vec, off_u + dofs.ravel(), (r * signs).ravel())

        Dsp = spaces.dielectric
        for tag, volt in loads.electrode_potentials.items():
            for fid in mesh.region_faces(tag):
                elem = int(mesh.face_elems[fid, 0])
                lf = int(mesh.face_local[fid, 0])
                ref = face_reference_points(lf, tri.points)
                sig = tuple(int(s) for s in Dsp.signatures[elem])
                vals, _ = Dsp.hdiv_tables(sig, ref)
                amap = mesh.element_map(elem)
                piola = np.einsum("dc,nqc->nqd", amap.jacobian / amap.det,
                                  vals)
                n = mesh.face_normals[fid]
                scale = 2.0 * mesh.face_areas[fid]
                vn = np.einsum("nqd,d->nq", piola, n)
                r = -volt * scale * np.einsum("q,nq->n", tri.weights, vn)
                dofs = Dsp.elem_dofs[elem]
                signs = Dsp.elem_signs[elem]
                np.add.at(vec, off_d + dofs, r * signs)
        return vec

    # -- diagnostics and scalar functionals -----------------------------------

    def incremental_objective(self, state: SystemState) -> float:
        """Value of the incremental potential at the state's increment."""
        mat = self.material
        params = mat.params
        total = 0.0
        for g in self.groups:
            f = self._local_fields(g, state)
            ne, nq = f["S"].shape[:2]
            psi1 = mat.psi(f["S"].reshape(-1, 3, 3), f["D"].reshape(-1, 3),
                           f["Pi"].reshape(-1, 3)).reshape(ne, nq)
            # reference-state energy
            fs0 = self._reference_fields(g, state)
            psi0 = mat.psi(fs0["S"].reshape(-1, 3, 3),
                           fs0["D"].reshape(-1, 3),
                           fs0["Pi"].reshape(-1, 3)).reshape(ne, nq)
            diss = phi_eps((f["Pi"] - f["Pi0"]).reshape(-1, 3),
                           params).reshape(ne, nq)
            total += np.sum(g["w"] * (psi1 - psi0 + diss))
            total -= np.sum(f["div_dD"] * g["vol"] * f["phi"])
        ext = self.external_work_vector(state.lam)
        dx = state.pack()
        x0 = np.concatenate([state.u0, state.D0, state.Pi0,
                             np.zeros_like(state.phi)])
        total -= float(ext @ (dx - x0))
        return float(total)

    def _reference_fields(self, g, state: SystemState):
        nsu = g["Nu"].shape[0]
        nsp = g["Np"].shape[0]
        u_loc = (state.u0[g["dofs_u"]] * g["signs_u"]).reshape(-1, nsu, 3)
        d_loc = state.D0[g["dofs_d"]] * g["signs_d"]
        p_loc = state.Pi0[g["dofs_p"]].reshape(-1, nsp, 3)
        grad_u = np.einsum("esa,esqb->eqab", u_loc, g["Gu"])
        S = 0.5 * (grad_u + np.swapaxes(grad_u, -1, -2))
        Dv = np.einsum("ei,eiqc->eqc", d_loc, g["Vd"])
        Pv = np.einsum("esc,sq->eqc", p_loc, g["Np"])
        return {"S": S, "D": Dv, "Pi": Pv}

    def step_dissipation(self, state: SystemState) -> float:
        """int phi_eps(P - P_ref) dx over the mesh."""
        params = self.material.params
        total = 0.0
        for g in self.groups:
            f = self._local_fields(g, state)
            ne, nq = f["S"].shape[:2]
            diss = phi_eps((f["Pi"] - f["Pi0"]).reshape(-1, 3),
                           params).reshape(ne, nq)
            total += np.sum(g["w"] * diss)
        return float(total)

    def element_divergence(self, state: SystemState) -> np.ndarray:
        """Pointwise (per-element constant) divergence of D, in element order."""
        out = np.empty(self.mesh.num_tets)
        for g in self.groups:
            d_loc = state.D[g["dofs_d"]] * g["signs_d"]
            out[g["elems"]] = np.einsum("ei,ei->e", d_loc, g["divd"])
        return out

    def boundary_flux(self, state: SystemState, tag: str) -> float:
        """Total charge int D.n ds over a boundary region (outward normal)."""
        mesh = self.mesh
        Dsp = self.spaces.dielectric
        tri = self.face_rule
        total = 0.0
        for fid in mesh.region_faces(tag):
            elem = int(mesh.face_elems[fid, 0])
            lf = int(mesh.face_local[fid, 0])
            ref = face_reference_points(lf, tri.points)
            sig = tuple(int(s) for s in Dsp.signatures[elem])
            vals, _ = Dsp.hdiv_tables(sig, ref)
            amap = mesh.element_map(elem)
            piola = np.einsum("dc,nqc->nqd", amap.jacobian / amap.det, vals)
            local = state.D[Dsp.elem_dofs[elem]] * Dsp.elem_signs[elem]
            Dq = np.einsum("n,nqd->qd", local, piola)
            vn = Dq @ mesh.face_normals[fid]
            total += 2.0 * mesh.face_areas[fid] * float(tri.weights @ vn)
        return total


# -- spec-shaped convenience wrappers ----------------------------------------

def assemble_residual(state: SystemState, assembler: Assembler) -> np.ndarray:
    return assembler.assemble_residual(state)


def assemble_tangent(state: SystemState, assembler: Assembler):
    return assembler.assemble_tangent(state)


def external_work_vector(assembler: Assembler, lam: float) -> np.ndarray:
    return assembler.external_work_vector(lam)
