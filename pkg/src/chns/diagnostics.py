"""Energy ledger, inequality slack, mass tracking, and benchmark quantities.

All energy integrals use the assembly quadrature (order 4), so the slack of
the discrete energy inequality telescopes exactly against the solved
equations: for an exactly solved step the slack is the (nonpositive) sum of
the convexity gaps plus the Ginzburg-Landau energy injected by the previous
coarsening, which the post-processing keeps nonpositive patch by patch.

Bubble functionals integrate over {phi < 0} with exact sub-triangulation of
the elements crossed by the piecewise-linear zero level set.
"""

import csv
from dataclasses import dataclass, fields

import numpy as np

from .fem import integrate, quadrature
from .stepper import VOL_ORDER

__all__ = ["LedgerRow", "LEDGER_COLUMNS", "energy_step_report", "state_energies",
           "circularity", "rising_velocity", "center_of_mass", "bubble_geometry",
           "DiagnosticsWriter"]


LEDGER_COLUMNS = ["t", "kinetic", "gl_energy", "visc_dissip", "chem_dissip",
                  "num_dissip_v", "num_dissip_phi", "gravity_work", "zeta",
                  "mass", "mass_dev", "circularity", "V", "M", "NT", "NP"]


@dataclass
class LedgerRow:
    t: float
    kinetic: float
    gl_energy: float
    visc_dissip: float = 0.0
    chem_dissip: float = 0.0
    num_dissip_v: float = 0.0
    num_dissip_phi: float = 0.0
    gravity_work: float = 0.0
    zeta: float = float("nan")
    mass: float = 0.0
    mass_dev: float = 0.0
    circularity: float = float("nan")
    V: float = float("nan")
    M: float = float("nan")
    NT: int = 0
    NP: int = 0

    def as_list(self):
        return [getattr(self, f.name) for f in fields(self)]


def gl_energy(ctx, phi):
    """Ginzburg-Landau energy with the assembly quadrature."""
    par = ctx.params
    fe = par.free_energy()
    phi_qp = ctx.p1.value_qp(phi, ctx.quad)
    grads = ctx.p1.grad_cell(phi)
    dens = 0.5 * par.sigma * par.epsilon * (grads**2).sum(axis=1)[:, None] + fe.F(phi_qp)
    return integrate(ctx.p1, np.broadcast_to(dens, phi_qp.shape), VOL_ORDER)


def kinetic_energy(ctx, v, rho_phi):
    par = ctx.params
    rho = par.rho(ctx.p1.value_qp(rho_phi, ctx.quad))
    vq = ctx.vspace.value_qp(v, ctx.quad)
    return integrate(ctx.p1, 0.5 * rho * (vq**2).sum(axis=-1), VOL_ORDER)


def state_energies(ctx, state, rho_phi=None):
    """(kinetic, gl) of a state; rho_phi defaults to the state's own phi."""
    rp = state.phi if rho_phi is None else rho_phi
    return kinetic_energy(ctx, state.v, rp), gl_energy(ctx, state.phi)


def energy_step_report(prev, curr, nxt, ctx, carried_production=0.0):
    """Ledger row of one accepted two-step advance (all states on ctx.mesh).

    ``carried_production`` is the Ginzburg-Landau energy injected by the
    coarsening that produced this step's mesh (zero without coarsening);
    the slack zeta adds it to the Theorem-type step inequality, so with the
    post-processing active zeta stays nonpositive up to solver tolerance.
    """
    par = ctx.params
    quad = ctx.quad
    tau = par.tau
    kin_new = kinetic_energy(ctx, nxt.v, curr.phi)
    gl_new = gl_energy(ctx, nxt.phi)
    kin_old = kinetic_energy(ctx, curr.v, prev.phi)
    gl_old = gl_energy(ctx, curr.phi)

    rho_km1 = par.rho(ctx.p1.value_qp(prev.phi, quad))
    dv_qp = ctx.vspace.value_qp(nxt.v - curr.v, quad)
    nd_v = integrate(ctx.p1, 0.5 * rho_km1 * (dv_qp**2).sum(axis=-1), VOL_ORDER)
    gdiff = ctx.p1.grad_cell(nxt.phi - curr.phi)
    nd_phi = 0.5 * par.sigma * par.epsilon * float(
        ((gdiff**2).sum(axis=1) * ctx.p1.areas).sum())

    eta_k = par.eta(ctx.p1.value_qp(curr.phi, quad))
    gv = ctx.vspace.grad_qp(nxt.v, quad)
    d_sym = 0.5 * (gv + np.swapaxes(gv, -1, -2))
    visc = tau * integrate(ctx.p1, 2.0 * eta_k * (d_sym**2).sum(axis=(-1, -2)),
                           VOL_ORDER)
    gmu = ctx.p1.grad_cell(nxt.mu)
    chem = tau * par.mobility_scale * float(((gmu**2).sum(axis=1) * ctx.p1.areas).sum())

    g = np.asarray(par.gravity)
    if np.any(g != 0.0):
        rho_k = par.rho(ctx.p1.value_qp(curr.phi, quad))
        v_qp = ctx.vspace.value_qp(nxt.v, quad)
        grav = tau * integrate(ctx.p1, rho_k * (v_qp @ g), VOL_ORDER)
    else:
        grav = 0.0

    zeta = (kin_new + gl_new + nd_v + nd_phi + visc + chem) \
        - (kin_old + gl_old + grav) + carried_production
    mass = float(ctx.pressure_one @ nxt.phi)
    return LedgerRow(t=tau * nxt.time_index, kinetic=kin_new, gl_energy=gl_new,
                     visc_dissip=visc, chem_dissip=chem, num_dissip_v=nd_v,
                     num_dissip_phi=nd_phi, gravity_work=grav, zeta=zeta,
                     mass=mass, NT=ctx.mesh.num_triangles, NP=ctx.mesh.num_vertices)


# ---------------------------------------------------------------------------
# bubble functionals over {phi < 0}

def _clip_negative_region(mesh, phi):
    """Sub-triangulate {phi < 0}: returns (parent_tri_ids, triangle_coords).

    Elements crossed by the zero level set of the P1 field are split along
    the exact linear zero segment; fully negative elements pass unchanged.
    """
    tris = mesh.triangles
    vals = phi[tris]                                    # (NT, 3)
    neg = vals < 0.0
    nneg = neg.sum(axis=1)
    out_parent = []
    out_coords = []
    full = np.nonzero(nneg == 3)[0]
    if full.size:
        out_parent.append(full)
        out_coords.append(mesh.vertices[tris[full]])
    for t in np.nonzero((nneg == 1) | (nneg == 2))[0]:
        v = vals[t]
        pts = mesh.vertices[tris[t]]
        negs = [i for i in range(3) if v[i] < 0]
        poss = [i for i in range(3) if v[i] >= 0]
        cross = {}
        for i in negs:
            for j in poss:
                s = v[i] / (v[i] - v[j])   # v[i] < 0 <= v[j], never 0/0
                cross[(i, j)] = pts[i] + s * (pts[j] - pts[i])
        if len(negs) == 1:
            i = negs[0]
            a = cross[(i, poss[0])]
            b = cross[(i, poss[1])]
            out_parent.append(np.array([t]))
            out_coords.append(np.array([[pts[i], a, b]]))
        else:
            i, k = negs
            j = poss[0]
            a = cross[(i, j)]
            b = cross[(k, j)]
            out_parent.append(np.array([t, t]))
            out_coords.append(np.array([[pts[i], a, b], [pts[i], b, pts[k]]]))
    if not out_parent:
        return np.empty(0, dtype=int), np.empty((0, 3, 2))
    return np.concatenate(out_parent), np.concatenate(out_coords)


def _region_integrals(mesh, phi, fields_fn=None):
    """Area and integrals of callables over {phi < 0} by mapped quadrature."""
    parents, coords = _clip_negative_region(mesh, phi)
    if parents.size == 0:
        raise ValueError("region {phi < 0} is empty")
    d1 = coords[:, 1] - coords[:, 0]
    d2 = coords[:, 2] - coords[:, 0]
    areas = 0.5 * np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    area = float(areas.sum())
    if fields_fn is None:
        return area, parents, coords, areas
    quad = quadrature(3)
    pts = np.einsum("qi,sid->sqd", quad.points, coords)  # (ns, NQ, 2)
    vals = fields_fn(parents, pts)                       # (ns, NQ, m)
    ints = np.einsum("q,sqm,s->m", quad.weights, vals, areas)
    return area, ints


def zero_level_length(mesh, phi):
    """Length of the piecewise-linear zero level set of the P1 field."""
    tris = mesh.triangles
    vals = phi[tris]
    touched = np.nonzero((vals.min(axis=1) <= 0.0) & (vals.max(axis=1) >= 0.0))[0]
    total = 0.0
    for t in touched:
        v = vals[t]
        pts = mesh.vertices[tris[t]]
        segs = [pts[i] + v[i] / (v[i] - v[j]) * (pts[j] - pts[i])
                for (i, j) in ((0, 1), (1, 2), (0, 2)) if v[i] * v[j] < 0.0]
        zeros = [i for i in range(3) if v[i] == 0.0]
        segs.extend(pts[i] for i in zeros)
        if len(zeros) == 2 and v[3 - sum(zeros)] < 0.0:
            continue  # edge-aligned segment is owned by the positive side
        if len(segs) == 2:
            total += float(np.linalg.norm(segs[1] - segs[0]))
    return total


def bubble_geometry(mesh, phi):
    """(area, perimeter) of the bubble {phi < 0}."""
    area, _, _, _ = _region_integrals(mesh, phi)
    return area, zero_level_length(mesh, phi)


def circularity(mesh, phi):
    """Perimeter of the area-equivalent circle over the bubble perimeter."""
    area, perim = bubble_geometry(mesh, phi)
    if perim == 0.0:
        raise ValueError("bubble has no interface")
    return 2.0 * np.sqrt(np.pi * area) / perim


def _p2_eval_on_subtris(ctx, vdofs, parents, pts):
    """Evaluate the P2 velocity on sub-triangle quadrature points."""
    from .estimator import _bary_of_points
    from .mesh import p2_basis_at
    sc = ctx.vspace.scalar
    ns, nq, _ = pts.shape
    coords = sc.coords[parents]                          # (ns, 3, 2)
    out = np.empty((ns, nq, 2))
    for q in range(nq):
        lam = _bary_of_points(coords, pts[:, q])
        basis = p2_basis_at(lam)                         # (ns, 6)
        cd = sc.cell_dofs[parents]
        out[:, q, 0] = np.einsum("si,si->s", basis, vdofs[:sc.nsc][cd])
        out[:, q, 1] = np.einsum("si,si->s", basis, vdofs[sc.nsc:][cd])
    return out


def rising_velocity(ctx, phi, v):
    """Mean vertical velocity of the bubble: int_{phi<0} v2 / area."""
    def fn(parents, pts):
        return _p2_eval_on_subtris(ctx, v, parents, pts)
    area, ints = _region_integrals(ctx.mesh, phi, fn)
    return float(ints[1] / area)


def center_of_mass(mesh, phi):
    """Mean height of the bubble: int_{phi<0} x2 / area."""
    def fn(parents, pts):
        return pts[:, :, 1][:, :, None]
    area, ints = _region_integrals(mesh, phi, fn)
    return float(ints[0] / area)


class DiagnosticsWriter:
    """CSV writers for the diagnostics, Newton and adaptation logs."""

    def __init__(self, diag_path, newton_path=None, adapt_path=None):
        self._diag = open(diag_path, "w", newline="")
        self._diag_csv = csv.writer(self._diag)
        self._diag_csv.writerow(LEDGER_COLUMNS)
        self._newton = self._adapt = None
        if newton_path:
            self._newton = open(newton_path, "w", newline="")
            self._newton_csv = csv.writer(self._newton)
            self._newton_csv.writerow(["step", "iterations", "final_residual",
                                       "linear_iterations"])
        if adapt_path:
            self._adapt = open(adapt_path, "w", newline="")
            self._adapt_csv = csv.writer(self._adapt)
            self._adapt_csv.writerow(["step", "NT", "refined", "coarsened_stars",
                                      "rejected_stars", "energy_production"])

    def write_row(self, row):
        vals = []
        for v in row.as_list():
            if isinstance(v, float):
                vals.append(repr(v))
            else:
                vals.append(v)
        self._diag_csv.writerow(vals)
        self._diag.flush()

    def write_newton(self, step, report):
        if self._newton:
            self._newton_csv.writerow([
                step, report.iterations,
                repr(float(report.residual_history[-1])),
                sum(report.linear_iter_counts)])
            self._newton.flush()

    def write_adapt(self, step, nt, refined, coarsened, rejected, production):
        if self._adapt:
            self._adapt_csv.writerow([step, nt, refined, coarsened, rejected,
                                      repr(float(production))])
            self._adapt.flush()

    def close(self):
        self._diag.close()
        if self._newton:
            self._newton.close()
        if self._adapt:
            self._adapt.close()
