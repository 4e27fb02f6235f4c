"""Residual-based error indicators, marking, and the adaptation cycle.

Element residuals are evaluated in strong form at volume quadrature points
(second derivatives of the P2 velocity are constant per element); edge
indicators measure normal jumps of the viscous flux, the chemical flux and
the phase-field gradient across interior edges, with the normal oriented
from the lower to the higher triangle id.

The coarsening post-processing keeps only nodeStars on which the
Ginzburg-Landau energy of the interpolated phase field does not exceed the
energy of the fine one, both integrated with the assembly quadrature over
the star's fine triangles, so the guarantee matches the energy ledger
exactly.
"""

from dataclasses import dataclass

import numpy as np

from . import fem
from .mesh import coarsen, find_nodestars, refine
from .stepper import VOL_ORDER, DiscreteState, two_step

__all__ = ["ErrorIndicators", "AdaptConfig", "compute_residuals", "mark",
           "postprocess", "adapt_cycle", "AdaptResult"]


@dataclass
class ErrorIndicators:
    eta_t1: np.ndarray
    eta_t2: np.ndarray
    eta_t3: np.ndarray
    eta_e1: np.ndarray
    eta_e2: np.ndarray
    eta_e3: np.ndarray
    eta_t: np.ndarray      # combined per-triangle volume indicator
    eta_te: np.ndarray     # combined per-triangle edge indicator
    eta_omega: float       # global estimator of the error bound

    def cell_data(self):
        return {"eta_T": self.eta_t, "eta_TE": self.eta_te}


@dataclass
class AdaptConfig:
    theta_r: float = 0.5
    theta_c: float = 0.1
    a_min: float = 1e-12
    a_max: float = 1e12

    def __post_init__(self):
        if not (0.0 < self.theta_r < 1.0 and 0.0 < self.theta_c < 1.0):
            raise ValueError("marking fractions must lie in (0, 1)")
        if not (0.0 < self.a_min < self.a_max):
            raise ValueError("area bounds must satisfy 0 < a_min < a_max")


def _p2_grad_at(gradlam, lam):
    """P2 basis gradients at barycentric points; gradlam (n,3,2), lam (n,3) -> (n,6,2)."""
    n = lam.shape[0]
    out = np.empty((n, 6, 2))
    for i in range(3):
        out[:, i] = (4.0 * lam[:, i, None] - 1.0) * gradlam[:, i]
    pairs = [(1, 2), (0, 2), (0, 1)]
    for e, (j, k) in enumerate(pairs):
        out[:, 3 + e] = 4.0 * (lam[:, j, None] * gradlam[:, k]
                               + lam[:, k, None] * gradlam[:, j])
    return out


def _bary_of_points(coords, pts):
    """Barycentric coordinates of pts (n,2) inside triangles coords (n,3,2)."""
    p0 = coords[:, 0]
    d1 = coords[:, 1] - p0
    d2 = coords[:, 2] - p0
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    r = pts - p0
    l1 = (r[:, 0] * d2[:, 1] - r[:, 1] * d2[:, 0]) / det
    l2 = (d1[:, 0] * r[:, 1] - d1[:, 1] * r[:, 0]) / det
    return np.column_stack([1.0 - l1 - l2, l1, l2])


def compute_residuals(prev, curr, nxt, ctx):
    """Indicators for the accepted step (k -> k+1); all states on ctx.mesh."""
    par = ctx.params
    mesh = ctx.mesh
    if not (prev.mesh.uid == curr.mesh.uid == nxt.mesh.uid == mesh.uid):
        raise ValueError("states must live on the context mesh")
    tau = par.tau
    fe = par.free_energy()
    quad = ctx.quad
    p1 = ctx.p1
    vs = ctx.vspace
    sc = vs.scalar
    nt = mesh.num_triangles
    areas = p1.areas
    h_t = mesh.diameters()

    phi_k_qp = p1.value_qp(curr.phi, quad)
    phi_n_qp = p1.value_qp(nxt.phi, quad)
    mu_n_qp = p1.value_qp(nxt.mu, quad)
    rho_k = par.rho(phi_k_qp)
    rho_km1 = par.rho(p1.value_qp(prev.phi, quad))
    eta_k = par.eta(phi_k_qp)
    m_k = par.mobility_scale
    grad_phi_k = p1.grad_cell(curr.phi)            # (NT, 2)
    grad_mu_k = p1.grad_cell(curr.mu)
    grad_p = p1.grad_cell(nxt.p)
    v_k_qp = vs.value_qp(curr.v, quad)
    v_n_qp = vs.value_qp(nxt.v, quad)
    grad_v_k = vs.grad_qp(curr.v, quad)            # (NT, NQ, 2, 2): [i,j]=d_j v_i
    grad_v_n = vs.grad_qp(nxt.v, quad)

    # b^k = rho^k v^k + J^k and its divergence (J needs rho'' inside the bands)
    drho = par.drho_dphi(phi_k_qp)
    d2rho = par.d2rho_dphi2(phi_k_qp)
    j_k = -drho[:, :, None] * m_k * grad_mu_k[:, None, :]
    b_k = rho_k[:, :, None] * v_k_qp + j_k
    div_v_k = grad_v_k[:, :, 0, 0] + grad_v_k[:, :, 1, 1]
    gphi_dot_v = np.einsum("td,tqd->tq", grad_phi_k, v_k_qp)
    gphi_dot_gmu = np.einsum("td,td->t", grad_phi_k, grad_mu_k)
    div_b = drho * gphi_dot_v + rho_k * div_v_k - m_k * d2rho * gphi_dot_gmu[:, None]

    # div(eta^k D v^{k+1}): eta' grad(phi) . D + eta * div(D)
    hess = sc.hess_table()                         # (NT, 6, 2, 2)
    hx = np.einsum("ti,tiab->tab", nxt.v[:vs.nsc][sc.cell_dofs], hess)
    hy = np.einsum("ti,tiab->tab", nxt.v[vs.nsc:][sc.cell_dofs], hess)
    div_d = np.empty((nt, 2))
    div_d[:, 0] = hx[:, 0, 0] + 0.5 * hx[:, 1, 1] + 0.5 * hy[:, 0, 1]
    div_d[:, 1] = hy[:, 1, 1] + 0.5 * hy[:, 0, 0] + 0.5 * hx[:, 0, 1]
    d_n = 0.5 * (grad_v_n + np.swapaxes(grad_v_n, -1, -2))
    deta = par.deta_dphi(phi_k_qp)
    eta_grad_term = deta[:, :, None] * np.einsum("td,tqid->tqi", grad_phi_k, d_n)
    div_eta_d = eta_grad_term + eta_k[:, :, None] * div_d[:, None, :]

    conv = np.einsum("tqd,tqid->tqi", b_k, grad_v_n)
    g = np.asarray(par.gravity)
    r1 = ((0.5 * (rho_k + rho_km1))[:, :, None] * v_n_qp
          - rho_km1[:, :, None] * v_k_qp
          + tau * conv
          + 0.5 * tau * div_b[:, :, None] * v_n_qp
          - 2.0 * tau * div_eta_d
          + tau * grad_p[:, None, :]
          - tau * mu_n_qp[:, :, None] * grad_phi_k[:, None, :]
          - tau * rho_k[:, :, None] * g[None, None, :])

    r2 = phi_n_qp - phi_k_qp + tau * np.einsum("tqd,td->tq", v_n_qp, grad_phi_k)
    r3 = fe.dF_plus(phi_n_qp) + fe.dF_minus(phi_k_qp) - mu_n_qp

    w = quad.weights
    norm_r1 = np.sqrt(np.einsum("q,tqd->t", w, r1**2) * areas)
    norm_r2 = np.sqrt(np.einsum("q,tq->t", w, r2**2) * areas)
    norm_r3 = np.sqrt(np.einsum("q,tq->t", w, r3**2) * areas)
    eta_t1 = h_t * norm_r1
    eta_t2 = h_t * norm_r2
    eta_t3 = h_t * norm_r3

    # edge jumps on interior edges
    ne = mesh.num_edges
    eta_e1 = np.zeros(ne)
    eta_e2 = np.zeros(ne)
    eta_e3 = np.zeros(ne)
    interior = np.nonzero(~mesh.boundary_edge)[0]
    if interior.size:
        tg, wg = fem.edge_gauss(3)
        a = mesh.vertices[mesh.edges[interior, 0]]
        b = mesh.vertices[mesh.edges[interior, 1]]
        h_e = np.linalg.norm(b - a, axis=1)
        nu = np.column_stack([(b - a)[:, 1], -(b - a)[:, 0]]) / h_e[:, None]
        tlo = mesh.edge_tris[interior, 0]
        thi = mesh.edge_tris[interior, 1]
        grad_phi_n = p1.grad_cell(nxt.phi)
        grad_phi_n_jump = grad_phi_n[thi] - grad_phi_n[tlo]
        grad_mu_n = p1.grad_cell(nxt.mu)
        grad_mu_jump = grad_mu_n[thi] - grad_mu_n[tlo]
        # piecewise-constant jumps: ||c||_E = |c| sqrt(h_E)
        eta_e3[interior] = h_e * np.abs(np.einsum("ed,ed->e", grad_phi_n_jump, nu))
        eta_e2[interior] = h_e * m_k * np.abs(np.einsum("ed,ed->e", grad_mu_jump, nu))

        # viscous flux jump: D(v) is linear per element, eta continuous
        coords = p1.coords
        gradlam = p1.gradlam
        cdofs = sc.cell_dofs
        jump_sq = np.zeros(interior.size)
        phi_vert = curr.phi[mesh.edges[interior]]
        for gi, tgi in enumerate(tg):
            pts = a + tgi * (b - a)
            dlo = _side_dv(nxt.v, vs, coords, gradlam, cdofs, tlo, pts)
            dhi = _side_dv(nxt.v, vs, coords, gradlam, cdofs, thi, pts)
            phi_on_edge = phi_vert[:, 0] * (1 - tgi) + phi_vert[:, 1] * tgi
            eta_edge = par.eta(phi_on_edge)
            jmp = np.einsum("eij,ej->ei", dhi - dlo, nu) * 2.0 * eta_edge[:, None]
            jump_sq += wg[gi] * (jmp**2).sum(axis=1)
        eta_e1[interior] = np.sqrt(h_e) * np.sqrt(jump_sq * h_e)

    eta_t, eta_te, eta_omega = _combine(ctx, eta_t1, eta_t2, eta_t3,
                                        eta_e1, eta_e2, eta_e3)
    return ErrorIndicators(eta_t1, eta_t2, eta_t3, eta_e1, eta_e2, eta_e3,
                           eta_t, eta_te, eta_omega)


def _side_dv(vdofs, vs, coords, gradlam, cdofs, tri_ids, pts):
    """Symmetrized velocity gradient of one side's triangles at edge points."""
    lam = _bary_of_points(coords[tri_ids], pts)
    gb = _p2_grad_at(gradlam[tri_ids], lam)        # (n, 6, 2)
    nsc = vs.nsc
    gx = np.einsum("ni,nid->nd", vdofs[:nsc][cdofs[tri_ids]], gb)
    gy = np.einsum("ni,nid->nd", vdofs[nsc:][cdofs[tri_ids]], gb)
    grad = np.stack([gx, gy], axis=1)              # (n, 2, 2): [i, j] = d_j v_i
    return 0.5 * (grad + np.swapaxes(grad, 1, 2))


def _combine(ctx, eta_t1, eta_t2, eta_t3, eta_e1, eta_e2, eta_e3):
    par = ctx.params
    tau = par.tau
    eta_lo = par.eta_min
    m_lo = par.mobility_scale
    se = par.sigma * par.epsilon
    eta_t = (eta_t1**2 / (tau * eta_lo) + eta_t2**2 / (tau * m_lo) + eta_t3**2 / se)
    edge_weighted = (tau / eta_lo * eta_e1**2 + tau / m_lo * eta_e2**2 + se * eta_e3**2)
    eta_te = edge_weighted[ctx.mesh.tri_edges].sum(axis=1)
    eta_omega = float(np.sqrt(eta_t.sum() + edge_weighted.sum()))
    return eta_t, eta_te, eta_omega


def _greedy_bulk(eta, theta):
    """Smallest largest-first set with sum >= theta * total (index tie-break)."""
    total = eta.sum()
    if total <= 0.0:
        return np.empty(0, dtype=np.int64)
    order = np.lexsort((np.arange(eta.size), -eta))
    csum = np.cumsum(eta[order])
    k = int(np.searchsorted(csum, theta * total, side="left")) + 1
    return order[:min(k, eta.size)]


def mark(ind, cfg, ctx):
    """Marking strategy: bulk refinement sets and threshold coarsening sets.

    The admissible window keeps the areas that marking can produce inside
    [a_min, a_max]: a triangle may be refined only if its children stay at or
    above a_min, and coarsened only if the merged parent stays within a_max.
    """
    areas = ctx.p1.areas
    refinable = (areas >= 2.0 * cfg.a_min) & (areas <= cfg.a_max)
    coarsenable = (areas >= cfg.a_min) & (areas <= 0.5 * cfg.a_max)
    r_t = _greedy_bulk(ind.eta_t, cfg.theta_r)
    r_te = _greedy_bulk(ind.eta_te, cfg.theta_r)
    nt = areas.size
    refine_mask = np.zeros(nt, dtype=bool)
    refine_mask[r_t] = True
    refine_mask[r_te] = True
    refine_mask &= refinable

    c_mask = np.zeros(nt, dtype=bool)
    c_mask |= ind.eta_t <= (cfg.theta_c / nt) * ind.eta_t.sum()
    c_mask |= ind.eta_te <= (cfg.theta_c / nt) * ind.eta_te.sum()
    c_mask &= coarsenable
    c_mask &= ~refine_mask
    return (np.nonzero(refine_mask)[0], np.nonzero(c_mask)[0])


def _gl_density_qp(fe, sigma_eps_half, phi_qp, grad_sq):
    return sigma_eps_half * grad_sq + fe.F(phi_qp)


def star_energies(mesh, phi, params, stars, p1=None):
    """(coarse, fine) Ginzburg-Landau energies per star, vectorized.

    The fine side sums the assembly-quadrature contributions of each star's
    triangles exactly as the current energy ledger computes them; the coarse
    side integrates the Lagrange interpolant over the merged parent triangles
    with the same rule, exactly as the next ledger (on the coarsened mesh)
    will.  The regions are identical, so keeping a star with
    coarse <= fine never lets the ledger chain increase.
    """
    p1 = p1 or fem.P1Space(mesh)
    quad = fem.quadrature(VOL_ORDER)
    fe = params.free_energy()
    seh = 0.5 * params.sigma * params.epsilon
    fine_qp = p1.value_qp(phi, quad)
    grads = p1.grad_cell(phi)
    dens = _gl_density_qp(fe, seh, fine_qp, (grads**2).sum(axis=1)[:, None])
    fine_tri = np.einsum("q,tq,t->t", quad.weights, dens, p1.areas)
    fine = np.array([fine_tri[list(s.tris)].sum() for s in stars])

    parent_rows = [p for s in stars for p in s.parents]
    owner = np.repeat(np.arange(len(stars)),
                      [len(s.parents) for s in stars])
    tri = np.asarray(parent_rows, dtype=np.int64)
    coords = mesh.vertices[tri]                         # (P, 3, 2)
    vals = phi[tri]                                     # (P, 3)
    d1 = coords[:, 1] - coords[:, 0]
    d2 = coords[:, 2] - coords[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    area = 0.5 * np.abs(det)
    phi_qp = vals @ quad.points.T                       # (P, NQ)
    dv1 = vals[:, 1] - vals[:, 0]
    dv2 = vals[:, 2] - vals[:, 0]
    gx = (dv1 * d2[:, 1] - dv2 * d1[:, 1]) / det
    gy = (-dv1 * d2[:, 0] + dv2 * d1[:, 0]) / det
    dens_p = _gl_density_qp(fe, seh, phi_qp, (gx**2 + gy**2)[:, None])
    energy_p = (dens_p @ quad.weights) * area
    coarse = np.bincount(owner, weights=energy_p, minlength=len(stars))
    return coarse, fine


def postprocess(coarsen_set, mesh, phi_next, params, p1=None, enabled=True):
    """Algorithm-2 filter of the coarsening set.

    Step 1 keeps only complete nodeStars inside the marked set; step 2 (the
    energy guard, skipped when ``enabled`` is false) drops stars where
    Lagrange interpolation onto the merged patch would raise the
    Ginzburg-Landau energy.  Returns (stars, n_rejected, energy_production)
    where energy_production sums (coarse - fine) over the surviving stars.
    """
    marked = set(int(t) for t in coarsen_set)
    stars = [s for s in find_nodestars(mesh) if set(s.tris) <= marked]
    if not stars:
        return stars, 0, 0.0
    coarse, fine = star_energies(mesh, phi_next, params, stars, p1=p1)
    if not enabled:
        return stars, 0, float((coarse - fine).sum())
    keep = coarse <= fine
    kept = [s for s, k in zip(stars, keep) if k]
    production = float((coarse[keep] - fine[keep]).sum())
    return kept, int((~keep).sum()), production


@dataclass
class AdaptResult:
    mesh: object
    prev_state: DiscreteState     # state k transferred to the new mesh
    curr_state: DiscreteState     # state k+1 transferred to the new mesh
    solution: DiscreteState       # state k+1 on the solve mesh
    indicators: ErrorIndicators
    report: object
    n_refined: int
    n_coarsened_stars: int
    n_rejected_stars: int
    energy_production: float      # GL energy injected by the executed coarsening


def adapt_cycle(prev, curr, ctx, cfg, opts=None, postprocess_enabled=True):
    """SOLVE -> ESTIMATE -> MARK -> ADAPT, once per time step.

    The step is solved on the current (pre-adapted) mesh; the adapted mesh
    carries the transferred states and becomes the mesh of the next step.
    """
    nxt, report = two_step(prev, curr, ctx, opts)
    ind = compute_residuals(prev, curr, nxt, ctx)
    refine_ids, coarsen_ids = mark(ind, cfg, ctx)
    stars, rejected, production = postprocess(coarsen_ids, ctx.mesh, nxt.phi,
                                              ctx.params, p1=ctx.p1,
                                              enabled=postprocess_enabled)
    mesh1, cmap = coarsen(ctx.mesh, stars)
    mapped = cmap.tri_map[refine_ids]
    mapped = mapped[mapped >= 0]
    mesh2, rmap = refine(mesh1, mapped)

    def move(field, kind):
        op = fem.transfer_p1 if kind == "p1" else fem.transfer_p2_vector
        return op(rmap, op(cmap, field))

    prev_t = DiscreteState(mesh2, move(curr.v, "p2vec"), move(curr.p, "p1"),
                           move(curr.phi, "p1"), move(curr.mu, "p1"),
                           curr.time_index)
    curr_t = DiscreteState(mesh2, move(nxt.v, "p2vec"), move(nxt.p, "p1"),
                           move(nxt.phi, "p1"), move(nxt.mu, "p1"),
                           nxt.time_index)
    return AdaptResult(mesh2, prev_t, curr_t, nxt, ind, report,
                       n_refined=len(refine_ids), n_coarsened_stars=len(stars),
                       n_rejected_stars=rejected, energy_production=production)
