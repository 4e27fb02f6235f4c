"""P1/P2 finite element spaces, quadrature, sparse assembly, field transfer.

Velocity lives in the vector P2 space (Taylor-Hood pair with P1 pressure),
phase field and chemical potential in P1.  Vector dofs are stacked by
component: ``[all x-dofs, all y-dofs]`` with ``nsc = NP + NE`` scalar dofs
per component (vertex dofs first, then edge-midpoint dofs).

Integrals use symmetric Gauss rules on the reference triangle normalized so
the weights sum to one; a physical integral is ``|T| * sum_q w_q f(x_q)``.
Order 4 is used for every variable-coefficient or nonlinear term, order 2
for the divergence block (exact there).
"""

import numpy as np
import scipy.sparse as sp

from . import mesh as meshmod
from .mesh import MeshError, p2_basis_at, p2_cell_dofs, p2_dof_points

__all__ = [
    "Quadrature", "quadrature", "edge_gauss",
    "P1Space", "P2Scalar", "P2Vector", "BoundarySpec",
    "assemble_mass", "assemble_stiffness", "assemble_viscous",
    "assemble_divergence", "assemble_convection", "assemble_interfacial_force",
    "assemble_transport", "assemble_p1_load", "assemble_vector_load",
    "l2_project_p1", "integrate", "interpolate",
    "transfer_p1", "transfer_p2_scalar", "transfer_p2_vector",
]


class Quadrature:
    __slots__ = ("order", "points", "weights")

    def __init__(self, order, points, weights):
        self.order = order
        self.points = np.asarray(points, dtype=np.float64)     # (NQ, 3) barycentric
        self.weights = np.asarray(weights, dtype=np.float64)   # (NQ,), sums to 1


def _orbit1(a):
    return [(a, a, a)], [1.0]


def _orbit3(a, w):
    b = 1.0 - 2.0 * a
    return [(b, a, a), (a, b, a), (a, a, b)], [w] * 3


def _orbit6(a, b, w):
    c = 1.0 - a - b
    pts = [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)]
    return pts, [w] * 6


def _build_rules():
    rules = {}
    rules[1] = _orbit1(1.0 / 3.0)
    rules[2] = _orbit3(1.0 / 6.0, 1.0 / 3.0)
    p, w = _orbit1(1.0 / 3.0)
    p2, w2 = _orbit3(0.2, 25.0 / 48.0)
    rules[3] = (p + p2, [-27.0 / 48.0] + w2)
    p, w = _orbit3(0.445948490915965, 0.223381589678011)
    p2, w2 = _orbit3(0.091576213509771, 0.109951743655322)
    rules[4] = (p + p2, w + w2)
    p, w = _orbit1(1.0 / 3.0)
    p1, w1 = _orbit3(0.470142064105115, 0.132394152788506)
    p2, w2 = _orbit3(0.101286507323456, 0.125939180544827)
    rules[5] = (p + p1 + p2, [0.225] + w1 + w2)
    p1, w1 = _orbit3(0.249286745170910, 0.116786275726379)
    p2, w2 = _orbit3(0.063089014491502, 0.050844906370207)
    p3, w3 = _orbit6(0.053145049844816, 0.310352451033785, 0.082851075618374)
    rules[6] = (p1 + p2 + p3, w1 + w2 + w3)
    return {k: Quadrature(k, np.array(p), np.array(w)) for k, (p, w) in rules.items()}


_RULES = _build_rules()


def quadrature(order):
    """Symmetric rule on the reference triangle, exact for the given degree."""
    if order not in _RULES:
        raise ValueError(f"unsupported quadrature order {order} (use 1..6)")
    return _RULES[order]


def edge_gauss(n=3):
    """Gauss points/weights on [0, 1] (n = 2 or 3)."""
    if n == 2:
        x = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
        w = np.array([0.5, 0.5])
    elif n == 3:
        r = 0.5 * np.sqrt(3.0 / 5.0)
        x = np.array([0.5 - r, 0.5, 0.5 + r])
        w = np.array([5.0, 8.0, 5.0]) / 18.0
    else:
        raise ValueError("edge rule supports n in {2, 3}")
    return x, w


# ---------------------------------------------------------------------------
# geometry helpers

def _geometry(mesh):
    p = mesh.vertices[mesh.triangles]          # (NT, 3, 2)
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    area = 0.5 * det
    # gradients of barycentric coordinates, (NT, 3, 2)
    g = np.empty((mesh.num_triangles, 3, 2))
    x, y = p[..., 0], p[..., 1]
    g[:, 0, 0] = y[:, 1] - y[:, 2]
    g[:, 0, 1] = x[:, 2] - x[:, 1]
    g[:, 1, 0] = y[:, 2] - y[:, 0]
    g[:, 1, 1] = x[:, 0] - x[:, 2]
    g[:, 2, 0] = y[:, 0] - y[:, 1]
    g[:, 2, 1] = x[:, 1] - x[:, 0]
    g /= det[:, None, None]
    return p, area, g


class P1Space:
    """Continuous piecewise-linear scalars; one dof per vertex."""

    kind = "p1"

    def __init__(self, mesh):
        self.mesh = mesh
        self.ndof = mesh.num_vertices
        self.cell_dofs = mesh.triangles
        self.coords, self.areas, self.gradlam = _geometry(mesh)

    def basis(self, quad):
        return quad.points                      # (NQ, 3)

    def value_qp(self, dofs, quad):
        return np.einsum("ti,qi->tq", dofs[self.cell_dofs], quad.points)

    def grad_cell(self, dofs):
        """Piecewise-constant gradient, (NT, 2)."""
        return np.einsum("ti,tid->td", dofs[self.cell_dofs], self.gradlam)

    def points_at(self, quad):
        """Physical quadrature points, (NT, NQ, 2)."""
        return np.einsum("qi,tid->tqd", quad.points, self.coords)


class P2Scalar:
    """Continuous piecewise-quadratic scalars; vertex + edge-midpoint dofs."""

    kind = "p2"

    def __init__(self, mesh):
        self.mesh = mesh
        self.nsc = mesh.num_vertices + mesh.num_edges
        self.ndof = self.nsc
        self.cell_dofs = p2_cell_dofs(mesh)
        self.coords, self.areas, self.gradlam = _geometry(mesh)
        self._grad_tables = {}

    def basis(self, quad):
        return p2_basis_at(quad.points)         # (NQ, 6)

    def grad_table(self, quad):
        """Basis gradients at quadrature points, (NT, NQ, 6, 2)."""
        key = quad.order
        if key not in self._grad_tables:
            lam = quad.points                   # (NQ, 3)
            g = self.gradlam                    # (NT, 3, 2)
            nt, nq = g.shape[0], lam.shape[0]
            out = np.empty((nt, nq, 6, 2))
            for i in range(3):
                out[:, :, i, :] = (4.0 * lam[None, :, i, None] - 1.0) * g[:, None, i, :]
            pairs = [(1, 2), (0, 2), (0, 1)]
            for e, (j, k) in enumerate(pairs):
                out[:, :, 3 + e, :] = 4.0 * (lam[None, :, j, None] * g[:, None, k, :]
                                             + lam[None, :, k, None] * g[:, None, j, :])
            self._grad_tables[key] = out
        return self._grad_tables[key]

    def hess_table(self):
        """Constant-per-element basis second derivatives, (NT, 6, 2, 2)."""
        g = self.gradlam
        nt = g.shape[0]
        out = np.empty((nt, 6, 2, 2))
        for i in range(3):
            out[:, i] = 4.0 * np.einsum("ta,tb->tab", g[:, i], g[:, i])
        pairs = [(1, 2), (0, 2), (0, 1)]
        for e, (j, k) in enumerate(pairs):
            out[:, 3 + e] = 4.0 * (np.einsum("ta,tb->tab", g[:, j], g[:, k])
                                   + np.einsum("ta,tb->tab", g[:, k], g[:, j]))
        return out

    def value_qp(self, dofs, quad):
        return np.einsum("ti,qi->tq", dofs[self.cell_dofs], self.basis(quad))

    def grad_qp(self, dofs, quad):
        return np.einsum("ti,tqid->tqd", dofs[self.cell_dofs], self.grad_table(quad))


class BoundarySpec:
    """Velocity wall conditions per rectangle side.

    Each of left/right/bottom/top is one of 'noslip' (both components zero),
    'slip' (zero normal component, free tangential), 'free' (unconstrained).
    """

    def __init__(self, left="noslip", right="noslip", bottom="noslip", top="noslip"):
        for v in (left, right, bottom, top):
            if v not in ("noslip", "slip", "free"):
                raise ValueError(f"unknown wall condition {v!r}")
        self.left, self.right, self.bottom, self.top = left, right, bottom, top

    def as_dict(self):
        return {meshmod.LEFT: self.left, meshmod.RIGHT: self.right,
                meshmod.BOTTOM: self.bottom, meshmod.TOP: self.top,
                meshmod.OTHER_BND: "noslip"}


class P2Vector:
    """Vector P2 space with per-component wall constraints (all homogeneous)."""

    kind = "p2vec"

    def __init__(self, mesh, bc=None):
        self.mesh = mesh
        self.scalar = P2Scalar(mesh)
        self.nsc = self.scalar.nsc
        self.ndof = 2 * self.nsc
        self.bc = bc or BoundarySpec()
        self.constrained = self._constrained_mask()
        self.free = ~self.constrained
        self.free_idx = np.nonzero(self.free)[0]

    def _constrained_mask(self):
        m = self.mesh
        mask = np.zeros(self.ndof, dtype=bool)
        rules = self.bc.as_dict()
        for flag, cond in rules.items():
            if cond == "free":
                continue
            eids = np.nonzero(m.boundary_flags == flag)[0]
            if eids.size == 0:
                continue
            sdofs = np.unique(np.concatenate([m.edges[eids].ravel(),
                                              m.num_vertices + eids]))
            if cond == "noslip":
                mask[sdofs] = True
                mask[self.nsc + sdofs] = True
            elif cond == "slip":
                # walls are axis-aligned: normal component only
                if flag in (meshmod.LEFT, meshmod.RIGHT):
                    mask[sdofs] = True
                else:
                    mask[self.nsc + sdofs] = True
        return mask

    def value_qp(self, dofs, quad):
        """(NT, NQ, 2)"""
        vx = self.scalar.value_qp(dofs[:self.nsc], quad)
        vy = self.scalar.value_qp(dofs[self.nsc:], quad)
        return np.stack([vx, vy], axis=-1)

    def grad_qp(self, dofs, quad):
        """(NT, NQ, 2, 2) with entry [i, j] = d v_i / d x_j."""
        gx = self.scalar.grad_qp(dofs[:self.nsc], quad)
        gy = self.scalar.grad_qp(dofs[self.nsc:], quad)
        return np.stack([gx, gy], axis=-2)


# ---------------------------------------------------------------------------
# assembly

def _coo(rows, cols, vals, shape):
    return sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())),
                         shape=shape).tocsr()


def _elem_to_coo(cell_rows, cell_cols, elem):
    nr, nc = elem.shape[1], elem.shape[2]
    rows = np.repeat(cell_rows[:, :, None], nc, axis=2)
    cols = np.repeat(cell_cols[:, None, :], nr, axis=1)
    return rows, cols, elem


def _weight_qp(weight, nt, nq):
    w = np.asarray(weight, dtype=np.float64)
    if w.ndim == 0:
        return np.broadcast_to(w, (nt, nq))
    if w.shape == (nt, nq):
        return w
    raise ValueError("coefficient must be a scalar or a (NT, NQ) array")


def assemble_mass(space, weight=1.0, order=4):
    """(weight u, v); SPD for positive weights.

    For the vector space the same scalar mass appears on both components.
    """
    if isinstance(space, P2Vector):
        msc = assemble_mass(space.scalar, weight, order)
        return sp.block_diag([msc, msc], format="csr")
    quad = quadrature(order)
    nt, nq = space.areas.shape[0], quad.weights.shape[0]
    wq = _weight_qp(weight, nt, nq)
    phi = space.basis(quad)                     # (NQ, nd)
    elem = np.einsum("q,tq,qi,qj->tij", quad.weights, wq, phi, phi)
    elem *= space.areas[:, None, None]
    r, c, v = _elem_to_coo(space.cell_dofs, space.cell_dofs, elem)
    return _coo(r, c, v, (space.ndof, space.ndof))


def assemble_stiffness(space, weight=1.0, order=4):
    """(weight grad u, grad v) on the P1 space."""
    quad = quadrature(order)
    nt, nq = space.areas.shape[0], quad.weights.shape[0]
    wq = _weight_qp(weight, nt, nq)
    wbar = np.einsum("q,tq->t", quad.weights, wq)
    elem = np.einsum("t,tid,tjd->tij", wbar * space.areas, space.gradlam, space.gradlam)
    r, c, v = _elem_to_coo(space.cell_dofs, space.cell_dofs, elem)
    return _coo(r, c, v, (space.ndof, space.ndof))


def assemble_viscous(vspace, eta, order=4):
    """(2 eta D(u), D(v)) on the vector P2 space."""
    quad = quadrature(order)
    sc = vspace.scalar
    nt, nq = sc.areas.shape[0], quad.weights.shape[0]
    wq = _weight_qp(eta, nt, nq)
    g = sc.grad_table(quad)                     # (NT, NQ, 6, 2)
    w = quad.weights[None, :] * wq              # (NT, NQ)
    # int eta [ delta_cd grad(bi).grad(bj) + d_d(bi) d_c(bj) ]
    lap = np.einsum("tq,tqid,tqjd->tij", w, g, g)
    cross = np.einsum("tq,tqid,tqjc->tijcd", w, g, g)
    area = sc.areas
    nsc = vspace.nsc
    blocks = {}
    for cc in range(2):
        for dd in range(2):
            e = cross[:, :, :, cc, dd].copy()
            if cc == dd:
                e += lap
            blocks[(cc, dd)] = e * area[:, None, None]
    rows, cols, vals = [], [], []
    for (cc, dd), elem in blocks.items():
        r, c, v = _elem_to_coo(sc.cell_dofs + cc * nsc, sc.cell_dofs + dd * nsc, elem)
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(v.ravel())
    return _coo(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals),
                (vspace.ndof, vspace.ndof))


def assemble_divergence(vspace, pspace, order=2):
    """B[q, vdof] = -(q, div b); exact for the Taylor-Hood pair."""
    quad = quadrature(order)
    sc = vspace.scalar
    g = sc.grad_table(quad)
    psi = pspace.basis(quad)                    # (NQ, 3)
    w = quad.weights
    rows, cols, vals = [], [], []
    for cc in range(2):
        elem = -np.einsum("q,qj,tqi->tji", w, psi, g[:, :, :, cc])
        elem *= sc.areas[:, None, None]
        r, c, v = _elem_to_coo(pspace.cell_dofs, sc.cell_dofs + cc * vspace.nsc, elem)
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(v.ravel())
    return _coo(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals),
                (pspace.ndof, vspace.ndof))


def assemble_convection(vspace, b_qp, order=4):
    """Antisymmetrized convection a(b, u, w); N^T = -N by construction."""
    quad = quadrature(order)
    sc = vspace.scalar
    phi = sc.basis(quad)                        # (NQ, 6)
    g = sc.grad_table(quad)                     # (NT, NQ, 6, 2)
    w = quad.weights
    # bgrad[t, q, j] = (b . grad) b_j
    bgrad = np.einsum("tqd,tqjd->tqj", b_qp, g)
    half = np.einsum("q,tqj,qi->tij", w, bgrad, phi)
    elem = 0.5 * (half - np.transpose(half, (0, 2, 1)))
    elem *= sc.areas[:, None, None]
    nsc = vspace.nsc
    rows, cols, vals = [], [], []
    for cc in range(2):
        r, c, v = _elem_to_coo(sc.cell_dofs + cc * nsc, sc.cell_dofs + cc * nsc, elem)
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(v.ravel())
    return _coo(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals),
                (vspace.ndof, vspace.ndof))


def assemble_interfacial_force(vspace, pspace, gradphi_cell, order=4):
    """I[vdof, mudof] = (mu grad(phi_old), w) as a matrix in the mu dofs."""
    quad = quadrature(order)
    sc = vspace.scalar
    phi2 = sc.basis(quad)
    psi = pspace.basis(quad)
    w = quad.weights
    rows, cols, vals = [], [], []
    for cc in range(2):
        elem = np.einsum("q,qi,qj,t->tij", w, phi2, psi, gradphi_cell[:, cc])
        elem *= sc.areas[:, None, None]
        r, c, v = _elem_to_coo(sc.cell_dofs + cc * vspace.nsc, pspace.cell_dofs, elem)
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(v.ravel())
    return _coo(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals),
                (vspace.ndof, pspace.ndof))


def assemble_transport(pspace, vspace, phi_qp, order=4, form="ibp",
                       gradphi_cell=None):
    """Phase transport tested with P1 functions.

    form='ibp':       T[j, vdof] = -(phi_old b, grad Phi_j)   (conservation form)
    form='advective': T[j, vdof] = +((b . grad phi_old), Phi_j)
    """
    quad = quadrature(order)
    sc = vspace.scalar
    phi2 = sc.basis(quad)
    w = quad.weights
    rows, cols, vals = [], [], []
    if form == "ibp":
        for cc in range(2):
            elem = -np.einsum("q,tq,qi,tj->tji", w, phi_qp, phi2,
                              pspace.gradlam[:, :, cc])
            elem *= sc.areas[:, None, None]
            r, c, v = _elem_to_coo(pspace.cell_dofs, sc.cell_dofs + cc * vspace.nsc, elem)
            rows.append(r.ravel())
            cols.append(c.ravel())
            vals.append(v.ravel())
    elif form == "advective":
        if gradphi_cell is None:
            raise ValueError("advective form needs gradphi_cell")
        psi = pspace.basis(quad)
        for cc in range(2):
            elem = np.einsum("q,qj,qi,t->tji", w, psi, phi2, gradphi_cell[:, cc])
            elem *= sc.areas[:, None, None]
            r, c, v = _elem_to_coo(pspace.cell_dofs, sc.cell_dofs + cc * vspace.nsc, elem)
            rows.append(r.ravel())
            cols.append(c.ravel())
            vals.append(v.ravel())
    else:
        raise ValueError(f"unknown transport form {form!r}")
    return _coo(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals),
                (pspace.ndof, vspace.ndof))


def assemble_p1_load(pspace, f_qp, order=4):
    """(f, Phi_j) -> vector."""
    quad = quadrature(order)
    nt, nq = pspace.areas.shape[0], quad.weights.shape[0]
    fq = _weight_qp(f_qp, nt, nq)
    elem = np.einsum("q,tq,qj->tj", quad.weights, fq, quad.points)
    elem *= pspace.areas[:, None]
    out = np.zeros(pspace.ndof)
    np.add.at(out, pspace.cell_dofs.ravel(), elem.ravel())
    return out


def assemble_vector_load(vspace, f_qp, order=4):
    """(f, w) -> vector on the P2 vector space; f_qp is (NT, NQ, 2)."""
    quad = quadrature(order)
    sc = vspace.scalar
    phi2 = sc.basis(quad)
    out = np.zeros(vspace.ndof)
    for cc in range(2):
        elem = np.einsum("q,tq,qi->ti", quad.weights, f_qp[:, :, cc], phi2)
        elem *= sc.areas[:, None]
        np.add.at(out, (sc.cell_dofs + cc * vspace.nsc).ravel(), elem.ravel())
    return out


def integrate(space, values_qp, order=4):
    """Integral of a quadrature-sampled quantity over the mesh."""
    quad = quadrature(order)
    nt, nq = space.areas.shape[0], quad.weights.shape[0]
    vq = _weight_qp(values_qp, nt, nq)
    return float(np.einsum("q,tq,t->", quad.weights, vq, space.areas))


def l2_project_p1(pspace, fn, order=4):
    """Discrete L2 projection of a callable f(x, y) onto P1."""
    from scipy.sparse.linalg import spsolve
    quad = quadrature(order)
    pts = pspace.points_at(quad)
    fq = fn(pts[:, :, 0], pts[:, :, 1])
    rhs = assemble_p1_load(pspace, fq, order)
    m = assemble_mass(pspace, 1.0, order)
    return spsolve(m.tocsc(), rhs)


# ---------------------------------------------------------------------------
# inter-mesh transfer

def transfer_p1(tmap, dofs):
    """Move P1 nodal values across one refine or coarsen step."""
    dofs = np.asarray(dofs, dtype=np.float64)
    if tmap.kind == "refine":
        nnew = tmap.n_old_vertices + tmap.new_vertex_parents.shape[0]
        out = np.empty(nnew)
        out[:tmap.n_old_vertices] = dofs
        pr = tmap.new_vertex_parents
        out[tmap.n_old_vertices:] = 0.5 * (dofs[pr[:, 0]] + dofs[pr[:, 1]])
        return out
    return dofs[tmap.vertex_map >= 0]


def transfer_p2_scalar(tmap, dofs):
    """Move scalar P2 dof values across one refine or coarsen step."""
    dofs = np.asarray(dofs, dtype=np.float64)
    if tmap.kind == "refine":
        n = p2_basis_at(tmap.p2_bary)           # (nsc_new, 6)
        cells = tmap.old_p2_cell_dofs[tmap.p2_parent_tri]
        return np.einsum("pi,pi->p", n, dofs[cells])
    return dofs[tmap.p2_gather]


def transfer_p2_vector(tmap, dofs):
    dofs = np.asarray(dofs, dtype=np.float64)
    if tmap.kind == "refine":
        nsc_old = tmap.n_old_scalar_p2
    else:
        nsc_old = dofs.shape[0] // 2
    vx = transfer_p2_scalar(tmap, dofs[:nsc_old])
    vy = transfer_p2_scalar(tmap, dofs[nsc_old:])
    return np.concatenate([vx, vy])


_TRANSFER = {"p1": transfer_p1, "p2": transfer_p2_scalar, "p2vec": transfer_p2_vector}


def interpolate(field, kind, source_mesh, target_mesh):
    """Lagrange interpolation of a discrete field onto a related mesh.

    ``target_mesh`` must equal ``source_mesh`` or be derived from it by a
    short chain of refine/coarsen calls (one adaptation cycle).
    """
    if kind not in _TRANSFER:
        raise ValueError(f"unknown field kind {kind!r}")
    if target_mesh.uid == source_mesh.uid:
        return np.array(field, dtype=np.float64)
    maps = []
    for uid, tmap in target_mesh.lineage:
        maps.append(tmap)
        if uid == source_mesh.uid:
            out = np.asarray(field, dtype=np.float64)
            op = _TRANSFER[kind]
            for m in reversed(maps):
                out = op(m, out)
            return out
    raise MeshError("interpolate: meshes are not related by a recent adaptation")
