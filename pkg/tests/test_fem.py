import numpy as np
import pytest
import sympy as sym

from chns.mesh import TriMesh, coarsen, find_nodestars, rect_mesh, refine
from chns.fem import (
    BoundarySpec,
    P1Space,
    P2Scalar,
    P2Vector,
    assemble_convection,
    assemble_divergence,
    assemble_interfacial_force,
    assemble_mass,
    assemble_stiffness,
    assemble_transport,
    assemble_vector_load,
    assemble_viscous,
    integrate,
    interpolate,
    l2_project_p1,
    quadrature,
)


def reference_triangle():
    return TriMesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
                   np.array([[0, 1, 2]]), domain=(0, 1, 0, 1))


# -- quadrature ---------------------------------------------------------------

def exact_monomial(a, b):
    x, y = sym.symbols("x y")
    return float(sym.integrate(sym.integrate(x**a * y**b, (y, 0, 1 - x)), (x, 0, 1)))


@pytest.mark.parametrize("order", [1, 2, 3, 4, 5, 6])
def test_quadrature_weights_sum_to_one(order):
    q = quadrature(order)
    assert np.isclose(q.weights.sum(), 1.0, atol=1e-14)


@pytest.mark.parametrize("order", [1, 2, 3, 4, 5, 6])
def test_quadrature_exactness(order):
    # physical integral over the reference triangle is 0.5 * sum(w f)
    q = quadrature(order)
    x = q.points[:, 1]
    y = q.points[:, 2]
    for a in range(order + 1):
        for b in range(order + 1 - a):
            approx = 0.5 * np.sum(q.weights * x**a * y**b)
            assert np.isclose(approx, exact_monomial(a, b), atol=1e-14), (a, b)


def test_quadrature_order4_x2y2():
    q = quadrature(4)
    x, y = q.points[:, 1], q.points[:, 2]
    assert np.isclose(0.5 * np.sum(q.weights * x**2 * y**2), 1.0 / 180.0)


def test_quadrature_bad_order():
    with pytest.raises(ValueError):
        quadrature(9)


# -- element matrices ---------------------------------------------------------

def test_p1_mass_element():
    m = reference_triangle()
    sp1 = P1Space(m)
    mass = assemble_mass(sp1, 1.0).toarray()
    area = 0.5
    expect = area / 12.0 * np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]], dtype=float)
    assert np.allclose(mass, expect)


def test_mass_partition_of_unity_and_zero_weight():
    m = rect_mesh(3, 3)
    sp1 = P1Space(m)
    mass = assemble_mass(sp1, 1.0)
    assert np.isclose(mass.sum(), 1.0)
    assert assemble_mass(sp1, 0.0).nnz == 0 or np.allclose(assemble_mass(sp1, 0.0).toarray(), 0)


def test_p1_stiffness_element():
    m = reference_triangle()
    k = assemble_stiffness(P1Space(m), 1.0).toarray()
    expect = 0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]], dtype=float)
    assert np.allclose(k, expect)


def test_stiffness_kernel_and_linearity():
    m = rect_mesh(3, 2)
    sp1 = P1Space(m)
    k1 = assemble_stiffness(sp1, 1.0)
    assert np.allclose(k1 @ np.ones(sp1.ndof), 0.0, atol=1e-14)
    k2 = assemble_stiffness(sp1, 2.0)
    assert np.allclose(k2.toarray(), 2 * k1.toarray())


def interpolate_p2_field(vspace, fx, fy):
    from chns.mesh import p2_dof_points
    pts = p2_dof_points(vspace.mesh)
    return np.concatenate([fx(pts[:, 0], pts[:, 1]), fy(pts[:, 0], pts[:, 1])])


def test_viscous_translation_kernel_and_scaling():
    m = rect_mesh(2, 2)
    vs = P2Vector(m, BoundarySpec("free", "free", "free", "free"))
    a1 = assemble_viscous(vs, 1.0)
    trans = interpolate_p2_field(vs, lambda x, y: np.ones_like(x),
                                 lambda x, y: np.full_like(x, -2.0))
    assert np.allclose(a1 @ trans, 0.0, atol=1e-13)
    a2 = assemble_viscous(vs, 2.0)
    assert np.allclose(a2.toarray(), 2 * a1.toarray())


def test_viscous_korn_value():
    # v = (y, 0): D(v) has |D|^2 = 1/2, so int 2 eta |Dv|^2 = 1/2 for eta = 1/2;
    # verified against the symbolic integral
    x, y = sym.symbols("x y")
    dv = sym.Matrix([[0, sym.Rational(1, 2)], [sym.Rational(1, 2), 0]])
    val = float(2 * sym.Rational(1, 2) * sum(dv[i, j] ** 2 for i in range(2) for j in range(2)))
    m = rect_mesh(2, 2)
    vs = P2Vector(m, BoundarySpec("free", "free", "free", "free"))
    a = assemble_viscous(vs, 0.5)
    v = interpolate_p2_field(vs, lambda px, py: py, lambda px, py: np.zeros_like(px))
    assert np.isclose(v @ (a @ v), val)
    assert np.isclose(val, 0.5)


def test_symmetry_of_symmetric_forms():
    m = rect_mesh(3, 3, pattern="crossed")
    sp1 = P1Space(m)
    vs = P2Vector(m)
    rng = np.random.default_rng(0)
    wq = rng.uniform(0.5, 2.0, (m.num_triangles, quadrature(4).weights.size))
    for mat in (assemble_mass(sp1, wq), assemble_stiffness(sp1, wq),
                assemble_viscous(vs, wq)):
        d = mat - mat.T
        denom = np.abs(mat.toarray()).max()
        assert np.abs(d.toarray()).max() <= 1e-13 * denom


def test_divergence_free_field_in_kernel():
    m = rect_mesh(3, 3)
    vs = P2Vector(m, BoundarySpec("free", "free", "free", "free"))
    sp1 = P1Space(m)
    b = assemble_divergence(vs, sp1)
    v = interpolate_p2_field(vs, lambda x, y: y, lambda x, y: -x)
    assert np.allclose(b @ v, 0.0, atol=1e-14)
    assert np.allclose(b @ np.zeros(vs.ndof), 0.0)


def test_divergence_row_values():
    # v = (x, 0): -(q, div v) = -int q
    m = rect_mesh(2, 2)
    vs = P2Vector(m, BoundarySpec("free", "free", "free", "free"))
    sp1 = P1Space(m)
    b = assemble_divergence(vs, sp1)
    v = interpolate_p2_field(vs, lambda x, y: x, lambda x, y: np.zeros_like(x))
    mass = assemble_mass(sp1, 1.0)
    assert np.allclose(b @ v, -(mass @ np.ones(sp1.ndof)), atol=1e-14)


def test_convection_antisymmetric_random():
    m = rect_mesh(3, 2, pattern="crossed")
    vs = P2Vector(m)
    rng = np.random.default_rng(1)
    nq = quadrature(4).weights.size
    b_qp = rng.normal(size=(m.num_triangles, nq, 2))
    n = assemble_convection(vs, b_qp)
    nmax = np.abs(n.toarray()).max()
    assert np.abs((n + n.T).toarray()).max() <= 1e-12 * nmax
    x = rng.normal(size=vs.ndof)
    assert abs(x @ (n @ x)) <= 1e-12 * nmax * (x @ x)
    zero = assemble_convection(vs, np.zeros_like(b_qp))
    assert np.allclose(zero.toarray(), 0.0)


def test_convection_single_element_oracle():
    # constant b = (1, 0) on the reference triangle: the x-x block must equal
    # the symbolic 0.5 * int(dx(pj) pi - dx(pi) pj)
    x, y = sym.symbols("x y")
    l0, l1, l2 = 1 - x - y, x, y
    basis = [l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
             4 * l1 * l2, 4 * l0 * l2, 4 * l0 * l1]
    expect = np.zeros((6, 6))
    for i in range(6):
        for j in range(6):
            integrand = sym.Rational(1, 2) * (sym.diff(basis[j], x) * basis[i]
                                              - sym.diff(basis[i], x) * basis[j])
            expect[i, j] = float(sym.integrate(sym.integrate(integrand, (y, 0, 1 - x)),
                                               (x, 0, 1)))
    m = reference_triangle()
    vs = P2Vector(m, BoundarySpec("free", "free", "free", "free"))
    nq = quadrature(4).weights.size
    b_qp = np.zeros((1, nq, 2))
    b_qp[..., 0] = 1.0
    n = assemble_convection(vs, b_qp).toarray()
    # reindex the symbolic local matrix to the global dof numbering
    perm = vs.scalar.cell_dofs[0]
    expect_g = np.zeros((6, 6))
    expect_g[np.ix_(perm, perm)] = expect
    assert np.allclose(n[:6, :6], expect_g, atol=1e-14)
    assert np.allclose(n[6:, 6:], expect_g, atol=1e-14)
    assert np.allclose(n[:6, 6:], 0.0)


def test_interfacial_force_zero_for_constant_phi():
    m = rect_mesh(2, 2)
    vs = P2Vector(m)
    sp1 = P1Space(m)
    gradphi = sp1.grad_cell(np.full(sp1.ndof, 0.3))
    i = assemble_interfacial_force(vs, sp1, gradphi)
    assert np.allclose(i.toarray(), 0.0)


def test_interfacial_force_linear_phi():
    # phi = x, mu = 1: force density (1, 0)
    m = rect_mesh(2, 2)
    vs = P2Vector(m, BoundarySpec("free", "free", "free", "free"))
    sp1 = P1Space(m)
    phi = m.vertices[:, 0]
    imat = assemble_interfacial_force(vs, sp1, sp1.grad_cell(phi))
    nq = quadrature(4).weights.size
    f_qp = np.zeros((m.num_triangles, nq, 2))
    f_qp[..., 0] = 1.0
    expect = assemble_vector_load(vs, f_qp)
    assert np.allclose(imat @ np.ones(sp1.ndof), expect, atol=1e-14)
    # linear scaling in grad(phi)
    imat2 = assemble_interfacial_force(vs, sp1, sp1.grad_cell(2 * phi))
    assert np.allclose(imat2.toarray(), 2 * imat.toarray())


def test_transport_row_sums_and_zero_phi():
    m = rect_mesh(3, 2)
    vs = P2Vector(m)
    sp1 = P1Space(m)
    nq = quadrature(4).weights.size
    rng = np.random.default_rng(2)
    phi_qp = rng.normal(size=(m.num_triangles, nq))
    t = assemble_transport(sp1, vs, phi_qp)
    # sum over P1 test functions of the rows vanishes (partition of unity)
    assert np.allclose(np.asarray(t.sum(axis=0)), 0.0, atol=1e-13)
    t0 = assemble_transport(sp1, vs, np.zeros_like(phi_qp))
    assert np.allclose(t0.toarray(), 0.0)


def test_transport_uniform_phi_matches_divergence():
    # for phi = 1 and v with v.n = 0 on the boundary:
    # -(v, grad Phi) = (div v, Phi) = -(B v)_Phi
    m = rect_mesh(3, 3)
    vs = P2Vector(m, BoundarySpec("free", "free", "free", "free"))
    sp1 = P1Space(m)
    nq = quadrature(4).weights.size
    t = assemble_transport(sp1, vs, np.ones((m.num_triangles, nq)))
    b = assemble_divergence(vs, sp1)
    v = interpolate_p2_field(vs, lambda x, y: x * (1 - x), lambda x, y: y * (1 - y))
    assert np.allclose(t @ v, -(b @ v), atol=1e-13)


def test_transport_advective_form():
    m = rect_mesh(2, 2)
    vs = P2Vector(m, BoundarySpec("free", "free", "free", "free"))
    sp1 = P1Space(m)
    phi = m.vertices[:, 0]  # grad phi = (1, 0)
    nq = quadrature(4).weights.size
    t = assemble_transport(sp1, vs, None, form="advective",
                           gradphi_cell=sp1.grad_cell(phi))
    v = interpolate_p2_field(vs, lambda x, y: np.ones_like(x),
                             lambda x, y: np.zeros_like(x))
    # (1 . grad phi, Phi_j) = int Phi_j
    mass = assemble_mass(sp1, 1.0)
    assert np.allclose(t @ v, mass @ np.ones(sp1.ndof), atol=1e-14)


# -- boundary conditions -------------------------------------------------------

def test_boundary_masks():
    m = rect_mesh(2, 4, domain=(0, 1, 0, 2))
    vs = P2Vector(m, BoundarySpec(left="slip", right="slip",
                                  bottom="noslip", top="noslip"))
    from chns.mesh import p2_dof_points
    pts = p2_dof_points(m)
    cx = vs.constrained[:vs.nsc]
    cy = vs.constrained[vs.nsc:]
    on_lr = np.isclose(pts[:, 0], 0) | np.isclose(pts[:, 0], 1)
    on_tb = np.isclose(pts[:, 1], 0) | np.isclose(pts[:, 1], 2)
    assert np.array_equal(cx, on_lr | on_tb)
    assert np.array_equal(cy, on_tb)


# -- projection / integration ---------------------------------------------------

def test_l2_projection_reproduces_linears():
    m = rect_mesh(3, 3)
    sp1 = P1Space(m)
    proj = l2_project_p1(sp1, lambda x, y: 2 * x - y + 0.5)
    expect = 2 * m.vertices[:, 0] - m.vertices[:, 1] + 0.5
    assert np.allclose(proj, expect, atol=1e-12)


def test_integrate():
    m = rect_mesh(4, 4)
    sp1 = P1Space(m)
    q = quadrature(4)
    pts = sp1.points_at(q)
    val = integrate(sp1, pts[:, :, 0], order=4)  # int x over unit square
    assert np.isclose(val, 0.5)


# -- transfer -------------------------------------------------------------------

def test_interpolate_identity():
    m = rect_mesh(2, 2)
    f = np.arange(m.num_vertices, dtype=float)
    out = interpolate(f, "p1", m, m)
    assert np.array_equal(out, f)


def test_interpolate_refine_exact_p1():
    m = rect_mesh(2, 2, pattern="crossed")
    f = 3.0 * m.vertices[:, 0] - m.vertices[:, 1]
    r, _ = refine(m, {0, 3, 7})
    out = interpolate(f, "p1", m, r)
    expect = 3.0 * r.vertices[:, 0] - r.vertices[:, 1]
    assert np.allclose(out, expect, atol=1e-14)
    assert np.allclose(out[:m.num_vertices], f)


def test_interpolate_refine_exact_p2():
    from chns.mesh import p2_dof_points
    m = rect_mesh(2, 2)
    fn = lambda x, y: x**2 - 2 * x * y + 0.5 * y**2 + x - 3
    pts = p2_dof_points(m)
    f = fn(pts[:, 0], pts[:, 1])
    r, _ = refine(m, {1, 4})
    out = interpolate(f, "p2", m, r)
    pts_r = p2_dof_points(r)
    assert np.allclose(out, fn(pts_r[:, 0], pts_r[:, 1]), atol=1e-13)


def test_interpolate_vector_roundtrip_refine_coarsen():
    from chns.mesh import p2_dof_points
    m = rect_mesh(2, 2, pattern="crossed")
    pts = p2_dof_points(m)
    f = np.concatenate([pts[:, 0] ** 2, pts[:, 1] ** 2 - pts[:, 0]])
    r, _ = refine(m, {0, 5})
    c, _ = coarsen(r, find_nodestars(r))
    out = interpolate(f, "p2vec", m, c)
    pts_c = p2_dof_points(c)
    expect = np.concatenate([pts_c[:, 0] ** 2, pts_c[:, 1] ** 2 - pts_c[:, 0]])
    assert np.allclose(out, expect, atol=1e-13)


def test_interpolate_coarsen_changes_only_patches():
    rng = np.random.default_rng(5)
    m = rect_mesh(2, 2, pattern="crossed")
    r, _ = refine(m, set(range(m.num_triangles)))
    f = rng.normal(size=r.num_vertices)
    stars = find_nodestars(r)
    c, cmap = coarsen(r, stars[:2])
    out = interpolate(f, "p1", r, c)
    kept = cmap.vertex_map >= 0
    assert np.array_equal(out, f[kept])


def test_interpolate_unrelated_meshes_raises():
    m1 = rect_mesh(2, 2)
    m2 = rect_mesh(3, 3)
    from chns.mesh import MeshError
    with pytest.raises(MeshError):
        interpolate(np.zeros(m1.num_vertices), "p1", m1, m2)
