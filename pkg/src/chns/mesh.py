"""Conforming triangle meshes with newest-vertex bisection and nodeStar coarsening.

Triangles are stored as vertex triples ``[peak, a, b]`` where ``peak`` is the
newest vertex and ``(a, b)`` is the refinement edge (the edge opposite the
peak).  Bisection of ``[p, a, b]`` at the midpoint ``z`` of ``(a, b)``
produces the children ``[z, p, a]`` and ``[z, b, p]``; the peak of a child is
always the vertex created by the bisection.  Coarsening undoes exactly this
operation on nodeStar patches (4 triangles around an interior bisection
vertex, 2 around a boundary one).

Meshes are immutable after construction; ``refine``/``coarsen`` return new
meshes together with transfer maps that the FE layer uses to move fields
between meshes.
"""

import itertools

import numpy as np

__all__ = [
    "MeshError",
    "TriMesh",
    "NodeStar",
    "RefineMap",
    "CoarsenMap",
    "rect_mesh",
    "make_peak_first",
    "find_nodestars",
    "refine",
    "refine_uniform",
    "coarsen",
    "write_vtk",
]

_uid_counter = itertools.count(1)

# boundary edge markers
INTERIOR, LEFT, RIGHT, BOTTOM, TOP, OTHER_BND = 0, 1, 2, 3, 4, 5


class MeshError(ValueError):
    """Raised for invalid mesh operations (stale stars, bad ids, broken topology)."""


class NodeStar:
    """A coarsenable patch around a bisection-created vertex.

    ``tris`` has 4 triangle ids for an interior center, 2 for a boundary one.
    ``parent_edge`` is the edge (a, b) whose bisection created the center;
    ``parents`` are the merged triangle vertex triples coarsening produces.
    """

    __slots__ = ("center", "tris", "parent_edge", "parents")

    def __init__(self, center, tris, parent_edge, parents=()):
        self.center = int(center)
        self.tris = tuple(int(t) for t in tris)
        self.parent_edge = (int(parent_edge[0]), int(parent_edge[1]))
        self.parents = tuple(tuple(int(v) for v in p) for p in parents)

    @property
    def interior(self):
        return len(self.tris) == 4

    def __repr__(self):
        return f"NodeStar(center={self.center}, tris={self.tris})"


class RefineMap:
    """Transfer operator data from a refine call: old mesh -> refined mesh.

    Old vertices keep their indices; new vertices are edge midpoints.  The
    map is self-contained: the P1 transfer uses ``new_vertex_parents`` and the
    P2 transfer the precomputed (parent triangle, barycentric) tables, so no
    reference to either mesh has to be kept alive.
    """

    __slots__ = ("n_old_vertices", "edge_midpoint", "tri_parent", "kind",
                 "new_vertex_parents", "p2_parent_tri", "p2_bary",
                 "old_p2_cell_dofs", "n_old_scalar_p2")

    def __init__(self, n_old_vertices, edge_midpoint, tri_parent):
        self.kind = "refine"
        self.n_old_vertices = n_old_vertices
        self.edge_midpoint = edge_midpoint  # (NE_old,) new vertex id or -1
        self.tri_parent = tri_parent        # (NT_new,) old triangle id
        self.new_vertex_parents = None      # (NP_new - NP_old, 2) old vertex ids
        self.p2_parent_tri = None           # (nsc_new,) old triangle per P2 dof point
        self.p2_bary = None                 # (nsc_new, 3) barycentric coords there
        self.old_p2_cell_dofs = None        # (NT_old, 6)
        self.n_old_scalar_p2 = None


class CoarsenMap:
    """Transfer operator data from a coarsen call: old mesh -> coarsened mesh."""

    __slots__ = ("vertex_map", "removed_center_edge", "tri_map", "kind",
                 "p2_gather")

    def __init__(self, vertex_map, removed_center_edge, tri_map):
        self.kind = "coarsen"
        self.vertex_map = vertex_map  # (NP_old,) new id or -1 for removed
        # maps sorted old parent edge (a, b) -> removed center vertex (old id)
        self.removed_center_edge = removed_center_edge
        self.tri_map = tri_map        # (NT_old,) new id or -1 for star members
        self.p2_gather = None         # (nsc_new,) old scalar P2 dof per new one


def p2_cell_dofs(mesh):
    """Scalar P2 dof map: vertex dofs first, then one dof per edge midpoint.

    Local order: [v0, v1, v2, m(e0), m(e1), m(e2)] with edge i opposite
    local vertex i.
    """
    return np.hstack([mesh.triangles, mesh.num_vertices + mesh.tri_edges])


def p2_dof_points(mesh):
    """Coordinates of the scalar P2 dof points (vertices, then edge midpoints)."""
    mids = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
    return np.vstack([mesh.vertices, mids])


def p2_basis_at(bary):
    """Quadratic Lagrange basis values at barycentric points (n, 3) -> (n, 6)."""
    l0, l1, l2 = bary[:, 0], bary[:, 1], bary[:, 2]
    return np.column_stack([
        l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
        4 * l1 * l2, 4 * l0 * l2, 4 * l0 * l1,
    ])


def _complete_refine_map(rmap, old, new):
    rmap.new_vertex_parents = new.vertex_parents[rmap.n_old_vertices:].copy()
    pts = p2_dof_points(new)
    nsc = pts.shape[0]
    # any new triangle containing the dof point works; scatter last-wins
    point_tri = np.zeros(nsc, dtype=np.int64)
    cd_new = p2_cell_dofs(new)
    tri_ids = np.arange(new.num_triangles, dtype=np.int64)
    for local in range(6):
        point_tri[cd_new[:, local]] = tri_ids
    parent = rmap.tri_parent[point_tri]
    p0 = old.vertices[old.triangles[parent, 0]]
    d1 = old.vertices[old.triangles[parent, 1]] - p0
    d2 = old.vertices[old.triangles[parent, 2]] - p0
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    rhs = pts - p0
    l1 = (rhs[:, 0] * d2[:, 1] - rhs[:, 1] * d2[:, 0]) / det
    l2 = (d1[:, 0] * rhs[:, 1] - d1[:, 1] * rhs[:, 0]) / det
    rmap.p2_parent_tri = parent
    rmap.p2_bary = np.column_stack([1.0 - l1 - l2, l1, l2])
    rmap.old_p2_cell_dofs = p2_cell_dofs(old)
    rmap.n_old_scalar_p2 = old.num_vertices + old.num_edges


def _complete_coarsen_map(cmap, old, new):
    old_of_new = np.nonzero(cmap.vertex_map >= 0)[0]
    np_old, ne_old = old.num_vertices, old.num_edges
    old_edge_id = {(int(a), int(b)): i for i, (a, b) in enumerate(old.edges)}
    gather = np.empty(new.num_vertices + new.num_edges, dtype=np.int64)
    gather[:new.num_vertices] = old_of_new
    for i, (na, nb) in enumerate(new.edges):
        oa, ob = int(old_of_new[na]), int(old_of_new[nb])
        key = (oa, ob) if oa < ob else (ob, oa)
        eid = old_edge_id.get(key)
        if eid is not None:
            gather[new.num_vertices + i] = np_old + eid
        else:
            # restored parent edge: its midpoint is the removed center vertex
            gather[new.num_vertices + i] = cmap.removed_center_edge[key]
    cmap.p2_gather = gather


class TriMesh:
    """Conforming triangulation with bisection hierarchy and edge topology."""

    def __init__(self, vertices, triangles, domain=None, generation=None,
                 vertex_parents=None, lineage=None, check=True):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise MeshError("vertices must be (NP, 2)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise MeshError("triangles must be (NT, 3)")
        self.domain = tuple(domain) if domain is not None else None
        np_, nt = self.vertices.shape[0], self.triangles.shape[0]
        if generation is None:
            generation = np.zeros(nt, dtype=np.int64)
        self.generation = np.asarray(generation, dtype=np.int64)
        if vertex_parents is None:
            vertex_parents = -np.ones((np_, 2), dtype=np.int64)
        self.vertex_parents = np.asarray(vertex_parents, dtype=np.int64)
        self.uid = next(_uid_counter)
        # [(ancestor_uid, transfer_map), ...] newest first; holds maps only,
        # never mesh objects, so long runs do not keep every mesh alive
        self.lineage = list(lineage) if lineage else []
        self._build_edges()
        if check:
            self.check()

    # -- topology ----------------------------------------------------------

    def _build_edges(self):
        t = self.triangles
        # local edge i is opposite local vertex i
        raw = np.concatenate([t[:, [1, 2]], t[:, [0, 2]], t[:, [0, 1]]], axis=0)
        raw.sort(axis=1)
        self.edges, inv = np.unique(raw, axis=0, return_inverse=True)
        nt = t.shape[0]
        self.tri_edges = np.column_stack([inv[:nt], inv[nt:2 * nt], inv[2 * nt:]])
        ne = self.edges.shape[0]
        counts = np.bincount(self.tri_edges.ravel(), minlength=ne)
        if counts.max(initial=0) > 2:
            raise MeshError("non-manifold edge (more than 2 adjacent triangles)")
        # adjacency with the lower triangle id first (fixes the jump normal)
        edge_tris = -np.ones((ne, 2), dtype=np.int64)
        order = np.argsort(self.tri_edges.ravel(), kind="stable")
        tri_of_entry = np.repeat(np.arange(nt), 3)[order]
        edge_sorted = self.tri_edges.ravel()[order]
        first = np.searchsorted(edge_sorted, np.arange(ne), side="left")
        edge_tris[:, 0] = tri_of_entry[first]
        two = counts == 2
        edge_tris[two, 1] = tri_of_entry[first[two] + 1]
        both = two & (edge_tris[:, 0] > edge_tris[:, 1])
        edge_tris[both] = edge_tris[both][:, ::-1]
        self.edge_tris = edge_tris
        self.boundary_edge = counts == 1
        self.boundary_flags = self._classify_boundary()
        bvert = np.zeros(self.vertices.shape[0], dtype=bool)
        bvert[self.edges[self.boundary_edge].ravel()] = True
        self.is_boundary_vertex = bvert

    def _classify_boundary(self):
        flags = np.zeros(self.edges.shape[0], dtype=np.int8)
        bidx = np.nonzero(self.boundary_edge)[0]
        if bidx.size == 0:
            return flags
        if self.domain is None:
            flags[bidx] = OTHER_BND
            return flags
        x0, x1, y0, y1 = self.domain
        pa = self.vertices[self.edges[bidx, 0]]
        pb = self.vertices[self.edges[bidx, 1]]
        tol = 1e-12 * max(x1 - x0, y1 - y0)
        for marker, coord, val in ((LEFT, 0, x0), (RIGHT, 0, x1),
                                   (BOTTOM, 1, y0), (TOP, 1, y1)):
            on = (np.abs(pa[:, coord] - val) <= tol) & (np.abs(pb[:, coord] - val) <= tol)
            flags[bidx[on]] = marker
        flags[bidx[flags[bidx] == 0]] = OTHER_BND
        return flags

    # -- queries -----------------------------------------------------------

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_triangles(self):
        return self.triangles.shape[0]

    @property
    def num_edges(self):
        return self.edges.shape[0]

    def signed_areas(self):
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def areas(self):
        return self.signed_areas()

    def diameters(self):
        """Longest edge per triangle (the h_T metric of the estimator)."""
        p = self.vertices[self.triangles]
        e0 = np.linalg.norm(p[:, 1] - p[:, 2], axis=1)
        e1 = np.linalg.norm(p[:, 0] - p[:, 2], axis=1)
        e2 = np.linalg.norm(p[:, 0] - p[:, 1], axis=1)
        return np.maximum(e0, np.maximum(e1, e2))

    def edge_lengths(self):
        d = self.vertices[self.edges[:, 0]] - self.vertices[self.edges[:, 1]]
        return np.linalg.norm(d, axis=1)

    def check(self):
        """Raise MeshError if conformity or orientation is broken."""
        areas = self.signed_areas()
        if areas.size and areas.min() <= 0.0:
            raise MeshError(f"non-positive triangle area (min {areas.min():.3e})")
        counts = np.bincount(self.tri_edges.ravel(), minlength=self.num_edges)
        if np.any((counts < 1) | (counts > 2)):
            raise MeshError("edge adjacency broken: conformity violated")
        used = np.zeros(self.num_vertices, dtype=bool)
        used[self.triangles.ravel()] = True
        if not used.all():
            raise MeshError("mesh contains vertices not used by any triangle")

    def vertex_tri_incidence(self):
        """Lists of incident triangle ids per vertex."""
        t = self.triangles
        order = np.argsort(t.ravel(), kind="stable")
        tri_of_entry = np.repeat(np.arange(t.shape[0]), 3)[order]
        verts_sorted = t.ravel()[order]
        starts = np.searchsorted(verts_sorted, np.arange(self.num_vertices + 1))
        return [tri_of_entry[starts[v]:starts[v + 1]] for v in range(self.num_vertices)]


def rect_mesh(nx, ny, domain=(0.0, 1.0, 0.0, 1.0), pattern="crossed"):
    """Structured triangulation of a rectangle.

    ``crossed`` splits each cell into 4 triangles around the cell center
    (every triangle right-isosceles, refinement edge = outer cell edge);
    ``right`` splits each cell along one diagonal.
    """
    x0, x1, y0, y1 = domain
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    grid = np.column_stack([gx.ravel(), gy.ravel()])

    def gid(i, j):
        return i * (ny + 1) + j

    if pattern == "crossed":
        cx, cy = np.meshgrid(0.5 * (xs[:-1] + xs[1:]), 0.5 * (ys[:-1] + ys[1:]),
                             indexing="ij")
        centers = np.column_stack([cx.ravel(), cy.ravel()])
        vertices = np.vstack([grid, centers])
        ncid = grid.shape[0]
        tris = []
        for i in range(nx):
            for j in range(ny):
                a = gid(i, j)
                b = gid(i + 1, j)
                c = gid(i + 1, j + 1)
                d = gid(i, j + 1)
                m = ncid + i * ny + j
                tris += [[m, a, b], [m, b, c], [m, c, d], [m, d, a]]
    elif pattern == "right":
        vertices = grid
        tris = []
        for i in range(nx):
            for j in range(ny):
                a = gid(i, j)
                b = gid(i + 1, j)
                c = gid(i + 1, j + 1)
                d = gid(i, j + 1)
                tris += [[b, c, a], [d, a, c]]
    else:
        raise MeshError(f"unknown mesh pattern {pattern!r}")
    return TriMesh(vertices, np.asarray(tris, dtype=np.int64), domain=domain)


def make_peak_first(vertices, triangles):
    """Cyclically reorder CCW triangles so the vertex opposite the longest edge
    comes first (the standard newest-vertex-bisection bootstrap)."""
    tris = np.asarray(triangles, dtype=np.int64).copy()
    p = np.asarray(vertices, dtype=np.float64)[tris]
    e0 = np.linalg.norm(p[:, 1] - p[:, 2], axis=1)
    e1 = np.linalg.norm(p[:, 0] - p[:, 2], axis=1)
    e2 = np.linalg.norm(p[:, 0] - p[:, 1], axis=1)
    longest = np.argmax(np.column_stack([e0, e1, e2]), axis=1)
    out = tris.copy()
    out[longest == 1] = tris[longest == 1][:, [1, 2, 0]]
    out[longest == 2] = tris[longest == 2][:, [2, 0, 1]]
    return out


# -- refinement -------------------------------------------------------------

def refine(mesh, marked):
    """Bisect the marked triangles (with conformity closure).

    Returns ``(new_mesh, RefineMap)``.  Vertices of the input mesh keep their
    indices; midpoints of cut edges are appended.
    """
    marked_list = list(marked)
    marked = (np.unique(np.asarray(marked_list, dtype=np.int64))
              if marked_list else np.empty(0, dtype=np.int64))
    if marked.size == 0:
        rmap = RefineMap(mesh.num_vertices,
                         -np.ones(mesh.num_edges, dtype=np.int64),
                         np.arange(mesh.num_triangles, dtype=np.int64))
        new = TriMesh(mesh.vertices, mesh.triangles, domain=mesh.domain,
                      generation=mesh.generation, vertex_parents=mesh.vertex_parents,
                      lineage=[(mesh.uid, rmap)] + mesh.lineage[:3], check=False)
        _complete_refine_map(rmap, mesh, new)
        return new, rmap
    if marked.min() < 0 or marked.max() >= mesh.num_triangles:
        raise MeshError("refine: marked set contains unknown triangle ids")

    ne = mesh.num_edges
    cut = np.zeros(ne, dtype=bool)
    cut[mesh.tri_edges[marked, 0]] = True
    # closure: a triangle with any cut edge must have its refinement edge cut
    while True:
        has_cut = cut[mesh.tri_edges].any(axis=1)
        need = has_cut & ~cut[mesh.tri_edges[:, 0]]
        if not need.any():
            break
        cut[mesh.tri_edges[need, 0]] = True

    cut_ids = np.nonzero(cut)[0]
    npold = mesh.num_vertices
    mid_of_edge = -np.ones(ne, dtype=np.int64)
    mid_of_edge[cut_ids] = npold + np.arange(cut_ids.size)
    midpoints = 0.5 * (mesh.vertices[mesh.edges[cut_ids, 0]]
                       + mesh.vertices[mesh.edges[cut_ids, 1]])
    vertices = np.vstack([mesh.vertices, midpoints])
    vparents = np.vstack([mesh.vertex_parents, mesh.edges[cut_ids]])

    # old-edge id lookup for (sorted) vertex pairs; -1 for new half-edges,
    # which can never be cut
    edge_key = {(int(a), int(b)): i for i, (a, b) in enumerate(mesh.edges)}

    def edge_lookup(u, v):
        uu = np.minimum(u, v)
        vv = np.maximum(u, v)
        return np.fromiter((edge_key.get((int(a), int(b)), -1) for a, b in zip(uu, vv)),
                           dtype=np.int64, count=len(uu))

    def is_cut(ref_edge_ids):
        return np.where(ref_edge_ids >= 0, cut[np.clip(ref_edge_ids, 0, None)], False)

    def bisect_pass(tris, gens, parents, ref_edge_ids):
        """Split every triangle whose current refinement edge is cut."""
        split = is_cut(ref_edge_ids)
        keep = ~split
        t = tris[split]
        g = gens[split]
        par = parents[split]
        z = mid_of_edge[ref_edge_ids[split]]
        c1 = np.column_stack([z, t[:, 0], t[:, 1]])
        c2 = np.column_stack([z, t[:, 2], t[:, 0]])
        # children's refinement edges are the parent's other two edges
        e_c1 = edge_lookup(t[:, 0], t[:, 1])
        e_c2 = edge_lookup(t[:, 2], t[:, 0])
        out_t = np.vstack([tris[keep], c1, c2])
        out_g = np.concatenate([gens[keep], g + 1, g + 1])
        out_p = np.concatenate([parents[keep], par, par])
        out_e = np.concatenate([ref_edge_ids[keep], e_c1, e_c2])
        return out_t, out_g, out_p, out_e, split.any()

    tris = mesh.triangles
    gens = mesh.generation
    parents = np.arange(mesh.num_triangles, dtype=np.int64)
    refids = mesh.tri_edges[:, 0].copy()
    # two passes resolve all hanging nodes: children's refinement edges are old
    # edges, grandchildren's are new half-edges which are never cut
    for _ in range(2):
        tris, gens, parents, refids, did = bisect_pass(tris, gens, parents, refids)
        if not did:
            break
    if is_cut(refids).any():
        raise MeshError("refine: closure failed to terminate")

    rmap = RefineMap(npold, mid_of_edge, parents)
    new = TriMesh(vertices, tris, domain=mesh.domain, generation=gens,
                  vertex_parents=vparents,
                  lineage=[(mesh.uid, rmap)] + mesh.lineage[:3])
    _complete_refine_map(rmap, mesh, new)
    return new, rmap


def refine_uniform(mesh, levels=1):
    """Halve h: two sweeps of bisect-everything per level."""
    out = mesh
    for _ in range(2 * levels):
        out, _ = refine(out, np.arange(out.num_triangles))
    return out


# -- coarsening -------------------------------------------------------------

def _star_structure(mesh, z, star_tris):
    """Validate a candidate star and return (parent_edge, merged triangles).

    Returns None if the patch around ``z`` is not coarsenable.
    """
    a, b = mesh.vertex_parents[z]
    if a < 0:
        return None
    t = mesh.triangles[star_tris]
    if not np.all(t[:, 0] == z):
        return None
    spokes = set(t[:, 1]).union(t[:, 2]) - {z}
    if a not in spokes or b not in spokes:
        return None
    flank = spokes - {a, b}
    boundary = mesh.is_boundary_vertex[z]
    if boundary:
        if len(star_tris) != 2 or len(flank) != 1:
            return None
    else:
        if len(star_tris) != 4 or len(flank) != 2:
            return None
    merged = []
    for p in sorted(int(f) for f in flank):
        # children of parent [p, x, y] are [z, p, x] and [z, y, p]
        c1 = [tt for tt in t if tt[1] == p]
        c2 = [tt for tt in t if tt[2] == p]
        if len(c1) != 1 or len(c2) != 1:
            return None
        merged.append((p, int(c1[0][2]), int(c2[0][1])))
    return (int(a), int(b)), merged


def find_nodestars(mesh):
    """All maximal coarsenable patches, sorted by center vertex id."""
    incidence = mesh.vertex_tri_incidence()
    stars = []
    created = np.nonzero(mesh.vertex_parents[:, 0] >= 0)[0]
    for z in created:
        star_tris = incidence[z]
        if len(star_tris) not in (2, 4):
            continue
        st = _star_structure(mesh, z, star_tris)
        if st is None:
            continue
        stars.append(NodeStar(z, sorted(int(t) for t in star_tris), st[0],
                              parents=[(p, va, vb) for p, va, vb in st[1]]))
    return stars


def coarsen(mesh, stars):
    """Replace each star's triangles by its parents; removes the center vertices.

    Stars must be pairwise disjoint and valid on ``mesh`` (raises MeshError
    otherwise).  Returns ``(new_mesh, CoarsenMap)``.
    """
    stars = list(stars)
    if not stars:
        cmap = CoarsenMap(np.arange(mesh.num_vertices, dtype=np.int64), {},
                          np.arange(mesh.num_triangles, dtype=np.int64))
        new = TriMesh(mesh.vertices, mesh.triangles, domain=mesh.domain,
                      generation=mesh.generation, vertex_parents=mesh.vertex_parents,
                      lineage=[(mesh.uid, cmap)] + mesh.lineage[:3], check=False)
        _complete_coarsen_map(cmap, mesh, new)
        return new, cmap

    all_tris = [t for s in stars for t in s.tris]
    centers = [s.center for s in stars]
    if len(set(all_tris)) != len(all_tris) or len(set(centers)) != len(centers):
        raise MeshError("coarsen: overlapping stars")
    if max(all_tris) >= mesh.num_triangles or min(all_tris) < 0:
        raise MeshError("coarsen: stale star (triangle id out of range)")

    incidence = mesh.vertex_tri_incidence()
    merged_tris = []
    merged_gens = []
    removed_center_edge = {}
    for s in stars:
        z = s.center
        if z >= mesh.num_vertices or sorted(int(t) for t in incidence[z]) != sorted(s.tris):
            raise MeshError(f"coarsen: stale star at vertex {z}")
        st = _star_structure(mesh, z, np.asarray(s.tris))
        if st is None:
            raise MeshError(f"coarsen: invalid star at vertex {z}")
        (a, b), merged = st
        gen = int(mesh.generation[list(s.tris)].min()) - 1
        for p, va, vb in merged:
            merged_tris.append([p, va, vb])
            merged_gens.append(gen)
        removed_center_edge[(min(a, b), max(a, b))] = z

    keep = np.ones(mesh.num_triangles, dtype=bool)
    keep[all_tris] = False
    new_tris = np.vstack([mesh.triangles[keep],
                          np.asarray(merged_tris, dtype=np.int64)])
    new_gens = np.concatenate([mesh.generation[keep],
                               np.asarray(merged_gens, dtype=np.int64)])

    removed = np.zeros(mesh.num_vertices, dtype=bool)
    removed[centers] = True
    vertex_map = -np.ones(mesh.num_vertices, dtype=np.int64)
    vertex_map[~removed] = np.arange(mesh.num_vertices - len(centers))
    tri_map = -np.ones(mesh.num_triangles, dtype=np.int64)
    tri_map[keep] = np.arange(int(keep.sum()))

    cmap = CoarsenMap(vertex_map, removed_center_edge, tri_map)
    new = TriMesh(mesh.vertices[~removed], vertex_map[new_tris],
                  domain=mesh.domain, generation=new_gens,
                  vertex_parents=np.where(
                      mesh.vertex_parents[~removed] >= 0,
                      vertex_map[np.clip(mesh.vertex_parents[~removed], 0, None)],
                      -1),
                  lineage=[(mesh.uid, cmap)] + mesh.lineage[:3])
    if (new.vertex_parents[new.vertex_parents >= 0] < 0).any():
        raise MeshError("coarsen: removed a vertex still referenced as a parent")
    _complete_coarsen_map(cmap, mesh, new)
    return new, cmap


# -- output ------------------------------------------------------------------

def write_vtk(mesh, path, point_data=None, cell_data=None, title="chns fields"):
    """Legacy-VTK unstructured-grid writer (ASCII, triangles)."""
    lines = ["# vtk DataFile Version 2.0", title, "ASCII",
             "DATASET UNSTRUCTURED_GRID",
             f"POINTS {mesh.num_vertices} double"]
    for x, y in mesh.vertices:
        lines.append(f"{x:.10g} {y:.10g} 0")
    nt = mesh.num_triangles
    lines.append(f"CELLS {nt} {4 * nt}")
    for a, b, c in mesh.triangles:
        lines.append(f"3 {a} {b} {c}")
    lines.append(f"CELL_TYPES {nt}")
    lines.extend(["5"] * nt)
    if point_data:
        lines.append(f"POINT_DATA {mesh.num_vertices}")
        for name, arr in point_data.items():
            arr = np.asarray(arr)
            if arr.ndim == 1:
                lines.append(f"SCALARS {name} double 1")
                lines.append("LOOKUP_TABLE default")
                lines.extend(f"{v:.10g}" for v in arr)
            else:
                lines.append(f"VECTORS {name} double")
                lines.extend(f"{v[0]:.10g} {v[1]:.10g} 0" for v in arr)
    if cell_data:
        lines.append(f"CELL_DATA {nt}")
        for name, arr in cell_data.items():
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(f"{v:.10g}" for v in np.asarray(arr))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
