"""Timespace tetrahedral slab mesh: construction, topology, geometry queries.

The computational domain is the annular region between two concentric
regular polygons (default 13-gon), extruded along the time axis into a slab
of thickness dt.  Nodes carry geometric labels (which boundary planes they
lie on) so that adaptation can constrain motion and boundary facet tags can
be rederived combinatorially after any local modification.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay, cKDTree

# boundary facet tags
OUTER = "OUTER"
INLET = "INLET"
T_BEGIN = "T_BEGIN"
T_END = "T_END"

# node label kinds: ("IN", k) / ("OUT", k) lateral plane k, ("TB",) / ("TE",) time faces
LBL_TB = ("TB",)
LBL_TE = ("TE",)


class MeshError(Exception):
    pass


class GeometryError(MeshError):
    """A query point lies outside the mesh hull beyond tolerance."""


def _cross2(u, v):
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


def signed_volumes(nodes, tets):
    """Signed volumes of tets, positive for the fixed orientation convention."""
    p = nodes[tets]
    a = p[:, 1] - p[:, 0]
    b = p[:, 2] - p[:, 0]
    c = p[:, 3] - p[:, 0]
    # triple product written out; np.cross has high per-call overhead
    return (
        (a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1]) * c[:, 0]
        + (a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2]) * c[:, 1]
        + (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]) * c[:, 2]
    ) / 6.0


def _face_key_array(tets):
    """All 4m faces as sorted triples, plus the owning tet index."""
    f = np.concatenate(
        [
            tets[:, [1, 2, 3]],
            tets[:, [0, 3, 2]],
            tets[:, [0, 1, 3]],
            tets[:, [0, 2, 1]],
        ]
    )
    owner = np.tile(np.arange(len(tets)), 4)
    return np.sort(f, axis=1), owner


class SimplexMesh:
    """Conforming tetrahedral mesh in (x, y, t) with labeled boundary geometry.

    Attributes
    ----------
    nodes : (n, 3) float array of (x, y, t) coordinates
    tets : (m, 4) int array, positively oriented
    node_labels : list of frozenset, boundary-plane labels per node
    frozen : (n,) bool, nodes that may not move or be removed
    planes : dict label -> (unit normal (3,), offset); plane is n.x = offset
    """

    def __init__(self, nodes, tets, node_labels, frozen, planes, n_sides=13):
        self.nodes = np.asarray(nodes, dtype=float)
        self.tets = np.asarray(tets, dtype=np.int64)
        self.node_labels = list(node_labels)
        self.frozen = np.asarray(frozen, dtype=bool)
        self.planes = dict(planes)
        self.n_sides = n_sides
        self._cache = {}

    # -- bookkeeping -------------------------------------------------------

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_tets(self):
        return len(self.tets)

    def invalidate(self):
        self._cache = {}

    def copy(self):
        return SimplexMesh(
            self.nodes.copy(),
            self.tets.copy(),
            [s for s in self.node_labels],
            self.frozen.copy(),
            self.planes,
            self.n_sides,
        )

    def extent(self):
        return float(np.max(np.ptp(self.nodes, axis=0)))

    # -- derived topology --------------------------------------------------

    def unique_faces(self):
        """(faces, counts, owner_of_first) for all distinct faces."""
        if "faces" not in self._cache:
            keys, owner = _face_key_array(self.tets)
            faces, idx, counts = np.unique(
                keys, axis=0, return_index=True, return_counts=True
            )
            self._cache["faces"] = (faces, counts, owner[idx])
        return self._cache["faces"]

    def boundary_facets(self):
        """Boundary faces and their tags, derived from node labels.

        Returns (faces (k,3) int, tags list; tag None when underivable).
        """
        if "boundary" not in self._cache:
            faces, counts, _ = self.unique_faces()
            bfaces = faces[counts == 1]
            tags = [self._face_tag(f) for f in bfaces]
            self._cache["boundary"] = (bfaces, tags)
        return self._cache["boundary"]

    def _face_tag(self, f):
        common = self.node_labels[f[0]] & self.node_labels[f[1]] & self.node_labels[f[2]]
        if len(common) != 1:
            return None
        (lbl,) = common
        if lbl == LBL_TB:
            return T_BEGIN
        if lbl == LBL_TE:
            return T_END
        return INLET if lbl[0] == "IN" else OUTER

    def edges(self):
        """Unique edges as (k, 2) sorted pairs."""
        if "edges" not in self._cache:
            pairs = self.tets[:, [0, 1, 0, 2, 0, 3, 1, 2, 1, 3, 2, 3]].reshape(-1, 2)
            self._cache["edges"] = np.unique(np.sort(pairs, axis=1), axis=0)
        return self._cache["edges"]

    def node_tets(self):
        """CSR-style node -> incident tet lists (indptr, indices)."""
        if "node_tets" not in self._cache:
            flat = self.tets.ravel()
            order = np.argsort(flat, kind="stable")
            counts = np.bincount(flat, minlength=self.n_nodes)
            indptr = np.concatenate([[0], np.cumsum(counts)])
            self._cache["node_tets"] = (indptr, order // 4)
        return self._cache["node_tets"]

    def tets_of_node(self, i):
        indptr, idx = self.node_tets()
        return idx[indptr[i] : indptr[i + 1]]

    def neighbors(self):
        """(m, 4) tet index across the face opposite local node i, -1 on boundary."""
        if "neighbors" not in self._cache:
            keys, owner = _face_key_array(self.tets)
            local = np.repeat(np.arange(4), self.n_tets)
            order = np.lexsort(keys.T[::-1])
            keys_s, owner_s, local_s = keys[order], owner[order], local[order]
            nbr = -np.ones((self.n_tets, 4), dtype=np.int64)
            same = np.all(keys_s[1:] == keys_s[:-1], axis=1)
            i = np.nonzero(same)[0]
            nbr[owner_s[i], local_s[i]] = owner_s[i + 1]
            nbr[owner_s[i + 1], local_s[i + 1]] = owner_s[i]
            self._cache["neighbors"] = nbr
        return self._cache["neighbors"]

    def volume(self):
        return float(np.sum(signed_volumes(self.nodes, self.tets)))

    def time_face_value(self, which):
        """t-coordinate of the requested time face."""
        lbl = LBL_TB if which == T_BEGIN else LBL_TE
        return self.planes[lbl][1]

    def nodes_with_label(self, pred):
        """Indices of nodes having a label satisfying pred(label)."""
        return np.array(
            [i for i, s in enumerate(self.node_labels) if any(pred(l) for l in s)],
            dtype=np.int64,
        )

    def inlet_nodes(self):
        return self.nodes_with_label(lambda l: l[0] == "IN")

    def outer_nodes(self):
        return self.nodes_with_label(lambda l: l[0] == "OUT")

    def time_face_nodes(self, which):
        lbl = LBL_TB if which == T_BEGIN else LBL_TE
        return np.array(
            [i for i, s in enumerate(self.node_labels) if lbl in s], dtype=np.int64
        )


# -- validation ------------------------------------------------------------


@dataclass
class DefectReport:
    inverted_tets: int = 0
    nonconforming_faces: int = 0
    untagged_boundary_faces: int = 0
    misclassified_nodes: int = 0

    @property
    def total(self):
        return (
            self.inverted_tets
            + self.nonconforming_faces
            + self.untagged_boundary_faces
            + self.misclassified_nodes
        )

    @property
    def clean(self):
        return self.total == 0


def validate_mesh(mesh, stored_boundary=None):
    """Count mesh defects.  All-zero report means the invariants hold.

    stored_boundary, when given, is an explicit (faces, tags) snapshot to
    check the current topology against (e.g. one loaded from a file).
    """
    rep = DefectReport()
    vols = signed_volumes(mesh.nodes, mesh.tets)
    rep.inverted_tets = int(np.sum(vols <= 0.0))

    faces, counts, _ = mesh.unique_faces()
    rep.nonconforming_faces = int(np.sum(counts > 2))

    bfaces = faces[counts == 1]
    tags = [mesh._face_tag(f) for f in bfaces]
    rep.untagged_boundary_faces = int(sum(1 for t in tags if t is None))

    if stored_boundary is not None:
        sfaces, _ = stored_boundary
        have = set(map(tuple, np.sort(np.asarray(sfaces), axis=1)))
        actual = set(map(tuple, bfaces))
        rep.nonconforming_faces += len(have ^ actual)

    tol = 1e-12 * max(mesh.extent(), 1.0)
    bad = 0
    for i, labels in enumerate(mesh.node_labels):
        x = mesh.nodes[i]
        for lbl in labels:
            n, d = mesh.planes[lbl]
            if abs(float(n @ x) - d) > tol:
                bad += 1
                break
    rep.misclassified_nodes = bad
    return rep


# -- slab construction -----------------------------------------------------


def _polygon_ring(scale, n_sides, h0):
    """Points along the regular n-gon of circumradius scale, spacing ~h0.

    Returns (points (p,2), plane_ids list of frozenset of side indices).
    """
    ang = 2.0 * np.pi * np.arange(n_sides) / n_sides
    corners = scale * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    side_len = 2.0 * scale * np.sin(np.pi / n_sides)
    m = max(1, int(round(side_len / h0)))
    pts, ids = [], []
    for k in range(n_sides):
        a, b = corners[k], corners[(k + 1) % n_sides]
        for j in range(m):
            s = j / m
            pts.append((1.0 - s) * a + s * b)
            if j == 0:
                ids.append(frozenset({(k - 1) % n_sides, k}))
            else:
                ids.append(frozenset({k}))
    return np.array(pts), ids


def _point_in_polygon(pts, apothem, n_sides):
    """True where pts lie inside the regular n-gon with the given apothem."""
    ang = 2.0 * np.pi * (np.arange(n_sides) + 0.5) / n_sides
    normals = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    d = pts @ normals.T
    return np.max(d, axis=1) < apothem - 1e-12


def _triangulate_annulus(h0, r_in, r_out, n_sides, seed=0):
    """Unstructured triangulation of the annulus between concentric n-gons.

    Returns (points (p,2), triangles (q,3) CCW, labels: list of frozenset of
    ("IN"/"OUT", k) lateral plane labels).
    """
    if round((r_out - r_in) / h0) < 1:
        raise MeshError(f"h0={h0} too large to resolve the annulus width")
    rng = np.random.default_rng(seed)

    points, labels = [], []
    ring_slices = []
    offset = 0
    for scale, side in ((r_in, "IN"), (r_out, "OUT")):
        pts, ids = _polygon_ring(scale, n_sides, h0)
        lab = [frozenset((side, k) for k in f) for f in ids]
        ring_slices.append((offset, len(pts)))
        offset += len(pts)
        points.append(pts)
        labels.extend(lab)

    # interior fill: hexagonal lattice with clearance from both polygons,
    # slightly jittered to keep the Delaunay non-degenerate
    ang = 2.0 * np.pi * (np.arange(n_sides) + 0.5) / n_sides
    normals = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    ap_in = r_in * np.cos(np.pi / n_sides)
    ap_out = r_out * np.cos(np.pi / n_sides)
    dy = h0 * np.sqrt(3.0) / 2.0
    ys = np.arange(-r_out, r_out + dy, dy)
    grid = []
    for row, y in enumerate(ys):
        xs = np.arange(-r_out, r_out + h0, h0) + (0.5 * h0 if row % 2 else 0.0)
        grid.append(np.stack([xs, np.full_like(xs, y)], axis=1))
    grid = np.concatenate(grid)
    grid = grid + rng.uniform(-0.02 * h0, 0.02 * h0, size=grid.shape)
    depth = grid @ normals.T
    clearance = 0.65 * h0
    keep = (np.max(depth, axis=1) < ap_out - clearance) & (
        np.max(depth, axis=1) > ap_in + clearance
    )
    interior = grid[keep]
    points.append(interior)
    labels.extend(frozenset() for _ in range(len(interior)))
    pts2 = np.concatenate(points)
    n_fixed = offset  # boundary ring points stay put during relaxation

    # a few Laplacian relaxation sweeps regularize the layer next to the
    # boundary rings (recovery accuracy degrades on irregular stencils)
    for _ in range(6):
        simp = Delaunay(pts2).simplices
        cent = pts2[simp].mean(axis=1)
        inside = ~_point_in_polygon(cent, ap_in, n_sides)
        edges = np.sort(
            simp[inside][:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1
        )
        edges = np.unique(edges, axis=0)
        acc = np.zeros_like(pts2)
        cnt = np.zeros(len(pts2))
        np.add.at(acc, edges[:, 0], pts2[edges[:, 1]])
        np.add.at(acc, edges[:, 1], pts2[edges[:, 0]])
        np.add.at(cnt, edges[:, 0], 1.0)
        np.add.at(cnt, edges[:, 1], 1.0)
        movable = np.zeros(len(pts2), dtype=bool)
        movable[n_fixed:] = cnt[n_fixed:] > 0
        pts2[movable] = acc[movable] / cnt[movable, None]
        depth = pts2 @ normals.T
        # relaxation must not push points out of the annulus
        ok = (np.max(depth, axis=1) < ap_out - 1e-9) & (
            np.max(depth, axis=1) > ap_in + 1e-9
        )
        bad = movable & ~ok
        if np.any(bad):
            pts2[bad] = np.concatenate(points)[bad]

    tri = Delaunay(pts2)
    simp = tri.simplices
    cent = pts2[simp].mean(axis=1)
    apothem_in = r_in * np.cos(np.pi / n_sides)
    keep = ~_point_in_polygon(cent, apothem_in, n_sides)
    simp = simp[keep]

    # drop degenerate slivers from collinear boundary points, enforce CCW
    v = pts2[simp]
    area2 = _cross2(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    simp = simp[np.abs(area2) > 1e-10 * h0 * h0]
    v = pts2[simp]
    area2 = _cross2(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    flip = area2 < 0
    simp[flip] = simp[flip][:, [0, 2, 1]]

    # boundary recovery check: boundary edges must be consecutive ring points
    expected = set()
    for start, cnt in (ring_slices[0], ring_slices[-1]):
        for i in range(cnt):
            a, b = start + i, start + (i + 1) % cnt
            expected.add((min(a, b), max(a, b)))
    e = np.sort(simp[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    actual = set(map(tuple, uniq[counts == 1]))
    if actual != expected:
        raise MeshError(
            "triangulation did not recover the polygon boundary "
            f"({len(actual ^ expected)} mismatched edges); adjust h0"
        )
    return pts2, simp, labels


def _split_prism(tri, bot, top):
    """Split one prism into 3 tets with the sorted-global-index convention."""
    order = np.argsort(tri)
    i0, i1, i2 = (tri[k] for k in order)
    return [
        (bot[i0], bot[i1], bot[i2], top[i2]),
        (bot[i0], bot[i1], top[i2], top[i1]),
        (bot[i0], top[i1], top[i2], top[i0]),
    ]


def build_slab_mesh(h0, t_start, dt, r_in=0.1, r_out=1.0, n_sides=13, seed=0):
    """Build the conforming tet mesh of the annular slab [t_start, t_start+dt].

    Extrudes an unstructured triangulation of the polygonal annulus into
    max(1, round(dt/h0)) layers, splitting each prism into 3 tets with
    conforming diagonals.
    """
    if not (0 < h0 <= r_out):
        raise MeshError("require 0 < h0 <= r_out")
    if dt <= 0 or r_in >= r_out:
        raise MeshError("require dt > 0 and r_in < r_out")

    pts2, tris, labels2 = _triangulate_annulus(h0, r_in, r_out, n_sides, seed)
    n2 = len(pts2)
    n_layers = max(1, int(round(dt / h0)))
    times = np.linspace(t_start, t_start + dt, n_layers + 1)

    nodes = np.empty((n2 * (n_layers + 1), 3))
    for j, t in enumerate(times):
        nodes[j * n2 : (j + 1) * n2, :2] = pts2
        nodes[j * n2 : (j + 1) * n2, 2] = t

    tets = []
    for j in range(n_layers):
        off_b, off_t = j * n2, (j + 1) * n2
        for tri in tris:
            bot = {i: off_b + i for i in tri}
            top = {i: off_t + i for i in tri}
            tets.extend(_split_prism(tri, bot, top))
    tets = np.array(tets, dtype=np.int64)

    # fix orientation tet by tet (faces are index sets, so this is safe)
    vols = signed_volumes(nodes, tets)
    neg = vols < 0
    tets[neg] = tets[neg][:, [0, 1, 3, 2]]
    if np.any(np.abs(vols) < 1e-16):
        raise MeshError("degenerate tet produced by extrusion")

    node_labels = []
    for j in range(n_layers + 1):
        extra = set()
        if j == 0:
            extra.add(LBL_TB)
        if j == n_layers:
            extra.add(LBL_TE)
        for lab in labels2:
            node_labels.append(frozenset(lab | extra))

    planes = {}
    for k in range(n_sides):
        a = 2.0 * np.pi * (k + 0.5) / n_sides
        nrm = np.array([np.cos(a), np.sin(a), 0.0])
        planes[("IN", k)] = (nrm, r_in * np.cos(np.pi / n_sides))
        planes[("OUT", k)] = (nrm, r_out * np.cos(np.pi / n_sides))
    planes[LBL_TB] = (np.array([0.0, 0.0, 1.0]), float(times[0]))
    planes[LBL_TE] = (np.array([0.0, 0.0, 1.0]), float(times[-1]))

    frozen = np.zeros(len(nodes), dtype=bool)
    return SimplexMesh(nodes, tets, node_labels, frozen, planes, n_sides)


# -- mirroring -------------------------------------------------------------


def mirror_in_time(mesh, t_plane):
    """Reflect the mesh about t = t_plane (must be the T_END face).

    The new T_BEGIN face triangulation is node-for-node the old T_END face.
    """
    tb = mesh.time_face_value(T_BEGIN)
    te = mesh.time_face_value(T_END)
    tol = 1e-12 * max(1.0, abs(te))
    if abs(te - t_plane) > tol and abs(tb - t_plane) > tol:
        raise MeshError(
            f"t_plane={t_plane} matches neither time face ({tb}, {te})"
        )
    nodes = mesh.nodes.copy()
    nodes[:, 2] = 2.0 * t_plane - nodes[:, 2]
    tets = mesh.tets[:, [0, 1, 3, 2]].copy()  # reflection flips orientation

    swap = {LBL_TB: LBL_TE, LBL_TE: LBL_TB}
    node_labels = [frozenset(swap.get(l, l) for l in s) for s in mesh.node_labels]
    planes = dict(mesh.planes)
    # labels swap under reflection: the old T_END becomes the new T_BEGIN
    planes[LBL_TB] = (np.array([0.0, 0.0, 1.0]), 2.0 * t_plane - te)
    planes[LBL_TE] = (np.array([0.0, 0.0, 1.0]), 2.0 * t_plane - tb)
    return SimplexMesh(nodes, tets, node_labels, mesh.frozen.copy(), planes, mesh.n_sides)


# -- Steiner ellipsoid -----------------------------------------------------


@dataclass
class Ellipsoid:
    """{x : (x-c)^T E^-1 (x-c) <= 1} with E symmetric positive-definite."""

    center: np.ndarray
    shape: np.ndarray


def steiner_ellipsoid(verts):
    """Minimal-volume circumscribed ellipsoid of a tetrahedron."""
    verts = np.asarray(verts, dtype=float)
    c = verts.mean(axis=0)
    d = verts - c
    cov = d.T @ d / 4.0
    E = 3.0 * cov
    if abs(np.linalg.det(E)) < 1e-30:
        raise MeshError("degenerate tetrahedron has no Steiner ellipsoid")
    return Ellipsoid(center=c, shape=E)


def directional_extent(ell, w):
    """Full width of the ellipsoid along direction w."""
    w = np.asarray(w, dtype=float)
    nw = np.linalg.norm(w)
    if nw == 0.0:
        raise ValueError("zero direction vector")
    u = w / nw
    return 2.0 * float(np.sqrt(u @ ell.shape @ u))


def steiner_extents(nodes, tets, directions):
    """Vectorized directional_extent of every tet's Steiner ellipsoid.

    directions is (m, 3), one per tet; returns (m,) widths.
    """
    p = nodes[tets]
    c = p.mean(axis=1, keepdims=True)
    d = p - c
    E = 3.0 / 4.0 * np.einsum("mki,mkj->mij", d, d)
    u = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    return 2.0 * np.sqrt(np.einsum("mi,mij,mj->m", u, E, u))


# -- point location and interpolation --------------------------------------


def _bary_coords(nodes, tets, tet_ids, pts):
    """Barycentric coordinates of pts within the given tets, (k, 4)."""
    p = nodes[tets[tet_ids]]
    T = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=2)
    rhs = pts - p[:, 0]
    lam = np.linalg.solve(T, rhs[..., None])[..., 0]
    return np.concatenate([(1.0 - lam.sum(axis=1))[:, None], lam], axis=1)


def locate_points(mesh, pts, bary_tol=1e-9, hull_tol=1e-6):
    """Find containing tets and barycentric coordinates for query points.

    Walks from a nearest-centroid seed; falls back to exhaustive search.
    Points slightly outside a face are clamped to the nearest containing
    tet; points farther than hull_tol outside the hull raise GeometryError.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    n_q = len(pts)
    cent = mesh.nodes[mesh.tets].mean(axis=1)
    tree = mesh._cache.setdefault("ctree", cKDTree(cent))
    seeds = tree.query(pts, k=1)[1]
    nbr = mesh.neighbors()

    tet_out = np.full(n_q, -1, dtype=np.int64)
    bary_out = np.zeros((n_q, 4))

    # lockstep walk: advance every unresolved query one tet per round
    active = np.arange(n_q)
    cur = seeds.astype(np.int64).copy()
    max_rounds = max(64, 4 * int(np.cbrt(mesh.n_tets)) + 16)
    for _ in range(max_rounds):
        if len(active) == 0:
            break
        lam = _bary_coords(mesh.nodes, mesh.tets, cur, pts[active])
        worst = np.argmin(lam, axis=1)
        inside = lam[np.arange(len(active)), worst] >= -bary_tol
        done = active[inside]
        tet_out[done] = cur[inside]
        bary_out[done] = lam[inside]
        active = active[~inside]
        nxt = nbr[cur[~inside], worst[~inside]]
        hit_wall = nxt < 0
        active, cur = active[~hit_wall], nxt[~hit_wall]
        # queries that hit the boundary fall through to exhaustive search

    pending = np.nonzero(tet_out < 0)[0]
    if len(pending):
        all_ids = np.arange(mesh.n_tets)
        scale = mesh.extent()
        for q in pending:
            lam = _bary_coords(
                mesh.nodes, mesh.tets, all_ids, np.broadcast_to(pts[q], (mesh.n_tets, 3))
            )
            worst = lam.min(axis=1)
            best = int(np.argmax(worst))
            # estimate how far outside: negative bary times local size
            h = np.cbrt(np.abs(signed_volumes(mesh.nodes, mesh.tets[best : best + 1])))[0]
            dist = max(0.0, -float(worst[best])) * 6.0 * max(h, 1e-30)
            if worst[best] < -bary_tol and dist > hull_tol * max(scale, 1.0):
                raise GeometryError(
                    f"point {pts[q]} lies outside the mesh hull (dist~{dist:.2e})"
                )
            tet_out[q], bary_out[q] = best, lam[best]

    np.clip(bary_out, 0.0, None, out=bary_out)
    bary_out /= bary_out.sum(axis=1, keepdims=True)
    return tet_out, bary_out


def locate_and_interpolate(mesh, values, pts, bary_tol=1e-9, hull_tol=1e-6):
    """Barycentric interpolation of nodal values (array or list of arrays)."""
    tet_ids, bary = locate_points(mesh, pts, bary_tol, hull_tol)
    corner = mesh.tets[tet_ids]

    def interp(v):
        v = np.asarray(v)
        return np.einsum("qk,qk...->q...", bary, v[corner])

    if isinstance(values, (list, tuple)):
        return [interp(v) for v in values]
    return interp(values)


# -- isosurface and time-face extraction -----------------------------------

# marching-tetrahedra edge list (local node pairs)
_TET_EDGES = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


def extract_isosurface(mesh, values, level):
    """Marching-tetrahedra triangle soup of the level set of a nodal field.

    Returns (verts (k,3), tris (q,3)); values exactly at the level are
    perturbed by +1e-12 to avoid degenerate crossings.
    """
    v = np.asarray(values, dtype=float).copy()
    v[v == level] += 1e-12
    above = v[mesh.tets] > level
    verts, tris = [], []

    def crossing(tet, i, j):
        a, b = tet[i], tet[j]
        s = (level - v[a]) / (v[b] - v[a])
        return mesh.nodes[a] + s * (mesh.nodes[b] - mesh.nodes[a])

    counts = above.sum(axis=1)
    for t in np.nonzero((counts > 0) & (counts < 4))[0]:
        tet = mesh.tets[t]
        up = above[t]
        hi = [i for i in range(4) if up[i]]
        lo = [i for i in range(4) if not up[i]]
        if len(hi) == 1 or len(lo) == 1:
            apex = hi[0] if len(hi) == 1 else lo[0]
            others = lo if len(hi) == 1 else hi
            p = [crossing(tet, apex, o) for o in others]
            base = len(verts)
            verts.extend(p)
            tris.append((base, base + 1, base + 2))
        else:  # two nodes each side: quadrilateral, split into two triangles
            a, b = hi
            c, d = lo
            p = [
                crossing(tet, a, c),
                crossing(tet, a, d),
                crossing(tet, b, d),
                crossing(tet, b, c),
            ]
            base = len(verts)
            verts.extend(p)
            tris.append((base, base + 1, base + 2))
            tris.append((base, base + 2, base + 3))
    if not verts:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    return np.array(verts), np.array(tris, dtype=np.int64)


@dataclass
class TimeSlice:
    """A time face restricted to 2D: points (x, y), triangles, nodal fields."""

    points: np.ndarray
    triangles: np.ndarray
    fields: dict = field(default_factory=dict)
    node_ids: np.ndarray = None  # original 3D node indices


def extract_time_face(mesh, fields, which):
    """Restrict the mesh and nodal fields to the T_BEGIN or T_END face.

    fields is a dict name -> nodal values on the full mesh.
    """
    bfaces, tags = mesh.boundary_facets()
    sel = np.array([t == which for t in tags], dtype=bool)
    if not np.any(sel):
        raise MeshError(f"no boundary facets tagged {which}")
    faces = bfaces[sel]
    ids = np.unique(faces)
    remap = -np.ones(mesh.n_nodes, dtype=np.int64)
    remap[ids] = np.arange(len(ids))
    tris = remap[faces]
    pts = mesh.nodes[ids][:, :2]
    # orient CCW in (x, y)
    v = pts[tris]
    flip = _cross2(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    restricted = {name: np.asarray(vals)[ids] for name, vals in fields.items()}
    return TimeSlice(points=pts, triangles=tris, fields=restricted, node_ids=ids)


def contour_polylines(slice_, values, level):
    """Marching-triangles level-set polylines on a TimeSlice.

    Returns a list of (k, 2) vertex arrays; closed loops repeat the first
    vertex at the end.
    """
    v = np.asarray(values, dtype=float).copy()
    v[v == level] += 1e-12
    segs = []
    for tri in slice_.triangles:
        up = v[tri] > level
        if up.all() or not up.any():
            continue
        pts = []
        for i, j in ((0, 1), (1, 2), (2, 0)):
            a, b = tri[i], tri[j]
            if up[i] != up[j]:
                s = (level - v[a]) / (v[b] - v[a])
                pts.append(slice_.points[a] + s * (slice_.points[b] - slice_.points[a]))
        if len(pts) == 2:
            segs.append((pts[0], pts[1]))

    # chain segments into polylines by matching endpoints
    def key(p):
        return (round(p[0] * 1e10), round(p[1] * 1e10))

    adj = {}
    for i, (a, b) in enumerate(segs):
        adj.setdefault(key(a), []).append((i, 0))
        adj.setdefault(key(b), []).append((i, 1))
    used = [False] * len(segs)
    lines = []
    for start in range(len(segs)):
        if used[start]:
            continue
        used[start] = True
        a, b = segs[start]
        line = [a, b]
        # extend forward from b, then backward from a
        for forward in (True, False):
            while True:
                end = line[-1] if forward else line[0]
                cands = [
                    (i, e) for i, e in adj.get(key(end), []) if not used[i]
                ]
                if not cands:
                    break
                i, e = cands[0]
                used[i] = True
                nxt = segs[i][1 - e]
                if forward:
                    line.append(nxt)
                else:
                    line.insert(0, nxt)
        lines.append(np.array(line))
    return lines
