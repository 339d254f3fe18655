"""Anisotropic mesh adaptation by local modifications.

Four operation types drive the mesh toward unit metric edge lengths:
coarsening (collapse short edges, quality may drop), edge swapping,
refinement (split long edges) and smoothing; the latter three only accept
changes that do not decrease the worst local element quality.  2-to-3
face-to-edge swaps are not used.
"""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .fields import NodalMetricField
from .mesh import SimplexMesh, signed_volumes
from .metric import spd_floor

SQRT2 = np.sqrt(2.0)
# shape normalization: regular tet with unit edges has volume 1/(6 sqrt 2)
SHAPE_NORM = 6.0 * SQRT2

_EDGE_PAIRS = np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])


@dataclass
class AdaptConstraints:
    """Movement restrictions: nodes of frozen_face are immutable; node
    labels restrict all other boundary nodes to their planes."""

    frozen_face: str = None  # T_BEGIN when matching the previous slab


@dataclass
class QualityReport:
    qualities: np.ndarray = None
    min_quality: float = 0.0
    mean_quality: float = 0.0
    edge_lengths: np.ndarray = None
    pct_in_band: float = 0.0
    sweep_log: list = field(default_factory=list)  # (sweep, nodes, tets, min_q, mean_q, pct)


def tet_qualities(p, Mt):
    """Vassilevski-style quality of tets given vertex coords and tensors.

    p is (k, 4, 3), Mt is (k, 4, 3, 3).  Q = shape * size in [0, 1]; shape
    is the metric-volume to rms-metric-edge ratio normalized to 1 for the
    regular tet; size penalizes deviation of the mean metric edge length
    from 1.
    """
    a = p[:, 1] - p[:, 0]
    b = p[:, 2] - p[:, 0]
    c = p[:, 3] - p[:, 0]
    vol = (
        (a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1]) * c[:, 0]
        + (a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2]) * c[:, 1]
        + (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]) * c[:, 2]
    ) / 6.0

    Mbar = Mt.mean(axis=1)
    detM = (
        Mbar[:, 0, 0] * (Mbar[:, 1, 1] * Mbar[:, 2, 2] - Mbar[:, 1, 2] * Mbar[:, 2, 1])
        - Mbar[:, 0, 1] * (Mbar[:, 1, 0] * Mbar[:, 2, 2] - Mbar[:, 1, 2] * Mbar[:, 2, 0])
        + Mbar[:, 0, 2] * (Mbar[:, 1, 0] * Mbar[:, 2, 1] - Mbar[:, 1, 1] * Mbar[:, 2, 0])
    )
    vol_m = np.sqrt(np.maximum(detM, 0.0)) * vol

    e = p[:, _EDGE_PAIRS[:, 1]] - p[:, _EDGE_PAIRS[:, 0]]
    Me = 0.5 * (Mt[:, _EDGE_PAIRS[:, 0]] + Mt[:, _EDGE_PAIRS[:, 1]])
    l2 = np.einsum("kei,keij,kej->ke", e, Me, e)
    l2 = np.maximum(l2, 0.0)
    lrms = np.sqrt(l2.mean(axis=1))
    lmean = np.sqrt(l2).mean(axis=1)

    with np.errstate(divide="ignore", invalid="ignore"):
        shape = SHAPE_NORM * vol_m / lrms**3
        x = np.minimum(lmean, 1.0 / lmean)
    size = (x * (2.0 - x)) ** 3
    q = np.clip(shape, 0.0, 1.0) * size
    q[(vol <= 0.0) | ~np.isfinite(q)] = 0.0
    return q


def element_quality(p, M, tet=None):
    """Quality of one tet: vertex coords (4, 3) with tensors, or a tet index
    together with a NodalMetricField."""
    if tet is not None:
        ids = M.mesh.tets[tet]
        p = M.mesh.nodes[ids]
        Mt = M.tensors[ids]
    else:
        p = np.asarray(p, dtype=float)
        Mt = M.tensors if isinstance(M, NodalMetricField) else np.asarray(M)
        if Mt.shape != (4, 3, 3):
            raise ValueError("need one tensor per vertex")
    return float(tet_qualities(p[None], Mt[None])[0])


@lru_cache(maxsize=None)
def _polygon_triangulations(m):
    """All triangulations of the convex polygon 0..m-1 as an integer array
    of shape (catalan(m-2), m-2, 3)."""

    def rec(verts):
        if len(verts) < 3:
            return [[]]
        out = []
        v0, vlast = verts[0], verts[-1]
        for k in range(1, len(verts) - 1):
            for tl in rec(verts[: k + 1]):
                for tr in rec(verts[k:]):
                    out.append(tl + [(v0, verts[k], vlast)] + tr)
        return out

    return np.array(rec(tuple(range(m))), dtype=np.int64)


class _Adapter:
    """Mutable mesh state for one adapt sweep.

    Node and tet arrays grow geometrically; node-to-tet sets are kept
    consistent after every accepted operation, so passes can cascade
    (e.g. a chain of collapses) without stale-cache bookkeeping.  Removed
    entries are masked and compacted when the SimplexMesh is produced.
    """

    def __init__(self, mesh, tensors, constraints):
        n, m = mesh.n_nodes, mesh.n_tets
        self.coords = np.empty((2 * n + 64, 3))
        self.coords[:n] = mesh.nodes
        self.tensors = np.empty((2 * n + 64, 3, 3))
        self.tensors[:n] = tensors
        self.frozen = np.zeros(2 * n + 64, dtype=bool)
        self.frozen[:n] = mesh.frozen
        self.labels = list(mesh.node_labels)
        self.node_alive = np.zeros(2 * n + 64, dtype=bool)
        self.node_alive[:n] = True
        self.n_nodes = n

        self.tets = np.empty((2 * m + 64, 4), dtype=np.int64)
        self.tets[:m] = mesh.tets
        self.tet_alive = np.zeros(2 * m + 64, dtype=bool)
        self.tet_alive[:m] = True
        self.n_tets = m

        self.node_tets = [set() for _ in range(n)]
        for t in range(m):
            for v in self.tets[t]:
                self.node_tets[v].add(t)

        self.planes = mesh.planes
        self.n_sides = mesh.n_sides
        self.constraints = constraints
        if constraints.frozen_face is not None:
            for i in mesh.time_face_nodes(constraints.frozen_face):
                self.frozen[i] = True

    # -- storage helpers ---------------------------------------------------

    def add_node(self, x, tensor, labels):
        cap = len(self.coords)
        if self.n_nodes >= cap:
            self.coords = np.resize(self.coords, (2 * cap, 3))
            self.tensors = np.resize(self.tensors, (2 * cap, 3, 3))
            self.frozen = np.resize(self.frozen, 2 * cap)
            self.node_alive = np.resize(self.node_alive, 2 * cap)
            self.frozen[cap:] = False
            self.node_alive[cap:] = False
        i = self.n_nodes
        self.coords[i] = x
        self.tensors[i] = tensor
        self.labels.append(labels)
        self.frozen[i] = False
        self.node_alive[i] = True
        self.node_tets.append(set())
        self.n_nodes += 1
        return i

    def add_tets(self, new):
        k = len(new)
        cap = len(self.tets)
        while self.n_tets + k > cap:
            self.tets = np.resize(self.tets, (2 * cap, 4))
            self.tet_alive = np.resize(self.tet_alive, 2 * cap)
            self.tet_alive[cap:] = False
            cap = len(self.tets)
        ids = np.arange(self.n_tets, self.n_tets + k)
        self.tets[ids] = new
        self.tet_alive[ids] = True
        self.n_tets += k
        for t, row in zip(ids, new):
            for v in row:
                self.node_tets[v].add(t)
        return ids

    def drop_tets(self, ids):
        for t in ids:
            for v in self.tets[t]:
                self.node_tets[v].discard(t)
            self.tet_alive[t] = False

    def alive_tets(self):
        return np.nonzero(self.tet_alive[: self.n_tets])[0]

    def live_edges(self):
        ids = self.alive_tets()
        pairs = self.tets[ids][:, [0, 1, 0, 2, 0, 3, 1, 2, 1, 3, 2, 3]].reshape(-1, 2)
        return np.unique(np.sort(pairs, axis=1), axis=0)

    def edge_metric_lengths(self, edges):
        e = self.coords[edges[:, 1]] - self.coords[edges[:, 0]]
        Mb = 0.5 * (self.tensors[edges[:, 0]] + self.tensors[edges[:, 1]])
        return np.sqrt(np.maximum(np.einsum("ki,kij,kj->k", e, Mb, e), 0.0))

    def quality_of(self, tet_rows):
        """Qualities of explicit tet rows (k, 4) against current arrays."""
        return tet_qualities(self.coords[tet_rows], self.tensors[tet_rows])

    def edge_tets(self, u, v):
        return self.node_tets[u] & self.node_tets[v]

    # -- coarsening --------------------------------------------------------

    def coarsen_pass(self, l_low, l_max=SQRT2):
        edges = self.live_edges()
        lens = self.edge_metric_lengths(edges)
        order = np.argsort(lens)
        cand = order[lens[order] < l_low]
        count = 0
        for ci in cand:
            u, v = edges[ci]
            if not (self.node_alive[u] and self.node_alive[v]):
                continue
            if not self.edge_tets(u, v):
                continue  # edge no longer exists
            if self._try_collapse(u, v, l_max) or self._try_collapse(v, u, l_max):
                count += 1
        return count

    def _try_collapse(self, a, b, l_max=np.inf):
        """Collapse node a onto node b; returns True when applied."""
        if self.frozen[a]:
            return False
        if not self.labels[a] <= self.labels[b]:
            return False
        Ta = self.node_tets[a]
        dead = Ta & self.node_tets[b]
        keep = sorted(Ta - dead)
        if not keep:
            return False
        remap = self.tets[keep].copy()
        remap[remap == a] = b
        vols = signed_volumes(self.coords, remap)
        if np.min(vols) <= 0.0:
            return False
        if np.min(self.quality_of(remap)) <= 1e-8:
            return False
        if np.isfinite(l_max):
            # refuse collapses that create over-long edges; stops the
            # coarsen/refine tug of war at the band edges
            ws = np.unique(remap)
            ws = ws[ws != b]
            pairs = np.column_stack([np.full(len(ws), b), ws])
            if len(ws) and self.edge_metric_lengths(pairs).max() > l_max:
                return False
        # link condition: a remapped tet must not duplicate an existing one
        seen = set()
        for row in remap:
            key = frozenset(row.tolist())
            if key in seen:
                return False
            seen.add(key)
            if set.intersection(*[self.node_tets[w] for w in row]):
                return False
        self.drop_tets(sorted(dead))
        for t, row in zip(keep, remap):
            for w in self.tets[t]:
                self.node_tets[w].discard(t)
            self.tets[t] = row
            for w in row:
                self.node_tets[w].add(t)
        self.node_alive[a] = False
        self.node_tets[a] = set()
        return True

    # -- refinement --------------------------------------------------------

    def _split_param(self, u, v):
        """Edge parameter where both sub-edges have equal metric length."""
        e = self.coords[v] - self.coords[u]
        qu = float(e @ self.tensors[u] @ e)
        qv = float(e @ self.tensors[v] @ e)

        def imbalance(s):
            qs = (1.0 - s) * qu + s * qv
            l1 = s * np.sqrt(max(0.5 * (qu + qs), 0.0))
            l2 = (1.0 - s) * np.sqrt(max(0.5 * (qs + qv), 0.0))
            return l1 - l2

        lo, hi = 0.0, 1.0
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            if imbalance(mid) < 0.0:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def refine_pass(self, l_high):
        edges = self.live_edges()
        lens = self.edge_metric_lengths(edges)
        order = np.argsort(lens)[::-1]
        cand = order[lens[order] > l_high]
        # splits may lower quality locally but never below the global worst,
        # so the pass-level minimum quality is monotone
        ids = self.alive_tets()
        floor = float(self.quality_of(self.tets[ids]).min()) if len(ids) else 0.0
        count = 0
        for ci in cand:
            u, v = edges[ci]
            if not (self.node_alive[u] and self.node_alive[v]):
                continue
            if self.frozen[u] and self.frozen[v]:
                continue
            Tuv = sorted(self.edge_tets(u, v))
            if not Tuv:
                continue
            if self._try_split(u, v, Tuv, floor):
                count += 1
        return count

    def _try_split(self, u, v, Tuv, floor=0.0):
        s = self._split_param(u, v)
        x = (1.0 - s) * self.coords[u] + s * self.coords[v]
        tensor = (1.0 - s) * self.tensors[u] + s * self.tensors[v]
        rows = self.tets[Tuv]
        old_q = np.min(self.quality_of(rows))
        mid = self.add_node(x, tensor, self.labels[u] & self.labels[v])
        top = rows.copy()
        top[top == u] = mid
        bot = rows.copy()
        bot[bot == v] = mid
        new = np.concatenate([top, bot])
        vols = signed_volumes(self.coords, new)
        if np.min(vols) <= 0.0 or np.min(self.quality_of(new)) < min(old_q, floor):
            # roll the midpoint node back; the split is skipped
            self.node_alive[mid] = False
            self.node_tets.pop()
            self.labels.pop()
            self.n_nodes -= 1
            return False
        self.drop_tets(Tuv)
        self.add_tets(new)
        return True

    # -- swapping ----------------------------------------------------------

    def swap_pass(self, quality_trigger=0.5, max_ring=7):
        ids = self.alive_tets()
        qual = dict(zip(ids.tolist(), self.quality_of(self.tets[ids]).tolist()))
        edges = self.live_edges()
        cand = []
        for u, v in edges:
            if self.frozen[u] or self.frozen[v]:
                continue
            if self.labels[u] & self.labels[v]:
                continue  # edge lies in a boundary plane
            Tuv = self.edge_tets(u, v)
            if not (3 <= len(Tuv) <= max_ring):
                continue
            worst = min(qual[t] for t in Tuv)
            if worst < quality_trigger:
                cand.append((worst, int(u), int(v)))
        cand.sort()
        count = 0
        for _, u, v in cand:
            Tuv = sorted(self.edge_tets(u, v))
            if not (3 <= len(Tuv) <= max_ring):
                continue
            worst = min(qual.get(t, 0.0) for t in Tuv)
            if worst >= quality_trigger:
                continue
            ring = self._edge_ring(u, v, Tuv)
            if ring is None:
                continue
            cavity_vol = np.abs(signed_volumes(self.coords, self.tets[Tuv])).sum()
            best = self._best_ring_retriangulation(u, v, ring, worst, cavity_vol)
            if best is None:
                continue
            self.drop_tets(Tuv)
            new_ids = self.add_tets(best)
            for t, q in zip(new_ids, self.quality_of(best)):
                qual[int(t)] = float(q)
            count += 1
        return count

    def _edge_ring(self, u, v, Tuv):
        """Ordered cycle of ring nodes around interior edge (u, v)."""
        adj = {}
        for t in Tuv:
            w = [x for x in self.tets[t] if x != u and x != v]
            if len(w) != 2:
                return None
            adj.setdefault(w[0], []).append(w[1])
            adj.setdefault(w[1], []).append(w[0])
        if any(len(p) != 2 for p in adj.values()):
            return None  # boundary or non-manifold edge
        start = next(iter(adj))
        ring = [start]
        prev, cur = None, start
        for _ in range(len(Tuv)):
            nxt = [x for x in adj[cur] if x != prev]
            if not nxt:
                return None
            prev, cur = cur, nxt[0]
            if cur == start:
                break
            ring.append(cur)
        if len(ring) != len(Tuv):
            return None
        return np.array(ring)

    def _best_ring_retriangulation(self, u, v, ring, old_worst, cavity_vol):
        """Best retriangulation of the edge ring, evaluated in one batch."""
        m = len(ring)
        tris = ring[_polygon_triangulations(m)]  # (T, m-2, 3)
        flipped = tris[..., [0, 2, 1]]
        T, k = tris.shape[0], tris.shape[1]
        cand = np.empty((T, 2 * k, 4), dtype=np.int64)
        cand[:, :k, 0] = v
        cand[:, :k, 1:] = tris
        cand[:, k:, 0] = u
        cand[:, k:, 1:] = flipped
        flat = cand.reshape(-1, 4)
        vols = signed_volumes(self.coords, flat).reshape(T, 2 * k)
        # a uniformly negative triangulation is the same one written with
        # opposite parity; mixed signs mean a folded, invalid retriangulation
        neg = (vols < 0.0).all(axis=1)
        cand[neg] = cand[neg][:, :, [0, 1, 3, 2]]
        valid = (vols > 0.0).all(axis=1) | neg
        valid &= np.abs(np.abs(vols).sum(axis=1) - cavity_vol) < 1e-9 * cavity_vol
        if not valid.any():
            return None
        flat = cand.reshape(-1, 4)
        q = self.quality_of(flat).reshape(T, 2 * k).min(axis=1)
        q[~valid] = -1.0
        best = int(np.argmax(q))
        if q[best] <= old_worst + 1e-12:
            return None
        return cand[best]

    # -- smoothing ---------------------------------------------------------

    def _movement_projector(self, i):
        """Projector onto the node's allowed movement subspace, or None if
        the node is immobile."""
        # sorted so the QR factorization (and hence the projector) does not
        # depend on set iteration order, which varies with string hashing
        normals = [
            self.planes[lbl][0] for lbl in sorted(self.labels[i], key=repr)
        ]
        if not normals:
            return np.eye(3)
        N = np.array(normals, dtype=float)
        q, r = np.linalg.qr(N.T)
        rank = int(np.sum(np.abs(np.diag(r)) > 1e-12))
        if rank >= 3:
            return None
        Q = q[:, :rank]
        return np.eye(3) - Q @ Q.T

    def smooth_pass(self):
        count = 0
        for i in range(self.n_nodes):
            if not self.node_alive[i] or self.frozen[i]:
                continue
            Ti = sorted(self.node_tets[i])
            if not Ti:
                continue
            P = self._movement_projector(i)
            if P is None:
                continue
            rows = self.tets[Ti]
            js = np.unique(rows)
            js = js[js != i]
            e = self.coords[js] - self.coords[i]
            Mb = 0.5 * (self.tensors[js] + self.tensors[i])
            w = np.sqrt(np.maximum(np.einsum("ki,kij,kj->k", e, Mb, e), 0.0))
            if w.sum() <= 0.0:
                continue
            target = (w[:, None] * self.coords[js]).sum(axis=0) / w.sum()
            prop = self.coords[i] + P @ (target - self.coords[i])
            old_q = np.min(self.quality_of(rows))
            saved = self.coords[i].copy()
            self.coords[i] = prop
            vols = signed_volumes(self.coords, rows)
            new_q = np.min(self.quality_of(rows))
            if np.min(vols) <= 0.0 or new_q <= old_q:
                self.coords[i] = saved
                continue
            count += 1
        return count

    # -- output ------------------------------------------------------------

    def to_mesh(self):
        """Compact the working arrays into a SimplexMesh + tensor array."""
        live_nodes = np.nonzero(self.node_alive[: self.n_nodes])[0]
        remap = -np.ones(self.n_nodes, dtype=np.int64)
        remap[live_nodes] = np.arange(len(live_nodes))
        tets = remap[self.tets[self.alive_tets()]]
        mesh = SimplexMesh(
            self.coords[live_nodes].copy(),
            tets,
            [self.labels[i] for i in live_nodes],
            self.frozen[live_nodes].copy(),
            self.planes,
            self.n_sides,
        )
        tensors = spd_floor(self.tensors[live_nodes].copy())
        return mesh, tensors


def _as_tensors(metric):
    return metric.tensors if isinstance(metric, NodalMetricField) else np.asarray(metric)


def _run_single_pass(mesh, metric, constraints, name, **kw):
    ad = _Adapter(mesh, _as_tensors(metric), constraints)
    count = getattr(ad, name)(**kw)
    new_mesh, tensors = ad.to_mesh()
    return new_mesh, NodalMetricField(new_mesh, tensors, check=False), count


def coarsen_pass(mesh, metric, constraints=None, l_low=1.0 / SQRT2, l_max=SQRT2):
    """One collapse sweep over edges shorter than l_low in metric space."""
    constraints = constraints or AdaptConstraints()
    return _run_single_pass(
        mesh, metric, constraints, "coarsen_pass", l_low=l_low, l_max=l_max
    )


def refine_pass(mesh, metric, constraints=None, l_high=SQRT2):
    """One split sweep over edges longer than l_high in metric space."""
    constraints = constraints or AdaptConstraints()
    return _run_single_pass(mesh, metric, constraints, "refine_pass", l_high=l_high)


def swap_pass(mesh, metric, constraints=None):
    """One edge-swap sweep over low-quality interior edge rings."""
    constraints = constraints or AdaptConstraints()
    return _run_single_pass(mesh, metric, constraints, "swap_pass")


def smooth_pass(mesh, metric, constraints=None):
    """One metric-weighted Laplacian smoothing sweep."""
    constraints = constraints or AdaptConstraints()
    return _run_single_pass(mesh, metric, constraints, "smooth_pass")


def quality_report(mesh, metric, l_low=1.0 / SQRT2, l_high=SQRT2):
    tensors = _as_tensors(metric)
    quals = tet_qualities(mesh.nodes[mesh.tets], tensors[mesh.tets])
    edges = mesh.edges()
    e = mesh.nodes[edges[:, 1]] - mesh.nodes[edges[:, 0]]
    Mb = 0.5 * (tensors[edges[:, 0]] + tensors[edges[:, 1]])
    lens = np.sqrt(np.maximum(np.einsum("ki,kij,kj->k", e, Mb, e), 0.0))
    in_band = np.mean((lens >= l_low) & (lens <= l_high)) * 100.0
    return QualityReport(
        qualities=quals,
        min_quality=float(quals.min()) if len(quals) else 0.0,
        mean_quality=float(quals.mean()) if len(quals) else 0.0,
        edge_lengths=lens,
        pct_in_band=float(in_band),
    )


def adapt(
    mesh,
    metric,
    constraints=None,
    max_sweeps=5,
    l_low=1.0 / SQRT2,
    l_high=SQRT2,
    min_change_fraction=0.01,
):
    """Adapt the mesh toward unit metric edge lengths.

    Runs [coarsen, swap, refine, swap, smooth] sweeps until fewer than
    min_change_fraction of the edges are modified or max_sweeps is
    reached.  Returns (mesh, metric on the new mesh, QualityReport).
    """
    constraints = constraints or AdaptConstraints()
    log = []
    for sweep in range(1, max_sweeps + 1):
        ad = _Adapter(mesh, _as_tensors(metric), constraints)
        n_edges = max(len(ad.live_edges()), 1)
        changed = ad.coarsen_pass(l_low, l_high)
        changed += ad.swap_pass()
        changed += ad.refine_pass(l_high)
        changed += ad.swap_pass()
        changed += ad.smooth_pass()
        mesh, tensors = ad.to_mesh()
        metric = NodalMetricField(mesh, tensors, check=False)
        rep = quality_report(mesh, metric, l_low, l_high)
        log.append(
            (sweep, mesh.n_nodes, mesh.n_tets, rep.min_quality, rep.mean_quality, rep.pct_in_band)
        )
        if changed < min_change_fraction * n_edges:
            break
    report = quality_report(mesh, metric, l_low, l_high)
    report.sweep_log = log
    return mesh, metric, report
