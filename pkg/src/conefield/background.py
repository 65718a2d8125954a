"""Triangulation of domains and first-order Galerkin Laplace/Poisson solves.

Neumann data follows the package-wide inward-normal convention (see
``geometry``): the prescribed flux is d(phi)/dN with N pointing into the
domain, so compatibility for ``lap(phi) = rhs`` reads
``loop-integral(g) + area-integral(rhs) = 0``.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
import shapely
from scipy.sparse import coo_matrix, csc_matrix
from scipy.sparse.linalg import factorized
from scipy.spatial import Delaunay

from .errors import CompatibilityError, MeshError, ParameterError, SolverError
from .geometry import ArcSegment, DomainSpec, LineSegment

# documented circumradius constant: triangulate() guarantees R_circ <= C * h
CIRCUMRADIUS_C = 2.0

NEUMANN_COMPAT_TOL = 1e-6


# ---------------------------------------------------------------------------
# mesh container
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class BoundaryEdgeTag:
    loop: int
    segment: int
    s0: float
    s1: float


class TriMesh:
    """Conforming triangle mesh with tagged boundary edges."""

    def __init__(self, vertices, triangles, boundary_edges, boundary_tags):
        self.vertices = np.asarray(vertices, dtype=float)
        self.triangles = np.asarray(triangles, dtype=np.int64)
        self.boundary_edges = np.asarray(boundary_edges, dtype=np.int64)
        self.boundary_tags = list(boundary_tags)
        if len(self.boundary_tags) != len(self.boundary_edges):
            raise MeshError("boundary tag count does not match edge count")
        self._check()
        self._grads = None
        self._areas = None
        self._bins = None
        self._bin_size = None

    def _check(self):
        v, t = self.vertices, self.triangles
        p0, p1, p2 = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
        areas = 0.5 * (
            (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
            - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1])
        )
        if np.any(areas <= 0):
            raise MeshError("mesh contains non-positively-oriented triangles")
        self.areas = areas

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def boundary_vertices(self) -> np.ndarray:
        return np.unique(self.boundary_edges.ravel())

    def edge_lengths(self) -> np.ndarray:
        v = self.vertices
        e = self.boundary_edges
        d = v[e[:, 1]] - v[e[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    def h_max(self) -> float:
        v, t = self.vertices, self.triangles
        h = 0.0
        for a, b in ((0, 1), (1, 2), (2, 0)):
            d = v[t[:, a]] - v[t[:, b]]
            h = max(h, float(np.max(np.hypot(d[:, 0], d[:, 1]))))
        return h

    def circumradii(self) -> np.ndarray:
        v, t = self.vertices, self.triangles
        a = np.hypot(*(v[t[:, 1]] - v[t[:, 2]]).T)
        b = np.hypot(*(v[t[:, 2]] - v[t[:, 0]]).T)
        c = np.hypot(*(v[t[:, 0]] - v[t[:, 1]]).T)
        return a * b * c / (4.0 * self.areas)

    # -- P1 gradients and point location ------------------------------------

    def _tri_grads(self):
        if self._grads is None:
            v, t = self.vertices, self.triangles
            p0, p1, p2 = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
            two_a = 2.0 * self.areas
            # gradient of barycentric coordinates
            gb0 = np.stack([p1[:, 1] - p2[:, 1], p2[:, 0] - p1[:, 0]], axis=1) / two_a[:, None]
            gb1 = np.stack([p2[:, 1] - p0[:, 1], p0[:, 0] - p2[:, 0]], axis=1) / two_a[:, None]
            gb2 = np.stack([p0[:, 1] - p1[:, 1], p1[:, 0] - p0[:, 0]], axis=1) / two_a[:, None]
            self._grads = np.stack([gb0, gb1, gb2], axis=1)  # (M, 3, 2)
        return self._grads

    def _build_bins(self):
        v, t = self.vertices, self.triangles
        lo = v.min(axis=0)
        hi = v.max(axis=0)
        n = max(1, int(math.sqrt(len(t))))
        size = max((hi - lo).max() / n, 1e-12)
        bins = {}
        tv = v[t]  # (M,3,2)
        tmin = ((tv.min(axis=1) - lo) / size).astype(int)
        tmax = ((tv.max(axis=1) - lo) / size).astype(int)
        for i in range(len(t)):
            for ix in range(tmin[i, 0], tmax[i, 0] + 1):
                for iy in range(tmin[i, 1], tmax[i, 1] + 1):
                    bins.setdefault((ix, iy), []).append(i)
        self._bins = bins
        self._bin_lo = lo
        self._bin_size = size

    def locate(self, pts, tol=1e-9):
        """Triangle index and barycentric coordinates for each point."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self._bins is None:
            self._build_bins()
        v, t = self.vertices, self.triangles
        out_tri = np.full(len(pts), -1, dtype=np.int64)
        out_bary = np.zeros((len(pts), 3))
        scale = max(self._bin_size, 1.0)
        for n, p in enumerate(pts):
            cell = tuple(((p - self._bin_lo) / self._bin_size).astype(int))
            best, best_bary, best_min = -1, None, -math.inf
            for dx in (0, -1, 1):
                for dy in (0, -1, 1):
                    for ti in self._bins.get((cell[0] + dx, cell[1] + dy), ()):
                        bary = self._bary(ti, p)
                        m = bary.min()
                        if m > best_min:
                            best, best_bary, best_min = ti, bary, m
                    if best_min >= 0.0:
                        break
                if best_min >= 0.0:
                    break
            if best < 0 or best_min < -tol * scale:
                raise ParameterError(f"point {tuple(p)} is outside the mesh")
            out_tri[n] = best
            out_bary[n] = np.clip(best_bary, 0.0, None)
            out_bary[n] /= out_bary[n].sum()
        return out_tri, out_bary

    def _bary(self, ti, p):
        i, j, k = self.triangles[ti]
        p0, p1, p2 = self.vertices[i], self.vertices[j], self.vertices[k]
        two_a = 2.0 * self.areas[ti]
        l0 = ((p1[0] - p[0]) * (p2[1] - p[1]) - (p2[0] - p[0]) * (p1[1] - p[1])) / two_a
        l1 = ((p2[0] - p[0]) * (p0[1] - p[1]) - (p0[0] - p[0]) * (p2[1] - p[1])) / two_a
        return np.array([l0, l1, 1.0 - l0 - l1])

    # -- plain-text serialization (documented in README) ---------------------

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write("conefield-trimesh 1\n")
        buf.write(f"{len(self.vertices)} {len(self.triangles)} {len(self.boundary_edges)}\n")
        for x, y in self.vertices:
            buf.write(f"{x!r} {y!r}\n")
        for a, b, c in self.triangles:
            buf.write(f"{a} {b} {c}\n")
        for (a, b), tag in zip(self.boundary_edges, self.boundary_tags):
            buf.write(f"{a} {b} {tag.loop} {tag.segment} {tag.s0!r} {tag.s1!r}\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "TriMesh":
        lines = text.strip().splitlines()
        if not lines or not lines[0].startswith("conefield-trimesh 1"):
            raise MeshError("not a conefield-trimesh v1 document")
        nv, nt, nbe = (int(x) for x in lines[1].split())
        row = 2
        verts = np.array(
            [[float(x) for x in lines[row + i].split()] for i in range(nv)]
        )
        row += nv
        tris = np.array(
            [[int(x) for x in lines[row + i].split()] for i in range(nt)], dtype=np.int64
        )
        row += nt
        edges, tags = [], []
        for i in range(nbe):
            parts = lines[row + i].split()
            edges.append((int(parts[0]), int(parts[1])))
            tags.append(
                BoundaryEdgeTag(int(parts[2]), int(parts[3]), float(parts[4]), float(parts[5]))
            )
        return cls(verts, tris, np.array(edges, dtype=np.int64), tags)

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_text())

    @classmethod
    def load(cls, path) -> "TriMesh":
        with open(path) as f:
            return cls.from_text(f.read())


class NodalField:
    """One scalar per mesh vertex, interpolated piecewise-linearly."""

    is_numeric = True

    def __init__(self, mesh: TriMesh, values, boundary_normal_derivative=None):
        values = np.asarray(values, dtype=float)
        if values.shape != (mesh.n_vertices,):
            raise ParameterError("nodal value count does not match vertex count")
        if not np.all(np.isfinite(values)):
            raise SolverError("non-finite nodal values")
        self.mesh = mesh
        self.values = values
        # optional per-boundary-vertex inward-normal derivative (variational flux)
        self.boundary_normal_derivative = boundary_normal_derivative
        self._nodal_grad = None

    def value_at(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        tri, bary = self.mesh.locate(pts)
        return np.einsum("ij,ij->i", self.values[self.mesh.triangles[tri]], bary)

    def grad_at(self, pts, recovered: bool = True) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        tri, bary = self.mesh.locate(pts)
        if not recovered:
            g = self.mesh._tri_grads()[tri]  # (n,3,2)
            return np.einsum("nj,njk->nk", self.values[self.mesh.triangles[tri]], g)
        ng = self._nodal_gradients()[self.mesh.triangles[tri]]  # (n,3,2)
        return np.einsum("nj,njk->nk", bary, ng)

    def _nodal_gradients(self):
        # area-weighted average of adjacent element gradients (recovery)
        if self._nodal_grad is None:
            mesh = self.mesh
            g = mesh._tri_grads()
            elem_grad = np.einsum("mj,mjk->mk", self.values[mesh.triangles], g)
            acc = np.zeros((mesh.n_vertices, 2))
            wsum = np.zeros(mesh.n_vertices)
            for c in range(3):
                np.add.at(acc, mesh.triangles[:, c], elem_grad * mesh.areas[:, None])
                np.add.at(wsum, mesh.triangles[:, c], mesh.areas)
            self._nodal_grad = acc / wsum[:, None]
        return self._nodal_grad

    def mean(self) -> float:
        mesh = self.mesh
        vert_w = np.zeros(mesh.n_vertices)
        for c in range(3):
            np.add.at(vert_w, mesh.triangles[:, c], mesh.areas / 3.0)
        return float(np.dot(vert_w, self.values) / vert_w.sum())


# ---------------------------------------------------------------------------
# triangulation
# ---------------------------------------------------------------------------


# junction grading: spacing halves per level within radii GRADE_R * h * 2^-level
GRADE_LEVELS = 3
GRADE_R = 6.0


def _grade_level(d, h):
    """Refinement level (0..GRADE_LEVELS) for a point at distance d from a junction."""
    for lev in range(GRADE_LEVELS, 0, -1):
        if d < GRADE_R * h * 2.0 ** (-lev):
            return lev
    return 0


def _graded_svals(seg, h, start_graded, end_graded):
    """Arclength samples along one segment, refined toward junction endpoints."""
    n_probe = max(16, int(math.ceil(seg.length / (h / 2.0**GRADE_LEVELS))))
    s = np.linspace(0.0, seg.length, n_probe + 1)
    d = np.full_like(s, np.inf)
    if start_graded:
        d = np.minimum(d, s)
    if end_graded:
        d = np.minimum(d, seg.length - s)
    eta = np.array([h * 2.0 ** (-_grade_level(di, h)) for di in d])
    density = np.concatenate([[0.0], np.cumsum(0.5 * (1 / eta[1:] + 1 / eta[:-1]) * np.diff(s))])
    n = max(1, int(math.ceil(density[-1])))
    if isinstance(seg, ArcSegment):
        dphi = 2.0 * math.asin(min(1.0, h / (2.0 * seg.radius)))
        n = max(n, int(math.ceil(abs(seg.sweep) / dphi)), 2)
    targets = np.linspace(0.0, density[-1], n + 1)
    return np.interp(targets, density, s)


def _sample_loop(loop, loop_id, h, junction_corners):
    """Boundary chain samples with (segment, arclength) tags, one per vertex."""
    pts, tags = [], []
    nseg = len(loop.segments)
    for si, seg in enumerate(loop.segments):
        start_j = (loop_id, (si - 1) % nseg) in junction_corners
        end_j = (loop_id, si) in junction_corners
        s_vals = _graded_svals(seg, h, start_j, end_j)
        for s in s_vals[:-1]:
            pts.append(seg.point_at(float(s)))
            tags.append((si, float(s)))
    return np.asarray(pts), tags


def _hex_lattice(lo, hi, h, offset):
    dy = h * math.sqrt(3.0) / 2.0
    ys = np.arange(lo[1] - h + offset[1], hi[1] + h, dy)
    pts = []
    for row, y in enumerate(ys):
        x0 = lo[0] - h + offset[0] + (0.5 * h if row % 2 else 0.0)
        xs = np.arange(x0, hi[0] + h, h)
        pts.append(np.stack([xs, np.full_like(xs, y)], axis=1))
    return np.vstack(pts) if pts else np.zeros((0, 2))


def _segment_distance_many(seg, pts):
    if isinstance(seg, LineSegment):
        a, d = seg.p0, seg.p1 - seg.p0
        t = np.clip(((pts - a) @ d) / (d @ d), 0.0, 1.0)
        proj = a + t[:, None] * d
        return np.hypot(*(proj - pts).T)
    if isinstance(seg, ArcSegment):
        v = pts - seg.center
        r = np.hypot(v[:, 0], v[:, 1])
        ang = np.arctan2(v[:, 1], v[:, 0])
        rel = (
            np.mod(ang - seg.angle0, 2 * math.pi)
            if seg.sweep > 0
            else np.mod(seg.angle0 - ang, 2 * math.pi)
        )
        on_arc = rel <= abs(seg.sweep)
        d_arc = np.abs(r - seg.radius)
        d_ends = np.minimum(
            np.hypot(*(pts - seg.start).T), np.hypot(*(pts - seg.end).T)
        )
        return np.where(on_arc, d_arc, d_ends)
    best = np.full(len(pts), np.inf)
    p = seg.points
    for a, b in zip(p[:-1], p[1:]):
        d = b - a
        t = np.clip(((pts - a) @ d) / (d @ d), 0.0, 1.0)
        proj = a + t[:, None] * d
        best = np.minimum(best, np.hypot(*(proj - pts).T))
    return best


def boundary_distance_many(domain: DomainSpec, pts) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    best = np.full(len(pts), np.inf)
    for lp in domain.loops:
        for seg in lp.segments:
            best = np.minimum(best, _segment_distance_many(seg, pts))
    return best


_LATTICE_OFFSETS = [
    (0.0, 0.0),
    (0.31, 0.17),
    (0.5, 0.29),
    (0.13, 0.41),
    (0.47, 0.05),
    (0.23, 0.37),
]


def triangulate(domain: DomainSpec, h: float) -> TriMesh:
    """Refinement-free lattice triangulation: boundary chains at spacing <= h
    plus a hexagonal interior lattice, Delaunay-connected and filtered to the
    domain.  Circumradii are bounded by CIRCUMRADIUS_C * h.
    """
    if not (isinstance(h, (int, float)) and h > 0):
        raise ParameterError(f"mesh size h must be positive, got {h!r}")
    if h >= domain.diameter:
        raise ParameterError(f"mesh size h={h} too large for domain")

    junction_corners = {(j.loop_index, j.incident[0]) for j in domain.junctions}
    chains = []  # per loop: (points array, tags)
    for li, lp in enumerate(domain.loops):
        chains.append(_sample_loop(lp, li, h, junction_corners))

    bpts = np.vstack([c[0] for c in chains])
    poly = domain.shapely_polygon()
    lo = np.array(poly.bounds[:2])
    hi = np.array(poly.bounds[2:])
    jpos = (
        np.array([j.position for j in domain.junctions])
        if domain.junctions
        else np.zeros((0, 2))
    )

    def _junction_distance(pts):
        if len(jpos) == 0:
            return np.full(len(pts), np.inf)
        d = np.full(len(pts), np.inf)
        for jp in jpos:
            d = np.minimum(d, np.hypot(pts[:, 0] - jp[0], pts[:, 1] - jp[1]))
        return d

    last_error = None
    for off in _LATTICE_OFFSETS:
        parts = []
        lattice = _hex_lattice(lo, hi, h, (off[0] * h, off[1] * h))
        if len(lattice):
            keep = _junction_distance(lattice) >= GRADE_R * h * 2.0 ** (-1)
            parts.append((lattice[keep], h))
        for lev in range(1, GRADE_LEVELS + 1):
            h_l = h * 2.0 ** (-lev)
            r_out = GRADE_R * h * 2.0 ** (-lev)
            r_in = 0.0 if lev == GRADE_LEVELS else GRADE_R * h * 2.0 ** (-lev - 1)
            for jp in jpos:
                local = _hex_lattice(
                    jp - 1.5 * r_out, jp + 1.5 * r_out, h_l, (off[0] * h_l, off[1] * h_l)
                )
                if not len(local):
                    continue
                d = _junction_distance(local)
                local = local[(d >= r_in) & (d < r_out)]
                if len(local):
                    parts.append((local, h_l))
        kept = []
        for pts_part, h_l in parts:
            if not len(pts_part):
                continue
            inside = shapely.contains_xy(poly, pts_part[:, 0], pts_part[:, 1])
            pts_part = pts_part[inside]
            if len(pts_part):
                clear = boundary_distance_many(domain, pts_part) >= 0.52 * h_l
                pts_part = pts_part[clear]
            if len(pts_part):
                kept.append(pts_part)
        lattice = np.vstack(kept) if kept else np.zeros((0, 2))
        allpts = np.vstack([bpts, lattice]) if len(lattice) else bpts
        try:
            return _mesh_from_points(domain, chains, allpts, len(bpts), h)
        except MeshError as exc:
            last_error = exc
    raise MeshError(f"triangulation failed for all lattice offsets: {last_error}")


def _mesh_from_points(domain, chains, allpts, n_boundary, h):
    tri = Delaunay(allpts)
    simplices = tri.simplices
    cent = allpts[simplices].mean(axis=1)
    poly = domain.shapely_polygon()
    keep = shapely.contains_xy(poly, cent[:, 0], cent[:, 1])
    simplices = simplices[keep]

    # positive orientation
    p0, p1, p2 = (allpts[simplices[:, i]] for i in range(3))
    areas = 0.5 * (
        (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
        - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1])
    )
    flip = areas < 0
    simplices[flip] = simplices[flip][:, [0, 2, 1]]
    simplices = simplices[np.abs(areas) > 1e-14 * h * h]

    # edge census: boundary edges of the kept mesh must be exactly the chains
    edge_count = {}
    for t in simplices:
        for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            key = (min(a, b), max(a, b))
            edge_count[key] = edge_count.get(key, 0) + 1

    boundary_edges, boundary_tags = [], []
    idx0 = 0
    for li, (pts, tags) in enumerate(chains):
        n = len(pts)
        loop = domain.loops[li]
        for j in range(n):
            a = idx0 + j
            b = idx0 + (j + 1) % n
            key = (min(a, b), max(a, b))
            if edge_count.get(key, 0) != 1:
                raise MeshError(
                    f"boundary chain edge {key} not conforming (count "
                    f"{edge_count.get(key, 0)})"
                )
            si, s0 = tags[j]
            if (j + 1) % n == 0 or tags[(j + 1) % n][0] != si:
                s1 = loop.segments[si].length
            else:
                s1 = tags[(j + 1) % n][1]
            boundary_edges.append((a, b))
            boundary_tags.append(BoundaryEdgeTag(li, si, s0, s1))
        idx0 += n

    exterior = {k for k, c in edge_count.items() if c == 1}
    chain_keys = {(min(a, b), max(a, b)) for a, b in boundary_edges}
    if exterior != chain_keys:
        raise MeshError(
            f"mesh boundary does not match domain boundary "
            f"({len(exterior ^ chain_keys)} mismatched edges)"
        )

    mesh = TriMesh(allpts, simplices, np.array(boundary_edges), boundary_tags)
    rmax = float(mesh.circumradii().max())
    if rmax > CIRCUMRADIUS_C * h:
        raise MeshError(f"circumradius bound violated: {rmax:.4g} > {CIRCUMRADIUS_C}*{h}")
    return mesh


# ---------------------------------------------------------------------------
# P1 Galerkin solvers
# ---------------------------------------------------------------------------


def stiffness_matrix(mesh: TriMesh) -> csc_matrix:
    g = mesh._tri_grads()  # (M,3,2)
    areas = mesh.areas
    rows, cols, vals = [], [], []
    for i in range(3):
        for j in range(3):
            rows.append(mesh.triangles[:, i])
            cols.append(mesh.triangles[:, j])
            vals.append(areas * np.einsum("mk,mk->m", g[:, i], g[:, j]))
    A = coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(mesh.n_vertices, mesh.n_vertices),
    )
    return A.tocsc()


def lumped_vertex_areas(mesh: TriMesh) -> np.ndarray:
    w = np.zeros(mesh.n_vertices)
    for c in range(3):
        np.add.at(w, mesh.triangles[:, c], mesh.areas / 3.0)
    return w


def _rhs_load(mesh, rhs):
    """Load vector of the interior source: integral of rhs * hat_i."""
    if rhs is None:
        return np.zeros(mesh.n_vertices)
    v, t = mesh.vertices, mesh.triangles
    mids = [
        0.5 * (v[t[:, 0]] + v[t[:, 1]]),
        0.5 * (v[t[:, 1]] + v[t[:, 2]]),
        0.5 * (v[t[:, 2]] + v[t[:, 0]]),
    ]
    fvals = [np.array([rhs(x, y) for x, y in m]) for m in mids]
    b = np.zeros(mesh.n_vertices)
    # hat function values at opposite edge midpoints: 1/2, 0, 1/2
    contrib = {0: (0, 2), 1: (0, 1), 2: (1, 2)}
    for corner, (e1, e2) in contrib.items():
        np.add.at(
            b, t[:, corner], mesh.areas / 3.0 * 0.5 * (fvals[e1] + fvals[e2])
        )
    return b


_GL2 = (0.5 - math.sqrt(3) / 6.0, 0.5 + math.sqrt(3) / 6.0)


def _flux_values_per_edge(mesh, flux):
    """Evaluate inward-normal flux data at the two Gauss points of each edge."""
    e = mesh.boundary_edges
    if callable(flux):
        a = mesh.vertices[e[:, 0]]
        b = mesh.vertices[e[:, 1]]
        g = np.zeros((len(e), 2))
        for k, t in enumerate(_GL2):
            p = a + t * (b - a)
            g[:, k] = [flux(x, y) for x, y in p]
        return g
    flux = np.asarray(flux, dtype=float)
    if flux.shape == (len(e),):
        return np.stack([flux, flux], axis=1)
    if flux.shape == (len(e), 2):
        return flux
    raise ParameterError("flux must be callable or per-boundary-edge array")


def _flux_load(mesh, gvals):
    """Load vector of the boundary term: integral of g * hat_i ds."""
    e = mesh.boundary_edges
    ell = mesh.edge_lengths()
    b = np.zeros(mesh.n_vertices)
    w0 = ell * ((1 - _GL2[0]) * gvals[:, 0] + (1 - _GL2[1]) * gvals[:, 1]) / 2.0
    w1 = ell * (_GL2[0] * gvals[:, 0] + _GL2[1] * gvals[:, 1]) / 2.0
    np.add.at(b, e[:, 0], w0)
    np.add.at(b, e[:, 1], w1)
    return b


class NeumannSolver:
    """Factorized zero-mean Neumann solver, reusable across data sets."""

    def __init__(self, mesh: TriMesh):
        self.mesh = mesh
        self._A = stiffness_matrix(mesh)
        self._m = lumped_vertex_areas(mesh)
        n = mesh.n_vertices
        acoo = self._A.tocoo()
        bordered = coo_matrix(
            (
                np.concatenate([acoo.data, self._m, self._m]),
                (
                    np.concatenate([acoo.row, np.full(n, n), np.arange(n)]),
                    np.concatenate([acoo.col, np.arange(n), np.full(n, n)]),
                ),
            ),
            shape=(n + 1, n + 1),
        ).tocsc()
        self._solve = factorized(bordered)

    def solve(self, flux=None, rhs=None, compat_tol=NEUMANN_COMPAT_TOL) -> NodalField:
        mesh = self.mesh
        gvals = (
            _flux_values_per_edge(mesh, flux)
            if flux is not None
            else np.zeros((len(mesh.boundary_edges), 2))
        )
        rhs_b = _rhs_load(mesh, rhs)
        ell = mesh.edge_lengths()
        flux_total = float(np.sum(ell * gvals.mean(axis=1)))
        source_total = float(rhs_b.sum())
        defect = abs(flux_total + source_total)
        scale = max(
            1.0, abs(flux_total), abs(source_total), float(np.abs(gvals).max(initial=0.0))
        )
        if defect > compat_tol * scale:
            raise CompatibilityError(defect, compat_tol)

        b = -_flux_load(mesh, gvals) - rhs_b
        rhs_full = np.concatenate([b, [0.0]])
        sol = self._solve(rhs_full)
        u = sol[:-1]
        resid = self._A @ u + self._m * sol[-1] - b
        rel = np.linalg.norm(resid) / max(np.linalg.norm(b), 1e-30)
        if not np.all(np.isfinite(u)) or rel > 1e-10:
            raise SolverError(f"Neumann solve residual {rel:.3e} exceeds 1e-10")
        u = u - np.dot(self._m, u) / self._m.sum()
        return NodalField(mesh, u, boundary_normal_derivative=_per_vertex_data(mesh, gvals))


def _per_vertex_data(mesh, gvals):
    """Average per-edge data onto boundary vertices (for later checks)."""
    e = mesh.boundary_edges
    acc = np.zeros(mesh.n_vertices)
    w = np.zeros(mesh.n_vertices)
    ell = mesh.edge_lengths()
    for col, vk in ((0, e[:, 0]), (1, e[:, 1])):
        np.add.at(acc, vk, gvals[:, col] * ell)
        np.add.at(w, vk, ell)
    out = np.full(mesh.n_vertices, np.nan)
    bv = mesh.boundary_vertices
    out[bv] = acc[bv] / w[bv]
    return out


class DirichletSolver:
    """Factorized Laplace solver with boundary interpolation."""

    def __init__(self, mesh: TriMesh):
        self.mesh = mesh
        self._A = stiffness_matrix(mesh)
        n = mesh.n_vertices
        bv = mesh.boundary_vertices
        mask = np.zeros(n, dtype=bool)
        mask[bv] = True
        self._interior = np.where(~mask)[0]
        self._boundary = np.where(mask)[0]
        Aii = self._A[self._interior][:, self._interior]
        self._Aib = self._A[self._interior][:, self._boundary]
        self._solve = factorized(csc_matrix(Aii))

    def solve(self, values) -> NodalField:
        mesh = self.mesh
        ub = self._eval_boundary(values)
        u = np.zeros(mesh.n_vertices)
        u[self._boundary] = ub
        rhs = -self._Aib @ ub
        ui = self._solve(rhs)
        if not np.all(np.isfinite(ui)):
            raise SolverError("Dirichlet solve produced non-finite values")
        u[self._interior] = ui

        # variational boundary flux: sigma_i = (A u)_i = -integral(dphi/dN hat_i ds)
        sigma = (self._A @ u)[self._boundary]
        w = np.zeros(mesh.n_vertices)
        ell = mesh.edge_lengths()
        e = mesh.boundary_edges
        np.add.at(w, e[:, 0], 0.5 * ell)
        np.add.at(w, e[:, 1], 0.5 * ell)
        dn = np.full(mesh.n_vertices, np.nan)
        dn[self._boundary] = -sigma / w[self._boundary]
        return NodalField(mesh, u, boundary_normal_derivative=dn)

    def _eval_boundary(self, values):
        pts = self.mesh.vertices[self._boundary]
        if callable(values):
            vals = np.array([values(x, y) for x, y in pts], dtype=float)
        else:
            vals = np.asarray(values, dtype=float)
            if vals.shape != (len(self._boundary),):
                raise ParameterError("boundary value array has wrong length")
        if not np.all(np.isfinite(vals)):
            raise ParameterError("boundary values must be finite")
        return vals


def condition2_edge_flux(domain: DomainSpec, mesh: TriMesh) -> np.ndarray:
    """Per-boundary-edge Neumann data for the boundary-alignment relation.

    Each edge carries the exact turning increment of its tagged boundary
    piece divided by the chord length, so the discrete loop flux matches
    the continuous one to roundoff.
    """
    from .geometry import wrap_angle

    ell = mesh.edge_lengths()
    g = np.zeros(len(mesh.boundary_edges))
    for i, tag in enumerate(mesh.boundary_tags):
        seg = domain.loops[tag.loop].segments[tag.segment]
        t0 = seg.tangent_at(tag.s0)
        t1 = seg.tangent_at(min(tag.s1, seg.length))
        dtheta = wrap_angle(
            math.atan2(t1[1], t1[0]) - math.atan2(t0[1], t0[0])
        )
        g[i] = dtheta / ell[i]
    return g


def log_charge_edge_flux(mesh: TriMesh, positions, strengths) -> np.ndarray:
    """Exact per-edge inward-normal flux of log charges, as edge averages.

    The flux of (Q/2pi) ln|r-p| through a straight edge equals -(Q/2pi)
    times the angle the edge subtends at p, which keeps the discrete
    compatibility sum exact.
    """
    from .geometry import wrap_angle

    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    strengths = np.asarray(strengths, dtype=float).reshape(-1)
    e = mesh.boundary_edges
    a = mesh.vertices[e[:, 0]]
    b = mesh.vertices[e[:, 1]]
    ell = mesh.edge_lengths()
    g = np.zeros(len(e))
    for p, Q in zip(positions, strengths):
        ang_a = np.arctan2(a[:, 1] - p[1], a[:, 0] - p[0])
        ang_b = np.arctan2(b[:, 1] - p[1], b[:, 0] - p[0])
        delta = np.array([wrap_angle(d) for d in (ang_b - ang_a)])
        g += -(Q / (2.0 * math.pi)) * delta / ell
    return g


def solve_neumann(mesh: TriMesh, flux, rhs=None) -> NodalField:
    """Zero-mean solution of lap(u) = rhs with inward-normal flux data."""
    return NeumannSolver(mesh).solve(flux, rhs)


def solve_dirichlet(mesh: TriMesh, values) -> NodalField:
    """Solution of lap(u) = 0 interpolating the boundary data."""
    return DirichletSolver(mesh).solve(values)
