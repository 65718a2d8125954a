"""The conformal factor phi and the metric quantities derived from it.

A field is a sum of three parts: a harmonic background (nodal FEM data or
a closed form), logarithmic terms from quantized point charges (cone
points and junction charges), and an additive constant.  The local cell
size is exp(-phi); curve length and region area under the cone metric
are integrals of exp(phi) ds and exp(2*phi) da.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from .errors import ParameterError, ProximityError
from .geometry import (
    ArcSegment,
    LineSegment,
    PolylineSegment,
    rot90,
)

TAU = 2.0 * math.pi
_QUANTA = {"quad": math.pi / 2.0, "tri": math.pi / 3.0}

# evaluation guard around singular points, relative to the domain scale
CONE_GUARD_REL = 1e-9


@dataclass(frozen=True, eq=False)
class ConePoint:
    """An isolated metric singularity of charge k*q (2*k*q on the boundary)."""

    position: np.ndarray
    k: int
    location: str = "interior"  # interior | boundary

    def __init__(self, position, k, location="interior"):
        object.__setattr__(self, "position", np.asarray(position, dtype=float).reshape(2))
        object.__setattr__(self, "k", int(k))
        if location not in ("interior", "boundary"):
            raise ParameterError(f"cone location must be interior|boundary, got {location!r}")
        object.__setattr__(self, "location", location)

    def strength(self, q: float) -> float:
        if self.location == "boundary":
            return self.k * 2.0 * q
        return self.k * q


@dataclass(frozen=True, eq=False)
class JunctionCharge:
    """A real charge sitting at a boundary junction (not lattice-bound)."""

    position: np.ndarray
    Q: float

    def __init__(self, position, Q):
        object.__setattr__(self, "position", np.asarray(position, dtype=float).reshape(2))
        object.__setattr__(self, "Q", float(Q))


@dataclass(frozen=True, eq=False)
class HarmonicClosedForm:
    """Closed-form harmonic background given by callables."""

    value_fn: callable
    grad_fn: callable
    name: str = "closed_form"
    is_numeric = False

    def value_at(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.asarray([self.value_fn(x, y) for x, y in pts], dtype=float)

    def grad_at(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.asarray([self.grad_fn(x, y) for x, y in pts], dtype=float)


class PhiField:
    """phi = harmonic part + sum of (Q_i / 2 pi) ln|r - p_i| + C."""

    def __init__(
        self,
        quantum: str = "quad",
        cones=(),
        junction_charges=(),
        harmonic=None,
        constant: float = 0.0,
        scale: float = 1.0,
    ):
        if quantum not in _QUANTA:
            raise ParameterError(f"quantum must be 'quad' or 'tri', got {quantum!r}")
        self.quantum_mode = quantum
        self.cones = tuple(cones)
        self.junction_charges = tuple(junction_charges)
        self.harmonic = harmonic
        self.constant = float(constant)
        self.scale = float(scale)
        if self.scale <= 0:
            raise ParameterError("scale must be positive")
        k_min = -4 if quantum == "quad" else -6
        for c in self.cones:
            if c.location == "interior" and c.k <= k_min:
                warnings.warn(
                    f"interior cone charge k={c.k} <= {k_min}: the metric area "
                    "diverges around it",
                    stacklevel=2,
                )
            elif not (-1 <= c.k <= 2):
                warnings.warn(
                    f"cone charge k={c.k} lies outside the practical range [-1, 2]",
                    stacklevel=2,
                )
        self._charges = self._collect_charges()

    # -- structure -----------------------------------------------------------

    @property
    def q(self) -> float:
        return _QUANTA[self.quantum_mode]

    @property
    def is_numeric(self) -> bool:
        return bool(self.harmonic is not None and getattr(self.harmonic, "is_numeric", False))

    def _collect_charges(self):
        pos, Q = [], []
        for c in self.cones:
            pos.append(c.position)
            Q.append(c.strength(self.q))
        for jc in self.junction_charges:
            pos.append(jc.position)
            Q.append(jc.Q)
        if pos:
            return np.asarray(pos, dtype=float), np.asarray(Q, dtype=float)
        return np.zeros((0, 2)), np.zeros(0)

    def singular_points(self) -> np.ndarray:
        return self._charges[0]

    @property
    def guard_radius(self) -> float:
        return CONE_GUARD_REL * self.scale

    def singular_distance(self, p) -> float:
        pos, _ = self._charges
        if len(pos) == 0:
            return math.inf
        p = np.asarray(p, dtype=float)
        return float(np.min(np.hypot(pos[:, 0] - p[0], pos[:, 1] - p[1])))

    def with_constant(self, constant: float) -> "PhiField":
        return PhiField(
            quantum=self.quantum_mode,
            cones=self.cones,
            junction_charges=self.junction_charges,
            harmonic=self.harmonic,
            constant=constant,
            scale=self.scale,
        )

    # -- evaluation ------------------------------------------------------------

    def phi_many(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = np.full(len(pts), self.constant, dtype=float)
        pos, Q = self._charges
        for p, qq in zip(pos, Q):
            r = np.hypot(pts[:, 0] - p[0], pts[:, 1] - p[1])
            out += (qq / TAU) * np.log(r)
        if self.harmonic is not None:
            out += self.harmonic.value_at(pts)
        return out

    def grad_many(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = np.zeros_like(pts)
        pos, Q = self._charges
        for p, qq in zip(pos, Q):
            d = pts - p[None, :]
            r2 = d[:, 0] ** 2 + d[:, 1] ** 2
            out += (qq / TAU) * d / r2[:, None]
        if self.harmonic is not None:
            out += self.harmonic.grad_at(pts)
        return out

    def _guard(self, p):
        if self.singular_distance(p) < self.guard_radius:
            raise ProximityError(f"point {tuple(p)} is within the cone guard radius")

    def phi(self, p) -> float:
        p = np.asarray(p, dtype=float).reshape(2)
        self._guard(p)
        return float(self.phi_many(p[None, :])[0])

    def grad(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float).reshape(2)
        self._guard(p)
        return self.grad_many(p[None, :])[0]

    # -- serialization -----------------------------------------------------------

    def to_json(self) -> dict:
        data = {
            "quantum": self.quantum_mode,
            "constant": self.constant,
            "scale": self.scale,
            "cones": [
                {"position": c.position.tolist(), "k": c.k, "location": c.location}
                for c in self.cones
            ],
            "junction_charges": [
                {"position": j.position.tolist(), "Q": j.Q} for j in self.junction_charges
            ],
        }
        if self.harmonic is None:
            data["harmonic"] = None
        elif getattr(self.harmonic, "is_numeric", False):
            data["harmonic"] = {
                "kind": "nodal",
                "values": np.asarray(self.harmonic.values).tolist(),
                "mesh": self.harmonic.mesh.to_text(),
            }
        else:
            data["harmonic"] = {"kind": "closed_form", "name": self.harmonic.name}
        return data

    def dump(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, data: dict, closed_forms: dict = None) -> "PhiField":
        harmonic = None
        h = data.get("harmonic")
        if h is not None:
            if h["kind"] == "nodal":
                from .background import NodalField, TriMesh

                harmonic = NodalField(TriMesh.from_text(h["mesh"]), np.asarray(h["values"]))
            else:
                if not closed_forms or h["name"] not in closed_forms:
                    raise ParameterError(
                        f"closed form {h.get('name')!r} needs a resolver to load"
                    )
                harmonic = closed_forms[h["name"]]
        return cls(
            quantum=data["quantum"],
            cones=[ConePoint(c["position"], c["k"], c["location"]) for c in data["cones"]],
            junction_charges=[
                JunctionCharge(j["position"], j["Q"]) for j in data["junction_charges"]
            ],
            harmonic=harmonic,
            constant=data["constant"],
            scale=data["scale"],
        )


# ---------------------------------------------------------------------------
# spec operations (thin wrappers over PhiField methods)
# ---------------------------------------------------------------------------


def eval_phi(field: PhiField, p) -> float:
    return field.phi(p)


def eval_grad_phi(field: PhiField, p) -> np.ndarray:
    return field.grad(p)


def as_curve(curve):
    """Accept a segment object or an (N,2) polyline array."""
    if isinstance(curve, (LineSegment, ArcSegment, PolylineSegment)):
        return curve
    return PolylineSegment(np.asarray(curve, dtype=float))


def manifold_length(field: PhiField, curve) -> float:
    """Length of a curve under the cone metric: integral of exp(phi) ds."""
    curve = as_curve(curve)
    if isinstance(curve, PolylineSegment):
        return _polyline_metric_integral(field, curve.points, power=1.0)

    def integrand(s):
        return math.exp(field.phi(curve.point_at(s)))

    val, _ = quad(integrand, 0.0, curve.length, epsabs=0.0, epsrel=1e-9, limit=200)
    return float(val)


_GL8_X, _GL8_W = np.polynomial.legendre.leggauss(8)


def _polyline_metric_integral(field, pts, power=1.0):
    a, b = pts[:-1], pts[1:]
    d = b - a
    ell = np.hypot(d[:, 0], d[:, 1])
    t = 0.5 * (_GL8_X + 1.0)
    # nodes: (n_edges, 8, 2)
    nodes = a[:, None, :] + d[:, None, :] * t[None, :, None]
    flat = nodes.reshape(-1, 2)
    vals = np.exp(power * field.phi_many(flat)).reshape(len(a), -1)
    return float(np.sum(ell * 0.5 * (vals @ _GL8_W)))


def tilde_kappa(field: PhiField, curve, s: float) -> float:
    """Geodesic curvature of the curve under the cone metric at arclength s."""
    curve = as_curve(curve)
    p = curve.point_at(s)
    t = curve.tangent_at(s)
    kappa = curve.turning_rate_at(s)
    dn_phi = float(np.dot(field.grad(p), rot90(t)))
    return math.exp(-field.phi(p)) * (kappa - dn_phi)


def size_to_dirichlet(F):
    """Boundary cell-size demand F -> Dirichlet data -ln(F)."""

    def g(x, y):
        v = F(x, y)
        if v <= 0:
            raise ParameterError(f"size function must be positive, got {v} at ({x}, {y})")
        return -math.log(v)

    return g


# ---------------------------------------------------------------------------
# manifold area
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AreaResult:
    value: float
    divergent: bool
    diverging_cones: tuple

    def __float__(self):
        return self.value


# 7-point degree-5 rule on the reference triangle (barycentric, weights sum 1)
_TRI7_BARY = np.array(
    [
        [1 / 3, 1 / 3, 1 / 3],
        [0.797426985353087, 0.101286507323456, 0.101286507323456],
        [0.101286507323456, 0.797426985353087, 0.101286507323456],
        [0.101286507323456, 0.101286507323456, 0.797426985353087],
        [0.059715871789770, 0.470142064105115, 0.470142064105115],
        [0.470142064105115, 0.059715871789770, 0.470142064105115],
        [0.470142064105115, 0.470142064105115, 0.059715871789770],
    ]
)
_TRI7_W = np.array(
    [
        0.225,
        0.125939180544827,
        0.125939180544827,
        0.125939180544827,
        0.132394152788506,
        0.132394152788506,
        0.132394152788506,
    ]
)

_GL16_X, _GL16_W = np.polynomial.legendre.leggauss(16)


def manifold_area(field: PhiField, region) -> AreaResult:
    """Area of a polygonal region under the cone metric: integral of exp(2 phi) da.

    Flags divergence instead of integrating when the region encloses a
    cone at or below the finite-area bound (k <= -4 quad, k <= -6 tri).
    """
    ring = np.asarray(region, dtype=float)
    if ring.ndim != 2 or ring.shape[1] != 2:
        raise ParameterError("region must be an (N,2) polygon ring")
    if np.allclose(ring[0], ring[-1]):
        ring = ring[:-1]
    from shapely import constrained_delaunay_triangles
    from shapely.geometry import Point as ShPoint
    from shapely.geometry import Polygon as ShPolygon

    poly = ShPolygon(ring)
    if not poly.is_valid:
        raise ParameterError("region polygon is not simple")

    k_min = -4 if field.quantum_mode == "quad" else -6
    diverging = tuple(
        c
        for c in field.cones
        if c.location == "interior"
        and poly.covers(ShPoint(*c.position))
        and c.k <= k_min
    )
    if diverging:
        return AreaResult(math.nan, True, diverging)

    inner = [
        c.position
        for c in field.cones
        if c.location == "interior" and poly.covers(ShPoint(*c.position))
    ]
    inner = np.asarray(inner) if inner else np.zeros((0, 2))

    tris = []
    for geom in constrained_delaunay_triangles(poly).geoms:
        tri = np.asarray(geom.exterior.coords)[:3]
        if _tri_area(tri) < 0:
            tri = tri[::-1]
        tris.append(tri)

    # fan-split triangles so enclosed cones become vertices
    work = list(tris)
    for cp in inner:
        nxt = []
        for tri in work:
            if _point_in_tri(cp, tri, eps=1e-12 * field.scale):
                for i in range(3):
                    sub = np.array([cp, tri[i], tri[(i + 1) % 3]])
                    if _tri_area(sub) > 1e-14 * field.scale**2:
                        nxt.append(sub)
            else:
                nxt.append(tri)
        work = nxt

    total = 0.0
    for tri in work:
        total += _integrate_triangle(field, tri, inner)
    return AreaResult(total, False, ())


def _tri_area(tri) -> float:
    (x0, y0), (x1, y1), (x2, y2) = tri
    return 0.5 * ((x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0))


def _point_in_tri(p, tri, eps=0.0) -> bool:
    a = _tri_area(tri)
    if a <= 0:
        return False
    s0 = _tri_area(np.array([p, tri[0], tri[1]]))
    s1 = _tri_area(np.array([p, tri[1], tri[2]]))
    s2 = _tri_area(np.array([p, tri[2], tri[0]]))
    lo = -eps
    return s0 >= lo and s1 >= lo and s2 >= lo


def _integrate_triangle(field, tri, cones, depth=0):
    verts = np.asarray(tri, dtype=float)
    for cp in cones:
        if np.hypot(*(verts[0] - cp)) < 1e-12 * field.scale:
            return _integrate_singular_triangle(field, verts, cp)
        if np.hypot(*(verts[1] - cp)) < 1e-12 * field.scale:
            return _integrate_singular_triangle(field, np.roll(verts, -1, axis=0), cp)
        if np.hypot(*(verts[2] - cp)) < 1e-12 * field.scale:
            return _integrate_singular_triangle(field, np.roll(verts, -2, axis=0), cp)

    size = max(np.hypot(*(verts[1] - verts[0])), np.hypot(*(verts[2] - verts[0])))
    near = _nearest_charge_distance(field, verts)
    if depth < 12 and size > 0.5 * near:
        mids = np.array(
            [0.5 * (verts[0] + verts[1]), 0.5 * (verts[1] + verts[2]), 0.5 * (verts[2] + verts[0])]
        )
        subs = [
            np.array([verts[0], mids[0], mids[2]]),
            np.array([mids[0], verts[1], mids[1]]),
            np.array([mids[2], mids[1], verts[2]]),
            np.array([mids[0], mids[1], mids[2]]),
        ]
        return sum(_integrate_triangle(field, s, cones, depth + 1) for s in subs)

    pts = _TRI7_BARY @ verts
    vals = np.exp(2.0 * field.phi_many(pts))
    return abs(_tri_area(verts)) * float(np.dot(_TRI7_W, vals))


def _nearest_charge_distance(field, verts):
    pos = field.singular_points()
    if len(pos) == 0:
        return math.inf
    c = verts.mean(axis=0)
    return float(np.min(np.hypot(pos[:, 0] - c[0], pos[:, 1] - c[1])))


def _integrate_singular_triangle(field, verts, cone_pos, depth=0):
    """Adaptive Duffy-type quadrature on a triangle whose first vertex is a cone."""
    whole = _singular_panel(field, verts)
    p0, p1, p2 = verts
    mid = 0.5 * (p1 + p2)
    halves = _singular_panel(field, np.array([p0, p1, mid])) + _singular_panel(
        field, np.array([p0, mid, p2])
    )
    if depth >= 24 or abs(whole - halves) <= 1e-11 * (abs(halves) + 1e-30):
        return halves
    return _integrate_singular_triangle(
        field, np.array([p0, p1, mid]), cone_pos, depth + 1
    ) + _integrate_singular_triangle(field, np.array([p0, mid, p2]), cone_pos, depth + 1)


def _singular_panel(field, verts):
    """Duffy-type quadrature on a triangle whose first vertex is the cone.

    Radially the integrand behaves like r^(Q/pi + 1); the substitution
    u = w^(2/(a+2)) with a = Q/pi flattens it so Gauss-Legendre applies.
    """
    p0, p1, p2 = verts
    Q = 0.0
    pos, Qs = field._charges
    for p, qq in zip(pos, Qs):
        if np.hypot(*(p - p0)) < 1e-12 * field.scale:
            Q += qq
    a = Q / math.pi
    beta = 2.0 / (a + 2.0)

    w = 0.5 * (_GL16_X + 1.0)
    v = 0.5 * (_GL16_X + 1.0)
    ww = 0.5 * _GL16_W
    wv = 0.5 * _GL16_W

    u = w**beta  # radial stretch; u^(a+1) du = beta * w dw exactly

    # points: p0 + u * (p1 - p0 + v * (p2 - p1))
    e1 = p1 - p0
    e2 = p2 - p1
    ray = e1[None, :] + v[:, None] * e2[None, :]  # (nv, 2)
    m = np.hypot(ray[:, 0], ray[:, 1])
    pts = p0[None, None, :] + u[:, None, None] * ray[None, :, :]
    flat = pts.reshape(-1, 2)
    r = np.hypot(flat[:, 0] - p0[0], flat[:, 1] - p0[1])
    # remove the singular charge analytically: exp(2 phi) = r^a * smooth
    smooth = np.exp(2.0 * field.phi_many(flat)) / np.maximum(r, 1e-300) ** a
    smooth = smooth.reshape(len(u), len(v))
    jac = 2.0 * abs(_tri_area(verts))
    vals = smooth * (beta * w)[:, None] * (m**a)[None, :]
    return jac * float(np.einsum("i,j,ij->", ww, wv, vals))
