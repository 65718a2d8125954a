"""Planar domains bounded by oriented piecewise-C2 loops.

Conventions used throughout the package (documented once, here):

* Every boundary loop is stored so that the domain interior lies on the
  LEFT of the traversal (outer loops counter-clockwise, hole loops
  clockwise).  The boundary normal is the left normal ``N = rot90(T)``,
  which points INTO the domain.
* ``curvature_at`` returns the turning rate ``d(theta)/ds`` of the stored
  traversal: positive where the curve turns toward the interior-left
  normal.  Under this convention the inner (hole-side) arc of an annulus
  has curvature ``-1/R1`` and the outer arc ``+1/R2``; the boundary
  alignment relation reads ``d(phi)/dN = curvature`` with the inward N.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from shapely.geometry import Point as _ShPoint
from shapely.geometry import Polygon as _ShPolygon
from shapely.prepared import prep as _sh_prep

from .errors import GeometryError, ParameterError

TAU = 2.0 * math.pi

# Tangent-angle jump above which a shared segment endpoint counts as a junction.
JUNCTION_ANGLE_TOL = 1e-6


def _as_point(p) -> np.ndarray:
    a = np.asarray(p, dtype=float).reshape(2)
    if not np.all(np.isfinite(a)):
        raise GeometryError(f"non-finite point {p!r}")
    return a


def rot90(v: np.ndarray) -> np.ndarray:
    """Left normal: rotate a vector by +90 degrees."""
    return np.array([-v[1], v[0]])


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a, TAU)
    if a <= -math.pi:
        a += TAU
    elif a > math.pi:
        a -= TAU
    return a


# ---------------------------------------------------------------------------
# curve segments
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LineSegment:
    kind = "line"
    p0: np.ndarray
    p1: np.ndarray

    def __init__(self, p0, p1):
        object.__setattr__(self, "p0", _as_point(p0))
        object.__setattr__(self, "p1", _as_point(p1))
        if self.length <= 0.0:
            raise GeometryError("zero-length line segment")

    @property
    def length(self) -> float:
        return float(np.hypot(*(self.p1 - self.p0)))

    @property
    def start(self) -> np.ndarray:
        return self.p0

    @property
    def end(self) -> np.ndarray:
        return self.p1

    def point_at(self, s: float) -> np.ndarray:
        return self.p0 + (s / self.length) * (self.p1 - self.p0)

    def tangent_at(self, s: float) -> np.ndarray:
        return (self.p1 - self.p0) / self.length

    def turning_rate_at(self, s: float) -> float:
        return 0.0

    def reversed(self) -> "LineSegment":
        return LineSegment(self.p1, self.p0)

    def polyline(self, max_chord: float) -> np.ndarray:
        n = max(1, int(math.ceil(self.length / max_chord)))
        t = np.linspace(0.0, 1.0, n + 1)[:, None]
        return self.p0[None, :] * (1 - t) + self.p1[None, :] * t


@dataclass(frozen=True, eq=False)
class ArcSegment:
    """Circular arc from angle0 through a signed sweep (positive = CCW)."""

    kind = "arc"
    center: np.ndarray
    radius: float
    angle0: float
    sweep: float

    def __init__(self, center, radius, angle0, sweep):
        if radius <= 0:
            raise GeometryError(f"arc radius must be positive, got {radius}")
        if sweep == 0 or abs(sweep) > TAU + 1e-12:
            raise GeometryError(f"arc sweep must be nonzero and |sweep| <= 2*pi, got {sweep}")
        object.__setattr__(self, "center", _as_point(center))
        object.__setattr__(self, "radius", float(radius))
        object.__setattr__(self, "angle0", float(angle0))
        object.__setattr__(self, "sweep", float(sweep))

    @classmethod
    def from_endpoints(cls, center, start, end, ccw=True) -> "ArcSegment":
        center = _as_point(center)
        start = _as_point(start)
        end = _as_point(end)
        r = float(np.hypot(*(start - center)))
        r1 = float(np.hypot(*(end - center)))
        if abs(r - r1) > 1e-9 * max(r, 1.0):
            raise GeometryError("arc endpoints are not equidistant from the center")
        a0 = math.atan2(start[1] - center[1], start[0] - center[0])
        a1 = math.atan2(end[1] - center[1], end[0] - center[0])
        sweep = (a1 - a0) % TAU
        if sweep == 0.0:
            sweep = TAU
        if not ccw:
            sweep = sweep - TAU
        return cls(center, r, a0, sweep)

    @property
    def length(self) -> float:
        return self.radius * abs(self.sweep)

    def _angle(self, s: float) -> float:
        return self.angle0 + self.sweep * (s / self.length)

    @property
    def start(self) -> np.ndarray:
        return self.point_at(0.0)

    @property
    def end(self) -> np.ndarray:
        return self.point_at(self.length)

    def point_at(self, s: float) -> np.ndarray:
        a = self._angle(s)
        return self.center + self.radius * np.array([math.cos(a), math.sin(a)])

    def tangent_at(self, s: float) -> np.ndarray:
        a = self._angle(s)
        sgn = 1.0 if self.sweep > 0 else -1.0
        return sgn * np.array([-math.sin(a), math.cos(a)])

    def turning_rate_at(self, s: float) -> float:
        return (1.0 if self.sweep > 0 else -1.0) / self.radius

    def reversed(self) -> "ArcSegment":
        return ArcSegment(self.center, self.radius, self.angle0 + self.sweep, -self.sweep)

    def polyline(self, max_chord: float) -> np.ndarray:
        # chord <= max_chord keeps the sagitta below chord^2 / (8 R)
        dphi = 2.0 * math.asin(min(1.0, max_chord / (2.0 * self.radius)))
        n = max(2, int(math.ceil(abs(self.sweep) / dphi)))
        a = self.angle0 + self.sweep * np.linspace(0.0, 1.0, n + 1)
        return self.center[None, :] + self.radius * np.stack([np.cos(a), np.sin(a)], axis=1)


@dataclass(frozen=True, eq=False)
class PolylineSegment:
    kind = "polyline"
    points: np.ndarray

    def __init__(self, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise GeometryError("polyline needs at least two 2D points")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("non-finite polyline point")
        seg = np.diff(pts, axis=0)
        ell = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(ell <= 0):
            raise GeometryError("polyline has coincident consecutive points")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "_cum", np.concatenate([[0.0], np.cumsum(ell)]))

    @property
    def length(self) -> float:
        return float(self._cum[-1])

    @property
    def start(self) -> np.ndarray:
        return self.points[0]

    @property
    def end(self) -> np.ndarray:
        return self.points[-1]

    def _locate(self, s: float):
        i = int(np.searchsorted(self._cum, s, side="right") - 1)
        i = min(max(i, 0), len(self.points) - 2)
        return i, s - self._cum[i]

    def point_at(self, s: float) -> np.ndarray:
        i, ds = self._locate(s)
        d = self.points[i + 1] - self.points[i]
        return self.points[i] + d * (ds / np.hypot(*d))

    def tangent_at(self, s: float) -> np.ndarray:
        i, _ = self._locate(s)
        d = self.points[i + 1] - self.points[i]
        return d / np.hypot(*d)

    def turning_rate_at(self, s: float) -> float:
        # three-point circumcircle estimate at the nearest interior vertex
        i, ds = self._locate(s)
        j = i + 1 if ds > 0.5 * (self._cum[i + 1] - self._cum[i]) else i
        j = min(max(j, 1), len(self.points) - 2)
        a, b, c = self.points[j - 1], self.points[j], self.points[j + 1]
        ab, bc, ca = b - a, c - b, c - a
        denom = np.hypot(*ab) * np.hypot(*bc) * np.hypot(*ca)
        if denom == 0:
            return 0.0
        return float(2.0 * (ab[0] * bc[1] - ab[1] * bc[0]) / denom)

    def reversed(self) -> "PolylineSegment":
        return PolylineSegment(self.points[::-1].copy())

    def polyline(self, max_chord: float) -> np.ndarray:
        return self.points


CurveSegment = LineSegment | ArcSegment | PolylineSegment


def curvature_at(segment, s: float) -> float:
    """Signed curvature of a boundary segment at arclength s.

    Positive where the curve turns toward the interior-left normal of the
    stored traversal (see module docstring for the annulus signs).
    """
    if not (0.0 <= s <= segment.length * (1 + 1e-12)):
        raise ParameterError(f"arclength {s} outside [0, {segment.length}]")
    return segment.turning_rate_at(min(s, segment.length))


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BoundaryLoop:
    segments: tuple

    def __init__(self, segments):
        segments = tuple(segments)
        if not segments:
            raise GeometryError("empty loop")
        object.__setattr__(self, "segments", segments)
        lengths = np.array([s.length for s in segments])
        object.__setattr__(self, "_cum", np.concatenate([[0.0], np.cumsum(lengths)]))

    @property
    def length(self) -> float:
        return float(self._cum[-1])

    def closure_gap(self) -> float:
        """Largest endpoint mismatch between consecutive segments."""
        gaps = []
        for a, b in zip(self.segments, self.segments[1:] + self.segments[:1]):
            gaps.append(float(np.hypot(*(a.end - b.start))))
        return max(gaps)

    def is_closed(self, tol: float) -> bool:
        return self.closure_gap() <= tol

    def point_at(self, s: float) -> np.ndarray:
        i, ds = self._locate(s)
        return self.segments[i].point_at(ds)

    def tangent_at(self, s: float) -> np.ndarray:
        i, ds = self._locate(s)
        return self.segments[i].tangent_at(ds)

    def _locate(self, s: float):
        s = s % self.length
        i = int(np.searchsorted(self._cum, s, side="right") - 1)
        i = min(max(i, 0), len(self.segments) - 1)
        return i, s - self._cum[i]

    def segment_start(self, i: int) -> float:
        return float(self._cum[i])

    def polygonize(self, max_chord: float) -> np.ndarray:
        pts = []
        for seg in self.segments:
            pts.append(seg.polyline(max_chord)[:-1])
        return np.vstack(pts)

    def signed_area(self, max_chord: float = None) -> float:
        if max_chord is None:
            max_chord = 1e-3 * max(self.length, 1e-30)
        p = self.polygonize(max_chord)
        x, y = p[:, 0], p[:, 1]
        return float(0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))

    def reversed(self) -> "BoundaryLoop":
        return BoundaryLoop(tuple(s.reversed() for s in reversed(self.segments)))

    def project(self, p):
        """(arclength, distance) of the closest boundary point to p."""
        p = _as_point(p)
        best = (math.inf, 0.0)
        for i, seg in enumerate(self.segments):
            dist, s_local = _segment_project(seg, p)
            if dist < best[0]:
                best = (dist, self.segment_start(i) + s_local)
        return best[1], best[0]

    def corner_turns(self):
        """(position, turn angle, prev index, next index) at each segment joint."""
        out = []
        n = len(self.segments)
        for i in range(n):
            a = self.segments[i]
            b = self.segments[(i + 1) % n]
            ta = a.tangent_at(a.length)
            tb = b.tangent_at(0.0)
            turn = wrap_angle(math.atan2(tb[1], tb[0]) - math.atan2(ta[1], ta[0]))
            out.append((b.start.copy(), turn, i, (i + 1) % n))
        return out

    def total_turning(self) -> float:
        """Integral of the traversal turning rate plus the corner turns.

        Equals 2*pi for a loop traversed counter-clockwise (flat
        Gauss-Bonnet), -2*pi for a clockwise one.
        """
        total = 0.0
        for seg in self.segments:
            if isinstance(seg, LineSegment):
                continue
            if isinstance(seg, ArcSegment):
                total += seg.sweep
            else:
                d = np.diff(seg.points, axis=0)
                angles = np.arctan2(d[:, 1], d[:, 0])
                for k in range(1, len(angles)):
                    total += wrap_angle(angles[k] - angles[k - 1])
        for _, turn, _, _ in self.corner_turns():
            total += turn
        return total


@dataclass(frozen=True, eq=False)
class JunctionInfo:
    position: np.ndarray
    theta_in: float
    loop_index: int
    incident: tuple  # (prev segment index, next segment index) within the loop

    def __repr__(self):
        x, y = self.position
        return f"Junction(({x:.6g}, {y:.6g}), theta_in={self.theta_in:.6g})"


# ---------------------------------------------------------------------------
# domain
# ---------------------------------------------------------------------------

_QUANTA = {"quad": math.pi / 2.0, "tri": math.pi / 3.0}


class DomainSpec:
    """A planar domain: one outer loop plus optional hole loops.

    Loops are re-oriented at construction so the interior is on the left
    (outer CCW, holes CW).  The quantum selects quadrilateral (pi/2) or
    triangular (pi/3) mode.
    """

    def __init__(self, loops, quantum: str = "quad"):
        if quantum not in _QUANTA:
            raise ParameterError(f"quantum must be 'quad' or 'tri', got {quantum!r}")
        loops = [lp if isinstance(lp, BoundaryLoop) else BoundaryLoop(lp) for lp in loops]
        if not loops:
            raise GeometryError("domain needs at least one loop")

        scale = _bbox_diameter(loops)
        tol = 1e-12 * scale
        for i, lp in enumerate(loops):
            if not lp.is_closed(max(tol, 1e-300)):
                raise GeometryError(
                    f"loop {i} is not closed (gap {lp.closure_gap():.3e} > {tol:.3e})"
                )

        areas = [lp.signed_area() for lp in loops]
        outer_idx = int(np.argmax(np.abs(areas)))
        ordered = [loops[outer_idx]] + [lp for i, lp in enumerate(loops) if i != outer_idx]
        ordered_areas = [areas[outer_idx]] + [a for i, a in enumerate(areas) if i != outer_idx]

        fixed = []
        for i, (lp, a) in enumerate(zip(ordered, ordered_areas)):
            want_ccw = i == 0
            if (a > 0) != want_ccw:
                lp = lp.reversed()
            fixed.append(lp)

        self.quantum_mode = quantum
        self.loops = tuple(fixed)
        self._prep = None
        self._polygon = None
        self.junctions = tuple(self._find_junctions())

    # -- basic metrics ----------------------------------------------------

    @property
    def q(self) -> float:
        return _QUANTA[self.quantum_mode]

    @property
    def outer(self) -> BoundaryLoop:
        return self.loops[0]

    @property
    def holes(self):
        return self.loops[1:]

    @property
    def diameter(self) -> float:
        return _bbox_diameter(self.loops)

    def bbox(self):
        pts = np.vstack([lp.polygonize(1e-2 * self.diameter) for lp in self.loops])
        return pts.min(axis=0), pts.max(axis=0)

    # -- junctions ---------------------------------------------------------

    def _find_junctions(self):
        out = []
        for li, lp in enumerate(self.loops):
            for pos, turn, i_prev, i_next in lp.corner_turns():
                if abs(turn) <= JUNCTION_ANGLE_TOL:
                    continue
                theta_in = math.pi - turn
                if not (0.0 < theta_in < TAU):
                    raise GeometryError(
                        f"degenerate junction at {pos} (inner angle {theta_in})"
                    )
                out.append(JunctionInfo(pos, theta_in, li, (i_prev, i_next)))
        return out

    # -- predicates ---------------------------------------------------------

    def _shapely(self):
        if self._polygon is None:
            chord = math.sqrt(8.0 * 1e-9) * self.diameter
            shell = self.outer.polygonize(chord)
            holes = [h.polygonize(chord) for h in self.holes]
            self._polygon = _ShPolygon(shell, holes)
            self._prep = _sh_prep(self._polygon)
        return self._prep

    def shapely_polygon(self) -> _ShPolygon:
        self._shapely()
        return self._polygon

    def contains(self, p) -> bool:
        p = _as_point(p)
        return bool(self._shapely().contains(_ShPoint(p[0], p[1])))

    def boundary_distance(self, p) -> float:
        p = _as_point(p)
        best = math.inf
        for lp in self.loops:
            for seg in lp.segments:
                best = min(best, _segment_distance(seg, p))
        return best

    def junction_distance(self, p) -> float:
        p = _as_point(p)
        if not self.junctions:
            return math.inf
        return min(float(np.hypot(*(j.position - p))) for j in self.junctions)

    # -- serialization -------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "quantum": self.quantum_mode,
            "loops": [[_segment_to_json(s) for s in lp.segments] for lp in self.loops],
        }

    @classmethod
    def from_json(cls, data: dict) -> "DomainSpec":
        loops = [
            BoundaryLoop([_segment_from_json(s) for s in lp]) for lp in data["loops"]
        ]
        return cls(loops, quantum=data.get("quantum", "quad"))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "DomainSpec":
        with open(path) as f:
            return cls.from_json(json.load(f))


def _bbox_diameter(loops) -> float:
    pts = []
    for lp in loops:
        for seg in lp.segments:
            if isinstance(seg, ArcSegment):
                pts.append(seg.center + seg.radius)
                pts.append(seg.center - seg.radius)
            elif isinstance(seg, PolylineSegment):
                pts.append(seg.points.max(axis=0))
                pts.append(seg.points.min(axis=0))
            else:
                pts.append(seg.p0)
                pts.append(seg.p1)
    pts = np.asarray(pts)
    span = pts.max(axis=0) - pts.min(axis=0)
    d = float(np.hypot(*span))
    if d <= 0:
        raise GeometryError("degenerate domain with zero extent")
    return d


def _segment_distance(seg, p: np.ndarray) -> float:
    return _segment_project(seg, p)[0]


def _segment_project(seg, p: np.ndarray):
    """(distance, local arclength of the closest point) on one segment."""
    if isinstance(seg, LineSegment):
        d = seg.p1 - seg.p0
        t = float(np.dot(p - seg.p0, d) / np.dot(d, d))
        t = min(max(t, 0.0), 1.0)
        return float(np.hypot(*(seg.p0 + t * d - p))), t * seg.length
    if isinstance(seg, ArcSegment):
        v = p - seg.center
        r = float(np.hypot(*v))
        if r == 0.0:
            return seg.radius, 0.0
        ang = math.atan2(v[1], v[0])
        rel = (ang - seg.angle0) % TAU if seg.sweep > 0 else (seg.angle0 - ang) % TAU
        if rel <= abs(seg.sweep):
            return abs(r - seg.radius), rel * seg.radius
        d_start = float(np.hypot(*(seg.start - p)))
        d_end = float(np.hypot(*(seg.end - p)))
        return (d_start, 0.0) if d_start <= d_end else (d_end, seg.length)
    pts = seg.points
    a, b = pts[:-1], pts[1:]
    d = b - a
    denom = np.einsum("ij,ij->i", d, d)
    t = np.clip(np.einsum("ij,ij->i", p[None, :] - a, d) / denom, 0.0, 1.0)
    proj = a + t[:, None] * d
    dists = np.hypot(proj[:, 0] - p[0], proj[:, 1] - p[1])
    i = int(np.argmin(dists))
    s_local = float(seg._cum[i] + t[i] * np.hypot(*d[i]))
    return float(dists[i]), s_local


def _segment_to_json(seg) -> dict:
    if isinstance(seg, LineSegment):
        return {"kind": "line", "points": [seg.p0.tolist(), seg.p1.tolist()]}
    if isinstance(seg, ArcSegment):
        return {
            "kind": "arc",
            "center": seg.center.tolist(),
            "radius": seg.radius,
            "start_angle": seg.angle0,
            "sweep": seg.sweep,
        }
    return {"kind": "polyline", "points": seg.points.tolist()}


def _segment_from_json(d: dict):
    kind = d["kind"]
    if kind == "line":
        return LineSegment(d["points"][0], d["points"][1])
    if kind == "arc":
        return ArcSegment(d["center"], d["radius"], d["start_angle"], d["sweep"])
    if kind == "polyline":
        return PolylineSegment(d["points"])
    raise GeometryError(f"unknown segment kind {kind!r}")


# ---------------------------------------------------------------------------
# module-level operations
# ---------------------------------------------------------------------------


def junction_angles(domain: DomainSpec):
    """All tangent-discontinuous loop vertices with their inner angles."""
    return list(domain.junctions)


def validate_domain(domain: DomainSpec):
    """Non-raising diagnostics: closure, simplicity, hole containment."""
    issues = []
    scale = domain.diameter
    chord = 1e-4 * scale
    polys = []
    for i, lp in enumerate(domain.loops):
        gap = lp.closure_gap()
        if gap > 1e-12 * scale:
            issues.append(f"loop {i} not closed (gap {gap:.3e})")
        ring = lp.polygonize(chord)
        poly = _ShPolygon(ring)
        if not poly.is_valid:
            issues.append(f"loop {i} self-intersects")
        polys.append(poly)
    for i, poly in enumerate(polys[1:], start=1):
        if not polys[0].contains(poly.representative_point()):
            issues.append(f"hole {i} containment violated")
        elif not polys[0].buffer(1e-9 * scale).contains(poly):
            issues.append(f"hole {i} crosses the outer loop")
    for i in range(1, len(polys)):
        for j in range(i + 1, len(polys)):
            if polys[i].intersects(polys[j]):
                issues.append(f"holes {i} and {j} overlap")
    return issues


def rectangle(x0, y0, x1, y1) -> BoundaryLoop:
    """Axis-aligned rectangle loop (CCW)."""
    c = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
    return BoundaryLoop([LineSegment(c[i], c[(i + 1) % 4]) for i in range(4)])


def circle_loop(center, radius, ccw=True) -> BoundaryLoop:
    return BoundaryLoop([ArcSegment(center, radius, 0.0, TAU if ccw else -TAU)])
