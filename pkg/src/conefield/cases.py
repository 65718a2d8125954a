"""Closed-form and symmetry-constructed benchmark cases.

Each constructor returns the domain together with a field whose behavior
is known in closed form (or pinned by symmetry), for use as test oracles
and CLI presets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from functools import lru_cache

import numpy as np

from .background import (
    NeumannSolver,
    condition2_edge_flux,
    log_charge_edge_flux,
    triangulate,
)
from .conditions import check_condition4, junction_charge
from .errors import ParameterError, RecoveryError
from .field import ConePoint, HarmonicClosedForm, JunctionCharge, PhiField
from .geodesics import TraceOptions, trace_geodesic
from .geometry import (
    ArcSegment,
    BoundaryLoop,
    DomainSpec,
    LineSegment,
    PolylineSegment,
    rectangle,
    circle_loop,
    wrap_angle,
)

TAU = 2.0 * math.pi


# ---------------------------------------------------------------------------
# annulus sector
# ---------------------------------------------------------------------------


def annulus_sector(R1=1.0, R2=2.0, opening=math.pi / 2, radial_edges=10):
    """Annulus sector with the exact field phi = -ln r + C.

    The constant is set so the radial sides carry `radial_edges` manifold
    edges.  The sector is symmetric about the x-axis.
    """
    if not (0 < R1 < R2):
        raise ParameterError("need 0 < R1 < R2")
    a0, a1 = -0.5 * opening, 0.5 * opening
    p = lambda r, a: (r * math.cos(a), r * math.sin(a))
    loop = BoundaryLoop(
        [
            LineSegment(p(R1, a0), p(R2, a0)),
            ArcSegment((0, 0), R2, a0, opening),
            LineSegment(p(R2, a1), p(R1, a1)),
            ArcSegment((0, 0), R1, a1, -opening),
        ]
    )
    dom = DomainSpec([loop])
    C = math.log(radial_edges / math.log(R2 / R1))
    harm = HarmonicClosedForm(
        lambda x, y: -0.5 * math.log(x * x + y * y),
        lambda x, y: (-x / (x * x + y * y), -y / (x * x + y * y)),
        name="neg_log_r",
    )
    fld = PhiField(harmonic=harm, constant=C, scale=dom.diameter)
    return dom, fld


# ---------------------------------------------------------------------------
# single cone
# ---------------------------------------------------------------------------


def single_cone(k=1, quantum="quad"):
    """A lone cone at the center of the unit disk: phi = (k q / 2 pi) ln r."""
    dom = DomainSpec([circle_loop((0, 0), 1.0)], quantum=quantum)
    fld = PhiField(quantum=quantum, cones=[ConePoint((0, 0), k)], scale=dom.diameter)
    return dom, fld


# ---------------------------------------------------------------------------
# junction wedge
# ---------------------------------------------------------------------------


@dataclass
class WedgeCase:
    domain: DomainSpec
    field: PhiField
    Q: float
    divergent: bool


def junction_wedge(theta_in=math.pi / 3, n=1, quantum="quad", radius=1.0) -> WedgeCase:
    """Wedge of opening theta_in with the junction charge the lattice demands."""
    dom_q = math.pi / 2 if quantum == "quad" else math.pi / 3
    Q = junction_charge(theta_in, n, dom_q)
    a0, a1 = -0.5 * theta_in, 0.5 * theta_in
    A = (radius * math.cos(a0), radius * math.sin(a0))
    B = (radius * math.cos(a1), radius * math.sin(a1))
    loop = BoundaryLoop(
        [
            LineSegment((0.0, 0.0), A),
            ArcSegment((0, 0), radius, a0, theta_in),
            LineSegment(B, (0.0, 0.0)),
        ]
    )
    dom = DomainSpec([loop], quantum=quantum)
    fld = PhiField(
        quantum=quantum,
        junction_charges=[JunctionCharge((0.0, 0.0), Q)],
        scale=dom.diameter,
    )
    return WedgeCase(dom, fld, Q, Q >= TAU)


# ---------------------------------------------------------------------------
# diamond-in-square pair
# ---------------------------------------------------------------------------


def diamond_domain(half=2.0, d=1.0) -> DomainSpec:
    """Axis-aligned square with a concentric 45-degree-rotated square hole."""
    hole = BoundaryLoop(
        [
            LineSegment((d, 0), (0, d)),
            LineSegment((0, d), (-d, 0)),
            LineSegment((-d, 0), (0, -d)),
            LineSegment((0, -d), (d, 0)),
        ]
    )
    return DomainSpec([rectangle(-half, -half, half, half), hole])


@dataclass
class DiamondCase:
    domain: DomainSpec
    field: PhiField
    a_minus: float  # |x| of the k=-1 cone (left)
    a_plus: float  # x of the k=+1 cone (right)
    curve: np.ndarray
    endpoints_s: tuple
    deviation: float


def _diamond_condition4_x(field, dom, curve, endpoints_s):
    chk = check_condition4(field, dom, hole_index=1, curve=curve, endpoints_s=endpoints_s)
    return chk.flux - chk.theta_difference


@lru_cache(maxsize=4)
def diamond_pair(mesh_h=0.045, half=2.0, d=1.0) -> DiamondCase:
    """Two opposite cones on the symmetry axis making all conditions pass.

    The cone pair (k=-1 left, k=+1 right) sits at (-a, 0) and (+a, 0);
    the free parameter a is solved so the outer-to-hole flux lands on the
    quantization lattice.  Conditions 1-3 hold for every a by
    construction (straight sides plus a compatible harmonic part), so
    the lattice condition pins the geometry.
    """
    dom = diamond_domain(half, d)
    mesh = triangulate(dom, mesh_h)
    solver = NeumannSolver(mesh)
    kappa = condition2_edge_flux(dom, mesh)
    q = dom.q

    curve = np.array([[0.0, half], [0.55 * d, 0.45 * d]])
    s_outer, d_out = dom.loops[0].project(curve[0])
    s_hole, d_hole = dom.loops[1].project(curve[1])
    if max(d_out, d_hole) > 1e-9 * dom.diameter:
        raise RecoveryError("condition-4 curve endpoints failed to project")

    def make_field(a_minus, a_plus):
        cones = [ConePoint((-a_minus, 0.0), -1), ConePoint((a_plus, 0.0), 1)]
        pos = [c.position for c in cones]
        Q = [c.strength(q) for c in cones]
        g = kappa - log_charge_edge_flux(mesh, pos, Q)
        phi_l = solver.solve(g)
        return PhiField(cones=cones, harmonic=phi_l, scale=dom.diameter)

    def deviation(a):
        fld = make_field(a, a)
        x = _diamond_condition4_x(fld, dom, curve, (s_outer, s_hole))
        return x - q * round(x / q), fld

    a_lo, a_hi = 1.12 * d, 0.93 * half
    grid = np.linspace(a_lo, a_hi, 13)
    vals = []
    for a in grid:
        vals.append(deviation(a)[0])
    bracket = None
    for i in range(len(grid) - 1):
        if vals[i] == 0.0 or (vals[i] < 0) != (vals[i + 1] < 0):
            if abs(vals[i] - vals[i + 1]) < 0.5 * q:  # same lattice branch
                bracket = (grid[i], grid[i + 1], vals[i])
                break
    if bracket is None:
        raise RecoveryError("no condition-4 crossing found for the cone pair")
    lo, hi, flo = bracket
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        fmid, _ = deviation(mid)
        if fmid == 0.0 or hi - lo < 1e-12:
            lo = hi = mid
            break
        if (fmid < 0) == (flo < 0):
            lo, flo = mid, fmid
        else:
            hi = mid
    a_star = 0.5 * (lo + hi)
    dev, fld = deviation(a_star)
    return DiamondCase(dom, fld, a_star, a_star, curve, (s_outer, s_hole), abs(dev))


# ---------------------------------------------------------------------------
# surfaces of revolution
# ---------------------------------------------------------------------------


@dataclass
class RevolutionSurface:
    """Meridian (r(t), z(t)) revolved around the z-axis.

    The aligned-mesh field is phi = -ln r + ln(C) with C = cells / 2 pi;
    every non-tangential axis crossing of the meridian is a cone of
    charge -2 pi (index k = -4).
    """

    name: str
    r_fn: callable
    z_fn: callable
    t0: float
    t1: float
    cells_per_circle: int = 8
    poles: list = dc_field(default_factory=list)

    def __post_init__(self):
        self.C = self.cells_per_circle / TAU
        self.poles = self._find_poles()

    # -- field -----------------------------------------------------------

    def phi_of_r(self, r: float) -> float:
        if r <= 0:
            raise ParameterError("phi is singular on the axis")
        return -math.log(r) + math.log(self.C)

    def cell_size(self, r: float) -> float:
        return r / self.C

    # -- meridian differentials -------------------------------------------

    def _deriv(self, t, eps=1e-6):
        span = self.t1 - self.t0
        e = eps * span
        rp = (self.r_fn(t + e) - self.r_fn(t - e)) / (2 * e)
        zp = (self.z_fn(t + e) - self.z_fn(t - e)) / (2 * e)
        return rp, zp

    def _find_poles(self, n_scan=2048):
        ts = np.linspace(self.t0, self.t1, n_scan + 1)
        rs = np.array([self.r_fn(t) for t in ts])
        span = self.t1 - self.t0
        poles = []

        def classify(t):
            rp, zp = self._deriv(t)
            m = math.hypot(rp, zp)
            if m > 0 and abs(rp) / m > 1e-6:
                poles.append({"t": float(t), "k": -4, "charge": -TAU})

        if rs[0] <= 1e-12 * max(1.0, rs.max()):
            classify(self.t0 + 1e-9 * span)
        if rs[-1] <= 1e-12 * max(1.0, rs.max()):
            classify(self.t1 - 1e-9 * span)
        for i in range(1, n_scan):
            if rs[i] <= 1e-12 * max(1.0, rs.max()) and rs[i - 1] > 0 and rs[i + 1] > 0:
                classify(ts[i])
        return poles

    # -- geodesic checks ----------------------------------------------------

    def _embed(self, t, psi):
        r = self.r_fn(t)
        return np.array([r * math.cos(psi), r * math.sin(psi), self.z_fn(t)])

    def _surface_normal(self, t, psi):
        rp, zp = self._deriv(t)
        m = math.hypot(rp, zp)
        nu = np.array([-zp * math.cos(psi), -zp * math.sin(psi), rp]) / m
        return nu

    @staticmethod
    def _embedded_kappa_g(curve_fn, u, nu, eps):
        """Signed geodesic curvature det-formula kg = (c'' . (nu x c')) / |c'|^3.

        Five-point stencils keep both truncation and roundoff near 1e-10.
        """
        cm2 = curve_fn(u - 2 * eps)
        cm1 = curve_fn(u - eps)
        c0 = curve_fn(u)
        cp1 = curve_fn(u + eps)
        cp2 = curve_fn(u + 2 * eps)
        d1 = (cm2 - 8 * cm1 + 8 * cp1 - cp2) / (12 * eps)
        d2 = (-cm2 + 16 * cm1 - 30 * c0 + 16 * cp1 - cp2) / (12 * eps * eps)
        speed = float(np.linalg.norm(d1))
        return float(np.dot(d2, np.cross(nu, d1))) / speed**3

    def circle_tilde_kappa(self, t: float, psi: float = 0.3) -> float:
        """Cone-metric curvature of the circle of revolution at t.

        The surface-side curvature is computed from the embedding; the
        field side is the normal derivative of phi along the meridian.
        """
        r = self.r_fn(t)
        if r <= 0:
            raise ParameterError("no circle of revolution on the axis")
        nu = self._surface_normal(t, psi)
        kappa_g = self._embedded_kappa_g(lambda u: self._embed(t, u), psi, nu, 1e-3)
        # N = nu x T points along -e_meridian; phi varies only along the meridian
        rp, zp = self._deriv(t)
        m = math.hypot(rp, zp)
        dphi_dt = -rp / r  # d(-ln r + ln C)/dt
        dn_phi = -dphi_dt / m
        return math.exp(-self.phi_of_r(r)) * (kappa_g - dn_phi)

    def meridian_tilde_kappa(self, t: float, psi: float = 0.3) -> float:
        """Meridians: embedded curvature vs the vanishing cross-meridian slope."""
        r = self.r_fn(t)
        if r <= 0:
            raise ParameterError("meridian check needs r > 0")
        span = self.t1 - self.t0
        nu = self._surface_normal(t, psi)
        kappa_g = self._embedded_kappa_g(
            lambda u: self._embed(u, psi), t, nu, 1e-3 * span
        )
        dn_phi = 0.0  # phi has no azimuthal variation
        return math.exp(-self.phi_of_r(r)) * (kappa_g - dn_phi)


def revolution_surface(r_fn, z_fn, t0, t1, name="revolution", cells=8) -> RevolutionSurface:
    return RevolutionSurface(name, r_fn, z_fn, t0, t1, cells)


def sphere_surface(cells=8) -> RevolutionSurface:
    return RevolutionSurface(
        "sphere", lambda t: math.sin(t), lambda t: math.cos(t), 0.0, math.pi, cells
    )


def cylinder_surface(radius=1.0, height=2.0, cells=8) -> RevolutionSurface:
    return RevolutionSurface(
        "cylinder", lambda t: radius, lambda t: height * t, 0.0, 1.0, cells
    )


def cone_surface(slope=1.0, cells=8) -> RevolutionSurface:
    return RevolutionSurface(
        "cone", lambda t: t, lambda t: slope * t, 0.0, 1.0, cells
    )


# ---------------------------------------------------------------------------
# geodesic-bounded inverse-problem input (the four-charge construction)
# ---------------------------------------------------------------------------


@dataclass
class CaseC:
    domain: DomainSpec
    truth: PhiField
    interior: list  # [(position, k), ...]
    exterior: list
    corners: np.ndarray

    def size_demand(self, x, y) -> float:
        return math.exp(-self.truth.phi((x, y)))


def _first_crossing(path_pts, wall_pts):
    """First intersection of a polyline path with a wall polyline."""
    a = path_pts[:-1]
    b = path_pts[1:]
    c = wall_pts[:-1]
    d = wall_pts[1:]
    for i in range(len(a)):
        p, r = a[i], b[i] - a[i]
        qmp = c - p[None, :]
        s = d - c
        denom = r[0] * s[:, 1] - r[1] * s[:, 0]
        ok = np.abs(denom) > 1e-300
        t = np.where(ok, (qmp[:, 0] * s[:, 1] - qmp[:, 1] * s[:, 0]) / denom, -1.0)
        u = np.where(ok, (qmp[:, 0] * r[1] - qmp[:, 1] * r[0]) / denom, -1.0)
        hit = (t >= 0.0) & (t <= 1.0) & (u >= 0.0) & (u <= 1.0)
        if hit.any():
            j = int(np.argmax(hit))
            return i, j, p + t[j] * r, float(t[j]), float(u[j])
    return None


@lru_cache(maxsize=2)
def case_c() -> CaseC:
    """Domain bounded by four geodesics of a known four-charge field.

    Two charges (k = +1, -1) sit inside the final boundary, two more
    outside shape it.  Side walls start perpendicular to the symmetry
    axis; the top side is shot so it meets the right wall at a right
    angle, and the bottom is its mirror image.
    """
    interior = [((-0.5, 0.0), 1), ((0.5, 0.0), -1)]
    exterior = [((0.0, 1.8), 1), ((0.0, -1.8), 1)]
    all_pos = [p for p, _ in interior + exterior]
    all_Q = [k * math.pi / 2 for _, k in interior + exterior]

    def harm_value(x, y):
        v = 0.0
        for (px, py), k in exterior:
            v += (k / 4.0) * 0.5 * math.log((x - px) ** 2 + (y - py) ** 2)
        return v

    def harm_grad(x, y):
        gx = gy = 0.0
        for (px, py), k in exterior:
            r2 = (x - px) ** 2 + (y - py) ** 2
            gx += (k / 4.0) * (x - px) / r2
            gy += (k / 4.0) * (y - py) / r2
        return gx, gy

    truth_free = PhiField(
        cones=[ConePoint(p, k) for p, k in interior],
        harmonic=HarmonicClosedForm(harm_value, harm_grad, name="case_c_exterior"),
        scale=4.0,
    )

    x_l, x_r = -1.35, 1.35
    opts = TraceOptions(h=3e-3, max_s=4.0)
    wall_l = trace_geodesic(truth_free, (x_l, 0.0), math.pi / 2, opts=opts)
    wall_r = trace_geodesic(truth_free, (x_r, 0.0), math.pi / 2, opts=opts)

    def shoot(t):
        i = int(np.searchsorted(wall_l.s, t))
        i = min(max(i, 1), len(wall_l.points) - 1)
        A = wall_l.points[i]
        theta = wall_l.theta[i] - math.pi / 2
        top = trace_geodesic(truth_free, A, theta, opts=TraceOptions(h=3e-3, max_s=6.0))
        hit = _first_crossing(top.points, wall_r.points)
        if hit is None:
            return None
        ti, wj, pt, tfrac, ufrac = hit
        th_top = top.theta[ti] + tfrac * (top.theta[ti + 1] - top.theta[ti])
        th_wall = wall_r.theta[wj] + ufrac * (wall_r.theta[wj + 1] - wall_r.theta[wj])
        miss = wrap_angle(th_top - th_wall + math.pi / 2)
        return miss, (i, A, top, ti, wj, pt)

    lo, hi = 0.35, 2.2
    grid = np.linspace(lo, hi, 25)
    prev = None
    bracket = None
    for t in grid:
        res = shoot(float(t))
        if res is None:
            prev = None
            continue
        if prev is not None and (prev[1] < 0) != (res[0] < 0):
            bracket = (prev[0], float(t), prev[1])
            break
        prev = (float(t), res[0])
    if bracket is None:
        raise RecoveryError("wall shooting found no right-angle bracket")
    tlo, thi, flo = bracket
    for _ in range(50):
        tm = 0.5 * (tlo + thi)
        fm = shoot(tm)[0]
        if (fm < 0) == (flo < 0):
            tlo, flo = tm, fm
        else:
            thi = tm
    t_star = 0.5 * (tlo + thi)
    miss, (i, A, top, ti, wj, B) = shoot(t_star)

    top_pts = np.vstack([top.points[: ti + 1], B])
    left_up = np.vstack([wall_l.points[: i + 1]])
    right_up = np.vstack([wall_r.points[: wj + 1], B])

    def mirror(p):
        out = p.copy()
        out[:, 1] = -out[:, 1]
        return out

    left_pts = np.vstack([left_up[::-1], mirror(left_up)[1:]])  # A -> D
    bottom_pts = mirror(top_pts)  # D -> C (mirror of A -> B)
    right_pts = np.vstack([mirror(right_up)[::-1], right_up[1:]])  # C -> B
    loop = BoundaryLoop(
        [
            PolylineSegment(left_pts),
            PolylineSegment(bottom_pts),
            PolylineSegment(right_pts),
            PolylineSegment(top_pts[::-1]),
        ]
    )
    dom = DomainSpec([loop])
    truth = PhiField(
        cones=truth_free.cones,
        harmonic=truth_free.harmonic,
        scale=dom.diameter,
    )
    corners = np.array([A, B, mirror(np.array([B]))[0], mirror(np.array([A]))[0]])
    return CaseC(dom, truth, interior, exterior, corners)
