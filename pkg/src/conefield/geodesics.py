"""Cross-field geodesics of the cone metric.

In the plane a geodesic of the conformal metric turns at the rate of the
normal derivative of phi: d(theta)/ds = d(phi)/dN with N the left normal
of the path.  A cross transported along any curve rotates at the same
rate, so a geodesic launched along the cross stays aligned with it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .field import PhiField, as_curve
from .geometry import DomainSpec, rot90

TAU = 2.0 * math.pi

# cone capture radius, relative to the domain scale
CAPTURE_RADIUS_REL = 1e-3
# default RK4 step, relative to the domain scale
STEP_REL = 1e-3
# adaptive halving threshold on the per-step turn
MAX_TURN_PER_STEP = 0.1


@dataclass
class TraceOptions:
    h: float = None  # base step (defaults to STEP_REL * scale)
    max_s: float = None  # Euclidean length cap
    max_s_tilde: float = None  # manifold length cap
    max_steps: int = 200_000
    capture_radius: float = None


@dataclass(eq=False)
class GeodesicPath:
    points: np.ndarray  # (N, 2)
    theta: np.ndarray  # (N,)
    s: np.ndarray  # (N,) Euclidean arclength
    s_tilde: np.ndarray  # (N,) manifold arclength
    termination: str  # boundary | cone_capture | max_length | left_domain | max_steps

    @property
    def length(self) -> float:
        return float(self.s[-1])

    @property
    def manifold_length(self) -> float:
        return float(self.s_tilde[-1])

    def end_point(self) -> np.ndarray:
        return self.points[-1]


@dataclass(eq=False)
class CrossSample:
    position: np.ndarray
    psi: float  # representative angle in [0, q)
    base: np.ndarray


def _rhs(field: PhiField, state):
    x, y, theta, _ = state
    g = field.grad_many(np.array([[x, y]]))[0]
    ct, st = math.cos(theta), math.sin(theta)
    dn_phi = -g[0] * st + g[1] * ct  # grad . left normal
    phi = float(field.phi_many(np.array([[x, y]]))[0])
    return np.array([ct, st, dn_phi, math.exp(phi)]), g


def _rk4_step(field, state, h):
    k1, g1 = _rhs(field, state)
    k2, _ = _rhs(field, state + 0.5 * h * k1)
    k3, _ = _rhs(field, state + 0.5 * h * k2)
    k4, _ = _rhs(field, state + h * k3)
    return state + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4), g1


def trace_geodesic(
    field: PhiField, start, direction, domain: DomainSpec = None, opts: TraceOptions = None
) -> GeodesicPath:
    """Integrate the geodesic ODE with RK4 until a stop condition.

    `direction` is a plane angle or a vector.  Stops at the domain
    boundary (bisected to 1e-10 of the scale), at a cone capture radius,
    at the length caps, or at the step cap.
    """
    opts = opts or TraceOptions()
    scale = field.scale if domain is None else domain.diameter
    h0 = opts.h if opts.h is not None else STEP_REL * scale
    r_cap = (
        opts.capture_radius if opts.capture_radius is not None else CAPTURE_RADIUS_REL * scale
    )
    start = np.asarray(start, dtype=float).reshape(2)
    if np.isscalar(direction) or isinstance(direction, float):
        theta0 = float(direction)
    else:
        d = np.asarray(direction, dtype=float).reshape(2)
        theta0 = math.atan2(d[1], d[0])
    if domain is not None and not domain.contains(start):
        if domain.boundary_distance(start) > 1e-9 * scale:
            raise ParameterError(f"start point {tuple(start)} is outside the domain")
    if field.singular_distance(start) <= r_cap:
        raise ParameterError("start point lies inside a cone capture disk")

    state = np.array([start[0], start[1], theta0, 0.0])
    pts = [start.copy()]
    thetas = [theta0]
    svals = [0.0]
    stvals = [0.0]
    termination = "max_steps"
    s_total = 0.0

    for _ in range(opts.max_steps):
        if domain is not None and not domain.contains(state[:2]):
            if domain.boundary_distance(state[:2]) > 1e-8 * scale:
                termination = "left_domain"
                break
        # step cap keeps the turn per step below MAX_TURN_PER_STEP
        g = field.grad_many(state[None, :2])[0]
        gnorm = float(np.hypot(*g))
        h = min(h0, MAX_TURN_PER_STEP / max(gnorm, 1e-30))
        new_state, _ = _rk4_step(field, state, h)
        while abs(new_state[2] - state[2]) > MAX_TURN_PER_STEP and h > 1e-6 * h0:
            h *= 0.5
            new_state, _ = _rk4_step(field, state, h)

        stop = None
        if domain is not None and not domain.contains(new_state[:2]):
            lo, hi = 0.0, h
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                mid_state, _ = _rk4_step(field, state, mid)
                if domain.contains(mid_state[:2]):
                    lo = mid
                else:
                    hi = mid
                if hi - lo < 1e-10 * scale:
                    break
            new_state, _ = _rk4_step(field, state, hi)
            stop = "boundary"
        if stop is None and field.singular_distance(new_state[:2]) <= r_cap:
            stop = "cone_capture"

        s_total += h if stop != "boundary" else hi
        state = new_state
        pts.append(state[:2].copy())
        thetas.append(state[2])
        svals.append(s_total)
        stvals.append(state[3])

        if stop is not None:
            termination = stop
            break
        if opts.max_s is not None and s_total >= opts.max_s:
            termination = "max_length"
            break
        if opts.max_s_tilde is not None and state[3] >= opts.max_s_tilde:
            termination = "max_length"
            break

    return GeodesicPath(
        np.asarray(pts), np.asarray(thetas), np.asarray(svals), np.asarray(stvals), termination
    )


# ---------------------------------------------------------------------------
# transport of crosses
# ---------------------------------------------------------------------------

_GL16_X, _GL16_W = np.polynomial.legendre.leggauss(16)


def transport_rotation(field: PhiField, path) -> float:
    """Plane rotation of a parallel-transported vector along a path.

    Equals the integral of d(phi)/dN along the path (N = left normal).
    """
    curve = as_curve(path)
    pts = curve.polyline(5e-3 * field.scale)
    a, b = pts[:-1], pts[1:]
    d = b - a
    ell = np.hypot(d[:, 0], d[:, 1])
    keep = ell > 0
    a, d, ell = a[keep], d[keep], ell[keep]
    t = 0.5 * (_GL16_X + 1.0)
    nodes = a[:, None, :] + d[:, None, :] * t[None, :, None]
    g = field.grad_many(nodes.reshape(-1, 2)).reshape(len(a), len(t), 2)
    n_left = np.stack([-d[:, 1], d[:, 0]], axis=1) / ell[:, None]
    dn = np.einsum("ptk,pk->pt", g, n_left)
    return float(np.sum(ell * 0.5 * (dn @ _GL16_W)))


def cross_angle(field: PhiField, base, target, path, base_angle: float = None) -> CrossSample:
    """Cross representative at `target`, transported from a boundary base point.

    `base_angle` seeds the cross (defaults to the angle of `path`'s first
    leg being irrelevant -- pass the boundary tangent angle explicitly or
    a `(domain, s)` lookup result).
    """
    base = np.asarray(base, dtype=float).reshape(2)
    target = np.asarray(target, dtype=float).reshape(2)
    if base_angle is None:
        raise ParameterError("cross_angle needs the boundary tangent angle at the base")
    rot = transport_rotation(field, path)
    psi = (base_angle + rot) % field.q
    return CrossSample(target, psi, base)


def boundary_cross_angle(domain: DomainSpec, loop_index: int, s: float) -> float:
    """Tangent angle of a loop at arclength s (a cross representative)."""
    t = domain.loops[loop_index].tangent_at(s)
    return math.atan2(t[1], t[0])


# ---------------------------------------------------------------------------
# star geodesics
# ---------------------------------------------------------------------------


def star_branch_angles(field: PhiField, cone, phase: float = 0.0):
    """The equally-spaced plane angles at which geodesics reach the cone.

    A cross transported CCW around the cone by dpsi rotates by
    -(strength / 2 pi) dpsi, so radial alignment picks out
    (4 + k) directions in quad mode ((6 + k) in tri mode).
    """
    denom = TAU / field.q  # 4 in quad mode, 6 in tri
    n_branch = int(round(denom + cone.k))
    if n_branch <= 0:
        raise ParameterError(f"cone with k={cone.k} admits no star geodesics")
    base = [(phase + j * field.q) * denom / (denom + cone.k) for j in range(n_branch)]
    return np.asarray([a % TAU for a in base])


def star_geodesics(
    field: PhiField,
    cone,
    domain: DomainSpec = None,
    phase: float = None,
    opts: TraceOptions = None,
):
    """Trace the k+4 (quad) / k+6 (tri) branches incident on an interior cone."""
    if cone.location != "interior":
        raise ParameterError("star geodesics are defined for interior cones")
    k_min = -4 if field.quantum_mode == "quad" else -6
    if cone.k <= k_min:
        raise ParameterError(f"cone charge k={cone.k} admits no star geodesics")
    scale = field.scale if domain is None else domain.diameter
    r_cap = CAPTURE_RADIUS_REL * scale
    if phase is None:
        phase = _star_phase(field, cone, domain, r_cap)
    angles = star_branch_angles(field, cone, phase)
    paths = []
    for a in angles:
        start = cone.position + r_cap * 1.0001 * np.array([math.cos(a), math.sin(a)])
        paths.append(trace_geodesic(field, start, float(a), domain=domain, opts=opts))
    return paths


def _star_phase(field, cone, domain, r_cap):
    """Cross phase seen at the probe point east of the cone.

    With a domain present the cross is transported from a smooth boundary
    point; otherwise the phase is fixed to zero by convention.
    """
    if domain is None:
        return 0.0
    probe = cone.position + np.array([r_cap, 0.0])
    loop = domain.loops[0]
    # pick a smooth base point: middle of the longest outer segment
    seg_i = int(np.argmax([s.length for s in loop.segments]))
    s_base = loop.segment_start(seg_i) + 0.5 * loop.segments[seg_i].length
    base = loop.point_at(s_base)
    base_angle = boundary_cross_angle(domain, 0, s_base)
    path = _route_inside(domain, field, base, probe)
    rot = transport_rotation(field, path)
    # angle of the probe direction as seen from the cone is zero (east)
    return (base_angle + rot) % field.q


def _route_inside(domain, field, a, b, tries=128):
    """Two-leg polyline from a to b clear of singularities, inside the domain."""
    sing = field.singular_points()
    margin = max(0.02 * domain.diameter, 40 * field.guard_radius)

    def clear(poly):
        pts = _densify(poly, 0.01 * domain.diameter)
        if len(sing):
            for s in sing:
                if np.min(np.hypot(pts[:, 0] - s[0], pts[:, 1] - s[1])) < margin:
                    return False
        inner = pts[1:-1]
        step = max(1, len(inner) // 16)
        return all(domain.contains(p) for p in inner[::step])

    direct = np.array([a, b])
    if clear(direct):
        return direct
    lo, hi = domain.bbox()
    rng = np.random.default_rng(12345)
    for _ in range(tries):
        w = lo + rng.random(2) * (hi - lo)
        poly = np.array([a, w, b])
        if domain.contains(w) and clear(poly):
            return poly
    raise ParameterError("could not route a transport path to the star probe")


def _densify(poly, max_len):
    out = [np.asarray(poly[0], dtype=float)]
    for p, qpt in zip(poly[:-1], poly[1:]):
        p = np.asarray(p, dtype=float)
        qpt = np.asarray(qpt, dtype=float)
        n = max(1, int(math.ceil(np.hypot(*(qpt - p)) / max_len)))
        for i in range(1, n + 1):
            out.append(p + (qpt - p) * (i / n))
    return np.asarray(out)


# ---------------------------------------------------------------------------
# boundary-seeded families
# ---------------------------------------------------------------------------


def seed_boundary_family(
    field: PhiField,
    domain: DomainSpec,
    loop_index: int,
    segment_index: int,
    spacing: float = 1.0,
    opts: TraceOptions = None,
):
    """Geodesics launched inward from a boundary segment at manifold spacing.

    Launch points sit at manifold-arclength multiples of `spacing` along
    the segment (both endpoints included when they land on the lattice);
    the initial direction is the interior normal.
    """
    if spacing <= 0:
        raise ParameterError("spacing must be positive")
    seg = domain.loops[loop_index].segments[segment_index]
    total = _segment_manifold_length(field, seg)
    n_seed = int(math.floor(total / spacing + 1e-9))
    paths = []
    delta = 1e-6 * seg.length
    for j in range(n_seed + 1):
        target = j * spacing
        s = _invert_manifold_length(field, seg, target, total)
        s = min(max(s, delta), seg.length - delta)
        p = seg.point_at(s)
        n_in = rot90(seg.tangent_at(s))
        start = p + 1e-7 * field.scale * n_in
        if domain is not None and not domain.contains(start):
            continue
        theta = math.atan2(n_in[1], n_in[0])
        paths.append(trace_geodesic(field, start, theta, domain=domain, opts=opts))
    return paths


def _segment_manifold_length(field, seg, n=256):
    s = np.linspace(0.0, seg.length, n + 1)
    pts = np.array([seg.point_at(v) for v in s])
    vals = np.exp(field.phi_many(pts))
    return float(np.trapezoid(vals, s))


def _invert_manifold_length(field, seg, target, total, n=256):
    if target <= 0:
        return 0.0
    if target >= total:
        return seg.length
    s = np.linspace(0.0, seg.length, n + 1)
    pts = np.array([seg.point_at(v) for v in s])
    vals = np.exp(field.phi_many(pts))
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (vals[1:] + vals[:-1]) * np.diff(s))])
    return float(np.interp(target, cum, s))
