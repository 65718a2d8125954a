"""Numerical validation of the four flatness/alignment conditions.

Fluxes follow the right-handed (T, N) convention of the rest of the
package; the one exception is the cone-point check, which quadratures
the OUTWARD radial derivative around the cone so that a charge of index
k integrates to k*q directly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np

from .errors import ParameterError, RoutingError
from .field import PhiField
from .geometry import DomainSpec, JunctionInfo, rot90, wrap_angle

TAU = 2.0 * math.pi

DEFAULT_QUANT_TOL = 0.02  # defect threshold as a fraction of the quantum
RESIDUAL_TOL_ANALYTIC = 1e-6
RESIDUAL_TOL_NUMERIC = 1e-3


def lattice_distance(x: float, q: float) -> float:
    """Distance from x to the lattice q*Z."""
    return abs(x - q * round(x / q))


# ---------------------------------------------------------------------------
# condition 1: quantized cone fluxes
# ---------------------------------------------------------------------------


@dataclass
class ConeFluxCheck:
    position: tuple
    declared_k: int | None
    flux: float
    nearest_k: int
    defect: float
    radius: float
    bound_ok: bool = True

    def passes(self, q: float, tol: float) -> bool:
        ok = self.defect < tol * q and self.bound_ok
        if self.declared_k is not None:
            ok = ok and self.nearest_k == self.declared_k
        return ok


def circle_flux(field: PhiField, center, radius: float, n: int = 256) -> float:
    """Outward radial flux of grad(phi) through a circle (trapezoid rule)."""
    center = np.asarray(center, dtype=float)
    t = np.linspace(0.0, TAU, n, endpoint=False)
    rim = np.stack([np.cos(t), np.sin(t)], axis=1)
    pts = center[None, :] + radius * rim
    g = field.grad_many(pts)
    radial = np.einsum("ij,ij->i", g, rim)
    return float(radial.sum() * (TAU * radius / n))


def check_cone_flux(field: PhiField, cone, radius: float, n: int = 256):
    """Flux, nearest integer index, and quantization defect for one cone.

    The circle must enclose this cone only; violations raise.
    """
    pos = np.asarray(getattr(cone, "position", cone), dtype=float)
    declared = getattr(cone, "k", None)
    for other in field.singular_points():
        d = float(np.hypot(*(other - pos)))
        if d < 1e-12 * field.scale:
            continue
        if d <= radius:
            raise ParameterError(
                f"circle of radius {radius} around {tuple(pos)} encloses another singularity"
            )
    flux = circle_flux(field, pos, radius, n)
    k = int(round(flux / field.q))
    defect = abs(flux - k * field.q)
    return ConeFluxCheck(tuple(pos), declared, flux, k, defect, radius)


# ---------------------------------------------------------------------------
# condition 2: normal derivative equals boundary curvature
# ---------------------------------------------------------------------------


@dataclass
class Condition2Check:
    loop: int
    segment: int
    residual: float
    samples: int


def _normal_derivative_at_boundary(field, domain, pts, normals, offsets):
    """Inward-normal derivative of phi on the boundary.

    Analytic parts are evaluated on the spot; a nodal harmonic part is
    sampled at inward offsets (2h, h) with the LOCAL boundary-edge h and
    Richardson-extrapolated to the boundary.
    """
    base = np.zeros(len(pts))
    pos, Q = field._charges
    for p, qq in zip(pos, Q):
        d = pts - p[None, :]
        r2 = d[:, 0] ** 2 + d[:, 1] ** 2
        good = r2 > (10 * field.guard_radius) ** 2
        contrib = np.where(good, (qq / TAU) * np.einsum("ij,ij->i", d, normals) / r2, np.nan)
        base += contrib
    if field.harmonic is None:
        return base
    if not getattr(field.harmonic, "is_numeric", False):
        g = field.harmonic.grad_at(pts)
        return base + np.einsum("ij,ij->i", g, normals)
    off = offsets[:, None] * normals
    g1 = field.harmonic.grad_at(pts + off)
    g2 = field.harmonic.grad_at(pts + 2.0 * off)
    d1 = np.einsum("ij,ij->i", g1, normals)
    d2 = np.einsum("ij,ij->i", g2, normals)
    return base + (2.0 * d1 - d2)


def _local_edge_lengths(mesh, loop_index, segment_index, svals, fallback):
    """Boundary-edge length of the mesh at given arclengths of one segment."""
    rows = [
        (t.s0, t.s1)
        for (t, e) in zip(mesh.boundary_tags, mesh.boundary_edges)
        if t.loop == loop_index and t.segment == segment_index
    ]
    if not rows:
        return np.full(len(svals), fallback)
    rows.sort()
    s0 = np.array([r[0] for r in rows])
    s1 = np.array([r[1] for r in rows])
    idx = np.clip(np.searchsorted(s0, svals, side="right") - 1, 0, len(rows) - 1)
    return np.maximum(s1[idx] - s0[idx], 1e-12)


def check_condition2(field: PhiField, domain: DomainSpec, samples_per_segment: int = 33):
    """Sup norm of (d phi / dN - curvature) sampled along each smooth segment."""
    results = []
    numeric = getattr(field.harmonic, "is_numeric", False)
    fallback = 1e-5 * domain.diameter
    for li, loop in enumerate(domain.loops):
        for si, seg in enumerate(loop.segments):
            frac = np.linspace(0.05, 0.95, samples_per_segment)
            svals = frac * seg.length
            pts = np.array([seg.point_at(s) for s in svals])
            normals = np.array([rot90(seg.tangent_at(s)) for s in svals])
            kappa = np.array([seg.turning_rate_at(s) for s in svals])
            if numeric:
                offsets = _local_edge_lengths(field.harmonic.mesh, li, si, svals, fallback)
            else:
                offsets = np.full(len(svals), fallback)
            dn = _normal_derivative_at_boundary(field, domain, pts, normals, offsets)
            ok = ~np.isnan(dn)
            resid = float(np.max(np.abs(dn[ok] - kappa[ok]))) if ok.any() else math.inf
            results.append(Condition2Check(li, si, resid, int(ok.sum())))
    return results


# ---------------------------------------------------------------------------
# condition 3: junction flux lattice
# ---------------------------------------------------------------------------


@dataclass
class Condition3Check:
    position: tuple
    theta_in: float
    flux: float
    nearest_n: int
    defect: float
    radius: float

    def passes(self, q: float, tol: float) -> bool:
        return self.defect < tol * q


def _junction_arc_flux(field, junction, domain, radius, n=256):
    """Flux through the interior arc around a junction, N toward the junction."""
    loop = domain.loops[junction.loop_index]
    seg_next = loop.segments[junction.incident[1]]
    tb = seg_next.tangent_at(0.0)
    a0 = math.atan2(tb[1], tb[0])
    t = a0 + junction.theta_in * (np.arange(n) + 0.5) / n
    rim = np.stack([np.cos(t), np.sin(t)], axis=1)
    pts = junction.position[None, :] + radius * rim
    g = field.grad_many(pts)
    radial = np.einsum("ij,ij->i", g, rim)
    # ds = r * dtheta; N = -rim
    return float(-radial.sum() * (junction.theta_in * radius / n))


def check_condition3(
    field: PhiField, domain: DomainSpec, junction: JunctionInfo, radius: float = None
):
    """Junction flux against the lattice {n*q + theta_in}."""
    if radius is None:
        loop = domain.loops[junction.loop_index]
        seg_a = loop.segments[junction.incident[0]]
        seg_b = loop.segments[junction.incident[1]]
        radius = min(1e-2 * domain.diameter, 0.25 * seg_a.length, 0.25 * seg_b.length)
        d_sing = field.singular_distance(junction.position)
        if d_sing > 1e-9 * field.scale:
            radius = min(radius, 0.3 * d_sing)
    f1 = _junction_arc_flux(field, junction, domain, radius)
    f2 = _junction_arc_flux(field, junction, domain, 0.5 * radius)
    f4 = _junction_arc_flux(field, junction, domain, 0.25 * radius)
    # Richardson in the radius: the charge term is radius-independent, the
    # regular remainder expands in powers of r
    flux = (8.0 * f4 - 6.0 * f2 + f1) / 3.0
    q = field.q
    nearest = int(round((flux - junction.theta_in) / q))
    defect = abs(flux - (nearest * q + junction.theta_in))
    return Condition3Check(
        tuple(junction.position), junction.theta_in, flux, nearest, defect, radius
    )


def junction_charge(theta_in: float, n: int, q: float) -> float:
    """Charge a junction of inner angle theta_in needs for n quanta of flux."""
    if not (0.0 < theta_in < TAU):
        raise ParameterError(f"inner angle must lie in (0, 2*pi), got {theta_in}")
    if n <= 0:
        raise ParameterError(f"the flux index n must be positive, got {n}")
    Q = TAU * (n * q / theta_in - 1.0)
    if Q >= TAU:
        import warnings

        warnings.warn(
            f"junction charge Q={Q:.6g} >= 2*pi is flagged divergent", stacklevel=2
        )
    return Q


# ---------------------------------------------------------------------------
# condition 4: inter-boundary flux lattice
# ---------------------------------------------------------------------------


@dataclass
class Condition4Check:
    loops: tuple
    flux: float
    theta_difference: float
    nearest_n: int
    defect: float
    vacuous: bool = False
    curve: list = dc_field(default_factory=list)

    def passes(self, q: float, tol: float) -> bool:
        return self.vacuous or self.defect < tol * q


_GL16_X, _GL16_W = np.polynomial.legendre.leggauss(16)


def path_flux(field: PhiField, pts) -> float:
    """Integral of d(phi)/dN along a polyline, N the left normal."""
    pts = np.asarray(pts, dtype=float)
    a, b = pts[:-1], pts[1:]
    d = b - a
    ell = np.hypot(d[:, 0], d[:, 1])
    keep = ell > 0
    a, b, d, ell = a[keep], b[keep], d[keep], ell[keep]
    t = 0.5 * (_GL16_X + 1.0)
    nodes = a[:, None, :] + d[:, None, :] * t[None, :, None]
    flat = nodes.reshape(-1, 2)
    g = field.grad_many(flat).reshape(len(a), len(t), 2)
    n_left = np.stack([-d[:, 1], d[:, 0]], axis=1) / ell[:, None]
    dn = np.einsum("ptk,pk->pt", g, n_left)
    return float(np.sum(ell * 0.5 * (dn @ _GL16_W)))


def _refine_path(pts, max_len):
    pts = np.asarray(pts, dtype=float)
    out = [pts[0]]
    for a, b in zip(pts[:-1], pts[1:]):
        n = max(1, int(math.ceil(np.hypot(*(b - a)) / max_len)))
        for i in range(1, n + 1):
            out.append(a + (b - a) * (i / n))
    return np.asarray(out)


def route_condition4_curve(
    field: PhiField, domain: DomainSpec, hole_index: int, n_scan: int = 96
):
    """Shortest straight outer-to-hole segment clear of all singularities."""
    outer = domain.loops[0]
    hole = domain.loops[hole_index]
    margin = max(0.02 * domain.diameter, 20 * field.guard_radius)
    s_out = np.linspace(0, outer.length, n_scan, endpoint=False)
    s_hole = np.linspace(0, hole.length, n_scan, endpoint=False)
    p_out = np.array([outer.point_at(s) for s in s_out])
    p_hole = np.array([hole.point_at(s) for s in s_hole])
    sing = field.singular_points()
    junctions = np.array([j.position for j in domain.junctions]) if domain.junctions else None

    cand = []
    for i in range(n_scan):
        for j in range(n_scan):
            cand.append((float(np.hypot(*(p_hole[j] - p_out[i]))), i, j))
    cand.sort()
    for length, i, j in cand:
        a, b = p_out[i], p_hole[j]
        seg = np.linspace(0, 1, 33)[:, None]
        line = a[None, :] * (1 - seg) + b[None, :] * seg
        ok = True
        if len(sing):
            dmin = min(
                float(np.min(np.hypot(line[:, 0] - s[0], line[:, 1] - s[1])))
                for s in sing
            )
            ok = dmin > margin
        if ok and junctions is not None and len(junctions):
            dj = min(
                float(np.min(np.hypot(line[1:-1, 0] - s[0], line[1:-1, 1] - s[1])))
                for s in junctions
            )
            ok = dj > margin
        if ok:
            interior = line[1:-1]
            ok = all(domain.contains(p) for p in interior[:: max(1, len(interior) // 8)])
        if ok:
            return (float(s_out[i]), float(s_hole[j]), np.array([a, b]))
    raise RoutingError(f"no admissible curve from outer loop to hole {hole_index}")


def check_condition4(
    field: PhiField,
    domain: DomainSpec,
    hole_index: int = None,
    curve=None,
    endpoints_s=None,
):
    """Flux through an outer-to-hole curve against {theta2 - theta1 + n*q}."""
    if len(domain.loops) == 1:
        return Condition4Check((0, 0), 0.0, 0.0, 0, 0.0, vacuous=True)
    if hole_index is None:
        hole_index = 1
    if curve is None:
        s0, s1, curve = route_condition4_curve(field, domain, hole_index)
    else:
        curve = np.asarray(curve, dtype=float)
        if endpoints_s is None:
            raise ParameterError("explicit curves need endpoints_s=(s_outer, s_hole)")
        s0, s1 = endpoints_s
    t1 = domain.loops[0].tangent_at(s0)
    t2 = domain.loops[hole_index].tangent_at(s1)
    theta1 = math.atan2(t1[1], t1[0])
    theta2 = math.atan2(t2[1], t2[0])
    path = _refine_path(curve, 5e-3 * domain.diameter)
    flux = path_flux(field, path)
    q = field.q
    x = flux - (theta2 - theta1)
    nearest = int(round(x / q))
    defect = abs(x - nearest * q)
    return Condition4Check(
        (0, hole_index), flux, theta2 - theta1, nearest, defect, curve=curve.tolist()
    )


# ---------------------------------------------------------------------------
# the full report
# ---------------------------------------------------------------------------


@dataclass
class ConditionReport:
    quantum: float
    quant_tol: float
    residual_tol: float
    cones: list
    condition2: list
    condition3: list
    condition4: list
    notes: list

    @property
    def passed(self) -> bool:
        q = self.quantum
        if any(not c.passes(q, self.quant_tol) for c in self.cones):
            return False
        if any(r.residual > self.residual_tol for r in self.condition2):
            return False
        if any(not c.passes(q, self.quant_tol) for c in self.condition3):
            return False
        if any(not c.passes(q, self.quant_tol) for c in self.condition4):
            return False
        return True

    def to_json(self) -> dict:
        return {
            "quantum": self.quantum,
            "quant_tol": self.quant_tol,
            "residual_tol": self.residual_tol,
            "passed": self.passed,
            "cones": [asdict(c) for c in self.cones],
            "condition2": [asdict(c) for c in self.condition2],
            "condition3": [asdict(c) for c in self.condition3],
            "condition4": [asdict(c) for c in self.condition4],
            "notes": list(self.notes),
        }

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1, sort_keys=True)


def _auto_cone_radius(field, domain, cone):
    pos = cone.position
    d_bnd = domain.boundary_distance(pos)
    d_sing = math.inf
    for other in field.singular_points():
        d = float(np.hypot(*(other - pos)))
        if d > 1e-12 * field.scale:
            d_sing = min(d_sing, d)
    return 0.45 * min(d_bnd, d_sing)


def check_all(
    field: PhiField,
    domain: DomainSpec,
    quant_tol: float = DEFAULT_QUANT_TOL,
    residual_tol: float = None,
) -> ConditionReport:
    """Run all four condition checks with default tolerances."""
    if residual_tol is None:
        residual_tol = RESIDUAL_TOL_NUMERIC if field.is_numeric else RESIDUAL_TOL_ANALYTIC
    notes = []
    cones = []
    k_min = -4 if field.quantum_mode == "quad" else -6
    for cone in field.cones:
        if cone.location != "interior":
            continue
        r = _auto_cone_radius(field, domain, cone)
        chk = check_cone_flux(field, cone, r)
        if cone.k <= k_min:
            chk.bound_ok = False
            notes.append(f"cone at {tuple(cone.position)} has k={cone.k} <= {k_min}")
        cones.append(chk)
    c2 = check_condition2(field, domain)
    c3 = [check_condition3(field, domain, j) for j in domain.junctions]
    c4 = []
    for hole in range(1, len(domain.loops)):
        c4.append(check_condition4(field, domain, hole_index=hole))
    if len(domain.loops) == 1:
        c4.append(check_condition4(field, domain))
    report = ConditionReport(
        quantum=field.q,
        quant_tol=quant_tol,
        residual_tol=residual_tol,
        cones=cones,
        condition2=c2,
        condition3=c3,
        condition4=c4,
        notes=notes,
    )
    return report
