"""Recovery of interior point charges from boundary Cauchy data.

The reciprocity-gap functionals mu_m = loop-integral(phi dV_m/dN - V_m
dphi/dN) ds with V_m(z) = z^m reduce, by the second Green identity, to
the power sums mu_m = sum_i Q_i z_i^m of the enclosed charges.  A Hankel
matrix pencil turns those power sums into the charge count, locations
and strengths; strengths snap to the q-lattice and locations are then
polished by Gauss-Newton on the same boundary functionals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.linalg import eig, lstsq, svd

from .background import DirichletSolver, triangulate
from .conditions import ConditionReport, check_all, junction_charge
from .errors import IndeterminateCountError, ParameterError, RecoveryError
from .field import ConePoint, HarmonicClosedForm, JunctionCharge, PhiField
from .geometry import DomainSpec, rot90

TAU = 2.0 * math.pi

DEFAULT_MOMENT_ORDER = 12
RANK_GAP_MIN = 10.0
QUANT_SNAP = 0.1  # strengths within this fraction of q snap to the lattice


# ---------------------------------------------------------------------------
# Cauchy data
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class CauchyData:
    """Boundary samples of (phi, d phi/dN) with quadrature weights.

    Normals point into the domain; weights are arclength quadrature
    weights so that sum(w * f) approximates the loop integral of f ds.
    """

    points: np.ndarray  # (N, 2)
    arclength: np.ndarray  # (N,) per-loop arclength of each sample
    phi: np.ndarray  # (N,)
    dn_phi: np.ndarray  # (N,)
    loop_ids: np.ndarray  # (N,) int
    weights: np.ndarray  # (N,)
    normals: np.ndarray  # (N, 2) inward unit normals
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        n = len(self.points)
        for name in ("arclength", "phi", "dn_phi", "loop_ids", "weights"):
            if len(getattr(self, name)) != n:
                raise ParameterError(f"CauchyData field {name} has wrong length")
        if self.normals.shape != (n, 2):
            raise ParameterError("CauchyData normals have wrong shape")

    def translated(self, t) -> "CauchyData":
        t = np.asarray(t, dtype=float).reshape(2)
        return CauchyData(
            self.points + t[None, :],
            self.arclength.copy(),
            self.phi.copy(),
            self.dn_phi.copy(),
            self.loop_ids.copy(),
            self.weights.copy(),
            self.normals.copy(),
            dict(self.meta),
        )

    # text format: per-loop blocks of rows "arclength x y phi dn_phi"
    def to_text(self) -> str:
        out = []
        for li in np.unique(self.loop_ids):
            out.append(f"# loop {li}")
            sel = np.where(self.loop_ids == li)[0]
            for i in sel:
                x, y = self.points[i]
                out.append(
                    f"{self.arclength[i]!r} {x!r} {y!r} {self.phi[i]!r} {self.dn_phi[i]!r}"
                )
        return "\n".join(out) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CauchyData":
        """Parse the 5-column format; weights and normals are rebuilt
        from the sample spacing (periodic trapezoid per loop)."""
        rows, loops = [], []
        current = 0
        for line in text.strip().splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line.split()
                current = int(parts[-1]) if parts[-1].isdigit() else current
                continue
            vals = [float(v) for v in line.split()]
            if len(vals) != 5:
                raise ParameterError("CauchyData rows need 5 columns")
            rows.append(vals)
            loops.append(current)
        if len(rows) < 3:
            raise ParameterError("not enough Cauchy samples")
        rows = np.asarray(rows)
        loops = np.asarray(loops, dtype=int)
        pts = rows[:, 1:3]
        weights = np.zeros(len(rows))
        normals = np.zeros((len(rows), 2))
        for li in np.unique(loops):
            sel = np.where(loops == li)[0]
            p = pts[sel]
            nxt = np.roll(p, -1, axis=0)
            prv = np.roll(p, 1, axis=0)
            chord = nxt - prv
            ell = np.hypot(chord[:, 0], chord[:, 1])
            weights[sel] = 0.5 * ell
            t = chord / ell[:, None]
            normals[sel] = np.stack([-t[:, 1], t[:, 0]], axis=1)
        return cls(pts, rows[:, 0], rows[:, 3], rows[:, 4], loops, weights, normals)

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_text())

    @classmethod
    def load(cls, path) -> "CauchyData":
        with open(path) as f:
            return cls.from_text(f.read())


_GL4_X, _GL4_W = np.polynomial.legendre.leggauss(4)


def sample_domain_cauchy(domain: DomainSpec, phi_fn, dnphi_fn, panels_per_segment=None):
    """Cauchy data at per-segment Gauss panels of the domain boundary.

    phi_fn(x, y) and dnphi_fn(x, y, nx, ny) supply the trace values; the
    inward normal of the stored traversal is passed to dnphi_fn.
    """
    pts, s_all, phis, dns, loops, ws, norms = [], [], [], [], [], [], []
    target = domain.diameter / 96.0
    for li, loop in enumerate(domain.loops):
        s_off = 0.0
        for seg in loop.segments:
            n_pan = panels_per_segment or max(4, int(math.ceil(seg.length / target)))
            edges = np.linspace(0.0, seg.length, n_pan + 1)
            for a, b in zip(edges[:-1], edges[1:]):
                mid, half = 0.5 * (a + b), 0.5 * (b - a)
                for xg, wg in zip(_GL4_X, _GL4_W):
                    s = mid + half * xg
                    p = seg.point_at(s)
                    nvec = rot90(seg.tangent_at(s))
                    pts.append(p)
                    s_all.append(s_off + s)
                    phis.append(phi_fn(p[0], p[1]))
                    dns.append(dnphi_fn(p[0], p[1], nvec[0], nvec[1]))
                    loops.append(li)
                    ws.append(wg * half)
                    norms.append(nvec)
            s_off += seg.length
    return CauchyData(
        np.asarray(pts),
        np.asarray(s_all),
        np.asarray(phis),
        np.asarray(dns),
        np.asarray(loops, dtype=int),
        np.asarray(ws),
        np.asarray(norms),
        meta={"panels_per_segment": panels_per_segment},
    )


def field_cauchy_data(domain: DomainSpec, field: PhiField, **kw) -> CauchyData:
    """Exact Cauchy traces of a field on the domain boundary."""

    def phi_fn(x, y):
        return field.phi((x, y))

    def dnphi_fn(x, y, nx, ny):
        g = field.grad((x, y))
        return float(g[0] * nx + g[1] * ny)

    return sample_domain_cauchy(domain, phi_fn, dnphi_fn, **kw)


# ---------------------------------------------------------------------------
# harmonic moments
# ---------------------------------------------------------------------------


def harmonic_moments(data: CauchyData, M: int, center=0.0, scale=1.0) -> np.ndarray:
    """Reciprocity-gap moments mu_m = sum_i Q_i w_i^m, w = (z - center)/scale.

    With the default center/scale these are the plain power sums of the
    charges.  Requires closed-loop data (weights covering each loop).
    """
    if M < 0:
        raise ParameterError("moment order must be nonnegative")
    if len(data.points) < 2 * (M + 1):
        raise ParameterError("insufficient samples for the requested moment order")
    z = (data.points[:, 0] + 1j * data.points[:, 1] - complex(center)) / scale
    nc = (data.normals[:, 0] + 1j * data.normals[:, 1]) / scale
    mu = np.zeros(M + 1, dtype=complex)
    w = data.weights
    phi = data.phi
    dn = data.dn_phi
    zp = np.ones_like(z)  # z^(m-1) running power
    # m = 0: v = 1, dv/dn = 0
    mu[0] = np.sum(w * (-dn))
    for m in range(1, M + 1):
        dv = m * zp * nc  # d(z^m)/dN as complex-linear gradient action
        v = zp * z
        mu[m] = np.sum(w * (phi * dv - v * dn))
        zp = v
    return mu


# ---------------------------------------------------------------------------
# matrix-pencil recovery
# ---------------------------------------------------------------------------


@dataclass
class RecoveredCharges:
    count: int
    positions: np.ndarray  # (N, 2)
    raw_strengths: np.ndarray  # (N,) complex
    k: list  # nearest integer indices (None where non-quantized)
    quantized: list  # bools
    residual: float
    singular_values: np.ndarray
    notes: list = dc_field(default_factory=list)


def _hankel_rank(mu, tol):
    L = (len(mu)) // 2
    H0 = np.array([[mu[i + j] for j in range(L)] for i in range(L)])
    H1 = np.array([[mu[i + j + 1] for j in range(L)] for i in range(L)])
    U, sv, Vh = svd(H0)
    scale = max(sv[0], 1e-300)
    keep = sv > tol * scale
    N = int(keep.sum())
    if N < len(sv):
        dropped = sv[N] / scale
        kept = sv[N - 1] / scale if N else 1.0
        if N and dropped > 0 and kept / dropped < RANK_GAP_MIN:
            raise IndeterminateCountError(
                f"singular-value gap {kept / dropped:.2f} below {RANK_GAP_MIN}"
            )
    return N, H0, H1, U, sv, Vh


def recover_charges(
    moments,
    tol: float = 1e-8,
    q: float = math.pi / 2.0,
    center=0.0,
    scale: float = 1.0,
    polish: bool = True,
) -> RecoveredCharges:
    """Charge count, positions and quantized strengths from moments.

    `moments` are power sums in the (center, scale) frame used by
    harmonic_moments; returned positions are physical.
    """
    mu = np.asarray(moments, dtype=complex)
    abs_scale = max(np.abs(mu).max(), 1e-300)
    if np.abs(mu).max() <= tol:
        return RecoveredCharges(
            0, np.zeros((0, 2)), np.zeros(0, dtype=complex), [], [], 0.0, np.zeros(0)
        )
    N, H0, H1, U, sv, Vh = _hankel_rank(mu, tol)
    if N == 0:
        return RecoveredCharges(
            0, np.zeros((0, 2)), np.zeros(0, dtype=complex), [], [], 0.0, sv
        )

    # matrix pencil: eigenvalues of the rank-truncated shift operator
    Un = U[:, :N]
    Vn = Vh[:N, :].conj().T
    A = Un.conj().T @ H1 @ Vn @ np.diag(1.0 / sv[:N])
    w_nodes = eig(A)[0]

    Q = _vandermonde_strengths(mu, w_nodes)
    if polish:
        w_nodes, Q = _gauss_newton_polish(mu, w_nodes, Q)

    ks, quantized, notes = [], [], []
    Q_final = Q.copy()
    for i, qi in enumerate(Q):
        k = int(round(qi.real / q))
        if abs(qi - k * q) <= QUANT_SNAP * q and k != 0:
            ks.append(k)
            quantized.append(True)
            Q_final[i] = k * q
        else:
            ks.append(None)
            quantized.append(False)
            notes.append(f"non-quantized charge {qi:.6g} at node {i}")
    if polish and all(quantized):
        w_nodes, _ = _gauss_newton_polish(mu, w_nodes, Q_final, freeze=True)

    resid = float(np.linalg.norm(_moment_residual(mu, w_nodes, Q_final)) / abs_scale)
    z = complex(center) + np.asarray(w_nodes) * scale
    positions = np.stack([z.real, z.imag], axis=1)
    order = np.lexsort((positions[:, 1], positions[:, 0]))
    return RecoveredCharges(
        N,
        positions[order],
        Q[order],
        [ks[i] for i in order],
        [quantized[i] for i in order],
        resid,
        sv,
        notes,
    )


def _vandermonde_strengths(mu, w_nodes):
    V = np.vander(w_nodes, N=len(mu), increasing=True).T
    sol, *_ = lstsq(V, mu)
    return sol


def _moment_residual(mu, w_nodes, Q):
    V = np.vander(w_nodes, N=len(mu), increasing=True).T
    return V @ Q - mu


def _gauss_newton_polish(mu, w_nodes, Q, freeze=False, iters=30):
    """Refine node positions (and optionally strengths) on the moment residual."""
    w = np.asarray(w_nodes, dtype=complex).copy()
    Q = np.asarray(Q, dtype=complex).copy()
    m_idx = np.arange(len(mu))
    best = np.linalg.norm(_moment_residual(mu, w, Q))
    for _ in range(iters):
        r = _moment_residual(mu, w, Q)
        # complex Jacobian wrt node positions
        J = np.zeros((len(mu), len(w)), dtype=complex)
        for i, wi in enumerate(w):
            powers = np.concatenate([[0.0], m_idx[1:] * wi ** (m_idx[1:] - 1)])
            J[:, i] = Q[i] * powers
        Jr = np.concatenate([np.stack([J.real, -J.imag], axis=2).reshape(len(mu), -1),
                             np.stack([J.imag, J.real], axis=2).reshape(len(mu), -1)])
        rr = np.concatenate([r.real, r.imag])
        try:
            step, *_ = lstsq(Jr, -rr)
        except Exception:
            break
        dw = step[0::2] + 1j * step[1::2]
        t = 1.0
        improved = False
        for _ in range(20):
            w_try = w + t * dw
            Q_try = Q if freeze else _vandermonde_strengths(mu, w_try)
            nrm = np.linalg.norm(_moment_residual(mu, w_try, Q_try))
            if nrm < best:
                w, Q, best = w_try, Q_try, nrm
                improved = True
                break
            t *= 0.5
        if not improved or best < 1e-15 * max(np.abs(mu).max(), 1.0):
            break
    return w, Q


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


def auto_junction_charges(domain: DomainSpec, overrides: dict = None):
    """Charges demanded by the junction-flux lattice, minimal-|Q| branch.

    At angles that are multiples of the quantum the minimal charge is
    zero and nothing is placed.  `overrides` maps junction index -> n.
    """
    q = domain.q
    out = []
    for idx, j in enumerate(domain.junctions):
        n = None
        if overrides and idx in overrides:
            n = overrides[idx]
        else:
            n = max(1, int(round(j.theta_in / q)))
        Q = junction_charge(j.theta_in, n, q)
        if abs(Q) > 1e-12:
            out.append(JunctionCharge(j.position, Q))
    return out


def assemble_boundary_data(
    domain: DomainSpec, F, junction_charges=(), panels_per_segment=None
) -> CauchyData:
    """Cauchy data of the harmonic-plus-interior-charge part of the field.

    Neumann data is the boundary turning rate (the alignment condition);
    Dirichlet data is -ln F.  Contributions of already-placed junction
    charges are subtracted analytically from both traces.
    """
    jpos = np.array([jc.position for jc in junction_charges]).reshape(-1, 2)
    jQ = np.array([jc.Q for jc in junction_charges])

    pts, s_all, phis, dns, loops, ws, norms = [], [], [], [], [], [], []
    target = domain.diameter / 96.0
    for li, loop in enumerate(domain.loops):
        s_off = 0.0
        for seg in loop.segments:
            n_pan = panels_per_segment or max(4, int(math.ceil(seg.length / target)))
            edges = np.linspace(0.0, seg.length, n_pan + 1)
            for a, b in zip(edges[:-1], edges[1:]):
                mid, half = 0.5 * (a + b), 0.5 * (b - a)
                for xg, wg in zip(_GL4_X, _GL4_W):
                    s = mid + half * xg
                    p = seg.point_at(s)
                    nvec = rot90(seg.tangent_at(s))
                    Fv = F(p[0], p[1])
                    if Fv <= 0:
                        raise ParameterError(f"size function must be positive at {tuple(p)}")
                    phi_v = -math.log(Fv)
                    dn_v = seg.turning_rate_at(s)
                    for jp, jq in zip(jpos, jQ):
                        d = p - jp
                        r2 = float(d @ d)
                        phi_v -= (jq / TAU) * 0.5 * math.log(r2)
                        dn_v -= (jq / TAU) * float(d @ nvec) / r2
                    pts.append(p)
                    s_all.append(s_off + s)
                    phis.append(phi_v)
                    dns.append(dn_v)
                    loops.append(li)
                    ws.append(wg * half)
                    norms.append(nvec)
            s_off += seg.length
    return CauchyData(
        np.asarray(pts),
        np.asarray(s_all),
        np.asarray(phis),
        np.asarray(dns),
        np.asarray(loops, dtype=int),
        np.asarray(ws),
        np.asarray(norms),
        meta={"junction_charges": len(jQ)},
    )


@dataclass
class PipelineResult:
    field: PhiField
    report: ConditionReport
    recovered: RecoveredCharges
    data: CauchyData


def solve_pipeline(
    domain: DomainSpec,
    F,
    junction_overrides: dict = None,
    extra_cones=(),
    mesh_h: float = None,
    moment_order: int = DEFAULT_MOMENT_ORDER,
    tol: float = 1e-8,
) -> PipelineResult:
    """Boundary size demand -> recovered charges -> direct re-solve -> report.

    `extra_cones` passes user-hinted boundary cones straight into the
    re-solved field (they are not searched for).
    """
    jcs = auto_junction_charges(domain, junction_overrides)
    data = assemble_boundary_data(domain, F, jcs)

    lo, hi = domain.bbox()
    center = complex(*(0.5 * (lo + hi)))
    scale = 0.5 * float(np.hypot(*(hi - lo)))
    mu = harmonic_moments(data, moment_order, center=center, scale=scale)
    rec = recover_charges(mu, tol=tol, q=domain.q, center=center, scale=scale)

    cones = []
    for pos, k, ok in zip(rec.positions, rec.k, rec.quantized):
        if not ok:
            raise RecoveryError(f"non-quantized recovered charge at {tuple(pos)}")
        if not domain.contains(pos):
            raise RecoveryError(f"recovered charge at {tuple(pos)} is outside the domain")
        cones.append(ConePoint(pos, k))
    cones.extend(extra_cones)

    if mesh_h is None:
        mesh_h = domain.diameter / 80.0
    mesh = triangulate(domain, mesh_h)
    charges = [(c.position, c.strength(domain.q)) for c in cones] + [
        (jc.position, jc.Q) for jc in jcs
    ]

    def dirichlet_data(x, y):
        v = -math.log(F(x, y))
        for pos, Qv in charges:
            v -= (Qv / TAU) * math.log(math.hypot(x - pos[0], y - pos[1]))
        return v

    phi_l = DirichletSolver(mesh).solve(dirichlet_data)
    quantum = "quad" if abs(domain.q - math.pi / 2) < 1e-12 else "tri"
    fld = PhiField(
        quantum=quantum,
        cones=cones,
        junction_charges=jcs,
        harmonic=phi_l,
        scale=domain.diameter,
    )
    report = check_all(fld, domain)
    return PipelineResult(fld, report, rec, data)
