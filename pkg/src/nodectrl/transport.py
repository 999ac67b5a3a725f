"""Transport of particle-discretized densities onto Dirac mixtures."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .approx import CellDecomposition, synthesize_from_decomposition
from .core import (
    Box,
    CertificationError,
    ControlSchedule,
    DiscreteMeasure,
    PreconditionError,
    SchemaError,
    as_points,
    require_dimension,
    require_distinct,
    schedule_metrics,
)
from .flow import flow_points
from .wasserstein import wasserstein1

log = logging.getLogger(__name__)

ZETA_FLOOR = 1e-6
BETA_TOL = 1e-9


@dataclass(frozen=True)
class DensitySpec:
    """Uniform density on a union of disjoint boxes, or an equal-weight sample."""

    kind: str
    boxes: tuple[Box, ...] = ()
    points: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "uniform_boxes":
            if not self.boxes:
                raise PreconditionError("uniform density needs at least one box")
            object.__setattr__(self, "boxes", tuple(self.boxes))
            if any(b.volume <= 0 for b in self.boxes):
                raise PreconditionError("boxes must have positive volume")
            for b1, b2 in itertools.combinations(self.boxes, 2):
                if b1.intersect(b2) is not None:
                    raise PreconditionError("density boxes must have disjoint interiors")
        elif self.kind == "samples":
            pts = as_points(self.points)
            pts.setflags(write=False)
            object.__setattr__(self, "points", pts)
        else:
            raise PreconditionError(f"unknown density type {self.kind!r}")

    @classmethod
    def uniform(cls, *boxes: Box) -> "DensitySpec":
        return cls("uniform_boxes", tuple(boxes))

    @classmethod
    def from_samples(cls, points) -> "DensitySpec":
        return cls("samples", points=np.asarray(points, float))

    @property
    def d(self) -> int:
        return self.boxes[0].d if self.kind == "uniform_boxes" else int(self.points.shape[1])

    @property
    def volume(self) -> float:
        return math.fsum(b.volume for b in self.boxes)

    def support(self) -> Box:
        if self.kind == "uniform_boxes":
            return Box(np.min([b.lo for b in self.boxes], axis=0), np.max([b.hi for b in self.boxes], axis=0))
        return Box(self.points.min(axis=0), self.points.max(axis=0))

    def mass_boxes(self) -> list[Box]:
        """Boxes carrying the mass (the sample bounding box for sample densities)."""
        return list(self.boxes) if self.kind == "uniform_boxes" else [self.support()]

    def slab_mass(self, axis: int, a: float, b: float) -> float:
        """Mass with ``a <= x[axis] <= b``."""
        if self.kind == "samples":
            x = self.points[:, axis]
            return float(np.count_nonzero((x >= a) & (x <= b))) / len(x)
        tot = 0.0
        for bx in self.boxes:
            lo, hi = bx.lo[axis], bx.hi[axis]
            frac = max(0.0, min(b, hi) - max(a, lo)) / (hi - lo)
            tot += frac * bx.volume
        return tot / self.volume

    def marginal_cdf(self, s) -> np.ndarray:
        s = np.asarray(s, float)
        if self.kind == "samples":
            x = np.sort(self.points[:, 0])
            return np.searchsorted(x, s, side="right") / len(x)
        out = np.zeros_like(s)
        for bx in self.boxes:
            out = out + bx.volume * np.clip((s - bx.lo[0]) / (bx.hi[0] - bx.lo[0]), 0.0, 1.0)
        return out / self.volume

    def centroid(self) -> np.ndarray:
        if self.kind == "samples":
            return self.points.mean(axis=0)
        return sum(b.volume * b.center for b in self.boxes) / self.volume

    def to_dict(self) -> dict:
        if self.kind == "samples":
            return {"type": "samples", "points": self.points.tolist()}
        return {"type": "uniform_boxes", "boxes": [{"lo": b.lo.tolist(), "hi": b.hi.tolist()} for b in self.boxes]}

    @classmethod
    def from_dict(cls, doc) -> "DensitySpec":
        if not isinstance(doc, dict) or "type" not in doc:
            raise SchemaError("density document needs a 'type'")
        if doc["type"] == "uniform_boxes":
            return cls.uniform(*[Box(b["lo"], b["hi"]) for b in doc["boxes"]])
        if doc["type"] == "samples":
            return cls.from_samples(doc["points"])
        raise SchemaError(f"unknown density type {doc['type']!r}")


# ---------------------------------------------------------------- hyperplanes


def _check_betas(betas) -> np.ndarray:
    b = np.asarray(betas, float).reshape(-1)
    if len(b) == 0 or np.any(b <= 0):
        raise PreconditionError("betas must be positive")
    if abs(math.fsum(b) - 1.0) > BETA_TOL:
        raise PreconditionError(f"betas must sum to 1 (got {math.fsum(b)!r})")
    return b


def _invert_piecewise_linear(xs: np.ndarray, F: np.ndarray, q: float, tol: float = 1e-12) -> float:
    """Midpoint of ``{s : F(s) = q}`` for a nondecreasing piecewise-linear ``F`` given at ``xs``."""
    j = int(np.argmax(F >= q - tol))
    if j == 0:
        s_lo = xs[0]
    else:
        s_lo = xs[j - 1] + (q - F[j - 1]) / (F[j] - F[j - 1]) * (xs[j] - xs[j - 1])
    below = np.flatnonzero(F <= q + tol)
    j2 = int(below[-1])
    if j2 == len(xs) - 1:
        s_hi = xs[-1]
    else:
        s_hi = xs[j2] + (q - F[j2]) / (F[j2 + 1] - F[j2]) * (xs[j2 + 1] - xs[j2])
    return 0.5 * (min(s_lo, s_hi) + max(s_lo, s_hi))


def place_mass_hyperplanes(rho0: DensitySpec, betas) -> list[float]:
    """Offsets ``c_1 < ... < c_{M-1}`` whose x1-marginal increments are the betas."""
    b = _check_betas(betas)
    qs = np.cumsum(b)[:-1]
    if rho0.kind == "uniform_boxes":
        xs = np.unique(np.concatenate([[bx.lo[0], bx.hi[0]] for bx in rho0.boxes]))
        F = rho0.marginal_cdf(xs)
        cs = [_invert_piecewise_linear(xs, F, float(q)) for q in qs]
    else:
        x = np.sort(rho0.points[:, 0])
        n = len(x)
        cs = []
        for q in qs:
            k = q * n
            kr = round(k)
            if abs(k - kr) < 1e-9 * n and 0 < kr < n:
                cs.append(0.5 * (x[kr - 1] + x[kr]))
            else:
                cs.append(float(x[min(n - 1, int(math.ceil(k)) - 1)]))
    if any(c2 <= c1 for c1, c2 in zip(cs, cs[1:])):
        raise PreconditionError("mass hyperplanes are not strictly increasing (atoms in the x1 marginal?)")
    return [float(c) for c in cs]


# ---------------------------------------------------------------- particles


def sample_particles(rho0: DensitySpec, n: int, seed: int = 0) -> DiscreteMeasure:
    """``n`` equal-weight atoms; scrambled Halton points per box for uniform densities."""
    if n < 1:
        raise PreconditionError("need at least one particle")
    if n == 1:
        return DiscreteMeasure(rho0.centroid()[None, :], np.ones(1))
    if rho0.kind == "samples":
        pts = rho0.points
        if n < len(pts):
            idx = np.sort(np.random.default_rng(seed).choice(len(pts), n, replace=False))
            pts = pts[idx]
        return DiscreteMeasure.uniform(pts)
    vols = np.array([b.volume for b in rho0.boxes])
    raw = n * vols / vols.sum()
    counts = np.floor(raw).astype(int)
    rest = n - counts.sum()
    counts[np.argsort(-(raw - counts), kind="stable")[:rest]] += 1
    parts = []
    for i, (bx, c) in enumerate(zip(rho0.boxes, counts)):
        if c == 0:
            continue
        u = qmc.Halton(d=bx.d, scramble=True, seed=np.random.default_rng([seed, i])).random(int(c))
        parts.append(bx.lo + u * (bx.hi - bx.lo))
    return DiscreteMeasure.uniform(np.vstack(parts))


@dataclass(frozen=True)
class Calibration:
    w1: float
    n_used: int
    w1_scaled: float
    required_n: int


def discretization_calibration(rho0: DensitySpec, n: int, seed: int, eps: float, n_cal: int = 1000) -> Calibration:
    """W1 between two independent particle sets, extrapolated to ``n`` at rate ``n^(-1/d)``."""
    m = min(n, n_cal)
    a = sample_particles(rho0, m, seed)
    b = sample_particles(rho0, m, seed + 1)
    w = wasserstein1(a, b)
    d = rho0.d
    scaled = w * (m / n) ** (1.0 / d)
    need = int(math.ceil(n * (scaled / (eps / 2)) ** d)) if scaled > 0 else 1
    return Calibration(w, m, scaled, max(need, 1))


# ---------------------------------------------------------------- certificate


@dataclass
class TransportCertificate:
    w1: float
    n: int
    eps: float
    captured_mass: list
    remainder_mass: list
    remainder_atoms: list
    strip_leakage: float
    triangle_bound: float
    w1_to_surrogate: float
    w1_surrogate_to_target: float
    switches: int
    norms: dict
    zeta: float
    hyperplanes: list
    eta: float
    nu: float
    calibration: Calibration | None = None
    flags: list = field(default_factory=list)

    def as_dict(self) -> dict:
        out = {
            "w1": self.w1,
            "n": self.n,
            "eps": self.eps,
            "captured_mass": self.captured_mass,
            "remainder_mass": self.remainder_mass,
            "remainder_atoms": self.remainder_atoms,
            "strip_leakage": self.strip_leakage,
            "triangle_bound": self.triangle_bound,
            "w1_to_surrogate": self.w1_to_surrogate,
            "w1_surrogate_to_target": self.w1_surrogate_to_target,
            "switches": self.switches,
            "norms": self.norms,
            "zeta": self.zeta,
            "hyperplanes": self.hyperplanes,
            "eta": self.eta,
            "nu": self.nu,
            "flags": self.flags,
        }
        if self.calibration is not None:
            c = self.calibration
            out["calibration"] = {"w1": c.w1, "n_used": c.n_used, "w1_scaled": c.w1_scaled, "required_n": c.required_n}
        return out


def certify(final: np.ndarray, weights: np.ndarray, target: DiscreteMeasure, eps: float, nu: float):
    """Exact W1 plus the surrogate-measure triangle bound.

    Each target keeps the largest ball mass not exceeding its weight within
    radius ``nu``; the leftover particles, sorted along x1, are split into
    consecutive groups with the remainder masses and each group is replaced by
    its centroid.
    """
    M = len(target)
    taken = np.zeros(len(final), bool)
    captured, xi = [], []
    for m in range(M):
        dist = np.linalg.norm(final - target.points[m], axis=1)
        cand = np.flatnonzero((dist <= nu) & ~taken)
        cand = cand[np.argsort(dist[cand], kind="stable")]
        cum = np.cumsum(weights[cand])
        k = int(np.searchsorted(cum, target.weights[m] * (1 + 1e-12), side="right"))
        chosen = cand[:k]
        taken[chosen] = True
        captured.append(math.fsum(weights[chosen]))
        xi.append(float(dist[chosen].max()) if k else 0.0)
    remainder = [max(0.0, float(target.weights[m]) - captured[m]) for m in range(M)]
    rest = np.flatnonzero(~taken)
    rest = rest[np.argsort(final[rest, 0], kind="stable")]
    atoms, z = [], []
    wleft = weights[rest].astype(float).copy()
    pos = 0
    for m in range(M):
        need = remainder[m]
        acc_w, acc_x = 0.0, np.zeros(final.shape[1])
        while need > 1e-15 and pos < len(rest):
            take = min(need, wleft[pos])
            acc_w += take
            acc_x += take * final[rest[pos]]
            wleft[pos] -= take
            need -= take
            if wleft[pos] <= 1e-15:
                pos += 1
        z.append((acc_x / acc_w).tolist() if acc_w > 0 else target.points[m].tolist())
    pts = np.vstack([target.points, np.array(z)])
    wts = np.concatenate([captured, remainder])
    surrogate = DiscreteMeasure.normalized(pts, wts)
    rho_T = DiscreteMeasure(final, weights)
    w_exact = wasserstein1(rho_T, target)
    w_a = wasserstein1(rho_T, surrogate)
    w_b = wasserstein1(surrogate, target)
    bound = w_a + w_b
    if w_exact > bound + 1e-9:
        raise CertificationError("exact W1 exceeds the triangle bound")
    return w_exact, captured, remainder, z, w_a, w_b, bound


# ---------------------------------------------------------------- synthesis


def _separating_offsets(supports: list[Box]) -> list[list[float]]:
    d = supports[0].d
    offs: list[list[float]] = [[] for _ in range(d)]
    for b1, b2 in itertools.combinations(supports, 2):
        if any(any(min(b1.hi[k], b2.hi[k]) < o < max(b1.lo[k], b2.lo[k]) for o in offs[k]) for k in range(d)):
            continue
        gaps = [max(b2.lo[k] - b1.hi[k], b1.lo[k] - b2.hi[k]) for k in range(d)]
        k = int(np.argmax(gaps))
        if gaps[k] <= 0:
            raise PreconditionError("density supports overlap")
        offs[k].append(0.5 * (min(b1.hi[k], b2.hi[k]) + max(b1.lo[k], b2.lo[k])))
    return offs


def _strip_mass(rhos, offsets, z: float) -> float:
    worst = 0.0
    for rho in rhos:
        for k, cs in enumerate(offsets):
            for c in cs:
                worst = max(worst, rho.slab_mass(k, c - z, c + z))
    return worst


def _choose_zeta(rhos, offsets, domain: Box, budget: float) -> float:
    gaps = []
    for k, cs in enumerate(offsets):
        e = np.concatenate([[domain.lo[k]], np.sort(cs), [domain.hi[k]]])
        if len(cs):
            gaps.append(float(np.min(np.diff(e))))
    zmax = 0.25 * min(gaps) if gaps else 0.25 * float(np.min(domain.hi - domain.lo))
    if _strip_mass(rhos, offsets, zmax) <= budget:
        return zmax
    lo, hi = 0.0, zmax
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if _strip_mass(rhos, offsets, mid) <= budget:
            lo = mid
        else:
            hi = mid
    return max(lo, ZETA_FLOOR)


def _build_cells(rhos, class_offsets, offsets, zeta, target_base, domain: Box) -> CellDecomposition:
    d = domain.d
    offs = [np.unique(np.asarray(o, float)) for o in offsets]
    edges = [np.concatenate([[domain.lo[k]], offs[k], [domain.hi[k]]]) for k in range(d)]
    lo_l, hi_l, tg = [], [], []
    for j, rho in enumerate(rhos):
        cs = np.asarray(class_offsets[j])
        for bx in rho.mass_boxes():
            for combo in itertools.product(*[range(len(e) - 1) for e in edges]):
                lo = np.array([edges[k][i] for k, i in enumerate(combo)])
                hi = np.array([edges[k][i + 1] for k, i in enumerate(combo)])
                lo = np.where(lo > domain.lo, lo + zeta, lo)
                hi = np.where(hi < domain.hi, hi - zeta, hi)
                lo, hi = np.maximum(lo, bx.lo), np.minimum(hi, bx.hi)
                if np.any(hi <= lo):
                    continue
                slab = int(np.searchsorted(cs, 0.5 * (lo[0] + hi[0])))
                lo_l.append(lo)
                hi_l.append(hi)
                tg.append(target_base[j] + slab)
    return CellDecomposition(domain, tuple(offs), zeta, np.array(lo_l), np.array(hi_l), np.array(tg, int), np.zeros((0, d)))


def _nu(points: np.ndarray) -> float:
    if len(points) < 2:
        return 1.0
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    dist[np.diag_indices(len(points))] = np.inf
    return 0.5 * float(dist.min())


def _diameter(points: np.ndarray) -> float:
    diff = points[:, None, :] - points[None, :, :]
    return float(np.sqrt(np.max(np.sum(diff * diff, axis=-1))))


def _transport(rhos, targets, eps, n, T, seed, max_retry=4):
    if not eps > 0:
        raise PreconditionError("eps must be positive")
    d = rhos[0].d
    require_dimension(d)
    if any(r.d != d for r in rhos) or any(t.d != d for t in targets):
        raise PreconditionError("densities and targets must share the dimension")
    pooled = np.vstack([t.points for t in targets])
    require_distinct(pooled, "target atoms")
    for rho, tgt in zip(rhos, targets):
        single = (rho.kind == "samples" and len(rho.points) == 1) or n == 1
        if single and len(tgt) > 1:
            raise PreconditionError("a single-atom source cannot be split between several targets")
    supports = [r.support() for r in rhos]
    domain = Box(np.min([s.lo for s in supports], axis=0), np.max([s.hi for s in supports], axis=0))
    sep = _separating_offsets(supports) if len(rhos) > 1 else [[] for _ in range(d)]
    class_offsets = [place_mass_hyperplanes(r, t.weights) for r, t in zip(rhos, targets)]
    offsets = [list(sep[k]) for k in range(d)]
    offsets[0] = offsets[0] + [c for cs in class_offsets for c in cs]
    base = np.cumsum([0] + [len(t) for t in targets[:-1]]).tolist()

    particles = [sample_particles(r, n, seed + 101 * j) for j, r in enumerate(rhos)]
    calib = [discretization_calibration(r, n, seed + 101 * j, eps) for j, r in enumerate(rhos)]
    for c in calib:
        if c.w1_scaled >= eps / 2:
            raise PreconditionError(
                f"eps={eps!r} is below twice the particle discretization error {c.w1_scaled:.3g}; "
                f"use about n={c.required_n} particles"
            )
    M_max = max(len(t) for t in targets)
    span = _diameter(np.vstack([pooled, domain.lo[None], domain.hi[None], np.zeros((1, d))]))
    budget = min(eps / M_max, eps / (4.0 * span * max(M_max - 1, 1)))
    nu = min(_nu(pooled), 1.0)
    eta = None
    last = None
    for attempt in range(max_retry + 1):
        zeta = _choose_zeta(rhos, offsets, domain, budget)
        D = _build_cells(rhos, class_offsets, offsets, zeta, base, domain)
        D = CellDecomposition(D.domain, D.offsets, D.zeta, D.cells_lo, D.cells_hi, D.cell_target, pooled)
        eta_try = min(0.5 / D.N, eps / 8.0) if eta is None else eta
        try:
            s, lem, plan, P, raw_T = synthesize_from_decomposition(D, T, eta=eta_try)
        except CertificationError as exc:
            last = exc
            budget /= 4
            eta = eta_try / 2
            continue
        certs = []
        finals = []
        for j, (pm, tgt) in enumerate(zip(particles, targets)):
            fin = flow_points(pm.points, s)
            finals.append(fin)
            leak = float(np.mean(D.in_cells(pm.points) < 0))
            w, cap, rem, z, wa, wb, bound = certify(fin, np.asarray(pm.weights), tgt, eps, nu)
            m = schedule_metrics(s)
            flags = []
            for mm in range(len(tgt)):
                if cap[mm] < tgt.weights[mm] - 2 * eps / len(tgt):
                    flags.append(f"captured mass of target {mm} below weight - 2 eps/M")
                    log.warning("captured mass %g for target %d below the expected bound", cap[mm], mm)
            certs.append(
                TransportCertificate(
                    w, len(pm), eps, cap, rem, z, leak, bound, wa, wb, m.switches,
                    {"W": m.sup_norm_W, "b": m.sup_norm_b, "A": 1.0}, zeta,
                    [float(c) for c in class_offsets[j]], P.eta, nu, calib[j], flags,
                )
            )
        if all(c.w1 < eps for c in certs):
            return s, certs, particles, finals
        last = CertificationError(f"W1 {[c.w1 for c in certs]} not below eps={eps!r}")
        budget /= 4
        eta = P.eta / 2
    raise last


def synthesize_transport(
    rho0: DensitySpec, target: DiscreteMeasure, eps: float, n: int = 10000, T: float = 1.0, seed: int = 0
) -> tuple[ControlSchedule, TransportCertificate]:
    s, certs, _, _ = _transport([rho0], [target], eps, n, T, seed)
    return s, certs[0]


@dataclass(frozen=True)
class MulticlassReport:
    certificates: list
    pooled_w1: float
    captured_fraction: list


def synthesize_multiclass_transport(
    rhos: list, targets: list, eps: float, n: int = 10000, T: float = 1.0, seed: int = 0
) -> tuple[ControlSchedule, list, MulticlassReport]:
    """One schedule transporting every density onto its own Dirac mixture."""
    if len(rhos) != len(targets) or not rhos:
        raise PreconditionError("need one target measure per density")
    s, certs, particles, finals = _transport(list(rhos), list(targets), eps, n, T, seed)
    J = len(rhos)
    pts = np.vstack(finals)
    wts = np.concatenate([np.asarray(p.weights) / J for p in particles])
    tp = np.vstack([t.points for t in targets])
    tw = np.concatenate([np.asarray(t.weights) / J for t in targets])
    pooled = wasserstein1(DiscreteMeasure.normalized(pts, wts), DiscreteMeasure.normalized(tp, tw))
    frac = [float(sum(c.captured_mass)) for c in certs]
    return s, certs, MulticlassReport(certs, pooled, frac)
