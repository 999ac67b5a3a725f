"""Approximation of simple functions by compressing cells onto targets.

Pipeline: cover the discontinuity set with grid cubes, cut the domain into
hyperrectangular cells along the cube faces, compress every cell to a small
cluster, order the clusters along x1, then deliver one representative per
target value with simultaneous control.  Cells are tracked as axis-aligned
bounding boxes, which every segment maps exactly (see ``flow.box_flow``), so
all geometric postconditions are checked on boxes rather than samples.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    Box,
    CertificationError,
    ControlSchedule,
    ElementaryControl,
    PreconditionError,
    SimpleFunction,
    concat,
    require_dimension,
    rescale,
    schedule_metrics,
)
from .flow import box_flow, flow_points
from .simcontrol import delivery_segments, prepare_targets

SAFETY = 1.1
FACE_TOL = 1e-9


# ---------------------------------------------------------------- cover


def _cube_index(v, lo: float, h: float, n: int):
    return np.clip(np.floor((np.asarray(v) - lo) / h + FACE_TOL).astype(int), 0, n - 1)


def _cubes_per_axis(domain: Box, h: float) -> np.ndarray:
    return np.maximum(1, np.ceil((domain.hi - domain.lo) / h - FACE_TOL).astype(int))


def _arrangement(f: SimpleFunction):
    """Coordinates of all box faces per axis and the region label of each elementary cell."""
    dom = f.domain
    coords = []
    for k in range(f.d):
        vals = [dom.lo[k], dom.hi[k]]
        for r in f.regions:
            for b in r.boxes:
                vals += [min(max(b.lo[k], dom.lo[k]), dom.hi[k]), min(max(b.hi[k], dom.lo[k]), dom.hi[k])]
        coords.append(np.unique(np.array(vals)))
    mids = [0.5 * (c[1:] + c[:-1]) for c in coords]
    grid = np.stack(np.meshgrid(*mids, indexing="ij"), axis=-1)
    labels = f.region_index(grid.reshape(-1, f.d)).reshape(grid.shape[:-1])
    return coords, labels


def _value_labels(f: SimpleFunction, region_labels: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Map region indices (-1 for the zero region) to indices into ``values``."""
    vals = np.vstack([f.values(), np.zeros((1, f.d))]) if len(f.regions) else np.zeros((1, f.d))
    out = np.empty(region_labels.shape, dtype=int)
    flat_r = region_labels.reshape(-1)
    flat_o = out.reshape(-1)
    for i, r in enumerate(flat_r):
        v = vals[r]
        flat_o[i] = int(np.flatnonzero(np.all(values == v, axis=1))[0])
    return out


def cover_cubes(f: SimpleFunction, h: float) -> np.ndarray:
    """Integer indices (m, d) of the grid cubes of side ``h`` meeting the region boundaries.

    Cubes are half open, ``[lo + i h, lo + (i+1) h)``, anchored at the domain
    corner.  Box regions are handled exactly through the arrangement of their
    faces; predicate regions through their boundary sampler.
    """
    if not h > 0:
        raise PreconditionError("h must be positive")
    dom, d = f.domain, f.d
    n = _cubes_per_axis(dom, h)
    found: list[np.ndarray] = []
    box_regions = all(r.predicate is None for r in f.regions)
    if box_regions:
        coords, labels = _arrangement(f)
        for k in range(d):
            for i in range(1, len(coords[k]) - 1):
                diff = np.take(labels, i - 1, axis=k) != np.take(labels, i, axis=k)
                if not np.any(diff):
                    continue
                ik = int(_cube_index(coords[k][i], dom.lo[k], h, n[k]))
                others = [j for j in range(d) if j != k]
                for J in zip(*np.nonzero(diff)):
                    ranges = []
                    for j, jj in zip(others, J):
                        a = _cube_index(coords[j][jj], dom.lo[j], h, n[j])
                        b = _cube_index(coords[j][jj + 1], dom.lo[j], h, n[j])
                        ranges.append(range(int(a), int(b) + 1))
                    for combo in itertools.product(*ranges):
                        idx = list(combo)
                        idx.insert(k, ik)
                        found.append(np.array(idx))
    else:
        for r in f.regions:
            if r.boundary_sampler is None:
                raise PreconditionError("predicate regions need a boundary sampler")
            pts = np.atleast_2d(np.asarray(r.boundary_sampler(h / 4.0), float))
            inside = np.all((pts >= dom.lo) & (pts <= dom.hi), axis=1)
            pts = pts[inside]
            if len(pts):
                idx = np.stack([_cube_index(pts[:, k], dom.lo[k], h, n[k]) for k in range(d)], axis=1)
                found.extend(np.unique(idx, axis=0))
    if not found:
        return np.zeros((0, d), dtype=int)
    return np.unique(np.array(found, dtype=int), axis=0)


def cover_count(f: SimpleFunction, h: float) -> int:
    return len(cover_cubes(f, h))


def estimate_box_dimension(f: SimpleFunction, h_list) -> float:
    """Least-squares slope of ``log N(h)`` against ``log(1/h)``; 0 without boundary."""
    hs = [float(h) for h in h_list]
    if len(hs) < 3 or any(b >= a for a, b in zip(hs, hs[1:])):
        raise PreconditionError("need at least 3 strictly decreasing h values")
    counts = np.array([cover_count(f, h) for h in hs], float)
    if np.all(counts == 0):
        return 0.0
    if np.any(counts == 0):
        raise PreconditionError("cover is empty at some but not all scales")
    slope, _ = np.polyfit(np.log(1.0 / np.array(hs)), np.log(counts), 1)
    return float(slope)


def minkowski_island(depth: int, side: float = 1.0, center=(0.0, 0.0)) -> np.ndarray:
    """Closed polyline (vertices, first repeated last) of the quadratic Koch island.

    Every edge is replaced by eight axis-aligned edges of a quarter length,
    so the boundary dimension tends to 1.5 with depth.
    """
    c = np.asarray(center, float)
    hs = side / 2
    pts = np.array([[-hs, -hs], [hs, -hs], [hs, hs], [-hs, hs], [-hs, -hs]]) + c
    for _ in range(depth):
        out = [pts[0]]
        for p, q in zip(pts[:-1], pts[1:]):
            v = (q - p) / 4
            nrm = np.array([v[1], -v[0]])
            steps = [v, nrm, v, -nrm, -nrm, v, nrm, v]
            cur = p
            for st in steps:
                cur = cur + st
                out.append(cur)
        pts = np.array(out)
        pts[-1] = pts[0]
    return pts


def polygon_contains(poly: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Even-odd point-in-polygon test, vectorized over points."""
    x = np.atleast_2d(x)
    inside = np.zeros(len(x), dtype=bool)
    px, py = x[:, 0], x[:, 1]
    for (x0, y0), (x1, y1) in zip(poly[:-1], poly[1:]):
        if y0 == y1:
            continue
        cond = (py >= min(y0, y1)) & (py < max(y0, y1))
        xs = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= cond & (px < xs)
    return inside


def polyline_sampler(poly: np.ndarray):
    """Boundary sampler returning points along ``poly`` with the requested spacing."""

    def sample(spacing: float) -> np.ndarray:
        out = []
        for p, q in zip(poly[:-1], poly[1:]):
            n = max(1, int(math.ceil(np.linalg.norm(q - p) / spacing)))
            t = np.arange(n + 1)[:, None] / n
            out.append(p + t * (q - p))
        return np.vstack(out)

    return sample


# ---------------------------------------------------------------- cells


@dataclass(frozen=True)
class CellDecomposition:
    """Hyperrectangular cells, each carrying one target value, separated by strips.

    ``offsets[k]`` are the interior hyperplane positions on axis k.  Cells are
    the grid rectangles outside the cover, shrunk by ``zeta`` on every face
    that lies on an interior hyperplane; everything else is the strip and
    cover region.
    """

    domain: Box
    offsets: tuple
    zeta: float
    cells_lo: np.ndarray
    cells_hi: np.ndarray
    cell_target: np.ndarray
    targets: np.ndarray
    h: float | None = None
    cover: np.ndarray | None = None

    @property
    def d(self) -> int:
        return self.domain.d

    @property
    def N(self) -> int:
        return len(self.cells_lo)

    @property
    def n_gamma(self) -> int:
        return 0 if self.cover is None else len(self.cover)

    @property
    def n_gamma_axis(self) -> tuple[int, ...]:
        return tuple(len(o) for o in self.offsets)

    @property
    def n_hyperplanes(self) -> int:
        return sum(self.n_gamma_axis)

    def cell_box(self, i: int) -> Box:
        return Box(self.cells_lo[i], self.cells_hi[i])

    def in_cells(self, x: np.ndarray) -> np.ndarray:
        """Index of the cell containing each point, -1 for the strip/cover region."""
        x = np.atleast_2d(x)
        out = np.full(len(x), -1, dtype=int)
        for i in range(self.N):
            m = np.all((x >= self.cells_lo[i]) & (x <= self.cells_hi[i]), axis=1)
            out[m] = i
        return out

    def omega_h_measure(self) -> float:
        return self.domain.volume - float(np.sum(np.prod(self.cells_hi - self.cells_lo, axis=1)))

    def breakpoints(self) -> list[np.ndarray]:
        """Every face coordinate per axis (cells and cover), for aligned quadrature."""
        out = []
        for k in range(self.d):
            v = [self.cells_lo[:, k], self.cells_hi[:, k], np.asarray(self.offsets[k])]
            out.append(np.unique(np.concatenate(v)))
        return out

    @classmethod
    def from_grid(cls, domain: Box, offsets, zeta: float, target_of, targets) -> "CellDecomposition":
        """Grid of cells cut by ``offsets`` with ``target_of(center) -> index``."""
        offsets = tuple(np.sort(np.asarray(o, float)) for o in offsets)
        targets = np.atleast_2d(np.asarray(targets, float))
        lo_l, hi_l, tg = [], [], []
        edges = [np.concatenate([[domain.lo[k]], offsets[k], [domain.hi[k]]]) for k in range(domain.d)]
        for combo in itertools.product(*[range(len(e) - 1) for e in edges]):
            lo = np.array([edges[k][i] for k, i in enumerate(combo)])
            hi = np.array([edges[k][i + 1] for k, i in enumerate(combo)])
            lo_s, hi_s = _shrink(lo, hi, domain, zeta)
            if np.any(hi_s <= lo_s):
                continue
            lo_l.append(lo_s)
            hi_l.append(hi_s)
            tg.append(int(target_of(0.5 * (lo + hi))))
        return cls(domain, offsets, zeta, np.array(lo_l), np.array(hi_l), np.array(tg, int), targets)


def _shrink(lo, hi, domain: Box, zeta: float):
    lo_s = np.where(np.isclose(lo, domain.lo, rtol=0, atol=1e-12), lo, lo + zeta)
    hi_s = np.where(np.isclose(hi, domain.hi, rtol=0, atol=1e-12), hi, hi - zeta)
    return lo_s, hi_s


def _coarsen(edges: list[np.ndarray], labels: np.ndarray):
    """Drop hyperplanes across which no rectangle label changes."""
    edges = [e.copy() for e in edges]
    changed = True
    while changed:
        changed = False
        for k in range(labels.ndim):
            i = 1
            while i < labels.shape[k]:
                if np.array_equal(np.take(labels, i - 1, axis=k), np.take(labels, i, axis=k)):
                    labels = np.delete(labels, i, axis=k)
                    edges[k] = np.delete(edges[k], i)
                    changed = True
                else:
                    i += 1
    return edges, labels


def build_cover(f: SimpleFunction, h: float, coarsen: bool = False, zeta: float | None = None) -> CellDecomposition:
    """Cover the region boundaries with cubes of side ``h`` and cut the domain into cells.

    Hyperplanes are all interior cube faces.  With ``coarsen`` hyperplanes
    that separate rectangles of equal label (same value, or both cover) are
    removed, which leaves the same cover but far fewer cells and strips.
    """
    require_dimension(f.d)
    dom, d = f.domain, f.d
    zeta = h**d if zeta is None else float(zeta)
    n = _cubes_per_axis(dom, h)
    cubes = cover_cubes(f, h)
    offsets = []
    for k in range(d):
        if len(cubes):
            cand = dom.lo[k] + h * np.unique(np.concatenate([cubes[:, k], cubes[:, k] + 1]))
        else:
            cand = np.zeros(0)
        tol = FACE_TOL * max(1.0, float(dom.hi[k] - dom.lo[k]))
        offsets.append(cand[(cand > dom.lo[k] + tol) & (cand < dom.hi[k] - tol)])
    edges = [np.concatenate([[dom.lo[k]], offsets[k], [dom.hi[k]]]) for k in range(d)]
    shape = tuple(len(e) - 1 for e in edges)
    cube_set = {tuple(c) for c in cubes}
    mids = np.stack(np.meshgrid(*[0.5 * (e[1:] + e[:-1]) for e in edges], indexing="ij"), axis=-1).reshape(-1, d)
    mid_idx = np.stack([_cube_index(mids[:, k], dom.lo[k], h, n[k]) for k in range(d)], axis=1)
    is_cover = np.array([tuple(r) in cube_set for r in mid_idx]).reshape(shape)

    vals = [r.value for r in f.regions] + [np.zeros(d)]
    values = np.unique(np.array(vals).reshape(-1, d), axis=0)
    rect_labels = _rect_labels(f, edges, shape, values)
    if np.any((rect_labels == -3) & ~is_cover):
        raise PreconditionError("a cell meets two regions; refine h or the boundary sampler")
    labels = np.where(is_cover, -2, rect_labels)
    if coarsen:
        edges, labels = _coarsen(edges, labels)
        offsets = [e[1:-1] for e in edges]

    lo_l, hi_l, tg = [], [], []
    for combo in itertools.product(*[range(s) for s in labels.shape]):
        lab = int(labels[combo])
        if lab == -2:
            continue
        lo = np.array([edges[k][i] for k, i in enumerate(combo)])
        hi = np.array([edges[k][i + 1] for k, i in enumerate(combo)])
        lo_s, hi_s = _shrink(lo, hi, dom, zeta)
        if np.any(hi_s <= lo_s):
            continue
        lo_l.append(lo_s)
        hi_l.append(hi_s)
        tg.append(lab)
    used = sorted(set(tg))
    remap = {m: i for i, m in enumerate(used)}
    return CellDecomposition(
        dom,
        tuple(np.asarray(o) for o in offsets),
        zeta,
        np.array(lo_l).reshape(-1, d),
        np.array(hi_l).reshape(-1, d),
        np.array([remap[m] for m in tg], int),
        values[used].reshape(-1, d),
        h=h,
        cover=cubes,
    )


def _rect_labels(f: SimpleFunction, edges, shape, values) -> np.ndarray:
    """Value index of each grid rectangle, or -3 when it meets two values."""
    d = f.d
    out = np.empty(shape, dtype=int)
    if all(r.predicate is None for r in f.regions):
        coords, reg = _arrangement(f)
        vl = _value_labels(f, reg, values)
        for combo in itertools.product(*[range(s) for s in shape]):
            sl = []
            for k, i in enumerate(combo):
                a, b = edges[k][i], edges[k][i + 1]
                c = coords[k]
                i0 = int(np.searchsorted(c, a, side="right")) - 1
                i1 = int(np.searchsorted(c, b, side="left"))
                sl.append(slice(max(i0, 0), max(i1, i0 + 1)))
            u = np.unique(vl[tuple(sl)])
            out[combo] = int(u[0]) if len(u) == 1 else -3
        return out
    vals = np.vstack([f.values(), np.zeros((1, d))])
    probe = np.array(list(itertools.product([0.1, 0.5, 0.9], repeat=d)))
    for combo in itertools.product(*[range(s) for s in shape]):
        lo = np.array([edges[k][i] for k, i in enumerate(combo)])
        hi = np.array([edges[k][i + 1] for k, i in enumerate(combo)])
        ri = f.region_index(lo + probe * (hi - lo))
        u = np.unique(vals[ri], axis=0)
        out[combo] = int(np.flatnonzero(np.all(values == u[0], axis=1))[0]) if len(u) == 1 else -3
    return out


# ---------------------------------------------------------------- parameters


@dataclass(frozen=True)
class ApproxParams:
    """Step parameters of the compression lemma and their constraints."""

    eta: float
    delta: float
    zeta: float
    N: int
    n_gamma: int
    d: int
    eps: float | None = None
    h: float | None = None
    nu: float | None = None
    c_const: float = 0.125

    @classmethod
    def derive(
        cls, D: CellDecomposition, eps: float | None = None, eta: float | None = None, c_const: float = 0.125
    ) -> "ApproxParams":
        N = max(D.N, 1)
        if eta is None:
            eta = 0.5 / N
            if eps is not None:
                eta = min(eta, eps / 8.0)
        zeta, d = D.zeta, D.d
        n_gamma = max(D.n_gamma, D.n_hyperplanes, 1)
        delta = min(zeta / (8.0 * N), c_const * zeta / n_gamma, eta / math.sqrt((d - 1) + (1 + 8 / zeta) ** 2))
        delta *= 1 - 1e-6
        nu = eps ** (1 + d * (d - 1)) if eps is not None else None
        p = cls(eta, delta, zeta, N, n_gamma, d, eps, D.h, nu, c_const)
        p.check()
        return p

    def check(self) -> None:
        if not 0 < self.eta < 1.0 / self.N:
            raise PreconditionError(f"need 0 < eta < 1/N = {1.0 / self.N!r}, got {self.eta!r}")
        if not 0 < self.delta < self.zeta / (8 * self.N):
            raise PreconditionError("need delta < zeta/(8N)")
        if self.delta > self.c_const * self.zeta / self.n_gamma:
            raise PreconditionError("need delta <= C zeta / N_gamma")
        if self.delta**2 > self.eta**2 / ((self.d - 1) + (1 + 8 / self.zeta) ** 2):
            raise PreconditionError("delta too large for the final diameter bound")

    def as_dict(self) -> dict:
        return {
            "eps": self.eps,
            "h": self.h,
            "zeta": self.zeta,
            "delta": self.delta,
            "eta": self.eta,
            "nu": self.nu,
            "N": self.N,
            "N_gamma": self.n_gamma,
        }


# ---------------------------------------------------------------- box planner


def _unit(d: int, i: int, sign: float = 1.0) -> np.ndarray:
    e = np.zeros(d)
    e[i] = sign
    return e


class _BoxPlan:
    """Emits segments while pushing every tracked box through them."""

    def __init__(self, lo: np.ndarray, hi: np.ndarray):
        self.lo = np.array(lo, float, copy=True)
        self.hi = np.array(hi, float, copy=True)
        self.d = self.lo.shape[1]
        self.segs: list[ElementaryControl] = []
        self.k_path = self.radius()
        self.band_min = math.inf

    def radius(self) -> float:
        corner = np.maximum(np.abs(self.lo), np.abs(self.hi))
        return float(np.max(np.linalg.norm(corner, axis=1))) if len(corner) else 0.0

    def apply(self, seg: ElementaryControl) -> None:
        if seg.duration <= 0:
            return
        self.lo, self.hi = box_flow(self.lo, self.hi, seg, check=True)
        self.segs.append(seg)
        self.k_path = max(self.k_path, self.radius())

    def contract(self, axis: int, c: float, from_side: int, band: float, mask=None) -> None:
        """Contract boxes on one side of ``x[axis] = c`` to within ``band`` of it."""
        sel = np.ones(len(self.lo), bool) if mask is None else mask
        if from_side < 0:
            act = sel & (self.hi[:, axis] < c)
            if not np.any(act):
                return
            D = float(np.max(c - self.lo[act, axis]))
            seg_sign, w = -1, _unit(self.d, axis)
        else:
            act = sel & (self.lo[:, axis] > c)
            if not np.any(act):
                return
            D = float(np.max(self.hi[act, axis] - c))
            seg_sign, w = 1, _unit(self.d, axis, -1.0)
        if D <= band:
            return
        self.apply(ElementaryControl(axis, seg_sign, c, w, SAFETY * math.log(D / band)))

    def schedule(self) -> ControlSchedule:
        return ControlSchedule(self.d, tuple(self.segs))


def _units_by_x(plan: _BoxPlan, cell_target: np.ndarray, axis: int, min_gap: float, descending: bool):
    """Group boxes into units along ``axis``; same-target boxes closer than ``min_gap`` merge."""
    order = np.argsort(-plan.hi[:, axis] if descending else plan.lo[:, axis], kind="stable")
    units: list[list[int]] = []
    for i in order:
        if units:
            U = units[-1]
            if descending:
                gap = float(plan.lo[U, axis].min() - plan.hi[i, axis])
            else:
                gap = float(plan.lo[i, axis] - plan.hi[U, axis].max())
            if gap <= min_gap:
                if cell_target[U[0]] != cell_target[i]:
                    raise CertificationError("cells with different targets are not separated")
                U.append(int(i))
                continue
        units.append([int(i)])
    return units


# ---------------------------------------------------------------- lemma


@dataclass
class LemmaResult:
    stage1: ControlSchedule
    stage2: ControlSchedule
    lo: np.ndarray
    hi: np.ndarray
    lo_stage1: np.ndarray
    hi_stage1: np.ndarray
    measured_C: float
    measured_K_final: float
    measured_K_path: float
    diam_after_stage1: float
    diam_k: tuple[float, ...]
    first_gap: float
    c_away: float
    K_bound: float
    info: dict = field(default_factory=dict)


def _away_point(targets: np.ndarray) -> float:
    pts = np.vstack([np.zeros((1, targets.shape[1])), targets])
    diff = pts[:, None, :] - pts[None, :, :]
    return float(np.sqrt(np.max(np.sum(diff * diff, axis=-1)))) + 1.0


def _compress_stage(plan: _BoxPlan, D: CellDecomposition, P: ApproxParams, targets: np.ndarray, cell_target):
    d, zeta, delta = D.d, D.zeta, P.delta
    top = d - 1
    for k in range(d - 1):
        a = np.asarray(D.offsets[k], float)
        for c in a:
            moving = plan.hi[:, k] < c
            frozen = plan.lo[:, k] > c
            need = 0.0
            if np.any(moving) and np.any(frozen):
                need = float(plan.hi[moving, top].max() - plan.lo[frozen, top].min()) + zeta
            # the push below stretches each box along x^d by about band * need / (zeta/4)
            band = min(delta, zeta**2 / (64.0 * max(need, 1.0)))
            plan.band_min = min(plan.band_min, band)
            # boxes already compressed onto the previous hyperplane join this contraction
            plan.contract(k, c, -1, band)
            c2 = c + zeta / 4
            if need > 0:
                u_min = float(np.min(c2 - plan.hi[moving, k]))
                plan.apply(ElementaryControl(k, -1, c2, _unit(d, top, -1.0), SAFETY * need / u_min))
        c_last = float(a[-1]) if len(a) else float(plan.lo[:, k].min()) - zeta
        plan.contract(k, c_last, +1, delta)

    # move away from every target along x1
    c_away = _away_point(targets)
    if plan.lo[:, 0].min() > c_away:
        plan.contract(0, c_away, +1, delta)
    else:
        if plan.hi[:, 0].max() >= c_away:
            c_away = float(plan.hi[:, 0].max()) + 1.0
        plan.contract(0, c_away, -1, delta)

    # compress the last coordinate unit by unit, shifting each finished stack along x1
    units = _units_by_x(plan, cell_target, top, 0.75 * zeta, descending=True)
    U = len(units)
    shift = 2.0 / U
    for l in range(U):
        below = units[l + 1] if l + 1 < U else None
        lo_l = float(plan.lo[units[l], top].min())
        if below is not None:
            C = 0.5 * (lo_l + float(plan.hi[below, top].max()))
        else:
            C = lo_l - zeta / 2
        plan.contract(top, C, +1, delta)
        c2 = C - zeta / 4
        above = plan.lo[:, top] > c2
        u_min = float(np.min(plan.lo[above, top] - c2))
        plan.apply(ElementaryControl(top, 1, c2, _unit(d, 0), shift / u_min))
    return c_away, units


def _recentre(plan: _BoxPlan, band: float) -> None:
    """Bring axes 2..d into ``(-band, 0)`` from below."""
    for j in range(1, plan.d):
        if plan.hi[:, j].max() >= 0:
            low = min(float(plan.lo[:, j].min()), 0.0) - 1.0
            plan.contract(j, low, +1, 0.5)
        plan.contract(j, 0.0, -1, band)


def _ordering_stage(plan: _BoxPlan, units, cell_target, targets: np.ndarray, eta: float) -> None:
    d = plan.d
    down = _unit(d, 1, -1.0)
    centres = [0.5 * (plan.lo[U, 0].min() + plan.hi[U, 0].max()) for U in units]
    for ui in np.argsort(centres, kind="stable"):
        U = units[ui]
        m = int(cell_target[U[0]])
        d1 = 0.5 * (float(plan.lo[U, 0].min()) + float(plan.hi[U, 0].max()))
        d2 = 0.5 * (float(plan.lo[U, 1].min()) + float(plan.hi[U, 1].max()))
        c1 = d1 + eta
        right = plan.lo[:, 0] > c1
        lift = right & (plan.hi[:, 1] > -1.0)
        if np.any(lift):
            t = SAFETY * float(np.max((plan.hi[lift, 1] + 1.0) / (plan.lo[lift, 0] - c1)))
            plan.apply(ElementaryControl(0, 1, c1, down, t))
        c2 = d1 - eta
        left = plan.hi[:, 0] < c2
        lift = left & (plan.hi[:, 1] > -1.0)
        if np.any(lift):
            t = SAFETY * float(np.max((plan.hi[lift, 1] + 1.0) / (c2 - plan.hi[lift, 0])))
            plan.apply(ElementaryControl(0, -1, c2, down, t))
        delta = float(targets[m, 0] - d1)
        if delta != 0.0:
            plan.apply(ElementaryControl(1, 1, -1.0, _unit(d, 0, math.copysign(1.0, delta)), abs(delta) / (d2 + 1.0)))
        plan.contract(1, 0.0, -1, eta / 8)


def _measure(plan: _BoxPlan, units, cell_target, targets, eta):
    C = 0.0
    for U in units:
        m = int(cell_target[U[0]])
        dev = max(abs(float(plan.lo[U, 0].min()) - targets[m, 0]), abs(float(plan.hi[U, 0].max()) - targets[m, 0]))
        C = max(C, dev / eta)
    diam_k = tuple(float(plan.hi[:, k].max() - plan.lo[:, k].min()) for k in range(1, plan.d))
    return C, diam_k


def run_lemma(D: CellDecomposition, P: ApproxParams, targets=None) -> LemmaResult:
    """Compression (stage 1) and ordering (stage 2) with every postcondition measured."""
    targets = D.targets if targets is None else np.atleast_2d(np.asarray(targets, float))
    if len(np.unique(targets[:, 0])) != len(targets):
        raise PreconditionError("targets need pairwise distinct first coordinates (prepare them first)")
    if D.N == 0:
        raise PreconditionError("decomposition has no cells")
    P.check()
    plan = _BoxPlan(D.cells_lo, D.cells_hi)
    c_away, units = _compress_stage(plan, D, P, targets, D.cell_target)
    _recentre(plan, P.eta / 8)
    stage1 = plan.schedule()
    n1 = len(plan.segs)
    lo1, hi1 = plan.lo.copy(), plan.hi.copy()
    diam1 = max(float(np.linalg.norm(plan.hi[U].max(axis=0) - plan.lo[U].min(axis=0))) for U in units)
    firsts = sorted((float(plan.lo[U, 0].min()), float(plan.hi[U, 0].max())) for U in units)
    gap = min((b[0] - a[1] for a, b in zip(firsts, firsts[1:])), default=math.inf)
    _ordering_stage(plan, units, D.cell_target, targets, P.eta)
    stage2 = ControlSchedule(D.d, tuple(plan.segs[n1:]))
    C, diam_k = _measure(plan, units, D.cell_target, targets, P.eta)
    pts = np.vstack([D.domain.lo, D.domain.hi, targets, np.zeros((1, D.d))])
    K_bound = 2.0 * float(np.sqrt(np.max(np.sum((pts[:, None] - pts[None]) ** 2, axis=-1))))
    return LemmaResult(
        stage1,
        stage2,
        plan.lo,
        plan.hi,
        lo1,
        hi1,
        C,
        plan.radius(),
        plan.k_path,
        diam1,
        diam_k,
        gap,
        c_away,
        K_bound,
        {"units": len(units), "stage1_segments": n1, "min_band": plan.band_min},
    )


def compression_schedule(D: CellDecomposition, P: ApproxParams, targets=None) -> ControlSchedule:
    """Stage 1: cells compressed to sets of diameter below eta, spread along x1."""
    return run_lemma(D, P, targets).stage1


def ordering_grouping_schedule(cell_images, targets, eta: float) -> ControlSchedule:
    """Stage 2 on given cell images: each ``(Box, target_index)`` joins its target's x1.

    Images must be separated along x1 by more than ``2 eta`` and no image
    may contain the first coordinate of another image's target.
    """
    targets = np.atleast_2d(np.asarray(targets, float))
    lo = np.array([b.lo for b, _ in cell_images], float)
    hi = np.array([b.hi for b, _ in cell_images], float)
    tg = np.array([m for _, m in cell_images], int)
    inside = (lo[:, 0][:, None] <= targets[None, :, 0]) & (targets[None, :, 0] <= hi[:, 0][:, None])
    inside[np.arange(len(tg)), tg] = False
    if np.any(inside):
        raise PreconditionError("a cell image contains the first coordinate of another target")
    plan = _BoxPlan(lo, hi)
    units = [[i] for i in range(len(lo))]
    _recentre(plan, eta / 8)
    _ordering_stage(plan, units, tg, targets, eta)
    return plan.schedule()


# ---------------------------------------------------------------- full pipeline


@dataclass
class ApproxResult:
    schedule: ControlSchedule
    decomposition: CellDecomposition
    params: ApproxParams
    lemma: LemmaResult
    l2: "L2Report | None"
    raw_time: float
    cluster_radius: float
    certificate: dict

    def as_dict(self) -> dict:
        return self.certificate


def deliver_clusters(plan: _BoxPlan, cell_target, goal: np.ndarray) -> list[ElementaryControl]:
    """Simultaneous control on one representative (box centre) per target cluster."""
    present = sorted(set(int(m) for m in cell_target))
    reps = []
    for m in present:
        sel = cell_target == m
        reps.append(0.5 * (plan.lo[sel].min(axis=0) + plan.hi[sel].max(axis=0)))
    segs, _ = delivery_segments(np.array(reps), goal[present], adjust=True)
    for seg in segs:
        plan.apply(seg)
    return segs


def synthesize_from_decomposition(
    D: CellDecomposition, T: float = 1.0, eps: float | None = None, eta: float | None = None, c_const: float = 0.125
):
    """Lemma stages plus delivery for a given decomposition; returns ``(schedule, lemma, plan, params, raw_time)``."""
    suffix, Tp = prepare_targets(D.targets)
    P = ApproxParams.derive(D, eps=eps, eta=eta, c_const=c_const)
    lem = run_lemma(D, P, Tp)
    plan = _BoxPlan(lem.lo, lem.hi)
    deliver_clusters(plan, D.cell_target, Tp)
    for seg in suffix.segments:
        plan.apply(seg)
    body = concat(concat(lem.stage1, lem.stage2), plan.schedule())
    raw_T = body.total_time
    s = rescale(body, T) if len(body) else body
    return s, lem, plan, P, raw_T


def _aligned_h(domain: Box, h0: float) -> float:
    w = float(np.min(domain.hi - domain.lo))
    return w / math.ceil(w / h0 - FACE_TOL)


def approximate(
    f: SimpleFunction,
    eps: float,
    T: float = 1.0,
    h: float | None = None,
    coarsen: bool = True,
    grid_step: float | None = None,
    max_refine: int = 4,
    c_const: float = 0.125,
) -> ApproxResult:
    """Synthesize and certify; refines ``h`` until the quadrature error is below ``eps``."""
    if not eps > 0:
        raise PreconditionError("eps must be positive")
    require_dimension(f.d)
    h = _aligned_h(f.domain, eps**2 if h is None else h)
    last_err = None
    for attempt in range(max_refine + 1):
        try:
            D = build_cover(f, h, coarsen=coarsen)
            s, lem, plan, P, raw_T = synthesize_from_decomposition(D, T, eps=eps, c_const=c_const)
        except CertificationError as exc:
            last_err = exc
            h /= 2
            continue
        step = grid_step if grid_step is not None else min(h / 4, 0.01 * float(np.linalg.norm(f.domain.hi - f.domain.lo)))
        rep = l2_error(f, s, step, decomposition=D)
        radius = float(np.max(np.linalg.norm(np.maximum(np.abs(plan.lo - D.targets[D.cell_target]),
                                                         np.abs(plan.hi - D.targets[D.cell_target])), axis=1)))
        m = schedule_metrics(s)
        cert = {
            "l2_error": rep.value,
            "l2_cells": rep.cells,
            "l2_omega_h": rep.omega_h,
            "omega_h_measure": D.omega_h_measure(),
            "eps": eps,
            "h": h,
            "zeta": D.zeta,
            "delta": P.delta,
            "eta": P.eta,
            "nu": P.nu,
            "N": D.N,
            "N_gamma": D.n_gamma,
            "switches": m.switches,
            "norms": {"W": m.sup_norm_W, "b": m.sup_norm_b, "A": 1.0},
            "measured_C": lem.measured_C,
            "measured_K": lem.measured_K_path,
            "measured_K_final": plan.radius(),
            "K_bound": lem.K_bound,
            "cluster_radius": radius,
            "raw_time": raw_T,
            "grid_step": step,
            "refinements": attempt,
        }
        result = ApproxResult(s, D, P, lem, rep, raw_T, radius, cert)
        if rep.value < eps:
            return result
        last_err = CertificationError(f"L2 error {rep.value!r} not below eps={eps!r} at h={h!r}")
        h /= 2
    raise last_err if last_err is not None else CertificationError("approximation failed")


def synthesize_approximator(f: SimpleFunction, eps: float, T: float = 1.0, **kw) -> ControlSchedule:
    return approximate(f, eps, T, **kw).schedule


# ---------------------------------------------------------------- quadrature


@dataclass(frozen=True)
class L2Report:
    value: float
    cells: float
    omega_h: float
    n_points: int
    grid_step: float

    def __float__(self) -> float:
        return self.value


def _axis_nodes(lo: float, hi: float, step: float, extra=None) -> np.ndarray:
    n = max(1, int(math.ceil((hi - lo) / step - FACE_TOL)))
    nodes = lo + (hi - lo) * np.arange(n + 1) / n
    if extra is not None and len(extra):
        e = np.asarray(extra, float)
        nodes = np.unique(np.concatenate([nodes, e[(e > lo) & (e < hi)]]))
    return nodes


def l2_error(
    f: SimpleFunction, s: ControlSchedule, grid_step: float, decomposition: CellDecomposition | None = None
) -> L2Report:
    """Midpoint-rule L2 distance between the flow map and ``f`` over the domain.

    The tensor grid has spacing at most ``grid_step``; with a decomposition
    its nodes also include every cell face, so thin strips get their own
    quadrature cells.  The strip and cover share is reported separately.
    """
    if not grid_step > 0:
        raise PreconditionError("grid_step must be positive")
    dom = f.domain
    extra = decomposition.breakpoints() if decomposition is not None else [None] * f.d
    nodes = [_axis_nodes(dom.lo[k], dom.hi[k], grid_step, extra[k]) for k in range(f.d)]
    mids = [0.5 * (n[1:] + n[:-1]) for n in nodes]
    widths = [np.diff(n) for n in nodes]
    X = np.stack(np.meshgrid(*mids, indexing="ij"), axis=-1).reshape(-1, f.d)
    vol = np.prod(np.stack(np.meshgrid(*widths, indexing="ij"), axis=-1).reshape(-1, f.d), axis=1)
    Y = flow_points(X, s) if len(s) else X
    err = np.sum((Y - f(X)) ** 2, axis=1) * vol
    total = float(np.sum(err))
    if decomposition is not None:
        mask = decomposition.in_cells(X) < 0
        omega = float(np.sum(err[mask]))
    else:
        omega = 0.0
    return L2Report(math.sqrt(total), math.sqrt(max(total - omega, 0.0)), math.sqrt(omega), len(X), grid_step)
