"""Strip classification of labeled points.

Three stages: separate first coordinates, move each misplaced point into its
strip with at most three segments, rescale to the requested horizon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    CertificationError,
    ControlSchedule,
    ElementaryControl,
    LabeledEnsemble,
    PreconditionError,
    StripPartition,
    as_points,
    require_dimension,
    require_distinct,
    rescale,
    schedule_metrics,
)
from .flow import elementary_flow, flow_points

PREP_TAU_CAP = 0.2
MIN_MARGIN = 1e-9
CRITERION_SAFETY = 1.1
BOUNDARY_TOL = 1e-9


def _unit(d: int, i: int, sign: float = 1.0) -> np.ndarray:
    e = np.zeros(d)
    e[i] = sign
    return e


def _margin(gap: float) -> float:
    return max(0.5 * gap, MIN_MARGIN) if gap > 2 * MIN_MARGIN else 0.5 * gap


def _first_shared_pair(x1: np.ndarray) -> tuple[int, int] | None:
    groups: dict[float, list[int]] = {}
    for i, v in enumerate(x1):
        groups.setdefault(float(v), []).append(i)
    shared = [g for g in groups.values() if len(g) > 1]
    if not shared:
        return None
    g = min(shared, key=lambda grp: grp[0])
    return g[0], g[1]


def _coincident_pairs(x1: np.ndarray) -> int:
    _, counts = np.unique(x1, return_counts=True)
    return int(np.sum(counts * (counts - 1) // 2))


def _min_gap(x1: np.ndarray) -> float:
    gaps = np.diff(np.unique(x1))
    return float(gaps.min()) if len(gaps) else math.inf


def _preparation_step(x1: np.ndarray, u: np.ndarray, h_max: float) -> float:
    """Step length for one preparation segment.

    ``min(0.2, g/(4 h))`` never creates a coincidence but shrinks
    geometrically from one segment to the next.  Longer candidate steps are
    tried as well and the one leaving the widest smallest gap wins, provided
    it reduces the number of coincident pairs.
    """
    safe = min(PREP_TAU_CAP, _min_gap(x1) / (4.0 * h_max))
    before = _coincident_pairs(x1)
    moving = u > 0
    best, best_gap = safe, -1.0
    for tau in [safe] + [PREP_TAU_CAP * 0.8**j for j in range(24)]:
        if tau < safe:
            continue
        x = x1.copy()
        x[moving] = x1[moving] + u[moving] * tau
        if _coincident_pairs(x) >= before:
            continue
        gap = _min_gap(x)
        if gap > best_gap:
            best, best_gap = tau, gap
    return best


def preparation_segments(points: np.ndarray) -> tuple[list[ElementaryControl], np.ndarray]:
    """Segments making all first coordinates distinct, and the resulting states.

    Each segment translates along +e1 on the side ``x[k] > r`` of a pair that
    shares its first coordinate, with ``r`` the mean of the first differing
    coordinate ``k >= 2``.  Step lengths come from ``_preparation_step``.
    """
    Y = np.array(points, float, copy=True)
    n, d = Y.shape
    segs: list[ElementaryControl] = []
    for _ in range(n):
        pair = _first_shared_pair(Y[:, 0])
        if pair is None:
            return segs, Y
        i, j = pair
        diff = np.flatnonzero(Y[i, 1:] != Y[j, 1:])
        k = int(diff[0]) + 1
        r = 0.5 * (Y[i, k] + Y[j, k])
        u = Y[:, k] - r
        h_max = float(np.max(u[u > 0]))
        tau = _preparation_step(Y[:, 0], u, h_max)
        seg = ElementaryControl(k, 1, r, _unit(d, 0), tau)
        Y = elementary_flow(Y, seg)
        segs.append(seg)
    if _first_shared_pair(Y[:, 0]) is not None:
        raise CertificationError("preparation failed to separate first coordinates")
    return segs, Y


def prepare_dataset(E: LabeledEnsemble | np.ndarray) -> ControlSchedule:
    pts = E.points if isinstance(E, LabeledEnsemble) else as_points(E)
    require_dimension(pts.shape[1])
    require_distinct(pts)
    segs, _ = preparation_segments(pts)
    return ControlSchedule(pts.shape[1], tuple(segs))


def _criterion_time(excess: np.ndarray, u: np.ndarray) -> float:
    """Time for a unit downward drift of rate ``u`` to remove ``excess`` strictly."""
    t_star = float(np.max(excess / u))
    return max(CRITERION_SAFETY * t_star, t_star + 1e-3)


def lift_segments(Y: np.ndarray, i: int, margin: float = 0.1) -> list[ElementaryControl]:
    """Raise point ``i`` above every other point in x2, leaving the others in place.

    Three translations along e2 gated on x1 add up to a hat-shaped function of
    x1 that equals the lift at ``x1 = Y[i, 0]`` and vanishes outside the open
    interval between the neighbouring first coordinates.  A one-sided ramp
    suffices when ``i`` is extreme in x1.
    """
    n, d = Y.shape
    others = np.arange(n) != i
    if not np.any(others):
        return []
    p = Y[i]
    H = float(Y[others, 1].max() - p[1])
    if H < 0:
        return []
    H += margin
    left = others & (Y[:, 0] < p[0])
    right = others & (Y[:, 0] > p[0])
    up, down = _unit(d, 1), _unit(d, 1, -1.0)
    if not np.any(right):
        a = float(Y[left, 0].max())
        return [ElementaryControl(0, 1, a, up, H / (p[0] - a))]
    b = float(Y[right, 0].min())
    if not np.any(left):
        return [ElementaryControl(0, -1, b, up, H / (b - p[0]))]
    a = float(Y[left, 0].max())
    sl, sr = H / (p[0] - a), H / (b - p[0])
    return [
        ElementaryControl(0, 1, a, up, sl),
        ElementaryControl(0, 1, float(p[0]), down, sl + sr),
        ElementaryControl(0, 1, b, up, sr),
    ]


def move_first_coordinate(
    Y: np.ndarray, i: int, z: float, strategy: str = "lower"
) -> tuple[list[ElementaryControl], np.ndarray]:
    """Move point ``i`` to first coordinate ``z`` leaving every other first coordinate fixed.

    Requires pairwise distinct first coordinates.  With ``strategy="lower"``
    at most three segments: lower the points to the right of ``i`` below it in
    x2, the same on its left, then translate ``i`` alone along e1.  The
    lowering scales with the distance to the gating hyperplane, so repeated
    use can grow x2 geometrically.  ``strategy="lift"`` instead raises ``i``
    with ``lift_segments`` (at most four segments in total) and keeps the
    others fixed.
    """
    Y = np.array(Y, float, copy=True)
    n, d = Y.shape
    p = Y[i].copy()
    others = np.arange(n) != i
    segs: list[ElementaryControl] = []
    down = _unit(d, 1, -1.0)
    if strategy == "lift":
        for seg in lift_segments(Y, i):
            Y = elementary_flow(Y, seg)
            segs.append(seg)
        p = Y[i].copy()
    elif strategy != "lower":
        raise PreconditionError(f"unknown strategy {strategy!r}")

    right = others & (Y[:, 0] > p[0])
    if np.any(right):
        c = p[0] + _margin(float(Y[right, 0].min() - p[0]))
        u = Y[:, 0] - c
        viol = (u > 0) & (Y[:, 1] >= p[1])
        if np.any(viol):
            seg = ElementaryControl(0, 1, c, down, _criterion_time(Y[viol, 1] - p[1], u[viol]))
            Y = elementary_flow(Y, seg)
            segs.append(seg)

    left = others & (Y[:, 0] < p[0])
    if np.any(left):
        c = p[0] - _margin(float(p[0] - Y[left, 0].max()))
        u = c - Y[:, 0]
        viol = (u > 0) & (Y[:, 1] >= p[1])
        if np.any(viol):
            seg = ElementaryControl(0, -1, c, down, _criterion_time(Y[viol, 1] - p[1], u[viol]))
            Y = elementary_flow(Y, seg)
            segs.append(seg)

    if np.any(others & (Y[:, 1] >= p[1])):
        raise CertificationError("lowering step left a point above the moving point")
    delta = z - p[0]
    if delta != 0.0:
        gap = float(p[1] - Y[others, 1].max()) if np.any(others) else 1.0
        r2 = _margin(gap)
        seg = ElementaryControl(1, 1, p[1] - r2, _unit(d, 0, math.copysign(1.0, delta)), abs(delta) / r2)
        Y = elementary_flow(Y, seg)
        segs.append(seg)
    return segs, Y


def fresh_coordinate(lo: float, hi: float, occupied: np.ndarray) -> float:
    """A value in ``(lo, hi]`` near the midpoint that avoids every occupied value."""
    z0 = 0.5 * (lo + hi)
    width = hi - lo
    tol = 1e-9 * max(1.0, abs(z0))
    for j in range(2001):
        step = (j + 1) // 2 * (1 if j % 2 else -1)
        z = z0 + 0.49 * width * step / 1000.0
        if not (lo < z <= hi):
            continue
        if occupied.size == 0 or np.min(np.abs(occupied - z)) > tol:
            return float(z)
    raise CertificationError("no free first coordinate inside the target strip")


@dataclass(frozen=True)
class PointRecord:
    initial: np.ndarray
    final: np.ndarray
    label: int
    assigned_strip: int
    correct: bool


@dataclass(frozen=True)
class ClassificationReport:
    points: tuple[PointRecord, ...]
    accuracy: float
    switches: int
    sup_norm_W: float
    sup_norm_b: float
    total_time: float

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "switches": self.switches,
            "sup_norm_W": self.sup_norm_W,
            "sup_norm_b": self.sup_norm_b,
            "total_time": self.total_time,
            "points": [
                {
                    "initial": [float(v) for v in r.initial],
                    "final": [float(v) for v in r.final],
                    "label": r.label,
                    "assigned_strip": r.assigned_strip,
                    "correct": r.correct,
                }
                for r in self.points
            ],
        }


def _check_labels(E: LabeledEnsemble, P: StripPartition) -> None:
    if E.labels is None:
        raise PreconditionError("classification needs labels")
    if np.any(E.labels < 1) or np.any(E.labels > P.count):
        raise PreconditionError(f"labels must lie in 1..{P.count}")


def _classifier_segments(E: LabeledEnsemble, P: StripPartition, strategy: str) -> list[ElementaryControl]:
    prep, Y = preparation_segments(E.points)
    segs = list(prep)
    if P.count == 1:
        return segs
    th = P.thresholds
    window = (th[0] - 1.0, th[-1] + 1.0)
    for i in range(len(Y)):
        label = int(E.labels[i])
        if P.contains(label, Y[i, 0]):
            continue
        lo, hi = P.bounds(label)
        lo, hi = max(lo, window[0]), min(hi, window[1])
        z = fresh_coordinate(lo, hi, np.delete(Y[:, 0], i))
        moves, Y = move_first_coordinate(Y, i, z, strategy)
        segs.extend(moves)
    return segs


def synthesize_classifier(E: LabeledEnsemble, P: StripPartition, T: float = 1.0) -> ControlSchedule:
    """Schedule sending every point into the strip of its label.

    Lifting moves are tried first since they keep coordinates small; if they
    need more than 4N segments the lowering moves (at most 3 per point) are
    used.
    """
    require_dimension(E.d)
    require_distinct(E.points)
    _check_labels(E, P)
    segs = _classifier_segments(E, P, "lift")
    if len(segs) > 4 * len(E):
        segs = _classifier_segments(E, P, "lower")
    s = ControlSchedule(E.d, tuple(segs))
    return rescale(s, T) if len(s) else s


def verify_classification(E: LabeledEnsemble, P: StripPartition, s: ControlSchedule) -> ClassificationReport:
    _check_labels(E, P)
    final = flow_points(E.points, s)
    records = []
    for x0, x1, lab in zip(E.points, final, E.labels):
        strip = int(P.strip_of(x1[0]))
        ok = P.contains(int(lab), float(x1[0]), BOUNDARY_TOL)
        records.append(PointRecord(x0.copy(), x1.copy(), int(lab), strip, bool(ok)))
    m = schedule_metrics(s)
    acc = sum(r.correct for r in records) / len(records) if records else 1.0
    return ClassificationReport(tuple(records), acc, m.switches, m.sup_norm_W, m.sup_norm_b, m.total_time)


__all__ = [
    "prepare_dataset",
    "synthesize_classifier",
    "verify_classification",
    "ClassificationReport",
    "move_first_coordinate",
    "preparation_segments",
]
