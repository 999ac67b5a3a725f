"""Domain types and schedule algebra.

A control segment is the rank-one field ``w * sigma(s * (x[k] - c))`` held
constant for a duration ``tau``.  A schedule is an ordered tuple of segments.
Axes are 0-based in Python and 1-based in the JSON document.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np


class NodeCtrlError(Exception):
    """Base class for library errors."""


class PreconditionError(NodeCtrlError, ValueError):
    """Inputs violate a synthesis precondition."""


class CertificationError(NodeCtrlError):
    """A synthesized object failed its a posteriori check."""


class SchemaError(NodeCtrlError, ValueError):
    """A document does not match its expected structure."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def as_points(points, d: int | None = None) -> np.ndarray:
    """Return ``points`` as a finite float array of shape (n, d)."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] < 1:
        raise PreconditionError(f"expected an (n, d) point array, got shape {arr.shape}")
    if d is not None and arr.shape[1] != d:
        raise PreconditionError(f"dimension mismatch: points have d={arr.shape[1]}, expected {d}")
    if not np.all(np.isfinite(arr)):
        raise PreconditionError("points must have finite coordinates")
    return arr


def require_distinct(points: np.ndarray, what: str = "points") -> None:
    """Raise if two rows of ``points`` coincide exactly."""
    if len(points) < 2:
        return
    uniq = np.unique(points, axis=0)
    if len(uniq) != len(points):
        raise PreconditionError(f"{what} must be pairwise distinct")


def require_dimension(d: int) -> None:
    if d < 2:
        raise PreconditionError(
            "dimension d=1 is unsupported: a scalar flow preserves the order of points, "
            "so synthesis needs d >= 2"
        )


@dataclass(frozen=True)
class Activation:
    """Custom activation: zero on (-inf, 0], positive on (0, inf), Lipschitz."""

    func: Callable[[np.ndarray], np.ndarray]
    lipschitz: float
    name: str = "custom"

    def __call__(self, z):
        return self.func(z)


def relu(z):
    return np.maximum(z, 0.0)


@dataclass(frozen=True)
class ElementaryControl:
    """One constant-control segment.

    Fields
    ------
    axis : int
        0-based coordinate index of the hyperplane normal.
    sign : int
        +1 activates the side ``x[axis] > offset``, -1 the side ``x[axis] < offset``.
    offset : float
        Hyperplane position.
    motion : ndarray
        Vector ``w`` of length d.
    duration : float
        Segment length ``tau > 0``.
    activation : Activation or None
        None means ReLU.
    """

    axis: int
    sign: int
    offset: float
    motion: np.ndarray
    duration: float
    activation: Activation | None = None

    def __post_init__(self):
        w = _frozen(self.motion)
        if w.ndim != 1:
            raise PreconditionError("motion must be a vector")
        object.__setattr__(self, "motion", w)
        object.__setattr__(self, "offset", float(self.offset))
        object.__setattr__(self, "duration", float(self.duration))
        if self.sign not in (1, -1):
            raise PreconditionError("sign must be +1 or -1")
        if not 0 <= self.axis < w.shape[0]:
            raise PreconditionError(f"axis {self.axis} out of range for d={w.shape[0]}")
        if not (self.duration > 0 and math.isfinite(self.duration)):
            raise PreconditionError("duration must be a positive finite number")
        if not (math.isfinite(self.offset) and np.all(np.isfinite(w))):
            raise PreconditionError("offset and motion must be finite")

    @property
    def dim(self) -> int:
        return int(self.motion.shape[0])

    @property
    def is_relu(self) -> bool:
        return self.activation is None

    def matrices(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Dense ``(A, W, b)`` with ``A = s e_k e_k^T``, ``b = -s c e_k``, ``W = w e_k^T``."""
        d = self.dim
        A = np.zeros((d, d))
        A[self.axis, self.axis] = self.sign
        b = np.zeros(d)
        b[self.axis] = -self.sign * self.offset
        W = np.zeros((d, d))
        W[:, self.axis] = self.motion
        return A, W, b

    def field(self, x: np.ndarray) -> np.ndarray:
        """Vector field evaluated on rows of ``x``."""
        x = np.atleast_2d(x)
        z = self.sign * (x[:, self.axis] - self.offset)
        act = relu(z) if self.activation is None else np.asarray(self.activation(z), dtype=float)
        return act[:, None] * self.motion[None, :]


@dataclass(frozen=True)
class ControlSchedule:
    """Ordered segments on a common dimension ``d``."""

    d: int
    segments: tuple[ElementaryControl, ...] = field(default_factory=tuple)

    def __post_init__(self):
        segs = tuple(self.segments)
        for seg in segs:
            if seg.dim != self.d:
                raise PreconditionError(f"segment dimension {seg.dim} differs from schedule d={self.d}")
        object.__setattr__(self, "segments", segs)

    def __len__(self) -> int:
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)

    @property
    def total_time(self) -> float:
        return float(math.fsum(s.duration for s in self.segments))

    @property
    def switch_count(self) -> int:
        return len(self.segments)

    def boundaries(self) -> np.ndarray:
        """Cumulative segment end times, starting with 0."""
        return np.concatenate([[0.0], np.cumsum([s.duration for s in self.segments])])

    def append(self, *segs: ElementaryControl) -> "ControlSchedule":
        return ControlSchedule(self.d, self.segments + tuple(segs))


def empty_schedule(d: int) -> ControlSchedule:
    return ControlSchedule(d, ())


def concat(a: ControlSchedule, b: ControlSchedule) -> ControlSchedule:
    if a.d != b.d:
        raise PreconditionError(f"cannot concatenate schedules of dimension {a.d} and {b.d}")
    return ControlSchedule(a.d, a.segments + b.segments)


def concat_all(d: int, parts: Iterable[ControlSchedule]) -> ControlSchedule:
    out = empty_schedule(d)
    for p in parts:
        out = concat(out, p)
    return out


def rescale(s: ControlSchedule, T_new: float) -> ControlSchedule:
    """Rescale to horizon ``T_new``; durations scale by ``T_new/T`` and motions by ``T/T_new``."""
    if not (T_new > 0 and math.isfinite(T_new)):
        raise PreconditionError("T_new must be positive")
    T = s.total_time
    if len(s) == 0 or T == T_new:
        return s
    ratio = T_new / T
    segs = tuple(
        replace(seg, duration=seg.duration * ratio, motion=seg.motion / ratio) for seg in s.segments
    )
    return ControlSchedule(s.d, segs)


def reverse(s: ControlSchedule) -> ControlSchedule:
    """Schedule whose flow inverts the flow of ``s`` (reversed order, negated motions)."""
    segs = tuple(replace(seg, motion=-seg.motion) for seg in reversed(s.segments))
    return ControlSchedule(s.d, segs)


@dataclass(frozen=True)
class ScheduleMetrics:
    switches: int
    sup_norm_W: float
    sup_norm_b: float
    total_time: float

    def as_dict(self) -> dict:
        return {
            "switches": self.switches,
            "sup_norm_W": self.sup_norm_W,
            "sup_norm_b": self.sup_norm_b,
            "total_time": self.total_time,
        }


def schedule_metrics(s: ControlSchedule) -> ScheduleMetrics:
    if len(s) == 0:
        return ScheduleMetrics(0, 0.0, 0.0, 0.0)
    return ScheduleMetrics(
        switches=len(s),
        sup_norm_W=float(max(np.max(np.abs(seg.motion)) for seg in s.segments)),
        sup_norm_b=float(max(abs(seg.offset) for seg in s.segments)),
        total_time=s.total_time,
    )


def a_matrix_sup_norm(s: ControlSchedule) -> float:
    """Max entry magnitude of the ``A`` matrices; 1 for any non-empty schedule."""
    return float(max((np.max(np.abs(seg.matrices()[0])) for seg in s.segments), default=0.0))


# ---------------------------------------------------------------- JSON

SCHEDULE_SCHEMA = {
    "type": "object",
    "required": ["d", "T", "segments"],
    "properties": {
        "d": {"type": "integer", "minimum": 1},
        "T": {"type": "number", "minimum": 0},
        "segments": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["k", "s", "c", "w", "tau"],
                "properties": {
                    "k": {"type": "integer", "minimum": 1},
                    "s": {"enum": [1, -1]},
                    "c": {"type": "number"},
                    "w": {"type": "array", "items": {"type": "number"}},
                    "tau": {"type": "number", "exclusiveMinimum": 0},
                },
            },
        },
    },
}


def schedule_to_dict(s: ControlSchedule) -> dict:
    return {
        "d": s.d,
        "T": s.total_time,
        "segments": [
            {
                "k": seg.axis + 1,
                "s": seg.sign,
                "c": seg.offset,
                "w": [float(v) for v in seg.motion],
                "tau": seg.duration,
            }
            for seg in s.segments
        ],
    }


def validate_schedule_dict(doc) -> None:
    import jsonschema

    try:
        jsonschema.validate(doc, SCHEDULE_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise SchemaError(f"invalid schedule document: {exc.message}") from exc
    for seg in doc["segments"]:
        if len(seg["w"]) != doc["d"] or seg["k"] > doc["d"]:
            raise SchemaError("segment does not match schedule dimension")


def schedule_from_dict(doc) -> ControlSchedule:
    validate_schedule_dict(doc)
    d = int(doc["d"])
    segs = tuple(
        ElementaryControl(int(g["k"]) - 1, int(g["s"]), float(g["c"]), np.array(g["w"], float), float(g["tau"]))
        for g in doc["segments"]
    )
    return ControlSchedule(d, segs)


def dumps(obj) -> str:
    """Deterministic JSON; Python's float repr round-trips doubles exactly."""
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def schedule_to_json(s: ControlSchedule) -> str:
    return dumps(schedule_to_dict(s))


def schedule_from_json(text: str) -> ControlSchedule:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"malformed JSON: {exc}") from exc
    return schedule_from_dict(doc)


# ---------------------------------------------------------------- ensembles


@dataclass(frozen=True)
class LabeledEnsemble:
    """Points with either integer labels (1-based) or target points."""

    points: np.ndarray
    labels: np.ndarray | None = None
    targets: np.ndarray | None = None

    def __post_init__(self):
        pts = as_points(self.points)
        object.__setattr__(self, "points", _frozen(pts))
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != (len(pts),) or not np.all(lab == np.round(lab)):
                raise PreconditionError("need one integer label per point")
            lab = lab.astype(int)
            lab.setflags(write=False)
            object.__setattr__(self, "labels", lab)
        if self.targets is not None:
            tg = as_points(self.targets, pts.shape[1])
            if len(tg) != len(pts):
                raise PreconditionError("need one target per point")
            object.__setattr__(self, "targets", _frozen(tg))

    @property
    def d(self) -> int:
        return int(self.points.shape[1])

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class StripPartition:
    """Strips ``alpha[m-1] < x[0] <= alpha[m]`` with implicit infinite ends."""

    thresholds: tuple[float, ...]

    def __post_init__(self):
        th = tuple(float(t) for t in self.thresholds)
        if any(not math.isfinite(t) for t in th):
            raise PreconditionError("thresholds must be finite")
        if any(b <= a for a, b in zip(th, th[1:])):
            raise PreconditionError("thresholds must be strictly increasing")
        object.__setattr__(self, "thresholds", th)

    @property
    def count(self) -> int:
        return len(self.thresholds) + 1

    def bounds(self, label: int) -> tuple[float, float]:
        """Open-closed interval of strip ``label`` (1-based)."""
        if not 1 <= label <= self.count:
            raise PreconditionError(f"label {label} outside 1..{self.count}")
        lo = -math.inf if label == 1 else self.thresholds[label - 2]
        hi = math.inf if label == self.count else self.thresholds[label - 1]
        return lo, hi

    def strip_of(self, x1) -> np.ndarray:
        """Strip index (1-based) of each first coordinate."""
        return np.searchsorted(np.asarray(self.thresholds), np.asarray(x1, dtype=float), side="left") + 1

    def contains(self, label: int, x1: float, tol: float = 0.0) -> bool:
        lo, hi = self.bounds(label)
        return lo - tol < x1 <= hi + tol


# ---------------------------------------------------------------- simple functions and measures


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo, hi = _frozen(self.lo), _frozen(self.hi)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise PreconditionError("box corners must be vectors of equal length")
        if np.any(hi < lo):
            raise PreconditionError("box has hi < lo")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def d(self) -> int:
        return int(self.lo.shape[0])

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.all((x >= self.lo) & (x <= self.hi), axis=1)

    def intersect(self, other: "Box") -> "Box | None":
        lo = np.maximum(self.lo, other.lo)
        hi = np.minimum(self.hi, other.hi)
        if np.any(hi <= lo):
            return None
        return Box(lo, hi)


@dataclass(frozen=True)
class Region:
    """A region as a union of boxes, or as a predicate with an optional boundary sampler."""

    value: np.ndarray
    boxes: tuple[Box, ...] = ()
    predicate: Callable[[np.ndarray], np.ndarray] | None = None
    boundary_sampler: Callable[[float], np.ndarray] | None = None

    def __post_init__(self):
        object.__setattr__(self, "value", _frozen(self.value))
        object.__setattr__(self, "boxes", tuple(self.boxes))
        if not self.boxes and self.predicate is None:
            raise PreconditionError("a region needs boxes or a membership predicate")

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.predicate is not None:
            return np.asarray(self.predicate(x), dtype=bool)
        inside = np.zeros(len(x), dtype=bool)
        for b in self.boxes:
            inside |= b.contains(x)
        return inside


@dataclass(frozen=True)
class SimpleFunction:
    """``f = sum_m value_m * indicator(region_m)`` on a box domain.

    Points of the domain outside every region take the value 0.  Box regions
    use closed boxes; where two regions touch, the earlier one wins.
    """

    domain: Box
    regions: tuple[Region, ...]

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(self.regions))
        for r in self.regions:
            if r.value.shape != (self.domain.d,):
                raise PreconditionError("region values must lie in R^d")

    @property
    def d(self) -> int:
        return self.domain.d

    @property
    def is_box_union(self) -> bool:
        return all(r.predicate is None for r in self.regions)

    def region_index(self, x: np.ndarray) -> np.ndarray:
        """Index of the region containing each row, or -1 for the implicit zero region."""
        x = np.atleast_2d(x)
        idx = np.full(len(x), -1, dtype=int)
        for m in reversed(range(len(self.regions))):
            idx[self.regions[m].contains(x)] = m
        return idx

    def values(self) -> np.ndarray:
        return np.array([r.value for r in self.regions]).reshape(len(self.regions), self.d)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        idx = self.region_index(x)
        out = np.zeros((len(x), self.d))
        hit = idx >= 0
        if np.any(hit):
            out[hit] = self.values()[idx[hit]]
        return out


@dataclass(frozen=True)
class DiscreteMeasure:
    """Weighted atoms with positive weights summing to one."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = as_points(self.points)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(w) != len(pts):
            raise PreconditionError("need one weight per atom")
        if np.any(~np.isfinite(w)) or np.any(w <= 0):
            raise PreconditionError("weights must be positive")
        if abs(math.fsum(w) - 1.0) > 1e-12:
            raise PreconditionError(f"weights must sum to 1 (got {math.fsum(w)!r})")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "weights", _frozen(w))

    @property
    def d(self) -> int:
        return int(self.points.shape[1])

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def uniform(cls, points) -> "DiscreteMeasure":
        pts = as_points(points)
        return cls(pts, np.full(len(pts), 1.0 / len(pts)))

    @classmethod
    def normalized(cls, points, weights) -> "DiscreteMeasure":
        """Drop zero weights and renormalize."""
        pts = as_points(points)
        w = np.asarray(weights, dtype=float)
        keep = w > 0
        return cls(pts[keep], w[keep] / math.fsum(w[keep]))

    def pushforward(self, points: np.ndarray) -> "DiscreteMeasure":
        return DiscreteMeasure(points, self.weights)


def pairwise_min_distance(points: np.ndarray) -> float:
    """Smallest distance between two distinct rows; inf for fewer than two."""
    pts = np.asarray(points, float)
    n = len(pts)
    if n < 2:
        return math.inf
    if n <= 500:
        diff = pts[:, None, :] - pts[None, :, :]
        dist = np.sqrt(np.sum(diff * diff, axis=-1))
        dist[np.diag_indices(n)] = np.inf
        return float(dist.min())
    from scipy.spatial import cKDTree

    dd, _ = cKDTree(pts).query(pts, k=2)
    return float(dd[:, 1].min())


def sequence_of_floats(text: str | Sequence[float]) -> list[float]:
    if isinstance(text, str):
        text = text.strip()
        return [float(t) for t in text.split(",")] if text else []
    return [float(t) for t in text]
