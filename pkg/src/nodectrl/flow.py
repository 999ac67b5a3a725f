"""Flow maps of control schedules.

The closed form is the default path.  On the active side ``u = s*(x[k]-c) > 0``
every coordinate moves as ``x + w * u * phi(a, t)`` with ``a = s*w[k]`` and
``phi(a, t) = expm1(a*t)/a`` (``phi(0, t) = t``), so the map is affine in ``x``
and ``u`` keeps its sign.  No trajectory crosses its own hyperplane, hence no
event detection.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    CertificationError,
    ControlSchedule,
    ElementaryControl,
    PreconditionError,
    as_points,
    pairwise_min_distance,
)

DEFAULT_INTERIOR_SAMPLES = 16


def thread_count() -> int:
    raw = os.environ.get("NODECTRL_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = os.cpu_count() or 1
    return max(1, n)


def map_rows(fn, points: np.ndarray, min_chunk: int = 20000) -> np.ndarray:
    """Apply a row-wise function in chunks; output is identical to ``fn(points)``."""
    n = len(points)
    workers = min(thread_count(), max(1, n // min_chunk))
    if workers <= 1:
        return fn(points)
    chunks = np.array_split(np.arange(n), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda idx: fn(points[idx]), chunks))
    return np.concatenate(parts, axis=0)


def _phi(a: float, t: float) -> float:
    """``(exp(a t) - 1) / a``, continuous at ``a = 0``."""
    z = a * t
    if abs(z) < 1e-5:
        # series; also avoids the rounding of a*t when a is subnormal
        return t * (1.0 + z / 2.0 + z * z / 6.0)
    return math.expm1(z) / a


def elementary_flow(x, e: ElementaryControl, t: float | None = None) -> np.ndarray:
    """Closed-form state after running segment ``e`` for time ``t`` (default: its duration).

    Accepts a single point or an (n, d) array and returns the same shape.
    """
    if not e.is_relu:
        raise PreconditionError("closed-form flow requires ReLU; use rk4_flow for custom activations")
    t = e.duration if t is None else float(t)
    if not 0.0 <= t <= e.duration * (1 + 1e-12):
        raise PreconditionError(f"time {t} outside [0, {e.duration}]")
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    pts = np.atleast_2d(arr)
    if pts.shape[1] != e.dim:
        raise PreconditionError("point dimension does not match segment")
    out = pts.copy()
    k, s, c = e.axis, e.sign, e.offset
    u = s * (pts[:, k] - c)
    act = u > 0
    if t > 0 and np.any(act):
        a = s * e.motion[k]
        ph = _phi(a, t)
        ua = u[act]
        out[act] += np.outer(ua * ph, e.motion)
        if a != 0.0:
            # the hyperplane coordinate is evaluated relative to c to keep relative precision in u
            out[act, k] = c + s * ua * math.exp(a * t)
    return out[0] if single else out


def flow_points(points, s: ControlSchedule) -> np.ndarray:
    """End states of ``points`` under the closed-form flow of ``s``."""
    pts = as_points(points, s.d)

    def run(block):
        cur = block.copy()
        for seg in s.segments:
            cur = elementary_flow(cur, seg)
        return cur

    return map_rows(run, pts)


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray


def sample_times(s: ControlSchedule, interior: int = DEFAULT_INTERIOR_SAMPLES) -> list[tuple[int, float, float]]:
    """``(segment index, local time, global time)`` for every recorded instant."""
    out = [(-1, 0.0, 0.0)]
    t0 = 0.0
    for i, seg in enumerate(s.segments):
        for j in range(1, interior + 2):
            loc = seg.duration * j / (interior + 1)
            out.append((i, loc, t0 + loc))
        t0 += seg.duration
    return out


def integrate_schedule(
    points,
    s: ControlSchedule,
    record: bool = False,
    interior: int = DEFAULT_INTERIOR_SAMPLES,
    oracle: str = "closed",
    h_step: float = 1e-3,
):
    """Integrate an ensemble; optionally record trajectories.

    Returns ``(final_points, trajectories)`` where ``trajectories`` is None
    unless ``record``.  Recorded instants are 0, every segment boundary and
    ``interior`` evenly spaced interior times per segment.
    """
    pts = as_points(points, s.d)
    if oracle not in ("closed", "rk4"):
        raise PreconditionError(f"unknown oracle {oracle!r}")
    if not record:
        final = flow_points(pts, s) if oracle == "closed" else rk4_flow(pts, s, h_step)
        return final, None
    samples = sample_times(s, interior)
    states = np.empty((len(pts), len(samples), s.d))
    states[:, 0] = pts
    cur = pts.copy()
    prev_local = 0.0
    col = 1
    for i, seg in enumerate(s.segments):
        start = cur
        prev_local = 0.0
        for j in range(1, interior + 2):
            loc = seg.duration * j / (interior + 1)
            if oracle == "closed":
                states[:, col] = elementary_flow(start, seg, min(loc, seg.duration))
            else:
                states[:, col] = _rk4_segment(states[:, col - 1], seg, loc - prev_local, h_step)
            prev_local = loc
            col += 1
        cur = states[:, col - 1].copy()
    times = np.array([g for _, _, g in samples])
    trajs = [Trajectory(times, states[p]) for p in range(len(pts))]
    return cur, trajs


def _rk4_segment(x: np.ndarray, seg: ElementaryControl, duration: float, h_step: float) -> np.ndarray:
    if duration <= 0:
        return x.copy()
    h = h_step
    if not seg.is_relu:
        scale = seg.activation.lipschitz * float(np.max(np.abs(seg.motion)))
        if scale > 0:
            h = min(h, 0.1 / scale)
    n_full = int(math.floor(duration / h))
    rem = duration - n_full * h
    if rem <= 1e-14 * duration:
        rem = 0.0
    f = seg.field
    y = x.copy()
    steps = [h] * n_full + ([rem] if rem > 0 else [])
    for dt in steps:
        k1 = f(y)
        k2 = f(y + 0.5 * dt * k1)
        k3 = f(y + 0.5 * dt * k2)
        k4 = f(y + dt * k3)
        y = y + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


def rk4_flow(x, s: ControlSchedule, h_step: float = 1e-3) -> np.ndarray:
    """Classical RK4 with fixed step ``<= h_step`` per segment; last step truncated."""
    if not h_step > 0:
        raise PreconditionError("h_step must be positive")
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    pts = as_points(arr, s.d)

    def run(block):
        cur = block.copy()
        for seg in s.segments:
            cur = _rk4_segment(cur, seg, seg.duration, h_step)
        return cur

    out = map_rows(run, pts, min_chunk=5000)
    return out[0] if single else out


# ---------------------------------------------------------------- boxes


def segment_side(lo: np.ndarray, hi: np.ndarray, seg: ElementaryControl) -> np.ndarray:
    """Per box: +1 wholly active, 0 wholly frozen, -1 straddling the hyperplane."""
    k = seg.axis
    u_a = seg.sign * (lo[:, k] - seg.offset)
    u_b = seg.sign * (hi[:, k] - seg.offset)
    umin, umax = np.minimum(u_a, u_b), np.maximum(u_a, u_b)
    side = np.where(umax <= 0, 0, np.where(umin >= 0, 1, -1))
    return side


def box_flow(lo: np.ndarray, hi: np.ndarray, seg: ElementaryControl, check: bool = True):
    """Exact bounding box of the image of each box under one segment.

    On its active side a segment is affine, so each image coordinate ranges
    over an interval attained at box corners.  Boxes must lie wholly on one
    side of the hyperplane; a straddling box raises ``CertificationError``.
    """
    lo = np.atleast_2d(np.asarray(lo, float))
    hi = np.atleast_2d(np.asarray(hi, float))
    side = segment_side(lo, hi, seg)
    if check and np.any(side < 0):
        bad = int(np.flatnonzero(side < 0)[0])
        raise CertificationError(
            f"box {bad} straddles hyperplane x{seg.axis + 1}={seg.offset!r}"
        )
    new_lo, new_hi = lo.copy(), hi.copy()
    act = side == 1
    if np.any(act):
        k, s, c = seg.axis, seg.sign, seg.offset
        a = s * seg.motion[k]
        t = seg.duration
        ph = _phi(a, t)
        grow = math.exp(a * t)
        ua = s * (lo[act, k] - c)
        ub = s * (hi[act, k] - c)
        umin, umax = np.minimum(ua, ub), np.maximum(ua, ub)
        sh_a = np.outer(umin * ph, seg.motion)
        sh_b = np.outer(umax * ph, seg.motion)
        new_lo[act] = lo[act] + np.minimum(sh_a, sh_b)
        new_hi[act] = hi[act] + np.maximum(sh_a, sh_b)
        if a != 0.0:
            new_lo[act, k] = c + (lo[act, k] - c) * grow
            new_hi[act, k] = c + (hi[act, k] - c) * grow
    return new_lo, new_hi


def box_flow_schedule(lo, hi, s: ControlSchedule, check: bool = True):
    lo = np.atleast_2d(np.asarray(lo, float)).copy()
    hi = np.atleast_2d(np.asarray(hi, float)).copy()
    for seg in s.segments:
        lo, hi = box_flow(lo, hi, seg, check)
    return lo, hi


# ---------------------------------------------------------------- injectivity


@dataclass(frozen=True)
class InjectivityReport:
    injective: bool
    min_distance_before: float
    min_distance_after: float
    precondition_ok: bool


def is_injective_sample(points, s: ControlSchedule, oracle: str = "closed") -> InjectivityReport:
    pts = as_points(points, s.d)
    before = pairwise_min_distance(pts)
    if before == 0.0:
        return InjectivityReport(False, 0.0, 0.0, False)
    after_pts, _ = integrate_schedule(pts, s, oracle=oracle)
    after = pairwise_min_distance(after_pts)
    return InjectivityReport(after > 0.0, before, after, True)


# ---------------------------------------------------------------- CSV


def fmt(v: float) -> str:
    return "%.17g" % v


def trajectories_to_csv(trajs: Sequence[Trajectory], d: int) -> str:
    """Rows ordered by point id, then time; header ``t,x1,...,xd,point_id``."""
    lines = [",".join(["t"] + [f"x{i + 1}" for i in range(d)] + ["point_id"])]
    for pid, tr in enumerate(trajs):
        for t, st in zip(tr.times, tr.states):
            lines.append(",".join([fmt(t)] + [fmt(v) for v in st] + [str(pid)]))
    return "\n".join(lines) + "\n"


def points_to_csv(points: np.ndarray) -> str:
    d = points.shape[1]
    lines = [",".join(f"x{i + 1}" for i in range(d))]
    lines += [",".join(fmt(v) for v in row) for row in points]
    return "\n".join(lines) + "\n"


def points_from_csv(text: str) -> np.ndarray:
    rows = [ln for ln in text.splitlines() if ln.strip()]
    if not rows:
        raise PreconditionError("empty points CSV")
    header = [h.strip() for h in rows[0].split(",")]
    cols = [i for i, h in enumerate(header) if h.startswith("x")]
    if not cols:
        raise PreconditionError("points CSV needs x1..xd columns")
    data = [[float(r.split(",")[i]) for i in cols] for r in rows[1:]]
    return as_points(np.array(data, float).reshape(-1, len(cols)))


def check_box_sides(lo, hi, s: ControlSchedule) -> None:
    """Raise if any tracked box straddles any applied hyperplane."""
    box_flow_schedule(lo, hi, s, check=True)


def assert_finite(points: np.ndarray) -> None:
    if not np.all(np.isfinite(points)):
        raise CertificationError("flow produced non-finite states")
