"""Simultaneous control: steer N distinct points onto N distinct targets."""

from __future__ import annotations

import math

import numpy as np

from .classify import fresh_coordinate, move_first_coordinate, preparation_segments
from .core import (
    ControlSchedule,
    ElementaryControl,
    PreconditionError,
    as_points,
    concat,
    require_dimension,
    require_distinct,
    rescale,
    reverse,
)
from .flow import elementary_flow, flow_points

ADJUST_TOL = 1e-13


def prepare_targets(Z) -> tuple[ControlSchedule, np.ndarray]:
    """Return ``(suffix, Z_prepared)``.

    ``Z_prepared`` has pairwise distinct first coordinates and the suffix maps
    it back onto ``Z``: it is the time reversal of the preparation run on Z.
    """
    Z = as_points(Z)
    require_distinct(Z, "targets")
    segs, Zp = preparation_segments(Z)
    forward = ControlSchedule(Z.shape[1], tuple(segs))
    return reverse(forward), Zp


def align_first_coordinates(
    Y: np.ndarray, goal: np.ndarray, strategy: str = "lift"
) -> tuple[list[ElementaryControl], np.ndarray]:
    """Move every point's first coordinate onto ``goal`` (distinct values).

    A point whose goal is held by another point waits; when all remaining
    points wait on each other one of them is parked on a free coordinate.
    """
    Y = np.array(Y, float, copy=True)
    n = len(Y)
    segs: list[ElementaryControl] = []
    pending = [i for i in range(n) if Y[i, 0] != goal[i]]
    while pending:
        progressed = False
        for i in list(pending):
            others = np.delete(Y[:, 0], i)
            if np.any(others == goal[i]):
                continue
            moves, Y = move_first_coordinate(Y, i, float(goal[i]), strategy)
            segs.extend(moves)
            pending.remove(i)
            progressed = True
        if not progressed:
            i = pending[0]
            occupied = np.concatenate([np.delete(Y[:, 0], i), goal])
            lo = float(min(occupied.min(), Y[i, 0])) - 1.0
            park = fresh_coordinate(lo, lo + 0.5, occupied)
            moves, Y = move_first_coordinate(Y, i, park, strategy)
            segs.extend(moves)
    return segs, Y


def delivery_segments(
    Y: np.ndarray, goal: np.ndarray, adjust: bool = True
) -> tuple[list[ElementaryControl], np.ndarray]:
    """Deliver coordinates 2..d of every point, in ascending goal first coordinate.

    Assumes ``Y[:, 0]`` is already (close to) ``goal[:, 0]`` with distinct
    values.  Each delivery acts only on the points not yet delivered, via the
    hyperplane ``x1 = c`` placed halfway past the previous goal.  When
    ``adjust`` is on and point ``i`` has a residual in its first coordinate,
    a scaling about ``c`` fixes it.
    """
    Y = np.array(Y, float, copy=True)
    n, d = Y.shape
    order = np.argsort(goal[:, 0], kind="stable")
    segs: list[ElementaryControl] = []
    for r, i in enumerate(order):
        if r == 0:
            c = float(Y[:, 0].min()) - 1.0
        else:
            prev = float(goal[order[r - 1], 0])
            c = prev + 0.5 * (float(goal[i, 0]) - prev)
        u = Y[i, 0] - c
        if not u > 0:
            raise PreconditionError("delivery order broken: point lies left of its hyperplane")
        if adjust:
            f = (goal[i, 0] - c) / u
            if abs(f - 1.0) > ADJUST_TOL:
                lf = math.log(f)
                w = np.zeros(d)
                w[0] = math.copysign(1.0, lf)
                seg = ElementaryControl(0, 1, c, w, abs(lf))
                Y = elementary_flow(Y, seg)
                segs.append(seg)
                u = Y[i, 0] - c
        delta = goal[i, 1:] - Y[i, 1:]
        if np.any(delta != 0.0):
            amp = float(np.max(np.abs(delta)))
            w = np.zeros(d)
            w[1:] = delta / amp
            seg = ElementaryControl(0, 1, c, w, amp / u)
            Y = elementary_flow(Y, seg)
            segs.append(seg)
    return segs, Y


def _simcontrol_segments(X, Zp, strategy):
    prep, Y = preparation_segments(X)
    align, Y = align_first_coordinates(Y, Zp[:, 0], strategy)
    deliver, Y = delivery_segments(Y, Zp, adjust=False)
    return prep + align + deliver


def synthesize_simcontrol(X, Z, T: float = 1.0) -> ControlSchedule:
    """Schedule with ``phi_T(x_i) = z_i`` for every i.

    First coordinates are aligned with lifting moves, which keep coordinate
    magnitudes small.  If that exceeds 6N segments the lowering moves (at
    most three per point) are used instead.
    """
    X = as_points(X)
    Z = as_points(Z, X.shape[1])
    if len(X) != len(Z):
        raise PreconditionError("need as many targets as points")
    require_dimension(X.shape[1])
    require_distinct(X, "points")
    require_distinct(Z, "targets")
    suffix, Zp = prepare_targets(Z)
    segs = _simcontrol_segments(X, Zp, "lift")
    if len(segs) + len(suffix) > 6 * len(X):
        segs = _simcontrol_segments(X, Zp, "lower")
    s = concat(ControlSchedule(X.shape[1], tuple(segs)), suffix)
    return rescale(s, T) if len(s) else s


def perturb_targets(Z, eps: float) -> np.ndarray:
    """Separate coincident targets by at most ``eps/2``, cycling +-e1, +-e2."""
    Z = np.array(as_points(Z), float, copy=True)
    d = Z.shape[1]
    dirs = [(0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0)]
    seen: dict[tuple, int] = {}
    for i in range(len(Z)):
        key = tuple(Z[i])
        j = seen.get(key, 0)
        seen[key] = j + 1
        if j == 0:
            continue
        axis, sg = dirs[(j - 1) % 4]
        radius = 0.5 * eps / (1 + (j - 1) // 4)
        shift = np.zeros(d)
        shift[axis] = sg * radius
        cand = Z[i] + shift
        factor = 1.0
        while np.any(np.all(Z == cand, axis=1)):
            factor *= 0.5
            cand = Z[i] + factor * shift
        Z[i] = cand
    return Z


def synthesize_approx_simcontrol(X, Z, eps: float, T: float = 1.0) -> ControlSchedule:
    """Like ``synthesize_simcontrol`` but tolerates coincident targets within ``eps``."""
    if not eps > 0:
        raise PreconditionError("eps must be positive")
    Z = as_points(Z)
    return synthesize_simcontrol(X, perturb_targets(Z, eps), T)


def simcontrol_error(X, Z, s: ControlSchedule) -> float:
    final = flow_points(X, s)
    return float(np.max(np.linalg.norm(final - as_points(Z), axis=1)))
