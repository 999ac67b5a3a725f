"""Randomized invariants of the elementary flows.

``CASES`` counts executed examples per property so the acceptance suite can
report the size of the corpus it ran.
"""

from collections import Counter

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from nodectrl.core import Box, ControlSchedule, DiscreteMeasure, ElementaryControl, rescale
from nodectrl.flow import elementary_flow, flow_points, is_injective_sample, rk4_flow
from nodectrl.transport import DensitySpec, sample_particles

EXAMPLES = 250
CASES: Counter = Counter()

coord = st.floats(-2.0, 2.0, allow_nan=False)
durations = st.floats(1e-3, 2.0, allow_nan=False)


@st.composite
def segments(draw, d):
    return ElementaryControl(
        draw(st.integers(0, d - 1)),
        draw(st.sampled_from([1, -1])),
        draw(coord),
        np.array(draw(st.lists(coord, min_size=d, max_size=d))),
        draw(durations),
    )


@st.composite
def cases(draw, max_segments=3, n_points=12):
    d = draw(st.sampled_from([2, 3]))
    segs = draw(st.lists(segments(d), min_size=1, max_size=max_segments))
    seed = draw(st.integers(0, 2**32 - 1))
    pts = np.random.default_rng(seed).uniform(-3, 3, (n_points, d))
    return ControlSchedule(d, tuple(segs)), pts


def _side(x, seg):
    return seg.sign * (x[:, seg.axis] - seg.offset)


@settings(max_examples=EXAMPLES)
@given(cases())
def test_frozen_half_space_exactly_fixed(case):
    s, x = case
    for seg in s.segments:
        frozen = _side(x, seg) <= 0
        y = elementary_flow(x, seg)
        assert np.array_equal(y[frozen], x[frozen])
        x = y
    CASES["frozen"] += 1


@settings(max_examples=EXAMPLES)
@given(cases())
def test_hyperplane_never_crossed(case):
    s, x = case
    for seg in s.segments:
        sign0 = _side(x, seg) > 0
        for t in np.linspace(0.0, seg.duration, 9)[1:]:
            assert np.array_equal(_side(elementary_flow(x, seg, t), seg) > 0, sign0)
        # the numerical oracle respects the same barrier
        one = ControlSchedule(s.d, (seg,))
        assert np.array_equal(_side(rk4_flow(x, one, h_step=1e-2), seg) > 0, sign0)
        x = elementary_flow(x, seg)
    CASES["non_crossing"] += 1


@st.composite
def separated_cases(draw):
    s, x = draw(cases())
    # thin the cloud to a minimum spacing so float rounding cannot merge images
    keep = [x[0]]
    for p in x[1:]:
        if min(np.linalg.norm(p - q) for q in keep) > 1e-2:
            keep.append(p)
    return s, np.array(keep)


@settings(max_examples=EXAMPLES)
@given(separated_cases())
def test_flow_injective_on_samples(case):
    s, x = case
    rep = is_injective_sample(x, s)
    assert rep.precondition_ok and rep.injective
    CASES["injective"] += 1


@settings(max_examples=EXAMPLES)
@given(cases(), st.floats(0.05, 20.0))
def test_rescale_preserves_flow_map(case, T_new):
    s, x = case
    a = flow_points(x, s)
    b = flow_points(x, rescale(s, T_new))
    assert np.max(np.abs(a - b)) < 1e-9
    CASES["rescale"] += 1


@settings(max_examples=EXAMPLES)
@given(cases(), st.integers(1, 500), st.integers(0, 10**6))
def test_mass_conserved_by_pushforward(case, n, seed):
    s, _ = case
    d = s.d
    rho = DensitySpec.uniform(Box(np.zeros(d), np.ones(d)))
    mu = sample_particles(rho, n, seed)
    fin = mu.pushforward(flow_points(mu.points, s))
    assert isinstance(fin, DiscreteMeasure)
    assert len(fin) == len(mu)
    assert np.array_equal(fin.weights, mu.weights)
    assert np.all(np.isfinite(fin.points))
    CASES["mass"] += 1
