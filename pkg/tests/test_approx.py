import itertools
import math

import numpy as np
import pytest

from nodectrl.approx import (
    ApproxParams,
    CellDecomposition,
    _aligned_h,
    approximate,
    build_cover,
    compression_schedule,
    cover_count,
    cover_cubes,
    estimate_box_dimension,
    l2_error,
    minkowski_island,
    ordering_grouping_schedule,
    polygon_contains,
    polyline_sampler,
    run_lemma,
    synthesize_approximator,
    synthesize_from_decomposition,
)
from nodectrl.core import (
    Box,
    ControlSchedule,
    ElementaryControl,
    PreconditionError,
    Region,
    SimpleFunction,
    empty_schedule,
    schedule_metrics,
)
from nodectrl.flow import box_flow_schedule, flow_points
from nodectrl.simcontrol import prepare_targets

DOM = Box([-1, -1], [1, 1])


def half_plane():
    return SimpleFunction(
        DOM,
        (
            Region(np.array([1.0, 0.0]), (Box([0, -1], [1, 1]),)),
            Region(np.array([-1.0, 0.0]), (Box([-1, -1], [0, 1]),)),
        ),
    )


def square():
    return SimpleFunction(DOM, (Region(np.array([1.0, 0.0]), (Box([-0.5, -0.5], [0.5, 0.5]),)),))


def island(depth):
    poly = minkowski_island(depth, 1.0)
    return SimpleFunction(
        DOM,
        (Region(np.array([1.0, 0.0]), predicate=lambda x: polygon_contains(poly, x), boundary_sampler=polyline_sampler(poly)),),
    )


def brute_cover(f, h, m=12):
    """Half-open cubes on which ``f`` takes more than one value, by dense sampling."""
    n = int(round(2 / h))
    t = np.arange(m) / m
    out = set()
    for i, j in itertools.product(range(n), range(n)):
        lo = DOM.lo + h * np.array([i, j])
        pts = lo + h * np.stack(np.meshgrid(t, t, indexing="ij"), -1).reshape(-1, 2)
        if len(np.unique(f(pts), axis=0)) > 1:
            out.add((i, j))
    return out


def perimeter_cover(lo, hi, h, m=4000):
    """Cubes containing a point of the rectangle perimeter, by dense sampling."""
    t = np.linspace(0, 1, m)
    (x0, y0), (x1, y1) = lo, hi
    pts = np.vstack([np.column_stack([x0 + t * (x1 - x0), np.full(m, y)]) for y in (y0, y1)]
                    + [np.column_stack([np.full(m, x), y0 + t * (y1 - y0)]) for x in (x0, x1)])
    idx = np.floor(np.round((pts - DOM.lo) / h, 9)).astype(int)
    return {tuple(i) for i in idx}


def grid_decomposition(m, zeta):
    offs = np.linspace(-1, 1, m + 1)[1:-1]
    targets = np.array([[-0.5, -0.5], [0.5, -0.25], [-0.25, 0.5], [0.75, 0.75]])
    return CellDecomposition.from_grid(DOM, [offs, offs], zeta, lambda c: int(c[0] > 0) + 2 * int(c[1] > 0), targets)


class TestCover:
    def test_constant_function(self):
        f = SimpleFunction(DOM, (Region(np.array([0.3, 0.2]), (Box([-1, -1], [1, 1]),)),))
        D = build_cover(f, 0.25)
        assert D.N == 1 and D.n_gamma == 0
        assert np.allclose(D.cells_lo, DOM.lo) and np.allclose(D.cells_hi, DOM.hi)

    def test_left_half_example(self):
        f = SimpleFunction(DOM, (Region(np.array([1.0, 0.0]), (Box([-1, -1], [0, 1]),)),))
        cubes = cover_cubes(f, 0.5)
        assert {tuple(c) for c in cubes} == brute_cover(f, 0.5)
        D = build_cover(f, 0.5)
        # half-open cubes put the column x1 in [0, 0.5) on the boundary
        assert D.offsets[0].tolist() == [0.0, 0.5]
        assert D.offsets[1].tolist() == [-0.5, 0.0, 0.5]
        rng = np.random.default_rng(0)
        for i in range(D.N):
            pts = D.cells_lo[i] + rng.random((500, 2)) * (D.cells_hi[i] - D.cells_lo[i])
            vals = np.unique(f(pts), axis=0)
            assert len(vals) == 1 and np.array_equal(vals[0], D.targets[D.cell_target[i]])

    @pytest.mark.parametrize("h", [0.2, 0.1, 0.05])
    def test_square_cover_matches_brute_force(self, h):
        assert {tuple(c) for c in cover_cubes(square(), h)} == perimeter_cover((-0.5, -0.5), (0.5, 0.5), h)

    def test_square_count_scales_inversely(self):
        hs = [0.2, 0.1, 0.05]
        counts = [cover_count(square(), h) for h in hs]
        slope = np.polyfit(np.log(1 / np.array(hs)), np.log(counts), 1)[0]
        assert abs(slope - 1) < 0.05

    def test_cells_unique_valued_and_disjoint(self):
        f = half_plane()
        D = build_cover(f, 0.25)
        for i, j in itertools.combinations(range(D.N), 2):
            overlap = np.minimum(D.cells_hi[i], D.cells_hi[j]) - np.maximum(D.cells_lo[i], D.cells_lo[j])
            assert np.any(overlap <= 0)
        centres = 0.5 * (D.cells_lo + D.cells_hi)
        assert np.array_equal(f(centres), D.targets[D.cell_target])
        assert D.N <= np.prod([len(o) + 1 for o in D.offsets])

    def test_coarsen_keeps_cover(self):
        f = half_plane()
        full, coarse = build_cover(f, 0.25), build_cover(f, 0.25, coarsen=True)
        assert coarse.N == 2 and full.N > coarse.N
        assert np.array_equal(coarse.cover, full.cover)

    def test_omega_h_measure_order_h(self):
        ratios = [build_cover(square(), h).omega_h_measure() / DOM.volume / h for h in (0.2, 0.1, 0.05, 0.025)]
        assert max(ratios) < 3.0
        assert max(ratios) / min(ratios) < 1.1

    def test_predicate_without_sampler(self):
        f = SimpleFunction(DOM, (Region(np.array([1.0, 0.0]), predicate=lambda x: x[:, 0] > 0),))
        with pytest.raises(PreconditionError):
            cover_cubes(f, 0.1)


class TestBoxDimension:
    def test_square(self):
        assert abs(estimate_box_dimension(square(), [0.2, 0.1, 0.05, 0.025]) - 1) <= 0.15

    def test_empty_boundary(self):
        f = SimpleFunction(DOM, (Region(np.array([1.0, 1.0]), (Box([-1, -1], [1, 1]),)),))
        assert estimate_box_dimension(f, [0.2, 0.1, 0.05]) == 0.0

    def test_prefractal_depths(self):
        D = [estimate_box_dimension(island(k), [0.2, 0.1, 0.05, 0.025]) for k in (1, 2, 3, 4)]
        assert all(1 < v < 2 for v in D)
        assert all(b > a for a, b in zip(D, D[1:]))
        assert D == pytest.approx([1.0456, 1.2335, 1.4355, 1.4927], abs=1e-3)

    def test_needs_three_decreasing(self):
        with pytest.raises(PreconditionError):
            estimate_box_dimension(square(), [0.1, 0.2, 0.05])
        with pytest.raises(PreconditionError):
            estimate_box_dimension(square(), [0.2, 0.1])

    def test_island_geometry(self):
        p = minkowski_island(2)
        assert len(p) == 4 * 8**2 + 1 and np.array_equal(p[0], p[-1])
        # the quadratic Koch replacement preserves enclosed area
        area = 0.5 * abs(np.sum(p[:-1, 0] * p[1:, 1] - p[1:, 0] * p[:-1, 1]))
        assert area == pytest.approx(1.0, abs=1e-12)


class TestParams:
    def test_constraints(self):
        D = grid_decomposition(4, 0.02)
        P = ApproxParams.derive(D, eps=0.25)
        assert P.eta < 1 / P.N and P.eta <= 0.25 / 8
        assert P.delta < P.zeta / (8 * P.N)
        assert P.delta <= P.c_const * P.zeta / P.n_gamma
        assert P.delta**2 <= P.eta**2 / ((P.d - 1) + (1 + 8 / P.zeta) ** 2)

    def test_eta_too_large(self):
        with pytest.raises(PreconditionError):
            ApproxParams.derive(grid_decomposition(4, 0.02), eta=0.1)


class TestLemma:
    def test_single_cell(self):
        D = CellDecomposition.from_grid(DOM, ([], []), 0.05, lambda c: 0, np.array([[-0.5, 0.5]]))
        P = ApproxParams.derive(D, eta=0.02)
        L = run_lemma(D, P)
        assert L.diam_after_stage1 <= 0.02
        # no interior hyperplanes: every offset is a domain face, the away point or a compression level
        assert len(L.stage1) <= 6

    def test_two_cells(self):
        tg = np.array([[-0.5, 0.5], [0.5, -0.5]])
        D = CellDecomposition.from_grid(DOM, ([0.0], []), 0.05, lambda c: int(c[0] > 0), tg)
        L = run_lemma(D, ApproxParams.derive(D, eta=0.02))
        lo, hi = box_flow_schedule(D.cells_lo, D.cells_hi, L.stage1)
        assert np.all(np.linalg.norm(hi - lo, axis=1) <= 0.02)
        assert L.first_gap >= 0.5
        assert np.allclose(lo, L.lo_stage1) and np.allclose(hi, L.hi_stage1)

    def test_postconditions_across_eta(self):
        D = grid_decomposition(2, 0.05)
        _, Tp = prepare_targets(D.targets)
        Cs, Ks = [], []
        for eta in (0.1, 0.05, 0.025):
            L = run_lemma(D, ApproxParams.derive(D, eta=eta), Tp)
            assert all(v < eta for v in L.diam_k)
            assert L.measured_K_final <= L.K_bound
            Cs.append(L.measured_C)
            Ks.append(L.measured_K_path)
        assert max(Cs) / min(Cs) <= 2 and max(Ks) / min(Ks) <= 2

    def test_box_side_condition_holds(self):
        D = grid_decomposition(4, 0.02)
        P = ApproxParams.derive(D)
        s = compression_schedule(D, P, prepare_targets(D.targets)[1])
        box_flow_schedule(D.cells_lo, D.cells_hi, s, check=True)

    def test_time_accounting_proportional(self):
        ratios = []
        for m in (2, 4, 8, 16):
            D = grid_decomposition(m, 0.01)
            _, _, _, P, raw_T = synthesize_from_decomposition(D, 1.0)
            ratios.append(raw_T / (D.N * (math.log(1 / P.delta) + 1 / P.zeta)))
        assert max(ratios) / min(ratios) < 3

    def test_undistinct_targets_rejected(self):
        D = grid_decomposition(2, 0.05)
        with pytest.raises(PreconditionError):
            run_lemma(D, ApproxParams.derive(D, eta=0.1), np.array([[0, 0], [0, 1], [1, 0], [2, 0.0]]))


class TestOrdering:
    def test_already_at_target(self):
        img = [(Box([3.0, -0.004], [3.01, -0.001]), 0)]
        s = ordering_grouping_schedule(img, np.array([[3.005, 0.0]]), 0.05)
        assert len(s) <= 4

    def test_two_cells_two_targets(self):
        img = [(Box([3.0, -0.004], [3.01, -0.001]), 0), (Box([4.0, -0.004], [4.01, -0.001]), 1)]
        targets = np.array([[0.0, 0.0], [1.0, 0.0]])
        eta = 0.05
        s = ordering_grouping_schedule(img, targets, eta)
        lo, hi = box_flow_schedule(np.array([b.lo for b, _ in img]), np.array([b.hi for b, _ in img]), s)
        for i in range(2):
            assert abs(lo[i, 0] - targets[i, 0]) <= eta and abs(hi[i, 0] - targets[i, 0]) <= eta
        assert hi[0, 0] < lo[1, 0]
        assert hi[:, 1].max() - lo[:, 1].min() < eta

    def test_foreign_target_inside_image(self):
        img = [(Box([0.9, -0.004], [1.1, -0.001]), 0)]
        with pytest.raises(PreconditionError):
            ordering_grouping_schedule(img, np.array([[0.0, 0.0], [1.0, 0.0]]), 0.05)


class TestL2:
    def test_identity_against_zero(self):
        f = SimpleFunction(Box([0, 0], [1, 1]), (Region(np.zeros(2), (Box([0, 0], [1, 1]),)),))
        rep = l2_error(f, empty_schedule(2), 0.01)
        assert abs(rep.value - math.sqrt(2 / 3)) < 1e-3

    def test_exact_match(self):
        f = SimpleFunction(Box([0, 0], [1, 1]), (Region(np.zeros(2), (Box([0, 0], [1, 1]),)),))
        s = ControlSchedule(2, (ElementaryControl(0, 1, 0.0, np.array([-1.0, 0.0]), 40.0),
                               ElementaryControl(1, 1, 0.0, np.array([0.0, -1.0]), 40.0)))
        assert l2_error(f, s, 0.01).value < 1e-6

    def test_grid_halving(self):
        f = half_plane()
        s = synthesize_approximator(f, 0.3)
        a, b = l2_error(f, s, 0.02).value, l2_error(f, s, 0.01).value
        assert abs(a - b) / b < 0.05

    def test_bad_step(self):
        with pytest.raises(PreconditionError):
            l2_error(half_plane(), empty_schedule(2), 0.0)


class TestApproximate:
    def test_half_plane_certificate(self):
        res = approximate(half_plane(), 0.25)
        c = res.certificate
        assert c["l2_error"] < 0.25
        for key in ("l2_error", "eps", "h", "zeta", "delta", "eta", "switches", "norms", "measured_C", "measured_K"):
            assert key in c
        assert c["grid_step"] == min(c["h"] / 4, 0.01 * math.sqrt(8))
        assert c["l2_omega_h"] <= c["l2_error"]
        assert schedule_metrics(res.schedule).sup_norm_W == c["norms"]["W"]

    def test_constant_function(self):
        alpha = np.array([0.4, -0.3])
        f = SimpleFunction(DOM, (Region(alpha, (Box([-1, -1], [1, 1]),)),))
        res = approximate(f, 0.2)
        assert res.decomposition.N == 1
        assert res.l2.value <= res.params.eta * math.sqrt(DOM.volume)

    def test_unaligned_h_refines(self):
        res = approximate(half_plane(), 0.25, h=2 / 23)
        assert res.certificate["l2_error"] < 0.25
        assert res.certificate["refinements"] >= 1

    def test_aligned_h(self):
        assert _aligned_h(DOM, 0.0625) == 0.0625
        assert 2 / _aligned_h(DOM, 0.3) == 7

    def test_three_dimensional(self):
        dom3 = Box([-1, -1, -1], [1, 1, 1])
        f = SimpleFunction(
            dom3,
            (
                Region(np.array([1.0, 0.0, 0.0]), (Box([0, -1, -1], [1, 1, 1]),)),
                Region(np.array([0.0, 1.0, 0.5]), (Box([-1, -1, -1], [0, 1, 1]),)),
            ),
        )
        res = approximate(f, 0.4)
        assert res.certificate["l2_error"] < 0.4

    def test_uncoarsened_matches(self):
        res = approximate(half_plane(), 0.25, coarsen=False)
        assert res.certificate["l2_error"] < 0.25 and res.decomposition.N > 2

    def test_rejects(self):
        with pytest.raises(PreconditionError):
            approximate(half_plane(), 0.0)
        f1 = SimpleFunction(Box([0], [1]), (Region(np.array([1.0]), (Box([0], [0.5]),)),))
        with pytest.raises(PreconditionError):
            approximate(f1, 0.2)

    def test_final_points_near_targets(self):
        f = half_plane()
        s = synthesize_approximator(f, 0.25)
        x = np.array([[-0.6, 0.3], [0.7, -0.8]])
        assert np.max(np.abs(flow_points(x, s) - f(x))) < 0.05
