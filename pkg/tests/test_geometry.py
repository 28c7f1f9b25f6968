import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rwacert import nn
from rwacert.geometry import (
    Box,
    BoxRegion,
    CertSublevel,
    Complement,
    ComplementBox,
    DanglingCertificateError,
    Intersection,
    MEAN_MOTION,
    Region,
    RegionSamplingError,
    Union,
    VelocityUnsafeOverapprox,
    make_docking_task,
    make_surrogate_task,
    over_norm,
    region_contains,
    region_from_dict,
    region_to_dict,
    regions_equal,
    sample_region,
    under_norm,
    velocity_unsafe_overapprox,
    SPACECRAFT_LAYOUT,
)


def brute_force_under(u1, u2, nd):
    """Independent oracle: maximize the projection over the direction list."""
    best = -np.inf
    for i in range(1, nd // 4 + 2):
        angle = 2 * (i - 1) * math.pi / nd
        best = max(best, abs(u1) * math.cos(angle) + abs(u2) * math.sin(angle))
    return best


class TestNormApprox:
    def test_axis_aligned_is_exact(self):
        assert under_norm(1.0, 0.0, 8) == pytest.approx(1.0)

    def test_diagonal_hits_sqrt2(self):
        # brute force over the three nd=8 directions picks cos45+sin45
        assert brute_force_under(1, 1, 8) == pytest.approx(math.sqrt(2))
        assert under_norm(1.0, 1.0, 8) == pytest.approx(math.sqrt(2))

    def test_three_four_five_sandwich(self):
        val = under_norm(3.0, 4.0, 16)
        assert val == pytest.approx(brute_force_under(3, 4, 16))
        assert val <= 5.0
        assert val >= 5.0 * math.cos(math.pi / 16)

    def test_over_direct_evaluation(self):
        assert over_norm(1.0, 0.0, 8) == pytest.approx(1.0 / math.cos(math.pi / 8))

    def test_over_of_zero_is_zero(self):
        for nd in (4, 8, 16):
            assert over_norm(0.0, 0.0, nd) == 0.0

    @pytest.mark.parametrize("nd", [4, 8, 16])
    def test_sandwich_property(self, nd):
        rng = np.random.default_rng(nd)
        u = rng.uniform(-20, 20, size=(100_000, 2))
        true = np.hypot(u[:, 0], u[:, 1])
        under = under_norm(u[:, 0], u[:, 1], nd)
        over = over_norm(u[:, 0], u[:, 1], nd)
        assert np.all(under <= true + 1e-12)
        assert np.all(true <= over + 1e-12)
        # the ratio is exactly the secant of the half-sector angle
        pos = under > 0
        assert np.allclose(over[pos] / under[pos], 1.0 / math.cos(math.pi / nd))

    @pytest.mark.parametrize("nd", [8, 16])
    def test_symmetries(self, nd):
        rng = np.random.default_rng(1)
        for _ in range(50):
            u1, u2 = rng.uniform(-5, 5, size=2)
            base = under_norm(u1, u2, nd)
            assert under_norm(-u1, u2, nd) == pytest.approx(base)
            assert under_norm(u1, -u2, nd) == pytest.approx(base)
            assert under_norm(u2, u1, nd) == pytest.approx(base)

    def test_nd4_sign_flip_symmetry(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            u1, u2 = rng.uniform(-5, 5, size=2)
            assert under_norm(-u1, -u2, 4) == pytest.approx(under_norm(u1, u2, 4))

    @pytest.mark.parametrize("bad", [0, -4, 3, 6, 10])
    def test_rejects_bad_direction_counts(self, bad):
        with pytest.raises(ValueError):
            under_norm(1.0, 1.0, bad)
        with pytest.raises(ValueError):
            over_norm(1.0, 1.0, bad)


class TestVelocityUnsafe:
    def test_origin_is_safe(self):
        assert not velocity_unsafe_overapprox(np.zeros(4), 8)

    def test_fast_at_origin_is_unsafe(self):
        assert velocity_unsafe_overapprox(np.array([0, 0, 0.3, 0.0]), 8)

    def test_overapproximates_exact_constraint(self):
        # no false negatives: every exact violation is flagged
        rng = np.random.default_rng(3)
        s = np.empty((100_000, 4))
        s[:, :2] = rng.uniform(-15, 15, size=(100_000, 2))
        s[:, 2:] = rng.uniform(-0.6, 0.6, size=(100_000, 2))
        speed = np.hypot(s[:, 2], s[:, 3])
        radius = np.hypot(s[:, 0], s[:, 1])
        exact_violation = speed > 0.2 + 2 * MEAN_MOTION * radius
        flagged = region_contains(
            VelocityUnsafeOverapprox(8, SPACECRAFT_LAYOUT), s
        )
        assert not np.any(exact_violation & ~flagged)


class TestRegions:
    def test_box_membership(self):
        box = Box(BoxRegion([-1, -1, -1, -1], [1, 1, 1, 1]))
        assert region_contains(box, np.zeros(4))
        assert not region_contains(box, np.array([2.0, 0, 0, 0]))

    def test_complement_box_membership(self):
        comp = ComplementBox(BoxRegion([-1, -1, -1, -1], [1, 1, 1, 1]))
        assert not region_contains(comp, np.zeros(4))
        assert region_contains(comp, np.array([2.0, 0, 0, 0]))
        # the boundary belongs to the box, not its complement
        assert not region_contains(comp, np.array([1.0, 0, 0, 0]))

    def test_union_matches_set_algebra(self):
        rng = np.random.default_rng(5)
        a = Box(BoxRegion([-1, -1], [0.5, 0.5]))
        b = Box(BoxRegion([0, 0], [1, 1]))
        pts = rng.uniform(-1.5, 1.5, size=(1000, 2))
        union = region_contains(Union((a, b)), pts)
        expected = region_contains(a, pts) | region_contains(b, pts)
        assert np.array_equal(union, expected)
        inter = region_contains(Intersection((a, b)), pts)
        assert np.array_equal(inter, region_contains(a, pts) & region_contains(b, pts))
        comp = region_contains(Complement(a), pts)
        assert np.array_equal(comp, ~region_contains(a, pts))

    def test_cert_sublevel_evaluates_network(self):
        net = nn.init([2, 8, 1], seed=0)
        node = CertSublevel(net, threshold=0.5)
        pts = np.random.default_rng(1).normal(size=(50, 2))
        expected = nn.forward(net, pts)[:, 0] <= 0.5
        assert np.array_equal(region_contains(node, pts), expected)

    def test_dangling_certificate_raises(self):
        node = CertSublevel(None, threshold=0.5, name="stage3")
        with pytest.raises(DanglingCertificateError):
            region_contains(node, np.zeros(2))


class TestSampleRegion:
    def test_samples_land_inside(self):
        box = Box(BoxRegion([-1, -1], [1, 1]))
        bounds = BoxRegion([-2, -2], [2, 2])
        pts = sample_region(box, bounds, 500, seed=0)
        assert pts.shape == (500, 2)
        assert np.all(region_contains(box, pts))

    def test_seed_determinism(self):
        task = make_surrogate_task(1.0)
        a = sample_region(task.unsafe, task.domain, 100, seed=9)
        b = sample_region(task.unsafe, task.domain, 100, seed=9)
        assert np.array_equal(a, b)

    def test_budget_exhaustion_names_region(self):
        # an empty intersection can never produce samples
        empty = Intersection(
            (Box(BoxRegion([-1, -1], [0, 0])), Box(BoxRegion([0.5, 0.5], [1, 1])))
        )
        bounds = BoxRegion([-2, -2], [2, 2])
        with pytest.raises(RegionSamplingError):
            sample_region(empty, bounds, 10, seed=0, max_attempts=5000)

    def test_acceptance_rate_tracks_volume(self):
        # Monte-Carlo oracle with an independent seed estimates the volume
        task = make_surrogate_task(1.0)
        from rwacert.training import legal_sampling_region

        legal = legal_sampling_region(task)
        rng = np.random.default_rng(123)
        probe = task.domain.sample(rng, 100_000)
        volume_ratio = float(np.mean(region_contains(legal, probe)))

        accepted = 0
        attempts = 100_000
        rng2 = np.random.default_rng(456)
        pts = task.domain.sample(rng2, attempts)
        accepted = int(np.sum(region_contains(legal, pts)))
        rate = accepted / attempts
        assert abs(rate - volume_ratio) < 0.05 * max(volume_ratio, 1e-9) + 0.01


class TestDockingTask:
    def test_region_layout_follows_half_width(self):
        task = make_docking_task(2.0)
        # initial positions live in [-2, 2]^2
        assert region_contains(task.initial, np.array([2.0, -2.0, 0, 0]))
        assert not region_contains(task.initial, np.array([2.2, 0, 0, 0]))
        # outer unsafe boundary sits at 3
        assert region_contains(task.unsafe, np.array([3.1, 0, 0, 0]))
        assert not region_contains(task.unsafe, np.array([2.9, 0, 0, 0]))

    def test_origin_in_goal_not_unsafe(self):
        task = make_docking_task(2.0)
        origin = np.zeros(4)
        assert region_contains(task.goal, origin)
        assert not region_contains(task.unsafe, origin)

    def test_intermediate_band_in_neither(self):
        task = make_docking_task(2.0)
        s = np.array([2.5, 0, 0, 0])
        assert not region_contains(task.initial, s)
        assert not region_contains(task.unsafe, s)

    def test_initial_and_goal_disjoint_from_unsafe(self):
        for a in (1.0, 2.0, 4.0):
            task = make_docking_task(a)
            init_pts = sample_region(task.initial, task.domain, 2000, seed=1)
            assert not np.any(region_contains(task.unsafe, init_pts))
            goal_pts = sample_region(task.goal, task.domain, 2000, seed=2)
            assert not np.any(region_contains(task.unsafe, goal_pts))

    def test_half_width_precondition(self):
        with pytest.raises(ValueError):
            make_docking_task(0.5)

    def test_surrogate_mirrors_structure(self):
        task = make_surrogate_task(1.0)
        assert task.dim == 2
        assert region_contains(task.goal, np.zeros(2))
        assert region_contains(task.unsafe, np.array([1.8, 0.25]))  # too fast
        assert region_contains(task.unsafe, np.array([2.1, 0.0]))  # too far
        assert not region_contains(task.unsafe, np.array([1.8, 0.1]))


class TestRegionSerialization:
    def test_round_trip_all_node_kinds(self):
        net = nn.init([4, 6, 1], seed=2)
        region = Union(
            (
                Intersection(
                    (
                        Box(BoxRegion([-1, -1, -np.inf, -np.inf], [1, 1, np.inf, np.inf])),
                        Complement(VelocityUnsafeOverapprox(8, SPACECRAFT_LAYOUT)),
                    )
                ),
                ComplementBox(BoxRegion([-3, -3, -1, -1], [3, 3, 1, 1])),
                CertSublevel(net, threshold=1.0, name="v0"),
            )
        )
        doc = region_to_dict(region)
        back = region_from_dict(doc)
        assert regions_equal(region, back)
        pts = np.random.default_rng(0).uniform(-4, 4, size=(500, 4))
        assert np.array_equal(region_contains(region, pts), region_contains(back, pts))

    def test_named_reference_resolution(self):
        net = nn.init([2, 4, 1], seed=0)
        region = CertSublevel(net, threshold=0.5, name="stage0")
        doc = region_to_dict(region, inline_networks=False)
        assert "network" not in doc
        unresolved = region_from_dict(doc)
        assert unresolved.net is None
        resolved = region_from_dict(doc, networks={"stage0": net})
        assert resolved.net is not None
        assert regions_equal(region, resolved)

    def test_task_round_trip(self):
        from rwacert.geometry import task_from_dict, task_to_dict

        task = make_docking_task(3.0)
        back = task_from_dict(task_to_dict(task))
        assert regions_equal(task.initial, back.initial)
        assert regions_equal(task.goal, back.goal)
        assert regions_equal(task.unsafe, back.unsafe)
        assert task.domain.equals(back.domain)
        assert back.layout == task.layout
