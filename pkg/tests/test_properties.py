"""Property-based checks of the cross-module invariants."""
import itertools
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from minsight.assignment import solve_assignment
from minsight.control import Arm3R, ServoGains, ServoState, servo_step
from minsight.dataset import NormStats, fit_norm
from minsight.embedding import build_layout, image_to_map, map_to_image, weighted_project
from minsight.geometry import surface_point
from minsight.inference import area_resize
from minsight.palpation import PressTrajectory, SampleSpec, gate
from minsight.simulator import ContactState, deform, ground_truth_map

FIXTURES = settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
finite = dict(allow_nan=False, allow_infinity=False)


@st.composite
def cost_matrices(draw):
    r = draw(st.integers(1, 5))
    c = draw(st.integers(r, 6))
    return draw(arrays(np.float64, (r, c), elements=st.floats(-50, 50, **finite)))


@settings(max_examples=200, deadline=None)
@given(cost_matrices())
def test_assignment_is_optimal(cost):
    cols, total = solve_assignment(cost)
    r, c = cost.shape
    assert len(set(cols.tolist())) == r
    assert total == pytest.approx(cost[np.arange(r), cols].sum(), abs=1e-9)
    best = min(sum(cost[i, p[i]] for i in range(r)) for p in itertools.permutations(range(c), r))
    assert total <= best + 1e-9


@settings(max_examples=25, deadline=None)
@given(n=st.integers(3, 60), seed=st.integers(0, 10**6), alpha=st.sampled_from([0.0, 0.0005, 0.1]))
def test_layout_injective_complete(n, seed, alpha):
    pts = np.random.default_rng(seed).normal(size=(n, 3)) * 5
    pts[:, 2] = np.abs(pts[:, 2])
    lay = build_layout(pts, grid_w=8, grid_h=8, alpha=alpha)
    flat = lay.rows * lay.grid_w + lay.cols
    assert len(np.unique(flat)) == n == lay.occupied_mask.sum()
    f = np.random.default_rng(seed + 1).normal(size=(n, 3))
    np.testing.assert_array_equal(image_to_map(map_to_image(f, lay), lay), f)


@given(
    xyz=arrays(np.float64, (5, 3), elements=st.floats(-20, 20, **finite)),
    alpha=st.floats(0, 1, **finite),
)
def test_weighted_project_shrinks(xyz, alpha):
    xyz[:, 2] = np.abs(xyz[:, 2])
    zmax = max(1.0, xyz[:, 2].max())
    xy = weighted_project(xyz, alpha, zmax)
    assert np.all(np.linalg.norm(xy, axis=1) <= np.linalg.norm(xyz[:, :2], axis=1) + 1e-12)


@given(u=st.floats(0, 2 * np.pi, exclude_max=True, **finite), t=st.floats(0.01, 0.99, **finite))
def test_surface_normal_matches_finite_differences(surface, u, t):
    h = 1e-6
    p, n = surface_point(surface, u, t)
    du = (surface_point(surface, (u + h) % (2 * np.pi), t)[0] - surface_point(surface, (u - h) % (2 * np.pi), t)[0]) / (2 * h)
    dt = (surface_point(surface, u, t + h)[0] - surface_point(surface, u, t - h)[0]) / (2 * h)
    assert abs(n @ du) < 1e-5 * np.linalg.norm(du)
    assert abs(n @ dt) < 1e-5 * np.linalg.norm(dt)
    assert np.linalg.norm(n) == pytest.approx(1.0)


@st.composite
def contacts(draw, nodes):
    i = draw(st.integers(0, len(nodes) - 1))
    f = draw(arrays(np.float64, 3, elements=st.floats(-2.8, 2.8, **finite)))
    rad = draw(st.floats(1.5, 8.0, **finite))
    return ContactState(nodes.positions[i], f, rad)


@FIXTURES
@given(data=st.data())
def test_force_map_conserves_force(nodes, data):
    c = data.draw(contacts(nodes))
    fm = ground_truth_map(nodes, c)
    assert np.all(np.abs(fm.sum(axis=0) - c.force) <= 1e-9)


@FIXTURES
@given(data=st.data())
def test_deformation_local_and_finite(surface, nodes, data):
    c = data.draw(contacts(nodes))
    d = deform(surface, nodes, c)
    assert np.all(np.isfinite(d))
    far = np.linalg.norm(nodes.positions - c.node_center, axis=1) > 6 * 0.6 * c.indenter_radius
    assert np.abs(d[far]).max(initial=0.0) < 1e-6 * (1 + np.abs(d).max())


@given(
    x=arrays(np.float64, (12, 3), elements=st.floats(-1e3, 1e3, **finite)),
    mode=st.sampled_from(["minmax", "zscore"]),
)
def test_norm_round_trip(x, mode):
    assume(np.all(np.ptp(x, axis=0) > 1e-3))
    s = fit_norm(x, mode)
    np.testing.assert_allclose(s.invert(s.apply(x)), x, rtol=1e-9, atol=1e-9 * np.abs(x).max())
    s2 = NormStats.from_dict(s.to_dict())
    np.testing.assert_array_equal(s2.apply(x), s.apply(x))
    if mode == "minmax":
        y = s.apply(x)
        assert y.min() >= -1 - 1e-12 and y.max() <= 1 + 1e-12


@given(
    img=arrays(np.float64, (12, 18, 2), elements=st.floats(-5, 5, **finite)),
    w=st.integers(1, 18),
    h=st.integers(1, 12),
)
def test_area_resize_preserves_mean(img, w, h):
    out = area_resize(img, w, h)
    assert out.shape == (h, w, 2)
    np.testing.assert_allclose(out.mean(axis=(0, 1)), img.mean(axis=(0, 1)), atol=1e-9)
    assert out.min() >= img.min() - 1e-9 and out.max() <= img.max() + 1e-9


@given(
    totals=arrays(np.float64, st.integers(4, 40), elements=st.floats(0, 3, **finite)),
    a=st.floats(0.01, 3, **finite),
    b=st.floats(0.01, 3, **finite),
)
def test_gate_monotone_in_threshold(totals, a, b):
    lo, hi = min(a, b), max(a, b)
    maps = np.zeros((len(totals), 2, 3))
    maps[:, 1, 0] = totals
    t = PressTrajectory(SampleSpec(), np.zeros(2), np.zeros(len(totals)), maps.sum(axis=1), maps)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        k_lo, k_hi = gate(t, lo), gate(t, hi)
    assert set(k_hi) <= set(k_lo)
    assert np.all(k_lo >= 3)


@given(
    xy=arrays(np.float64, 2, elements=st.floats(-10, 10, **finite)),
    d=st.floats(0, 5, **finite),
    dia=st.sampled_from([6.5, 9.5, 12.5]),
)
def test_lump_stiffness_bounds(xy, d, dia):
    s = SampleSpec(lump_diameter=dia)
    k = s.stiffness(xy, d)
    assert s.k_b <= k <= s.k_b * s.multiplier
    assert SampleSpec().stiffness(xy, d) == SampleSpec().k_b


@given(
    meas=arrays(np.float64, (20, 3), elements=st.floats(-5, 5, **finite)),
    ki=st.floats(0, 50, **finite),
)
def test_integral_bounded_by_clamp(meas, ki):
    arm = Arm3R()
    g = ServoGains(ki=(ki,) * 3, normal_only=False)
    s = ServoState()
    for m in meas:
        tau, _ = servo_step(arm, (0.0, 0.5, 1.0), g, m, [0, 0, 1.0], 0.01, s)
        assert np.all(np.abs(s.integral) <= g.clamp)
        assert np.all(np.abs(tau) <= np.asarray(arm.torque_limit))
