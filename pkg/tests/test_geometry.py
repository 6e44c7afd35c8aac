import numpy as np
import pytest

from minsight.geometry import (
    FingertipSurface,
    SamplingError,
    build_neighbor_graph,
    build_surface,
    nearest_neighbor_distances,
    sample_nodes,
    surface_point,
)


def test_build_surface_dimensions(surface):
    assert surface.radius == 11.0  # 22 mm diameter
    assert surface.cap_area == pytest.approx(2 * np.pi * 121, rel=1e-12)
    assert surface.cap_area == pytest.approx(760.265, abs=1e-3)
    # height solved from the area equation, independently recomputed here
    h = (1740.0 - 2 * np.pi * 11**2) / (2 * np.pi * 11)
    assert h == pytest.approx(14.1754, abs=1e-4)
    assert surface.cyl_height == pytest.approx(h, rel=1e-12)
    assert surface.total_area == pytest.approx(1740.0, abs=1e-6)


def test_build_surface_rejects_small_area():
    with pytest.raises(ValueError):
        build_surface(sensing_area=100.0)


def test_total_area_matches_parts():
    s = FingertipSurface(5.0, 3.0)
    assert s.total_area == pytest.approx(2 * np.pi * 25 + 2 * np.pi * 5 * 3, rel=1e-12)


def test_surface_point_poles_and_rim(surface):
    p, n = surface_point(surface, 1.234, 1.0)
    np.testing.assert_allclose(p, [0, 0, surface.cyl_height + 11], atol=1e-12)
    np.testing.assert_allclose(n, [0, 0, 1], atol=1e-12)
    p, n = surface_point(surface, 0.0, 0.0)
    np.testing.assert_allclose(p, [11, 0, 0], atol=1e-12)
    np.testing.assert_allclose(n, [1, 0, 0], atol=1e-12)
    p, n = surface_point(surface, np.pi / 2, 0.3)
    np.testing.assert_allclose(n, [0, 1, 0], atol=1e-12)


@pytest.mark.parametrize("u,t", [(-0.1, 0.5), (2 * np.pi, 0.5), (0.0, -0.01), (0.0, 1.01)])
def test_surface_point_out_of_range(surface, u, t):
    with pytest.raises(ValueError):
        surface_point(surface, u, t)


def test_normals_match_finite_differences(surface):
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(200):
        u = rng.uniform(0.01, 2 * np.pi - 0.01)
        t = rng.uniform(0.01, 0.99)
        p, n = surface_point(surface, u, t)
        du = (surface_point(surface, u + h, t)[0] - surface_point(surface, u - h, t)[0]) / (2 * h)
        dt = (surface_point(surface, u, t + h)[0] - surface_point(surface, u, t - h)[0]) / (2 * h)
        fd = np.cross(du, dt)
        fd /= np.linalg.norm(fd)
        angle = np.arccos(np.clip(abs(fd @ n), -1, 1))
        assert angle < 1e-5
        assert abs(np.linalg.norm(n) - 1) < 1e-12
        assert fd @ (p - [0, 0, min(p[2], surface.cyl_height)]) > 0  # outward


def test_project_returns_unit_normals(surface, rng):
    pts = rng.normal(size=(500, 3)) * 10 + [0, 0, 12]
    pos, nrm = surface.project(pts)
    assert np.all(np.abs(np.linalg.norm(nrm, axis=1) - 1) < 1e-12)
    pos2, _ = surface.project(pos)
    np.testing.assert_allclose(pos, pos2, atol=1e-12)


def test_sample_uniform_area_fractions(surface):
    pts = surface.sample_uniform(np.random.default_rng(1), 200000)
    frac_cap = np.mean(pts[:, 2] > surface.cyl_height)
    assert frac_cap == pytest.approx(surface.cap_area / surface.total_area, abs=0.005)


def test_nodes_count_area_and_spacing(surface, nodes):
    assert len(nodes) == 1350
    assert nodes.area_weights.sum() == pytest.approx(1740.0, rel=0.005)
    nn = nearest_neighbor_distances(nodes.positions)
    assert np.mean((nn >= 0.7) & (nn <= 1.6)) >= 0.99
    # hex spacing for A/n = 1.29 mm^2 is about 1.22 mm
    assert 0.9 <= nn.mean() <= 1.3
    pos, _ = surface.project(nodes.positions)
    np.testing.assert_allclose(pos, nodes.positions, atol=1e-9)


def test_nodes_deterministic(surface, nodes):
    again = sample_nodes(surface, 1350, 7)
    assert np.array_equal(again.positions, nodes.positions)
    assert np.array_equal(again.normals, nodes.normals)


def test_four_nodes_are_spread(surface):
    ns = sample_nodes(surface, 4, 0)
    d = np.linalg.norm(ns.positions[:, None] - ns.positions[None], axis=2)
    assert np.all(d[np.triu_indices(4, 1)] > 5.0)


def test_sample_nodes_rejects_tiny_n(surface):
    with pytest.raises(ValueError):
        sample_nodes(surface, 3, 0)


def test_sampling_failure_is_explicit(surface):
    with pytest.raises(SamplingError):
        sample_nodes(FingertipSurface(0.5, 0.1), 5000, 0, max_retries=1)


def test_neighbor_graph(nodes):
    g = build_neighbor_graph(nodes, 6)
    deg = g.degrees()
    assert deg.min() >= 6 and deg.max() <= 12
    assert g.is_connected()
    assert np.all(g.edges[:, 0] < g.edges[:, 1])
    adj = g.adjacency()
    assert (adj - adj.T).nnz == 0


def test_neighbor_graph_four_nodes_complete(surface):
    g = build_neighbor_graph(sample_nodes(surface, 4, 0), 3)
    assert len(g.edges) == 6


def test_neighbor_graph_rejects_small_k(nodes):
    with pytest.raises(ValueError):
        build_neighbor_graph(nodes, 2)
