import numpy as np
import pytest

from minsight.embedding import (
    build_layout,
    image_to_map,
    load_layout,
    map_to_image,
    save_layout,
    smoothness_score,
    weighted_project,
)
from minsight.geometry import NodeSet, build_neighbor_graph, sample_nodes


def test_weighted_project_cases():
    np.testing.assert_array_equal(weighted_project([3.0, -2.0, 7.0], 0.0, 25.0), [3.0, -2.0])
    np.testing.assert_array_equal(weighted_project([3.0, -2.0, 0.0], 0.3, 25.0), [3.0, -2.0])
    # 11 * (1 - 0.0005) at the top of the surface
    np.testing.assert_allclose(weighted_project([11.0, 0.0, 25.0], 0.0005, 25.0), [10.9945, 0.0], atol=1e-12)
    with pytest.raises(ValueError):
        weighted_project([1.0, 0.0, 0.0], 0.1, 0.0)


def test_weighted_project_accepts_node(nodes):
    n = nodes.node(5)
    np.testing.assert_array_equal(weighted_project(n, 0.2, 25.0), weighted_project(n.position, 0.2, 25.0))


def test_full_layout_valid(layout):
    assert layout.n_nodes == 1350
    assert layout.grid_w == layout.grid_h == 40
    assert int((~layout.occupied_mask).sum()) == 250
    flat = layout.rows * 40 + layout.cols
    assert len(np.unique(flat)) == 1350


def test_layout_deterministic(nodes, layout):
    again = build_layout(nodes)
    assert np.array_equal(again.rows, layout.rows) and np.array_equal(again.cols, layout.cols)


def test_four_rim_nodes_take_quadrants():
    ang = np.deg2rad([45, 135, 225, 315])
    pos = np.column_stack([11 * np.cos(ang), 11 * np.sin(ang), np.zeros(4)])
    ns = NodeSet(pos, np.column_stack([np.cos(ang), np.sin(ang), np.zeros(4)]), np.ones(4))
    lay = build_layout(ns, grid_w=2, grid_h=2, alpha=0.0)
    assert sorted(zip(lay.rows.tolist(), lay.cols.tolist())) == [(0, 0), (0, 1), (1, 0), (1, 1)]
    # x>0 goes right, y>0 goes down
    assert (lay.rows[0], lay.cols[0]) == (1, 1)


def test_grid_too_small(nodes):
    with pytest.raises(ValueError):
        build_layout(nodes, grid_w=30, grid_h=40)


def test_alpha_zero_equals_unweighted(surface):
    ns = sample_nodes(surface, 200, 1)
    a = build_layout(ns, 16, 16, alpha=0.0)
    # unweighted: plain x/y of the node positions
    flat = NodeSet(ns.positions * [1, 1, 0], ns.normals, ns.area_weights)
    b = build_layout(flat, 16, 16, alpha=0.5, z_max=1.0)
    assert np.array_equal(a.rows, b.rows) and np.array_equal(a.cols, b.cols)


def test_smoothness_adjacent_layout():
    # a 10x10 patch of lattice nodes laid onto a 10x10 grid keeps neighbours adjacent
    r, c = np.mgrid[0:10, 0:10]
    pos = np.column_stack([c.ravel(), r.ravel(), np.zeros(100)]).astype(float)
    ns = NodeSet(pos, np.tile([0, 0, 1.0], (100, 1)), np.ones(100))
    lay = build_layout(ns, 10, 10, alpha=0.0)
    score = smoothness_score(lay, build_neighbor_graph(ns, 4))
    assert 1.0 <= score <= 1.5


def test_smoothness_random_assignment(nodes, layout):
    g = build_neighbor_graph(nodes, 6)
    rng = np.random.default_rng(0)
    perm = rng.permutation(1600)[:1350]
    from minsight.embedding import MapLayout

    rand = MapLayout.from_assignment(perm // 40, perm % 40, 40, 40, 0.0, 1.0)
    # Monte-Carlo mean distance between two uniform pixels of a 40x40 grid
    a = rng.integers(0, 40, (200000, 2))
    b = rng.integers(0, 40, (200000, 2))
    mc = np.hypot(*(a - b).T).mean()
    assert mc == pytest.approx(0.52 * 40, rel=0.03)
    assert smoothness_score(rand, g) == pytest.approx(mc, rel=0.05)
    assert smoothness_score(layout, g) < 0.2 * mc


def test_smoothness_mismatch(layout, surface):
    with pytest.raises(ValueError):
        smoothness_score(layout, build_neighbor_graph(sample_nodes(surface, 50, 0)))


def test_map_image_round_trip(layout, rng):
    f = rng.normal(size=(1350, 3))
    img = map_to_image(f, layout)
    assert np.array_equal(image_to_map(img, layout), f)
    assert np.all(img[~layout.occupied_mask] == 0)
    assert not map_to_image(np.zeros((1350, 3)), layout).any()


def test_single_node_force(layout):
    f = np.zeros((1350, 3))
    f[17] = [0, 0, -1.0]
    img = map_to_image(f, layout)
    assert np.count_nonzero(np.any(img != 0, axis=-1)) == 1
    np.testing.assert_array_equal(img[layout.rows[17], layout.cols[17]], [0, 0, -1.0])


def test_map_shape_errors(layout):
    with pytest.raises(ValueError):
        map_to_image(np.zeros((10, 3)), layout)
    with pytest.raises(ValueError):
        image_to_map(np.zeros((40, 41, 3)), layout)


def test_layout_file_round_trip(layout, tmp_path):
    p = tmp_path / "layout.bin"
    save_layout(layout, str(p))
    back = load_layout(str(p))
    assert np.array_equal(back.rows, layout.rows) and np.array_equal(back.cols, layout.cols)
    assert back.alpha == layout.alpha and back.pixel_pitch == layout.pixel_pitch
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(ValueError):
        load_layout(str(p))
