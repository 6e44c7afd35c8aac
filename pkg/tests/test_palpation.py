import warnings

import numpy as np
import pytest

from minsight import palpation as pp
from minsight.palpation import (
    LUMP_DIAMETERS,
    PressTrajectory,
    SampleSpec,
    depth_profile,
    gate,
    make_trajectories,
    split_trajectories,
    synth_press,
    task_label,
    train_classifier,
)


def peak(traj):
    return float(np.linalg.norm(traj.maps.sum(axis=1), axis=1).max())


def test_sample_spec_contract():
    assert LUMP_DIAMETERS == (None, 6.5, 9.5, 12.5)
    with pytest.raises(ValueError):
        SampleSpec(lump_diameter=7.0)
    with pytest.raises(ValueError):
        SampleSpec(lump_diameter=6.5, multiplier=1.0)
    assert [SampleSpec(lump_diameter=d).label for d in LUMP_DIAMETERS] == [0, 1, 2, 3]


def test_depth_profile():
    d = depth_profile()
    assert len(d) >= 20 and d[0] == 0
    assert np.all(np.diff(d) >= 0)
    ramp_end = int(np.argmax(d))
    assert np.all(np.diff(d[: ramp_end + 1]) > 0) and np.all(d[ramp_end:] == d.max())
    with pytest.raises(ValueError):
        depth_profile(ramp_steps=10, hold_steps=5)


def test_influence_gradient_matches_fd():
    s = SampleSpec(lump_diameter=9.5)
    xy = np.array([3.0, -2.0])
    _, g = s.influence(xy, 2.0)
    h = 1e-6
    fd = [(s.influence(xy + h * e, 2.0)[0] - s.influence(xy - h * e, 2.0)[0]) / (2 * h) for e in np.eye(2)]
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-12)


def test_no_lump_is_plain_stiffness(surface, nodes):
    d = depth_profile()
    for pos in ([0.0, 0.0], [8.0, -9.0]):
        t = synth_press(SampleSpec(), pos, d, nodes, surface)
        np.testing.assert_allclose(t.forces[:, 2], -SampleSpec().k_b * d, atol=1e-12)
        np.testing.assert_allclose(t.forces[:, :2], 0, atol=1e-12)
        np.testing.assert_allclose(t.maps.sum(axis=1), t.forces, atol=1e-9)


def test_above_lump_stiffer(surface, nodes):
    d = depth_profile()
    spec = SampleSpec(lump_diameter=12.5, extent=50.0)
    above = synth_press(spec, [0.0, 0.0], d, nodes, surface)
    away = synth_press(spec, [20.0, 0.0], d, nodes, surface)
    assert peak(above) > peak(away)


def test_shear_points_away_from_lump(surface, nodes):
    spec = SampleSpec(lump_diameter=9.5)
    f = pp.press_force(spec, [4.0, 3.0], 2.0)
    # sensor frame flips y: world shear direction is (fx, -fy)
    world = np.array([f[0], -f[1]])
    assert world @ np.array([4.0, 3.0]) > 0 and f[2] < 0


def test_outside_extent_raises(surface, nodes):
    with pytest.raises(ValueError):
        synth_press(SampleSpec(), [10.5, 0.0], depth_profile(), nodes, surface)


def test_deterministic(surface, nodes):
    a = make_trajectories("binary", 3, nodes, surface, seed=5)
    b = make_trajectories("binary", 3, nodes, surface, seed=5)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.maps, y.maps)
        np.testing.assert_array_equal(x.position, y.position)
    labels = [task_label(t, "binary") for t in a]
    assert labels == [0, 0, 0, 1, 1, 1]
    assert {t.spec.lump_diameter for t in a[3:]} == {6.5, 9.5, 12.5}


def fake_traj(totals, n_nodes=4):
    maps = np.zeros((len(totals), n_nodes, 3))
    maps[:, 0, 2] = totals
    return PressTrajectory(SampleSpec(), np.zeros(2), np.zeros(len(totals)), maps.sum(axis=1), maps)


def test_gate_threshold_contract():
    t = fake_traj([0, 0, 0, 0.31, 0.29, 0.5])
    np.testing.assert_array_equal(gate(t), [3, 5])
    # early steps are dropped whatever their force
    np.testing.assert_array_equal(gate(fake_traj([1, 1, 1, 1])), [3])
    with pytest.raises(ValueError):
        gate(t, threshold=0)


def test_gate_all_zero_warns():
    with pytest.warns(UserWarning):
        assert len(gate(fake_traj(np.zeros(30)))) == 0


def test_gate_monotone():
    rng = np.random.default_rng(0)
    t = fake_traj(rng.uniform(0, 2, 40))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        counts = [len(gate(t, th)) for th in np.linspace(0.01, 2.5, 60)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_split_trajectory_disjoint_and_stratified(surface, nodes):
    trajs = make_trajectories("multi", 10, nodes, surface, seed=1, depths=depth_profile(ramp_steps=15, hold_steps=5))
    for seed in range(20):
        tr, te = split_trajectories(trajs, "multi", 0.25, seed)
        assert not set(tr) & set(te)
        assert sorted(tr + te) == list(range(len(trajs)))
        per_class = np.bincount([trajs[i].label for i in te], minlength=4)
        assert len(set(per_class.tolist())) == 1 and per_class[0] > 0


def test_separability(surface, nodes):
    trajs = make_trajectories("multi", 30, nodes, surface, seed=2)
    none = np.array([peak(t) for t in trajs if t.label == 0])
    big = np.array([peak(t) for t in trajs if t.label == 3])
    pooled = np.sqrt(0.5 * (none.var(ddof=1) + big.var(ddof=1)))
    assert (big.mean() - none.mean()) >= 3 * pooled


def test_classifier_errors(surface, nodes):
    d = depth_profile(ramp_steps=15, hold_steps=5)
    few = make_trajectories("binary", 5, nodes, surface, seed=0, depths=d)
    with pytest.raises(ValueError, match="at least 10"):
        train_classifier(few, "binary", epochs=1)
    trajs = make_trajectories("binary", 10, nodes, surface, seed=0, depths=d)
    # every lump press ends up unusable, so class 1 vanishes from training
    for t in trajs:
        if t.label:
            t.maps[:] = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(ValueError, match="absent"):
            train_classifier(trajs, "binary", epochs=1)


def test_classifier_binary_small(surface, nodes, tmp_path):
    trajs = make_trajectories("binary", 12, nodes, surface, seed=3)
    a = train_classifier(trajs, "binary", epochs=30)
    b = train_classifier(trajs, "binary", epochs=30)
    assert a.accuracy == b.accuracy and np.array_equal(a.confusion, b.confusion)
    assert a.confusion.sum() == a.n_test
    assert a.accuracy > 0.8 and a.chance == 0.5
    a.confusion_csv(str(tmp_path / "c.csv"))
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "true\\pred,0,1"
    pp.force_traces_csv(trajs, str(tmp_path / "f.csv"))
    assert len((tmp_path / "f.csv").read_text().splitlines()) == 1 + 24 * 30
    mean, runs = pp.permutation_control(trajs, "binary", n_perm=2, epochs=5)
    assert len(runs) == 2 and mean == pytest.approx(np.mean([r.accuracy for r in runs]))
