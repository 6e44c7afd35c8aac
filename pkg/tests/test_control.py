import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from minsight.control import (
    DEFAULT_THETA0,
    Arm3R,
    OracleSensor,
    ServoGains,
    ServoState,
    StickSlip,
    WorldState,
    dynamics_step,
    fk,
    initial_world,
    is_singular,
    jacobian,
    kinetic_energy,
    run_episode,
    sensor_rotation,
    servo_step,
    settle_time,
)

ARM = Arm3R()


def random_configs(n, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(np.asarray(ARM.lower), np.asarray(ARM.upper), (n, 3))


def test_jacobian_matches_central_differences():
    eps = 1e-6
    worst = 0.0
    for th in random_configs(1000):
        th = np.clip(th, np.asarray(ARM.lower) + eps, np.asarray(ARM.upper) - eps)
        J = jacobian(ARM, th)
        fd = np.empty((3, 3))
        for j in range(3):
            d = np.zeros(3)
            d[j] = eps
            fd[:, j] = (fk(ARM, th + d) - fk(ARM, th - d)) / (2 * eps)
        # relative to the largest entry: positions are in mm (hundreds)
        worst = max(worst, np.abs(J - fd).max() / max(1.0, np.abs(J).max()))
    assert worst < 1e-6


def test_fully_extended_reach():
    np.testing.assert_allclose(fk(ARM, [0, 0, 0]), [sum(ARM.links), 0, 0], atol=1e-12)
    np.testing.assert_allclose(fk(ARM, [np.pi / 2, 0, 0]), [0, sum(ARM.links), 0], atol=1e-9)


def test_singularities():
    # straight second and third links: no motion along the finger
    assert is_singular(ARM, [0.3, 0.2, 0.0])
    assert not is_singular(ARM, DEFAULT_THETA0)


def test_sensor_rotation_orthonormal():
    for th in random_configs(50, 1):
        R = sensor_rotation(ARM, th)
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0)
        # z axis parallel to the last link
        base3 = fk(ARM, th) - ARM.links[2] * R[:, 2]
        p2 = fk(Arm3R(links=(ARM.links[0], ARM.links[1], 0.0)), th)
        np.testing.assert_allclose(base3, p2, atol=1e-9)


def test_limits_enforced():
    with pytest.raises(ValueError):
        fk(ARM, [0, 2.0, 0])
    with pytest.raises(ValueError):
        jacobian(ARM, [np.nan, 0, 0])


def test_servo_step_zero_error_is_feedforward():
    th = np.array(DEFAULT_THETA0)
    n = np.array([0.0, 0.6, 0.8])
    g = ServoGains()
    st_ = ServoState()
    tau, e = servo_step(ARM, th, g, g.f_target * n, n, 0.01, st_)
    np.testing.assert_allclose(e, 0, atol=1e-15)
    np.testing.assert_allclose(tau, jacobian(ARM, th).T @ (g.f_target * n))
    np.testing.assert_allclose(st_.integral, 0)


def test_servo_integral_accumulates_and_clamps():
    th = np.array(DEFAULT_THETA0)
    n = np.array([0.0, 0.0, 1.0])
    g = ServoGains(kp=(0, 0, 0), feedforward=False)
    s = ServoState()
    servo_step(ARM, th, g, np.zeros(3), n, 0.01, s)
    np.testing.assert_allclose(s.integral, [0, 0, 2.0 * 1.0 * 0.01])
    for _ in range(1000):
        servo_step(ARM, th, g, np.zeros(3), n, 0.01, s)
    assert s.integral[2] == pytest.approx(g.clamp)


def test_servo_error_projection():
    th = np.array(DEFAULT_THETA0)
    n = np.array([0.0, 0.0, 1.0])
    meas = np.array([0.3, -0.2, 0.5])
    _, e = servo_step(ARM, th, ServoGains(), meas, n, 0.01, ServoState())
    np.testing.assert_allclose(e, [0, 0, 0.5])
    _, e = servo_step(ARM, th, ServoGains(normal_only=False), meas, n, 0.01, ServoState())
    np.testing.assert_allclose(e, [-0.3, 0.2, 0.5])


def test_servo_torque_limit():
    g = ServoGains(f_target=1e4)
    tau, _ = servo_step(ARM, np.array(DEFAULT_THETA0), g, np.zeros(3), [0, 0, 1.0], 0.01, ServoState())
    assert np.all(np.abs(tau) <= np.asarray(ARM.torque_limit))


def test_servo_nan_holds_previous_torque():
    th = np.array(DEFAULT_THETA0)
    n = np.array([0.0, 0.0, 1.0])
    g = ServoGains()
    s = ServoState()
    tau0, _ = servo_step(ARM, th, g, np.zeros(3), n, 0.01, s)
    integral = s.integral.copy()
    tau1, e = servo_step(ARM, th, g, [np.nan, 0, 0], n, 0.01, s)
    assert s.fault and np.all(np.isnan(e))
    np.testing.assert_array_equal(tau1, tau0)
    np.testing.assert_array_equal(s.integral, integral)
    servo_step(ARM, th, g, np.zeros(3), n, 0.01, s)
    assert not s.fault


def test_gain_validation():
    with pytest.raises(ValueError):
        ServoGains(kp=(-1, 0, 0))
    with pytest.raises(ValueError):
        ServoGains(clamp=0)
    with pytest.raises(ValueError):
        WorldState(center0=np.zeros(3), dt=0.05)
    with pytest.raises(ValueError):
        WorldState(center0=np.zeros(3), trajectory="circle")


@settings(max_examples=30, deadline=None)
@given(
    th=st.tuples(*(st.floats(-1.0, 1.0) for _ in range(3))),
    qd=st.tuples(*(st.floats(-3.0, 3.0) for _ in range(3))),
)
def test_passivity_without_contact(th, qd):
    theta, v = np.array(th), np.array(qd)
    e_prev = kinetic_energy(ARM, v)
    for _ in range(200):
        theta, v = dynamics_step(ARM, theta, v, np.zeros(3), np.zeros(3), 5e-4)
        e = kinetic_energy(ARM, v)
        assert e <= e_prev + 1e-12
        e_prev = e


def test_contact_model():
    w = WorldState(center0=np.array([0.0, 0, 0]), object_radius=8, sensor_radius=11, k_w=1.0)
    f, n, pen = w.contact(np.array([-18.0, 0, 0]), 0.0)
    assert pen == pytest.approx(1.0)
    np.testing.assert_allclose(n, [1, 0, 0])
    np.testing.assert_allclose(f, [1, 0, 0])
    f, _, pen = w.contact(np.array([-25.0, 0, 0]), 0.0)
    assert pen < 0 and not f.any()


def test_stick_slip_cap():
    w = WorldState(center0=np.zeros(3), k_w=1.0, mu=0.5, k_t=1.0)
    c = StickSlip(w)
    f, n, pen = c(np.array([0.0, 0, -18.0]), 0.0)  # 1 mm penetration, anchors here
    np.testing.assert_allclose(f, [0, 0, 1.0], atol=1e-12)
    # small sideways motion: elastic, drags the object along
    f, n, _ = c(np.array([0.2, 0, -18.0]), 0.0)
    ft = f - (f @ n) * n
    assert 0 < np.linalg.norm(ft) < 0.5 * (f @ n) and ft[0] > 0
    # large motion saturates at the Coulomb bound and moves the anchor
    f, n, _ = c(np.array([5.0, 0, -17.3]), 0.0)
    fn = f @ n
    assert np.linalg.norm(f - fn * n) == pytest.approx(0.5 * fn)
    # separation resets
    f, _, pen = c(np.array([0.0, 0, -30.0]), 0.0)
    assert pen < 0 and c.anchor is None and not f.any()


@pytest.fixture(scope="module")
def hold_trace():
    th0 = np.array(DEFAULT_THETA0)
    return run_episode(ARM, initial_world(ARM, th0, "hold"), ServoGains(), OracleSensor(seed=0), 12.0, th0)


def test_hold_settles_and_holds(hold_trace):
    a = hold_trace.array()
    ts = settle_time(hold_trace, 1.0)
    assert ts <= 2.0
    mag = np.linalg.norm(a[:, 7:10], axis=1)
    window = (a[:, 0] >= ts) & (a[:, 0] < ts + 10.0)
    assert a[window, 0].max() - a[window, 0].min() >= 10.0 - 0.011
    assert np.all(np.abs(mag[window] - 1.0) <= 0.1)
    assert not hold_trace.failed


def test_trace_csv(hold_trace, tmp_path):
    p = tmp_path / "t.csv"
    hold_trace.to_csv(str(p))
    lines = p.read_text().splitlines()
    assert lines[0].split(",") == list(hold_trace.COLUMNS)
    assert len(lines) == 1 + 1200


def test_episode_deterministic():
    th0 = np.array(DEFAULT_THETA0)
    runs = [run_episode(ARM, initial_world(ARM, th0, "sine"), ServoGains(), OracleSensor(seed=3), 2.0, th0).array() for _ in range(2)]
    np.testing.assert_array_equal(*runs)


def tracking_error(gains):
    th0 = np.array(DEFAULT_THETA0)
    tr = run_episode(ARM, initial_world(ARM, th0, "sine"), gains, OracleSensor(seed=0), 10.0, th0)
    a = tr.array()
    mag = np.linalg.norm(a[:, 7:10], axis=1)
    steady = a[:, 0] >= 2.0
    return float(np.abs(mag[steady] - 1.0).mean()), float(a[:, 11].mean()), tr


def test_pi_beats_feedforward_on_sine():
    pi_err, pi_contact, tr = tracking_error(ServoGains())
    ff_err, _, _ = tracking_error(ServoGains(kp=(0, 0, 0), ki=(0, 0, 0)))
    assert pi_contact >= 0.95 and not tr.failed
    assert pi_err < ff_err


def test_lost_contact_marks_failure():
    th0 = np.array(DEFAULT_THETA0)
    world = initial_world(ARM, th0, "hold", preload=-5.0)  # object out of reach
    tr = run_episode(ARM, world, ServoGains(f_target=0.0, kp=(0, 0, 0), ki=(0, 0, 0)), OracleSensor(seed=0), 1.5, th0)
    assert tr.failed and tr.array()[:, 11].sum() == 0
