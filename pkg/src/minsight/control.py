"""Force servoing of a 3-DoF finger carrying the sensor.

Joint 1 yaws about the world z axis, joints 2 and 3 pitch in the vertical
plane at azimuth theta1. With the first link horizontal::

    rho = l1 + l2 cos(t2) + l3 cos(t2 + t3)
    p   = (rho cos t1, rho sin t1, -(l2 sin t2 + l3 sin(t2 + t3)))

The end-effector point is the centre of the fingertip's hemispherical cap;
the sensor's z axis runs along the last link. The controller regulates the
pressing force ``P`` the fingertip applies to the object (the negative of
the force the sensor feels)::

    e   = F_target * n - P_measured          n: unit contact normal, towards the object
    tau = J^T (F_ff + Kp e + clip(Ki int e dt, +-clamp))

By default only the component of ``e`` along ``n`` is kept: shear that the
sensor resolves poorly would otherwise wind up the integral against a
sticking contact.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .dataset import box_downsample
from .geometry import FingertipSurface, build_surface
from .simulator import FORCE_ENVELOPE, ContactState, Renderer, deform


@dataclass(frozen=True)
class Arm3R:
    links: tuple = (160.0, 160.0, 80.0)  # mm
    lower: tuple = (-np.pi, -1.5, -2.7)
    upper: tuple = (np.pi, 1.5, 2.7)
    inertia: tuple = (30.0, 15.0, 3.0)  # N mm s^2 / rad, constant diagonal
    damping: tuple = (600.0, 400.0, 80.0)  # N mm s / rad
    torque_limit: tuple = (2000.0, 2000.0, 1000.0)  # N mm

    def check(self, theta) -> np.ndarray:
        th = np.asarray(theta, dtype=float)
        if th.shape != (3,) or not np.all(np.isfinite(th)):
            raise ValueError("theta must be a finite 3-vector")
        if np.any(th < np.asarray(self.lower)) or np.any(th > np.asarray(self.upper)):
            raise ValueError(f"theta {th} outside joint limits")
        return th


def fk(arm: Arm3R, theta) -> np.ndarray:
    t1, t2, t3 = arm.check(theta)
    l1, l2, l3 = arm.links
    rho = l1 + l2 * np.cos(t2) + l3 * np.cos(t2 + t3)
    return np.array([rho * np.cos(t1), rho * np.sin(t1), -(l2 * np.sin(t2) + l3 * np.sin(t2 + t3))])


def jacobian(arm: Arm3R, theta) -> np.ndarray:
    t1, t2, t3 = arm.check(theta)
    l1, l2, l3 = arm.links
    c1, s1 = np.cos(t1), np.sin(t1)
    rho = l1 + l2 * np.cos(t2) + l3 * np.cos(t2 + t3)
    drho2 = -l2 * np.sin(t2) - l3 * np.sin(t2 + t3)
    drho3 = -l3 * np.sin(t2 + t3)
    dz2 = -(l2 * np.cos(t2) + l3 * np.cos(t2 + t3))
    dz3 = -l3 * np.cos(t2 + t3)
    return np.array(
        [
            [-rho * s1, drho2 * c1, drho3 * c1],
            [rho * c1, drho2 * s1, drho3 * s1],
            [0.0, dz2, dz3],
        ]
    )


def is_singular(arm: Arm3R, theta, tol: float = 1e-9) -> bool:
    s = np.linalg.svd(jacobian(arm, theta), compute_uv=False)
    return bool(s[-1] <= tol * s[0])


def sensor_rotation(arm: Arm3R, theta) -> np.ndarray:
    """Columns are the sensor x, y, z axes in world coordinates; z runs along the last link."""
    t1, t2, t3 = arm.check(theta)
    a = t2 + t3
    e3 = np.array([np.cos(a) * np.cos(t1), np.cos(a) * np.sin(t1), -np.sin(a)])
    e1 = np.array([-np.sin(t1), np.cos(t1), 0.0])
    return np.column_stack([e1, np.cross(e3, e1), e3])


@dataclass(frozen=True)
class ServoGains:
    kp: tuple = (0.5, 0.5, 0.5)
    ki: tuple = (2.0, 2.0, 2.0)  # 1/s
    f_target: float = 1.0  # N
    band: float = 0.2  # N
    clamp: float = 2.0  # N, bound on each component of the integral term
    feedforward: bool = True
    normal_only: bool = True  # regulate only the error component along the sensed normal

    def __post_init__(self):
        if min(self.kp) < 0 or min(self.ki) < 0:
            raise ValueError("gains must be nonnegative")
        if self.clamp <= 0:
            raise ValueError("integral clamp must be positive")


@dataclass
class ServoState:
    integral: np.ndarray = field(default_factory=lambda: np.zeros(3))  # Ki * int e dt, N
    tau: np.ndarray = field(default_factory=lambda: np.zeros(3))
    fault: bool = False


def servo_step(
    arm: Arm3R,
    theta,
    gains: ServoGains,
    measured_f,
    normal,
    dt: float,
    state: ServoState,
) -> tuple[np.ndarray, np.ndarray]:
    """One PI + feed-forward update; returns (torque, force error).

    A non-finite measurement holds the previous torque and sets ``state.fault``.
    """
    measured_f = np.asarray(measured_f, dtype=float)
    n = np.asarray(normal, dtype=float)
    if not (np.all(np.isfinite(measured_f)) and np.all(np.isfinite(n))):
        state.fault = True
        return state.tau.copy(), np.full(3, np.nan)
    state.fault = False
    target = gains.f_target * n
    e = target - measured_f
    if gains.normal_only:
        e = (e @ n) * n
    state.integral = np.clip(state.integral + np.asarray(gains.ki) * e * dt, -gains.clamp, gains.clamp)
    f_cmd = np.asarray(gains.kp) * e + state.integral
    if gains.feedforward:
        f_cmd = f_cmd + target
    tau = jacobian(arm, theta).T @ f_cmd
    lim = np.asarray(arm.torque_limit)
    state.tau = np.clip(tau, -lim, lim)
    return state.tau.copy(), e


@dataclass(frozen=True)
class WorldState:
    """Spherical target object following a time-parameterised path."""

    center0: np.ndarray
    trajectory: str = "hold"  # hold | sine
    amplitude: float = 10.0  # mm
    frequency: float = 0.2  # Hz
    direction: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    object_radius: float = 8.0  # mm
    sensor_radius: float = 11.0  # mm, contact sphere around the end-effector point
    k_w: float = 1.0  # N/mm
    mu: float = 1.0  # Coulomb bound on tangential / normal force; 0 disables friction
    k_t: float = 1.0  # N/mm, tangential stiffness while sticking
    dt: float = 0.01  # s, control period
    substeps: int = 20

    def __post_init__(self):
        if not 0 < self.dt <= 0.02:
            raise ValueError("control timestep must lie in (0, 0.02] s")
        if self.trajectory not in ("hold", "sine"):
            raise ValueError(f"unknown trajectory {self.trajectory!r}")
        d = np.asarray(self.direction, dtype=float)
        object.__setattr__(self, "direction", d / np.linalg.norm(d))
        object.__setattr__(self, "center0", np.asarray(self.center0, dtype=float))

    def center(self, t: float) -> np.ndarray:
        if self.trajectory == "hold":
            return self.center0
        return self.center0 + self.amplitude * np.sin(2 * np.pi * self.frequency * t) * self.direction

    def contact(self, p_ee: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray, float]:
        """(normal pressing force on the object, unit normal towards the object, penetration)."""
        rel = self.center(t) - p_ee
        dist = np.linalg.norm(rel)
        n = rel / dist
        pen = self.object_radius + self.sensor_radius - dist
        if pen <= 0:
            return np.zeros(3), n, pen
        return self.k_w * pen * n, n, pen


class StickSlip:
    """Tangential friction between fingertip and object.

    While in contact a spring of stiffness ``k_t`` ties the fingertip to the
    point where the contact started; its force is capped at ``mu`` times the
    normal force, and a capped spring drags its anchor along (slip).
    """

    def __init__(self, world: WorldState):
        self.world = world
        self.anchor = None  # unit vector, object centre to fingertip centre, at stick

    def __call__(self, p_ee: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray, float]:
        w = self.world
        press, n, pen = w.contact(p_ee, t)
        if pen <= 0 or w.mu <= 0:
            self.anchor = None
            return press, n, pen
        u = -n
        if self.anchor is None:
            self.anchor = u
        reach = w.object_radius + w.sensor_radius
        slip = reach * (u - self.anchor)
        slip -= (slip @ n) * n
        ft = w.k_t * slip
        cap = w.mu * np.linalg.norm(press)
        mag = np.linalg.norm(ft)
        if mag > cap:
            ft *= cap / mag
            a = u - slip * (cap / mag) / reach
            self.anchor = a / np.linalg.norm(a)
        return press + ft, n, pen


def initial_world(arm: Arm3R, theta0, trajectory="hold", preload: float = 0.2, **kw) -> WorldState:
    """Object placed on the sensor axis, already pressed ``preload`` mm into the fingertip."""
    p = fk(arm, theta0)
    axis = sensor_rotation(arm, theta0)[:, 2]
    r_obj = kw.get("object_radius", 8.0)
    r_s = kw.get("sensor_radius", 11.0)
    center = p + (r_obj + r_s - preload) * axis
    if "direction" not in kw and trajectory == "sine":
        kw["direction"] = axis
    return WorldState(center0=center, trajectory=trajectory, **kw)


class OracleSensor:
    """True pressing force and contact normal plus the test-bed noise."""

    def __init__(self, force_sigma=(0.01, 0.01, 0.02), seed: int = 0):
        self.sigma = np.asarray(force_sigma, dtype=float)
        self.rng = np.random.default_rng(seed)

    def __call__(self, arm, theta, press, normal, in_contact):
        noise = self.rng.normal(size=3) * self.sigma
        return press + noise, normal


class PipelineSensor:
    """Render the contact, run the single-head network, map the estimate to the world frame."""

    def __init__(self, net, renderer: Renderer, w: int, h: int, supersample: int, surface: FingertipSurface | None = None):
        self.net = net
        self.renderer = renderer
        self.w, self.h, self.k = w, h, supersample
        self.surface = surface or renderer.surface
        self.reference = box_downsample(renderer.reference(w * supersample, h * supersample), supersample)

    def image(self, contact: ContactState) -> np.ndarray:
        disp = deform(self.surface, self.renderer.nodes, contact)
        img = self.renderer.render(disp, self.w * self.k, self.h * self.k)
        return box_downsample(img, self.k)

    def __call__(self, arm, theta, press, normal, in_contact):
        from .inference import predict_single

        R = sensor_rotation(arm, theta)
        if in_contact:
            f_sensor = R.T @ (-press)  # force felt by the sensor, sensor frame
            mag = np.linalg.norm(f_sensor)
            if mag > FORCE_ENVELOPE:
                f_sensor *= FORCE_ENVELOPE / mag
            d = R.T @ normal
            point, _ = self.surface.project(self.surface.cap_center + self.surface.radius * d)
            img = self.image(ContactState(point, f_sensor, 4.0))
        else:
            img = self.reference
        f_pred, loc = predict_single(self.net, img, self.reference)
        _, n_out = self.surface.project(loc)
        return R @ (-f_pred), R @ n_out


@dataclass
class Trace:
    rows: list = field(default_factory=list)
    failed: bool = False
    faults: int = 0

    COLUMNS = (
        "t", "theta1", "theta2", "theta3",
        "f_meas_x", "f_meas_y", "f_meas_z",
        "f_true_x", "f_true_y", "f_true_z",
        "error", "contact",
    )  # fmt: skip

    def array(self) -> np.ndarray:
        return np.asarray(self.rows, dtype=float).reshape(-1, len(self.COLUMNS))

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(self.COLUMNS)
            for r in self.rows:
                wr.writerow([f"{v:.9g}" for v in r])


def dynamics_step(arm: Arm3R, theta, qd, tau, press, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Semi-implicit Euler step; ``press`` is the force the fingertip applies to the object.

    Joints hitting a limit stop there with zero velocity.
    """
    qdd = (np.asarray(tau) - jacobian(arm, theta).T @ press - np.asarray(arm.damping) * qd) / np.asarray(arm.inertia)
    qd = qd + h * qdd
    theta = theta + h * qd
    lo, hi = np.asarray(arm.lower), np.asarray(arm.upper)
    stop = (theta < lo) | (theta > hi)
    if stop.any():
        theta = np.clip(theta, lo, hi)
        qd = np.where(stop, 0.0, qd)
    return theta, qd


def run_episode(
    arm: Arm3R,
    world: WorldState,
    gains: ServoGains,
    sensor,
    duration: float,
    theta0,
) -> Trace:
    """Closed-loop episode; semi-implicit Euler joint dynamics with viscous damping.

    Contact lost for more than 1 s marks the trace failed.
    """
    theta = arm.check(theta0).copy()
    qd = np.zeros(3)
    state = ServoState()
    trace = Trace()
    h = world.dt / world.substeps
    n_steps = int(round(duration / world.dt))
    contact = StickSlip(world)
    last_normal = world.contact(fk(arm, theta), 0.0)[1]
    lost_since = None
    for k in range(n_steps):
        t = k * world.dt
        p = fk(arm, theta)
        press, normal, pen = contact(p, t)
        in_contact = pen > 0
        f_meas, n_meas = sensor(arm, theta, press, normal, in_contact)
        if in_contact and np.all(np.isfinite(n_meas)):
            last_normal = n_meas / np.linalg.norm(n_meas)
        tau, e = servo_step(arm, theta, gains, f_meas, last_normal, world.dt, state)
        if state.fault:
            trace.faults += 1
        for j in range(world.substeps):
            pr, _, _ = contact(fk(arm, theta), t + j * h)
            theta, qd = dynamics_step(arm, theta, qd, tau, pr, h)
        if not in_contact:
            lost_since = t if lost_since is None else lost_since
            if t - lost_since > 1.0:
                trace.failed = True
        else:
            lost_since = None
        err = float(np.linalg.norm(e)) if np.all(np.isfinite(e)) else float("nan")
        trace.rows.append([t, *theta, *f_meas, *press, err, float(in_contact)])
    return trace


def kinetic_energy(arm: Arm3R, qd) -> float:
    return 0.5 * float(np.sum(np.asarray(arm.inertia) * np.asarray(qd) ** 2))


def settle_time(trace: Trace, f_target: float, tol: float = 0.1) -> float:
    """First time after which |F_true| stays within +-tol of the target; inf if never."""
    a = trace.array()
    mag = np.linalg.norm(a[:, 7:10], axis=1)
    ok = np.abs(mag - f_target) <= tol * f_target
    bad = np.flatnonzero(~ok)
    if len(bad) == 0:
        return float(a[0, 0])
    if bad[-1] == len(a) - 1:
        return float("inf")
    return float(a[bad[-1] + 1, 0])


DEFAULT_THETA0 = (0.0, 0.5, 1.0)


def default_surface() -> FingertipSurface:
    return build_surface()
