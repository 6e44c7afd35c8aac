"""Press a fingertip against a sphere and track a force target.

Compares PI feedback with feed-forward alone on the 0.2 Hz sine target,
using exact contact forces as the sensor.

Run: python3 demos/servo_demo.py
"""
import numpy as np

from minsight.control import (
    DEFAULT_THETA0,
    Arm3R,
    OracleSensor,
    ServoGains,
    initial_world,
    run_episode,
    settle_time,
)

arm = Arm3R()
th0 = np.array(DEFAULT_THETA0)

hold = run_episode(arm, initial_world(arm, th0, "hold"), ServoGains(), OracleSensor(seed=0), 5.0, th0)
print(f"hold 1 N: settled after {settle_time(hold, 1.0):.2f} s")

for name, gains in [("PI + feed-forward", ServoGains()), ("feed-forward only", ServoGains(kp=(0, 0, 0), ki=(0, 0, 0)))]:
    tr = run_episode(arm, initial_world(arm, th0, "sine"), gains, OracleSensor(seed=0), 10.0, th0)
    a = tr.array()
    col = {c: i for i, c in enumerate(tr.COLUMNS)}
    print(
        f"sine, {name:<18} contact {a[:, col['contact']].mean():.0%}  "
        f"mean |force error| {np.abs(a[:, col['error']]).mean():.3f} N"
    )
