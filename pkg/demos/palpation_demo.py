"""Detect hard lumps in a soft block from force maps recorded while pressing.

Run: python3 demos/palpation_demo.py
"""
from minsight import palpation as pp
from minsight.geometry import build_surface, sample_nodes

surface = build_surface()
nodes = sample_nodes(surface, 1350, seed=7)

for task in ("binary", "multi"):
    trajs = pp.make_trajectories(task, 20, nodes, surface, seed=0)
    res = pp.train_classifier(trajs, task)
    null, _ = pp.permutation_control(trajs, task, n_perm=3)
    print(
        f"{task:>6}: step accuracy {res.accuracy:.3f} ({res.chance_ratio:.2f}x chance), "
        f"per trajectory {res.traj_accuracy:.3f}, shuffled labels {null:.3f}"
    )
    print(res.confusion)
