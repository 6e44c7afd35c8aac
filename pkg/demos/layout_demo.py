"""Flatten the fingertip's nodes onto a 40x40 grid, with and without the height shrink.

Run: python3 demos/layout_demo.py [out.svg]
"""
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from minsight.embedding import build_layout, smoothness_score
from minsight.geometry import build_neighbor_graph, build_surface, sample_nodes

surface = build_surface()
nodes = sample_nodes(surface, 1350, seed=7)
graph = build_neighbor_graph(nodes)

fig, axes = plt.subplots(1, 2, figsize=(8, 4))
for ax, alpha in zip(axes, (0.0, 0.0005)):
    lay = build_layout(nodes, alpha=alpha)
    score = smoothness_score(lay, graph)
    print(f"alpha={alpha:<7} smoothness {score:.4f} px")
    # colour each pixel by the height of the node that landed there
    img = np.full((lay.grid_h, lay.grid_w), np.nan)
    img[lay.rows, lay.cols] = nodes.positions[:, 2]
    ax.imshow(img, origin="lower")
    ax.set_title(f"alpha = {alpha}, score {score:.3f}")

out = sys.argv[1] if len(sys.argv) > 1 else "layout_demo.svg"
fig.savefig(out)
print("wrote", out)
