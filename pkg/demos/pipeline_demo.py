"""Render a small probing dataset, train a tiny net on it, and score the holdout.

Takes about a minute on one core. The full-size run is `minsight gen-data`
followed by `minsight train`.

Run: python3 demos/pipeline_demo.py
"""
from minsight.dataset import ProbeProtocol, generate, split
from minsight.evaluation import evaluate
from minsight.geometry import build_surface, sample_nodes
from minsight.inference import NetConfig, TrainConfig, build_net, train

surface = build_surface()
nodes = sample_nodes(surface, 1350, seed=7)
ds = generate(surface, nodes, ProbeProtocol(n_locations=200, seed=0))
train_set, test_set = split(ds, 0.8, seed=0)
print(f"{len(ds)} samples; training on {len(train_set)}")

net = build_net(NetConfig(tier="tiny"), seed=0)
net, curves = train(
    net, train_set, test_set, TrainConfig(epochs=40), log=lambda e, tr, va: print(f"epoch {e:2d}  train {tr:.5f}  val {va:.5f}")
)
rep = evaluate(net, test_set)
print(f"holdout force MAE {rep.force_mae:.3f} N, location MAE {rep.location_mae:.2f} mm")
