"""Lump detection in a soft sample from force-map sequences.

The sensor presses apex-down into the top face (z = 0) of a soft block
with an optional hard sphere embedded below it. The block's local
stiffness at press position ``(x, y)`` and depth ``d`` is::

    k = k_b * (1 + (mult - 1) * g(r) * a(d))
    g = exp(-r^2 / (2 (spread * D)^2))           r: horizontal distance to the lump
    a = exp(-max(h - d, 0) / (atten * D))        h: depth of the lump's top face

so larger lumps reach further both sideways and through the covering
layer. The stiffness gradient adds a sideways push away from the lump,
and the contact patch widens with depth like a Hertz contact,
``radius = max(2, sqrt(R_tip * d))``.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .geometry import FingertipSurface, NodeSet
from .simulator import ContactState, ground_truth_map

LUMP_DIAMETERS = (None, 6.5, 9.5, 12.5)
GATE_THRESHOLD = 0.3  # N
DISCARD_STEPS = 3


@dataclass(frozen=True)
class SampleSpec:
    lump_diameter: float | None = None  # mm
    lump_depth: float = 5.0  # mm, sample surface to the lump's top face
    k_b: float = 1.0  # N/mm
    multiplier: float = 4.0
    extent: float = 20.0  # mm, square top face centred on the lump
    spread: float = 0.75  # horizontal Gaussian width per mm of diameter
    atten: float = 0.25  # depth decay length per mm of diameter
    shear_gain: float = 0.2

    def __post_init__(self):
        if self.lump_diameter not in LUMP_DIAMETERS:
            raise ValueError(f"lump diameter must be one of {LUMP_DIAMETERS}")
        if self.multiplier <= 1:
            raise ValueError("lump stiffness multiplier must exceed 1")
        if self.k_b <= 0 or self.extent <= 0:
            raise ValueError("k_b and extent must be positive")

    @property
    def label(self) -> int:
        return LUMP_DIAMETERS.index(self.lump_diameter)

    def influence(self, xy, depth: float) -> tuple[float, np.ndarray]:
        """Lump influence in [0, 1] and its horizontal gradient at ``xy``."""
        if self.lump_diameter is None:
            return 0.0, np.zeros(2)
        D = self.lump_diameter
        s = self.spread * D
        xy = np.asarray(xy, dtype=float)
        g = np.exp(-(xy @ xy) / (2 * s * s))
        a = np.exp(-max(self.lump_depth - depth, 0.0) / (self.atten * D))
        return g * a, -(xy / (s * s)) * g * a

    def stiffness(self, xy, depth: float) -> float:
        infl, _ = self.influence(xy, depth)
        return self.k_b * (1.0 + (self.multiplier - 1.0) * infl)


@dataclass
class PressTrajectory:
    spec: SampleSpec
    position: np.ndarray
    depths: np.ndarray
    forces: np.ndarray  # (T, 3) total force on the sensor, sensor frame
    maps: np.ndarray  # (T, n_nodes, 3)

    @property
    def label(self) -> int:
        return self.spec.label


def depth_profile(max_depth: float = 2.0, ramp_steps: int = 20, hold_steps: int = 10) -> np.ndarray:
    """Linear ramp from zero, then hold; at least 20 steps in total."""
    if ramp_steps + hold_steps < 20:
        raise ValueError("a press needs at least 20 steps")
    k = np.arange(ramp_steps + hold_steps)
    return max_depth * np.minimum(k / ramp_steps, 1.0)


def contact_radius(depth: float, tip_radius: float = 11.0) -> float:
    return max(2.0, float(np.sqrt(tip_radius * depth)))


def press_force(spec: SampleSpec, position, depth: float) -> np.ndarray:
    """Force on the sensor in its frame (z along the fingertip axis, pointing into the sample)."""
    if depth <= 0:
        return np.zeros(3)
    infl, grad = spec.influence(position, depth)
    fn = spec.stiffness(position, depth) * depth
    # the block pushes the tip sideways, away from the stiffer region
    s = spec.spread * spec.lump_diameter if spec.lump_diameter else 1.0
    ft = -spec.shear_gain * spec.k_b * (spec.multiplier - 1.0) * depth * grad * s
    # sensor x = world x, sensor y = -world y, sensor z = -world z
    return np.array([ft[0], -ft[1], -fn])


class NetMapSensor:
    """Contact -> deformation -> rendered image -> distribution network -> (n_nodes, 3) map."""

    def __init__(self, net, renderer, w: int, h: int, supersample: int):
        from .dataset import box_downsample

        if net.config.head not in ("dist-flat", "dist-grid"):
            raise ValueError("map sensing needs a distribution-head network")
        if net.config.n_nodes != len(renderer.nodes):
            raise ValueError(f"network predicts {net.config.n_nodes} nodes, renderer has {len(renderer.nodes)}")
        self.net, self.renderer = net, renderer
        self.w, self.h, self.k = w, h, supersample
        self._down = box_downsample
        self.reference = box_downsample(renderer.reference(w * supersample, h * supersample), supersample)

    def __call__(self, contact: ContactState) -> np.ndarray:
        from .inference import predict, preprocess
        from .simulator import deform

        r = self.renderer
        img = self._down(r.render(deform(r.surface, r.nodes, contact), self.w * self.k, self.h * self.k), self.k)
        x = preprocess(img, self.reference, self.net.config.scale, self.net.config.position_channel)
        return predict(self.net, x[None])[0]


def synth_press(
    spec: SampleSpec,
    position,
    depths: np.ndarray,
    nodes: NodeSet,
    surface: FingertipSurface,
    rng: np.random.Generator | None = None,
    force_sigma=(0.01, 0.01, 0.02),
    pipeline=None,
) -> PressTrajectory:
    """Force-map sequence of one press.

    Oracle mode (``pipeline=None``) uses the ground-truth distribution of
    the noisy contact force; otherwise ``pipeline(contact)`` must return
    the estimated (n_nodes, 3) map, e.g. render -> preprocess -> network.
    """
    position = np.asarray(position, dtype=float)
    half = 0.5 * spec.extent
    if position.shape != (2,) or np.any(np.abs(position) > half):
        raise ValueError(f"press position {position} outside the {spec.extent} mm sample")
    apex = np.array([0.0, 0.0, surface.z_max])
    sig = np.asarray(force_sigma, dtype=float)
    forces, maps = [], []
    for d in depths:
        f = press_force(spec, position, d)
        if d > 0 and rng is not None:
            f = f + rng.normal(size=3) * sig
        c = ContactState(apex, f, contact_radius(d)) if d > 0 else ContactState.none()
        forces.append(f)
        maps.append(ground_truth_map(nodes, c) if pipeline is None else pipeline(c))
    return PressTrajectory(spec, position, np.asarray(depths, float), np.array(forces), np.array(maps))


def gate(traj: PressTrajectory, threshold: float = GATE_THRESHOLD, discard: int = DISCARD_STEPS) -> np.ndarray:
    """Indices of steps kept: after the first ``discard`` steps, vector-sum force above threshold."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    total = np.linalg.norm(traj.maps.sum(axis=1), axis=1)
    keep = np.flatnonzero(total > threshold)
    keep = keep[keep >= discard]
    if len(keep) == 0:
        warnings.warn("trajectory has no map above the gate threshold; excluded", stacklevel=2)
    return keep


def make_trajectories(
    task: str,
    n_per_class: int,
    nodes: NodeSet,
    surface: FingertipSurface,
    seed: int = 0,
    depths: np.ndarray | None = None,
    base: SampleSpec = SampleSpec(),
    pipeline=None,
) -> list[PressTrajectory]:
    """Balanced press set: ``binary`` is no lump vs. lump (sizes drawn evenly), ``multi`` has four classes."""
    if task not in ("binary", "multi"):
        raise ValueError("task must be 'binary' or 'multi'")
    rng = np.random.default_rng(seed)
    depths = depth_profile() if depths is None else depths
    specs = []
    if task == "multi":
        for dia in LUMP_DIAMETERS:
            specs += [dia] * n_per_class
    else:
        specs += [None] * n_per_class
        specs += [LUMP_DIAMETERS[1 + (i % 3)] for i in range(n_per_class)]
    out = []
    half = 0.5 * base.extent
    for dia in specs:
        spec = SampleSpec(**{**base.__dict__, "lump_diameter": dia})
        pos = rng.uniform(-half, half, 2)
        out.append(synth_press(spec, pos, depths, nodes, surface, rng=rng, pipeline=pipeline))
    return out


def task_label(traj: PressTrajectory, task: str) -> int:
    return int(traj.label > 0) if task == "binary" else traj.label


@dataclass
class ClassifierResult:
    accuracy: float
    chance: float
    confusion: np.ndarray
    traj_accuracy: float
    n_train: int
    n_test: int
    layers: nn.Sequential = field(repr=False, default=None)
    scale: float = 1.0

    @property
    def chance_ratio(self) -> float:
        return self.accuracy / self.chance

    def confusion_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            k = len(self.confusion)
            wr.writerow(["true\\pred"] + [str(j) for j in range(k)])
            for i in range(k):
                wr.writerow([str(i)] + [str(int(v)) for v in self.confusion[i]])


def split_trajectories(trajs, task: str, test_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Stratified trajectory-disjoint split; returns (train ids, test ids)."""
    rng = np.random.default_rng(seed)
    labels = np.array([task_label(t, task) for t in trajs])
    train, test = [], []
    for c in np.unique(labels):
        ids = rng.permutation(np.flatnonzero(labels == c))
        n_test = max(1, int(round(test_fraction * len(ids))))
        test += ids[:n_test].tolist()
        train += ids[n_test:].tolist()
    return sorted(train), sorted(test)


def _stack(trajs, ids, task):
    xs, ys, owner = [], [], []
    for i in ids:
        keep = gate(trajs[i])
        if len(keep) == 0:
            continue
        xs.append(trajs[i].maps[keep].reshape(len(keep), -1))
        ys.append(np.full(len(keep), task_label(trajs[i], task)))
        owner.append(np.full(len(keep), i))
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(owner)


def softmax_xent(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    n = len(y)
    loss = float(-np.mean(np.log(p[np.arange(n), y] + 1e-300)))
    g = p.copy()
    g[np.arange(n), y] -= 1.0
    return loss, g / n


def train_classifier(
    trajs: list[PressTrajectory],
    task: str,
    split_seed: int = 0,
    seed: int = 0,
    test_fraction: float = 0.25,
    hidden=(64, 32),
    epochs: int = 80,
    batch_size: int = 64,
    lr: float = 1e-3,
    permute_labels: bool = False,
) -> ClassifierResult:
    """Dense classifier on single gated force maps; trajectory-disjoint holdout."""
    n_classes = 2 if task == "binary" else 4
    labels = [task_label(t, task) for t in trajs]
    counts = np.bincount(labels, minlength=n_classes)
    if counts.min() < 10:
        raise ValueError(f"need at least 10 trajectories per class, have {counts.tolist()}")
    tr_ids, te_ids = split_trajectories(trajs, task, test_fraction, split_seed)
    xtr, ytr, _ = _stack(trajs, tr_ids, task)
    xte, yte, own_te = _stack(trajs, te_ids, task)
    present = np.unique(ytr)
    if len(present) < n_classes:
        raise ValueError(f"classes {sorted(set(range(n_classes)) - set(present.tolist()))} absent from the train split")
    rng = np.random.default_rng(seed)
    if permute_labels:
        ytr = rng.permutation(ytr)
    scale = float(np.abs(xtr).max()) or 1.0
    xtr = (xtr / scale).astype(np.float32)
    xte = (xte / scale).astype(np.float32)

    sizes = (xtr.shape[1],) + tuple(hidden)
    layers = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        layers += [nn.Dense(a, b, rng=rng), nn.ReLU()]
    layers.append(nn.Dense(sizes[-1], n_classes, rng=rng, gain=1.0))
    net = nn.Sequential(layers)
    opt = nn.Adam(net, lr=lr)
    for _ in range(epochs):
        order = rng.permutation(len(xtr))
        for s in range(0, len(order), batch_size):
            idx = order[s : s + batch_size]
            logits = net.forward(xtr[idx])
            _, g = softmax_xent(logits.astype(np.float64), ytr[idx])
            net.backward(g.astype(np.float32))
            opt.step()
    pred = net.forward(xte).argmax(axis=1)
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (yte, pred), 1)
    votes = []
    for i in np.unique(own_te):
        sel = own_te == i
        votes.append(np.bincount(pred[sel], minlength=n_classes).argmax() == yte[sel][0])
    return ClassifierResult(
        accuracy=float((pred == yte).mean()),
        chance=1.0 / n_classes,
        confusion=conf,
        traj_accuracy=float(np.mean(votes)),
        n_train=len(ytr),
        n_test=len(yte),
        layers=net,
        scale=scale,
    )


def force_traces_csv(trajs: list[PressTrajectory], path: str) -> None:
    """Per-step vector-sum force magnitude of every trajectory."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["trajectory", "label", "step", "depth", "force_sum"])
        for i, t in enumerate(trajs):
            tot = np.linalg.norm(t.maps.sum(axis=1), axis=1)
            for k, (d, f) in enumerate(zip(t.depths, tot)):
                wr.writerow([i, t.label, k, f"{d:.6g}", f"{f:.9g}"])


def permutation_control(
    trajs: list[PressTrajectory], task: str, n_perm: int = 25, split_seed: int = 0, seed: int = 0, **kw
) -> tuple[float, list[ClassifierResult]]:
    """Null-model accuracy: mean holdout accuracy over ``n_perm`` label shuffles of the train split.

    Maps from one trajectory move together, so a single shuffle scatters
    by about 0.1 around chance with 40 test trajectories; the mean of 25
    brings that to about 0.025.
    """
    if n_perm < 1:
        raise ValueError("n_perm must be at least 1")
    runs = [train_classifier(trajs, task, split_seed, seed + 1000 * (i + 1), permute_labels=True, **kw) for i in range(n_perm)]
    return float(np.mean([r.accuracy for r in runs])), runs
