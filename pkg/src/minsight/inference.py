"""Image preprocessing and the image -> force regressors.

Network: ``input_gain * x`` then four stages of (3x3 stride-2 conv, ReLU,
1x1 conv, ReLU), adaptive average pooling to a fixed ``pool`` grid, a
dense hidden layer and one of three heads:

* ``single``: 6 outputs, force xyz (N) and contact location xyz (mm);
* ``dist-flat``: ``3 * n_nodes`` outputs, the per-node force map;
* ``dist-grid``: dense -> (gh/4, gw/4, 16) -> 2x up -> 3x3 conv, ReLU ->
  2x up -> 3x3 conv -> (gh, gw, 3) force-map image, loss masked to the
  occupied pixels of the layout.

Parameter count (widths c1..c4, c0 = 3 or 4 with the position channel,
P = pool_h * pool_w, hidden H)::

    sum_i (9 c_{i-1} c_i + c_i) + (c_i^2 + c_i)  + P c4 H + H  + head

    single:     6 H + 6
    dist-flat:  3 n H + 3 n
    dist-grid:  G H + G + (9*16*16 + 16) + (9*16*3 + 3),  G = (gh/4)(gw/4) 16

Checkpoint ``.mnsw`` (little-endian)::

    char[4] "MNSW", u32 version, u32 config_len, config JSON (utf-8),
    then every parameter as raw f32 in :meth:`Net.parameters` order
    (layers front to back, within a layer "W" before "b").
"""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import nn
from .dataset import Dataset, NormStats, fit_norm
from .embedding import MapLayout, map_to_image, image_to_map

TIERS = {
    "tiny": (8, 16, 16, 32),
    "small": (16, 32, 32, 64),
    "base": (32, 64, 64, 128),
}
HEADS = ("single", "dist-flat", "dist-grid")
# (w, h) per percentage of the 410x308 full-scale image
SCALE_DIMS = {1: (4, 3), 8: (33, 25), 20: (82, 60), 60: (246, 185), 100: (410, 308)}
GRID_CHANNELS = 16
CKPT_MAGIC = b"MNSW"
CKPT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    """Loss became non-finite during training."""


class UntrainedModel(RuntimeError):
    pass


@dataclass(frozen=True)
class NetConfig:
    tier: str = "small"
    head: str = "single"
    scale: int = 20
    position_channel: bool = True
    hidden: int = 64
    pool: tuple = (4, 6)  # (h, w)
    input_gain: float = 4.0
    n_nodes: int = 1350
    grid: tuple = (40, 40)  # (h, w) of the dist-grid image
    activation: str = "relu"

    def __post_init__(self):
        if self.tier not in TIERS:
            raise ValueError(f"unknown tier {self.tier!r}; choose from {sorted(TIERS)}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}; choose from {HEADS}")
        if self.scale not in SCALE_DIMS:
            raise ValueError(f"scale {self.scale} not in {sorted(SCALE_DIMS)}")
        if self.activation not in ("relu", "linear"):
            raise ValueError("activation must be 'relu' or 'linear'")
        if self.head == "dist-grid" and (self.grid[0] % 4 or self.grid[1] % 4):
            raise ValueError("dist-grid needs grid dimensions divisible by 4")
        object.__setattr__(self, "pool", tuple(int(v) for v in self.pool))
        object.__setattr__(self, "grid", tuple(int(v) for v in self.grid))

    @property
    def in_channels(self) -> int:
        return 4 if self.position_channel else 3

    @property
    def input_shape(self) -> tuple[int, int, int]:
        w, h = SCALE_DIMS[self.scale]
        return h, w, self.in_channels

    @property
    def output_dim(self) -> int:
        if self.head == "single":
            return 6
        return 3 * self.n_nodes


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 60
    seed: int = 0
    norm_mode: str = "minmax"

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("lr, batch_size and epochs must be positive")


def param_count(cfg: NetConfig) -> int:
    """Closed-form parameter count of :func:`build_net`."""
    widths = TIERS[cfg.tier]
    total, cin = 0, cfg.in_channels
    for c in widths:
        total += 9 * cin * c + c + c * c + c
        cin = c
    feat = cfg.pool[0] * cfg.pool[1] * widths[-1]
    total += feat * cfg.hidden + cfg.hidden
    if cfg.head == "dist-grid":
        cells = (cfg.grid[0] // 4) * (cfg.grid[1] // 4) * GRID_CHANNELS
        total += cfg.hidden * cells + cells
        total += 9 * GRID_CHANNELS * GRID_CHANNELS + GRID_CHANNELS
        total += 9 * GRID_CHANNELS * 3 + 3
    else:
        total += cfg.hidden * cfg.output_dim + cfg.output_dim
    return total


class Scale(nn.Layer):
    def __init__(self, gain: float):
        super().__init__()
        self.gain = gain

    def forward(self, x):
        return x * x.dtype.type(self.gain)

    def backward(self, dy):
        return dy * dy.dtype.type(self.gain)


def build_layers(cfg: NetConfig, seed: int = 0, dtype=np.float32, zero_head: bool = False) -> nn.Sequential:
    rng = np.random.default_rng(seed)
    act = nn.ReLU if cfg.activation == "relu" else nn.Identity
    layers: list[nn.Layer] = [Scale(cfg.input_gain)]
    cin = cfg.in_channels
    for c in TIERS[cfg.tier]:
        layers += [nn.Conv2D(cin, c, 3, 2, rng=rng, dtype=dtype), act()]
        layers += [nn.Conv2D(c, c, 1, 1, rng=rng, dtype=dtype), act()]
        cin = c
    layers += [nn.AdaptiveAvgPool(*cfg.pool), nn.Flatten()]
    feat = cfg.pool[0] * cfg.pool[1] * cin
    layers += [nn.Dense(feat, cfg.hidden, rng=rng, dtype=dtype), act()]
    if cfg.head == "dist-grid":
        gh, gw = cfg.grid[0] // 4, cfg.grid[1] // 4
        layers += [
            nn.Dense(cfg.hidden, gh * gw * GRID_CHANNELS, rng=rng, dtype=dtype),
            nn.Reshape((gh, gw, GRID_CHANNELS)),
            nn.Upsample2(),
            nn.Conv2D(GRID_CHANNELS, GRID_CHANNELS, 3, 1, rng=rng, dtype=dtype),
            act(),
            nn.Upsample2(),
            nn.Conv2D(GRID_CHANNELS, 3, 3, 1, rng=rng, dtype=dtype),
        ]
        if zero_head:
            last = layers[-1]
            last.params["W"][...] = 0
    else:
        # small final layer: outputs start near zero in normalised units
        layers.append(nn.Dense(cfg.hidden, cfg.output_dim, rng=rng, dtype=dtype, zero=zero_head, gain=0.1))
    return nn.Sequential(layers)


@dataclass
class Net:
    config: NetConfig
    layers: nn.Sequential
    norm: NormStats | None = None
    layout: MapLayout | None = field(default=None, repr=False)
    trained: bool = False

    def parameters(self):
        return self.layers.parameters()

    @property
    def n_params(self) -> int:
        return self.layers.n_params()

    def forward_raw(self, x: np.ndarray) -> np.ndarray:
        """Network output in normalised units: (N, 6), (N, n*3) or (N, gh, gw, 3)."""
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != self.config.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} does not match configured {self.config.input_shape}")
        dtype = self.parameters()[0][2].dtype
        return self.layers.forward(x.astype(dtype, copy=False))


def build_net(cfg: NetConfig, seed: int = 0, dtype=np.float32, zero_head: bool = False) -> Net:
    return Net(cfg, build_layers(cfg, seed, dtype, zero_head))


def forward(net: Net, x: np.ndarray) -> np.ndarray:
    """Forward pass returning head-shaped outputs in normalised units.

    single: (N, 6); dist-flat: (N, n_nodes, 3); dist-grid: (N, gh, gw, 3).
    """
    y = net.forward_raw(x)
    if net.config.head == "dist-flat":
        return y.reshape(len(y), net.config.n_nodes, 3)
    return y


# ---------------------------------------------------------------- preprocessing


@lru_cache(maxsize=64)
def area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix of exact area overlaps."""
    edges_out = np.arange(n_out + 1) * (n_in / n_out)
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        a, b = edges_out[i], edges_out[i + 1]
        j0, j1 = int(np.floor(a)), int(np.ceil(b))
        for j in range(j0, min(j1, n_in)):
            m[i, j] = min(b, j + 1) - max(a, j)
    m /= m.sum(axis=1, keepdims=True)
    m.setflags(write=False)
    return m


def area_resize(img: np.ndarray, w: int, h: int) -> np.ndarray:
    """Area-average resample of (..., H, W, C) to (..., h, w, C)."""
    H, W = img.shape[-3], img.shape[-2]
    if (H, W) == (h, w):
        return img
    mh = area_matrix(H, h).astype(img.dtype)
    mw = area_matrix(W, w).astype(img.dtype)
    return np.einsum("ih,...hwc,jw->...ijc", mh, img, mw, optimize=True)


@lru_cache(maxsize=16)
def position_channel(w: int, h: int) -> np.ndarray:
    rows, cols = np.mgrid[0:h, 0:w]
    ch = ((rows * w + cols) / (h * w)).astype(np.float32)[..., None]
    ch.setflags(write=False)
    return ch


def preprocess(
    image: np.ndarray,
    reference: np.ndarray,
    scale: int = 20,
    with_position_channel: bool = True,
) -> np.ndarray:
    """Reference subtraction, area downsampling to ``scale`` and the position channel.

    Accepts one (H, W, 3) image or a batch (N, H, W, 3); returns float32
    NHWC data with 3 or 4 channels.
    """
    image = np.asarray(image, dtype=np.float32)
    reference = np.asarray(reference, dtype=np.float32)
    if image.shape[-3:] != reference.shape:
        raise ValueError(f"image {image.shape[-3:]} and reference {reference.shape} differ in size")
    if scale not in SCALE_DIMS:
        raise ValueError(f"scale {scale} not in {sorted(SCALE_DIMS)}")
    w, h = SCALE_DIMS[scale]
    diff = area_resize(image - reference, w, h)
    if with_position_channel:
        pos = np.broadcast_to(position_channel(w, h), diff.shape[:-1] + (1,))
        diff = np.concatenate([diff, pos], axis=-1)
    return np.ascontiguousarray(diff, dtype=np.float32)


# ---------------------------------------------------------------- targets


def targets(net: Net, ds: Dataset, sel=None, clean: bool = False) -> tuple[np.ndarray, np.ndarray | None]:
    """Normalised training targets and (for dist-grid) the loss mask."""
    sel = slice(None) if sel is None else sel
    cfg, norm = net.config, net.norm
    if cfg.head == "single":
        lab = (ds.clean_labels if clean else ds.labels)[sel][:, :6]
        return norm.apply(lab.astype(np.float64)).astype(np.float32), None
    maps = (ds.clean_maps if clean else ds.force_maps)[sel]
    y = norm.apply(maps.astype(np.float64)).astype(np.float32)
    if cfg.head == "dist-flat":
        return y.reshape(len(y), -1), None
    img = map_to_image(y, net.layout)
    return img, net.layout.occupied_mask[None, :, :, None].astype(np.float32)


def fit_targets_norm(cfg: NetConfig, ds: Dataset, mode: str = "minmax") -> NormStats:
    if cfg.head == "single":
        return fit_norm(np.asarray(ds.labels[:, :6], dtype=np.float64), mode)
    return fit_norm(np.asarray(ds.force_maps, dtype=np.float64), mode)


def batch_inputs(net: Net, ds: Dataset, sel) -> np.ndarray:
    return preprocess(ds.images[sel], ds.reference, net.config.scale, net.config.position_channel)


# ---------------------------------------------------------------- training


@dataclass
class LossCurves:
    epoch: list = field(default_factory=list)
    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)

    def to_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,train_mse,val_mse\n")
            for e, a, b in zip(self.epoch, self.train_mse, self.val_mse):
                fh.write(f"{e},{a:.9g},{b:.9g}\n")


def _sorted_batches(n, bs):
    return [np.arange(s, min(s + bs, n)) for s in range(0, n, bs)]


def evaluate_loss(net: Net, ds: Dataset, batch_size: int = 128) -> float:
    total, count = 0.0, 0
    for idx in _sorted_batches(len(ds), batch_size):
        y, mask = targets(net, ds, idx)
        pred = net.forward_raw(batch_inputs(net, ds, idx))
        loss, _ = nn.mse(pred, y, mask)
        w = float(mask.sum()) * len(idx) * 3 if mask is not None else y.size
        total += loss * w
        count += w
    return total / count


def train(
    net: Net,
    train_set: Dataset,
    val_set: Dataset,
    cfg: TrainConfig = TrainConfig(),
    log=None,
) -> tuple[Net, LossCurves]:
    """Adam on the MSE of normalised labels; returns the best-validation weights."""
    if net.config.head == "dist-grid" and net.layout is None:
        net.layout = train_set.layout()
        if net.layout is None:
            raise ValueError("dist-grid head needs a layout in the dataset")
    if net.config.head != "single" and train_set.force_maps.shape[1] != net.config.n_nodes:
        raise ValueError("dataset node count does not match the network head")
    net.norm = fit_targets_norm(net.config, train_set, cfg.norm_mode)
    opt = nn.Adam(net.layers, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    curves = LossCurves()
    best = evaluate_loss(net, val_set)
    curves.epoch.append(0)
    curves.train_mse.append(float("nan"))
    curves.val_mse.append(best)
    best_params = [p.copy() for _, _, p in net.parameters()]
    n = len(train_set)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        seen, acc = 0, 0.0
        for s in range(0, n, cfg.batch_size):
            idx = np.sort(order[s : s + cfg.batch_size])
            x = batch_inputs(net, train_set, idx)
            y, mask = targets(net, train_set, idx)
            pred = net.layers.forward(x)
            loss, grad = nn.mse(pred, y, mask)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {s}: {loss}")
            net.layers.backward(grad.astype(pred.dtype))
            opt.step()
            acc += loss * len(idx)
            seen += len(idx)
        val = evaluate_loss(net, val_set)
        if not np.isfinite(val):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        curves.epoch.append(epoch)
        curves.train_mse.append(acc / seen)
        curves.val_mse.append(val)
        if val < best:
            best = val
            best_params = [p.copy() for _, _, p in net.parameters()]
        if log is not None:
            log(epoch, acc / seen, val)
    for (_, _, p), b in zip(net.parameters(), best_params):
        p[...] = b
    net.trained = True
    return net, curves


# ---------------------------------------------------------------- gradient check


def grad_check(
    net: Net,
    x: np.ndarray,
    y: np.ndarray,
    epsilon: float = 1e-4,
    n_checks: int = 200,
    seed: int = 0,
    mask: np.ndarray | None = None,
) -> tuple[float, dict]:
    """Largest relative error between analytic and central-difference gradients.

    Runs on a float64 copy of ``net``. Entries are drawn evenly across all
    parameter tensors (at least ``n_checks`` in total). A probe whose +/-
    epsilon step flips any ReLU gate straddles a kink, where the loss has
    no derivative; such probes are redrawn and counted under ``"kinks"``.
    Returns the overall maximum and a per-layer-type maximum.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-6, 1e-3]")
    layers = copy.deepcopy(net.layers).astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    gates = [layer for layer in layers.layers if isinstance(layer, nn.ReLU)]

    m2 = 1.0 if mask is None else np.broadcast_to(mask, y.shape) ** 2
    count = y.size if mask is None else float(np.broadcast_to(mask, y.shape).sum())

    def out_and_gates():
        return layers.forward(x), [g._mask.copy() for g in gates]

    pred = layers.forward(x)
    base_gates = [g._mask.copy() for g in gates]
    _, grad_out = nn.mse(pred, y, mask)
    layers.backward(grad_out)
    params = layers.parameters()
    grads = [g.copy() for g in layers.gradients()]
    rng = np.random.default_rng(seed)
    per = max(1, -(-n_checks // len(params)))
    worst, by_type, kinks = 0.0, {}, 0
    for (li, name, p), gr in zip(params, grads):
        flat, gflat = p.reshape(-1), gr.reshape(-1)
        order = rng.permutation(flat.size)
        done = 0
        kind = type(layers.layers[li]).__name__
        for j in order:
            if done == per:
                break
            old = flat[j]
            flat[j] = old + epsilon
            pp, gp = out_and_gates()
            flat[j] = old - epsilon
            pm, gm = out_and_gates()
            flat[j] = old
            if any(np.any(a != b) or np.any(c != b) for a, c, b in zip(gp, gm, base_gates)):
                kinks += 1
                continue
            # L(+) - L(-) summed as a difference of squares, free of cancellation
            num = np.sum((pp - pm) * (pp + pm - 2.0 * y) * m2) / count / (2 * epsilon)
            ana = gflat[j]
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-30)
            worst = max(worst, rel)
            by_type[kind] = max(by_type.get(kind, 0.0), rel)
            done += 1
    by_type["kinks"] = kinks
    return worst, by_type


# ---------------------------------------------------------------- prediction


def predict(net: Net, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Denormalised head outputs for preprocessed inputs."""
    if not net.trained or net.norm is None:
        raise UntrainedModel("network has not been trained")
    outs = []
    for s in range(0, len(x), batch_size):
        y = net.forward_raw(x[s : s + batch_size]).astype(np.float64)
        if net.config.head == "dist-grid":
            y = image_to_map(y, net.layout)
        elif net.config.head == "dist-flat":
            y = y.reshape(len(y), -1, 3)
        outs.append(net.norm.invert(y))
    return np.concatenate(outs)


def predict_single(net: Net, image, reference, norm: NormStats | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(force N, location mm) for one raw camera image."""
    if net.config.head != "single":
        raise ValueError("predict_single needs a single-contact head")
    if not net.trained:
        raise UntrainedModel("network has not been trained")
    norm = norm or net.norm
    if norm is None:
        raise UntrainedModel("no normalisation statistics")
    x = preprocess(image, reference, net.config.scale, net.config.position_channel)
    out = norm.invert(net.forward_raw(x)[0].astype(np.float64))
    return out[:3], out[3:6]


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(net: Net, path: str) -> None:
    cfg = {
        "net": asdict(net.config),
        "norm": net.norm.to_dict() if net.norm is not None else None,
        "trained": net.trained,
        "layout": None,
        "params": [[int(li), name, list(p.shape)] for li, name, p in net.parameters()],
    }
    if net.layout is not None:
        lay = net.layout
        cfg["layout"] = {
            "grid_w": lay.grid_w,
            "grid_h": lay.grid_h,
            "alpha": lay.alpha,
            "pixel_pitch": lay.pixel_pitch,
            "rows": lay.rows.tolist(),
            "cols": lay.cols.tolist(),
        }
    blob = json.dumps(cfg, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for _, _, p in net.parameters():
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_checkpoint(path: str) -> Net:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, n = struct.unpack("<II", data[4:12])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    cfg = json.loads(data[12 : 12 + n].decode("utf-8"))
    nc = cfg["net"]
    nc["pool"], nc["grid"] = tuple(nc["pool"]), tuple(nc["grid"])
    net = build_net(NetConfig(**nc))
    off = 12 + n
    for li, name, p in net.parameters():
        cnt = p.size
        p[...] = np.frombuffer(data, dtype="<f4", count=cnt, offset=off).reshape(p.shape)
        off += 4 * cnt
    if off != len(data):
        raise ValueError(f"{path}: trailing or missing weight data")
    if cfg["norm"] is not None:
        net.norm = NormStats.from_dict(cfg["norm"])
    lay = cfg.get("layout")
    if lay is not None:
        net.layout = MapLayout.from_assignment(
            lay["rows"], lay["cols"], lay["grid_w"], lay["grid_h"], lay["alpha"], lay["pixel_pitch"]
        )
    net.trained = bool(cfg["trained"])
    return net
