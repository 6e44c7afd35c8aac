"""Accuracy metrics, the input-resolution sweep and the latency benchmark."""
from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, split
from .inference import (
    SCALE_DIMS,
    Net,
    NetConfig,
    TrainConfig,
    build_net,
    predict,
    preprocess,
    train,
)

MAGNITUDE_BINS = (0.0, 0.5, 1.0, 2.0, 5.0)  # N; the last bin is closed
QUANTILES = (0.25, 0.5, 0.75, 0.95)
FRAME_BUDGET_MS = 1000.0 / 60.0


@dataclass
class MetricsReport:
    force_mae: float  # mean |error| over all force components, N
    force_mae_axis: np.ndarray  # (3,)
    location_mae: float  # mean Euclidean distance, mm
    n_samples: int
    bins: list = field(default_factory=list)  # dicts per magnitude bin
    map_mae: float | None = None  # per-node force MAE for distribution heads

    def rows(self) -> list[dict]:
        out = [
            {"metric": "force_mae", "value": self.force_mae},
            {"metric": "force_mae_x", "value": self.force_mae_axis[0]},
            {"metric": "force_mae_y", "value": self.force_mae_axis[1]},
            {"metric": "force_mae_z", "value": self.force_mae_axis[2]},
            {"metric": "location_mae", "value": self.location_mae},
            {"metric": "n_samples", "value": self.n_samples},
        ]
        if self.map_mae is not None:
            out.append({"metric": "map_mae", "value": self.map_mae})
        for b in self.bins:
            tag = f"bin_{b['lo']:g}_{b['hi']:g}"
            out.append({"metric": f"{tag}_count", "value": b["count"]})
            for q, v in zip(QUANTILES, b["force_q"]):
                out.append({"metric": f"{tag}_force_q{int(q * 100)}", "value": v})
            for q, v in zip(QUANTILES, b["location_q"]):
                out.append({"metric": f"{tag}_location_q{int(q * 100)}", "value": v})
        return out

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["metric", "value"])
            for r in self.rows():
                wr.writerow([r["metric"], f"{float(r['value']):.9g}"])


def metrics_from_predictions(
    pred_force: np.ndarray,
    pred_loc: np.ndarray,
    true_force: np.ndarray,
    true_loc: np.ndarray,
    bins=MAGNITUDE_BINS,
) -> MetricsReport:
    pf, tf = np.asarray(pred_force, float), np.asarray(true_force, float)
    pl, tl = np.asarray(pred_loc, float), np.asarray(true_loc, float)
    if len(tf) == 0:
        raise ValueError("cannot evaluate an empty set")
    ferr = np.abs(pf - tf)
    lerr = np.linalg.norm(pl - tl, axis=1)
    mag = np.linalg.norm(tf, axis=1)
    per_sample_f = ferr.mean(axis=1)
    out_bins = []
    for i, (lo, hi) in enumerate(zip(bins[:-1], bins[1:])):
        last = i == len(bins) - 2
        sel = (mag >= lo) & ((mag <= hi) if last else (mag < hi))
        entry = {"lo": lo, "hi": hi, "count": int(sel.sum())}
        if sel.any():
            entry["force_q"] = np.quantile(per_sample_f[sel], QUANTILES).tolist()
            entry["location_q"] = np.quantile(lerr[sel], QUANTILES).tolist()
        else:
            entry["force_q"] = [float("nan")] * len(QUANTILES)
            entry["location_q"] = [float("nan")] * len(QUANTILES)
        out_bins.append(entry)
    return MetricsReport(
        force_mae=float(ferr.mean()),
        force_mae_axis=ferr.mean(axis=0),
        location_mae=float(lerr.mean()),
        n_samples=len(tf),
        bins=out_bins,
    )


def map_summary(force_map: np.ndarray, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Total force and |F|-weighted centroid of (N, n, 3) force maps."""
    fm = np.asarray(force_map, float)
    total = fm.sum(axis=1)
    w = np.linalg.norm(fm, axis=2)
    ws = w.sum(axis=1, keepdims=True)
    ws[ws == 0] = 1.0
    return total, (w @ positions) / ws


def evaluate(net: Net, test_set: Dataset, norm=None, clean: bool = False) -> MetricsReport:
    """MAE of denormalised predictions against the recorded (or clean) labels."""
    if len(test_set) == 0:
        raise ValueError("cannot evaluate an empty set")
    if norm is not None:
        net.norm = norm
    labels = test_set.clean_labels if clean else test_set.labels
    pred = _predict_dataset(net, test_set)
    if net.config.head == "single":
        return metrics_from_predictions(pred[:, :3], pred[:, 3:6], labels[:, :3], labels[:, 3:6])
    maps = test_set.clean_maps if clean else test_set.force_maps
    f, loc = map_summary(pred, test_set.nodes().positions)
    rep = metrics_from_predictions(f, loc, labels[:, :3], labels[:, 3:6])
    rep.map_mae = float(np.abs(pred - np.asarray(maps, float)).mean())
    return rep


def _predict_dataset(net: Net, ds: Dataset, batch: int = 256) -> np.ndarray:
    outs = []
    for s in range(0, len(ds), batch):
        x = preprocess(ds.images[s : s + batch], ds.reference, net.config.scale, net.config.position_channel)
        outs.append(predict(net, x))
    return np.concatenate(outs)


# ---------------------------------------------------------------- resolution sweep


@dataclass(frozen=True)
class SweepRow:
    scale: int
    tier: str
    width: int
    height: int
    n_params: int
    force_mae: float
    location_mae: float


def resolution_sweep(
    dataset: Dataset,
    scales=(1, 8, 20, 60, 100),
    tiers=("small",),
    cfg: TrainConfig = TrainConfig(),
    train_fraction: float = 0.8,
    split_seed: int = 0,
    net_seed: int = 0,
    log=None,
) -> list[SweepRow]:
    """Train one single-head net per (scale, tier) with identical data, seeds and budget."""
    bad = [s for s in scales if s not in SCALE_DIMS]
    if bad:
        raise ValueError(f"unsupported scales {bad}; choose from {sorted(SCALE_DIMS)}")
    tr, te = split(dataset, train_fraction, split_seed)
    rows = []
    for tier in tiers:
        for scale in scales:
            net = build_net(NetConfig(tier=tier, head="single", scale=scale), seed=net_seed)
            net, _ = train(net, tr, te, cfg)
            rep = evaluate(net, te)
            w, h = SCALE_DIMS[scale]
            rows.append(SweepRow(scale, tier, w, h, net.n_params, rep.force_mae, rep.location_mae))
            if log is not None:
                log(rows[-1])
    return rows


def write_sweep_csv(rows: list[SweepRow], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["scale", "tier", "width", "height", "n_params", "force_mae", "location_mae"])
        for r in rows:
            wr.writerow([r.scale, r.tier, r.width, r.height, r.n_params, f"{r.force_mae:.9g}", f"{r.location_mae:.9g}"])


def pixel_patch(area: float = 1740.0, w: int = 82, h: int = 60, area_per_pixel: float | None = None):
    """Surface area seen per pixel and the edge of the equivalent square patch.

    Without ``area_per_pixel`` the nominal quotient ``area / (w h)`` is used.
    """
    a = area / (w * h) if area_per_pixel is None else float(area_per_pixel)
    return a, float(np.sqrt(a))


# ---------------------------------------------------------------- latency


@dataclass(frozen=True)
class LatencyRow:
    name: str
    scale: int
    threads: str
    n_params: int
    mean_ms: float
    std_ms: float
    fps: float
    meets_60hz: bool


def _time_forward(net: Net, x: np.ndarray, warmup: int, reps: int) -> np.ndarray:
    for _ in range(warmup):
        net.forward_raw(x)
    t = np.empty(reps)
    for i in range(reps):
        t0 = time.perf_counter()
        net.forward_raw(x)
        t[i] = time.perf_counter() - t0
    return t * 1e3


def bench_latency(
    configs: dict,
    input_scale: int = 20,
    warmup: int = 100,
    reps: int = 1000,
    threads=(1,),
    seed: int = 0,
) -> list[LatencyRow]:
    """Per-frame (batch 1) forward time of each named net or NetConfig.

    ``threads`` lists BLAS thread caps; ``None`` leaves the library default.
    """
    from threadpoolctl import threadpool_limits

    rows = []
    for name, item in configs.items():
        net = item if isinstance(item, Net) else build_net(item, seed=seed)
        cfg = net.config
        if cfg.scale != input_scale:
            raise ValueError(f"{name}: net built for scale {cfg.scale}, benchmark scale is {input_scale}")
        x = np.random.default_rng(seed).uniform(-0.1, 0.1, (1,) + cfg.input_shape).astype(np.float32)
        for th in threads:
            with threadpool_limits(limits=th):
                t = _time_forward(net, x, warmup, reps)
            mean = float(t.mean())
            rows.append(
                LatencyRow(
                    name,
                    input_scale,
                    "auto" if th is None else str(th),
                    net.n_params,
                    mean,
                    float(t.std()),
                    1000.0 / mean,
                    mean <= FRAME_BUDGET_MS,
                )
            )
    return rows


def write_latency_csv(rows: list[LatencyRow], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["name", "scale", "threads", "n_params", "mean_ms", "std_ms", "fps", "meets_60hz"])
        for r in rows:
            wr.writerow(
                [r.name, r.scale, r.threads, r.n_params, f"{r.mean_ms:.4f}", f"{r.std_ms:.4f}", f"{r.fps:.1f}", int(r.meets_60hz)]
            )


# ---------------------------------------------------------------- plots


def _svg_figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "minsight"
    return plt


def plot_sweep(rows: list[SweepRow], path: str) -> None:
    """Error versus input scale, one line per tier and metric."""
    plt = _svg_figure()
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.2))
    for tier in sorted({r.tier for r in rows}):
        rs = sorted((r for r in rows if r.tier == tier), key=lambda r: r.scale)
        a1.plot([r.scale for r in rs], [r.force_mae for r in rs], "o-", label=tier)
        a2.plot([r.scale for r in rs], [r.location_mae for r in rs], "o-", label=tier)
    a1.set(xlabel="scale [%]", ylabel="force MAE [N]", xscale="log")
    a2.set(xlabel="scale [%]", ylabel="location MAE [mm]", xscale="log")
    a1.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_error_vs_magnitude(report: MetricsReport, path: str) -> None:
    plt = _svg_figure()
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    labels = [f"{b['lo']:g}-{b['hi']:g}" for b in report.bins]
    med = [b["force_q"][1] for b in report.bins]
    q1 = [b["force_q"][0] for b in report.bins]
    q3 = [b["force_q"][2] for b in report.bins]
    x = np.arange(len(labels))
    ax.errorbar(x, med, yerr=[np.subtract(med, q1), np.subtract(q3, med)], fmt="o", capsize=3)
    ax.set_xticks(x, labels)
    ax.set(xlabel="|F| [N]", ylabel="force error [N]")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def write_predictions(path: str, pred: np.ndarray, truth: np.ndarray) -> None:
    """Raw prediction dump, one CSV row per sample at full double precision."""
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    k = pred.shape[1]
    names = ["fx", "fy", "fz", "x", "y", "z"][:k]
    header = ",".join([f"pred_{n}" for n in names] + [f"true_{n}" for n in names])
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    np.savetxt(path, np.hstack([pred, truth[:, :k]]), delimiter=",", header=header, comments="", fmt="%.17g")


def read_predictions(path: str) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    k = data.shape[1] // 2
    return data[:, :k], data[:, k:]
