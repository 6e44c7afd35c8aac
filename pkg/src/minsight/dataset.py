"""Synthetic probing datasets and their on-disk container.

A probe run presses a spherical indenter at random surface locations and a
fixed schedule of depths, renders the camera image, and records noisy
force/location labels next to the noise-free ones.

Container layout (a directory):

``manifest``
    UTF-8 JSON with sorted keys: format version, surface and camera
    parameters, node positions and normals, the force-map layout, the
    probe protocol, normalisation statistics (if fitted) and counts.

``samples.bin``
    little-endian binary::

        char[4]  magic "MNST"
        u32      format version
        u32      n_samples
        u32      n_nodes
        u32      h, u32 w
        f32      reference image [h][w][3]
        record * n_samples

    where each record is::

        u32 index, u32 h, u32 w
        f32 image [h][w][3]
        f32 label[7]            force xyz (N), location xyz (mm), contact flag
        f32 force_map[n_nodes][3]
        f32 clean_label[7]
        f32 clean_force_map[n_nodes][3]
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .embedding import MapLayout
from .geometry import FingertipSurface, NodeSet
from .simulator import (
    FORCE_ENVELOPE,
    STIFFNESS,
    CameraModel,
    ContactState,
    LedRing,
    Renderer,
    deform,
    ground_truth_map,
)

MAGIC = b"MNST"
FORMAT_VERSION = 1
HEADER = np.dtype([("magic", "S4"), ("version", "<u4"), ("n", "<u4"), ("nodes", "<u4"), ("h", "<u4"), ("w", "<u4")])


@dataclass(frozen=True)
class ProbeProtocol:
    n_locations: int = 2000
    depths: tuple = (0.05, 0.3, 0.55, 0.8, 1.05)  # mm
    indenter_radius: float = 4.0  # mm
    position_sigma: float = 0.2  # mm, per axis
    force_sigma: tuple = (0.01, 0.01, 0.02)  # N
    shear_ratio: float = 0.3
    seed: int = 0

    def __post_init__(self):
        d = np.asarray(self.depths, dtype=float)
        if self.n_locations < 1:
            raise ValueError("need at least one location")
        if d.size == 0 or np.any(d <= 0) or np.any(np.diff(d) <= 0):
            raise ValueError("depths must be positive and strictly increasing")
        if self.position_sigma < 0 or min(self.force_sigma) < 0:
            raise ValueError("noise sigmas must be nonnegative")
        if not 0 <= self.shear_ratio:
            raise ValueError("shear ratio must be nonnegative")
        object.__setattr__(self, "depths", tuple(float(x) for x in d))
        object.__setattr__(self, "force_sigma", tuple(float(x) for x in self.force_sigma))


@dataclass
class Dataset:
    images: np.ndarray  # (N, h, w, 3) float32
    labels: np.ndarray  # (N, 7) noisy
    force_maps: np.ndarray  # (N, n_nodes, 3) noisy
    clean_labels: np.ndarray
    clean_maps: np.ndarray
    reference: np.ndarray  # (h, w, 3)
    indices: np.ndarray  # original sample index
    meta: dict = field(repr=False)

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def n_depths(self) -> int:
        return len(self.meta["protocol"]["depths"])

    @property
    def location_ids(self) -> np.ndarray:
        return self.indices // self.n_depths

    @property
    def image_size(self) -> tuple[int, int]:
        """(w, h) of the stored images."""
        return self.reference.shape[1], self.reference.shape[0]

    def nodes(self) -> NodeSet:
        pos = np.asarray(self.meta["nodes"]["positions"], dtype=float)
        nrm = np.asarray(self.meta["nodes"]["normals"], dtype=float)
        return NodeSet(pos, nrm, np.full(len(pos), self.meta["surface"]["total_area"] / len(pos)))

    def surface(self) -> FingertipSurface:
        s = self.meta["surface"]
        return FingertipSurface(s["radius"], s["cyl_height"])

    def layout(self) -> MapLayout | None:
        lay = self.meta.get("layout")
        if lay is None:
            return None
        return MapLayout.from_assignment(
            lay["rows"], lay["cols"], lay["grid_w"], lay["grid_h"], lay["alpha"], lay["pixel_pitch"]
        )

    def subset(self, sel) -> "Dataset":
        sel = np.asarray(sel)
        return replace(
            self,
            images=self.images[sel],
            labels=self.labels[sel],
            force_maps=self.force_maps[sel],
            clean_labels=self.clean_labels[sel],
            clean_maps=self.clean_maps[sel],
            indices=self.indices[sel],
        )


def box_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    h, w = img.shape[0] // factor, img.shape[1] // factor
    return img[: h * factor, : w * factor].reshape(h, factor, w, factor, -1).mean(axis=(1, 3))


def _random_tangent(rng, normal):
    t = rng.normal(size=3)
    t -= t.dot(normal) * normal
    return t / np.linalg.norm(t)


def probe_forces(protocol: ProbeProtocol, stiffness: float = STIFFNESS) -> np.ndarray:
    """Largest possible |F| per depth, used to validate the protocol against the envelope."""
    d = np.asarray(protocol.depths)
    return stiffness * d * np.sqrt(1.0 + protocol.shear_ratio**2)


def generate(
    surface: FingertipSurface,
    nodes: NodeSet,
    protocol: ProbeProtocol,
    w: int = 82,
    h: int = 60,
    leds: LedRing | None = None,
    camera: CameraModel | None = None,
    supersample: int = 2,
    layout: MapLayout | None = None,
    renderer: Renderer | None = None,
    stiffness: float = STIFFNESS,
    progress=None,
) -> Dataset:
    """Probe ``n_locations`` random surface points at every depth of the protocol.

    Images are rendered at ``supersample`` times the requested size and box
    averaged down. Labels carry Gaussian position and force noise; the
    noise-free labels are kept alongside.
    """
    fmax = probe_forces(protocol, stiffness)
    for depth, f in zip(protocol.depths, fmax):
        if f > FORCE_ENVELOPE:
            raise ValueError(f"depth {depth} mm gives up to {f:.3f} N, outside the {FORCE_ENVELOPE} N envelope")
    if supersample < 1:
        raise ValueError("supersample must be >= 1")
    if renderer is None:
        renderer = Renderer(surface, nodes, leds or LedRing(), camera or CameraModel())
    rw, rh = w * supersample, h * supersample

    rng = np.random.default_rng(protocol.seed)
    locs = surface.project(surface.sample_uniform(rng, protocol.n_locations))
    n_dep = len(protocol.depths)
    n_samp = protocol.n_locations * n_dep
    n_nodes = len(nodes)
    images = np.empty((n_samp, h, w, 3), dtype=np.float32)
    labels = np.empty((n_samp, 7), dtype=np.float32)
    clean_labels = np.empty((n_samp, 7), dtype=np.float32)
    maps = np.empty((n_samp, n_nodes, 3), dtype=np.float32)
    clean_maps = np.empty((n_samp, n_nodes, 3), dtype=np.float32)
    sig_f = np.asarray(protocol.force_sigma)

    k = 0
    for li in range(protocol.n_locations):
        p, nrm = locs[0][li], locs[1][li]
        for depth in protocol.depths:
            fn = stiffness * depth
            ft = rng.uniform(0.0, protocol.shear_ratio) * fn
            force = -fn * nrm + ft * _random_tangent(rng, nrm)
            clean = ContactState(p, force, protocol.indenter_radius)
            # truncated at 6 sigma so noisy and clean labels stay within that band
            dp = np.clip(rng.normal(size=3), -5.99, 5.99) * protocol.position_sigma
            df = np.clip(rng.normal(size=3), -5.99, 5.99) * sig_f
            noisy = ContactState(p + dp, force + df, protocol.indenter_radius)

            disp = deform(surface, nodes, clean, stiffness=stiffness)
            img = renderer.render(disp, rw, rh)
            images[k] = box_downsample(img, supersample)
            clean_labels[k] = clean.label()
            labels[k] = noisy.label()
            clean_maps[k] = ground_truth_map(nodes, clean)
            maps[k] = ground_truth_map(nodes, noisy)
            k += 1
        if progress is not None:
            progress(li + 1, protocol.n_locations)

    reference = box_downsample(renderer.reference(rw, rh), supersample).astype(np.float32)
    meta = _build_meta(surface, nodes, protocol, renderer, w, h, supersample, layout, stiffness)
    return Dataset(images, labels, maps, clean_labels, clean_maps, reference, np.arange(n_samp), meta)


def _build_meta(surface, nodes, protocol, renderer, w, h, supersample, layout, stiffness) -> dict:
    meta = {
        "format_version": FORMAT_VERSION,
        "surface": {
            "radius": surface.radius,
            "cyl_height": surface.cyl_height,
            "total_area": surface.total_area,
        },
        "nodes": {"positions": nodes.positions.tolist(), "normals": nodes.normals.tolist()},
        "protocol": asdict(protocol),
        "render": {
            "w": w,
            "h": h,
            "supersample": supersample,
            "stiffness": stiffness,
            "camera": asdict(renderer.camera),
            "leds": asdict(renderer.leds),
        },
        "layout": None,
        "norm": None,
    }
    if layout is not None:
        meta["layout"] = {
            "grid_w": layout.grid_w,
            "grid_h": layout.grid_h,
            "alpha": layout.alpha,
            "pixel_pitch": layout.pixel_pitch,
            "rows": layout.rows.tolist(),
            "cols": layout.cols.tolist(),
        }
    return meta


def split(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Location-disjoint split: every depth of a location lands on the same side."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    locs = np.unique(dataset.location_ids)
    if len(locs) < 2:
        raise ValueError("need at least two locations to split")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(locs)
    n_train = min(max(int(round(train_fraction * len(locs))), 1), len(locs) - 1)
    train_locs = np.sort(perm[:n_train])
    in_train = np.isin(dataset.location_ids, train_locs)
    return dataset.subset(np.flatnonzero(in_train)), dataset.subset(np.flatnonzero(~in_train))


@dataclass(frozen=True)
class NormStats:
    """Per-channel affine map to [-1, 1] (min-max) or to zero mean, unit std."""

    lo: np.ndarray
    hi: np.ndarray
    mode: str = "minmax"

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != hi.shape:
            raise ValueError("lo/hi shape mismatch")
        if self.mode not in ("minmax", "zscore"):
            raise ValueError(f"unknown normalisation mode {self.mode!r}")
        if self.mode == "minmax" and np.any(hi <= lo):
            raise ValueError("constant channel: max must exceed min")
        if self.mode == "zscore" and np.any(hi <= 0):
            raise ValueError("constant channel: std must be positive")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.mode == "zscore":
            return (x - self.lo) / self.hi
        return 2.0 * (x - self.lo) / (self.hi - self.lo) - 1.0

    def invert(self, y: np.ndarray) -> np.ndarray:
        if self.mode == "zscore":
            return y * self.hi + self.lo
        return self.lo + 0.5 * (y + 1.0) * (self.hi - self.lo)

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist(), "mode": self.mode}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["lo"]), np.asarray(d["hi"]), d.get("mode", "minmax"))


def fit_norm(values: np.ndarray, mode: str = "minmax") -> NormStats:
    """Statistics over every axis but the last (the channel axis)."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("cannot fit normalisation on an empty set")
    flat = v.reshape(-1, v.shape[-1])
    if mode == "zscore":
        return NormStats(flat.mean(axis=0), flat.std(axis=0), mode)
    return NormStats(flat.min(axis=0), flat.max(axis=0), mode)


def apply_norm(stats: NormStats, x: np.ndarray) -> np.ndarray:
    return stats.apply(np.asarray(x, dtype=float))


def invert_norm(stats: NormStats, y: np.ndarray) -> np.ndarray:
    return stats.invert(np.asarray(y, dtype=float))


def record_dtype(h: int, w: int, n_nodes: int) -> np.dtype:
    return np.dtype(
        [
            ("index", "<u4"),
            ("h", "<u4"),
            ("w", "<u4"),
            ("image", "<f4", (h, w, 3)),
            ("label", "<f4", (7,)),
            ("force_map", "<f4", (n_nodes, 3)),
            ("clean_label", "<f4", (7,)),
            ("clean_map", "<f4", (n_nodes, 3)),
        ]
    )


def save(dataset: Dataset, path: str, chunk: int = 256) -> None:
    os.makedirs(path, exist_ok=True)
    h, w = dataset.reference.shape[:2]
    n, n_nodes = len(dataset), dataset.force_maps.shape[1]
    meta = dict(dataset.meta)
    meta["n_samples"] = n
    meta["n_nodes"] = n_nodes
    meta["image"] = {"h": h, "w": w}
    with open(os.path.join(path, "manifest"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
        fh.write("\n")
    hdr = np.zeros(1, HEADER)
    hdr[0] = (MAGIC, FORMAT_VERSION, n, n_nodes, h, w)
    rec = record_dtype(h, w, n_nodes)
    with open(os.path.join(path, "samples.bin"), "wb") as fh:
        fh.write(hdr.tobytes())
        fh.write(np.ascontiguousarray(dataset.reference, dtype="<f4").tobytes())
        for s in range(0, n, chunk):
            e = min(s + chunk, n)
            buf = np.zeros(e - s, rec)
            buf["index"] = dataset.indices[s:e]
            buf["h"], buf["w"] = h, w
            buf["image"] = dataset.images[s:e]
            buf["label"] = dataset.labels[s:e]
            buf["force_map"] = dataset.force_maps[s:e]
            buf["clean_label"] = dataset.clean_labels[s:e]
            buf["clean_map"] = dataset.clean_maps[s:e]
            fh.write(buf.tobytes())


def load(path: str, mmap: bool = True) -> Dataset:
    """Read a container; with ``mmap`` the per-sample arrays stay on disk."""
    mpath = os.path.join(path, "manifest")
    bpath = os.path.join(path, "samples.bin")
    if not (os.path.isfile(mpath) and os.path.isfile(bpath)):
        raise FileNotFoundError(f"{path} is not a dataset container")
    with open(mpath, encoding="utf-8") as fh:
        meta = json.load(fh)
    hdr = np.fromfile(bpath, dtype=HEADER, count=1)
    if len(hdr) != 1 or hdr["magic"][0] != MAGIC:
        raise ValueError(f"{bpath}: bad magic")
    if int(hdr["version"][0]) != FORMAT_VERSION:
        raise ValueError(f"{bpath}: unsupported format version {int(hdr['version'][0])}")
    n, n_nodes, h, w = (int(hdr[k][0]) for k in ("n", "nodes", "h", "w"))
    ref_bytes = h * w * 3 * 4
    reference = np.fromfile(bpath, dtype="<f4", count=h * w * 3, offset=HEADER.itemsize).reshape(h, w, 3)
    rec = record_dtype(h, w, n_nodes)
    offset = HEADER.itemsize + ref_bytes
    if os.path.getsize(bpath) != offset + n * rec.itemsize:
        raise ValueError(f"{bpath}: size does not match header")
    if mmap:
        recs = np.memmap(bpath, dtype=rec, mode="r", offset=offset, shape=(n,))
    else:
        recs = np.fromfile(bpath, dtype=rec, count=n, offset=offset)
    for key in ("n_samples", "n_nodes", "image"):
        meta.pop(key, None)
    return Dataset(
        images=recs["image"],
        labels=recs["label"],
        force_maps=recs["force_map"],
        clean_labels=recs["clean_label"],
        clean_maps=recs["clean_map"],
        reference=reference,
        indices=np.asarray(recs["index"], dtype=np.int64),
        meta=meta,
    )


def renderer_from_meta(meta: dict) -> tuple[Renderer, int, int, int]:
    """Renderer and (w, h, supersample) that produced a dataset's images."""
    s = meta["surface"]
    surface = FingertipSurface(s["radius"], s["cyl_height"])
    pos = np.asarray(meta["nodes"]["positions"], dtype=float)
    nrm = np.asarray(meta["nodes"]["normals"], dtype=float)
    nodes = NodeSet(pos, nrm, np.full(len(pos), s["total_area"] / len(pos)))
    r = meta["render"]
    cam = dict(r["camera"])
    led = dict(r["leds"])
    for key in ("position", "native_size"):
        cam[key] = tuple(cam[key])
    led["elevation_deg"] = tuple(led["elevation_deg"])
    renderer = Renderer(surface, nodes, LedRing(**led), CameraModel(**cam))
    return renderer, int(r["w"]), int(r["h"]), int(r["supersample"])
