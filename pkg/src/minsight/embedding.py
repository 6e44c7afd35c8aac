"""2-D force-map layout for the curved node set.

Nodes are viewed from above, their x/y coordinates pulled towards the axis
in proportion to height, and matched one-to-one to pixel centres of a
``grid_h x grid_w`` image by minimum total squared distance.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assignment import AssignmentProblem, solve_assignment
from .geometry import NeighborGraph, NodeSet

DEFAULT_ALPHA = 0.0005
DEFAULT_GRID = (40, 40)
FIT_FRACTION = 0.95


def weighted_project(position, alpha: float, z_max: float) -> np.ndarray:
    """Shift x/y towards the axis by ``alpha * z / z_max`` of their value.

    ``position`` may be a single 3-vector or an (n, 3) array.
    """
    if z_max <= 0:
        raise ValueError("z_max must be positive")
    if hasattr(position, "position"):
        position = position.position
    p = np.asarray(position, dtype=float)
    shrink = 1.0 - alpha * p[..., 2] / z_max
    return p[..., :2] * shrink[..., None]


@dataclass(frozen=True)
class MapLayout:
    grid_w: int
    grid_h: int
    alpha: float
    pixel_pitch: float
    rows: np.ndarray
    cols: np.ndarray
    occupied_mask: np.ndarray = field(repr=False)

    def __post_init__(self):
        flat = self.rows * self.grid_w + self.cols
        if len(np.unique(flat)) != len(flat):
            raise ValueError("layout assigns two nodes to one pixel")
        if np.any((self.rows < 0) | (self.rows >= self.grid_h) | (self.cols < 0) | (self.cols >= self.grid_w)):
            raise ValueError("layout pixel outside grid")
        if int(self.occupied_mask.sum()) != len(self.rows):
            raise ValueError("occupied mask inconsistent with assignment")

    @property
    def n_nodes(self) -> int:
        return len(self.rows)

    @classmethod
    def from_assignment(cls, rows, cols, grid_w, grid_h, alpha, pixel_pitch) -> "MapLayout":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        mask = np.zeros((grid_h, grid_w), dtype=bool)
        mask[rows, cols] = True
        return cls(grid_w, grid_h, float(alpha), float(pixel_pitch), rows, cols, mask)


def fit_pitch(xy: np.ndarray, grid_w: int, grid_h: int) -> float:
    """mm per pixel such that the bounding square of ``xy`` spans 95% of the grid."""
    span = np.ptp(xy, axis=0).max()
    if span == 0:
        return 1.0
    return float(span / (FIT_FRACTION * min(grid_w, grid_h)))


def build_layout(
    nodes: NodeSet | np.ndarray,
    grid_w: int = DEFAULT_GRID[1],
    grid_h: int = DEFAULT_GRID[0],
    alpha: float = DEFAULT_ALPHA,
    pixel_pitch: float | None = None,
    z_max: float | None = None,
) -> MapLayout:
    pos = nodes.positions if isinstance(nodes, NodeSet) else np.asarray(nodes, dtype=float)
    n = len(pos)
    if grid_w * grid_h < n:
        raise ValueError(f"grid {grid_h}x{grid_w} too small for {n} nodes")
    if z_max is None:
        z_max = float(pos[:, 2].max()) if pos[:, 2].max() > 0 else 1.0
    xy = weighted_project(pos, alpha, z_max)
    if pixel_pitch is None:
        pixel_pitch = fit_pitch(xy, grid_w, grid_h)
    # pixel units: column along x, row along y, cloud centred on the grid
    pc = xy[:, 0] / pixel_pitch + 0.5 * grid_w
    pr = xy[:, 1] / pixel_pitch + 0.5 * grid_h
    cc, rr = np.meshgrid(np.arange(grid_w) + 0.5, np.arange(grid_h) + 0.5)
    cost = (pc[:, None] - cc.ravel()[None, :]) ** 2 + (pr[:, None] - rr.ravel()[None, :]) ** 2
    col_for_row, _ = solve_assignment(AssignmentProblem(cost))
    return MapLayout.from_assignment(
        col_for_row // grid_w, col_for_row % grid_w, grid_w, grid_h, alpha, pixel_pitch
    )


def smoothness_score(layout: MapLayout, graph: NeighborGraph) -> float:
    """Mean pixel distance between the assigned pixels of 3-D neighbours; lower is smoother."""
    if graph.n_nodes != layout.n_nodes:
        raise ValueError(f"graph has {graph.n_nodes} nodes, layout has {layout.n_nodes}")
    a, b = graph.edges[:, 0], graph.edges[:, 1]
    d = np.hypot(layout.rows[a] - layout.rows[b], layout.cols[a] - layout.cols[b])
    return float(d.mean())


def map_to_image(force_map: np.ndarray, layout: MapLayout) -> np.ndarray:
    """(n_nodes, 3) force map, or a batch (..., n_nodes, 3), to (..., grid_h, grid_w, 3)."""
    f = np.asarray(force_map)
    if f.shape[-2:] != (layout.n_nodes, 3):
        raise ValueError(f"force map shape {f.shape} does not match {layout.n_nodes} nodes")
    img = np.zeros(f.shape[:-2] + (layout.grid_h, layout.grid_w, 3), dtype=f.dtype)
    img[..., layout.rows, layout.cols, :] = f
    return img


def image_to_map(grid: np.ndarray, layout: MapLayout) -> np.ndarray:
    g = np.asarray(grid)
    if g.shape[-3:] != (layout.grid_h, layout.grid_w, 3):
        raise ValueError(f"grid shape {g.shape} does not match layout {layout.grid_h}x{layout.grid_w}")
    return g[..., layout.rows, layout.cols, :].copy()


LAYOUT_MAGIC = b"MNSL"
_LAYOUT_HEADER = np.dtype(
    [("magic", "S4"), ("version", "<u4"), ("n", "<u4"), ("grid_w", "<u4"), ("grid_h", "<u4"), ("alpha", "<f8"), ("pitch", "<f8")]
)


def save_layout(layout: MapLayout, path: str) -> None:
    """Little-endian header, then row and column indices as int32."""
    hdr = np.zeros(1, _LAYOUT_HEADER)
    hdr[0] = (LAYOUT_MAGIC, 1, layout.n_nodes, layout.grid_w, layout.grid_h, layout.alpha, layout.pixel_pitch)
    with open(path, "wb") as fh:
        fh.write(hdr.tobytes())
        fh.write(layout.rows.astype("<i4").tobytes())
        fh.write(layout.cols.astype("<i4").tobytes())


def load_layout(path: str) -> MapLayout:
    raw = np.fromfile(path, dtype=np.uint8)
    if len(raw) < _LAYOUT_HEADER.itemsize:
        raise ValueError(f"{path}: truncated layout file")
    hdr = raw[: _LAYOUT_HEADER.itemsize].view(_LAYOUT_HEADER)[0]
    if hdr["magic"] != LAYOUT_MAGIC or hdr["version"] != 1:
        raise ValueError(f"{path}: not a layout file")
    n = int(hdr["n"])
    body = raw[_LAYOUT_HEADER.itemsize :]
    if len(body) != 8 * n:
        raise ValueError(f"{path}: size does not match header")
    idx = body.view("<i4")
    return MapLayout.from_assignment(
        idx[:n], idx[n:], int(hdr["grid_w"]), int(hdr["grid_h"]), float(hdr["alpha"]), float(hdr["pitch"])
    )
