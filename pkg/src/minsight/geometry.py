"""Fingertip sensing surface: a cylinder of radius 11 mm capped by a hemisphere.

Sensor frame: z up along the fingertip axis, origin at the centre of the
sensing region's base rim. Lengths are in millimetres.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

SENSOR_DIAMETER = 22.0
SENSING_AREA = 1740.0


class SamplingError(RuntimeError):
    """Raised when node sampling cannot place the requested number of nodes."""


@dataclass(frozen=True)
class FingertipSurface:
    radius: float
    cyl_height: float

    @property
    def cap_area(self) -> float:
        return 2.0 * np.pi * self.radius**2

    @property
    def cyl_area(self) -> float:
        return 2.0 * np.pi * self.radius * self.cyl_height

    @property
    def total_area(self) -> float:
        return self.cap_area + self.cyl_area

    @property
    def z_max(self) -> float:
        """Height of the apex above the base rim."""
        return self.cyl_height + self.radius

    @property
    def meridian_length(self) -> float:
        return self.cyl_height + 0.5 * np.pi * self.radius

    @property
    def cap_center(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.cyl_height])

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Closest-point projection of arbitrary points onto the surface.

        Returns (positions, outward normals), both shaped like ``points``.
        """
        p = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.empty_like(p)
        nrm = np.empty_like(p)
        on_cap = p[:, 2] > self.cyl_height

        rel = p[on_cap] - self.cap_center
        d = np.linalg.norm(rel, axis=1, keepdims=True)
        d[d == 0] = 1.0
        nrm[on_cap] = rel / d
        out[on_cap] = self.cap_center + self.radius * nrm[on_cap]

        q = p[~on_cap]
        rho = np.hypot(q[:, 0], q[:, 1])
        rho[rho == 0] = 1.0
        n = np.column_stack([q[:, 0] / rho, q[:, 1] / rho, np.zeros(len(q))])
        nrm[~on_cap] = n
        out[~on_cap] = np.column_stack(
            [self.radius * n[:, 0], self.radius * n[:, 1], np.clip(q[:, 2], 0.0, self.cyl_height)]
        )
        return out.reshape(np.shape(points)), nrm.reshape(np.shape(points))

    def to_sphere(self, points: np.ndarray) -> np.ndarray:
        """Conformal map of surface points onto the unit sphere.

        The cap keeps its latitude; the cylinder is unrolled with the
        Mercator ordinate below the equator, so triangles that are
        well shaped on the sphere are well shaped on the surface.
        """
        p = np.atleast_2d(points)
        u = np.arctan2(p[:, 1], p[:, 0])
        dz = (p[:, 2] - self.cyl_height) / self.radius
        lat = np.where(dz > 0, np.arcsin(np.clip(dz, 0.0, 1.0)), np.arctan(np.sinh(np.minimum(dz, 0.0))))
        return np.column_stack([np.cos(lat) * np.cos(u), np.cos(lat) * np.sin(u), np.sin(lat)])

    def intersect_ray(self, origin, dirs: np.ndarray) -> np.ndarray:
        """Ray parameter of the exit hit through the open base, NaN on a miss.

        ``origin`` must lie on the axis below the cap centre; ``dirs`` are
        unit vectors of shape (m, 3).
        """
        o = np.asarray(origin, dtype=float)
        d = np.atleast_2d(dirs)
        r, h = self.radius, self.cyl_height
        a = d[:, 0] ** 2 + d[:, 1] ** 2
        b = o[0] * d[:, 0] + o[1] * d[:, 1]
        c = o[0] ** 2 + o[1] ** 2 - r**2
        with np.errstate(divide="ignore", invalid="ignore"):
            t_cyl = (-b + np.sqrt(b**2 - a * c)) / a
        z_cyl = o[2] + t_cyl * d[:, 2]
        oc = o - self.cap_center
        bs = d @ oc
        disc = bs**2 - (oc @ oc - r**2)
        t_sph = -bs + np.sqrt(np.maximum(disc, 0.0))
        t = np.where((a > 0) & (z_cyl <= h), t_cyl, t_sph)
        z = o[2] + t * d[:, 2]
        ok = (z >= 0.0) & np.isfinite(t) & (t > 0) & ((z <= h) | (disc >= 0))
        return np.where(ok, t, np.nan)

    def sample_uniform(self, rng: np.random.Generator, m: int) -> np.ndarray:
        """Area-uniform random points on the surface, shape (m, 3)."""
        u = rng.uniform(0.0, 2.0 * np.pi, m)
        on_cap = rng.uniform(0.0, self.total_area, m) < self.cap_area
        # Archimedes: height on a sphere is uniform under area measure.
        zc = rng.uniform(0.0, self.radius, m)
        zl = rng.uniform(0.0, self.cyl_height, m)
        rho = np.where(on_cap, np.sqrt(np.maximum(self.radius**2 - zc**2, 0.0)), self.radius)
        z = np.where(on_cap, self.cyl_height + zc, zl)
        return np.column_stack([rho * np.cos(u), rho * np.sin(u), z])


def build_surface(diameter: float = SENSOR_DIAMETER, sensing_area: float = SENSING_AREA) -> FingertipSurface:
    """Capsule whose cylinder height is solved so the total area matches ``sensing_area``."""
    r = 0.5 * diameter
    cap = 2.0 * np.pi * r**2
    if sensing_area <= cap:
        raise ValueError("sensing area smaller than the hemispherical cap")
    return FingertipSurface(radius=r, cyl_height=(sensing_area - cap) / (2.0 * np.pi * r))


def surface_point(surface: FingertipSurface, u: float, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Position and outward normal at azimuth ``u`` and meridian parameter ``t``.

    ``t`` runs by arc length from the base rim (0) to the apex (1).
    """
    if not 0.0 <= u < 2.0 * np.pi:
        raise ValueError(f"azimuth {u} outside [0, 2pi)")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"meridian parameter {t} outside [0, 1]")
    r, h = surface.radius, surface.cyl_height
    s = t * surface.meridian_length
    cu, su = np.cos(u), np.sin(u)
    if s <= h:
        return np.array([r * cu, r * su, s]), np.array([cu, su, 0.0])
    phi = (s - h) / r
    if t == 1.0:
        phi = 0.5 * np.pi
    n = np.array([np.cos(phi) * cu, np.cos(phi) * su, np.sin(phi)])
    if t == 1.0:
        n = np.array([0.0, 0.0, 1.0])
    return np.array([0.0, 0.0, h]) + r * n, n


@dataclass(frozen=True)
class NodeSet:
    """Discretisation nodes of the sensing surface (array-of-structs as arrays)."""

    positions: np.ndarray
    normals: np.ndarray
    area_weights: np.ndarray

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def indices(self) -> np.ndarray:
        return np.arange(len(self))

    def node(self, i: int) -> "SurfaceNode":
        return SurfaceNode(i, self.positions[i], self.normals[i], float(self.area_weights[i]))


@dataclass(frozen=True)
class SurfaceNode:
    index: int
    position: np.ndarray
    normal: np.ndarray
    area_weight: float


def _dart_throw(surface, rng, n, r_min, max_darts):
    pts = np.empty((n, 3))
    count = 0
    tried = 0
    batch = 256
    while count < n and tried < max_darts:
        cand = surface.sample_uniform(rng, batch)
        tried += batch
        for c in cand:
            if count and np.min(np.sum((pts[:count] - c) ** 2, axis=1)) < r_min**2:
                continue
            pts[count] = c
            count += 1
            if count == n:
                break
    return pts[:count]


def sample_nodes(
    surface: FingertipSurface,
    n: int,
    seed: int,
    lloyd_iters: int = 12,
    max_retries: int = 8,
) -> NodeSet:
    """Blue-noise node set: dart throwing with a minimum distance, then Lloyd relaxation.

    The rejection radius starts at 0.8 of the hexagonal-lattice spacing for
    ``n`` nodes and shrinks by 10% per failed attempt.
    """
    if n < 4:
        raise ValueError("need at least 4 nodes")
    rng = np.random.default_rng(seed)
    spacing = np.sqrt(2.0 * surface.total_area / (n * np.sqrt(3.0)))
    r_min = 0.8 * spacing
    for _ in range(max_retries):
        pts = _dart_throw(surface, rng, n, r_min, max_darts=60 * n + 2000)
        if len(pts) == n:
            break
        r_min *= 0.9
    else:
        raise SamplingError(f"could not place {n} nodes after {max_retries} retries")

    density = max(40 * n, 20000)
    for _ in range(lloyd_iters):
        probe = surface.sample_uniform(rng, density)
        owner = cKDTree(pts).query(probe)[1]
        counts = np.bincount(owner, minlength=n)
        sums = np.zeros((n, 3))
        np.add.at(sums, owner, probe)
        moved = counts > 0
        pts[moved] = sums[moved] / counts[moved, None]
        pts, _ = surface.project(pts)

    pts, normals = surface.project(pts)
    weights = np.full(n, surface.total_area / n)
    return NodeSet(positions=pts, normals=normals, area_weights=weights)


@dataclass(frozen=True)
class NeighborGraph:
    """Symmetric k-nearest-neighbour graph with chord edge lengths."""

    edges: np.ndarray  # (m, 2) with i < j
    lengths: np.ndarray
    k: int
    n_nodes: int

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n_nodes)

    def adjacency(self):
        m = len(self.edges)
        rows = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        cols = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        vals = np.concatenate([self.lengths, self.lengths])
        return coo_matrix((vals, (rows, cols)), shape=(self.n_nodes, self.n_nodes)).tocsr() if m else None

    def is_connected(self) -> bool:
        ncomp, _ = connected_components(self.adjacency(), directed=False)
        return ncomp == 1


def build_neighbor_graph(nodes: NodeSet | np.ndarray, k: int = 6) -> NeighborGraph:
    if k < 3:
        raise ValueError("k must be at least 3")
    pos = nodes.positions if isinstance(nodes, NodeSet) else np.asarray(nodes, dtype=float)
    n = len(pos)
    kk = min(k, n - 1)
    _, idx = cKDTree(pos).query(pos, k=kk + 1)
    i = np.repeat(np.arange(n), kk)
    j = idx[:, 1:].ravel()
    pairs = np.unique(np.sort(np.column_stack([i, j]), axis=1), axis=0)
    lengths = np.linalg.norm(pos[pairs[:, 0]] - pos[pairs[:, 1]], axis=1)
    return NeighborGraph(edges=pairs, lengths=lengths, k=k, n_nodes=n)


def nearest_neighbor_distances(positions: np.ndarray) -> np.ndarray:
    d, _ = cKDTree(positions).query(positions, k=2)
    return d[:, 1]
