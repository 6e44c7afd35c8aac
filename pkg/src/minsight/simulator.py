"""Synthetic forward model of the sensor: contact -> (camera image, force map).

The elastomer, illumination and optics are replaced by smooth closed-form
stand-ins so that every quantity downstream has an exact ground truth:

* deformation: Gaussian dent of depth ``|F| / k_e`` plus shear drag;
* illumination: six collimated RGB LEDs with a soft 10 degree cone edge
  and a wide scattered component, Lambertian shading on the inner wall;
* optics: equidistant fisheye camera below the sensing region.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import ConvexHull, cKDTree

from .geometry import FingertipSurface, NeighborGraph, NodeSet

STIFFNESS = 2.0  # N/mm, normal
SHEAR_STIFFNESS = 0.5  # N/mm, tangential drag
DEFORM_SIGMA_FACTOR = 0.6
FORCE_SIGMA_FACTOR = 0.5
FORCE_ENVELOPE = 5.0  # N
NATIVE_SIZE = (410, 308)  # (w, h), the 100% scale


@dataclass(frozen=True)
class ContactState:
    node_center: np.ndarray
    force: np.ndarray
    indenter_radius: float
    contact: bool = True

    def __post_init__(self):
        f = np.asarray(self.force, dtype=float).reshape(3)
        object.__setattr__(self, "force", f)
        object.__setattr__(self, "node_center", np.asarray(self.node_center, dtype=float).reshape(3))
        if not np.all(np.isfinite(f)):
            raise ValueError("force must be finite")
        if not self.contact and np.any(f != 0):
            raise ValueError("non-contact state must carry zero force")
        if np.linalg.norm(f) > FORCE_ENVELOPE:
            raise ValueError(f"|F| = {np.linalg.norm(f):.3f} N outside the {FORCE_ENVELOPE} N envelope")
        if self.indenter_radius <= 0:
            raise ValueError("indenter radius must be positive")

    @classmethod
    def none(cls, indenter_radius: float = 4.0) -> "ContactState":
        return cls(np.zeros(3), np.zeros(3), indenter_radius, contact=False)

    def label(self) -> np.ndarray:
        """7-vector: force xyz, location xyz, contact flag."""
        return np.concatenate([self.force, self.node_center, [1.0 if self.contact else 0.0]])


@dataclass(frozen=True)
class LedRing:
    """Six emitters, colours alternating R, G, B around the ring."""

    ring_radius: float = 4.0
    height: float = 2.0
    half_angle_deg: float = 10.0
    edge_width_deg: float = 4.0
    aperture: float = 2.4
    elevation_deg: tuple = (35.0, 80.0)
    scatter: float = 0.4
    intensity: float = 0.7

    @property
    def azimuths(self) -> np.ndarray:
        return np.deg2rad(np.arange(6) * 60.0)

    @property
    def colors(self) -> np.ndarray:
        return np.arange(6) % 3

    @property
    def positions(self) -> np.ndarray:
        a = self.azimuths
        return np.column_stack([self.ring_radius * np.cos(a), self.ring_radius * np.sin(a), np.full(6, self.height)])

    @property
    def axes(self) -> np.ndarray:
        a = self.azimuths
        el = np.deg2rad(np.where(np.arange(6) % 2 == 0, self.elevation_deg[0], self.elevation_deg[1]))
        return np.column_stack([np.cos(el) * np.cos(a), np.cos(el) * np.sin(a), np.full(6, np.sin(el))])

    def cone_falloff(self, cos_off_axis: np.ndarray) -> np.ndarray:
        """Collimated beam with a logistic edge at the half-angle, plus scattered cosine lobe."""
        psi = np.degrees(np.arccos(np.clip(cos_off_axis, -1.0, 1.0)))
        core = 1.0 / (1.0 + np.exp((psi - self.half_angle_deg) / self.edge_width_deg))
        core0 = 1.0 / (1.0 + np.exp(-self.half_angle_deg / self.edge_width_deg))
        return (1.0 - self.scatter) * core / core0 + self.scatter * np.maximum(cos_off_axis, 0.0)


@dataclass(frozen=True)
class CameraModel:
    """Equidistant fisheye on the sensor axis looking up (+z)."""

    position: tuple = (0.0, 0.0, -2.5)
    fov_deg: float = 160.0
    native_size: tuple = (1020, 720)
    roll_deg: float = 0.0

    def focal(self, w: int, h: int) -> float:
        """Pixels per radian; the full field of view spans the image height."""
        return 0.5 * h / np.deg2rad(0.5 * self.fov_deg)

    def rays(self, w: int, h: int) -> np.ndarray:
        """Unit ray directions per pixel, shape (h, w, 3); NaN beyond the field of view."""
        f = self.focal(w, h)
        cols, rows = np.meshgrid(np.arange(w) + 0.5 - 0.5 * w, np.arange(h) + 0.5 - 0.5 * h)
        theta = np.hypot(cols, rows) / f
        phi = np.arctan2(rows, cols) + np.deg2rad(self.roll_deg)
        d = np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], axis=-1)
        d[theta > np.deg2rad(0.5 * self.fov_deg)] = np.nan
        return d

    def project(self, points: np.ndarray, w: int, h: int) -> np.ndarray:
        """Pixel coordinates (col, row) of 3-D points, continuous."""
        rel = np.atleast_2d(points) - np.asarray(self.position)
        theta = np.arccos(np.clip(rel[:, 2] / np.linalg.norm(rel, axis=1), -1.0, 1.0))
        phi = np.arctan2(rel[:, 1], rel[:, 0]) - np.deg2rad(self.roll_deg)
        r = self.focal(w, h) * theta
        return np.column_stack([0.5 * w + r * np.cos(phi), 0.5 * h + r * np.sin(phi)])


def deform(
    surface: FingertipSurface,
    nodes: NodeSet,
    contact: ContactState,
    stiffness: float = STIFFNESS,
    sigma_factor: float = DEFORM_SIGMA_FACTOR,
    shear_stiffness: float = SHEAR_STIFFNESS,
) -> np.ndarray:
    """Per-node displacement (n, 3) in mm.

    Inward dent ``|F| / k_e * K`` along each node normal plus shear drag
    ``F_t / k_s * K`` projected on each tangent plane, with the Gaussian
    kernel ``K = exp(-g^2 / (2 sigma^2))`` of chord distance ``g``.
    """
    n = len(nodes)
    if not contact.contact:
        return np.zeros((n, 3))
    fmag = np.linalg.norm(contact.force)
    if fmag > FORCE_ENVELOPE:
        raise ValueError(f"|F| = {fmag:.3f} N outside the simulator envelope")
    sigma = sigma_factor * contact.indenter_radius
    g2 = np.sum((nodes.positions - contact.node_center) ** 2, axis=1)
    kern = np.exp(-g2 / (2.0 * sigma**2))
    _, nc = surface.project(contact.node_center[None, :])
    nc = nc[0]
    shear = contact.force - np.dot(contact.force, nc) * nc
    nrm = nodes.normals
    shear_t = shear[None, :] - (nrm @ shear)[:, None] * nrm
    return kern[:, None] * (shear_t / shear_stiffness - (fmag / stiffness) * nrm)


def ground_truth_map(
    nodes: NodeSet,
    contact: ContactState,
    sigma_factor: float = FORCE_SIGMA_FACTOR,
) -> np.ndarray:
    """Distribute the contact force over nodes within two sigma of the contact point."""
    n = len(nodes)
    if not contact.contact:
        return np.zeros((n, 3))
    sigma = sigma_factor * contact.indenter_radius
    g2 = np.sum((nodes.positions - contact.node_center) ** 2, axis=1)
    support = g2 <= (2.0 * sigma) ** 2
    if not support.any():
        raise ValueError("no node inside the contact support")
    w = np.where(support, np.exp(-g2 / (2.0 * sigma**2)), 0.0)
    w /= w.sum()
    return w[:, None] * contact.force[None, :]


def _tangent_frames(normals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.where(np.abs(normals[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    e1 = np.cross(helper, normals)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    return e1, np.cross(normals, e1)


def _face_adjacency(faces: np.ndarray) -> np.ndarray:
    """Neighbour across the edge opposite each vertex; -1 on the boundary."""
    m = len(faces)
    adj = np.full((m, 3), -1, dtype=np.int64)
    owner = {}
    for f, tri in enumerate(faces):
        for k in range(3):
            key = tuple(sorted((int(tri[(k + 1) % 3]), int(tri[(k + 2) % 3]))))
            if key in owner:
                g, kg = owner[key]
                adj[f, k] = g
                adj[g, kg] = f
            else:
                owner[key] = (f, k)
    return adj


def _ray_barycentric(origin: np.ndarray, dirs: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of ray/plane hits with each triangle (Moller-Trumbore)."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    e1, e2 = b - a, c - a
    pvec = np.cross(dirs, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    tvec = origin - a
    u = np.einsum("ij,ij->i", tvec, pvec) / det
    qvec = np.cross(tvec, e1)
    v = np.einsum("ij,ij->i", dirs, qvec) / det
    return np.column_stack([1.0 - u - v, u, v])


@dataclass
class Renderer:
    """Fisheye renderer over a triangulation of the node set.

    The triangulation is the convex hull of the nodes mapped conformally
    onto a sphere, with the faces closing the base opening removed. Rest
    ray hits and the reference image are cached per output resolution;
    a deformed frame re-traces and re-shades only pixels whose triangle
    contains a moving node, walking across neighbouring displaced
    triangles until the barycentric coordinates are non-negative.
    """

    surface: FingertipSurface
    nodes: NodeSet
    leds: LedRing = field(default_factory=LedRing)
    camera: CameraModel = field(default_factory=CameraModel)
    n_fit: int = 12
    max_walk: int = 8
    move_tol: float = 1e-7
    _cache: dict = field(default_factory=dict, repr=False)

    @cached_property
    def _sphere_hull(self) -> ConvexHull:
        return ConvexHull(self.surface.to_sphere(self.nodes.positions))

    @cached_property
    def _is_base(self) -> np.ndarray:
        return self._sphere_hull.equations[:, 2] < -0.95

    @cached_property
    def faces(self) -> np.ndarray:
        """Outward-oriented triangles of the sensing surface."""
        hull = self._sphere_hull
        faces = hull.simplices[~self._is_base].copy()
        eq = hull.equations[~self._is_base]
        sph = hull.points
        a, b, c = (sph[faces[:, k]] for k in range(3))
        flip = np.einsum("ij,ij->i", np.cross(b - a, c - a), eq[:, :3]) < 0
        faces[flip] = faces[flip][:, [0, 2, 1]]
        return faces

    @cached_property
    def face_adjacency(self) -> np.ndarray:
        return _face_adjacency(self.faces)

    @cached_property
    def _fit(self):
        """Per-node least-squares operator from neighbour offsets to the 3x2 surface Jacobian."""
        pos, nrm = self.nodes.positions, self.nodes.normals
        _, nb = cKDTree(pos).query(pos, k=self.n_fit + 1)
        nb = nb[:, 1:]
        e1, e2 = _tangent_frames(nrm)
        rel = pos[nb] - pos[:, None, :]
        ab = np.stack([np.einsum("nkj,nj->nk", rel, e1), np.einsum("nkj,nj->nk", rel, e2)], axis=-1)
        return nb, np.linalg.pinv(ab)

    def _fitted_normals(self, positions: np.ndarray) -> np.ndarray:
        nb, pinv = self._fit
        rel = positions[nb] - positions[:, None, :]
        jac = np.einsum("nak,nkj->naj", pinv, rel)
        nrm = np.cross(jac[:, 0], jac[:, 1])
        return nrm / np.linalg.norm(nrm, axis=1, keepdims=True)

    @cached_property
    def _rest_fitted_normals(self) -> np.ndarray:
        return self._fitted_normals(self.nodes.positions)

    def node_normals(self, displacement: np.ndarray) -> np.ndarray:
        """Analytic rest normals corrected by the change of the fitted normals."""
        moved = self._fitted_normals(self.nodes.positions + displacement)
        nrm = self.nodes.normals + moved - self._rest_fitted_normals
        return nrm / np.linalg.norm(nrm, axis=1, keepdims=True)

    def hits(self, w: int, h: int):
        """Rest hits: (flat pixel index, face index, barycentrics, ray directions)."""
        key = ("hits", w, h)
        if key not in self._cache:
            self._cache[key] = self._intersect(w, h)
        return self._cache[key]

    def _intersect(self, w, h):
        origin = np.asarray(self.camera.position, dtype=float)
        d = self.camera.rays(w, h).reshape(-1, 3)
        pix = np.flatnonzero(~np.isnan(d[:, 0]))
        t = self.surface.intersect_ray(origin, d[pix])
        ok = ~np.isnan(t)
        pix, dirs, t = pix[ok], d[pix][ok], t[ok]
        sph = self.surface.to_sphere(origin + t[:, None] * dirs)

        hull = self._sphere_hull
        eq = hull.equations
        face_id = np.full(len(eq), -1, dtype=np.int64)
        face_id[~self._is_base] = np.arange(int((~self._is_base).sum()))
        hit_face = np.empty(len(pix), dtype=np.int64)
        chunk = 4096
        for s in range(0, len(pix), chunk):
            nd = sph[s : s + chunk] @ eq[:, :3].T
            with np.errstate(divide="ignore"):
                te = np.where(nd > 0, -eq[None, :, 3] / nd, np.inf)
            hit_face[s : s + chunk] = face_id[np.argmin(te, axis=1)]
        ok = hit_face >= 0
        pix, dirs, hit_face = pix[ok], dirs[ok], hit_face[ok]
        hit_face, bary = self._walk(self.nodes.positions, hit_face, dirs)
        return pix, hit_face, bary, dirs

    def _walk(self, positions, face, dirs):
        origin = np.asarray(self.camera.position, dtype=float)
        adj = self.face_adjacency
        face = face.copy()
        bary = _ray_barycentric(origin, dirs, positions[self.faces[face]])
        for _ in range(self.max_walk):
            worst = np.argmin(bary, axis=1)
            outside = bary[np.arange(len(face)), worst] < -1e-12
            nxt = adj[face, worst]
            move = outside & (nxt >= 0)
            if not move.any():
                break
            face[move] = nxt[move]
            bary[move] = _ray_barycentric(origin, dirs[move], positions[self.faces[face[move]]])
        # rays leaving through the rim keep the clamped boundary triangle
        bary = np.clip(bary, 0.0, None)
        bary /= bary.sum(axis=1, keepdims=True)
        return face, bary

    def _shade(self, x: np.ndarray, nn: np.ndarray) -> np.ndarray:
        out = np.zeros((len(x), 3))
        leds = self.leds
        for p, axis, color in zip(leds.positions, leds.axes, leds.colors):
            lv = p - x
            lhat = lv / np.linalg.norm(lv, axis=1, keepdims=True)
            lambert = np.maximum(0.0, -np.einsum("ij,ij->i", nn, lhat))
            out[:, color] += leds.intensity * leds.cone_falloff(-(lhat @ axis)) * lambert
        return np.clip(out, 0.0, 1.0)

    def _sample(self, positions, normals, face, bary):
        tri = self.faces[face]
        x = np.einsum("pk,pkj->pj", bary, positions[tri])
        nn = np.einsum("pk,pkj->pj", bary, normals[tri])
        return x, nn / np.linalg.norm(nn, axis=1, keepdims=True)

    def reference(self, w: int, h: int) -> np.ndarray:
        key = ("ref", w, h)
        if key not in self._cache:
            pix, face, bary, _ = self.hits(w, h)
            img = np.zeros((h * w, 3))
            img[pix] = self._shade(*self._sample(self.nodes.positions, self.nodes.normals, face, bary))
            img = img.reshape(h, w, 3)
            img.setflags(write=False)
            self._cache[key] = img
        return self._cache[key]

    def render(self, displacement: np.ndarray | None, w: int, h: int) -> np.ndarray:
        """RGB image (h, w, 3) in [0, 1]; pixels whose ray misses the mesh are 0."""
        n = len(self.nodes)
        ref = self.reference(w, h)
        if displacement is None:
            return ref.copy()
        displacement = np.asarray(displacement, dtype=float)
        if displacement.shape != (n, 3):
            raise ValueError(f"displacement shape {displacement.shape} != ({n}, 3)")
        moving = np.linalg.norm(displacement, axis=1) > self.move_tol
        if not moving.any():
            return ref.copy()
        pix, face, _, dirs = self.hits(w, h)
        sel = np.flatnonzero(moving[self.faces[face]].any(axis=1))
        pos = self.nodes.positions + displacement
        nrm = self.node_normals(displacement)
        f_sel, b_sel = self._walk(pos, face[sel], dirs[sel])
        img = ref.reshape(-1, 3).copy()
        img[pix[sel]] = self._shade(*self._sample(pos, nrm, f_sel, b_sel))
        return img.reshape(h, w, 3)


def _barycentric(x: np.ndarray, tri: np.ndarray) -> np.ndarray:
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    v0, v1, v2 = b - a, c - a, x - a
    d00 = np.einsum("ij,ij->i", v0, v0)
    d01 = np.einsum("ij,ij->i", v0, v1)
    d11 = np.einsum("ij,ij->i", v1, v1)
    d20 = np.einsum("ij,ij->i", v2, v0)
    d21 = np.einsum("ij,ij->i", v2, v1)
    den = d00 * d11 - d01 * d01
    wb = (d11 * d20 - d01 * d21) / den
    wc = (d00 * d21 - d01 * d20) / den
    return np.column_stack([1.0 - wb - wc, wb, wc])


def render(surface, displacement, leds, cam, w, h, nodes) -> np.ndarray:
    """Functional form of :meth:`Renderer.render`; builds a fresh renderer."""
    return Renderer(surface, nodes, leds, cam).render(displacement, w, h)


def sensor_forward(
    renderer: Renderer,
    contact: ContactState,
    w: int,
    h: int,
    stiffness: float = STIFFNESS,
) -> tuple[np.ndarray, np.ndarray]:
    disp = deform(renderer.surface, renderer.nodes, contact, stiffness=stiffness)
    return renderer.render(disp, w, h), ground_truth_map(renderer.nodes, contact)
