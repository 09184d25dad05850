"""Cross-view cell correspondences through a shared ellipsoid.

Object frame: x forward (semi-axis a), y left (b), z up (c).  View ``v`` is a
perspective camera on a circle of radius ``d`` around the z axis at azimuth
``layout.bins[v]`` and a fixed elevation, looking at the origin.  Image axes:
u to the right, v downwards.

Each view template is fitted to the silhouette of the ellipsoid: the grid is
centered on the silhouette's bounding box and stretched so the box spans it.
Cell centers are then cast back as rays; the nearest intersection is the
cell's surface point.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import CellRef, TemplateLayout

GRID_RELATIONS = ("h", "v", "d1", "d2", "cell")
RELATIONS = GRID_RELATIONS + ("mv",)


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class EllipsoidSpec:
    a: float = 2.0
    b: float = 1.0
    c: float = 0.8

    def __post_init__(self):
        if min(self.a, self.b, self.c) <= 0:
            raise GeometryError("ellipsoid semi-axes must be positive")

    @property
    def axes(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c], dtype=float)

    @property
    def max_axis(self) -> float:
        return max(self.a, self.b, self.c)

    def residual(self, p) -> float:
        """``(x/a)^2 + (y/b)^2 + (z/c)^2 - 1``."""
        return float(np.sum((np.asarray(p) / self.axes) ** 2) - 1.0)


@dataclass(frozen=True)
class CameraSpec:
    """Fixed perspective camera shared by all views.

    ``distance=None`` means 3x the largest semi-axis.  ``focal`` does not
    change which surface point a cell hits, because the grid is re-fitted to
    the silhouette in image units; it is kept for completeness.
    """

    elevation: float = 10.0
    distance: float | None = None
    focal: float = 1.0

    def resolved_distance(self, ellipsoid: EllipsoidSpec) -> float:
        d = 3.0 * ellipsoid.max_axis if self.distance is None else float(self.distance)
        if d <= ellipsoid.max_axis:
            raise GeometryError(
                f"camera distance {d} must exceed the largest semi-axis {ellipsoid.max_axis}")
        if self.focal <= 0:
            raise GeometryError("focal length must be positive")
        return d


@dataclass(frozen=True)
class SurfaceHit:
    cell: CellRef
    point: np.ndarray


@dataclass(frozen=True)
class CellPairSet:
    relation: str
    pairs: tuple

    def __post_init__(self):
        if self.relation not in RELATIONS:
            raise ValueError(f"unknown relation {self.relation!r}")
        if len(set(self.pairs)) != len(self.pairs):
            raise ValueError("duplicate pairs")

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def as_set(self) -> set:
        return set(self.pairs)


def camera_pose(azimuth_deg: float, elevation_deg: float, distance: float):
    """Return camera center and world-to-camera rotation (rows: right, down, forward)."""
    az, el = np.deg2rad(azimuth_deg), np.deg2rad(elevation_deg)
    center = distance * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    forward = -center / np.linalg.norm(center)
    right = np.cross(forward, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return center, np.stack([right, down, forward])


def silhouette_bbox(ellipsoid: EllipsoidSpec, center, rot, focal: float):
    """Exact image bounding box ``(u0, u1, v0, v1)`` of the ellipsoid outline.

    The outline is the image of the dual quadric ``diag(a^2, b^2, c^2, -1)``;
    a vertical tangent line ``u = t`` satisfies ``l^T C* l = 0`` with
    ``l = (1, 0, -t)``, a quadratic in ``t`` (likewise for horizontal lines).
    """
    K = np.diag([focal, focal, 1.0])
    P = K @ np.hstack([rot, -(rot @ center)[:, None]])
    Q = np.diag(np.append(ellipsoid.axes ** 2, -1.0))
    C = P @ Q @ P.T
    out = []
    for i in (0, 1):
        # C_ii - 2 t C_i2 + t^2 C_22 = 0
        roots = np.roots([C[2, 2], -2.0 * C[i, 2], C[i, i]])
        if np.iscomplexobj(roots) and np.any(np.abs(roots.imag) > 1e-9):
            raise GeometryError("camera inside or touching the ellipsoid")
        roots = np.sort(roots.real)
        out.extend(roots)
    return tuple(out)


def ray_ellipsoid(origin, direction, ellipsoid: EllipsoidSpec):
    """Nearest positive ray parameter hitting the ellipsoid, or None."""
    inv = 1.0 / ellipsoid.axes
    o, d = origin * inv, direction * inv
    A = d @ d
    B = 2.0 * (o @ d)
    Cc = o @ o - 1.0
    disc = B * B - 4.0 * A * Cc
    if disc < 0:
        return None
    sq = np.sqrt(disc)
    # numerically stable root pair
    q = -0.5 * (B + np.copysign(sq, B))
    roots = sorted(r for r in (q / A, Cc / q if q != 0 else np.inf) if np.isfinite(r))
    for t in roots:
        if t > 0:
            return t
    return None


class ViewRig:
    """Cameras for every view of a layout, with grids fitted to the silhouette."""

    def __init__(self, layout: TemplateLayout, ellipsoid: EllipsoidSpec,
                 camera: CameraSpec = CameraSpec()):
        self.layout = layout
        self.ellipsoid = ellipsoid
        self.camera = camera
        self.distance = camera.resolved_distance(ellipsoid)
        self.poses = [camera_pose(az, camera.elevation, self.distance) for az in layout.bins]
        self.boxes = [silhouette_bbox(ellipsoid, c, R, camera.focal) for c, R in self.poses]

    def cell_ray(self, cell: CellRef):
        lay = self.layout
        lay.check_cell(cell)
        u0, u1, v0, v1 = self.boxes[cell.view]
        u = u0 + (cell.col + 0.5) * (u1 - u0) / lay.cols
        v = v0 + (cell.row + 0.5) * (v1 - v0) / lay.rows
        center, rot = self.poses[cell.view]
        f = self.camera.focal
        d = rot.T @ np.array([u / f, v / f, 1.0])
        return center, d / np.linalg.norm(d)

    def backproject(self, cell: CellRef) -> SurfaceHit | None:
        origin, direction = self.cell_ray(cell)
        t = ray_ellipsoid(origin, direction, self.ellipsoid)
        if t is None:
            return None
        point = origin + t * direction
        # project back onto the surface to remove rounding drift
        point = point / np.sqrt(np.sum((point / self.ellipsoid.axes) ** 2))
        return SurfaceHit(cell, point)

    def surface_points(self) -> np.ndarray:
        """``(V, n, m, 3)`` surface points; NaN rows for cells that miss."""
        lay = self.layout
        pts = np.full((lay.views, lay.rows, lay.cols, 3), np.nan)
        for v in range(lay.views):
            for r in range(lay.rows):
                for c in range(lay.cols):
                    hit = self.backproject(CellRef(v, r, c))
                    if hit is not None:
                        pts[v, r, c] = hit.point
        return pts


def backproject_cell(layout: TemplateLayout, ellipsoid: EllipsoidSpec,
                     camera: CameraSpec, cell: CellRef) -> SurfaceHit | None:
    return ViewRig(layout, ellipsoid, camera).backproject(cell)


def _neighbor_distances(layout: TemplateLayout, pts: np.ndarray):
    """Yield (v, w, D) for each cyclically adjacent ordered view pair, D over hitting cells."""
    V = layout.views
    flat = pts.reshape(V, -1, 3)
    hit = ~np.isnan(flat[..., 0])
    neigh = sorted({(v, (v + s) % V) for v in range(V) for s in (-1, 1) if (v + s) % V != v})
    for v, w in neigh:
        iv, iw = np.flatnonzero(hit[v]), np.flatnonzero(hit[w])
        D = np.linalg.norm(flat[v, iv][:, None, :] - flat[w, iw][None, :, :], axis=-1)
        yield v, w, iv, iw, D


def default_patch_radius(layout: TemplateLayout, pts: np.ndarray, partners: int = 2) -> float:
    """Median over (cell, neighboring view) of the distance to the ``partners``-th closest hit."""
    kth = []
    for _, _, _, _, D in _neighbor_distances(layout, pts):
        if D.shape[1] == 0:
            continue
        k = min(partners, D.shape[1]) - 1
        kth.extend(np.sort(D, axis=1)[:, k])
    if not kth:
        raise GeometryError("no cell hits the surface in adjacent views")
    return float(np.median(kth))


def build_mv_pairs(layout: TemplateLayout, ellipsoid: EllipsoidSpec,
                   camera: CameraSpec = CameraSpec(), patch_radius: float | None = None,
                   max_partners: int | None = 4, points: np.ndarray | None = None) -> CellPairSet:
    """Pairs of cells in adjacent views whose surface points are within ``patch_radius``.

    With ``max_partners`` set, a pair survives only if each cell is among the
    other's ``max_partners`` nearest cross-view hits (ranking over both
    neighboring views, independent of the radius), so the result stays
    symmetric and grows monotonically with the radius.
    """
    if points is None:
        points = ViewRig(layout, ellipsoid, camera).surface_points()
    if patch_radius is None:
        patch_radius = default_patch_radius(layout, points)
    if patch_radius < 0:
        raise GeometryError("patch radius must be non-negative")
    cpv = layout.cells_per_view
    # candidate lists per global cell id: (distance, partner)
    cand: dict[int, list] = {}
    for v, w, iv, iw, D in _neighbor_distances(layout, points):
        for a, j in enumerate(iv):
            lst = cand.setdefault(v * cpv + j, [])
            lst.extend((D[a, b], w * cpv + k) for b, k in enumerate(iw))
    allowed: dict[int, set] = {}
    for j, lst in cand.items():
        lst.sort()
        chosen = lst if max_partners is None else lst[:max_partners]
        allowed[j] = {k for _, k in chosen}
    pairs = []
    for j, lst in cand.items():
        for dist, k in lst:
            if dist <= patch_radius and k in allowed[j] and j in allowed.get(k, ()):
                pairs.append((j, k))
    return CellPairSet("mv", tuple(sorted(set(pairs))))


def build_grid_pairs(layout: TemplateLayout, relation: str) -> CellPairSet:
    """Within-view neighbor pairs as flat cell indices (row 0 is the top row).

    ``h``: (r, c)-(r, c+1); ``v``: (r, c)-(r+1, c); ``d1``: (r, c)-(r+1, c-1),
    so the second cell's partner lies up and to its right, the upper-left
    diagonal read from the first cell; ``d2``: (r, c)-(r+1, c+1);
    ``cell``: (j, j).
    """
    offsets = {"h": (0, 1), "v": (1, 0), "d1": (1, -1), "d2": (1, 1), "cell": (0, 0)}
    if relation not in offsets:
        raise ValueError(f"unknown grid relation {relation!r}")
    dr, dc = offsets[relation]
    pairs = []
    for v in range(layout.views):
        for r in range(layout.rows):
            for c in range(layout.cols):
                r2, c2 = r + dr, c + dc
                if 0 <= r2 < layout.rows and 0 <= c2 < layout.cols:
                    pairs.append((layout.cell_index(CellRef(v, r, c)),
                                  layout.cell_index(CellRef(v, r2, c2))))
    return CellPairSet(relation, tuple(pairs))


def dump_pairs(layout: TemplateLayout, pairs: CellPairSet, path) -> None:
    """Write one ``v,r,c v',r',c'`` pair per line."""
    lines = []
    for j, k in pairs:
        a, b = layout.cell_from_index(j), layout.cell_from_index(k)
        lines.append(f"{a.view},{a.row},{a.col} {b.view},{b.row},{b.col}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_pairs(layout: TemplateLayout, relation: str, path) -> CellPairSet:
    pairs = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        left, right = line.split()
        a = CellRef(*map(int, left.split(",")))
        b = CellRef(*map(int, right.split(",")))
        pairs.append((layout.cell_index(a), layout.cell_index(b)))
    return CellPairSet(relation, tuple(pairs))
