"""Triangle meshes: procedural desk-scale shapes and area-weighted surface sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull

from .errors import EmptyMesh
from .geometry import PointCloud, so3_exp


@dataclass(eq=False)
class MeshShape:
    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (F, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    def areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def cleaned(self, tol: float = 1e-14) -> MeshShape:
        """Drop zero-area triangles."""
        return MeshShape(self.vertices, self.triangles[self.areas() > tol])


def merge(*meshes: MeshShape) -> MeshShape:
    verts, tris, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + off)
        off += len(m.vertices)
    return MeshShape(np.concatenate(verts), np.concatenate(tris))


def normalize_transform(points: np.ndarray) -> tuple[np.ndarray, float]:
    """Centroid and scale mapping ``points`` to unit bounding-box diagonal."""
    center = points.mean(axis=0)
    diag = float(np.linalg.norm(points.max(0) - points.min(0)))
    return center, (1.0 / diag if diag > 0 else 1.0)


def normalize_mesh(mesh: MeshShape) -> MeshShape:
    # centre on the area-weighted surface centroid, which is what samples average to
    v = mesh.vertices[mesh.triangles]
    area = mesh.areas()
    centroid = (v.mean(axis=1) * area[:, None]).sum(0) / area.sum()
    _, scale = normalize_transform(mesh.vertices)
    return MeshShape((mesh.vertices - centroid) * scale, mesh.triangles)


def sample_mesh_surface(mesh: MeshShape, n: int, rng: np.random.Generator) -> PointCloud:
    if len(mesh.triangles) == 0:
        raise EmptyMesh("mesh has no triangles")
    area = mesh.areas()
    tri = rng.choice(len(area), size=n, p=area / area.sum())
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    a, b, c = (mesh.vertices[mesh.triangles[tri, k]] for k in range(3))
    return PointCloud(a + u[:, None] * (b - a) + v[:, None] * (c - a))


# ---------------------------------------------------------------------------
# procedural shapes


def box(size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> MeshShape:
    sx, sy, sz = np.asarray(size) / 2.0
    v = np.array([[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)]) + center
    hull = ConvexHull(v)
    return MeshShape(v, _outward(v, hull.simplices))


def _outward(v, tris):
    c = v.mean(0)
    t = tris.copy()
    n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    flip = np.sum(n * (v[t[:, 0]] - c), axis=1) < 0
    t[flip] = t[flip][:, ::-1]
    return t


def tube(curve: np.ndarray, radius: float, sides: int = 12, closed: bool = True) -> MeshShape:
    """Tube mesh swept along a polyline."""
    n = len(curve)
    tangent = np.gradient(curve, axis=0)
    if closed:
        tangent = np.roll(curve, -1, axis=0) - np.roll(curve, 1, axis=0)
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    ref = np.array([0.0, 0.0, 1.0])
    normal = np.cross(tangent, ref)
    bad = np.linalg.norm(normal, axis=1) < 1e-6
    normal[bad] = np.cross(tangent[bad], [1.0, 0.0, 0.0])
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    binormal = np.cross(tangent, normal)
    ang = np.linspace(0, 2 * np.pi, sides, endpoint=False)
    ring = np.cos(ang)[None, :, None] * normal[:, None, :] + np.sin(ang)[None, :, None] * binormal[:, None, :]
    verts = (curve[:, None, :] + radius * ring).reshape(-1, 3)
    tris = []
    segs = n if closed else n - 1
    for i in range(segs):
        i2 = (i + 1) % n
        for s in range(sides):
            s2 = (s + 1) % sides
            a, b, c, d = i * sides + s, i * sides + s2, i2 * sides + s, i2 * sides + s2
            tris += [(a, c, b), (b, c, d)]
    return MeshShape(verts, np.array(tris))


def cylinder(radius: float, height: float, segments: int = 24, center=(0.0, 0.0, 0.0)) -> MeshShape:
    ang = np.linspace(0, 2 * np.pi, segments, endpoint=False)
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang), np.zeros(segments)], axis=1)
    v = np.concatenate([ring + [0, 0, -height / 2], ring + [0, 0, height / 2]]) + center
    return MeshShape(v, _outward(v, ConvexHull(v).simplices))


def cylinder_with_handle(radius=0.35, height=1.0, handle=0.3) -> MeshShape:
    body = cylinder(radius, height)
    t = np.linspace(-np.pi / 2, np.pi / 2, 16)
    # off-centre handle so no rotation maps the shape onto itself
    arc = np.stack([radius + handle * np.cos(t), np.zeros_like(t), 0.15 + 0.6 * handle * np.sin(t)], axis=1)
    spout = box((0.25, 0.12, 0.12), center=(-radius - 0.1, 0.0, 0.35))
    return merge(body, tube(arc, 0.05, 8, closed=False), spout)


def l_bracket(a=1.0, b=0.6, width=0.4, thick=0.12) -> MeshShape:
    return merge(
        box((a, width, thick), center=(a / 2, 0, thick / 2)),
        box((thick, width * 0.8, b), center=(thick / 2, -0.1 * width, b / 2 + thick)),
    )


def torus_knot(p: int = 2, q: int = 3, radius: float = 0.08, n: int = 120) -> MeshShape:
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    r = np.cos(q * t) + 2.0
    curve = np.stack([r * np.cos(p * t), r * np.sin(p * t), -np.sin(q * t)], axis=1) / 3.0
    return tube(curve, radius, 10, closed=True)


def convex_polyhedron(rng: np.random.Generator, n_vertices: int = 14) -> MeshShape:
    v = rng.normal(size=(n_vertices, 3)) * rng.uniform(0.5, 1.5, size=3)
    hull = ConvexHull(v)
    used = np.unique(hull.simplices)
    remap = -np.ones(len(v), dtype=int)
    remap[used] = np.arange(len(used))
    vv = v[used]
    return MeshShape(vv, _outward(vv, remap[hull.simplices]))


def table(rng: np.random.Generator) -> MeshShape:
    w, d = rng.uniform(0.8, 1.2), rng.uniform(0.4, 0.7)
    top = box((w, d, 0.06), center=(0, 0, 0.5))
    legs = [box((0.06, 0.06, 0.5), center=(sx * (w / 2 - 0.05), sy * (d / 2 - 0.05), 0.25)) for sx, sy in ((1, 1), (-1, 1), (1, -1))]
    # one shortened leg and a shelf break the symmetry
    legs.append(box((0.06, 0.06, 0.3), center=(-(w / 2 - 0.05), -(d / 2 - 0.05), 0.35)))
    shelf = box((w * 0.4, d * 0.8, 0.04), center=(w * 0.2, 0, 0.2))
    return merge(top, *legs, shelf)


SHAPE_KINDS = ("box", "cylinder_handle", "l_bracket", "torus_knot", "convex", "table")


def procedural_shape(kind: str, rng: np.random.Generator | None = None) -> MeshShape:
    rng = rng or np.random.default_rng(0)
    if kind == "box":
        mesh = box(tuple(rng.uniform(0.4, 1.2, size=3)))
    elif kind == "cylinder_handle":
        mesh = cylinder_with_handle(rng.uniform(0.25, 0.4), rng.uniform(0.8, 1.2), rng.uniform(0.2, 0.35))
    elif kind == "l_bracket":
        mesh = l_bracket(rng.uniform(0.8, 1.2), rng.uniform(0.4, 0.8), rng.uniform(0.3, 0.5))
    elif kind == "torus_knot":
        mesh = torus_knot(2, 3, rng.uniform(0.06, 0.12))
    elif kind == "convex":
        mesh = convex_polyhedron(rng, int(rng.integers(8, 20)))
    elif kind == "table":
        mesh = table(rng)
    else:
        raise ValueError(f"unknown shape {kind!r}; expected one of {SHAPE_KINDS}")
    # random body orientation so shapes are not axis-aligned in the canonical frame
    R = so3_exp(rng.normal(size=3))
    return normalize_mesh(MeshShape(mesh.vertices @ R.T, mesh.triangles).cleaned())


def shape_set(n: int, seed: int = 0, kinds=SHAPE_KINDS) -> list[MeshShape]:
    """``n`` procedural meshes cycling through ``kinds`` with random proportions."""
    rng = np.random.default_rng(seed)
    return [procedural_shape(kinds[i % len(kinds)], rng) for i in range(n)]
