"""Meshes, procedural shapes, point/field sampling and IoU metrics.

All coordinates live in the normalized cube [-1, 1]^3.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

SIGMA_NEAR = 0.05
TAU = 0.1
# procedural shapes keep their longest axis inside [-EXTENT, EXTENT] so the
# iso-surface never touches the extraction domain boundary
EXTENT = 0.9

# reported reference values of the discrete tokenizer at paper scale;
# documentation only, not desk-scale targets
PAPER_S_IOU_VQ = 0.917
PAPER_V_IOU_VQ = 0.945


class MeshError(ValueError):
    pass


@dataclass
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)

    def validate(self) -> "TriMesh":
        if not np.all(np.isfinite(self.vertices)):
            raise MeshError("non-finite vertex coordinates")
        t = self.triangles
        if t.size and (t.min() < 0 or t.max() >= len(self.vertices)):
            raise MeshError("triangle index out of range")
        if len(t) and np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
            raise MeshError("triangle repeats a vertex index")
        return self

    @property
    def n_faces(self) -> int:
        return len(self.triangles)

    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def edges(self) -> np.ndarray:
        """Unique undirected edges, sorted, as an (E, 2) array."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def boundary_edges(self) -> np.ndarray:
        """Edges used by a number of triangles other than two."""
        t = self.triangles
        e = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq[counts != 2]

    def is_watertight(self) -> bool:
        return len(self.triangles) > 0 and len(self.boundary_edges()) == 0

    def euler_characteristic(self) -> int:
        used = np.unique(self.triangles)
        return int(len(used) - len(self.edges()) + len(self.triangles))

    def signed_volume(self) -> float:
        v = self.vertices[self.triangles]
        return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)

    def transformed(self, matrix=None, scale=None, offset=None) -> "TriMesh":
        v = self.vertices.copy()
        if scale is not None:
            v = v * np.asarray(scale, dtype=np.float64)
        if matrix is not None:
            v = v @ np.asarray(matrix, dtype=np.float64).T
        if offset is not None:
            v = v + np.asarray(offset, dtype=np.float64)
        return TriMesh(v, self.triangles.copy())


def normalize(mesh: TriMesh, extent: float = 1.0) -> TriMesh:
    """Center the bounding box at the origin; longest axis spans [-extent, extent]."""
    if len(mesh.vertices) == 0 or len(mesh.triangles) == 0:
        raise MeshError("cannot normalize an empty mesh")
    lo, hi = mesh.bounds()
    size = (hi - lo).max()
    if not size > 0:
        raise MeshError("degenerate mesh: zero bounding-box extent")
    center = (lo + hi) / 2
    return TriMesh((mesh.vertices - center) * (2.0 * extent / size), mesh.triangles.copy())


def sample_surface(mesh: TriMesh, n: int, seed) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface, shape (n, 3)."""
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise MeshError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    if n == 0:
        return np.zeros((0, 3))
    face = rng.choice(len(areas), size=n, p=areas / total)
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    w = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    v = mesh.vertices[mesh.triangles[face]]
    return np.einsum("ni,nij->nj", w, v)


# ------------------------------------------------------------ simple meshes

def box_mesh(lo=(-0.5, -0.5, -0.5), hi=(0.5, 0.5, 0.5)) -> TriMesh:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    verts = lo + corners * (hi - lo)
    # outward-facing, two triangles per face
    tris = [[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],
            [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],
            [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]]
    return TriMesh(verts, tris)


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriMesh:
    t = (1 + 5 ** 0.5) / 2
    v = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
         [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = nf
    return TriMesh(np.array(verts) * radius, faces)


# ---------------------------------------------------------- procedural shapes

KINDS = ("sphere", "box", "torus", "capsule", "union", "difference")
_AXES = "xyz"


def _sd_sphere(p, r, c=(0, 0, 0)):
    return np.linalg.norm(p - np.asarray(c, float), axis=-1) - r


def _sd_box(p, half, c=(0, 0, 0)):
    q = np.abs(p - np.asarray(c, float)) - np.asarray(half, float)
    return np.linalg.norm(np.maximum(q, 0), axis=-1) + np.minimum(q.max(axis=-1), 0)


def _to_axis(p, axis):
    # rotate so that `axis` plays the role of y
    i = _AXES.index(axis)
    if i == 1:
        return p
    order = [1, 0, 2] if i == 0 else [0, 2, 1]
    return p[..., order]


def _sd_torus(p, R, r, axis="y"):
    q = _to_axis(p, axis)
    ring = np.sqrt(q[..., 0] ** 2 + q[..., 2] ** 2) - R
    return np.sqrt(ring ** 2 + q[..., 1] ** 2) - r


def _sd_capsule(p, h, r, axis="y"):
    q = _to_axis(p, axis).copy()
    q[..., 1] -= np.clip(q[..., 1], -h, h)
    return np.linalg.norm(q, axis=-1) - r


@dataclass(frozen=True)
class ShapeSpec:
    """A procedural primitive; ``params`` is a JSON-friendly dict."""

    kind: str
    params: dict = field(hash=False, compare=True)
    label: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown shape kind '{self.kind}'")

    def key(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    def __hash__(self):
        return hash(self.key())

    def to_json(self) -> dict:
        return {"kind": self.kind, "params": self.params, "label": self.label, "seed": self.seed}

    @classmethod
    def from_json(cls, d: dict) -> "ShapeSpec":
        return cls(d["kind"], d["params"], int(d.get("label", 0)), int(d.get("seed", 0)))

    def sdf(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        k, q = self.kind, self.params
        c = q.get("center", (0.0, 0.0, 0.0))
        if k == "sphere":
            return _sd_sphere(p, q["radius"], c)
        if k == "box":
            return _sd_box(p, q["half"], c)
        if k == "torus":
            return _sd_torus(p - np.asarray(c, float), q["R"], q["r"], q.get("axis", "y"))
        if k == "capsule":
            return _sd_capsule(p - np.asarray(c, float), q["h"], q["r"], q.get("axis", "y"))
        if k == "union":
            return np.minimum(_sd_box(p, q["half"], q["box_center"]),
                              _sd_sphere(p, q["radius"], q["sphere_center"]))
        # difference: box with a spherical bite
        return np.maximum(_sd_box(p, q["half"], q["box_center"]),
                          -_sd_sphere(p, q["radius"], q["sphere_center"]))

    def occupancy(self, points) -> np.ndarray:
        return self.sdf(points) <= 0

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        """Analytic axis-aligned bounds."""
        k, q = self.kind, self.params
        c = np.asarray(q.get("center", (0.0, 0.0, 0.0)), float)
        if k == "sphere":
            return c - q["radius"], c + q["radius"]
        if k == "box":
            h = np.asarray(q["half"], float)
            return c - h, c + h
        if k in ("torus", "capsule"):
            i = _AXES.index(q.get("axis", "y"))
            h = np.full(3, q["R"] + q["r"]) if k == "torus" else np.full(3, q["r"])
            h[i] = q["r"] if k == "torus" else q["h"] + q["r"]
            return c - h, c + h
        bc, h = np.asarray(q["box_center"], float), np.asarray(q["half"], float)
        if k == "difference":
            return bc - h, bc + h
        sc, r = np.asarray(q["sphere_center"], float), q["radius"]
        return np.minimum(bc - h, sc - r), np.maximum(bc + h, sc + r)

    def bbox_dims(self) -> np.ndarray:
        lo, hi = self.bbox()
        d = hi - lo
        return d / d.max()


def _centered(kind, params, label, seed):
    """Shift so the analytic bounding box is centered at the origin."""
    spec = ShapeSpec(kind, params, label, seed)
    lo, hi = spec.bbox()
    shift = -(lo + hi) / 2
    p = dict(params)
    if kind in ("sphere", "box", "torus", "capsule"):
        p.setdefault("center", [0.0, 0.0, 0.0])
    for key in ("center", "box_center", "sphere_center"):
        if key in p:
            p[key] = [float(x) for x in np.asarray(p[key], float) + shift]
    return ShapeSpec(kind, p, label, seed)


def random_shape(kind: str, seed: int, label: int | None = None) -> ShapeSpec:
    """One jittered member of a primitive family, centered, within [-EXTENT, EXTENT]^3."""
    rng = np.random.default_rng([seed, KINDS.index(kind)])
    label = KINDS.index(kind) if label is None else label
    u = lambda a, b: float(rng.uniform(a, b))  # noqa: E731
    axis = _AXES[int(rng.integers(3))]
    if kind == "sphere":
        params = {"radius": u(0.45, 0.85)}
    elif kind == "box":
        params = {"half": [u(0.3, 0.85), u(0.3, 0.85), u(0.3, 0.85)]}
    elif kind == "torus":
        r = u(0.15, 0.25)
        params = {"R": u(0.4, EXTENT - r), "r": r, "axis": axis}
    elif kind == "capsule":
        r = u(0.25, 0.45)
        params = {"h": u(0.2, EXTENT - r), "r": r, "axis": axis}
    elif kind == "union":
        half = [u(0.4, 0.7), u(0.2, 0.35), u(0.4, 0.7)]
        r = u(0.3, 0.45)
        params = {"half": half, "box_center": [0.0, -0.3, 0.0],
                  "radius": r, "sphere_center": [0.0, -0.3 + half[1] + 0.5 * r, 0.0]}
    else:
        half = [u(0.45, 0.8), u(0.35, 0.6), u(0.45, 0.8)]
        params = {"half": half, "box_center": [0.0, 0.0, 0.0],
                  "radius": u(0.4, 0.6), "sphere_center": [0.0, half[1], 0.0]}
    spec = _centered(kind, params, label, seed)
    lo, hi = spec.bbox()
    if max(np.abs(lo).max(), np.abs(hi).max()) > EXTENT + 1e-9:
        raise AssertionError(f"generated {kind} escapes the extent")  # pragma: no cover
    return spec


def procedural_dataset(n: int, seed: int) -> list[ShapeSpec]:
    """``n`` shapes cycling through the six families."""
    return [random_shape(KINDS[i % len(KINDS)], seed * 100003 + i) for i in range(n)]


# ---------------------------------------------------------------- tessellation

_MESH_CACHE: dict[str, TriMesh] = {}


def shape_mesh(spec: ShapeSpec, resolution: int = 64) -> TriMesh:
    """Triangulated surface of a procedural shape (marching cubes + one Newton projection)."""
    key = f"{spec.key()}|{resolution}"
    if key not in _MESH_CACHE:
        from .extract import dense_field_mesh
        mesh = dense_field_mesh(spec.sdf, resolution)
        mesh = TriMesh(project_to_surface(spec.sdf, mesh.vertices), mesh.triangles)
        _MESH_CACHE[key] = mesh
    return _MESH_CACHE[key]


def project_to_surface(sdf: Callable, points, steps: int = 2, h: float = 1e-5) -> np.ndarray:
    p = np.array(points, dtype=np.float64)
    for _ in range(steps):
        g = np.stack([(sdf(p + h * e) - sdf(p - h * e)) / (2 * h) for e in np.eye(3)], axis=-1)
        n2 = np.maximum((g * g).sum(-1, keepdims=True), 1e-12)
        p = p - sdf(p)[:, None] * g / n2
    return p


def surface_points(spec: ShapeSpec, n: int, seed) -> np.ndarray:
    return sample_surface(shape_mesh(spec), n, seed)


# ------------------------------------------------------------------- fields

@dataclass
class FieldBatch:
    points: np.ndarray
    occupancy: np.ndarray
    tsdf: np.ndarray
    source: np.ndarray   # per-point tag: "uniform" | "near-surface" | "on-surface"
    tau: float = TAU

    def __len__(self):
        return len(self.points)


def uniform_points(n: int, rng) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(n, 3))


def near_surface_points(spec: ShapeSpec, n: int, sigma: float, rng) -> np.ndarray:
    surf = sample_surface(shape_mesh(spec), n, rng)
    return np.clip(surf + rng.normal(scale=sigma, size=surf.shape), -1.0, 1.0)


def sample_field(spec: ShapeSpec, n_uniform: int, n_near: int, sigma_near: float = SIGMA_NEAR,
                 tau: float = TAU, seed=0) -> FieldBatch:
    """Labelled query points: uniform in the cube plus Gaussian-jittered surface points."""
    if sigma_near <= 0 or tau <= 0:
        raise ValueError("sigma_near and tau must be positive")
    rng = np.random.default_rng(seed)
    pts = np.concatenate([uniform_points(n_uniform, rng),
                          near_surface_points(spec, n_near, sigma_near, rng) if n_near else np.zeros((0, 3))])
    d = spec.sdf(pts)
    src = np.array(["uniform"] * n_uniform + ["near-surface"] * n_near)
    return FieldBatch(pts, d <= 0, np.clip(d, -tau, tau), src, tau)


# --------------------------------------------------------------- occupancy

def _ray_crossings(tri: np.ndarray, pts: np.ndarray, axis: int) -> np.ndarray:
    """Number of triangles hit by the ray from each point along +axis."""
    u, w = [(1, 2), (2, 0), (0, 1)][axis]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    # 2D barycentric setup in the plane orthogonal to the ray
    e1 = b[:, [u, w]] - a[:, [u, w]]
    e2 = c[:, [u, w]] - a[:, [u, w]]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    ok = np.abs(det) > 1e-15
    a, e1, e2, det = a[ok], e1[ok], e2[ok], det[ok]
    da = (b[ok] - a)[:, axis]
    db = (c[ok] - a)[:, axis]
    out = np.zeros(len(pts), dtype=np.int64)
    chunk = max(1, 2_000_000 // max(len(a), 1))
    for s in range(0, len(pts), chunk):
        p = pts[s:s + chunk]
        d = p[:, None, [u, w]] - a[None, :, [u, w]]
        l1 = (d[..., 0] * e2[:, 1] - d[..., 1] * e2[:, 0]) / det
        l2 = (e1[:, 0] * d[..., 1] - e1[:, 1] * d[..., 0]) / det
        inside = (l1 >= 0) & (l2 >= 0) & (l1 + l2 <= 1)
        hit = a[None, :, axis] + l1 * da + l2 * db
        out[s:s + chunk] = np.sum(inside & (hit > p[:, None, axis]), axis=1)
    return out


def mesh_occupancy(mesh: TriMesh, points) -> np.ndarray:
    """Inside test by crossing parity along the three +axis rays, majority vote."""
    open_edges = mesh.boundary_edges()
    if len(mesh.triangles) == 0 or len(open_edges):
        raise MeshError(f"mesh is not watertight: {len(open_edges)} open boundary edges, "
                        f"e.g. {open_edges[:5].tolist()}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri = mesh.vertices[mesh.triangles]
    votes = sum((_ray_crossings(tri, pts, ax) % 2).astype(np.int64) for ax in range(3))
    return votes >= 2


# ------------------------------------------------------------------- metrics

def _as_occupancy_fn(f) -> Callable:
    if isinstance(f, ShapeSpec):
        return f.occupancy
    return lambda p: np.asarray(f(p), dtype=bool)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def v_iou(pred_field, gt: ShapeSpec, n: int = 100_000, seed=0) -> float:
    """Volumetric IoU at uniform points of the cube; ``pred_field`` maps points -> bool."""
    if n < 1:
        raise ValueError("n must be >= 1")
    pts = uniform_points(n, np.random.default_rng(seed))
    return iou(_as_occupancy_fn(pred_field)(pts), gt.occupancy(pts))


def s_iou(pred_field, gt: ShapeSpec, n: int = 100_000, seed=0, sigma: float = SIGMA_NEAR) -> float:
    """Surface IoU at near-surface points of the ground-truth shape."""
    if n < 1:
        raise ValueError("n must be >= 1")
    pts = near_surface_points(gt, n, sigma, np.random.default_rng(seed))
    return iou(_as_occupancy_fn(pred_field)(pts), gt.occupancy(pts))


# ------------------------------------------------------------------------ I/O

def write_obj(mesh: TriMesh, path) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(tok.split("/")[0]) for tok in parts[1:]]
            if len(idx) != 3:
                raise MeshError(f"line {n}: only triangular faces are supported")
            faces.append([i - 1 for i in idx])
    return TriMesh(np.array(verts, float).reshape(-1, 3), np.array(faces, int).reshape(-1, 3)).validate()


def write_manifest(specs: Iterable[ShapeSpec], path) -> None:
    with open(path, "w") as fh:
        for i, s in enumerate(specs):
            fh.write(json.dumps({"id": f"shape_{i:05d}", "spec": s.to_json(),
                                 "class_label": s.label, "seed": s.seed}) + "\n")


def read_manifest(path) -> list[tuple[str, ShapeSpec]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            out.append((rec["id"], ShapeSpec.from_json(rec["spec"])))
    return out
