"""Field -> mesh: dense/hierarchical grid evaluation, marching cubes, decimation, floaters.

Grid convention: vertex ``(i, j, k)`` sits at ``lin[i], lin[j], lin[k]`` with
``lin = linspace(-1, 1, N + 1)``; arrays are indexed ``[x, y, z]`` in C order,
so z varies fastest in every scan.
"""
from __future__ import annotations

import heapq
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from ._mc_tables import TRIANGLES
from .geom import TriMesh

Field = Callable[[np.ndarray], np.ndarray]

SENTINEL = 1e6

# corner offsets (x, y, z) in table order
_CORNERS = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
                     [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]])
# each table edge as (corner holding the lower endpoint, axis)
_EDGE_BASE = np.array([[0, 0], [1, 1], [3, 0], [0, 1],
                       [4, 0], [5, 1], [7, 0], [4, 1],
                       [0, 2], [1, 2], [2, 2], [3, 2]])


@dataclass(frozen=True)
class GridSpec:
    N: int = 64
    Nc: int = 8
    iso: float = 0.0

    def __post_init__(self):
        if self.Nc < 2 or self.N % self.Nc:
            raise ValueError(f"need Nc >= 2 and N a multiple of Nc, got N={self.N}, Nc={self.Nc}")

    @property
    def step(self) -> int:
        return self.N // self.Nc

    def axis(self) -> np.ndarray:
        return np.linspace(-1.0, 1.0, self.N + 1)

    def points(self, idx: np.ndarray) -> np.ndarray:
        """World positions of fine-grid vertex indices, ``idx`` shape (M, 3)."""
        return self.axis()[idx]


@dataclass
class EvalStats:
    fine_evals: int = 0
    coarse_evals: int = 0
    voxels_kept: int = 0
    voxels_pruned: int = 0
    voxels_dilated: int = 0
    dense_evals: int = 0

    def to_json(self) -> dict:
        return asdict(self)


def _eval(field: Field, pts: np.ndarray, batch: int = 65536) -> np.ndarray:
    out = np.empty(len(pts))
    for s in range(0, len(pts), batch):
        out[s:s + batch] = np.asarray(field(pts[s:s + batch]), dtype=np.float64).reshape(-1)
    return out


def _grid_points(axis: np.ndarray, ii, jj, kk) -> np.ndarray:
    return np.stack([axis[ii], axis[jj], axis[kk]], axis=-1)


def evaluate_dense(field: Field, grid: GridSpec) -> np.ndarray:
    n = grid.N + 1
    idx = np.indices((n, n, n)).reshape(3, -1)
    return _eval(field, _grid_points(grid.axis(), *idx)).reshape(n, n, n)


# ------------------------------------------------------------ coarse / sparse

def _straddles(corner_vals: np.ndarray, iso: float) -> np.ndarray:
    return (corner_vals.min(axis=0) <= iso) & (corner_vals.max(axis=0) >= iso)


def _voxel_corners(v: np.ndarray) -> np.ndarray:
    n = v.shape[0] - 1
    return np.stack([v[a:a + n, b:b + n, c:c + n] for a, b, c in _CORNERS])


def classify_coarse(field: Field, grid: GridSpec):
    """Coarse voxels whose corner values straddle the iso value.

    Returns ``(kept, coarse_values, stats)``; ``kept`` has shape (Nc, Nc, Nc).
    """
    nc = grid.Nc + 1
    coarse_axis = grid.axis()[::grid.step]
    idx = np.indices((nc, nc, nc)).reshape(3, -1)
    vals = _eval(field, _grid_points(coarse_axis, *idx)).reshape(nc, nc, nc)
    kept = _straddles(_voxel_corners(vals), grid.iso)
    stats = EvalStats(coarse_evals=nc ** 3, voxels_kept=int(kept.sum()),
                      voxels_pruned=int((~kept).sum()), dense_evals=(grid.N + 1) ** 3)
    return kept, vals, stats


def _block(a: int, b: int, c: int, s: int):
    return (np.s_[a * s:(a + 1) * s + 1], np.s_[b * s:(b + 1) * s + 1], np.s_[c * s:(c + 1) * s + 1])


@dataclass
class SparseGrid:
    values: np.ndarray      # (N+1)^3, sentinel-filled outside evaluated vertices
    evaluated: np.ndarray   # bool (N+1)^3
    kept: np.ndarray        # bool (Nc,)^3, final kept set including on-demand additions
    stats: EvalStats


def hierarchical_eval(field: Field, grid: GridSpec) -> SparseGrid:
    """Evaluate the field densely only inside coarse voxels that contain the surface.

    The kept set starts from :func:`classify_coarse` and grows on demand: a
    pruned neighbour is added when evaluated fine values on its boundary
    disagree with its uniform coarse sign, i.e. the surface leaves the kept
    region through it. Unevaluated vertices get ``+-SENTINEL`` following the
    sign of their coarse region.
    """
    kept, cvals, stats = classify_coarse(field, grid)
    s, n, nc = grid.step, grid.N + 1, grid.Nc
    axis = grid.axis()
    values = np.zeros((n, n, n))
    evaluated = np.zeros((n, n, n), dtype=bool)
    values[::s, ::s, ::s] = cvals
    evaluated[::s, ::s, ::s] = True
    # every pruned voxel has a uniform inside/outside status
    below = _voxel_corners(cvals).max(axis=0) < grid.iso
    base_kept = kept.copy()

    while True:
        need = np.zeros((n, n, n), dtype=bool)
        for a, b, c in zip(*np.nonzero(kept)):
            need[_block(a, b, c, s)] = True
        need &= ~evaluated
        idx = np.nonzero(need)
        if len(idx[0]):
            values[idx] = _eval(field, _grid_points(axis, *idx))
            evaluated[idx] = True
            stats.fine_evals += len(idx[0])
        near = _dilate(kept) & ~kept
        added = []
        for a, b, c in zip(*np.nonzero(near)):
            blk = _block(a, b, c, s)
            ev = evaluated[blk]
            vb = values[blk][ev] < grid.iso
            if np.any(vb != below[a, b, c]):
                added.append((a, b, c))
        if not added:
            break
        for v in added:
            kept[v] = True

    stats.voxels_dilated = int(kept.sum() - base_kept.sum())
    stats.voxels_kept = int(kept.sum())
    stats.voxels_pruned = int(nc ** 3 - kept.sum())
    fill = np.where(below, -SENTINEL, SENTINEL)
    fill = np.repeat(np.repeat(np.repeat(fill, s, 0), s, 1), s, 2)
    fill = np.pad(fill, ((0, 1), (0, 1), (0, 1)), mode="edge")
    values = np.where(evaluated, values, fill)
    return SparseGrid(values, evaluated, kept, stats)


def _dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    n = mask.shape[0]
    for d in np.indices((3, 3, 3)).reshape(3, -1).T - 1:
        src = tuple(np.s_[max(0, -x):n - max(0, x)] for x in d)
        dst = tuple(np.s_[max(0, x):n - max(0, -x)] for x in d)
        out[dst] |= mask[src]
    return out


# ---------------------------------------------------------------- marching

def marching_cubes(values: np.ndarray, iso: float = 0.0, cell_mask: np.ndarray | None = None,
                   lo: float = -1.0, hi: float = 1.0) -> TriMesh:
    """Triangulate the iso-surface of a cubic grid of samples.

    A corner is inside when its value is below ``iso``. Vertices sit on grid
    edges (linear interpolation) and are numbered in scan order of their edge;
    triangles follow cell scan order. ``cell_mask`` (shape N^3) restricts the
    cells that emit triangles. Triangles are oriented with outward normals.
    """
    v = np.asarray(values, dtype=np.float64)
    n = v.shape[0] - 1
    if n < 1:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), int))
    inside = v < iso
    case = np.zeros((n, n, n), dtype=np.int64)
    for bit, (a, b, c) in enumerate(_CORNERS):
        case |= inside[a:a + n, b:b + n, c:c + n].astype(np.int64) << bit
    active = (case != 0) & (case != 255)
    if cell_mask is not None:
        active &= cell_mask
    cells = np.argwhere(active)                     # scan order
    if len(cells) == 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), int))
    rows = TRIANGLES[case[active], :15].reshape(-1, 5, 3)
    keep = rows[:, :, 0] >= 0
    cell_of = np.repeat(np.arange(len(cells)), 5).reshape(-1, 5)[keep]
    edges = rows[keep]                              # (F, 3) table edge ids
    base = cells[cell_of][:, None, :] + _CORNERS[_EDGE_BASE[edges, 0]]
    ax = _EDGE_BASE[edges, 1]
    m = n + 1
    key = ((base[..., 0] * m + base[..., 1]) * m + base[..., 2]) * 3 + ax
    uniq, inv = np.unique(key.reshape(-1), return_inverse=True)
    lin = np.linspace(lo, hi, m)
    vid, vax = uniq // 3, uniq % 3
    i0 = np.stack(np.unravel_index(vid, (m, m, m)), axis=1)
    i1 = i0 + np.eye(3, dtype=np.int64)[vax]
    f0 = v[i0[:, 0], i0[:, 1], i0[:, 2]]
    f1 = v[i1[:, 0], i1[:, 1], i1[:, 2]]
    t = (iso - f0) / (f1 - f0)
    p0, p1 = lin[i0], lin[i1]
    verts = p0 + t[:, None] * (p1 - p0)
    tris = inv.reshape(-1, 3)
    # the table winds triangles toward the inside
    return TriMesh(verts, tris[:, ::-1].copy())


def extract(field: Field, grid: GridSpec, hierarchical: bool = True):
    """Field -> (mesh, stats) with dense or coarse-to-fine evaluation."""
    if not hierarchical:
        vals = evaluate_dense(field, grid)
        st = EvalStats(fine_evals=vals.size, dense_evals=vals.size)
        return marching_cubes(vals, grid.iso), st
    sg = hierarchical_eval(field, grid)
    s = grid.step
    cells = np.repeat(np.repeat(np.repeat(sg.kept, s, 0), s, 1), s, 2)
    return marching_cubes(sg.values, grid.iso, cell_mask=cells), sg.stats


def dense_field_mesh(field: Field, resolution: int, iso: float = 0.0) -> TriMesh:
    return marching_cubes(evaluate_dense(field, GridSpec(resolution, resolution, iso)), iso)


# --------------------------------------------------------------- floaters

def remove_floaters(mesh: TriMesh, keep_ratio: float = 0.1) -> TriMesh:
    """Drop connected components smaller than ``keep_ratio`` x the largest one."""
    if not 0 < keep_ratio <= 1:
        raise ValueError("keep_ratio must be in (0, 1]")
    t = mesh.triangles
    if len(t) == 0:
        return mesh
    nv = len(mesh.vertices)
    rows = np.concatenate([t[:, 0], t[:, 1]])
    cols = np.concatenate([t[:, 1], t[:, 2]])
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(nv, nv))
    _, comp = connected_components(adj, directed=False)
    tri_comp = comp[t[:, 0]]
    sizes = np.bincount(tri_comp)
    keep = sizes[tri_comp] >= keep_ratio * sizes.max()
    return compact(TriMesh(mesh.vertices, t[keep]))


def compact(mesh: TriMesh) -> TriMesh:
    """Remove unreferenced vertices, preserving vertex order."""
    used = np.unique(mesh.triangles)
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriMesh(mesh.vertices[used], remap[mesh.triangles])


# --------------------------------------------------------------- decimation

def _face_planes(v, t):
    n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    n = n / np.where(norm > 0, norm, 1.0)
    d = -np.einsum("ij,ij->i", n, v[t[:, 0]])
    return np.concatenate([n, d[:, None]], axis=1)


def _normal(a, b, c):
    return np.cross(b - a, c - a)


def decimate(mesh: TriMesh, target_faces: int, min_normal_dot: float = 0.2) -> TriMesh:
    """Quadric-error edge collapse down to ``target_faces`` triangles.

    Each collapse moves the surviving vertex to the quadric-optimal position
    (falling back to the best of endpoints/midpoint when the quadric is
    singular). Collapses that break the link condition, flip or degenerate
    an adjacent triangle are rejected; the loop ends at the target or when no
    legal collapse is left.
    """
    if target_faces < 4:
        raise ValueError("target_faces must be >= 4")
    if mesh.n_faces <= target_faces:
        return mesh
    V = mesh.vertices.copy()
    F = mesh.triangles.copy()
    alive = np.ones(len(F), dtype=bool)
    vfaces = [set() for _ in range(len(V))]
    for fi, tri in enumerate(F):
        for x in tri:
            vfaces[x].add(fi)
    planes = _face_planes(V, F)
    Q = np.zeros((len(V), 4, 4))
    for fi, tri in enumerate(F):
        K = np.outer(planes[fi], planes[fi])
        for x in tri:
            Q[x] += K
    version = np.zeros(len(V), dtype=np.int64)
    removed = np.zeros(len(V), dtype=bool)

    def neighbours(x):
        return {y for f in vfaces[x] for y in F[f]} - {x}

    def placement(a, b):
        q = Q[a] + Q[b]
        A = q.copy()
        A[3] = [0, 0, 0, 1]
        cands = [V[a], V[b], (V[a] + V[b]) / 2]
        if np.linalg.cond(A) < 1e8:
            cands.insert(0, np.linalg.solve(A, [0, 0, 0, 1.0])[:3])
        best, bc = None, np.inf
        for p in cands:
            h = np.append(p, 1.0)
            c = float(h @ q @ h)
            if c < bc - 1e-15:
                best, bc = p, c
        return best, max(bc, 0.0)

    heap = []

    def push(a, b):
        if a > b:
            a, b = b, a
        p, c = placement(a, b)
        heapq.heappush(heap, (c, a, b, int(version[a]), int(version[b]), p))

    for a, b in mesh.edges():
        push(int(a), int(b))

    n_alive = len(F)
    while n_alive > target_faces and heap:
        c, a, b, va, vb, p = heapq.heappop(heap)
        if removed[a] or removed[b] or version[a] != va or version[b] != vb:
            continue
        shared = vfaces[a] & vfaces[b]
        if not shared:
            continue
        opposite = {y for f in shared for y in F[f]} - {a, b}
        if neighbours(a) & neighbours(b) != opposite:
            continue
        ok = True
        for x, other in ((a, b), (b, a)):
            for f in vfaces[x] - shared:
                tri = F[f].copy()
                before = _normal(*V[tri])
                tri[tri == x] = -1
                pts = [p if y == -1 else V[y] for y in tri]
                after = _normal(*pts)
                na, nb = np.linalg.norm(after), np.linalg.norm(before)
                if na < 1e-14 or nb < 1e-14 or np.dot(after, before) < min_normal_dot * na * nb:
                    ok = False
                    break
            if not ok:
                break
        if not ok:
            continue
        # collapse b into a
        for f in shared:
            alive[f] = False
            for y in F[f]:
                vfaces[y].discard(f)
        n_alive -= len(shared)
        for f in vfaces[b]:
            F[f][F[f] == b] = a
            vfaces[a].add(f)
        vfaces[b] = set()
        removed[b] = True
        V[a] = p
        Q[a] += Q[b]
        version[a] += 1
        for y in neighbours(a):
            push(a, y)
    return compact(TriMesh(V, F[alive]))
