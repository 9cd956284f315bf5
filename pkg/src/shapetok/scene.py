"""Flat JSON scene graphs: parsing, layout checks, and instantiation into meshes.

A scene file is a JSON array of objects with exactly these fields::

    id, object_category, object_caption, position, rotation_y_degrees, bbox_size

``position`` is the center of the object's (unrotated) bounding box and y
is up. Rotation is a yaw about the vertical axis only.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geom import KINDS, TriMesh, random_shape, shape_mesh

FIELDS = ("id", "object_category", "object_caption", "position", "rotation_y_degrees", "bbox_size")
CATEGORY_ALIASES = {"cube": "box", "ball": "sphere", "ring": "torus", "pill": "capsule"}

OVERLAP_FRACTION = 0.10
FLOAT_FRACTION = 0.05


class SceneError(ValueError):
    pass


def _vec3(v, name, oid, positive=False):
    if not isinstance(v, list) or len(v) != 3 or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        raise SceneError(f"object {oid!r}: '{name}' must be a list of three numbers")
    if not all(np.isfinite(v)):
        raise SceneError(f"object {oid!r}: '{name}' must be finite")
    if positive and min(v) <= 0:
        raise SceneError(f"object {oid!r}: '{name}' components must be positive")
    return tuple(v)


@dataclass(frozen=True)
class SceneObject:
    id: str
    object_category: str
    object_caption: str
    position: tuple
    rotation_y_degrees: float
    bbox_size: tuple

    @classmethod
    def from_json(cls, d) -> "SceneObject":
        if not isinstance(d, dict):
            raise SceneError("every scene entry must be a JSON object")
        oid = d.get("id")
        for k in d:
            if k not in FIELDS:
                if k.startswith("rotation"):
                    raise SceneError(f"object {oid!r}: field '{k}' not allowed, only Y rotation "
                                     "('rotation_y_degrees') is supported")
                raise SceneError(f"object {oid!r}: unknown field '{k}'")
        for k in FIELDS:
            if k not in d:
                raise SceneError(f"object {oid!r}: missing required field '{k}'")
        for k in ("id", "object_category", "object_caption"):
            if not isinstance(d[k], str):
                raise SceneError(f"object {oid!r}: '{k}' must be a string")
        rot = d["rotation_y_degrees"]
        if isinstance(rot, bool) or not isinstance(rot, (int, float)) or not np.isfinite(rot):
            raise SceneError(f"object {oid!r}: 'rotation_y_degrees' must be a finite number")
        return cls(d["id"], d["object_category"], d["object_caption"],
                   _vec3(d["position"], "position", oid), rot,
                   _vec3(d["bbox_size"], "bbox_size", oid, positive=True))

    def to_json(self) -> dict:
        return {"id": self.id, "object_category": self.object_category,
                "object_caption": self.object_caption, "position": list(self.position),
                "rotation_y_degrees": self.rotation_y_degrees, "bbox_size": list(self.bbox_size)}

    def rotation(self) -> np.ndarray:
        t = np.deg2rad(self.rotation_y_degrees)
        c, s = np.cos(t), np.sin(t)
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])

    def transform(self) -> np.ndarray:
        """4x4 world matrix: scale to bbox_size, yaw, translate."""
        m = np.eye(4)
        m[:3, :3] = self.rotation() @ np.diag(self.bbox_size)
        m[:3, 3] = self.position
        return m

    def enclosing_aabb(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned box around the yaw-rotated bounding box."""
        half = np.abs(self.rotation()) @ (np.asarray(self.bbox_size, float) / 2)
        c = np.asarray(self.position, float)
        return c - half, c + half


@dataclass
class SceneGraph:
    objects: list = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for o in self.objects:
            if o.id in seen:
                raise SceneError(f"duplicate object id {o.id!r}")
            seen.add(o.id)

    def __len__(self):
        return len(self.objects)

    def __iter__(self):
        return iter(self.objects)


def parse(text: str) -> SceneGraph:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise SceneError(f"malformed scene JSON: {e}") from e
    if not isinstance(data, list):
        raise SceneError("a scene must be a JSON array of objects")
    return SceneGraph([SceneObject.from_json(d) for d in data])


def serialize(scene: SceneGraph) -> str:
    if not scene.objects:
        return "[]"
    return json.dumps([o.to_json() for o in scene.objects], indent=2)


def load_scene(path) -> SceneGraph:
    return parse(Path(path).read_text(encoding="utf-8"))


def save_scene(scene: SceneGraph, path) -> None:
    Path(path).write_text(serialize(scene) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- validation

DEFAULT_BOUNDS = ((-5.0, 0.0, -5.0), (5.0, 5.0, 5.0))


@dataclass
class Issue:
    kind: str            # "out_of_bounds" | "interpenetration" | "floating"
    ids: tuple
    detail: str

    def to_json(self) -> dict:
        return {"kind": self.kind, "ids": list(self.ids), "detail": self.detail}


@dataclass
class ValidationReport:
    warnings: list

    @property
    def ok(self) -> bool:
        return not self.warnings

    def kinds(self) -> list[str]:
        return [w.kind for w in self.warnings]

    def to_json(self) -> dict:
        return {"ok": self.ok, "warnings": [w.to_json() for w in self.warnings]}


def _overlap_volume(a, b) -> float:
    d = np.minimum(a[1], b[1]) - np.maximum(a[0], b[0])
    return float(np.prod(np.clip(d, 0, None)))


def _footprints_touch(a, b) -> bool:
    return bool(np.all(np.minimum(a[1], b[1])[[0, 2]] > np.maximum(a[0], b[0])[[0, 2]]))


def validate(scene: SceneGraph, bounds=DEFAULT_BOUNDS) -> ValidationReport:
    """Layout warnings; the ground plane is the bottom face of ``bounds``."""
    lo_b, hi_b = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
    boxes = [o.enclosing_aabb() for o in scene]
    out = []
    for o, (lo, hi) in zip(scene, boxes):
        if np.any(lo < lo_b - 1e-9) or np.any(hi > hi_b + 1e-9):
            out.append(Issue("out_of_bounds", (o.id,), f"AABB {lo.round(4).tolist()}..{hi.round(4).tolist()} "
                                                        "leaves the scene bounds"))
    objs = scene.objects
    for i in range(len(objs)):
        for j in range(i + 1, len(objs)):
            v = _overlap_volume(boxes[i], boxes[j])
            smaller = min(np.prod(boxes[i][1] - boxes[i][0]), np.prod(boxes[j][1] - boxes[j][0]))
            if v > OVERLAP_FRACTION * smaller:
                out.append(Issue("interpenetration", (objs[i].id, objs[j].id),
                                 f"overlap {v / smaller:.1%} of the smaller box"))
    for i, o in enumerate(objs):
        lo, hi = boxes[i]
        height = hi[1] - lo[1]
        supports = [lo_b[1]] + [boxes[j][1][1] for j in range(len(objs))
                                if j != i and _footprints_touch(boxes[i], boxes[j])
                                and boxes[j][1][1] <= lo[1] + FLOAT_FRACTION * height]
        gap = lo[1] - max(supports)
        if gap > FLOAT_FRACTION * height:
            out.append(Issue("floating", (o.id,), f"bottom is {gap:.4g} above its support"))
    return ValidationReport(out)


# ------------------------------------------------------------- instantiation

def normalize_unit(mesh: TriMesh, per_axis: bool = True) -> TriMesh:
    """Center at the origin and scale into [-0.5, 0.5]^3 (per axis or uniformly)."""
    lo, hi = mesh.bounds()
    ext = hi - lo
    s = 1.0 / np.where(ext > 0, ext, 1.0) if per_axis else np.full(3, 1.0 / ext.max())
    return TriMesh((mesh.vertices - (lo + hi) / 2) * s, mesh.triangles)


def canonical_category(name: str) -> str:
    n = name.strip().lower()
    return CATEGORY_ALIASES.get(n, n)


@dataclass
class Placed:
    id: str
    local: TriMesh           # source mesh, uniformly normalized into the unit cube
    transform: np.ndarray    # 4x4 applied to the per-axis normalized mesh
    mesh: TriMesh            # world-space result


def _place(o: SceneObject, local: TriMesh) -> Placed:
    unit = normalize_unit(local, per_axis=True)
    m = o.transform()
    world = TriMesh(unit.vertices @ m[:3, :3].T + m[:3, 3], unit.triangles)
    return Placed(o.id, normalize_unit(local, per_axis=False), m, world)


def procedural_mesh(category: str, resolution: int = 48) -> TriMesh:
    kind = canonical_category(category)
    if kind not in KINDS:
        raise SceneError(f"unknown object category {category!r} for the procedural source "
                         f"(known: {', '.join(KINDS + tuple(CATEGORY_ALIASES))})")
    return shape_mesh(random_shape(kind, 0), resolution)


@dataclass
class TokenSource:
    """Decode ``<token_dir>/<object id>.tok`` with a trained tokenizer."""

    tokenizer: object
    token_dir: Path
    grid: int = 64
    coarse: int = 8

    def mesh_for(self, o: SceneObject) -> TriMesh:
        from .extract import GridSpec, extract, remove_floaters
        from .vq import TokenSequence
        path = Path(self.token_dir) / f"{o.id}.tok"
        if not path.exists():
            raise SceneError(f"missing token file for object {o.id!r}: {path}")
        tokens = TokenSequence.load(path, provenance="generated")
        mesh, _ = extract(self.tokenizer.field(tokens), GridSpec(self.grid, self.coarse))
        if mesh.n_faces == 0:
            raise SceneError(f"tokens for object {o.id!r} decode to an empty surface")
        return remove_floaters(mesh, 0.1)


def instantiate(scene: SceneGraph, source="procedural", resolution: int = 48) -> list[Placed]:
    """One placed mesh per object, in scene order."""
    out = []
    for o in scene:
        if source == "procedural":
            local = procedural_mesh(o.object_category, resolution)
        elif isinstance(source, TokenSource):
            local = source.mesh_for(o)
        else:
            raise SceneError(f"unknown instantiation source {source!r}")
        out.append(_place(o, local))
    return out


def merge(placed: Sequence[Placed]) -> TriMesh:
    verts, tris, off = [], [], 0
    for p in placed:
        verts.append(p.mesh.vertices)
        tris.append(p.mesh.triangles + off)
        off += len(p.mesh.vertices)
    if not verts:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    return TriMesh(np.concatenate(verts), np.concatenate(tris))


# ----------------------------------------------------------------- exemplars

def read_exemplars(path) -> list[tuple[str, SceneGraph]]:
    """JSON-lines of {"prompt": str, "scene": [...]}."""
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        d = json.loads(line)
        if set(d) != {"prompt", "scene"}:
            raise SceneError(f"{path}:{n}: exemplar needs exactly 'prompt' and 'scene'")
        out.append((d["prompt"], parse(json.dumps(d["scene"]))))
    return out


def write_exemplars(pairs, path) -> None:
    lines = [json.dumps({"prompt": p, "scene": [o.to_json() for o in s]}) for p, s in pairs]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def example_scene_path() -> Path:
    return Path(__file__).parent / "data" / "example_scene.json"
