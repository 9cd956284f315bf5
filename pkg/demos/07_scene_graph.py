"""
Scene graphs
============

A scene is a flat JSON list of captioned boxes with a yaw angle. We check
the layout (bounds, overlaps, floating objects) and then place one mesh per
object.
"""
import json

from shapetok.geom import write_obj
from shapetok.scene import example_scene_path, instantiate, load_scene, merge, parse, validate

scene = load_scene(example_scene_path())
for o in scene:
    print(f"{o.id:14s} {o.object_category:8s} at {o.position} yaw {o.rotation_y_degrees}")
print("layout ok:", validate(scene).ok)

# a broken layout: a crate hovering inside another crate
bad = parse(json.dumps([
    {"id": "a", "object_category": "box", "object_caption": "crate", "position": [0, 0.5, 0],
     "rotation_y_degrees": 0, "bbox_size": [1, 1, 1]},
    {"id": "b", "object_category": "box", "object_caption": "crate", "position": [0.3, 1.2, 0],
     "rotation_y_degrees": 0, "bbox_size": [1, 1, 1]},
]))
for w in validate(bad).warnings:
    print("warning:", w.kind, w.ids, w.detail)

try:
    parse('[{"id": "x", "rotation_x_degrees": 5}]')
except ValueError as e:
    print("rejected:", e)

mesh = merge(instantiate(scene))
write_obj(mesh, "scene.obj")
print(f"wrote scene.obj ({mesh.n_faces} faces)")
