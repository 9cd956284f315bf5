import json

import numpy as np
import pytest

from shapetok import scene as S


def obj(**kw):
    d = {"id": "a", "object_category": "box", "object_caption": "a crate", "position": [0, 0.5, 0],
         "rotation_y_degrees": 0, "bbox_size": [1, 1, 1]}
    d.update(kw)
    return d


def scene(*objs):
    return S.parse(json.dumps(list(objs)))


def test_example_scene_round_trips_and_validates():
    text = S.example_scene_path().read_text()
    sc = S.parse(text)
    assert len(sc) == 5
    assert S.serialize(sc) + "\n" == text
    assert S.validate(sc).ok


def test_save_load_round_trip(tmp_path):
    sc = S.load_scene(S.example_scene_path())
    S.save_scene(sc, tmp_path / "s.json")
    assert (tmp_path / "s.json").read_bytes() == S.example_scene_path().read_bytes()


def test_empty_scene():
    sc = S.parse("[]")
    assert len(sc) == 0 and S.serialize(sc) == "[]" and S.validate(sc).ok
    assert S.merge(S.instantiate(sc)).n_faces == 0


def test_rotation_x_is_rejected_by_name():
    with pytest.raises(S.SceneError, match="rotation_x_degrees"):
        scene(obj(rotation_x_degrees=10))


@pytest.mark.parametrize("bad, msg", [
    ({"color": "red"}, "unknown field 'color'"),
    ({"bbox_size": [1, 0, 1]}, "positive"),
    ({"position": [0, 0]}, "three numbers"),
    ({"rotation_y_degrees": "90"}, "finite number"),
    ({"id": 3}, "string"),
])
def test_field_errors(bad, msg):
    with pytest.raises(S.SceneError, match=msg):
        scene(obj(**bad))


def test_missing_field_and_bad_json():
    d = obj()
    del d["object_caption"]
    with pytest.raises(S.SceneError, match="object_caption"):
        scene(d)
    with pytest.raises(S.SceneError, match="malformed"):
        S.parse("[{")
    with pytest.raises(S.SceneError, match="array"):
        S.parse("{}")
    with pytest.raises(S.SceneError, match="duplicate"):
        scene(obj(), obj())


def test_overlap_is_reported():
    r = S.validate(scene(obj(id="a"), obj(id="b", position=[0.5, 0.5, 0])))
    assert r.kinds() == ["interpenetration"]
    assert r.warnings[0].ids == ("a", "b")


def test_touching_boxes_are_fine():
    assert S.validate(scene(obj(id="a"), obj(id="b", position=[1.0, 0.5, 0]))).ok


def test_floating_and_stacking():
    assert S.validate(scene(obj(position=[0, 2, 0]))).kinds() == ["floating"]
    stacked = scene(obj(id="a"), obj(id="b", position=[0, 1.5, 0], bbox_size=[0.5, 1, 0.5]))
    assert S.validate(stacked).ok


def test_out_of_bounds():
    r = S.validate(scene(obj(position=[4.8, 0.5, 0])))
    assert r.kinds() == ["out_of_bounds"]
    assert S.validate(scene(obj(position=[4.8, 0.5, 0])), bounds=((-10, 0, -10), (10, 10, 10))).ok


def test_yaw_45_footprint_grows_by_sqrt2():
    lo, hi = S.SceneObject.from_json(obj(rotation_y_degrees=45)).enclosing_aabb()
    np.testing.assert_allclose(hi - lo, [np.sqrt(2), 1, np.sqrt(2)], atol=1e-12)


def test_instantiated_sphere_fills_its_box():
    placed = S.instantiate(scene(obj(object_category="sphere", bbox_size=[2, 2, 2], position=[0, 1, 0])))
    v = placed[0].mesh.vertices
    lo, hi = placed[0].mesh.bounds()
    np.testing.assert_allclose(hi - lo, [2, 2, 2], atol=1e-9)
    r = np.linalg.norm(v - [0, 1, 0], axis=1)
    assert np.abs(r - 1).max() < 0.02


def test_yaw_90_swaps_extents():
    placed = S.instantiate(scene(obj(bbox_size=[2, 1, 0.5], rotation_y_degrees=90)))
    lo, hi = placed[0].mesh.bounds()
    np.testing.assert_allclose(hi - lo, [0.5, 1, 2], atol=1e-9)


def test_aliases_and_unknown_category():
    assert S.canonical_category(" Cube ") == "box"
    with pytest.raises(S.SceneError, match="teapot"):
        S.instantiate(scene(obj(object_category="teapot")))


def test_merge_counts_faces():
    placed = S.instantiate(S.load_scene(S.example_scene_path()))
    assert S.merge(placed).n_faces == sum(p.mesh.n_faces for p in placed)


def test_token_source_missing_file(tmp_path):
    src = S.TokenSource(tokenizer=None, token_dir=tmp_path)
    with pytest.raises(S.SceneError, match="missing token file"):
        S.instantiate(scene(obj()), src)


def test_exemplars_round_trip(tmp_path):
    sc = S.load_scene(S.example_scene_path())
    S.write_exemplars([("a study corner", sc), ("empty room", S.SceneGraph())], tmp_path / "e.jsonl")
    back = S.read_exemplars(tmp_path / "e.jsonl")
    assert [p for p, _ in back] == ["a study corner", "empty room"]
    assert S.serialize(back[0][1]) == S.serialize(sc)
    (tmp_path / "bad.jsonl").write_text('{"prompt": "x"}\n')
    with pytest.raises(S.SceneError, match="bad.jsonl:1"):
        S.read_exemplars(tmp_path / "bad.jsonl")
