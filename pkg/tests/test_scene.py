import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scenegraph.numeric import Tensor
from scenegraph.scene import (NUM_OBJECT_CLASSES, ROI_DIM, UNION_DIM, VISUAL_DIM, BoundingBox, ClassVocabulary,
                              ObjectProposal, PairFeature, Scene, SceneAnnotation, SceneFormatError,
                              assemble_parts, assemble_visual_feature, canonical_order, iou, iou_matrix,
                              load_manifest, load_scene_file, per_class_nms, project_to_subspace, read_manifest,
                              save_scene_file, spatial_feature, synthesize_union_feature, write_manifest)


def f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def make_proposal(rng, box=(0.1, 0.1, 0.5, 0.6), label=3, conf=0.75):
    scores = rng.uniform(0, 1, NUM_OBJECT_CLASSES)
    return ObjectProposal(BoundingBox(*f32(box)), f32(rng.normal(size=ROI_DIM)), f32(scores), label, float(f32(conf)))


def random_scene(rng, n_prop=3, name="s"):
    props = [make_proposal(rng, box=(0.1 * k, 0.05 * k, 0.1 * k + 0.3, 0.05 * k + 0.4), label=k + 1)
             for k in range(n_prop)]
    pairs = [PairFeature(0, 1, f32(rng.normal(size=UNION_DIM)))] if n_prop > 1 else []
    ann = SceneAnnotation([p.box for p in props], [p.detector_label for p in props],
                          [(0, 2, 1)] if n_prop > 1 else [])
    return Scene(name, props, pairs, ann)


# --- types ---------------------------------------------------------------------

def test_bounding_box_rejects_degenerate():
    with pytest.raises(ValueError):
        BoundingBox(0.5, 0.1, 0.5, 0.2)


def test_annotation_rejects_background_predicate():
    box = BoundingBox(0, 0, 1, 1)
    with pytest.raises(ValueError):
        SceneAnnotation([box, box], [1, 2], [(0, 0, 1)])
    with pytest.raises(ValueError):
        SceneAnnotation([box], [1], [(0, 1, 3)])


def test_pair_feature_needs_distinct_indices():
    with pytest.raises(ValueError):
        PairFeature(1, 1, np.zeros(UNION_DIM))


def test_vocabulary_sentinels():
    v = ClassVocabulary.default()
    assert len(v.object_names) == 151 and len(v.predicate_names) == 50
    assert v.object_names[0] == "__background__" and v.predicate_names[0] == "__no_relation__"


# --- visual feature ----------------------------------------------------------------

def test_all_zero_parts_give_zero_vector():
    out = assemble_parts(np.zeros(ROI_DIM), np.zeros(NUM_OBJECT_CLASSES), np.zeros(4))
    assert out.shape == (2203,) and not out.any()


def test_assembly_order():
    out = assemble_parts(np.ones(ROI_DIM), np.zeros(NUM_OBJECT_CLASSES), np.zeros(4))
    assert np.all(out[:2048] == 1) and not out[2048:].any()


def test_assembly_slices_round_trip(rng):
    p = make_proposal(rng)
    x = assemble_visual_feature(p)
    assert np.array_equal(x[0:2048], p.roi_feature)
    assert np.array_equal(x[2048:2199], p.class_scores)
    assert np.array_equal(x[2199:2203], p.box.as_array())


@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e6))
def test_assembly_round_trip_property(seed, scale):
    g = np.random.default_rng(seed)
    roi = g.normal(0.0, scale, ROI_DIM)
    scores, spatial = g.uniform(0, 1, NUM_OBJECT_CLASSES), g.uniform(0, 1, 4)
    x = assemble_parts(roi, scores, spatial)
    assert np.array_equal(x[:2048], roi) and np.array_equal(x[2048:2199], scores)
    assert np.array_equal(x[2199:], spatial)


def test_spatial_feature_normalises_by_image_size():
    s = spatial_feature(BoundingBox(10, 20, 30, 40), image_size=(100, 50))
    np.testing.assert_array_equal(s, [0.1, 0.4, 0.3, 0.8])


def test_spatial_outside_unit_range_is_error():
    with pytest.raises(ValueError):
        spatial_feature(BoundingBox(10, 20, 300, 40), image_size=(100, 50))


def test_projection_zero_input():
    out = project_to_subspace(Tensor(np.zeros(VISUAL_DIM)), Tensor(np.ones((VISUAL_DIM, 512))))
    assert out.shape == (512,) and not out.data.any()


def test_projection_selector(rng):
    x = rng.normal(size=VISUAL_DIM)
    selector = np.eye(VISUAL_DIM, 512)
    np.testing.assert_array_equal(project_to_subspace(Tensor(x), Tensor(selector)).data, x[:512])


def test_projection_matches_loop_oracle(rng):
    x, w = rng.normal(size=VISUAL_DIM), rng.normal(size=(VISUAL_DIM, 8))
    expected = [sum(x[i] * w[i, j] for i in range(VISUAL_DIM)) for j in range(8)]
    np.testing.assert_allclose(project_to_subspace(Tensor(x), Tensor(w)).data, expected, rtol=0, atol=1e-10)


def test_union_feature_is_deterministic(rng):
    a, b = make_proposal(rng), make_proposal(rng, box=(0.3, 0.3, 0.9, 0.9))
    u1, u2 = synthesize_union_feature(a, b), synthesize_union_feature(a, b)
    assert u1.shape == (UNION_DIM,) and np.array_equal(u1, u2)


# --- geometry --------------------------------------------------------------------------

def test_iou_identical():
    b = BoundingBox(0.1, 0.2, 0.4, 0.9)
    assert iou(b, b) == 1.0


def test_iou_disjoint():
    assert iou(BoundingBox(0, 0, 1, 1), BoundingBox(2, 2, 3, 3)) == 0.0


def test_iou_half_shifted_unit_squares():
    assert iou(BoundingBox(0, 0, 1, 1), BoundingBox(0.5, 0, 1.5, 1)) == pytest.approx(1 / 3, abs=1e-15)


boxes = st.tuples(st.floats(0, 10), st.floats(0, 10), st.floats(0.01, 5), st.floats(0.01, 5)).map(
    lambda t: BoundingBox(t[0], t[1], t[0] + t[2], t[1] + t[3]))


@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0


@given(st.lists(boxes, min_size=1, max_size=5), st.lists(boxes, min_size=1, max_size=5))
def test_iou_matrix_matches_scalar(a, b):
    m = iou_matrix([x.as_tuple() for x in a], [y.as_tuple() for y in b])
    expected = np.array([[iou(x, y) for y in b] for x in a])
    np.testing.assert_allclose(m, expected, rtol=1e-12, atol=1e-15)


def test_nms_single_proposal(rng):
    assert per_class_nms([make_proposal(rng)], 0.5) == [0]


def test_nms_same_class_identical_boxes(rng):
    props = [make_proposal(rng, conf=0.8), make_proposal(rng, conf=0.9)]
    assert per_class_nms(props, 0.5) == [1]


def test_nms_is_per_class(rng):
    props = [make_proposal(rng, label=1, conf=0.9), make_proposal(rng, label=2, conf=0.8)]
    assert per_class_nms(props, 0.5) == [0, 1]


@given(st.data())
def test_nms_independent_of_input_order(data):
    # distinct confidences: the index tie-break then never decides, so the kept set is order-free
    rng = np.random.default_rng(data.draw(st.integers(0, 10_000)))
    n = data.draw(st.integers(1, 8))
    confs = rng.permutation(np.linspace(0.2, 0.95, n))
    props = []
    for k in range(n):
        x, y = rng.uniform(0, 0.5, 2)
        props.append(make_proposal(rng, box=(x, y, x + rng.uniform(0.2, 0.5), y + rng.uniform(0.2, 0.5)),
                                   label=int(rng.integers(1, 3)), conf=confs[k]))
    perm = data.draw(st.permutations(range(n)))
    kept = per_class_nms(props)
    kept_perm = per_class_nms([props[i] for i in perm])
    assert kept == [perm[i] for i in kept_perm]


def test_nms_output_sorted_by_confidence(rng):
    props = [make_proposal(rng, box=(0.1 * k, 0.1 * k, 0.1 * k + 0.05, 0.1 * k + 0.05), conf=c)
             for k, c in enumerate([0.3, 0.9, 0.9, 0.5])]
    assert per_class_nms(props) == [1, 2, 3, 0]


def test_canonical_order_ties_by_index():
    assert canonical_order([0.5, 0.9, 0.5, 0.9]) == [1, 3, 0, 2]


# --- files ---------------------------------------------------------------------------

def test_scene_file_round_trip(tmp_path, rng):
    scene = random_scene(rng)
    save_scene_file(tmp_path / "a.bgtf", scene)
    back = load_scene_file(tmp_path / "a.bgtf")
    assert back.name == "a"
    assert back.annotation == scene.annotation
    for p, q in zip(scene.proposals, back.proposals):
        assert p.box == q.box and p.detector_label == q.detector_label
        assert p.detector_confidence == q.detector_confidence
        assert np.array_equal(p.roi_feature, q.roi_feature) and np.array_equal(p.class_scores, q.class_scores)
    assert [(pf.subject_index, pf.object_index) for pf in back.pairs] == [(0, 1)]
    assert np.array_equal(back.pairs[0].union_feature, scene.pairs[0].union_feature)


def test_empty_scene_file(tmp_path):
    save_scene_file(tmp_path / "e.bgtf", Scene("e"))
    back = load_scene_file(tmp_path / "e.bgtf")
    assert back.proposals == () and back.pairs == () and back.annotation == SceneAnnotation()


def test_corrupt_magic_names_offset(tmp_path, rng):
    path = tmp_path / "bad.bgtf"
    save_scene_file(path, random_scene(rng))
    data = bytearray(path.read_bytes())
    data[0:4] = b"XXXX"
    path.write_bytes(bytes(data))
    with pytest.raises(SceneFormatError, match="offset 0"):
        load_scene_file(path)


def test_truncated_file(tmp_path, rng):
    path = tmp_path / "t.bgtf"
    save_scene_file(path, random_scene(rng))
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(SceneFormatError, match="truncated"):
        load_scene_file(path)


def test_dimension_disagreement(tmp_path, rng):
    path = tmp_path / "d.bgtf"
    save_scene_file(path, random_scene(rng))
    data = bytearray(path.read_bytes())
    data[24:28] = (1024).to_bytes(4, "little")
    path.write_bytes(bytes(data))
    with pytest.raises(SceneFormatError, match="dims"):
        load_scene_file(path)


def test_trailing_bytes_rejected(tmp_path, rng):
    path = tmp_path / "x.bgtf"
    save_scene_file(path, random_scene(rng))
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(SceneFormatError, match="trailing"):
        load_scene_file(path)


def test_manifest_comments_and_relative_paths(tmp_path, rng):
    sub = tmp_path / "scenes"
    sub.mkdir()
    paths = []
    for k in range(2):
        paths.append(sub / f"s{k}.bgtf")
        save_scene_file(paths[-1], random_scene(rng, name=f"s{k}"))
    write_manifest(tmp_path / "m.txt", paths, header="two scenes")
    text = (tmp_path / "m.txt").read_text()
    assert text.startswith("# two scenes\n") and "scenes/s0.bgtf" in text
    (tmp_path / "m.txt").write_text(text + "\n   # trailing comment\n")
    assert read_manifest(tmp_path / "m.txt") == paths
    assert [s.name for s in load_manifest(tmp_path / "m.txt")] == ["s0", "s1"]


def test_missing_manifest(tmp_path):
    with pytest.raises(SceneFormatError):
        read_manifest(tmp_path / "nope.txt")
