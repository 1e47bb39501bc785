import json

import numpy as np
import pytest

from itfa.synthdata import (
    BACKGROUND_FILL,
    ClassVocabulary,
    CocoFormatError,
    DatasetConfig,
    DatasetConfigError,
    PlacementError,
    SupportSetError,
    build_dataset,
    count_instances,
    generate_scene,
    load_dataset,
    read_coco_annotations,
    sample_support_set,
    save_dataset,
    write_coco_annotations,
)
from itfa.boxops import iou_matrix


def test_vocabulary_layout(vocab):
    assert vocab.background_index == 6
    assert vocab.novel_indices == [7, 8, 9]
    assert vocab.joint_width == 10
    assert vocab.index_of("crescent") == 8 and vocab.name_of(8) == "crescent"
    with pytest.raises(KeyError):
        vocab.name_of(6)
    with pytest.raises(ValueError):
        ClassVocabulary(("a", "b"), ("a",))
    assert ClassVocabulary.from_dict(vocab.to_dict()) == vocab


def test_scene_is_deterministic(vocab):
    a = generate_scene(42, vocab, max_instances=3)
    b = generate_scene(42, vocab, max_instances=3)
    assert np.array_equal(a.pixels, b.pixels)
    assert a.instances == b.instances
    assert not np.array_equal(a.pixels, generate_scene(43, vocab).pixels)


@pytest.mark.parametrize("seed", range(25))
def test_boxes_are_tight_pixel_bounds(vocab, seed):
    img = generate_scene(seed, vocab, max_instances=3, style="standard")
    fill = BACKGROUND_FILL["standard"]
    fg = np.any(np.abs(img.pixels - fill) > 1e-6, axis=2)
    covered = np.zeros_like(fg)
    for inst in img.instances:
        x1, y1, x2, y2 = (int(v) for v in inst.box)
        assert x2 - x1 >= 1 and y2 - y1 >= 1
        region = fg[y1:y2, x1:x2]
        # shape touches every side of its box
        assert region[0].any() and region[-1].any() and region[:, 0].any() and region[:, -1].any()
        covered[y1:y2, x1:x2] = True
    assert not (fg & ~covered).any()
    ious = iou_matrix(img.boxes(), img.boxes())
    np.fill_diagonal(ious, 0)
    assert (ious < 0.3).all()


def test_scene_errors(vocab):
    with pytest.raises(PlacementError):
        generate_scene(0, vocab, canvas=(16, 16))
    with pytest.raises(ValueError):
        generate_scene(0, vocab, allowed_classes=[])


def test_split_class_membership(small_split):
    v = small_split.vocabulary
    assert all(i.class_index in v.base_indices for im in small_split.base_train for i in im.instances)
    assert all(i.class_index in v.novel_indices for im in small_split.novel_pool for i in im.instances)
    assert set(count_instances(small_split.test)) == set(v.class_indices)
    assert small_split.shifted_test[0].pixels[0, 0, 0] == pytest.approx(BACKGROUND_FILL["shifted"], abs=1e-6)


def test_dataset_config_error():
    with pytest.raises(DatasetConfigError, match="fewer than the maximum K"):
        build_dataset(DatasetConfig(n_base_train=2, n_novel_pool=3, n_test=2, max_k=10))


@pytest.mark.parametrize("k", [1, 2, 3])
def test_support_set_has_exactly_k_per_class(small_split, k):
    v = small_split.vocabulary
    s = sample_support_set(small_split.novel_pool, k, seed=5, vocab=v)
    counts = count_instances(s.items)
    assert all(counts[c] == k for c in v.novel_indices)
    assert sample_support_set(small_split.novel_pool, k, 5, v).items[0].instances == s.items[0].instances


def test_support_set_too_small(small_split):
    with pytest.raises(SupportSetError) as exc:
        sample_support_set(small_split.novel_pool[:2], 50, 0, small_split.vocabulary)
    assert exc.value.k == 50


def test_coco_round_trip(tmp_path, small_split):
    v = small_split.vocabulary
    write_coco_annotations(small_split.test, v, tmp_path / "t.json")
    v2, images = read_coco_annotations(tmp_path / "t.json")
    assert v2 == v
    for a, b in zip(small_split.test, images):
        assert a.image_id == b.image_id
        np.testing.assert_allclose(a.boxes(), b.boxes())
        assert list(a.labels()) == list(b.labels())
    doc = json.loads((tmp_path / "t.json").read_text())
    x1, y1, x2, y2 = small_split.test[0].instances[0].box
    assert doc["annotations"][0]["bbox"] == [x1, y1, x2 - x1, y2 - y1]


def _broken(tmp_path, small_split, mutate):
    write_coco_annotations(small_split.test[:2], small_split.vocabulary, tmp_path / "t.json")
    doc = json.loads((tmp_path / "t.json").read_text())
    mutate(doc)
    (tmp_path / "t.json").write_text(json.dumps(doc))
    return tmp_path / "t.json"


def test_coco_errors(tmp_path, small_split):
    p = _broken(tmp_path, small_split, lambda d: d["annotations"][0].update(category_id=99))
    with pytest.raises(CocoFormatError, match="annotation 1"):
        read_coco_annotations(p)
    p = _broken(tmp_path, small_split, lambda d: d["annotations"][1].update(bbox=[1, 1, 0, 4]))
    with pytest.raises(CocoFormatError, match="annotation 2: degenerate"):
        read_coco_annotations(p)
    p = _broken(tmp_path, small_split, lambda d: d["annotations"][0].update(image_id=12345))
    with pytest.raises(CocoFormatError, match="unknown image_id"):
        read_coco_annotations(p)


def test_save_and_load_dataset(tmp_path, small_split):
    save_dataset(small_split, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert back.vocabulary == small_split.vocabulary
    assert np.array_equal(back.novel_pool[3].pixels, small_split.novel_pool[3].pixels)
    assert back.test[1].instances == small_split.test[1].instances
