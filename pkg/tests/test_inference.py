import numpy as np
import pytest
import torch

from itfa.detector import Detector, DetectorConfig
from itfa.inference import VocabularyMismatchError, detect, detect_all, read_detections, write_detections
from itfa.synthdata import ClassVocabulary
from itfa.training import branch_surgery


@pytest.fixture(scope="module")
def branched():
    vocab = ClassVocabulary(("circle", "square", "triangle", "ring", "cross", "star"),
                            ("pentagon", "crescent", "diamond"))
    m = branch_surgery(Detector(DetectorConfig(), 6, seed=0), vocab, 0)
    m.eval()
    return m, vocab


def test_detections_are_sorted_capped_and_skip_background(branched, small_split):
    m, vocab = branched
    dets = detect(small_split.test[0].pixels, m, vocab, score_threshold=0.0, max_detections=30)
    assert 0 < len(dets) <= 30
    assert all(d.class_index != vocab.background_index for d in dets)
    assert [d.score for d in dets] == sorted((d.score for d in dets), reverse=True)
    for d in dets:
        x1, y1, x2, y2 = d.box
        assert 0 <= x1 <= x2 <= 64 and 0 <= y1 <= y2 <= 64


def test_threshold_filters(branched, small_split):
    m, vocab = branched
    assert detect(small_split.test[0].pixels, m, vocab, score_threshold=1.0) == []


def test_batching_does_not_change_results(branched, small_split):
    m, vocab = branched
    a = detect_all(small_split.test[:5], m, vocab, batch_size=1)
    b = detect_all(small_split.test[:5], m, vocab, batch_size=5)
    assert len(a) == len(b) == 5
    for x, y in zip(a, b):
        assert [d.class_index for d in x] == [d.class_index for d in y]
        np.testing.assert_allclose([d.score for d in x], [d.score for d in y], atol=1e-5)


def test_vocabulary_mismatch(branched, small_split):
    m, _ = branched
    with pytest.raises(VocabularyMismatchError):
        detect(small_split.test[0].pixels, m, ClassVocabulary(("a", "b"), ("c",)))


def test_detection_dump_round_trip(tmp_path, branched, small_split):
    m, vocab = branched
    dets = detect_all(small_split.test[:3], m, vocab, score_threshold=0.2)
    write_detections(tmp_path / "d.jsonl", [im.image_id for im in small_split.test[:3]], dets, vocab)
    back = read_detections(tmp_path / "d.jsonl", vocab)
    for im, d in zip(small_split.test[:3], dets):
        assert back.get(im.image_id, []) == d
