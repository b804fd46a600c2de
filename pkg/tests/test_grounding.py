import json

import numpy as np
import pytest

from gavd.core import AttentionRow, TokenLayout
from gavd.dump import AttentionDump
from gavd.errors import DegenerateLabels, EmptyInput
from gavd.grounding import (CSV_COLUMNS, KeyframeAnnotation, auroc, combine_components, keyframe_auroc,
                            mean_attention, quality_score, rank_layers_heads, reports_to_csv, reports_to_json,
                            selectiveness, vision_centricity)

from conftest import layout_with


def test_mean_attention_single_row():
    r = AttentionRow(2, 3, [0.2, 0.8])
    m = mean_attention([r])
    np.testing.assert_array_equal(m.weights, r.weights)
    assert (m.layer, m.head) == (2, 3)


def test_mean_attention_identical_rows():
    r = AttentionRow(0, 1, [0.3, 0.7])
    np.testing.assert_allclose(mean_attention([r, r]).weights, [0.3, 0.7])


def test_mean_attention_arithmetic_mean():
    m = mean_attention([AttentionRow(0, 0, [0.2, 0.8]), AttentionRow(0, 1, [0.6, 0.4])])
    np.testing.assert_allclose(m.weights, [0.4, 0.6])
    assert m.head == -1


def test_mean_attention_empty():
    with pytest.raises(EmptyInput):
        mean_attention([])


def test_selectiveness_extremes():
    layout = layout_with("vvvv")
    assert selectiveness(AttentionRow(0, 0, [0.25] * 4), layout) == pytest.approx(0.0, abs=1e-12)
    assert selectiveness(AttentionRow(0, 0, [0, 1, 0, 0]), layout) == pytest.approx(1.0)


def test_selectiveness_derived_value():
    # 1 - ln 2 / ln 4
    layout = layout_with("vvvv")
    assert selectiveness(AttentionRow(0, 0, [0.5, 0.5, 0, 0]), layout) == pytest.approx(0.5, abs=1e-12)


def test_vision_centricity_examples():
    assert vision_centricity(AttentionRow(0, 0, [0.5, 0.5]), layout_with("vv")) == pytest.approx(1.0)
    assert vision_centricity(AttentionRow(0, 0, [0, 0, 1.0]), layout_with("vvt")) == 0.0
    assert vision_centricity(AttentionRow(0, 0, [0.2, 0.5, 0.3]), layout_with("svt")) == pytest.approx(0.5)


def test_auroc_perfect_and_tied():
    assert auroc(np.array([0.9, 0.8, 0.1, 0.2]), np.array([1, 1, 0, 0])) == 1.0
    assert auroc(np.full(5, 0.2), np.array([1, 0, 1, 0, 0])) == 0.5


def test_auroc_derived_value():
    # pairs (0.4 > 0.1, 0.4 > 0.3, 0.2 > 0.1, 0.2 < 0.3) -> 3 of 4
    assert auroc(np.array([0.4, 0.1, 0.3, 0.2]), np.array([1, 0, 0, 1])) == 0.75


def test_auroc_needs_both_classes():
    with pytest.raises(DegenerateLabels):
        auroc(np.array([0.1, 0.2]), np.array([1, 1]))


def test_keyframe_auroc_uses_frame_flags():
    layout = TokenLayout.build(1, 3, 2, 1)
    w = np.array([0.1, 0.05, 0.05, 0.3, 0.3, 0.05, 0.05, 0.1])
    ann = KeyframeAnnotation((0, 1, 0))
    assert keyframe_auroc(AttentionRow(0, 0, w), layout, ann) == 1.0


def test_combine_components_sum_and_product():
    assert combine_components(0.5, 0.5, 0.75) == pytest.approx(1.75)
    assert combine_components(0.5, 0.5, 0.75, "product") == pytest.approx(0.1875)
    assert combine_components(0.5, 0.25, None) == pytest.approx(0.75)


def test_quality_score_all_components_maximal():
    layout = layout_with("vvv")
    ann = KeyframeAnnotation((1, 0, 0))
    report = quality_score(AttentionRow(0, 0, [1.0, 0.0, 0.0]), layout, ann)
    assert report.score == pytest.approx(3.0)


def test_quality_score_without_keyframes_has_null_auroc():
    report = quality_score(AttentionRow(0, 0, [0.5, 0.5]), layout_with("vv"), None)
    assert report.keyframe_auroc is None
    assert json.loads(reports_to_json([report]))[0]["keyframe_auroc"] is None


def _dump(rows, layout, ann=None):
    return AttentionDump(layout, np.asarray(rows, dtype=float), None, ann)


def test_rank_single_layer_single_head():
    layout = layout_with("vvvt")
    dump = _dump([[[0.5, 0.3, 0.1, 0.1]]], layout)
    layers, heads = rank_layers_heads(dump)
    assert len(layers) == len(heads) == 1
    lr, hr = layers[0], heads[0]
    assert (lr.selectiveness, lr.vision_centricity, lr.score) == (hr.selectiveness, hr.vision_centricity, hr.score)
    assert lr.head is None and hr.head == 0


def test_rank_dominant_layer_first():
    layout = layout_with("vvvv")
    ann = KeyframeAnnotation((1, 0, 0, 0))
    strong = [[0.97, 0.01, 0.01, 0.01]] * 2
    weak = [[0.25, 0.25, 0.25, 0.25]] * 2
    layers, _ = rank_layers_heads(_dump([weak, strong], layout, ann))
    assert layers[0].layer == 1


def test_rank_planted_head_first():
    # Component oracle computed by hand: the planted head is one-hot on a keyframe
    # (selectiveness 1, centricity 1, AUROC 1), every other head is uniform.
    layout = layout_with("svvvvt")
    ann = KeyframeAnnotation((0, 0, 1, 0))
    uniform = [0.1, 0.2, 0.2, 0.2, 0.2, 0.1]
    planted = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0]
    rows = [[uniform, uniform, planted, uniform]]
    _, heads = rank_layers_heads(_dump(rows, layout, ann))
    assert (heads[0].layer, heads[0].head) == (0, 2)
    assert heads[0].score == pytest.approx(3.0)
    assert heads[1].score == pytest.approx(0.0 + 0.8 + 0.5)


def test_rank_averages_over_samples():
    layout = layout_with("vv")
    a = _dump([[[1.0, 0.0]]], layout)
    b = _dump([[[0.5, 0.5]]], layout)
    layers, _ = rank_layers_heads([a, b])
    assert layers[0].selectiveness == pytest.approx(0.5)


def test_csv_header_is_stable():
    report = quality_score(AttentionRow(0, 0, [0.5, 0.5]), layout_with("vv"), None)
    lines = reports_to_csv([report]).splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert lines[1].split(",")[4] == ""
