import numpy as np
import pytest

from gavd.core import (AttentionRow, ProbVec, TokenLayout, entropy, kl_divergence, normalize,
                       restrict_to_visual, sharpen, smooth)
from gavd.errors import DegenerateDistribution, ShapeError

from conftest import layout_with


def test_restrict_renormalizes_visual_weights():
    layout = layout_with("svv")
    p = restrict_to_visual(AttentionRow(0, 0, [0.2, 0.3, 0.5]), layout)
    np.testing.assert_allclose(p.values, [0.375, 0.625])


def test_restrict_zero_visual_mass_is_degenerate():
    layout = layout_with("svvt")
    with pytest.raises(DegenerateDistribution):
        restrict_to_visual(AttentionRow(0, 0, [0.5, 0.0, 0.0, 0.5]), layout)


def test_restrict_uniform_visual_is_identity():
    layout = layout_with("vvvv")
    p = restrict_to_visual(AttentionRow(0, 0, [0.25] * 4), layout)
    np.testing.assert_allclose(p.values, [0.25] * 4)


def test_restrict_without_renormalize_returns_raw_weights():
    layout = layout_with("svvt")
    raw = restrict_to_visual(AttentionRow(0, 0, [0.1, 0.2, 0.3, 0.4]), layout, renormalize=False)
    np.testing.assert_array_equal(raw, [0.2, 0.3])


def test_restrict_length_mismatch():
    with pytest.raises(ShapeError):
        restrict_to_visual(AttentionRow(0, 0, [0.5, 0.5]), layout_with("svv"))


@pytest.mark.parametrize("p, expected", [
    ([0.25] * 4, 1.386294),
    ([0.0, 1.0, 0.0], 0.0),
    ([0.5, 0.5, 0.0, 0.0], 0.693147),
])
def test_entropy_examples(p, expected):
    assert entropy(ProbVec(p)) == pytest.approx(expected, abs=1e-6)


def test_kl_identity_is_zero():
    p = ProbVec([0.1, 0.6, 0.3])
    assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-12)


def test_kl_one_hot_vs_uniform():
    assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(0.693147, abs=1e-6)


def test_kl_derived_value():
    # 0.75 ln 1.5 + 0.25 ln 0.5, evaluated independently
    assert kl_divergence([0.75, 0.25], [0.5, 0.5]) == pytest.approx(0.130812, abs=1e-6)


def test_kl_smoothing_keeps_zero_denominator_finite():
    value = kl_divergence([0.5, 0.5], [1.0, 0.0])
    assert np.isfinite(value) and value > 5


def test_kl_support_mismatch():
    with pytest.raises(ShapeError):
        kl_divergence([1.0], [0.5, 0.5])


def test_smooth_clamps_and_renormalizes():
    q = smooth([1.0, 0.0], eps=1e-8)
    assert q[1] > 0 and q.sum() == pytest.approx(1.0)


def test_sharpen_identity_at_tau_one():
    p = ProbVec([0.1, 0.2, 0.7])
    np.testing.assert_allclose(sharpen(p, 1.0).values, p.values, atol=1e-15)


@pytest.mark.parametrize("tau", [0.03, 0.5, 3.0])
def test_sharpen_fixes_one_hot(tau):
    np.testing.assert_array_equal(sharpen([0.0, 1.0, 0.0], tau).values, [0.0, 1.0, 0.0])


def test_sharpen_derived_value():
    np.testing.assert_allclose(sharpen([0.8, 0.2], 0.5).values, [0.941176, 0.058824], atol=1e-6)


def test_sharpen_rejects_nonpositive_tau():
    with pytest.raises(ValueError):
        sharpen([0.5, 0.5], 0.0)


def test_probvec_validation():
    with pytest.raises(ValueError):
        ProbVec([0.5, 0.6])
    with pytest.raises(ValueError):
        ProbVec([1.5, -0.5])
    assert ProbVec([0.5, 0.5]).support_size == 2


def test_normalize_degenerate():
    with pytest.raises(DegenerateDistribution):
        normalize([0.0, 0.0])


def test_attention_row_rejects_negative_and_nan():
    with pytest.raises(ValueError):
        AttentionRow(0, 0, [0.5, -0.1])
    with pytest.raises(ValueError):
        AttentionRow(0, 0, [np.nan, 1.0])


def test_layout_build_and_roundtrip():
    layout = TokenLayout.build(1, 3, 2, 2)
    assert layout.seq_len == 9
    np.testing.assert_array_equal(layout.visual_indices, [1, 2, 3, 4, 5, 6])
    assert layout.n_frames == 3
    assert TokenLayout.from_dict(layout.to_dict()) == layout


def test_layout_rejects_spans_off_visual_positions():
    with pytest.raises(ValueError):
        TokenLayout(3, ("system", "visual", "text"), ((0, 0, 2),), 2)
    with pytest.raises(ValueError):
        TokenLayout(3, ("visual", "visual", "text"), ((0, 0, 1),), 2)
