import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefixvlm.masks import (MASK_SENTINEL, MaskKind, MaskMatrix, SegmentKind, SegmentLayout,
                             build_mask, mask_bias, mask_to_bias, reachability, validate_mask)

IMG, TXT, PAD = SegmentKind.IMAGE, SegmentKind.TEXT, SegmentKind.PAD
ALL_KINDS = list(MaskKind)


def oracle(layout, kind):
    """Direct per-cell transcription of the permission rules, pads applied last."""
    kinds, blocks = [], []
    for b, (k, n) in enumerate(layout.segments):
        kinds += [k] * n
        blocks += [b] * n
    n = len(kinds)
    allow = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            img_i, img_j = kinds[i] is IMG, kinds[j] is IMG
            txt_i = kinds[i] is TXT
            if kind is MaskKind.FULL_BIDIRECTIONAL:
                ok = True
            elif kind is MaskKind.IMAGE_BIDI_TEXT_CAUSAL:
                ok = (img_i and img_j) or (txt_i and (img_j or j <= i))
            elif kind is MaskKind.CAUSAL_BASELINE:
                ok = j <= i
            elif kind is MaskKind.INTERLEAVED_A:
                ok = img_j or j <= i
            else:
                ok = blocks[j] < blocks[i] or (blocks[j] == blocks[i] and (img_j or j <= i))
            if kinds[i] is PAD or kinds[j] is PAD:
                ok = i == j and kinds[i] is PAD
            allow[i, j] = ok
    return allow


def rows(*strings):
    return np.array([[c == "1" for c in s] for s in strings])


I2T2 = SegmentLayout.of((IMG, 2), (TXT, 2))
ALTERNATING = SegmentLayout.of((IMG, 1), (TXT, 1), (IMG, 1), (TXT, 1))

GOLDEN_I2T2 = {
    MaskKind.FULL_BIDIRECTIONAL: rows("1111", "1111", "1111", "1111"),
    MaskKind.IMAGE_BIDI_TEXT_CAUSAL: rows("1100", "1100", "1110", "1111"),
    MaskKind.CAUSAL_BASELINE: rows("1000", "1100", "1110", "1111"),
    MaskKind.INTERLEAVED_A: rows("1100", "1100", "1110", "1111"),
    MaskKind.INTERLEAVED_B: rows("1100", "1100", "1110", "1111"),
}


@pytest.mark.parametrize("kind", ALL_KINDS, ids=lambda k: k.value)
def test_golden_image2_text2(kind):
    np.testing.assert_array_equal(build_mask(I2T2, kind).allow, GOLDEN_I2T2[kind])
    np.testing.assert_array_equal(oracle(I2T2, kind), GOLDEN_I2T2[kind])


def test_interleaved_goldens():
    assert build_mask(ALTERNATING, MaskKind.INTERLEAVED_A).rows() == ["1010", "1110", "1110", "1111"]
    assert build_mask(ALTERNATING, MaskKind.INTERLEAVED_B).rows() == ["1000", "1100", "1110", "1111"]
    layout = SegmentLayout.parse("image:2,text:1,image:2,text:1")
    assert build_mask(layout, MaskKind.INTERLEAVED_B).rows() == [
        "110000", "110000", "111000", "111110", "111110", "111111"]


def test_pad_rows_and_columns():
    layout = SegmentLayout.of((IMG, 1), (TXT, 2), (PAD, 2))
    for kind in ALL_KINDS:
        allow = build_mask(layout, kind).allow
        assert allow[3:, :].tolist() == [[0, 0, 0, 1, 0], [0, 0, 0, 0, 1]]
        assert not allow[:3, 3:].any()


def test_non_interleaved_kinds_reject_multiple_images():
    for kind in (MaskKind.FULL_BIDIRECTIONAL, MaskKind.IMAGE_BIDI_TEXT_CAUSAL,
                 MaskKind.CAUSAL_BASELINE):
        with pytest.raises(ValueError, match="image"):
            build_mask(ALTERNATING, kind)
    with pytest.raises(ValueError):
        build_mask(SegmentLayout.of((TXT, 2), (IMG, 2)), MaskKind.IMAGE_BIDI_TEXT_CAUSAL)


def test_empty_layout_is_error():
    with pytest.raises(ValueError):
        SegmentLayout(())
    with pytest.raises(ValueError):
        SegmentLayout.of((IMG, 0))


def test_kind_aliases():
    assert MaskKind("stage1") is MaskKind.IMAGE_BIDI_TEXT_CAUSAL
    assert MaskKind("stage0") is MaskKind.FULL_BIDIRECTIONAL
    with pytest.raises(ValueError, match="expected one of"):
        MaskKind("diagonal")


def test_layout_parse_round_trip():
    layout = SegmentLayout.parse("image:16, text:4,pad:3")
    assert layout.total_len == 23
    assert str(layout) == "image:16,text:4,pad:3"
    with pytest.raises(ValueError):
        SegmentLayout.parse("image:two")


def test_mask_is_cached_and_read_only():
    a = build_mask(I2T2, MaskKind.CAUSAL_BASELINE)
    assert not a.allow.flags.writeable
    assert mask_bias(I2T2, "causal") is mask_bias(I2T2, MaskKind.CAUSAL_BASELINE)


def test_mask_to_bias_examples():
    ones = MaskMatrix(np.ones((2, 2), dtype=bool))
    np.testing.assert_array_equal(mask_to_bias(ones).data, np.zeros((2, 2)))
    eye = mask_to_bias(MaskMatrix(np.eye(2, dtype=bool))).data
    np.testing.assert_array_equal(eye, [[0, MASK_SENTINEL], [MASK_SENTINEL, 0]])
    bias = mask_to_bias(build_mask(I2T2, "stage1")).data
    np.testing.assert_array_equal(bias == 0, GOLDEN_I2T2[MaskKind.IMAGE_BIDI_TEXT_CAUSAL])


def test_reachability_examples():
    layout = SegmentLayout.of((IMG, 3), (TXT, 3))
    prefix = build_mask(layout, MaskKind.IMAGE_BIDI_TEXT_CAUSAL)
    assert reachability(prefix, 0) == {0, 1, 2}
    assert reachability(build_mask(layout, MaskKind.CAUSAL_BASELINE), 0) == {0}
    assert reachability(build_mask(I2T2, MaskKind.IMAGE_BIDI_TEXT_CAUSAL), 3) == {0, 1, 2, 3}
    with pytest.raises(IndexError):
        reachability(prefix, 6)


def test_validate_mask_examples():
    mask = build_mask(I2T2, MaskKind.IMAGE_BIDI_TEXT_CAUSAL)
    assert validate_mask(mask, I2T2, MaskKind.IMAGE_BIDI_TEXT_CAUSAL) is None
    bad = mask.allow.copy()
    bad[0, 3] = True
    v = validate_mask(MaskMatrix(bad), I2T2, MaskKind.IMAGE_BIDI_TEXT_CAUSAL)
    assert (v.i, v.j, v.expected, v.actual) == (0, 3, False, True)
    causal = build_mask(I2T2, MaskKind.CAUSAL_BASELINE).allow
    v = validate_mask(MaskMatrix(causal.T.copy()), I2T2, MaskKind.CAUSAL_BASELINE)
    assert v is not None and (v.i, v.j) == (0, 1)
    assert validate_mask(causal, ALTERNATING, MaskKind.CAUSAL_BASELINE) is not None


# ---------------------------------------------------------------------------
# properties over random layouts

@st.composite
def prefix_layouts(draw):
    segs = [(IMG, draw(st.integers(1, 5))), (TXT, draw(st.integers(1, 6)))]
    if draw(st.booleans()):
        segs.append((PAD, draw(st.integers(1, 3))))
    return SegmentLayout(tuple(segs))


@st.composite
def interleaved_layouts(draw):
    n = draw(st.integers(1, 5))
    kinds = draw(st.lists(st.sampled_from([IMG, TXT]), min_size=n, max_size=n))
    segs = [(k, draw(st.integers(1, 3))) for k in kinds]
    return SegmentLayout(tuple(segs))


@settings(max_examples=60, deadline=None)
@given(prefix_layouts(), st.sampled_from(ALL_KINDS))
def test_matches_oracle_on_prefix_layouts(layout, kind):
    np.testing.assert_array_equal(build_mask(layout, kind).allow, oracle(layout, kind))


@settings(max_examples=60, deadline=None)
@given(interleaved_layouts(), st.sampled_from([MaskKind.INTERLEAVED_A, MaskKind.INTERLEAVED_B]))
def test_matches_oracle_on_interleaved_layouts(layout, kind):
    mask = build_mask(layout, kind)
    np.testing.assert_array_equal(mask.allow, oracle(layout, kind))
    assert validate_mask(mask, layout, kind) is None


@settings(max_examples=60, deadline=None)
@given(prefix_layouts())
def test_prefix_mask_properties(layout):
    n_img = layout.count(IMG)
    n_txt = layout.count(TXT)
    prefix = build_mask(layout, MaskKind.IMAGE_BIDI_TEXT_CAUSAL).allow
    causal = build_mask(layout, MaskKind.CAUSAL_BASELINE).allow
    text = slice(n_img, n_img + n_txt)
    np.testing.assert_array_equal(prefix[text, text], causal[text, text])
    assert prefix[:n_img, :n_img].all()
    assert not prefix[:n_img, n_img:].any()
    assert reachability(MaskMatrix(prefix), 0) == set(range(n_img))
    for kind in (MaskKind.IMAGE_BIDI_TEXT_CAUSAL, MaskKind.CAUSAL_BASELINE):
        allow = build_mask(layout, kind).allow
        assert not np.triu(allow[:, text], 1 - n_img).any()


@settings(max_examples=60, deadline=None)
@given(interleaved_layouts())
def test_no_future_text_and_interleaved_properties(layout):
    kinds = layout.token_kinds()
    blocks = layout.token_blocks()
    for kind in (MaskKind.INTERLEAVED_A, MaskKind.INTERLEAVED_B):
        allow = build_mask(layout, kind).allow
        for i in range(len(kinds)):
            for j in range(i + 1, len(kinds)):
                if kinds[j] is TXT:
                    assert not allow[i, j]
    a = build_mask(layout, MaskKind.INTERLEAVED_A).allow
    assert a[:, [k is IMG for k in kinds]].all()
    b = build_mask(layout, MaskKind.INTERLEAVED_B).allow
    assert not b[blocks[None, :] > blocks[:, None]].any()
