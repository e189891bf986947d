import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mcmil.errors import SynchronizationError, UndefinedAUCError, ValidationError
from mcmil.evaluation import (
    ConfusionCounts,
    FrameScoreSeq,
    FusionConfig,
    auc,
    auc_bruteforce,
    auc_score,
    concat,
    confusion,
    expand_to_frames,
    fuse,
    metrics,
    roc_points,
    roc_svg,
    write_roc_csv,
)
from mcmil.objective import ScoreBag


def seq(scores, labels):
    # pad to a multiple of 16 by repeating each frame 16 times; AUC is unchanged by uniform replication
    return FrameScoreSeq(np.repeat(scores, 16), np.repeat(labels, 16))


@st.composite
def scored_frames(draw):
    n = draw(st.integers(2, 200))
    levels = draw(st.integers(2, 12))
    r = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
    scores = r.integers(0, levels, size=n) / (levels - 1)  # coarse grid, many ties
    labels = r.random(n) < draw(st.floats(0.05, 0.95))
    labels[0], labels[1] = True, False
    return scores, labels


def test_expand_to_frames():
    s = expand_to_frames(ScoreBag(np.array([0.1, 0.9]), "normal"), np.zeros(32))
    np.testing.assert_array_equal(s.scores[:16], 0.1)
    np.testing.assert_array_equal(s.scores[16:], 0.9)
    assert len(expand_to_frames(ScoreBag(np.array([0.4]), "normal"), np.zeros(16))) == 16
    with pytest.raises(SynchronizationError):
        expand_to_frames(ScoreBag(np.array([0.1, 0.9]), "normal"), np.zeros(31))


def test_frame_seq_invariants():
    with pytest.raises(SynchronizationError):
        FrameScoreSeq(np.zeros(16), np.zeros(15))
    with pytest.raises(SynchronizationError):
        FrameScoreSeq(np.zeros(15), np.zeros(15))


def test_fuse_examples():
    a, b = seq([0.3], [1]), seq([0.7], [1])
    assert fuse([a, b], FusionConfig("max")).scores[0] == 0.7
    assert fuse([a, b], FusionConfig("min")).scores[0] == 0.3
    lc = fuse([seq([0.2], [0]), seq([0.6], [0])], FusionConfig("linear", 0.5))
    assert lc.scores[0] == pytest.approx(0.4)
    assert fuse([a, b], FusionConfig("linear", 0.25)).scores[0] == pytest.approx(0.25 * 0.3 + 0.75 * 0.7)
    three = fuse([a, b, seq([0.5], [1])], FusionConfig("linear", 0.25))
    assert three.scores[0] == pytest.approx(0.5)
    assert fuse([a, b]).source == "fused:max"
    with pytest.raises(SynchronizationError):
        fuse([a, seq([0.7], [0])])
    with pytest.raises(SynchronizationError):
        fuse([a, seq([0.7, 0.1], [1, 1])])


def test_fusion_config_validation():
    assert FusionConfig("linear").beta == 0.5
    with pytest.raises(ValidationError):
        FusionConfig("linear", 1.5)
    with pytest.raises(ValidationError):
        FusionConfig("max", 0.5)
    with pytest.raises(ValidationError):
        FusionConfig("product")


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=20))
def test_fusion_properties(pairs):
    x = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    lab = np.zeros(len(pairs), dtype=int)
    a, b = seq(x, lab), seq(y, lab)
    mx = fuse([a, b], FusionConfig("max"))
    assert np.all(mx.scores >= a.scores) and np.all(mx.scores >= b.scores)
    for strat in ("max", "min"):
        np.testing.assert_array_equal(fuse([a, b], FusionConfig(strat)).scores, fuse([b, a], FusionConfig(strat)).scores)
        np.testing.assert_array_equal(fuse([a, a], FusionConfig(strat)).scores, a.scores)
    np.testing.assert_allclose(
        fuse([a, b], FusionConfig("linear")).scores, fuse([b, a], FusionConfig("linear")).scores, rtol=0, atol=0
    )
    np.testing.assert_allclose(fuse([a, a], FusionConfig("linear", 0.3)).scores, a.scores, rtol=1e-15)


def test_confusion_examples():
    assert confusion(seq([0.9, 0.1], [1, 0])) == ConfusionCounts(16, 0, 16, 0)
    c = confusion(seq([0.5, 0.5], [1, 0]))
    assert c.tp == 16 and c.fp == 16  # inclusive threshold
    c = confusion(seq([0.6, 0.6, 0.4, 0.4], [1, 0, 1, 0]))
    assert (c.tp, c.fp, c.fn, c.tn) == (16, 16, 16, 16)
    with pytest.raises(ValidationError):
        confusion(seq([0.5], [1]), threshold=1.5)


def test_metrics_examples():
    m = metrics(ConfusionCounts(1, 1, 1, 1))
    assert (m.prec, m.rec, m.fpr, m.bacc, m.f1) == (0.5, 0.5, 0.5, 0.5, 0.5)
    m = metrics(ConfusionCounts(0, 0, 5, 3))
    assert m.prec == 0.0 and "prec" in m.degenerate and m.f1 == 0.0
    assert all(np.isfinite(v) for v in m.as_dict().values() if v == v)


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_metric_relations(tp, fp, tn, fn):
    m = metrics(ConfusionCounts(tp, fp, tn, fn))
    for v in (m.fpr, m.bacc, m.prec, m.rec, m.f1):
        assert 0.0 <= v <= 1.0
    if m.prec + m.rec > 0:
        assert m.f1 == pytest.approx(2 * m.prec * m.rec / (m.prec + m.rec), rel=1e-12)
    if fp + tn > 0:
        assert m.fpr == pytest.approx(1.0 - tn / (tn + fp), abs=1e-12)
    if fp + tn > 0 and tp + fn > 0:
        assert m.bacc == pytest.approx((tp / (tp + fn) + tn / (tn + fp)) / 2)


def test_auc_examples():
    assert auc_score([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert auc_score([0.9, 0.1], [0, 1]) == 0.0
    assert auc_score([0.5, 0.5, 0.2], [1, 0, 0]) == 0.75
    with pytest.raises(UndefinedAUCError):
        auc_score([0.1, 0.2], [1, 1])


@given(scored_frames())
def test_auc_equals_bruteforce_and_trapezoid(data):
    scores, labels = data
    s = seq(scores, labels)
    a = auc(s)
    assert a == auc_bruteforce(s.scores, s.labels)
    assert abs(roc_points(s).area() - a) <= 1e-12


@given(scored_frames())
def test_auc_invariant_under_monotone_transform(data):
    scores, labels = data
    assert auc_score(scores, labels) == auc_score(scores**3, labels)


@given(scored_frames())
def test_roc_monotone_with_endpoints(data):
    curve = roc_points(seq(*data))
    pts = curve.points()
    assert pts[0] == (0.0, 0.0) and pts[-1] == (1.0, 1.0)
    assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)


def test_roc_examples():
    assert roc_points(seq([0.9, 0.1], [1, 0])).points() == [(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
    flat = roc_points(seq([0.4, 0.4, 0.4], [1, 0, 1]))
    assert flat.points() == [(0.0, 0.0), (1.0, 1.0)] and flat.area() == 0.5


def test_roc_outputs(tmp_path):
    curve = roc_points(seq([0.9, 0.3, 0.3], [1, 0, 1]))
    write_roc_csv(tmp_path / "r.csv", curve)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "threshold,fpr,tpr" and len(lines) == 1 + len(curve.fpr)
    svg = roc_svg({"C0": curve, "fused": curve})
    assert svg.startswith("<svg") and 'width="800"' in svg and svg.count("<polyline") == 2


def test_concat_pools_in_order():
    pooled = concat([seq([0.1], [0]), seq([0.9], [1])])
    assert len(pooled) == 32 and pooled.scores[0] == 0.1 and pooled.labels[-1] == 1
