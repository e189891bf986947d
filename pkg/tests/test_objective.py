from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from mcmil.errors import ContractViolation, SynchronizationError
from mcmil.objective import LossConfig, ScoreBag, bag_union, combine_losses, mc_loss, ranking_loss

ZERO = LossConfig(0.0, 0.0, 0.0)
ONES = LossConfig(1.0, 1.0, 0.0)

scores = st.lists(st.floats(0.0, 1.0), min_size=1, max_size=12)


def A(*s, sid="", cam=None):
    return ScoreBag(np.array(s, dtype=float), "anomalous", sid, cam)


def N(*s, sid="", cam=None):
    return ScoreBag(np.array(s, dtype=float), "normal", sid, cam)


def test_hand_case_terms_and_total():
    b, da, dn = ranking_loss(A(0.2, 0.9, 0.4), N(0.3, 0.1), ONES)
    # exact rational arithmetic on the same decimal inputs
    a = [Fraction(x) for x in ("0.2", "0.9", "0.4")]
    n = [Fraction(x) for x in ("0.3", "0.1")]
    hinge = max(Fraction(0), 1 - max(a) + max(n))
    smooth = sum((a[i] - a[i + 1]) ** 2 for i in range(2))
    sparse = sum(a)
    assert (hinge, smooth, sparse, hinge + smooth + sparse) == (
        Fraction("0.4"),
        Fraction("0.74"),
        Fraction("1.5"),
        Fraction("2.64"),
    )
    assert b.hinge == pytest.approx(0.4, abs=1e-15)
    assert b.smoothness == pytest.approx(0.74, abs=1e-15)
    assert b.sparsity == pytest.approx(1.5, abs=1e-15)
    assert b.total == pytest.approx(2.64, abs=1e-12)
    assert b.weight_decay == 0.0
    # d/da: sparsity 1, smoothness 2(a_i - a_{i+1}) terms, hinge -1 at index 1
    np.testing.assert_allclose(da, [1 + 2 * (0.2 - 0.9), 1 - 2 * (0.2 - 0.9) + 2 * (0.9 - 0.4) - 1, 1 - 2 * (0.9 - 0.4)])
    np.testing.assert_array_equal(dn, [1.0, 0.0])


def test_perfect_and_indistinguishable_cases():
    assert ranking_loss(A(1.0), N(0.0), ZERO)[0].total == 0.0
    assert ranking_loss(A(0.5), N(0.5), ZERO)[0].hinge == 1.0


def test_hinge_kink_has_zero_subgradient():
    b, da, dn = ranking_loss(A(1.0, 0.0), N(0.0), ZERO)
    assert b.hinge == 0.0 and not np.any(da) and not np.any(dn)


def test_weight_decay_term_and_labels():
    b, _, _ = ranking_loss(A(0.5), N(0.5), LossConfig(0.0, 0.0, 0.01), weight_norm_sq=3.0)
    assert b.weight_decay == pytest.approx(0.03)
    with pytest.raises(ContractViolation):
        ranking_loss(N(0.5), A(0.5))


def test_bag_validation():
    with pytest.raises(ValueError):
        ScoreBag(np.array([]), "normal")
    with pytest.raises(ValueError):
        ScoreBag(np.array([1.2]), "normal")
    with pytest.raises(ValueError):
        ScoreBag(np.array([0.2]), "weird")


def test_integer_lambdas_are_accepted():
    b, da, _ = ranking_loss(A(0.2, 0.9, 0.4), N(0.3, 0.1), LossConfig(1, 1, 0))
    assert da.dtype == np.float64 and b.total == pytest.approx(2.64, abs=1e-12)


def test_normalize_by_bag_size():
    cfg = LossConfig(1.0, 1.0, 0.0, normalize_by_bag_size=True)
    b, _, _ = ranking_loss(A(0.2, 0.9, 0.4), N(0.3), cfg)
    assert b.smoothness == pytest.approx(0.74 / 2)
    assert b.sparsity == pytest.approx(1.5 / 3)


@given(scores, scores, st.floats(0, 2), st.floats(0, 2))
def test_components_nonnegative_and_sum(a, n, l1, l2):
    b, _, _ = ranking_loss(A(*a), N(*n), LossConfig(l1, l2, 0.5), 1.7)
    assert min(b.hinge, b.smoothness, b.sparsity, b.weight_decay) >= 0.0
    assert 0.0 <= b.hinge <= 2.0
    assert abs(b.total - (b.hinge + b.smoothness + b.sparsity + b.weight_decay)) <= 1e-12


@given(scores, scores)
def test_zero_lambdas_leave_pure_hinge(a, n):
    b, _, _ = ranking_loss(A(*a), N(*n), ZERO)
    assert b.total == b.hinge == max(0.0, 1.0 - max(a) + max(n))


@given(scores, scores, st.randoms(use_true_random=False))
def test_permutation_invariance_of_normal_bag(a, n, rnd):
    perm = list(n)
    rnd.shuffle(perm)
    t1 = ranking_loss(A(*a), N(*n), ONES)[0].total
    t2 = ranking_loss(A(*a), N(*perm), ONES)[0].total
    assert t1 == pytest.approx(t2, abs=1e-12)


def test_anomalous_order_matters():
    t1 = ranking_loss(A(0.1, 0.9, 0.2), N(0.3), ONES)[0].total
    t2 = ranking_loss(A(0.1, 0.2, 0.9), N(0.3), ONES)[0].total
    assert t1 != pytest.approx(t2)


@given(st.lists(st.floats(0.01, 0.99), min_size=2, max_size=8), st.lists(st.floats(0.01, 0.99), min_size=1, max_size=8))
def test_score_gradient_matches_finite_differences(a, n):
    a, n = np.array(a), np.array(n)
    # stay away from argmax ties and the hinge kink
    assume(np.sort(a)[-1] - np.sort(a)[-2] > 1e-3)
    assume(len(n) == 1 or np.sort(n)[-1] - np.sort(n)[-2] > 1e-3)
    assume(abs(1.0 - a.max() + n.max()) > 1e-3)
    cfg = LossConfig(0.7, 0.3, 0.0)
    _, da, dn = ranking_loss(A(*a), N(*n), cfg)
    h = 1e-6

    def total(a_, n_):
        return ranking_loss(ScoreBag(a_, "anomalous"), ScoreBag(n_, "normal"), cfg)[0].total

    for vec, grad, is_a in ((a, da, True), (n, dn, False)):
        for i in range(len(vec)):
            up, down = vec.copy(), vec.copy()
            up[i] += h
            down[i] -= h
            args_up = (up, n) if is_a else (a, up)
            args_dn = (down, n) if is_a else (a, down)
            num = (total(*args_up) - total(*args_dn)) / (2 * h)
            assert abs(num - grad[i]) <= 1e-6 * max(1.0, abs(num))


def test_combine_examples():
    c = combine_losses([0.4, 0.7], "max")
    assert c.value == 0.7 and c.active == (1,)
    c = combine_losses([0.4, 0.7], "mean")
    assert c.value == pytest.approx(0.55) and c.active == (0, 1)
    np.testing.assert_array_equal(c.scales, [0.5, 0.5])
    assert combine_losses([0.4, 0.7], "min").active == (0,)
    assert combine_losses([0.5, 0.5, 0.5], "max").active == (0,)
    with pytest.raises(ContractViolation):
        combine_losses([], "max")
    with pytest.raises(ContractViolation):
        combine_losses([1.0, 2.0], "median")


@given(st.lists(st.floats(0, 10), min_size=2, max_size=6))
def test_combinator_ordering(values):
    lo, mid, hi = (combine_losses(values, m).value for m in ("min", "mean", "max"))
    assert lo <= mid <= hi


@given(st.floats(0, 10), st.integers(1, 6))
def test_combinators_idempotent_on_identical_losses(v, k):
    for mode in ("min", "mean", "max"):
        assert combine_losses([v] * k, mode).value == v


def test_bag_union_examples():
    np.testing.assert_allclose(bag_union([A(0.8, 0.2), A(0.4, 0.6)]).scores, [0.6, 0.4])
    np.testing.assert_allclose(bag_union([A(0.9, 0.0), A(0.0, 0.9), A(0.3, 0.3)]).scores, [0.4, 0.4])
    np.testing.assert_array_equal(bag_union([A(0.3, 0.7), A(0.3, 0.7)]).scores, [0.3, 0.7])
    with pytest.raises(SynchronizationError):
        bag_union([A(0.1, 0.2), A(0.1)])
    with pytest.raises(SynchronizationError):
        bag_union([A(0.1, sid="s1"), A(0.1, sid="s2")])
    with pytest.raises(ContractViolation):
        bag_union([A(0.1), N(0.1)])


def test_mc_loss_hand_compositions():
    cams = [(A(0.2, 0.9, 0.4), N(0.3, 0.1)), (A(1.0), N(0.0))]
    loss, grads = mc_loss(cams, ONES)
    assert loss == pytest.approx(2.64, abs=1e-12)
    assert not np.any(grads[1][0]) and np.any(grads[0][0])

    loss, grads = mc_loss([(A(1.0, 0.0), N(0.0)), (A(0.0, 1.0), N(0.0))], ZERO, strategy="bag_union")
    assert loss == pytest.approx(0.5)
    np.testing.assert_allclose(grads[0][0], [-0.5, 0.0])
    np.testing.assert_allclose(grads[1][1], [0.5])


@given(scores, scores)
def test_identical_cameras_degenerate_to_single_camera(a, n):
    single = ranking_loss(A(*a), N(*n), ONES)[0].total
    cams = [(A(*a), N(*n)), (A(*a), N(*n))]
    for mode in ("min", "mean", "max"):
        v, _ = mc_loss(cams, LossConfig(1.0, 1.0, 0.0, combinator=mode))
        assert v == pytest.approx(single, abs=1e-12)
    v, _ = mc_loss(cams, ONES, strategy="bag_union")
    assert v == pytest.approx(single, abs=1e-12)


def test_bag_union_gradient_is_chain_rule():
    cams = [(A(0.2, 0.8), N(0.4)), (A(0.6, 0.1), N(0.2))]
    cfg = LossConfig(0.5, 0.25, 0.0)
    loss, grads = mc_loss(cams, cfg, strategy="bag_union")
    h = 1e-6
    for c in range(2):
        for i in range(2):
            up = [(A(*a.scores), N(*n.scores)) for a, n in cams]
            dn = [(A(*a.scores), N(*n.scores)) for a, n in cams]
            up[c][0].scores[i] += h
            dn[c][0].scores[i] -= h
            num = (mc_loss(up, cfg, strategy="bag_union")[0] - mc_loss(dn, cfg, strategy="bag_union")[0]) / (2 * h)
            assert grads[c][0][i] == pytest.approx(num, abs=1e-8)
