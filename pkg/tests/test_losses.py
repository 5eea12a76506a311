import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from loss_cases import CFG, all_loss_fns, exhaustive_cases, oracle_exclusion_field, oracle_values, random_instance, scheme
from gradcheck import central_fd, max_rel_error
from fedpartial import losses as L
from fedpartial.labelspace import LabelSpace, full_scheme, make_scheme



def logits_for(probs):
    return np.log(np.asarray(probs, dtype=np.float64))


# ---------------------------------------------------------------- softmax / marginalize

def test_softmax_examples():
    assert np.allclose(L.softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, atol=1e-15)
    assert np.allclose(L.softmax([math.log(2), 0.0]), [2 / 3, 1 / 3], atol=1e-15)
    p = L.softmax([1000.0, 0.0])
    assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1.0) and p[1] < 1e-300 + 1e-12


def test_marginalize_examples(rng):
    s = make_scheme(LabelSpace.default(4), {3})
    # reorder to match the example partition [{0},{1,2},{3}]
    from fedpartial.labelspace import PartialScheme
    s = PartialScheme(s.space, (frozenset({0}), frozenset({1, 2}), frozenset({3})), frozenset({3}))
    assert np.allclose(L.marginalize([0.1, 0.2, 0.3, 0.4], s), [0.1, 0.5, 0.4], atol=1e-15)
    p = L.softmax(rng.normal(size=(4, 4, 4)))
    assert np.array_equal(L.marginalize(p, full_scheme(LabelSpace.default(4))), p)
    with pytest.raises(ValueError):
        L.marginalize(np.ones((2, 3)) / 3, s)


@given(arrays(np.float64, (3, 3, 5), elements=st.floats(-20, 20)), st.sets(st.integers(1, 4)))
def test_marginalize_normalized(f, labeled):
    q = L.marginalize(L.softmax(f), scheme(5, labeled))
    assert np.all(np.abs(q.sum(-1) - 1.0) <= 1e-9)
    assert np.all(q >= 0)


# ---------------------------------------------------------------- marginal examples

def test_marginal_dice_single_pixel():
    s = scheme(2)
    r = L.marginal_dice(logits_for([[0.5, 0.5]]), [1], s, CFG)
    sm = CFG.dice_smooth
    assert r.value == pytest.approx((1 - 2 * 0.5 / (1 + 0.5 + sm)) + (1 - 0), abs=1e-12)


def test_marginal_dice_perfect_prediction():
    t = np.array([[0, 1], [1, 0]])
    f = np.where(np.eye(2)[t] > 0, 40.0, -40.0)
    r = L.marginal_dice(f, t, scheme(2), CFG)
    assert r.value < 1e-5


def test_marginal_ce_examples():
    s = scheme(3, {2})
    # q_target = 0.5 for merged background {0,1}
    r = L.marginal_ce(logits_for([[0.25, 0.25, 0.5]]), [0], s, CFG)
    assert r.value == pytest.approx(math.log(2), abs=1e-12)
    r = L.marginal_ce(np.array([[0.0, 0.0, -800.0]]), [0], s, CFG)
    assert r.value == pytest.approx(0.0, abs=1e-12)


def test_marginal_focal_examples(rng):
    s = scheme(3, {2})
    r = L.marginal_focal(logits_for([[0.25, 0.25, 0.5]]), [0], s, CFG)
    assert r.value == pytest.approx(0.25 * math.log(2), abs=1e-12)
    assert r.value == pytest.approx(0.173287, abs=1e-6)
    f = rng.normal(size=(4, 4, 3))
    t = rng.integers(0, 2, size=(4, 4))
    g0 = L.LossConfig(gamma=0)
    a, b = L.marginal_focal(f, t, s, g0), L.marginal_ce(f, t, s, g0)
    assert a.value == b.value and np.array_equal(a.grad, b.grad)
    r = L.marginal_focal(np.array([[0.0, 0.0, -800.0]]), [0], s, CFG)
    assert r.value == pytest.approx(0.0, abs=1e-12)


def test_marginal_topk_examples(rng):
    s = scheme(3, {1, 2})
    f = rng.normal(size=(4, 4, 3))
    t = rng.integers(0, 3, size=(4, 4))
    full = L.marginal_topk(f, t, s, L.LossConfig(topk_fraction=1.0))
    ce = L.marginal_ce(f, t, s, CFG)
    assert full.value == pytest.approx(ce.value, abs=1e-14)
    assert np.allclose(full.grad, ce.grad, atol=1e-16)
    # uniform per-pixel CE: every pixel has the same logits and label
    fu = np.tile(rng.normal(size=3), (4, 4, 1))
    tu = np.ones((4, 4), dtype=int)
    assert L.marginal_topk(fu, tu, s, CFG).value == pytest.approx(L.marginal_ce(fu, tu, s, CFG).value, abs=1e-14)


def test_marginal_topk_hand_case():
    # 10 pixels whose CE is exactly 0..9: q_target = exp(-c)
    s = scheme(2)
    ce = np.arange(10.0)
    q = np.exp(-ce)
    f = np.log(np.stack([1 - q + 1e-300, q], axis=1))
    f[0] = [-800.0, 0.0]
    r = L.marginal_topk(f, np.ones(10, dtype=int), s, L.LossConfig(topk_fraction=0.2))
    assert r.value == pytest.approx(8.5, abs=1e-9)
    # only the two selected pixels carry gradient
    assert np.count_nonzero(np.abs(r.grad).sum(1)) == 2
    assert np.abs(r.grad[:8]).sum() == 0


def test_topk_ties_take_lowest_index():
    s = scheme(2)
    f = np.zeros((4, 2))
    r = L.marginal_topk(f, np.zeros(4, dtype=int), s, L.LossConfig(topk_fraction=0.5))
    assert np.abs(r.grad[:2]).sum() > 0 and np.abs(r.grad[2:]).sum() == 0


def test_marginal_lovasz_examples():
    s = scheme(2)
    t = np.array([[0, 1], [1, 1]])
    f = np.where(np.eye(2)[t] > 0, 50.0, -50.0)
    assert L.marginal_lovasz(f, t, s, CFG).value == pytest.approx(0.0, abs=1e-12)
    for tval in (0.1, 0.4, 0.85):
        r = L.marginal_lovasz(logits_for([[1 - tval, tval]]), [1], s, CFG)
        assert r.value == pytest.approx(1 - tval, abs=1e-12)


# ---------------------------------------------------------------- exclusion examples

def test_exclusion_dice_examples():
    f = logits_for([[0.2, 0.5, 0.3]])
    assert L.exclusion_dice(f, np.zeros((1, 3)), CFG).value == 0.0
    r = L.exclusion_dice(f, np.array([[0.0, 0.0, 1.0]]), CFG)
    assert r.value == pytest.approx(2 * 0.3 / (1 + 0.3 + CFG.dice_smooth), abs=1e-12)
    onehot = np.array([[60.0, -60.0, -60.0]])
    assert L.exclusion_dice(onehot, np.array([[0.0, 1.0, 1.0]]), CFG).value < 1e-20


def test_exclusion_ce_examples():
    e = np.array([[0.0, 1.0, 1.0]])
    assert L.exclusion_ce(np.array([[0.0, -800.0, -800.0]]), e, CFG).value == pytest.approx(0.0, abs=1e-15)
    assert L.exclusion_ce(np.array([[-800.0, 0.0, -800.0]]), e, CFG).value == pytest.approx(math.log(2), abs=1e-12)
    r = L.exclusion_ce(logits_for([[0.6, 0.3, 0.1]]), e, CFG)
    assert r.value == pytest.approx(math.log(1.3) + math.log(1.1), abs=1e-12)
    assert r.value == pytest.approx(0.357674, abs=1e-6)


def test_exclusion_focal_examples(rng):
    e = np.array([[0.0, 1.0]])
    r = L.exclusion_focal(logits_for([[0.5, 0.5]]), e, CFG)
    assert r.value == pytest.approx(0.25 * math.log(1.5), abs=1e-12)
    assert r.value == pytest.approx(0.101366, abs=1e-6)
    assert L.exclusion_focal(np.array([[0.0, -800.0]]), e, CFG).value == pytest.approx(0.0, abs=1e-15)
    f = rng.normal(size=(4, 4, 3))
    ef = rng.integers(0, 2, size=(4, 4, 3)).astype(float)
    g0 = L.LossConfig(gamma=0)
    a, b = L.exclusion_focal(f, ef, g0), L.exclusion_ce(f, ef, g0)
    assert a.value == pytest.approx(b.value, abs=1e-15) and np.allclose(a.grad, b.grad, atol=1e-17)


def test_exclusion_topk_examples(rng):
    f = rng.normal(size=(4, 4, 3))
    ef = rng.integers(0, 2, size=(4, 4, 3)).astype(float)
    a = L.exclusion_topk(f, ef, L.LossConfig(topk_fraction=1.0))
    b = L.exclusion_ce(f, ef, CFG)
    assert a.value == pytest.approx(b.value, abs=1e-14)
    assert L.exclusion_topk(f, np.zeros_like(ef), CFG).value == 0.0
    # pixels whose exclusion CE is exactly 0, 0.2, 0.5
    vals = np.array([0.0, 0.2, 0.5])
    p = np.exp(vals) - 1.0
    probs = np.stack([1 - p, p], axis=1)
    with np.errstate(divide="ignore"):
        fl = np.log(probs)
    fl[0] = [0.0, -800.0]
    r = L.exclusion_topk(fl, np.tile([0.0, 1.0], (3, 1)), L.LossConfig(topk_fraction=1 / 3))
    assert r.value == pytest.approx(0.5, abs=1e-12)


def test_exclusion_lovasz_examples():
    f = np.array([[0.0, 0.0, -800.0]])
    assert L.exclusion_lovasz(f, np.array([[0.0, 0.0, 1.0]]), CFG).value == pytest.approx(0.0, abs=1e-12)
    for t in (0.05, 0.3, 0.9):
        r = L.exclusion_lovasz(logits_for([[1 - t, t]]), np.array([[0.0, 1.0]]), CFG)
        assert r.value == pytest.approx(t, abs=1e-12)


def test_exclusion_shape_mismatch():
    with pytest.raises(ValueError):
        L.exclusion_ce(np.zeros((2, 3)), np.zeros((2, 2)), CFG)


# ---------------------------------------------------------------- combined

def test_combined_single_term_equals_term(rng):
    s = scheme(5, {1, 3})
    f = rng.normal(size=(4, 4, 5))
    t = rng.integers(0, 3, size=(4, 4))
    for term in L.ALL_TERMS:
        cfg = L.LossConfig(active_terms=(term,))
        c = L.combined_loss(f, t, s, None, cfg)
        variant, base = term.split("_")
        if variant == "marginal":
            r = L.MARGINAL_LOSSES[base](f, t, s, cfg)
        else:
            r = L.EXCLUSION_LOSSES[base](f, L.exclusion_field_for(t, s, s.exclusion_sets()), cfg)
        assert c.value == pytest.approx(r.value, abs=1e-14)
        assert np.allclose(c.grad, r.grad, atol=1e-16)


def test_combined_zero_weights(rng):
    s = scheme(3)
    cfg = L.LossConfig(term_weights={t: 0.0 for t in L.DEFAULT_TERMS})
    r = L.combined_loss(rng.normal(size=(4, 4, 3)), rng.integers(0, 3, (4, 4)), s, None, cfg)
    assert r.value == 0.0 and not r.grad.any()


def test_combined_default_is_sum_of_six_terms(rng):
    s = scheme(5, {2, 4})
    f = rng.normal(size=(4, 4, 5))
    t = rng.integers(0, 3, size=(4, 4))
    merged_to_full = {0: 0, 1: 2, 2: 4}
    full = np.vectorize(merged_to_full.get)(t)
    labeled = {2, 4}
    ef = np.zeros((4, 4, 5))
    for idx in np.ndindex(4, 4):
        lab = full[idx]
        for n in range(1, 5):
            ef[idx + (n,)] = 1.0 if lab in labeled - {n} else 0.0
    phis = s.merged_classes
    expected = (
        oracles.marginal_dice(f, t, phis) + oracles.marginal_ce(f, t, phis) + oracles.marginal_lovasz(f, t, phis)
        + oracles.exclusion_dice(f, ef) + oracles.exclusion_ce(f, ef) + oracles.exclusion_lovasz(f, ef)
    )
    assert L.combined_loss(f, t, s, None, CFG).value == pytest.approx(expected, abs=1e-9)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        L.LossConfig(gamma=-1)
    with pytest.raises(ValueError):
        L.LossConfig(topk_fraction=0)
    with pytest.raises(ValueError):
        L.LossConfig(epsilon=0)
    with pytest.raises(ValueError):
        L.LossConfig(dice_smooth=0)
    with pytest.raises(ValueError):
        L.LossConfig(active_terms=())
    with pytest.raises(ValueError):
        L.LossConfig(active_terms=("hinge",))
    assert L.LossConfig(active_terms=("dice", "ce")).active_terms == (
        "marginal_dice", "marginal_ce", "exclusion_dice", "exclusion_ce")


def test_loss_config_dict_fields():
    d = L.LossConfig().to_dict()
    assert set(d) == {"gamma", "topk_fraction", "epsilon", "dice_smooth", "active_terms", "term_weights"}
    assert L.LossConfig(**d) == L.LossConfig()


# ---------------------------------------------------------------- properties


@pytest.mark.parametrize("n,labeled", [(2, None), (3, {2}), (5, {1, 3})])
def test_gradients_match_finite_differences(n, labeled):
    rng = np.random.default_rng(n)
    for _ in range(3):
        s, f, t, ef = random_instance(rng, n, labeled)
        for name, fn in all_loss_fns(s, t, ef).items():
            err = max_rel_error(fn(f).grad, central_fd(lambda x: fn(x).value, f))
            assert err < 1e-4, name


@pytest.mark.parametrize("base", L.BASE_LOSSES)
def test_marginal_reduces_to_standard(base, rng):
    for n in (2, 3, 5):
        s = scheme(n)
        f = rng.normal(scale=2.0, size=(4, 4, n))
        t = rng.integers(0, n, size=(4, 4))
        m = L.MARGINAL_LOSSES[base](f, t, s, CFG)
        std = L.STANDARD_LOSSES[base](f, t, CFG)
        assert abs(m.value - std.value) <= 1e-12
        assert np.max(np.abs(m.grad - std.grad)) <= 1e-12


@given(arrays(np.float64, (3, 3, 3), elements=st.floats(-8, 8)),
       arrays(np.int64, (3, 3), elements=st.integers(0, 2)))
@settings(max_examples=40, deadline=None)
def test_exclusion_nonnegative(f, labels):
    s = scheme(3)
    ef = L.exclusion_field_for(labels, s, s.exclusion_sets())
    for fn in (L.exclusion_ce, L.exclusion_focal, L.exclusion_topk, L.exclusion_dice, L.exclusion_lovasz):
        assert fn(f, ef, CFG).value >= 0.0


def test_exclusion_zero_when_supports_disjoint():
    labels = np.array([[1, 2], [0, 1]])
    s = scheme(3)
    ef = L.exclusion_field_for(labels, s, s.exclusion_sets())
    f = np.where(np.eye(3)[labels] > 0, 0.0, -800.0)
    for fn in (L.exclusion_ce, L.exclusion_focal, L.exclusion_topk, L.exclusion_lovasz):
        assert fn(f, ef, CFG).value == pytest.approx(0.0, abs=1e-12)
    assert L.exclusion_dice(f, ef, CFG).value < 1e-12


def test_permutation_equivariance(rng):
    s, f, t, ef = random_instance(rng, 5, {1, 2, 4}, size=6)
    perm = rng.permutation(36)
    fp = f.reshape(36, 5)[perm].reshape(6, 6, 5)
    tp = t.reshape(36)[perm].reshape(6, 6)
    efp = ef.reshape(36, 5)[perm].reshape(6, 6, 5)
    fns = all_loss_fns(s, t, ef)
    fns_p = all_loss_fns(s, tp, efp)
    for name in fns:
        a, b = fns[name](f), fns_p[name](fp)
        assert a.value == pytest.approx(b.value, abs=1e-12), name
        assert np.allclose(a.grad.reshape(36, 5)[perm], b.grad.reshape(36, 5), atol=1e-14), name


# ---------------------------------------------------------------- oracle equivalence


@pytest.mark.parametrize("cfg", [CFG, L.LossConfig(topk_fraction=0.5, gamma=1.5, epsilon=0.5)])
def test_forward_matches_oracles_exhaustive(cfg):
    for s, f, t in exhaustive_cases():
        ef = oracle_exclusion_field(s, t)
        assert np.array_equal(ef, L.exclusion_field_for(t, s, s.exclusion_sets()))
        expected = oracle_values(s, f, t, ef, cfg)
        for name, fn in all_loss_fns(s, t, ef, cfg).items():
            if name == "combined":
                continue
            assert abs(fn(f).value - expected[name]) <= 1e-9, (name, s.to_json(), t.tolist())


def test_random_4x4_matches_oracles(rng):
    for _ in range(5):
        s, f, t, ef = random_instance(rng, 5, {1, 4})
        expected = oracle_values(s, f, t, ef, CFG)
        for name, fn in all_loss_fns(s, t, ef).items():
            if name != "combined":
                assert abs(fn(f).value - expected[name]) <= 1e-9, name


def test_lovasz_extension_matches_threshold_definition(rng):
    for _ in range(50):
        n = rng.integers(1, 10)
        errors = rng.uniform(size=n)
        fg = (rng.uniform(size=n) < 0.5).astype(float)
        v, _ = L.lovasz_extension(errors, fg)
        assert v == pytest.approx(oracles.lovasz_by_thresholds(list(errors), set(np.flatnonzero(fg))), abs=1e-12)


def test_non_finite_logits_rejected():
    with pytest.raises(ValueError):
        L.marginal_ce(np.array([[np.nan, 0.0]]), [0], scheme(2), CFG)
    with pytest.raises(ValueError):
        L.marginal_ce(np.zeros((1, 2)), [3], scheme(2), CFG)
