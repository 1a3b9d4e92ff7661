"""Hypothesis property tests for the cross-module invariants."""

import math

import numpy as np
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from flexseg.gap import BoundaryFeatureSet, PrototypeBank, gap_loss, imbalance_weights, update_prototypes
from flexseg.has import HardnessTable, ScheduleState, threshold
from flexseg.morphology import extract_boundary, granularity_bands
from flexseg.ube import StrategySpec, entropy_map, softmax_probs, strategy_loss, ube_weights, weighted_ce
from oracles import disagreement_boundary

PROPS = settings(max_examples=60, deadline=None)


@st.composite
def label_masks(draw, max_side=14, max_classes=5):
    h = draw(st.integers(1, max_side))
    w = draw(st.integers(1, max_side))
    c = draw(st.integers(1, max_classes))
    return draw(hnp.arrays(np.int32, (h, w), elements=st.integers(0, c - 1)))


@st.composite
def logits_and_labels(draw, max_side=8):
    h = draw(st.integers(1, max_side))
    w = draw(st.integers(1, max_side))
    c = draw(st.integers(2, 5))
    logits = draw(hnp.arrays(np.float64, (h, w, c), elements=st.floats(-20, 20)))
    labels = draw(hnp.arrays(np.int64, (h, w), elements=st.integers(0, c - 1)))
    return logits, labels


# ---------------------------------------------------------------- morphology

@PROPS
@given(label_masks(), st.sampled_from([3, 5, 7]))
def test_boundary_equals_disagreement_oracle(mask, k):
    np.testing.assert_array_equal(extract_boundary(mask, k, k), disagreement_boundary(mask, k))


@PROPS
@given(label_masks())
def test_rings_disjoint_and_cover_thick_band(mask):
    bands = granularity_bands(mask, (3, 5, 7)).bands
    thick = extract_boundary(mask, 7, 7).astype(bool)
    np.testing.assert_array_equal(bands > 0, thick)
    for g, k in ((1, 3), (2, 5)):
        inside = extract_boundary(mask, k, k).astype(bool)
        # a ring-g pixel is in B_g and in no thinner band
        assert np.all(inside[bands == g])
        assert not np.any(inside[bands > g])


# ---------------------------------------------------------------- UBE

@PROPS
@given(logits_and_labels(), st.floats(0.01, 10.0))
def test_weight_bounds(pair, alpha):
    logits, labels = pair
    b = extract_boundary(labels.astype(np.int32), 3, 3).astype(bool)
    wm = ube_weights(entropy_map(softmax_probs(logits)), b, alpha)
    assert np.all(wm.values[~b] == 1.0)
    assert np.all(wm.values[b] > 1.0) and np.all(wm.values[b] < 1.0 + alpha)


@PROPS
@given(hnp.arrays(np.float64, st.integers(2, 30), elements=st.floats(0, 3)), st.floats(0.1, 5.0))
def test_higher_entropy_gets_larger_weight(ent, alpha):
    wm = ube_weights(ent, np.ones(ent.shape, dtype=bool), alpha)
    order = np.argsort(ent)
    e, w = ent[order], wm.values[order]
    higher = e[1:] > e[:-1]
    assert np.all(w[1:][higher] >= w[:-1][higher])
    # strict whenever the standardised gap is above float resolution
    z_gap = (e[1:] - e[:-1]) / (wm.sigma_H + 1e-6)
    resolvable = higher & (z_gap > 1e-8) & (w[1:] < 1 + alpha) & (w[:-1] > 1)
    assert np.all(w[1:][resolvable] > w[:-1][resolvable])


@PROPS
@given(logits_and_labels(), st.sampled_from(["enhance", "ignore", "threshold", "reduce", "ube"]))
def test_empty_boundary_is_plain_ce(pair, kind):
    logits, labels = pair
    plain, _ = weighted_ce(logits, labels, np.ones(labels.shape))
    assert strategy_loss(logits, labels, np.zeros(labels.shape, dtype=bool), StrategySpec(kind)) == plain


# ---------------------------------------------------------------- GAP

@st.composite
def feature_sets(draw, n_classes=3, dim=4, max_n=40):
    n = draw(st.integers(0, max_n))
    feats = draw(hnp.arrays(np.float64, (n, dim), elements=st.floats(-1e3, 1e3)))
    cls = draw(hnp.arrays(np.int64, n, elements=st.integers(0, n_classes - 1)))
    gran = draw(hnp.arrays(np.int64, n, elements=st.integers(1, 3)))
    return BoundaryFeatureSet(feats, np.stack([cls, gran], axis=1).reshape(n, 2), np.arange(n))


@PROPS
@given(st.lists(feature_sets(), min_size=1, max_size=5), st.floats(0.0, 0.999))
def test_bank_stays_unit_and_counts_grow(batches, momentum):
    bank = PrototypeBank.initialize(3, 4, momentum, seed=0)
    for fs in batches:
        before = bank.frequencies.copy()
        bank = update_prototypes(bank, fs)
        assert np.all(bank.frequencies >= before)
        assert np.max(np.abs(np.linalg.norm(bank.prototypes, axis=-1) - 1.0)) <= 1e-9


@PROPS
@given(feature_sets(), st.floats(0.01, 2.0))
def test_gap_loss_non_negative(fs, tau):
    assume(np.all(np.linalg.norm(fs.features, axis=1) > 0) if len(fs) else True)
    loss, grad = gap_loss(PrototypeBank.initialize(3, 4, seed=1), fs, tau)
    assert loss >= 0.0 and np.all(np.isfinite(grad))


@PROPS
@given(hnp.arrays(np.int64, st.tuples(st.integers(1, 6), st.just(3)), elements=st.integers(0, 10**6)))
def test_imbalance_weights_max_one_and_antitone(u):
    w = imbalance_weights(u)
    assert w.max() == 1.0
    flat_u, flat_w = u.ravel(), w.ravel()
    for i in range(flat_u.size):
        assert np.all(flat_w[flat_u > flat_u[i]] < flat_w[i])


# ---------------------------------------------------------------- HAS

@PROPS
@given(st.lists(st.tuples(st.integers(0, 3), st.floats(0.0, 50.0)), max_size=80), st.integers(1, 10))
def test_scores_non_negative_and_buffers_cleared(events, period):
    t = HardnessTable(4, beta=0.9, ema_period=period)
    for it, (i, loss) in enumerate(events):
        if t.record_loss(i, loss, it):
            assert t.pending_count.sum() == 0 and t.pending_sum.sum() == 0.0
        assert np.all(np.isfinite(t.scores)) and np.all(t.scores >= 0.0)


@PROPS
@given(st.sampled_from(["sigmoid", "linear", "none"]), st.floats(1e-4, 10.0),
       st.integers(0, 10**5), st.integers(1, 10**5), st.integers(0, 10**6))
def test_threshold_in_unit_interval(kind, k, midpoint, total, t):
    v = threshold(ScheduleState(kind, k, midpoint, total), t)
    assert 0.0 <= v <= 1.0 and not math.isnan(v)
