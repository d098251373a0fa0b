import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tica.metrics import BerReport, ConfusionCounts, accumulate, ber, ber_from_predictions


def brute_force_ber(pred, gt, threshold=0.5):
    tp = fp = tn = fn = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        if p >= threshold and g == 1:
            tp += 1
        elif p >= threshold:
            fp += 1
        elif g == 1:
            fn += 1
        else:
            tn += 1
    pos = tp / (tp + fn) if tp + fn else 1.0
    neg = tn / (tn + fp) if tn + fp else 1.0
    return (tp, fp, tn, fn), 1 - 0.5 * (pos + neg)


class TestAccumulate:
    def test_hand_tally(self):
        c = accumulate(np.array([[0.9, 0.2], [0.6, 0.4]]), np.array([[1, 0], [0, 0]]))
        assert c == ConfusionCounts(tp=1, fp=1, tn=2, fn=0)

    def test_exact_prediction(self):
        gt = (np.random.default_rng(0).random((6, 6)) > 0.5).astype(np.uint8)
        c = accumulate(gt.astype(float), gt)
        assert c.fp == 0 and c.fn == 0

    def test_inverted_prediction(self):
        gt = (np.random.default_rng(1).random((6, 6)) > 0.5).astype(np.uint8)
        c = accumulate(1.0 - gt, gt)
        assert c.tp == 0 and c.tn == 0

    def test_accumulates(self):
        a = accumulate(np.ones((2, 2)), np.ones((2, 2)))
        b = accumulate(np.zeros((2, 2)), np.ones((2, 2)), acc=a)
        assert b == ConfusionCounts(tp=4, fn=4)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            accumulate(np.zeros((2, 2)), np.zeros((2, 3)))


class TestBer:
    def test_spot_values(self):
        assert ber(ConfusionCounts(tp=5, fp=0, tn=7, fn=0)).ber == 0.0
        assert ber(ConfusionCounts(tp=0, fp=7, tn=0, fn=5)).ber == 1.0
        assert ber(ConfusionCounts(tp=40, fn=10, tn=30, fp=20)).ber == pytest.approx(0.30, abs=1e-12)

    def test_components(self):
        r = ber(ConfusionCounts(tp=40, fn=10, tn=30, fp=20))
        assert r.ber_shadow == pytest.approx(0.2) and r.ber_nonshadow == pytest.approx(0.4)
        assert r.ber == pytest.approx(0.5 * (r.ber_shadow + r.ber_nonshadow))

    def test_degenerate_class(self):
        r = ber(ConfusionCounts(tp=0, fp=2, tn=8, fn=0))
        assert r.degenerate == ["no_shadow_pixels"]
        assert r.ber == pytest.approx(0.5 * 0.2)

    def test_empty_counts(self):
        with pytest.raises(ValueError):
            ber(ConfusionCounts())

    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            ConfusionCounts(tp=-1)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            shape = tuple(rng.integers(1, 9, size=2))
            pred = rng.random(shape)
            gt = (rng.random(shape) > rng.random()).astype(np.uint8)
            counts, expected = brute_force_ber(pred, gt)
            c = accumulate(pred, gt)
            assert (c.tp, c.fp, c.tn, c.fn) == counts
            assert ber(c).ber == expected

    def test_report_roundtrip(self):
        r = ber(ConfusionCounts(3, 4, 5, 6))
        r.per_image = [0.1, 0.2]
        r.meta = {"method": "tica"}
        assert BerReport.from_dict(r.to_dict()) == r

    def test_pooling_is_additive(self):
        rng = np.random.default_rng(3)
        preds = [rng.random((5, 5)) for _ in range(4)]
        gts = [(rng.random((5, 5)) > 0.5).astype(np.uint8) for _ in range(4)]
        whole = ber_from_predictions(preds, gts)
        a = ber_from_predictions(preds[:2], gts[:2])
        b = ber_from_predictions(preds[2:], gts[2:])
        assert whole.counts == a.counts + b.counts
        assert whole.per_image == a.per_image + b.per_image


counts = st.builds(
    ConfusionCounts,
    st.integers(0, 1000),
    st.integers(0, 1000),
    st.integers(0, 1000),
    st.integers(0, 1000),
).filter(lambda c: c.total > 0)


@settings(max_examples=300, deadline=None)
@given(c=counts, k=st.integers(1, 50))
def test_ber_properties(c, k):
    r = ber(c)
    assert 0.0 <= r.ber <= 1.0
    scaled = ConfusionCounts(c.tp * k, c.fp * k, c.tn * k, c.fn * k)
    assert ber(scaled).ber == pytest.approx(r.ber, abs=1e-12)
    swapped = ConfusionCounts(tp=c.tn, fp=c.fn, tn=c.tp, fn=c.fp)
    assert ber(swapped).ber == pytest.approx(r.ber, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_accumulate_order_independent(seed):
    rng = np.random.default_rng(seed)
    pairs = [(rng.random((4, 4)), (rng.random((4, 4)) > 0.5).astype(np.uint8)) for _ in range(5)]
    fwd = ConfusionCounts()
    for p, g in pairs:
        fwd = accumulate(p, g, acc=fwd)
    rev = ConfusionCounts()
    for p, g in reversed(pairs):
        rev = accumulate(p, g, acc=rev)
    assert fwd == rev
