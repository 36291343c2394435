import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import adjusted_mutual_info_score, davies_bouldin_score

import oracles
from mad.errors import ConfigError
from mad.evalsuite.metrics import (
    ami,
    consistency_pct,
    contingency,
    dbi,
    f1_table,
    macro_f1,
    mutual_info,
    seg_scores,
)

labelings = st.integers(2, 100).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(0, 5), min_size=n, max_size=n),
        st.lists(st.integers(0, 5), min_size=n, max_size=n),
    )
)


@settings(max_examples=50, deadline=None)
@given(labelings)
def test_ami_matches_bruteforce(uv):
    u, v = uv
    assert ami(u, v) == pytest.approx(oracles.ami(u, v), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(labelings)
def test_ami_matches_sklearn(uv):
    u, v = uv
    ref = adjusted_mutual_info_score(u, v, average_method="arithmetic")
    assert ami(u, v) == pytest.approx(ref, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=2, max_size=100))
def test_ami_identical_and_relabelled(u):
    assert ami(u, u) == pytest.approx(1.0, abs=1e-9)
    perm = {a: 10 - a for a in set(u)}
    assert ami(u, [perm[a] for a in u]) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(labelings)
def test_ami_symmetric(uv):
    u, v = uv
    assert ami(u, v) == pytest.approx(ami(v, u), abs=1e-12)


def test_ami_degenerate_cases():
    assert ami([0, 0, 0], [1, 1, 1]) == 1.0
    assert ami([0, 1, 2], [4, 5, 6]) == 1.0
    assert ami([0, 0, 0], [0, 1, 2]) == 0.0


def test_mutual_info_and_contingency():
    u, v = [0, 0, 1, 1], [5, 5, 7, 7]
    assert contingency(u, v).tolist() == [[2, 0], [0, 2]]
    assert mutual_info(u, v) == pytest.approx(math.log(2))


def _dbi_instances():
    rng = np.random.default_rng(42)
    for _ in range(50):
        n = int(rng.integers(6, 101))
        k = int(rng.integers(2, 6))
        labels = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
        X = rng.normal(size=(n, int(rng.integers(1, 5)))) + labels[:, None]
        yield X, labels


def test_dbi_matches_bruteforce_and_sklearn():
    for X, labels in _dbi_instances():
        ref = oracles.dbi(X.tolist(), labels.tolist())
        assert dbi(X, labels) == pytest.approx(ref, abs=1e-9)
        assert dbi(X, labels) == pytest.approx(davies_bouldin_score(X, labels), abs=1e-9)


def test_dbi_hand_case():
    # centroids 4 apart, both scatters 1: (1 + 1) / 4
    X = np.array([[-1.0, 0], [1.0, 0], [3.0, 0], [5.0, 0]])
    assert dbi(X, [0, 0, 1, 1]) == pytest.approx(0.5, abs=1e-12)


def test_dbi_errors():
    with pytest.raises(ConfigError):
        dbi(np.zeros((3, 2)), [0, 0, 0])
    with pytest.raises(ConfigError, match="degenerate"):
        dbi(np.array([[0.0], [1.0], [0.5], [0.5]]), [0, 0, 1, 1])


@settings(max_examples=50, deadline=None)
@given(labelings)
def test_f1_matches_bruteforce(pg):
    pred, gt = pg
    got = f1_table(pred, gt)
    ref = oracles.f1(pred, gt)
    assert set(got) == set(ref)
    for c in ref:
        assert got[c] == pytest.approx(ref[c], abs=1e-9)


def test_macro_f1_hand_case():
    mean, table = macro_f1([0, 0, 1, 1], [0, 1, 1, 1])
    assert table == pytest.approx({0: 2 / 3, 1: 0.8})
    assert mean == pytest.approx((2 / 3 + 0.8) / 2)


@settings(max_examples=50, deadline=None)
@given(labelings)
def test_iou_dice_match_bruteforce(pg):
    pred, gt = pg
    got = seg_scores(np.array(pred), np.array(gt))
    iou, dice = oracles.iou_dice(pred, gt)
    for c in iou:
        assert got["iou"][c] == pytest.approx(iou[c], abs=1e-9)
        assert got["dice"][c] == pytest.approx(dice[c], abs=1e-9)
        # Dice = 2 IoU / (1 + IoU) holds per class
        assert got["dice"][c] == pytest.approx(2 * iou[c] / (1 + iou[c]), abs=1e-12)
    assert got["miou"] == pytest.approx(np.mean(list(iou.values())), abs=1e-12)


def test_seg_perfect_and_shape_mismatch():
    g = np.array([[0, 1], [2, 2]])
    s = seg_scores(g, g)
    assert s["miou"] == 1.0 and s["mdice"] == 1.0 and s["acc"] == 1.0
    with pytest.raises(ConfigError):
        seg_scores(g, g[:1])


def test_consistency_pct():
    assert consistency_pct(0.8875, 0.8584) == pytest.approx(96.72, abs=0.01)
    assert consistency_pct(0.0, 0.5) == 0.0
