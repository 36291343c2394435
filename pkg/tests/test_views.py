import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mad.errors import ConfigError
from mad.slidegen import MagTag
from mad.tiler import Split, Transition, parent_of
from mad.views import (
    AugParams,
    TileStore,
    ViewMode,
    augment,
    choose_source,
    crop_rect,
    resize_bilinear,
    sample_baseline_batch,
    sample_mad_batch,
    sample_standalone_batch,
)


@pytest.fixture(scope="module")
def store(small_manifest, small_slides):
    return TileStore(small_manifest, small_slides)


def _bilinear_oracle(img, out):
    s = img.shape[0]
    res = np.zeros((out, out, img.shape[2]))
    for i in range(out):
        for j in range(out):
            y = min(max((i + 0.5) * s / out - 0.5, 0), s - 1)
            x = min(max((j + 0.5) * s / out - 0.5, 0), s - 1)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, s - 1), min(x0 + 1, s - 1)
            wy, wx = y - y0, x - x0
            res[i, j] = ((1 - wy) * (1 - wx) * img[y0, x0] + (1 - wy) * wx * img[y0, x1]
                         + wy * (1 - wx) * img[y1, x0] + wy * wx * img[y1, x1])
    return res


def test_identity_augment_is_near_exact(rng):
    tile = rng.random((8, 8, 3)).astype(np.float32)
    # mean subtract-and-add costs at most a few float32 ulps
    assert np.allclose(augment(tile, AugParams.identity(), rng), tile, atol=1e-6, rtol=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(0, 1))
def test_augment_range_and_fixed_draws(seed, flip, sol):
    tile = np.random.default_rng(seed).random((8, 8, 3)).astype(np.float32)
    a, b = np.random.default_rng(seed), np.random.default_rng(seed)
    out = augment(tile, AugParams(flip_prob=flip, solarize_prob=sol), a)
    augment(tile, AugParams.identity(), b)
    assert out.dtype == np.float32 and out.min() >= 0 and out.max() <= 1
    # the stream advances by the same amount whatever fires
    assert a.random() == b.random()


def test_solarize_inverts_bright_pixels(rng):
    tile = np.full((4, 4, 3), 0.8, dtype=np.float32)
    p = AugParams.identity()
    p.solarize_prob = 1.0
    assert np.allclose(augment(tile, p, rng), 0.2)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 9), st.integers(2, 12), st.integers(0, 1000))
def test_resize_matches_oracle(s, out, seed):
    img = np.random.default_rng(seed).random((s, s, 3)).astype(np.float32)
    assert np.allclose(resize_bilinear(img, out), _bilinear_oracle(img, out), atol=1e-5)


def test_resize_same_size_is_identity(rng):
    img = rng.random((6, 6, 3)).astype(np.float32)
    assert np.allclose(resize_bilinear(img, 6), img)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 64), st.integers(0, 10**6))
def test_crop_in_bounds(px, seed):
    y, x, side = crop_rect(px, (0.15, 1.0), np.random.default_rng(seed))
    assert 1 <= side <= px and 0 <= y <= px - side and 0 <= x <= px - side


def test_mad_batch_alignment_and_determinism(store):
    for t in (Transition.LOW_TO_MID, Transition.MID_TO_HIGH):
        b = sample_mad_batch(store, t, np.random.default_rng(7))
        b.check()
        assert b.mode == ViewMode.MAD_PAIR
        assert b.teacher_views.shape == (2, 8, 8, 3) and b.student_views.shape == (4, 8, 8, 3)
        assert all(parent_of(s) == b.context_index for s in b.student_indices)
        assert b.context_index.level == t.parent_level
        again = sample_mad_batch(store, t, np.random.default_rng(7))
        assert np.array_equal(again.student_views, b.student_views) and again.seed_trace == b.seed_trace


def test_samplers_never_emit_test_tiles(store, small_manifest):
    rng = np.random.default_rng(0)
    for _ in range(60):
        for b in (
            sample_mad_batch(store, Transition.MID_TO_HIGH, rng),
            sample_standalone_batch(store, rng),
            sample_baseline_batch(store, rng),
        ):
            assert small_manifest.slide_splits[b.slide_id] == Split.TRAIN
    test_key = next(r.key for r in small_manifest.records if r.split == Split.TEST)
    with pytest.raises(ConfigError):
        store.pixels(test_key)


def test_mad_none_transition_rejected(store):
    with pytest.raises(ConfigError):
        sample_mad_batch(store, Transition.NONE, np.random.default_rng(0))


def test_choose_source_frequencies():
    rng = np.random.default_rng(0)
    n = 20000
    draws = [choose_source(rng, 0.2) for _ in range(n)]
    freq = {t: draws.count(t) / n for t in Transition}
    # expected 0.2 standalone and 0.4 for each transition; 4 sigma is about 0.014
    assert freq[Transition.NONE] == pytest.approx(0.2, abs=0.015)
    assert freq[Transition.MID_TO_HIGH] == pytest.approx(0.4, abs=0.015)
    assert freq[Transition.LOW_TO_MID] == pytest.approx(0.4, abs=0.015)


def test_choose_source_staged():
    rng = np.random.default_rng(0)
    early = {choose_source(rng, 0.0, s, 100, "staged") for s in range(50)}
    late = {choose_source(rng, 0.0, s, 100, "staged") for s in range(50, 100)}
    assert early == {Transition.LOW_TO_MID} and late == {Transition.MID_TO_HIGH}
    with pytest.raises(ConfigError):
        choose_source(rng, 0.0, 0, 1, "random")


@pytest.mark.parametrize("kw", [dict(flip_prob=1.5), dict(brightness_range=(0.0, 1.0)), dict(contrast_range=(1.5, 1.2))])
def test_aug_validation(kw):
    with pytest.raises(ConfigError):
        AugParams(**kw).validate()
