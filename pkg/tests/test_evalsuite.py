import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from mad.errors import ConfigError, FormatError, ProtocolError
from mad.evalsuite.consistency import ConsistencyReport, consistency_analysis
from mad.evalsuite.embeddings import (
    EmbeddingSet,
    checkpoint_id,
    decode_rows,
    embed_images,
    embed_tiles,
    encode_rows,
    read_embeddings,
    write_embeddings,
)
from mad.evalsuite.pca import PCA_COLUMNS, pca_export, principal_axes
from mad.evalsuite.probe import LinearProbe, train_probe
from mad.evalsuite.segmentation import gt_grid, segment, segmentation_report
from mad.nnet import ViTConfig, init_params
from mad.slidegen import MagTag
from mad.tiler import Split, Transition

TINY = ViTConfig(image_px=8, patch_px=4, embed_dim=8, depth=1, heads=2, n_registers=1,
                 head_hidden=8, head_bottleneck=4, n_prototypes=6)


@pytest.fixture(scope="module")
def params():
    return init_params(TINY, seed=0)


@pytest.fixture(scope="module")
def sets(params, small_manifest, small_slides):
    train = embed_tiles(params, TINY, small_manifest, small_slides, splits=[Split.TRAIN], ckpt_id="abc")
    test = embed_tiles(params, TINY, small_manifest, small_slides, splits=[Split.TEST], ckpt_id="abc")
    return train, test


# --- embeddings -------------------------------------------------------------


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 5), st.integers(1, 6), st.integers(0, 1000))
def test_made_roundtrip(n, d, seed):
    rows = np.random.default_rng(seed).normal(size=(n, d)).astype(np.float32)
    blob = encode_rows(rows)
    assert blob[:4] == b"MADE" and len(blob) == 16 + 4 * n * d
    assert np.array_equal(decode_rows(blob), rows)


def test_made_rejects_corruption():
    blob = encode_rows(np.ones((2, 3), np.float32))
    with pytest.raises(FormatError, match="magic"):
        decode_rows(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        decode_rows(blob[:-1])


def test_embed_tiles_rows_unique_and_ordered(sets, small_manifest):
    train, test = sets
    keys = train.keys
    assert len(keys) == len(set(keys))
    assert keys == [r.key for r in small_manifest.select(splits=[Split.TRAIN], unique=True)]
    assert {r.split for r in test.meta} == {Split.TEST}
    assert train.provenance == [("HIGH", "TRAIN"), ("LOW", "TRAIN"), ("MID", "TRAIN")]


def test_embedding_thread_invariance(params, rng):
    imgs = rng.random((150, 8, 8, 3)).astype(np.float32)
    a = embed_images(params, imgs, TINY, threads=1)
    b = embed_images(params, imgs, TINY, threads=4)
    assert a.tobytes() == b.tobytes()


def test_embedding_files_roundtrip(tmp_path, sets):
    train, _ = sets
    write_embeddings(train, tmp_path / "train.made", {"seed": 3})
    back = read_embeddings(tmp_path / "train.made")
    assert np.array_equal(back.rows, train.rows)
    assert back.meta == train.meta and back.checkpoint_id == "abc" and back.info == {"seed": 3}
    assert (tmp_path / "train.meta.jsonl").is_file() and (tmp_path / "train.info.json").is_file()
    (tmp_path / "train.meta.jsonl").write_text("")
    with pytest.raises(FormatError):
        read_embeddings(tmp_path / "train.made")
    with pytest.raises(FormatError):
        read_embeddings(tmp_path / "nope.made")


def test_checkpoint_id():
    assert checkpoint_id(b"") == "e3b0c44298fc1c14"


# --- consistency ------------------------------------------------------------


def test_consistency_arithmetic():
    r = ConsistencyReport.from_similarities(0.716, 0.577, 0.221)
    assert 0.138 <= r.delta_hier <= 0.139
    assert r.delta_sem == pytest.approx(0.356, abs=5e-4)


def _consistency_oracle(mid, high, manifest):
    """All non-child negatives, plain loops."""
    def cos(a, b):
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

    fam = manifest.pairs[Transition.MID_TO_HIGH]
    hi = {k: (row, lab) for k, row, lab in zip(high.keys, high.rows, high.labels)}
    sims = []
    for key, row, lab in zip(mid.keys, mid.rows, mid.labels):
        if key not in fam:
            continue
        kids = [k for k in fam[key] if k in hi]
        same = [r for k, (r, l) in hi.items() if k not in kids and l == lab]
        diff = [r for k, (r, l) in hi.items() if k not in kids and l != lab]
        if not kids or not same or not diff:
            continue
        sims.append((np.mean([cos(row, hi[k][0]) for k in kids]),
                     np.mean([cos(row, r) for r in same]), np.mean([cos(row, r) for r in diff])))
    return np.mean(sims, axis=0)


def test_consistency_matches_oracle(sets, small_manifest):
    _, test = sets
    mid, high = test.where(levels=[MagTag.MID]), test.where(levels=[MagTag.HIGH])
    rep = consistency_analysis(mid, high, small_manifest, n_neg=10**6)
    sp, ss, sd = _consistency_oracle(mid, high, small_manifest)
    assert rep.s_pos == pytest.approx(sp, abs=1e-6)
    assert rep.s_neg_same == pytest.approx(ss, abs=1e-6)
    assert rep.s_neg_diff == pytest.approx(sd, abs=1e-6)
    assert rep.delta_hier == pytest.approx(sp - ss, abs=1e-6)
    assert rep.n_parents > 0


def test_consistency_sampling_and_guards(sets, small_manifest):
    train, test = sets
    mid, high = test.where(levels=[MagTag.MID]), test.where(levels=[MagTag.HIGH])
    a = consistency_analysis(mid, high, small_manifest, n_neg=2, seed=1)
    b = consistency_analysis(mid, high, small_manifest, n_neg=2, seed=1)
    assert a.summary() == b.summary()
    assert set(a.summary()) == {"s_pos", "s_neg_same", "s_neg_diff", "delta_hier", "delta_sem"}
    with pytest.raises(ConfigError):
        consistency_analysis(train.where(levels=[MagTag.MID]), high, small_manifest)
    with pytest.raises(ConfigError):
        consistency_analysis(mid, high, small_manifest, n_neg=0)


# --- segmentation -----------------------------------------------------------


def test_segmentation_matches_manual(params, sets, small_manifest, small_slides):
    train, test = sets
    probe = train_probe(train.where(levels=[MagTag.MID]), lr=1e-2, epochs=5)
    slide = small_slides[2]
    rep = segmentation_report(params, TINY, probe, [slide])
    for level in (MagTag.MID, MagTag.HIGH):
        pred = segment(params, TINY, probe, slide, level).ravel().tolist()
        gt = gt_grid(slide, level, 8).ravel().tolist()
        iou, _ = oracles.iou_dice(pred, gt)
        assert rep.levels[level.name]["miou"] == pytest.approx(np.mean(list(iou.values())), abs=1e-12)
    expect = 100 * rep.levels["HIGH"]["miou"] / rep.levels["MID"]["miou"]
    assert rep.consistency_pct == pytest.approx(expect)
    assert gt_grid(slide, MagTag.HIGH, 8).shape == (16, 16)


def test_segmentation_refuses_non_zero_shot_probe(params, sets, small_slides):
    train, _ = sets
    probe = train_probe(train, lr=1e-2, epochs=1)
    with pytest.raises(ProtocolError):
        segment(params, TINY, probe, small_slides[2], MagTag.HIGH)


# --- PCA --------------------------------------------------------------------


def test_principal_axes_against_svd(rng):
    X = rng.normal(size=(50, 5)) @ np.diag([5.0, 3.0, 1.0, 0.5, 0.1])
    mean, vals, vecs = principal_axes(X)
    Xc = X - X.mean(0)
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    assert np.allclose(vals, s[:2] ** 2 / 49)
    for j in range(2):
        assert abs(abs(vecs[:, j] @ vt[j]) - 1) < 1e-9
        first = vecs[np.flatnonzero(np.abs(vecs[:, j]) > 1e-12)[0], j]
        assert first > 0


def test_pca_export(tmp_path, sets, small_manifest):
    _, test = sets
    mid, high = test.where(levels=[MagTag.MID]), test.where(levels=[MagTag.HIGH])
    rows = pca_export(mid, high, small_manifest, tmp_path / "pca.csv")
    with open(tmp_path / "pca.csv") as fh:
        got = list(csv.DictReader(fh))
    assert tuple(got[0]) == PCA_COLUMNS and len(got) == len(mid) + len(high)
    fam = small_manifest.pairs[Transition.MID_TO_HIGH]
    child_of = {k: p for p, ks in fam.items() for k in ks}
    for r, rec in zip(rows[len(mid):], high.meta):
        if rec.key in child_of and child_of[rec.key] in mid.keys:
            assert rows[r["parent_row_id"]]["level"] == "MID"
            assert mid.keys[r["parent_row_id"]] == child_of[rec.key]
        else:
            assert r["parent_row_id"] == ""
    assert all(r["parent_row_id"] == "" for r in rows[: len(mid)])
