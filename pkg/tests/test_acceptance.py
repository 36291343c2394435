"""Acceptance criteria 1-8. Each test prints one PASS/FAIL line."""

import hashlib
import json
import statistics
import time

import numpy as np
import pytest
from sklearn.metrics import davies_bouldin_score

import oracles
from mad import cli, config
from mad.distill import mad_loss
from mad.errors import ProtocolError
from mad.evalsuite.consistency import ConsistencyReport
from mad.evalsuite.metrics import ami, consistency_pct, dbi, f1_table, seg_scores
from mad.evalsuite.neighbors import knn_classify
from mad.evalsuite.probe import LinearProbe, require_zero_shot
from mad.nnet import ViTConfig, grad_check
from mad.slidegen import MagTag, SynthConfig, box_downsample, synth_slide
from mad.tiler import children_of, extract_raw, parent_of, stitch_children, tile_grid


def test_criterion_1_gradient_gate(verdict):
    t0 = time.perf_counter()
    err64 = grad_check(ViTConfig(), seed=0, n_probe_params=200, dtype=np.float64)
    took = time.perf_counter() - t0
    err32 = grad_check(ViTConfig(), seed=0, n_probe_params=200, dtype=np.float32)
    ok = err64 < 1e-4 and err32 < 5e-3 and took < 60
    verdict(1, ok, f"rel err f64 {err64:.2e} (<1e-4), f32 {err32:.2e} (<5e-3), {took:.1f}s (<60s)")
    assert ok


def test_criterion_2_tiling_exactness(verdict):
    t0 = time.perf_counter()
    bad = 0
    checked = 0
    for seed in range(10):
        s = synth_slide(SynthConfig(seed=seed), f"slide_{seed:02d}")
        grids = {lv: tile_grid(s, lv, 32) for lv in MagTag}
        raw = {lv: {r.index: extract_raw(s, r) for r in grids[lv]} for lv in MagTag}
        for lv in (MagTag.LOW, MagTag.MID):
            for p in grids[lv]:
                kids = children_of(p.index)
                mosaic = stitch_children([raw[lv + 1][c] for c in kids])
                bad += not np.array_equal(box_downsample(mosaic), raw[lv][p.index])
                bad += any(parent_of(c) != p.index for c in kids)
                checked += 1
        # every child has exactly one parent and is reached exactly once
        for lv in (MagTag.MID, MagTag.HIGH):
            reached = [c for p in grids[lv - 1] for c in children_of(p.index)]
            bad += len(set(reached)) != len(reached) or set(reached) != set(raw[lv])
    took = time.perf_counter() - t0
    ok = bad == 0 and took < 30
    verdict(2, ok, f"{checked} parents, {bad} mismatches, {took:.1f}s (<30s)")
    assert ok


def test_criterion_3_loss_sanity(verdict):
    loss0, _ = mad_loss(np.zeros((2, 64)), np.zeros((3, 64)), np.zeros(64), 0.04, 0.1)
    worst = 0.0
    rng = np.random.default_rng(3)
    for _ in range(10):
        t, s, c = rng.normal(size=(2, 2, 64)), rng.normal(size=(2, 3, 64)), rng.normal(size=64) * 0.1
        _, g = mad_loss(t, s, c, 0.04, 0.1)
        h = 1e-6
        num = np.zeros_like(s)
        for idx in np.ndindex(s.shape):
            e = np.zeros_like(s)
            e[idx] = h
            num[idx] = (mad_loss(t, s + e, c, 0.04, 0.1)[0] - mad_loss(t, s - e, c, 0.04, 0.1)[0]) / (2 * h)
        worst = max(worst, np.abs(g - num).max() / np.abs(num).max())
    ok = abs(loss0 - 4.158883) < 1e-6 and worst < 1e-6
    verdict(3, ok, f"zero-logit loss {loss0:.7f} (ln 64), FD rel err {worst:.2e} (<1e-6)")
    assert ok


def _labelings(rng):
    n = int(rng.integers(2, 101))
    return rng.integers(0, int(rng.integers(1, 7)), n), rng.integers(0, int(rng.integers(1, 7)), n)


def test_criterion_4_metric_oracles(verdict):
    rng = np.random.default_rng(4)
    worst = {"ami": 0.0, "dbi": 0.0, "f1": 0.0, "iou": 0.0, "dice": 0.0}
    knn_bad = 0
    for _ in range(50):
        u, v = _labelings(rng)
        worst["ami"] = max(worst["ami"], abs(ami(u, v) - oracles.ami(u.tolist(), v.tolist())))
        f = f1_table(u, v)
        ref = oracles.f1(u.tolist(), v.tolist())
        worst["f1"] = max(worst["f1"], max(abs(f.get(c, 0.0) - ref[c]) for c in ref))
        seg = seg_scores(u, v)
        iou, dice = oracles.iou_dice(u.tolist(), v.tolist())
        worst["iou"] = max(worst["iou"], max(abs(seg["iou"][c] - iou[c]) for c in iou))
        worst["dice"] = max(worst["dice"], max(abs(seg["dice"][c] - dice[c]) for c in dice))

        n = int(rng.integers(3, 101))
        X = rng.normal(size=(n, int(rng.integers(1, 6))))
        lab = rng.integers(0, int(rng.integers(2, min(n, 6) + 1)), n)
        lab[:2] = [0, 1]
        worst["dbi"] = max(worst["dbi"], abs(dbi(X, lab) - oracles.dbi(X.tolist(), lab.tolist())))

        Xt = rng.integers(-2, 3, size=(int(rng.integers(1, 60)), 3)).astype(float)
        yt = rng.integers(0, 4, len(Xt))
        Xq = rng.integers(-2, 3, size=(int(rng.integers(1, 40)), 3)).astype(float)
        k = int(rng.integers(1, len(Xt) + 1))
        knn_bad += knn_classify(Xt, yt, Xq, k).tolist() != oracles.knn(Xt.tolist(), yt.tolist(), Xq.tolist(), k)

    u = rng.integers(0, 5, 80)
    ident = ami(u, u)
    # centroids 0 and 4, both scatters 1
    pts, groups = np.array([[-1.0], [1.0], [3.0], [5.0]]), np.array([0, 0, 1, 1])
    hand = dbi(pts, groups)
    lib = davies_bouldin_score(pts, groups)
    ok = (max(worst.values()) < 1e-9 and knn_bad == 0 and abs(ident - 1) < 1e-9
          and abs(hand - 0.5) < 1e-12 and abs(lib - 0.5) < 1e-12)
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(4, ok, f"max abs err {detail}; knn mismatches {knn_bad}; AMI(u,u) {ident:.12f}; DBI hand {hand:.12f}")
    assert ok


def test_criterion_5_consistency_arithmetic(verdict):
    r = ConsistencyReport.from_similarities(0.716, 0.577, 0.221)
    pct = consistency_pct(0.8875, 0.8584)
    ok = 0.138 <= r.delta_hier <= 0.139 and abs(r.delta_sem - 0.356) <= 5e-4 and abs(pct - 96.7) <= 0.05
    verdict(5, ok, f"delta_hier {r.delta_hier:.4f}, delta_sem {r.delta_sem:.4f}, consistency {pct:.3f}%")
    assert ok


# --- end-to-end criteria ------------------------------------------------------


def _mad(*argv):
    code = cli.run([str(a) for a in argv])
    assert code == 0, f"mad {argv[0]} exited {code}"


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _small_desk(tmp_path):
    """Bundled desk config cut down to three slides and a short run."""
    d = json.loads(config.bundled("desk.json").read_text())
    d["synth"]["n_slides"] = 3
    d["tiling"]["n_test"] = 1
    d["train"]["steps"] = 12
    d["train"]["batch_families"] = 4
    p = tmp_path / "desk_small.json"
    p.write_text(json.dumps(d))
    return p


def _pipeline(cfg, out, *extra):
    for cmd in ("synth", "tile", "train", "embed", "probe", "eval"):
        _mad(cmd, "--config", cfg, "--out", out, *extra)


DETERMINISM_FILES = ("checkpoint.madc", "embeddings/train.made", "embeddings/test.made", "metrics.json")


@pytest.fixture(scope="module")
def small_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept")
    cfg = _small_desk(root)
    outs = []
    for name, threads in (("a", 1), ("b", 1), ("c", 8)):
        _pipeline(cfg, root / name, "--threads", threads)
        outs.append(root / name / "runs" / "mad-seed0")
    return outs


def test_criterion_7_determinism(small_runs, verdict):
    a, b, c = small_runs
    diffs = [f"{name} ({other.parent.parent.name})" for name in DETERMINISM_FILES for other in (b, c)
             if _digest(a / name) != _digest(other / name)]
    ok = not diffs
    verdict(7, ok, "checkpoint, embeddings and metrics byte-identical across reruns and threads 1 vs 8"
            if ok else f"differs: {diffs}")
    assert ok


def test_criterion_8_protocol_purity(small_runs, verdict):
    run = small_runs[0]
    probe = LinearProbe.load(run / "probe_mid.madc")
    require_zero_shot(probe)
    recorded = json.loads((run / "metrics.json").read_text())["details"]["zero_shot_probe_provenance"]
    # the gate must also reject probes with any other history
    full = LinearProbe.load(run / "probe_all.madc")
    with pytest.raises(ProtocolError):
        require_zero_shot(full)
    ok = [tuple(p) for p in recorded] == [("MID", "TRAIN")] and probe.provenance_ == [("MID", "TRAIN")]
    verdict(8, ok, f"zero-shot probe provenance {probe.provenance_}; full probe {full.provenance_} rejected")
    assert ok


CRIT6_SEEDS = (0, 1, 2)
CRIT6_BUDGET_S = 45 * 60


@pytest.mark.slow
def test_criterion_6_desk_ablation(tmp_path, verdict):
    cfg = config.bundled("desk.json")
    t0 = time.perf_counter()
    _mad("synth", "--config", cfg, "--out", tmp_path)
    _mad("tile", "--config", cfg, "--out", tmp_path)
    for mode in ("MAD", "BASELINE"):
        for seed in CRIT6_SEEDS:
            for cmd in ("train", "embed", "probe", "eval"):
                _mad(cmd, "--config", cfg, "--out", tmp_path, "--mode", mode, "--seed", seed, "--threads", 1)
    _mad("report", "--config", cfg, "--out", tmp_path)
    took = time.perf_counter() - t0

    rep = json.loads((tmp_path / "report.json").read_text())
    runs = {}
    for p in sorted((tmp_path / "runs").glob("*/metrics.json")):
        m = json.loads(p.read_text())
        runs.setdefault(m["mode"], []).append(m)
    med = {
        mode: {
            "cons": statistics.median(m["segmentation"]["consistency_pct"] for m in ms),
            "hier": statistics.median(m["consistency"]["delta_hier"] for m in ms),
            "ami": statistics.median(m["ami"] for m in ms),
        }
        for mode, ms in runs.items()
    }
    mad, base = med["MAD"], med["BASELINE"]
    checks = {
        "consistency +5": mad["cons"] >= base["cons"] + 5,
        "delta_hier > 0": mad["hier"] > 0,
        "delta_hier > baseline": mad["hier"] > base["hier"],
        "AMI >= baseline": mad["ami"] >= base["ami"],
        "runtime": took <= CRIT6_BUDGET_S,
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    verdict(6, ok, (f"median MAD/BASELINE consistency {mad['cons']:.1f}/{base['cons']:.1f}, "
                    f"delta_hier {mad['hier']:.4f}/{base['hier']:.4f}, AMI {mad['ami']:.4f}/{base['ami']:.4f}, "
                    f"{took / 60:.1f} min" + (f"; failed: {failed}" if failed else "")))
    assert [(r["mode"], r["n_runs"]) for r in rep["rows"]] == [("MAD", 3), ("BASELINE", 3)]
    assert rep["rows"][0]["consistency_pct"] == pytest.approx(mad["cons"])
    assert ok, failed
