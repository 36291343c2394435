"""``mad`` command line: synth, tile, train, embed, probe, eval, report.

Every command reads the same JSON config and communicates with the others
through files under ``--out`` only::

    <out>/slides/<slide_id>/     pyramids              (synth)
    <out>/manifest.jsonl         tile manifest         (tile)
    <out>/runs/<mode>-seed<s>/   checkpoint, trace     (train)
        embeddings/{train,test}.made                   (embed)
        probe_all.madc, probe_mid.madc                 (probe)
        metrics.json, pca.csv                          (eval)

CSV outputs carry their provenance in a ``<name>.csv.json`` sidecar.
    <out>/report.{md,json}                             (report)
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import statistics
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, config as config_mod, distill
from .errors import ConfigError, FormatError, MADError, NumericalAbort, ProtocolError
from .evalsuite.embeddings import EmbeddingSet, Net, checkpoint_id, read_embeddings, write_embeddings
from .evalsuite.evaluate import METRIC_KEYS, embedding_sets, evaluate, fit_probes
from .evalsuite.probe import LinearProbe
from .slidegen import MANIFEST_NAME, class_shares, load_slide, save_slide, synth_slide
from .tiler import Split, build_manifest, read_manifest, write_manifest
from .views import TileStore

log = logging.getLogger("mad")

COMMANDS = ("synth", "tile", "train", "embed", "probe", "eval", "report")
EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3
LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    name = os.environ.get("MAD_LOG", "info").lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"MAD_LOG must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    root = logging.getLogger("mad")
    root.handlers.clear()
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(h)
    root.setLevel(LOG_LEVELS[name])
    root.propagate = False


def _dump(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


class Context:
    def __init__(self, cfg: config_mod.RunConfig, out: Path, threads: int):
        self.cfg = cfg
        self.out = out
        self.threads = threads

    @property
    def slides_dir(self) -> Path:
        return self.out / "slides"

    @property
    def manifest_path(self) -> Path:
        return self.out / "manifest.jsonl"

    @property
    def run_dir(self) -> Path:
        return self.out / "runs" / self.cfg.run_name()

    @property
    def checkpoint_path(self) -> Path:
        return self.run_dir / "checkpoint.madc"

    def emb_path(self, split: str) -> Path:
        return self.run_dir / "embeddings" / f"{split}.made"

    def probe_path(self, which: str) -> Path:
        return self.run_dir / f"probe_{which}.madc"

    def provenance(self) -> dict:
        return self.cfg.provenance()

    # -- artifact loading with actionable errors ---------------------------

    def require(self, path: Path, producer: str) -> Path:
        if not path.exists():
            raise FormatError(f"missing {path}; run `mad {producer}` first")
        return path

    def slides(self, ids=None) -> dict:
        ids = ids or self.cfg.slide_ids
        out = {}
        for sid in ids:
            d = self.require(self.slides_dir / sid / MANIFEST_NAME, "synth").parent
            out[sid] = load_slide(d)
        return out

    def manifest(self):
        return read_manifest(self.require(self.manifest_path, "tile"))

    def state(self):
        state, vit, meta = distill.load_state(self.require(self.checkpoint_path, "train"))
        if vit != self.cfg.vit:
            raise ConfigError("checkpoint ViT config differs from the run config")
        return state, vit, meta

    def net_params(self, state):
        return state.teacher if self.cfg.eval.net == "TEACHER" else state.student

    def ckpt_id(self) -> str:
        return checkpoint_id(self.require(self.checkpoint_path, "train").read_bytes())


# --- commands ---------------------------------------------------------------


def slide_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([base, index]).generate_state(1, np.uint64)[0])


def cmd_synth(ctx: Context) -> dict:
    cfg = ctx.cfg
    names = list(cfg.synth.class_names)
    print("slide_id " + " ".join(f"{n[:12]:>12}" for n in names))
    shares_out = {}
    for i, sid in enumerate(cfg.slide_ids):
        scfg = dataclasses.replace(cfg.synth, seed=slide_seed(cfg.synth.seed, i))
        pyr = synth_slide(scfg, sid)
        pyr.meta = {"provenance": ctx.provenance()}
        save_slide(pyr, ctx.slides_dir / sid)
        shares = class_shares(pyr)
        shares_out[sid] = [float(s) for s in shares]
        print(f"{sid} " + " ".join(f"{s:12.4f}" for s in shares))
        log.info("wrote %s (sum of shares %.12f)", sid, float(shares.sum()))
    return shares_out


def cmd_tile(ctx: Context):
    cfg = ctx.cfg
    slides = list(ctx.slides().values())
    man = build_manifest(slides, cfg.tiling.tile_px, cfg.tiling.caps, cfg.split_assignment(), cfg.tiling.seed)
    ctx.out.mkdir(parents=True, exist_ok=True)
    write_manifest(man, ctx.manifest_path, extra_header={"provenance": ctx.provenance()})
    fam = {t.value: len(v) for t, v in man.pairs.items()}
    print(f"{len(man.records)} records, families {fam}")
    return man


def cmd_train(ctx: Context):
    cfg = ctx.cfg
    man = ctx.manifest()
    train_ids = [sid for sid, sp in man.slide_splits.items() if sp == Split.TRAIN]
    store = TileStore(man, list(ctx.slides(train_ids).values()))
    tcfg = cfg.train_config()
    meta = {"provenance": ctx.provenance(), "mode": cfg.mode, "config": cfg.to_json()}
    ctx.run_dir.mkdir(parents=True, exist_ok=True)
    try:
        state, trace = distill.train(store, cfg.vit, tcfg, checkpoint_dir=ctx.run_dir, meta=meta)
    except NumericalAbort as exc:
        _dump({"error": str(exc), "diagnostic": exc.diagnostic, "provenance": ctx.provenance()},
              ctx.run_dir / "abort.json")
        raise
    distill.save_state(state, cfg.vit, ctx.checkpoint_path, meta)
    distill.write_trace(trace, ctx.run_dir / "trace.csv")
    _dump({"provenance": ctx.provenance(), "mode": cfg.mode}, ctx.run_dir / "trace.csv.json")
    if trace:
        print(f"{cfg.mode} seed {cfg.seed}: {len(trace)} steps, final loss {trace[-1]['loss']:.4f}")
    return state


def cmd_embed(ctx: Context):
    man = ctx.manifest()
    state, vit, _ = ctx.state()
    params = ctx.net_params(state)
    train, test = embedding_sets(params, vit, man, ctx.slides(), net=ctx.cfg.eval.net,
                                 ckpt_id=ctx.ckpt_id(), threads=ctx.threads)
    info = {"provenance_tags": ctx.provenance()}
    for name, es in (("train", train), ("test", test)):
        write_embeddings(es, ctx.emb_path(name), info)
    print(f"embedded {len(train)} TRAIN and {len(test)} TEST tiles (dim {train.dim})")
    return train, test


def cmd_probe(ctx: Context):
    train = read_embeddings(ctx.require(ctx.emb_path("train"), "embed"))
    full, mid = fit_probes(train, ctx.cfg.eval_config())
    extra = {"provenance_tags": ctx.provenance(), "checkpoint_id": train.checkpoint_id}
    full.save(ctx.probe_path("all"), extra)
    mid.save(ctx.probe_path("mid"), extra)
    print(f"probe train accuracy: all {full.train_accuracy_:.4f}, MID-only {mid.train_accuracy_:.4f}")
    return full, mid


def cmd_eval(ctx: Context) -> dict:
    man = ctx.manifest()
    state, vit, _ = ctx.state()
    params = ctx.net_params(state)
    train = read_embeddings(ctx.require(ctx.emb_path("train"), "embed"))
    test = read_embeddings(ctx.require(ctx.emb_path("test"), "embed"))
    cid = ctx.ckpt_id()
    for es in (train, test):
        if es.checkpoint_id != cid:
            raise FormatError("embeddings were computed from a different checkpoint; rerun `mad embed`")
        es.check_manifest(man)
    probe_all = LinearProbe.load(ctx.require(ctx.probe_path("all"), "probe"))
    probe_mid = LinearProbe.load(ctx.require(ctx.probe_path("mid"), "probe"))
    metrics = evaluate(params, vit, man, ctx.slides(), train, test, probe_all, probe_mid,
                       ctx.cfg.eval_config(), threads=ctx.threads, pca_path=ctx.run_dir / "pca.csv")
    metrics["mode"] = ctx.cfg.mode
    metrics["provenance"] = ctx.provenance()
    metrics["checkpoint_id"] = cid
    metrics["config"] = ctx.cfg.to_json()
    _dump(metrics, ctx.run_dir / "metrics.json")
    _dump({"provenance": ctx.provenance(), "checkpoint_id": cid}, ctx.run_dir / "pca.csv.json")
    seg = metrics["segmentation"]
    print(f"consistency_pct {seg['consistency_pct']:.2f}  delta_hier {metrics['consistency']['delta_hier']:.4f}"
          f"  ami {metrics['ami']:.4f}")
    return metrics


REPORT_MODES = ("MAD", "BASELINE")
REPORT_COLUMNS = (
    ("mid_miou", lambda m: m["segmentation"]["mid"]["miou"]),
    ("high_miou", lambda m: m["segmentation"]["high"]["miou"]),
    ("consistency_pct", lambda m: m["segmentation"]["consistency_pct"]),
    ("delta_hier", lambda m: m["consistency"]["delta_hier"]),
    ("delta_sem", lambda m: m["consistency"]["delta_sem"]),
    ("ami", lambda m: m["ami"]),
    ("dbi", lambda m: m["dbi"]),
)


def _median(vals):
    vals = [v for v in vals if v is not None]
    return statistics.median(vals) if vals else None


def build_report(metrics: list[dict]) -> dict:
    rows = []
    for mode in REPORT_MODES:
        runs = sorted((m for m in metrics if m.get("mode") == mode), key=lambda m: m["provenance"]["seed"])
        if not runs:
            continue
        row = {"mode": mode, "n_runs": len(runs), "seeds": [m["provenance"]["seed"] for m in runs]}
        for col, get in REPORT_COLUMNS:
            row[col] = _median([get(m) for m in runs])
            row[col + "_runs"] = [get(m) for m in runs]
        rows.append(row)
    return {"columns": [c for c, _ in REPORT_COLUMNS], "rows": rows, "aggregate": "median over seeds"}


def report_markdown(rep: dict) -> str:
    cols = rep["columns"]
    fmt = lambda v: "n/a" if v is None else f"{v:.4f}"
    lines = ["| mode | runs | " + " | ".join(cols) + " |", "|" + "---|" * (len(cols) + 2)]
    for r in rep["rows"]:
        lines.append(f"| {r['mode']} | {r['n_runs']} | " + " | ".join(fmt(r[c]) for c in cols) + " |")
    return "\n".join(lines) + "\n"


def cmd_report(ctx: Context, paths) -> dict:
    if paths:
        files = []
        for p in map(Path, paths):
            files.append(p / "metrics.json" if p.is_dir() else p)
    else:
        files = sorted((ctx.out / "runs").glob("*/metrics.json"))
    if not files:
        raise FormatError(f"no metrics.json under {ctx.out / 'runs'}; run `mad eval` first")
    metrics = []
    for f in files:
        if not f.is_file():
            raise FormatError(f"missing {f}; run `mad eval` first")
        m = json.loads(f.read_text())
        missing = [k for k in METRIC_KEYS if k not in m]
        if missing:
            raise FormatError(f"{f} lacks keys {missing}")
        metrics.append(m)
    rep = build_report(metrics)
    rep["provenance"] = ctx.provenance()
    rep["sources"] = [str(f) for f in files]
    md = report_markdown(rep)
    _dump(rep, ctx.out / "report.json")
    (ctx.out / "report.md").write_text(md)
    print(md, end="")
    return rep


# --- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mad", description="Magnification-aware distillation pipeline")
    p.add_argument("--version", action="version", version=f"mad {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("paths", nargs="*", help="metrics.json files or run directories (report only)")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--out", help="output root (default: config 'out')")
    p.add_argument("--seed", type=int, help="run seed (training and evaluation)")
    p.add_argument("--threads", type=int, default=None, help="worker cap (default: available cores)")
    p.add_argument("--mode", type=str.upper, choices=distill.MODES, help="training mode")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be a 64-bit unsigned integer")
        cfg = config_mod.load(args.config, seed=args.seed, mode=args.mode)
        threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
        if threads < 1:
            raise ConfigError("--threads must be at least 1")
        ctx = Context(cfg, Path(args.out or cfg.out), threads)
        with threadpool_limits(limits=1):
            if args.command == "report":
                cmd_report(ctx, args.paths)
            else:
                if args.paths:
                    raise ConfigError(f"`mad {args.command}` takes no positional paths")
                globals()[f"cmd_{args.command}"](ctx)
    except NumericalAbort as exc:
        print(f"mad {args.command}: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FormatError, ProtocolError, MADError) as exc:
        print(f"mad {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"mad {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
