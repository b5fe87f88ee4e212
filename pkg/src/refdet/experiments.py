"""Ablation runner: train every variant under several seeds and cache the metrics.

Each run writes ``runs/<variant>-s<seed>.json`` under the results directory.
A run is skipped when its file exists and records the same config digest, so
the whole grid can be resumed after an interruption.
"""
import json
import logging
import os
import time
from pathlib import Path

import numpy as np

from .config import Config
from .datagen import category_id, translating_video
from .dataset import base_categories, build_reference_sets, build_test_set, build_training_set
from .detector import load_checkpoint, save_checkpoint
from .encoder import ToyEmbedder
from .evaluation import agnostic_metrics, one_shot_protocol
from .geometry import iou_matrix
from .inference import track_sot
from .training import train

log = logging.getLogger(__name__)

RESULTS_DIR = Path(__file__).resolve().parents[2] / "results"
SEEDS = (0, 1, 2)

VARIANTS = {
    "fs": {},
    "cos": {"loss.mode": "cos"},
    "hung": {"loss.mode": "hung"},
    "fs_T1": {"loss.temperature": 1.0},
    "fs_T100": {"loss.temperature": 100.0},
    "fs_tau0.6": {"loss.tau": 0.6},
    "weak_noise0": {"pseudo.source": "weak"},
    "weak_noise0.2": {"pseudo.source": "weak", "pseudo.noise_ratio": 0.2},
    "weak_noise0.4": {"pseudo.source": "weak", "pseudo.noise_ratio": 0.4},
}

# variants whose checkpoints are kept (the tracking check reuses them)
KEEP_CHECKPOINTS = ("fs",)


def default_cache_dir():
    return Path(os.environ.get("REFDET_CACHE", Path.home() / ".cache" / "refdet"))


def variant_config(name, seed, base=None):
    if name not in VARIANTS:
        raise KeyError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    return (base or Config()).replace(seed=seed, **VARIANTS[name])


def evaluate(model, config, test=None, refs=None, embedder=None):
    """Category-aware (mean over reference sets) and agnostic metrics of ``model``."""
    embedder = embedder or ToyEmbedder(config.model.embed_dim)
    test = build_test_set(config) if test is None else test
    refs = build_reference_sets(config, embedder) if refs is None else refs
    inf = config.inference
    held = [category_id(n) for n in config.data.held_out]
    aware = one_shot_protocol(model, test, refs, held, config.loss.temperature, inf.sim_threshold,
                              inf.eval_score_threshold, inf.score_mode, inf.nms_iou)
    return {"aware": aware, "agnostic": agnostic_metrics(model, test, inf.eval_score_threshold, inf.nms_iou)}


def run_path(name, seed, results_dir=RESULTS_DIR):
    return Path(results_dir) / "runs" / f"{name}-s{seed}.json"


def checkpoint_path(name, seed, results_dir=RESULTS_DIR):
    return Path(results_dir) / "checkpoints" / f"{name}-s{seed}.zip"


def run_variant(name, seed, base=None, results_dir=RESULTS_DIR, cache_dir=None, force=False):
    """Train and evaluate one (variant, seed) pair; returns the result record."""
    cfg = variant_config(name, seed, base)
    out = run_path(name, seed, results_dir)
    digest = cfg.digest()
    if out.exists() and not force:
        rec = json.loads(out.read_text())
        if rec.get("digest") == digest:
            return rec
    cache_dir = default_cache_dir() if cache_dir is None else cache_dir
    embedder = ToyEmbedder(cfg.model.embed_dim)
    ts = build_training_set(cfg, embedder, cache_dir)
    t0 = time.time()
    trainer = train(cfg, ts)
    seconds = time.time() - t0
    metrics = evaluate(trainer.ema, cfg, embedder=embedder)
    rec = {"variant": name, "seed": seed, "digest": digest, "config": cfg.to_dict(),
           "train_seconds": round(seconds, 1), "num_pseudo_boxes": int(sum(len(b) for b in ts.pseudo_boxes)),
           **metrics}
    out.parent.mkdir(parents=True, exist_ok=True)
    if name in KEEP_CHECKPOINTS:
        ck = checkpoint_path(name, seed, results_dir)
        ck.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ck, trainer, {"config": cfg.to_dict()})
    out.write_text(json.dumps(rec, indent=1, sort_keys=True))
    log.info("%s seed %d: aware AP50 %.4f agnostic AP50 %.4f (%.0fs)", name, seed,
             rec["aware"]["mean"]["AP50"], rec["agnostic"]["AP50"], seconds)
    return rec


def run_all(names=None, seeds=SEEDS, base=None, results_dir=RESULTS_DIR, cache_dir=None):
    names = list(VARIANTS) if names is None else list(names)
    # seed-major order, so partial grids already cover every variant
    for seed in seeds:
        for name in names:
            run_variant(name, seed, base, results_dir, cache_dir)
    return summarise(results_dir)


def load_runs(results_dir=RESULTS_DIR):
    runs = {}
    for path in sorted((Path(results_dir) / "runs").glob("*.json")):
        rec = json.loads(path.read_text())
        runs.setdefault(rec["variant"], []).append(rec)
    return runs


def summarise(results_dir=RESULTS_DIR, write=True):
    """Per-variant means over the available seeds."""
    summary = {}
    for name, recs in load_runs(results_dir).items():
        recs = sorted(recs, key=lambda r: r["seed"])
        aware = [r["aware"]["mean"] for r in recs]
        summary[name] = {
            "seeds": [r["seed"] for r in recs],
            "aware_AP50": [a["AP50"] for a in aware],
            "aware_AP": [a["AP"] for a in aware],
            "agnostic_AP50": [r["agnostic"]["AP50"] for r in recs],
            "mean_aware_AP50": float(np.mean([a["AP50"] for a in aware])),
            "mean_aware_AP": float(np.mean([a["AP"] for a in aware])),
            "mean_agnostic_AP50": float(np.mean([r["agnostic"]["AP50"] for r in recs])),
        }
    if write and summary:
        path = Path(results_dir) / "summary.json"
        path.write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


def sot_benchmark(model, config=None, video_seed=0, num_frames=60, speed=5.0, embedder=None):
    """Per-frame IoU of :func:`track_sot` on a synthetic video of a held-out object."""
    config = config or Config()
    embedder = embedder or ToyEmbedder(config.model.embed_dim)
    held = [category_id(n) for n in config.data.held_out]
    rng = np.random.default_rng(video_seed)
    target = held[int(rng.integers(len(held)))]
    base = base_categories(config.data.held_out)
    distractors = tuple(int(c) for c in rng.choice(base, size=2, replace=False))
    video = translating_video(np.random.SeedSequence([config.data.seed, 5, video_seed]), target,
                              num_frames=num_frames, image_size=2 * config.data.tile_size,
                              speed=speed, distractors=distractors)
    track = track_sot(video.frames, video.boxes[0], model, embedder, config.loss.temperature)
    ious = np.array([iou_matrix(np.asarray(b)[None], gt[None])[0, 0] for (b, _), gt in zip(track, video.boxes)])
    return {"ious": ious.tolist(), "fraction_ge_0.5": float((ious >= 0.5).mean()), "category": target,
            "distractors": list(distractors)}


def load_variant_model(name="fs", seed=0, results_dir=RESULTS_DIR):
    trainer, extra = load_checkpoint(checkpoint_path(name, seed, results_dir))
    return trainer.ema, extra
