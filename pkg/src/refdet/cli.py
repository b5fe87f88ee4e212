"""The refdet command line: data generation, pseudo boxes, training, inference,
evaluation, tracking and the ablation grid."""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("refdet")


def _load_cfg(args):
    from .config import load_config
    cfg = load_config(getattr(args, "config", None))
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {item!r}")
        overrides[key] = _parse_value(value)
    if overrides:
        cfg = cfg.replace(**overrides)
    return cfg


def _parse_value(text):
    import yaml
    return yaml.safe_load(text)


def _write_json(obj, out):
    text = json.dumps(obj, indent=1, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text + "\n")


def _read_image(path):
    from PIL import Image
    if not Path(path).exists():
        raise FileNotFoundError(f"no such image: {path}")
    return np.asarray(Image.open(path).convert("RGB"))


def _load_model(path):
    from .detector import load_checkpoint
    if not Path(path).exists():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    trainer, extra = load_checkpoint(path)
    return trainer, extra


def _ckpt_config(extra, fallback):
    from .config import from_dict
    return from_dict(extra["config"]) if "config" in extra else fallback


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    from .config import save_config
    from .dataset import (_TEST, _TRAIN, base_categories, build_reference_sets, build_test_set, make_mosaics,
                          write_reference_sets, write_split)
    cfg = _load_cfg(args)
    if args.seed is not None:
        cfg = cfg.replace(**{"data.seed": args.seed})
    out = Path(args.out)
    d = cfg.data
    info = {"tile_size": d.tile_size, "seed": d.seed}
    write_split(make_mosaics(d, _TRAIN, base_categories(d.held_out), d.num_mosaics), out / "train", info)
    write_split(build_test_set(cfg), out / "test", info)
    write_reference_sets(build_reference_sets(cfg), out / "refs")
    save_config(cfg, out / "config.yaml")
    log.info("wrote %d training and %d test images to %s", d.num_mosaics, d.num_test_mosaics, out)


def _split_dir(data):
    data = Path(data)
    return data / "train" if (data / "train" / "manifest.json").exists() else data


def cmd_gen_pseudo(args):
    from .dataset import _WEAK, _seed, load_split, mosaic_pseudo_boxes, write_pseudo_json
    from .datagen import perturb_boxes
    from .encoder import ToyEmbedder
    from .geometry import box_convert
    cfg = _load_cfg(args)
    if args.n is not None:
        cfg = cfg.replace(**{"pseudo.n_objects": args.n})
    split = _split_dir(args.data)
    manifest, images = load_split(split)
    tile = int(manifest.get("info", {}).get("tile_size", cfg.data.tile_size))
    boxes = {}
    if args.weak:
        gt = {int(i["id"]): [] for i in manifest["images"]}
        for a in manifest["annotations"]:
            gt[int(a["image_id"])].append(box_convert(np.asarray(a["bbox"]), "xywh", "xyxy"))
        sizes = {int(i["id"]): (i["width"], i["height"]) for i in manifest["images"]}
        for i, b in gt.items():
            rng = np.random.default_rng(_seed(cfg.data.seed, _WEAK, i))
            boxes[i], _ = perturb_boxes(np.asarray(b).reshape(-1, 4), rng, cfg.pseudo.box_ratio,
                                        cfg.pseudo.noise_ratio, sizes[i])
    else:
        emb = ToyEmbedder(cfg.model.embed_dim)
        for i in sorted(images):
            boxes[i] = mosaic_pseudo_boxes(images[i](), tile, emb, cfg.pseudo)
    info = {"data": str(split.resolve()), "source": "weak" if args.weak else "maskcut",
            "n_objects": cfg.pseudo.n_objects}
    doc = write_pseudo_json(args.out, boxes, info=info)
    log.info("wrote %d pseudo boxes for %d images", len(doc["annotations"]), len(boxes))


def cmd_embed(args):
    from .dataset import load_split, read_pseudo_json
    from .encoder import ToyEmbedder, build_cache
    cfg = _load_cfg(args)
    _, images = load_split(_split_dir(args.data))
    _, boxes = read_pseudo_json(args.pseudo)
    cache, errors = build_cache(images, boxes, ToyEmbedder(cfg.model.embed_dim))
    cache.save(args.out)
    for e in errors:
        print(f"warning: image {e['image_id']} box {e['box_index']}: {e['error']}", file=sys.stderr)
    log.info("cached %d embeddings (%d errors)", cache.count, len(errors))


def cmd_train(args):
    from .config import save_config
    from .dataset import read_pseudo_json, training_set_from_files
    from .detector import save_checkpoint
    from .training import train
    cfg = _load_cfg(args)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.iterations is not None:
        cfg = cfg.replace(**{"train.iterations": args.iterations})
    info, _ = read_pseudo_json(args.pseudo)
    data = args.data or info.get("data")
    if not data:
        raise ValueError("pass --data (the pseudo JSON does not name its image directory)")
    ts = training_set_from_files(_split_dir(data), args.pseudo, args.cache)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "loss_log.jsonl"
    log_path.write_text("")
    trainer = train(cfg, ts, log_path=log_path)
    save_checkpoint(out / "model.zip", trainer, {"config": cfg.to_dict()})
    save_config(cfg, out / "config.yaml")
    log.info("saved %s after %d iterations", out / "model.zip", trainer.iteration)


def cmd_self_train(args):
    from .dataset import load_split, write_pseudo_json
    from .inference import detect_agnostic
    from .maskcut import self_train_filter
    trainer, _ = _load_model(args.ckpt)
    _, images = load_split(_split_dir(args.data))
    boxes, scores = {}, {}
    for i in sorted(images):
        dets = detect_agnostic(images[i](), trainer.ema, score_threshold=0.0)
        kept = self_train_filter([(d.box, d.confidence) for d in dets], args.gamma)
        boxes[i] = np.asarray([b for b, _ in kept]).reshape(-1, 4)
        scores[i] = [c for _, c in kept]
    doc = write_pseudo_json(args.out, boxes, scores, info={"data": str(_split_dir(args.data).resolve()),
                                                            "source": "self-train", "gamma": args.gamma})
    log.info("kept %d boxes with confidence > %.2f", len(doc["annotations"]), args.gamma)


def cmd_infer(args):
    from .encoder import ToyEmbedder
    from .inference import agnostic_predictions, category_aware_predictions
    trainer, extra = _load_model(args.ckpt)
    cfg = _ckpt_config(extra, _load_cfg(args))
    image = _read_image(args.image)
    score_thr = cfg.inference.score_threshold if args.score_threshold is None else args.score_threshold
    if args.reference:
        emb = ToyEmbedder(cfg.model.embed_dim)
        refs = np.stack([emb.encode(_read_image(p)) for p in args.reference])
        preds = category_aware_predictions(image, args.image_id, trainer.ema, refs, None, cfg.loss.temperature,
                                           args.sim_threshold, score_thr, cfg.inference.score_mode,
                                           cfg.inference.nms_iou)
    else:
        preds = agnostic_predictions(image, args.image_id, trainer.ema, score_thr, cfg.inference.nms_iou)
    _write_json(preds, args.out)


def cmd_eval(args):
    from .datagen import category_id
    from .dataset import load_reference_sets, samples_from_split
    from .encoder import ToyEmbedder
    from .evaluation import agnostic_metrics, one_shot_protocol, write_report
    trainer, extra = _load_model(args.ckpt)
    cfg = _ckpt_config(extra, _load_cfg(args))
    data = Path(args.data)
    split = data / "test" if (data / "test" / "manifest.json").exists() else data
    samples = samples_from_split(split)
    refs = load_reference_sets(args.refs, ToyEmbedder(cfg.model.embed_dim))
    cats = sorted({int(c) for c in refs[0].categories}) if refs else [category_id(n) for n in cfg.data.held_out]
    inf = cfg.inference
    report = one_shot_protocol(trainer.ema, samples, refs, cats, cfg.loss.temperature, inf.sim_threshold,
                               inf.eval_score_threshold, inf.score_mode, inf.nms_iou)
    report["agnostic"] = agnostic_metrics(trainer.ema, samples, inf.eval_score_threshold, inf.nms_iou)
    if args.out:
        write_report(report, args.out, args.csv)
    else:
        _write_json(report, None)


def cmd_track(args):
    from .encoder import ToyEmbedder
    from .geometry import box_convert
    from .inference import track_sot
    trainer, extra = _load_model(args.ckpt)
    cfg = _ckpt_config(extra, _load_cfg(args))
    paths = sorted(Path(args.frames).glob("*.png"))
    if len(paths) < 2:
        raise ValueError(f"need at least two PNG frames in {args.frames}")
    try:
        xywh = np.array([float(v) for v in args.box.split(",")])
    except ValueError:
        raise ValueError(f"--box expects x,y,w,h, got {args.box!r}") from None
    if xywh.shape != (4,):
        raise ValueError(f"--box expects x,y,w,h, got {args.box!r}")
    frames = [_read_image(p) for p in paths]
    track = track_sot(frames, box_convert(xywh, "xywh", "xyxy"), trainer.ema, ToyEmbedder(cfg.model.embed_dim),
                      cfg.loss.temperature)
    _write_json([{"frame": p.name, "bbox": [float(v) for v in box_convert(np.asarray(b), "xyxy", "xywh")],
                  "score": float(c)} for p, (b, c) in zip(paths, track)], args.out)


def cmd_gen_video(args):
    from PIL import Image
    from .datagen import category_id, translating_video
    from .geometry import box_convert
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    video = translating_video(args.seed, category_id(args.category), num_frames=args.frames, speed=args.speed,
                              distractors=tuple(category_id(c) for c in args.distractor or ()))
    for k, f in enumerate(video.frames):
        Image.fromarray(f).save(out / f"{k:04d}.png")
    boxes = [[float(v) for v in box_convert(b, "xyxy", "xywh")] for b in video.boxes]
    (out / "gt.json").write_text(json.dumps({"category": args.category, "boxes": boxes}, indent=1))
    print(",".join(f"{v:g}" for v in boxes[0]))


def cmd_ablate(args):
    from . import experiments
    base = _load_cfg(args)
    results = Path(args.results) if args.results else experiments.RESULTS_DIR
    names = args.variant or list(experiments.VARIANTS)
    for n in names:
        if n not in experiments.VARIANTS:
            raise ValueError(f"unknown variant {n!r}; choose from {sorted(experiments.VARIANTS)}")
    summary = experiments.run_all(names, args.seeds, base, results, args.cache_dir)
    _write_json(summary, None)


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="refdet", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_text, config=True):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.set_defaults(func=fn)
        if config:
            sp.add_argument("--config", help="YAML or JSON config (defaults when omitted)")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                            help="override one config value, e.g. loss.temperature=1 (repeatable)")
        return sp

    sp = add("gen-data", cmd_gen_data, "write the synthetic train/test splits and reference sets")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--seed", type=int, help="dataset seed (overrides data.seed)")

    sp = add("gen-pseudo", cmd_gen_pseudo, "discover pseudo boxes on the training split")
    sp.add_argument("--data", required=True, help="dataset directory from gen-data (or a split directory)")
    sp.add_argument("--out", required=True, help="pseudo-box JSON to write")
    sp.add_argument("--n", type=int, help="objects per image for maskcut (default 3)")
    sp.add_argument("--weak", action="store_true",
                    help="use ground-truth boxes without categories instead of maskcut")

    sp = add("embed", cmd_embed, "embed every pseudo box into a binary cache")
    sp.add_argument("--data", required=True)
    sp.add_argument("--pseudo", required=True, help="pseudo-box JSON")
    sp.add_argument("--out", required=True, help="cache file (.rfcd)")

    sp = add("train", cmd_train, "train the detector")
    sp.add_argument("--pseudo", required=True)
    sp.add_argument("--cache", required=True, help="embedding cache from embed")
    sp.add_argument("--out", required=True, help="checkpoint directory")
    sp.add_argument("--data", help="dataset directory (defaults to the one recorded in the pseudo JSON)")
    sp.add_argument("--seed", type=int, help="training seed")
    sp.add_argument("--iterations", type=int, help="override train.iterations")

    sp = add("self-train", cmd_self_train, "refine pseudo boxes with a trained detector", config=False)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="refined pseudo-box JSON")
    sp.add_argument("--gamma", type=float, default=0.9, help="keep detections with confidence above this")

    sp = add("infer", cmd_infer, "detect objects in one image")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--reference", action="append",
                    help="reference crop (repeatable); omit for category-agnostic output")
    sp.add_argument("--sim-threshold", type=float, default=0.3)
    sp.add_argument("--score-threshold", type=float, help="foreground threshold (default from config)")
    sp.add_argument("--image-id", type=int, default=0)
    sp.add_argument("--out", help="predictions JSON (standard output when omitted)")

    sp = add("eval", cmd_eval, "category-aware metrics over the reference sets")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True, help="dataset directory or test split")
    sp.add_argument("--refs", required=True, help="sets.json from gen-data")
    sp.add_argument("--out", help="report JSON (standard output when omitted)")
    sp.add_argument("--csv", help="optional CSV report")

    sp = add("track", cmd_track, "follow one object through a directory of frames")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--frames", required=True, help="directory of PNG frames, sorted by name")
    sp.add_argument("--box", required=True, help="first-frame box as x,y,w,h")
    sp.add_argument("--out", help="per-frame JSON (standard output when omitted)")

    sp = add("gen-video", cmd_gen_video, "write a synthetic tracking video", config=False)
    sp.add_argument("--out", required=True)
    sp.add_argument("--category", default="red_star")
    sp.add_argument("--distractor", action="append", help="static distractor category (repeatable)")
    sp.add_argument("--frames", type=int, default=60)
    sp.add_argument("--speed", type=float, default=5.0)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("ablate", cmd_ablate, "train and evaluate the ablation grid (results are cached)")
    sp.add_argument("--variant", action="append", help="variant name (repeatable; default all)")
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    sp.add_argument("--results", help="results directory (default: the repository's results/)")
    sp.add_argument("--cache-dir", help="where training sets are memoised")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"refdet {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
