"""Training loop over a :class:`~refdet.dataset.TrainingSet`."""
import json
import logging
import time

import numpy as np
import torch

from .datagen import sample_reference
from .detector import DetectorConfig, TrainBatch, Trainer
from .geometry import box_convert

log = logging.getLogger(__name__)


def detector_config(config, image_size):
    m = config.model
    return DetectorConfig(num_queries=m.num_queries, embed_dim=m.embed_dim, hidden_dim=m.hidden_dim,
                          decoder_layers=m.decoder_layers, image_size=image_size,
                          ema_decay=config.train.ema_decay, nheads=m.nheads, ffn_dim=m.ffn_dim)


def make_batch(ts, indices):
    size = (ts.image_size, ts.image_size)
    boxes = [box_convert(ts.pseudo_boxes[i], "xyxy", "cxcywh_n", size).astype(np.float32)
             if len(ts.pseudo_boxes[i]) else np.zeros((0, 4), np.float32) for i in indices]
    return TrainBatch(ts.images[indices], boxes, [ts.embeddings[i] for i in indices],
                      [int(ts.image_ids[i]) for i in indices])


def train(config, ts, log_path=None, iterations=None, trainer=None):
    """Train a detector on ``ts`` and return the :class:`Trainer`.

    Batches and reference indices are drawn from a generator seeded by
    ``config.seed``; ``log_path`` receives one JSON line per logged step.
    """
    torch.set_num_threads(1)
    tc = config.train
    iterations = tc.iterations if iterations is None else iterations
    if trainer is None:
        trainer = Trainer(detector_config(config, ts.image_size), lr=tc.lr, weight_decay=tc.weight_decay,
                          grad_clip=tc.grad_clip, ema_warmup=tc.ema_warmup, seed=config.seed)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
    logf = open(log_path, "a") if log_path else None
    t0 = time.time()
    running = []
    try:
        for it in range(iterations):
            idx = rng.integers(0, len(ts), size=tc.batch_size)
            batch = make_batch(ts, idx)
            refs = [sample_reference(len(b), rng) if len(b) else 0 for b in batch.boxes]
            parts = trainer.train_step(batch, refs, config.loss)
            running.append(parts.total)
            if (it + 1) % tc.log_every == 0 or it == 0 or it == iterations - 1:
                rec = {"iteration": trainer.iteration, "elapsed": round(time.time() - t0, 2),
                       "mean_total": float(np.mean(running)), **parts.as_dict()}
                running = []
                log.info("iter %d total %.4f hung %.4f fs %.4f cos %.4f", rec["iteration"], parts.total,
                         parts.hungarian, parts.fs, parts.cosine)
                if logf:
                    logf.write(json.dumps(rec) + "\n")
                    logf.flush()
    finally:
        if logf:
            logf.close()
    return trainer
