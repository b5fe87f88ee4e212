"""A small query-based detector and its training step.

Layout: strided conv backbone -> one transformer encoder layer -> top-N
query selection from encoder tokens -> ``decoder_layers`` decoder layers with
iterative box refinement. Every layer emits a foreground logit, a normalised
cxcywh box and a content vector in the reference embedding space.
"""
import copy
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .assignment import MatchIndexPairs, QueryPrediction, cost_matrix, hungarian_match
from .losses import (FSLossConfig, LossBreakdown, cosine_loss, expected_fs_loss, filter_queries,
                     fs_loss,
                     hungarian_detection_loss, predicted_similarity, pseudo_similarity_targets,
                     remap_matches)

log = logging.getLogger(__name__)

ROI_GRID = 4
STRIDE = 8
CHECKPOINT_FORMAT = "refdet-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class DetectorConfig:
    num_queries: int = 25
    embed_dim: int = 64
    hidden_dim: int = 64
    decoder_layers: int = 3
    image_size: int = 128
    ema_decay: float = 0.9999
    nheads: int = 4
    ffn_dim: int = 128

    def __post_init__(self):
        if self.image_size % STRIDE:
            raise ValueError(f"image_size must be a multiple of {STRIDE}")
        grid = (self.image_size // STRIDE) ** 2
        if not 1 <= self.num_queries <= grid:
            raise ValueError(f"num_queries must lie in [1, {grid}]")
        if self.hidden_dim % self.nheads:
            raise ValueError("hidden_dim must be divisible by nheads")
        if self.decoder_layers < 1:
            raise ValueError("need at least one decoder layer")


def inverse_sigmoid(x, eps=1e-5):
    x = x.clamp(eps, 1 - eps)
    return torch.log(x / (1 - x))


class MLP(nn.Module):
    def __init__(self, dims):
        super().__init__()
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


def _conv(cin, cout, stride):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.GroupNorm(8, cout), nn.ReLU())


class DecoderLayer(nn.Module):
    def __init__(self, d, nheads, ffn):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d, nheads, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(d, nheads, batch_first=True)
        self.ffn = MLP([d, ffn, d])
        self.norms = nn.ModuleList(nn.LayerNorm(d) for _ in range(3))

    def forward(self, tgt, qpos, memory, mpos):
        q = tgt + qpos
        tgt = self.norms[0](tgt + self.self_attn(q, q, tgt, need_weights=False)[0])
        tgt = self.norms[1](tgt + self.cross_attn(tgt + qpos, memory + mpos, memory, need_weights=False)[0])
        return self.norms[2](tgt + self.ffn(tgt))


class Detector(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        d = config.hidden_dim
        self.grid = config.image_size // STRIDE
        self.backbone = nn.Sequential(_conv(3, 32, 2), _conv(32, 64, 2), _conv(64, 64, 2),
                                      nn.Conv2d(64, d, 1))
        self.pos = nn.Parameter(torch.randn(self.grid * self.grid, d) * 0.02)
        self.encoder = nn.TransformerEncoderLayer(d, config.nheads, config.ffn_dim, dropout=0.0,
                                                  batch_first=True)
        self.enc_proj = nn.Sequential(nn.Linear(d, d), nn.LayerNorm(d))
        self.enc_score = nn.Linear(d, 1)
        self.enc_box = MLP([d, d, 4])
        self.enc_content = nn.Linear(d, config.embed_dim)
        self.query_pos = MLP([4, 2 * d, d])
        L = config.decoder_layers
        self.layers = nn.ModuleList(DecoderLayer(d, config.nheads, config.ffn_dim) for _ in range(L))
        self.score_heads = nn.ModuleList(nn.Linear(d, 1) for _ in range(L))
        self.box_heads = nn.ModuleList(MLP([d, d, 4]) for _ in range(L))
        self.content_heads = nn.ModuleList(nn.Linear(d, config.embed_dim) for _ in range(L))
        # appearance inside each predicted box, read from the stride-4 feature map
        self.roi_head = MLP([64 * ROI_GRID * ROI_GRID, 2 * d, config.embed_dim])
        g = self.grid
        ys, xs = torch.meshgrid(torch.arange(g), torch.arange(g), indexing="ij")
        anchors = torch.stack([(xs + 0.5) / g, (ys + 0.5) / g,
                               torch.full_like(xs, 0.15, dtype=torch.float32),
                               torch.full_like(xs, 0.15, dtype=torch.float32)], dim=-1)
        self.register_buffer("anchors", inverse_sigmoid(anchors.reshape(-1, 4).float()), persistent=False)
        prior = -math.log((1 - 0.01) / 0.01)
        for head in list(self.score_heads) + [self.enc_score]:
            nn.init.constant_(head.bias, prior)
        for mlp in list(self.box_heads) + [self.enc_box]:
            nn.init.zeros_(mlp.layers[-1].weight)
            nn.init.zeros_(mlp.layers[-1].bias)

    def _prepare(self, images):
        if isinstance(images, np.ndarray):
            images = torch.from_numpy(np.array(images, copy=True))
        if images.ndim == 3:
            images = images[None]
        s = self.config.image_size
        if images.ndim != 4 or tuple(images.shape[1:]) != (s, s, 3):
            raise ValueError(f"expected images of shape (B, {s}, {s}, 3), got {tuple(images.shape)}")
        return images.permute(0, 3, 1, 2).float() / 255.0 - 0.5

    def forward(self, images):
        """Per-layer outputs. Index -1 of every stacked tensor is the final layer.

        Returns a dict with ``logits`` (L, B, N), ``boxes`` (L, B, N, 4) and
        ``contents`` (L, B, N, D) for the decoder layers, plus ``enc_*`` for
        the selected encoder proposals.
        """
        x = self._prepare(images)
        fine = self.backbone[1](self.backbone[0](x))  # B, 64, H/4, W/4
        feat = self.backbone[3](self.backbone[2](fine)).flatten(2).transpose(1, 2)  # B, T, d
        memory = self.encoder(feat + self.pos)
        enc = self.enc_proj(memory)
        enc_logits = self.enc_score(enc).squeeze(-1)
        enc_boxes_unact = self.enc_box(enc) + self.anchors
        N = self.config.num_queries
        top = torch.topk(enc_logits, N, dim=1).indices
        gather = lambda t: torch.gather(t, 1, top[..., None].expand(-1, -1, t.shape[-1]))
        sel = gather(enc)
        ref_unact = gather(enc_boxes_unact)
        out = {
            "enc_logits": torch.gather(enc_logits, 1, top),
            "enc_boxes": ref_unact.sigmoid(),
            "enc_contents": self.enc_content(sel) + self._roi_content(fine, ref_unact.detach().sigmoid()),
        }
        tgt = sel.detach()
        ref = ref_unact.detach().sigmoid()
        logits, boxes, contents = [], [], []
        for layer, sh, bh, ch in zip(self.layers, self.score_heads, self.box_heads, self.content_heads):
            tgt = layer(tgt, self.query_pos(ref), memory, self.pos)
            box = (bh(tgt) + inverse_sigmoid(ref)).sigmoid()
            logits.append(sh(tgt).squeeze(-1))
            boxes.append(box)
            contents.append(ch(tgt) + self._roi_content(fine, box.detach()))
            ref = box.detach()
        out["logits"] = torch.stack(logits)
        out["boxes"] = torch.stack(boxes)
        out["contents"] = torch.stack(contents)
        return out

    def _roi_content(self, fine, boxes):
        """Bilinear ROI_GRID x ROI_GRID samples of ``fine`` inside each cxcywh box, mapped to D."""
        B, N, _ = boxes.shape
        k = ROI_GRID
        steps = (torch.arange(k, dtype=boxes.dtype) + 0.5) / k - 0.5
        cx, cy, w, h = (t[..., None] for t in boxes.unbind(-1))
        gx = (cx + steps * w) * 2 - 1  # B, N, k
        gy = (cy + steps * h) * 2 - 1
        grid = torch.stack([gx[:, :, None, :].expand(B, N, k, k), gy[:, :, :, None].expand(B, N, k, k)], dim=-1)
        pooled = F.grid_sample(fine, grid.reshape(B, N * k, k, 2), align_corners=False)  # B, C, N*k, k
        pooled = pooled.reshape(B, -1, N, k * k).permute(0, 2, 1, 3).reshape(B, N, -1)
        return self.roi_head(pooled)

    @torch.no_grad()
    def predict(self, images):
        """Final-layer numpy outputs: (logits (B, N), boxes (B, N, 4), contents (B, N, D))."""
        was = self.training
        self.eval()
        out = self.forward(images)
        self.train(was)
        return (out["logits"][-1].double().numpy(), out["boxes"][-1].double().numpy(),
                out["contents"][-1].double().numpy())

    def queries(self, image):
        """The N :class:`QueryPrediction` slots for one image."""
        logits, boxes, contents = self.predict(image)
        return [QueryPrediction(contents[0, n], boxes[0, n], float(logits[0, n]))
                for n in range(self.config.num_queries)]


# ---------------------------------------------------------------------------
# EMA
# ---------------------------------------------------------------------------

@torch.no_grad()
def ema_update(ema_params, params, decay):
    """In place ``ema <- d * ema + (1 - d) * params`` for aligned tensor lists."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1], got {decay}")
    ema_params, params = list(ema_params), list(params)
    if len(ema_params) != len(params):
        raise ValueError("EMA and model parameter lists differ in length")
    for e, p in zip(ema_params, params):
        if e.shape != p.shape:
            raise ValueError(f"EMA shape {tuple(e.shape)} != parameter shape {tuple(p.shape)}")
        e.mul_(decay).add_(p.detach(), alpha=1.0 - decay)
    return ema_params


def warmup_decay(decay, step, warmup):
    """Decay ramp used during training so early EMA weights track the model."""
    if warmup <= 0:
        return decay
    return decay * (1.0 - math.exp(-step / warmup))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainBatch:
    """Images (B, H, W, 3) uint8 plus per-image pseudo annotations.

    ``boxes[b]`` is (M_b, 4) normalised cxcywh and ``embeddings[b]`` is (M_b, D).
    """

    images: np.ndarray
    boxes: list
    embeddings: list
    image_ids: list


class NonFiniteLoss(RuntimeError):
    pass


def _match_batch(logits_boxes_contents, boxes, embeddings, loss_cfg):
    """Hungarian matches for every image at one decoder level."""
    _, pred_boxes, contents = logits_boxes_contents
    pb = pred_boxes.detach().double().numpy()
    pc = contents.detach().double().numpy()
    matches = []
    for b in range(pb.shape[0]):
        if len(boxes[b]) == 0:
            matches.append(MatchIndexPairs([]))
            continue
        cost = cost_matrix(boxes[b], embeddings[b], pb[b], pc[b], loss_cfg.temperature,
                           loss_cfg.w_l1, loss_cfg.w_giou)
        matches.append(hungarian_match(cost))
    return matches


def _batched_hungarian(level, boxes, matches, loss_cfg):
    logits, pred_boxes, _ = level
    B, N = logits.shape
    ann, pairs, off = [], [], 0
    for b in range(B):
        ann.append(np.asarray(boxes[b], dtype=np.float32).reshape(-1, 4))
        pairs.extend((m + off, n + b * N) for m, n in matches[b].pairs)
        off += len(boxes[b])
    ann = torch.from_numpy(np.concatenate(ann)) if off else torch.zeros((0, 4))
    return hungarian_detection_loss(ann, pred_boxes.reshape(B * N, 4), logits.reshape(B * N),
                                     MatchIndexPairs(pairs), loss_cfg.w_l1, loss_cfg.w_giou,
                                     loss_cfg.focal_alpha, loss_cfg.focal_gamma)


def detection_losses(out, batch, ref_indices, loss_cfg):
    """Loss terms for one forward pass.

    Returns ``(total tensor, LossBreakdown, final-layer matches)``. The
    Hungarian term sums over encoder proposals and every decoder layer; the
    similarity terms use the final layer only.
    """
    levels = [(out["enc_logits"], out["enc_boxes"], out["enc_contents"])]
    levels += [(out["logits"][l], out["boxes"][l], out["contents"][l]) for l in range(out["logits"].shape[0])]
    hung = 0.0
    final_matches = None
    for level in levels:
        matches = _match_batch(level, batch.boxes, batch.embeddings, loss_cfg)
        hung = hung + _batched_hungarian(level, batch.boxes, matches, loss_cfg)
        final_matches = matches
    logits, _, contents = levels[-1]
    fs_cfg = FSLossConfig(loss_cfg.alpha, loss_cfg.beta, loss_cfg.tau, loss_cfg.temperature,
                          loss_cfg.top_k, loss_cfg.lambda_fs)
    fs_terms, cos_terms = [], []
    for b, matches in enumerate(final_matches):
        emb = batch.embeddings[b]
        if len(emb) == 0:
            continue
        if loss_cfg.mode == "fs":
            keep = filter_queries(logits[b], loss_cfg.top_k, sorted(matches.matched_queries))
            sub = remap_matches(matches, keep)
            if loss_cfg.fs_reference == "all":
                fs_terms.append(expected_fs_loss(torch.as_tensor(emb, dtype=contents.dtype), contents[b, keep],
                                                 sub, fs_cfg))
                continue
            if loss_cfg.fs_reference != "sample":
                raise ValueError(f"unknown fs_reference {loss_cfg.fs_reference!r}")
            m_ref = ref_indices[b]
            p_hat = predicted_similarity(torch.as_tensor(emb[m_ref], dtype=contents.dtype),
                                         contents[b, keep], loss_cfg.temperature)
            p = pseudo_similarity_targets(m_ref, emb, sub, len(keep), loss_cfg.tau, loss_cfg.temperature)
            fs_terms.append(fs_loss(p_hat, p.to(p_hat.dtype), sub, m_ref, fs_cfg))
        elif loss_cfg.mode == "cos":
            cos_terms.append(cosine_loss(torch.as_tensor(emb, dtype=contents.dtype), contents[b], matches,
                                         loss_cfg.temperature))
    zero = logits.sum() * 0.0
    fs = torch.stack(fs_terms).mean() if fs_terms else zero
    cos = torch.stack(cos_terms).mean() if cos_terms else zero
    if loss_cfg.mode == "fs":
        total = hung + loss_cfg.lambda_fs * fs
    elif loss_cfg.mode == "cos":
        total = hung + loss_cfg.lambda_fs * cos
    elif loss_cfg.mode == "hung":
        total = hung
    else:
        raise ValueError(f"unknown loss mode {loss_cfg.mode!r}")
    parts = LossBreakdown(*(float(t.detach()) if torch.is_tensor(t) else float(t) for t in (hung, fs, cos, total)))
    return total, parts, final_matches


class Trainer:
    """Owns the model, its EMA shadow, the optimiser and the iteration count."""

    def __init__(self, config, lr=5e-4, weight_decay=1e-4, grad_clip=0.1, ema_warmup=2000, seed=0):
        torch.manual_seed(seed)
        self.config = config
        self.model = Detector(config)
        self.ema = copy.deepcopy(self.model)
        for p in self.ema.parameters():
            p.requires_grad_(False)
        self.optimizer = torch.optim.AdamW(self.model.parameters(), lr=lr, weight_decay=weight_decay)
        self.grad_clip = grad_clip
        self.ema_warmup = ema_warmup
        self.iteration = 0

    def train_step(self, batch, ref_indices, loss_cfg):
        self.model.train()
        out = self.model(batch.images)
        total, parts, _ = detection_losses(out, batch, ref_indices, loss_cfg)
        if not torch.isfinite(total):
            raise NonFiniteLoss(f"non-finite loss {parts.as_dict()} at iteration {self.iteration} "
                                f"for image ids {list(batch.image_ids)}")
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        if self.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.grad_clip)
        self.optimizer.step()
        self.iteration += 1
        d = warmup_decay(self.config.ema_decay, self.iteration, self.ema_warmup)
        ema_update(self.ema.parameters(), self.model.parameters(), d)
        return parts


# ---------------------------------------------------------------------------
# checkpoints: a zip holding manifest.json plus one raw little-endian float32
# blob per tensor under params/ and ema/
# ---------------------------------------------------------------------------

def save_checkpoint(path, trainer, extra=None):
    model_sd = trainer.model.state_dict()
    ema_sd = trainer.ema.state_dict()
    tensors = []
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for group, sd in (("params", model_sd), ("ema", ema_sd)):
            for name, t in sd.items():
                arr = t.detach().cpu().numpy().astype("<f4")
                fname = f"{group}/{name}.f32"
                zf.writestr(fname, arr.tobytes())
                tensors.append({"group": group, "name": name, "shape": list(arr.shape), "file": fname})
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(trainer.config),
            "iteration": trainer.iteration,
            "tensors": tensors,
            "extra": extra or {},
        }
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path):
    """Rebuild a :class:`Trainer` (optimiser state is not stored) and return
    ``(trainer, extra)``."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a detector checkpoint")
        trainer = Trainer(DetectorConfig(**manifest["config"]))
        sds = {"params": {}, "ema": {}}
        for entry in manifest["tensors"]:
            arr = np.frombuffer(zf.read(entry["file"]), dtype="<f4").reshape(entry["shape"])
            sds[entry["group"]][entry["name"]] = torch.from_numpy(arr.copy())
    trainer.model.load_state_dict(sds["params"])
    trainer.ema.load_state_dict(sds["ema"])
    trainer.iteration = int(manifest["iteration"])
    return trainer, manifest.get("extra", {})
