"""One configuration schema for every pipeline stage, loadable from YAML or JSON."""
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .datagen import DEFAULT_HELD_OUT


@dataclass
class DataConfig:
    seed: int = 0  # dataset seed, independent of the training seed
    tile_size: int = 64
    num_mosaics: int = 2000
    num_test_mosaics: int = 300
    num_reference_sets: int = 4
    held_out: tuple = DEFAULT_HELD_OUT
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 14
    max_size: int = 26


@dataclass
class PseudoConfig:
    n_objects: int = 3
    patch_size: int = 4
    affinity_tau: float = 0.15
    min_patches: int = 2
    source: str = "maskcut"  # or "weak": ground-truth boxes without categories
    box_ratio: float = 1.0
    noise_ratio: float = 0.0


@dataclass
class LossConfig:
    mode: str = "fs"  # fs | cos | hung
    alpha: float = 2.0
    beta: float = 4.0
    tau: float = 0.0
    temperature: float = 10.0
    top_k: int = 100
    lambda_fs: float = 1.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    fs_reference: str = "all"  # "sample": one random pseudo box per image; "all": average over every box


@dataclass
class ModelConfig:
    num_queries: int = 25
    embed_dim: int = 64
    hidden_dim: int = 64
    decoder_layers: int = 3
    nheads: int = 4
    ffn_dim: int = 128


@dataclass
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 8
    lr: float = 5e-4
    weight_decay: float = 1e-4
    grad_clip: float = 0.1
    ema_decay: float = 0.9999
    ema_warmup: int = 2000
    log_every: int = 100
    gamma: float = 0.9  # self-training confidence filter


@dataclass
class InferenceConfig:
    score_threshold: float = 0.5
    sim_threshold: float = 0.3
    eval_score_threshold: float = 0.0
    score_mode: str = "sim"  # sim | sim_x_conf
    nms_iou: float = 0.0  # 0 disables NMS


@dataclass
class Config:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["data"]["held_out"] = list(self.data.held_out)
        return d

    def digest(self, *sections):
        """Stable short hash of the named sections (all when none given)."""
        d = self.to_dict()
        if sections:
            d = {k: d[k] for k in sections}
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **overrides):
        """Copy with dotted overrides, e.g. ``{"loss.temperature": 1.0}``."""
        d = self.to_dict()
        for key, value in overrides.items():
            _set_dotted(d, key, value)
        return from_dict(d)


def _set_dotted(d, key, value):
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise KeyError(f"unknown config section {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise KeyError(f"unknown config key {key!r}")
    node[parts[-1]] = value


_SECTIONS = {
    "data": DataConfig, "pseudo": PseudoConfig, "loss": LossConfig,
    "model": ModelConfig, "train": TrainConfig, "inference": InferenceConfig,
}


def from_dict(d):
    d = dict(d or {})
    unknown = set(d) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise KeyError(f"unknown config sections: {sorted(unknown)}")
    kwargs = {"seed": int(d.get("seed", 0))}
    for name, cls in _SECTIONS.items():
        sub = dict(d.get(name) or {})
        names = {f.name for f in dataclasses.fields(cls)}
        bad = set(sub) - names
        if bad:
            raise KeyError(f"unknown keys in [{name}]: {sorted(bad)}")
        if "held_out" in sub:
            sub["held_out"] = tuple(sub["held_out"])
        kwargs[name] = cls(**sub)
    return Config(**kwargs)


def load_config(path=None):
    """Read a YAML or JSON config; ``None`` gives the defaults."""
    if path is None:
        return Config()
    text = Path(path).read_text()
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    return from_dict(data)


def save_config(config, path):
    path = Path(path)
    d = config.to_dict()
    if path.suffix == ".json":
        path.write_text(json.dumps(d, indent=2, sort_keys=True))
    else:
        path.write_text(yaml.safe_dump(d, sort_keys=True))
