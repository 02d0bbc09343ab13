"""Flat dotted-key configuration: defaults, file parsing, flag overrides.

Config files are plain text, one `key=value` per line, `#` comments. Flags
(`--set key=value`) override file values which override defaults. Unknown
keys are rejected. The effective configuration is echoed into every output
directory as part of the run manifest.
"""

from __future__ import annotations

from .encoder import EncoderConfig
from .errors import ConfigError
from .grounding import HeadConfig
from .model import ModelConfig
from .splitter import COMPOSITION_TYPES, SplitConfig
from .trainer import TrainConfig
from .world import WorldConfig

DEFAULTS: dict[str, object] = {
    "seed": 0,
    # encoder
    "encoder.d": 32,
    "encoder.m_layers": 2,
    "encoder.event_layers": 2,
    "encoder.n_p": 4,
    "encoder.residual": True,
    # ablations
    "ablation.enable_scl": True,
    "ablation.enable_vcl": True,
    "ablation.enable_hsa": True,
    "ablation.disable_vcc": False,
    # grounding head
    "head.heads": 4,
    "head.mlp_hidden": 0,
    # training
    "train.epochs": 40,
    "train.batch_size": 32,
    "train.lr": 2e-3,
    "train.kl_weight": 1.0,
    "train.precision": "f64",
    "train.clip_norm": 5.0,
    "train.checkpoint_every": 0,
    "train.divergence_threshold": 1e6,
    # synthetic world
    "world.n_actions": 8,
    "world.n_objects": 8,
    "world.n_shared": 6,
    "world.d_emb": 16,
    "world.d_frame": 16,
    "world.t_min": 4,
    "world.t_max": 8,
    "world.k_frames": 3,
    "world.noise_sigma": 0.1,
    "world.pos_scale": 1.0,
    "world.p_reverse": 0.6,
    "world.max_run": 3,
    "world.label_noise": 0.0,
    "world.n_train": 500,
    "world.n_seen_test": 100,
    "world.n_novel_test": 100,
    "world.heldout_count": 6,
    "world.seg_seconds": 2.0,
    "world.annotated_queries": 1000,
    # splitter quotas
    "split.verb-noun_quota": 4,
    "split.adj-noun_quota": 4,
    "split.noun-noun_quota": 4,
    "split.verb-adv_quota": 4,
    "split.prep-noun_quota": 4,
    "split.novel_word_count": 3,
    # execution
    "parallel.workers": 0,      # 0 = available cores (eval/gen); training is single-writer
}


def _convert(key: str, raw: str):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from e
    return raw


def parse_assignment(line: str) -> tuple[str, str]:
    if "=" not in line:
        raise ConfigError(f"expected key=value, got {line!r}")
    key, _, raw = line.partition("=")
    return key.strip(), raw.strip()


def load_config(path: str | None = None, overrides: list[str] | None = None,
                seed: int | None = None) -> dict[str, object]:
    """Effective configuration: defaults < file < --set overrides < --seed."""
    cfg = dict(DEFAULTS)

    def apply(key: str, raw: str, origin: str):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r} ({origin})")
        cfg[key] = _convert(key, raw)

    if path:
        with open(path) as f:
            for lineno, line in enumerate(f, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, raw = parse_assignment(line)
                apply(key, raw, f"{path}:{lineno}")
    for item in overrides or []:
        key, raw = parse_assignment(item)
        apply(key, raw, "--set")
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def model_config(cfg: dict, emb_dim: int, frame_dim: int, seed: int | None = None,
                 disable_vcc: bool | None = None) -> ModelConfig:
    encoder = EncoderConfig(
        d=cfg["encoder.d"],
        m_layers=cfg["encoder.m_layers"],
        event_layers=cfg["encoder.event_layers"],
        n_p=cfg["encoder.n_p"],
        residual=cfg["encoder.residual"],
        enable_scl=cfg["ablation.enable_scl"],
        enable_vcl=cfg["ablation.enable_vcl"],
        enable_hsa=cfg["ablation.enable_hsa"],
    )
    head = HeadConfig(heads=cfg["head.heads"], mlp_hidden=cfg["head.mlp_hidden"])
    return ModelConfig(
        encoder=encoder,
        head=head,
        disable_vcc=cfg["ablation.disable_vcc"] if disable_vcc is None else disable_vcc,
        emb_dim=emb_dim,
        frame_dim=frame_dim,
        seed=cfg["seed"] if seed is None else seed,
        precision=cfg["train.precision"],
    )


def train_config(cfg: dict, seed: int | None = None) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        lr=cfg["train.lr"],
        kl_weight=cfg["train.kl_weight"],
        seed=cfg["seed"] if seed is None else seed,
        precision=cfg["train.precision"],
        clip_norm=cfg["train.clip_norm"],
        checkpoint_every=cfg["train.checkpoint_every"],
        divergence_threshold=cfg["train.divergence_threshold"],
    )


def world_config(cfg: dict, seed: int | None = None) -> WorldConfig:
    return WorldConfig(
        n_actions=cfg["world.n_actions"],
        n_objects=cfg["world.n_objects"],
        n_shared=cfg["world.n_shared"],
        d_emb=cfg["world.d_emb"],
        d_frame=cfg["world.d_frame"],
        t_min=cfg["world.t_min"],
        t_max=cfg["world.t_max"],
        k_frames=cfg["world.k_frames"],
        noise_sigma=cfg["world.noise_sigma"],
        pos_scale=cfg["world.pos_scale"],
        p_reverse=cfg["world.p_reverse"],
        max_run=cfg["world.max_run"],
        label_noise=cfg["world.label_noise"],
        n_train=cfg["world.n_train"],
        n_seen_test=cfg["world.n_seen_test"],
        n_novel_test=cfg["world.n_novel_test"],
        heldout_count=cfg["world.heldout_count"],
        seg_seconds=cfg["world.seg_seconds"],
        seed=cfg["seed"] if seed is None else seed,
    )


def split_config(cfg: dict, drop_query_ids: set[str] | None = None) -> SplitConfig:
    return SplitConfig(
        comp_quota={c: cfg[f"split.{c}_quota"] for c in COMPOSITION_TYPES},
        novel_word_count=cfg["split.novel_word_count"],
        drop_query_ids=drop_query_ids or set(),
    )
