"""Named configuration bundles.

``default`` is the full-size setup (R=206, P=20, four buildings with up to
206 APs).  ``desk`` is the scaled setup that trains in minutes on one CPU:
R=64, P=8, D=64, five heads of width 16, one encoder block, and building AP
counts that fit a 64-pixel row.
"""
from __future__ import annotations

from vital.dam import DamConfig
from vital.errors import ConfigError
from vital.synthgen import GenConfig
from vital.training import TrainConfig
from vital.vit import VitConfig

DESK_IMAGE_SIZE = 64
DESK_PATCH_SIZE = 8
DESK_EPOCHS = 20


def desk_vit_config(**overrides) -> VitConfig:
    kw = dict(image_size=DESK_IMAGE_SIZE, patch_size=DESK_PATCH_SIZE, embed_dim=64,
              num_heads=5, head_dim=16, num_blocks=1)
    kw.update(overrides)
    return VitConfig(**kw)


def desk_train_config(seed: int = 0, **overrides) -> TrainConfig:
    kw = dict(epochs=DESK_EPOCHS, seed=seed, dam=DamConfig(image_size=DESK_IMAGE_SIZE))
    kw.update(overrides)
    return TrainConfig(**kw)


def desk_gen_config(seed: int = 0) -> GenConfig:
    return GenConfig.desk(seed)


PRESETS = {
    "default": {"gen": GenConfig, "vit": VitConfig, "train": TrainConfig},
    "desk": {"gen": desk_gen_config, "vit": desk_vit_config, "train": desk_train_config},
}


def preset_dicts(name: str) -> dict[str, dict]:
    """Plain-dict form of a preset, the base that run configs are merged onto."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    out = {section: factory().to_dict() for section, factory in PRESETS[name].items()}
    # leave the head to follow num_classes unless a config sets it explicitly
    out["vit"]["head_dims"] = None
    return out
