"""Data augmentation module: normalise, replicate, drop APs, infill with noise.

Images carry a leading batch axis internally; the public functions accept a
single ``(A, 3)`` fingerprint or a batch ``(B, A, 3)`` and return the
matching ``(R, R, 3)`` or ``(B, R, R, 3)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from vital import kernels
from vital.errors import ConfigError, DataError, ShapeError
from vital.fingerprints import RSSI_MAX, RSSI_MIN


@dataclass
class DamConfig:
    image_size: int = 206
    dropout_prob: float = 0.1
    infill_mean: float = 0.0
    infill_sigma: float = 0.05
    mode: str = "train"
    seed: int = 0
    # "pixel": independent per AP per row; "column": one draw per AP shared by all augmented rows
    dropout_granularity: str = "pixel"

    def __post_init__(self):
        if self.image_size < 1:
            raise ConfigError("image_size must be positive")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ConfigError("dropout_prob must lie in [0, 1)")
        if self.infill_sigma < 0 or not np.isfinite(self.infill_sigma) or not np.isfinite(self.infill_mean):
            raise ConfigError("infill parameters must be finite with sigma >= 0")
        if self.mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got {self.mode!r}")
        if self.dropout_granularity not in ("pixel", "column"):
            raise ConfigError(f"unknown dropout granularity {self.dropout_granularity!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def normalize(img_db: np.ndarray) -> np.ndarray:
    """Map dB in [-100, 0] affinely onto [0, 1]."""
    img_db = np.asarray(img_db, dtype=np.float64)
    if np.any(~np.isfinite(img_db)) or np.any(img_db < RSSI_MIN) or np.any(img_db > RSSI_MAX):
        raise DataError("normalize expects RSSI values in [-100, 0] dB")
    return (img_db - RSSI_MIN) / (RSSI_MAX - RSSI_MIN)


def replicate(img: np.ndarray, image_size: int) -> np.ndarray:
    """Pad the AP axis with zeros to ``image_size`` and stack as identical rows."""
    img = np.asarray(img)
    single = img.ndim == 2
    batch = img[None] if single else img
    if batch.ndim != 3:
        raise ShapeError(f"expected (A, C) or (B, A, C) image, got {img.shape}")
    b, a, c = batch.shape
    if a > image_size:
        raise ShapeError(f"{a} APs do not fit in an image of size {image_size}")
    row = np.zeros((b, image_size, c), dtype=batch.dtype)
    row[:, :a] = batch
    out = np.broadcast_to(row[:, None], (b, image_size, image_size, c)).copy()
    return out[0] if single else out


def dropout_and_infill(img2d: np.ndarray, config: DamConfig, rng: np.random.Generator,
                       n_valid: int | None = None) -> np.ndarray:
    """Augment rows ``1..R-1``; row 0 keeps the original features.

    Each non-padding pixel of an augmented row is dropped with probability
    ``dropout_prob`` and all of its channels replaced by independent
    ``Normal(infill_mean, infill_sigma)`` draws clamped to [0, 1].  ``n_valid``
    is the number of real (non-padding) APs; the default treats every column
    as real.
    """
    single = img2d.ndim == 3
    batch = img2d[None] if single else img2d
    b, r, cols, ch = batch.shape
    n_valid = cols if n_valid is None else int(n_valid)
    if config.dropout_prob == 0.0:
        return img2d.copy()
    if config.dropout_granularity == "column":
        u = np.broadcast_to(rng.random((b, 1, cols)), (b, r, cols))
    else:
        u = rng.random((b, r, cols))
    n_drop = int(np.count_nonzero(u[:, 1:, :n_valid] < config.dropout_prob))
    noise = rng.standard_normal((n_drop, ch))
    out = kernels.dropout_infill(
        batch, u, noise, config.dropout_prob, config.infill_mean, config.infill_sigma, n_valid,
    )
    return out[0] if single else out


def apply(img1d_db: np.ndarray, config: DamConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Full pipeline: normalise, replicate, then (train mode only) augment."""
    img = np.asarray(img1d_db, dtype=np.float64)
    n_valid = img.shape[-2]
    out = replicate(normalize(img), config.image_size)
    if config.mode == "train":
        if rng is None:
            rng = np.random.default_rng(config.seed)
        out = dropout_and_infill(out, config, rng, n_valid=n_valid)
    return out
