"""Synthetic multi-device RSSI fingerprints along indoor survey paths.

Signal model: log-distance path loss with a static per-(AP, RP) shadowing
term, a per-scan temporal jitter, and a per-device affine skew followed by a
detection threshold and random misses.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from vital.errors import ConfigError
from vital.fingerprints import (
    NOT_VISIBLE,
    RSSI_MAX,
    RSSI_MIN,
    FingerprintDataset,
    FingerprintRecord,
    ReferencePoint,
)

# stream tags for labelled RNG derivation
_GEOMETRY, _SHADOWING, _SCANS = 0, 1, 2


@dataclass
class BuildingSpec:
    building_id: int
    path_length: float = 62.0
    num_aps: int = 120
    ap_positions: list[tuple[float, float]] | None = None
    pathloss_exponent: float = 2.5
    shadowing_sigma: float = 2.0
    tx_power: float = -40.0
    ref_distance: float = 1.0
    sample_sigma: float = 1.0
    corridor_turn: float = 0.6
    margin: float = 5.0

    def __post_init__(self):
        if self.path_length < 1:
            raise ConfigError("path_length must be at least 1 m")
        if self.num_aps < 1:
            raise ConfigError("num_aps must be positive")
        if self.shadowing_sigma < 0 or self.sample_sigma < 0:
            raise ConfigError("noise sigmas must be non-negative")
        if self.ap_positions is not None:
            self.ap_positions = [tuple(map(float, p)) for p in self.ap_positions]
            if len(self.ap_positions) != self.num_aps:
                raise ConfigError("ap_positions length must equal num_aps")


@dataclass
class DeviceProfile:
    device_id: str
    gain_offset: float = 0.0
    scale: float = 1.0
    detection_threshold: float = -100.0
    extra_miss_prob: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigError(f"{self.device_id}: scale must be positive")
        if not RSSI_MIN <= self.detection_threshold <= RSSI_MAX:
            raise ConfigError(f"{self.device_id}: detection threshold outside [-100, 0]")
        if not 0.0 <= self.extra_miss_prob < 1.0:
            raise ConfigError(f"{self.device_id}: extra_miss_prob must lie in [0, 1)")


def default_base_profiles() -> list[DeviceProfile]:
    return [
        DeviceProfile("base0", -6.0, 0.95, -92.0, 0.05),
        DeviceProfile("base1", -3.5, 1.05, -88.0, 0.02),
        DeviceProfile("base2", -1.0, 0.90, -95.0, 0.08),
        DeviceProfile("base3", 1.5, 1.00, -85.0, 0.03),
        DeviceProfile("base4", 3.5, 1.10, -90.0, 0.06),
        DeviceProfile("base5", 6.0, 0.97, -93.0, 0.04),
    ]


def default_extended_profiles() -> list[DeviceProfile]:
    return [
        DeviceProfile("ext0", -4.5, 1.08, -86.0, 0.07),
        DeviceProfile("ext1", 2.5, 0.92, -94.0, 0.05),
        DeviceProfile("ext2", 5.0, 1.03, -89.0, 0.09),
    ]


DEFAULT_PATHS = (62.0, 71.0, 80.0, 88.0)
DEFAULT_AP_COUNTS = (120, 150, 180, 206)
DESK_AP_COUNTS = (40, 48, 56, 64)


def default_buildings(ap_counts: Sequence[int] = DEFAULT_AP_COUNTS) -> list[BuildingSpec]:
    return [BuildingSpec(i, path, n) for i, (path, n) in enumerate(zip(DEFAULT_PATHS, ap_counts))]


@dataclass
class GenConfig:
    buildings: list[BuildingSpec] = field(default_factory=default_buildings)
    base_profiles: list[DeviceProfile] = field(default_factory=default_base_profiles)
    extended_profiles: list[DeviceProfile] = field(default_factory=default_extended_profiles)
    samples_per_rp_per_device: int = 5
    seed: int = 0
    decimals: int = 2

    def __post_init__(self):
        self.buildings = [b if isinstance(b, BuildingSpec) else BuildingSpec(**b) for b in self.buildings]
        self.base_profiles = [p if isinstance(p, DeviceProfile) else DeviceProfile(**p) for p in self.base_profiles]
        self.extended_profiles = [
            p if isinstance(p, DeviceProfile) else DeviceProfile(**p) for p in self.extended_profiles
        ]
        ids = [p.device_id for p in self.profiles]
        if len(set(ids)) != len(ids):
            raise ConfigError("device ids must be unique across base and extended profiles")
        bids = [b.building_id for b in self.buildings]
        if len(set(bids)) != len(bids):
            raise ConfigError("building ids must be unique")
        if self.samples_per_rp_per_device < 1:
            raise ConfigError("samples_per_rp_per_device must be positive")

    @classmethod
    def desk(cls, seed: int = 0, **kwargs) -> "GenConfig":
        """Default benchmark with AP counts small enough for a 64-pixel image."""
        return cls(buildings=default_buildings(DESK_AP_COUNTS), seed=seed, **kwargs)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown GenConfig keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def profiles(self) -> list[DeviceProfile]:
        return list(self.base_profiles) + list(self.extended_profiles)

    @property
    def base_device_ids(self) -> list[str]:
        return [p.device_id for p in self.base_profiles]

    @property
    def extended_device_ids(self) -> list[str]:
        return [p.device_id for p in self.extended_profiles]

    def to_dict(self) -> dict:
        return asdict(self)


def _stream(seed: int, *labels: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *[int(v) for v in labels]])


def path_point(s: float, spec: BuildingSpec) -> tuple[float, float]:
    """Position at arc length ``s`` on an L-shaped corridor."""
    leg = math.floor(spec.path_length * spec.corridor_turn)
    if s <= leg:
        return float(s), 0.0
    return float(leg), float(s - leg)


def gen_building(spec: BuildingSpec, rng: np.random.Generator):
    """RPs every metre along the path and AP positions inside the footprint.

    Returns ``(rps, ap_xy)`` with ``rps`` a list of :class:`ReferencePoint`
    and ``ap_xy`` an ``(num_aps, 2)`` array.
    """
    n_rp = int(math.floor(spec.path_length)) + 1
    rps = [ReferencePoint(k, spec.building_id, *path_point(k, spec)) for k in range(n_rp)]
    if spec.ap_positions is not None:
        return rps, np.asarray(spec.ap_positions, dtype=np.float64)
    xy = np.array([(r.x, r.y) for r in rps])
    lo = xy.min(axis=0) - spec.margin
    hi = xy.max(axis=0) + spec.margin
    ap_xy = lo + rng.random((spec.num_aps, 2)) * (hi - lo)
    return rps, ap_xy


def path_loss_db(distance, spec: BuildingSpec):
    d = np.maximum(np.asarray(distance, dtype=np.float64), spec.ref_distance)
    return spec.tx_power - 10.0 * spec.pathloss_exponent * np.log10(d / spec.ref_distance)


def true_rssi(ap_xy, rp_xy, spec: BuildingSpec, rng: np.random.Generator | None = None):
    """Path loss plus one shadowing draw, clamped to [-100, 0] dB.

    Broadcasts over leading axes of ``ap_xy`` / ``rp_xy`` (last axis = x, y).
    """
    d = np.linalg.norm(np.asarray(ap_xy, float) - np.asarray(rp_xy, float), axis=-1)
    v = path_loss_db(d, spec)
    if spec.shadowing_sigma > 0:
        if rng is None:
            raise ConfigError("a random generator is required when shadowing_sigma > 0")
        v = v + rng.normal(0.0, spec.shadowing_sigma, size=np.shape(v))
    v = np.clip(v, RSSI_MIN, RSSI_MAX)
    return float(v) if np.ndim(v) == 0 else v


def apply_device(rssi_db, profile: DeviceProfile, rng: np.random.Generator | None = None):
    """Device skew: affine map, clamp, then threshold/miss to the -100 sentinel."""
    r = np.asarray(rssi_db, dtype=np.float64)
    v = np.clip(profile.scale * r + profile.gain_offset, RSSI_MIN, RSSI_MAX)
    missed = v < profile.detection_threshold
    if profile.extra_miss_prob > 0:
        if rng is None:
            raise ConfigError("a random generator is required when extra_miss_prob > 0")
        missed = missed | (rng.random(np.shape(v)) < profile.extra_miss_prob)
    v = np.where(missed, NOT_VISIBLE, v)
    return float(v) if np.ndim(v) == 0 else v


def _ap_ids(building_id: int, n: int) -> list[str]:
    return [f"b{building_id}_ap{k:03d}" for k in range(n)]


def generate(config: GenConfig) -> FingerprintDataset:
    """Scans for every (building, RP, device) in canonical order."""
    records: list[FingerprintRecord] = []
    rps: dict[tuple[int, int], ReferencePoint] = {}
    all_aps: list[str] = []
    S = config.samples_per_rp_per_device
    for spec in config.buildings:
        b = spec.building_id
        building_rps, ap_xy = gen_building(spec, _stream(config.seed, b, _GEOMETRY))
        ap_ids = _ap_ids(b, len(ap_xy))
        all_aps.extend(ap_ids)
        rp_xy = np.array([(r.x, r.y) for r in building_rps])
        for r in building_rps:
            rps[(b, r.rp_id)] = ReferencePoint(r.rp_id, b, round(r.x, 6), round(r.y, 6))
        base = true_rssi(ap_xy[None, :, :], rp_xy[:, None, :], spec, _stream(config.seed, b, _SHADOWING))
        base = np.atleast_2d(base)  # (n_rp, n_ap)
        for d_idx, prof in enumerate(config.profiles):
            rng = _stream(config.seed, b, _SCANS, d_idx)
            scans = base[:, None, :] + rng.normal(0.0, 1.0, size=(len(building_rps), S, len(ap_ids))) * spec.sample_sigma
            scans = np.clip(scans, RSSI_MIN, RSSI_MAX)
            measured = np.round(np.atleast_1d(apply_device(scans, prof, rng)), config.decimals)
            measured = np.where(measured <= NOT_VISIBLE, NOT_VISIBLE, measured) + 0.0
            for k, r in enumerate(building_rps):
                block = measured[k]
                visible = np.flatnonzero((block > NOT_VISIBLE).any(axis=0))
                readings = {ap_ids[j]: block[:, j].copy() for j in visible}
                records.append(FingerprintRecord(b, r.rp_id, prof.device_id, readings))
    records.sort(key=lambda rec: rec.key)
    return FingerprintDataset(tuple(records), rps, tuple(sorted(all_aps)), S)


def manifest(config: GenConfig) -> dict:
    """JSON-ready description of everything that determined a generated set."""
    return {
        "generator": "vital.synthgen",
        "config": config.to_dict(),
        "base_devices": config.base_device_ids,
        "extended_devices": config.extended_device_ids,
    }
