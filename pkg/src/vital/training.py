"""Group training, localization-error evaluation and experiment protocols."""
from __future__ import annotations

import csv
import io
import itertools
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from vital import dam as dam_mod
from vital import kernels
from vital import numerics as nm
from vital.dam import DamConfig
from vital.errors import ConfigError, DataError, TrainingDivergedError, VitalError
from vital.fingerprints import FingerprintDataset, split
from vital.io_utils import atomic_open, config_hash
from vital.optim import OptimizerConfig, OptimizerState, optimizer_step
from vital.vit import VitConfig, VitModel, forward, init_weights

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    dam: DamConfig = field(default_factory=DamConfig)
    augmented_copies_per_record: int = 4
    scope: str = "building"  # or "joint": one model over every (building, RP)
    precision: str = "float32"

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if isinstance(self.dam, dict):
            self.dam = DamConfig(**self.dam)
        if self.epochs < 1 or self.batch_size < 1 or self.augmented_copies_per_record < 1:
            raise ConfigError("epochs, batch_size and augmented_copies_per_record must be positive")
        if self.scope not in ("building", "joint"):
            raise ConfigError(f"unknown training scope {self.scope!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def without_dam(self) -> "TrainConfig":
        return replace(
            self,
            dam=replace(self.dam, dropout_prob=0.0, infill_sigma=0.0),
            augmented_copies_per_record=1,
        )


@dataclass
class EpochLog:
    epoch: int
    loss: float
    devices_seen: list[str]
    batches: int


@dataclass
class TrainResult:
    models: list[VitModel]
    history: dict[int | str, list[EpochLog]]

    def losses(self, key=None) -> list[float]:
        key = next(iter(self.history)) if key is None else key
        return [e.loss for e in self.history[key]]


# ---------------------------------------------------------------------------
# training


def _scopes(dataset: FingerprintDataset, scope: str) -> list[tuple[int | str, FingerprintDataset]]:
    if scope == "joint":
        return [("joint", dataset)]
    return [(b, dataset.where(building_id=b)) for b in dataset.buildings]


def _ap_ids_for(part: FingerprintDataset) -> list[str]:
    seen = set()
    for rec in part.records:
        seen.update(rec.readings)
    return [ap for ap in part.ap_ids if ap in seen]


def train_model(part: FingerprintDataset, vit_config: VitConfig, train_config: TrainConfig,
                stream: Sequence[int] = (0,), on_epoch=None) -> tuple[VitModel, list[EpochLog]]:
    """Train one classifier over the RPs present in ``part``.

    ``on_epoch(log_entry, model)`` is called after every epoch if given.
    """
    if len(part) == 0:
        raise DataError("cannot train on an empty dataset")
    rp_keys = sorted({(r.building_id, r.rp_id) for r in part.records})
    class_of = {k: i for i, k in enumerate(rp_keys)}
    ap_ids = _ap_ids_for(part)
    R = vit_config.image_size
    if len(ap_ids) > R:
        raise ConfigError(f"{len(ap_ids)} APs do not fit an image of size {R}")
    cfg = replace(vit_config, num_classes=len(rp_keys),
                  head_dims=list(vit_config.head_dims[:-1]) + [len(rp_keys)])
    dtype = np.float32 if train_config.precision == "float32" else np.float64
    seed = train_config.seed
    weights = init_weights(cfg, seed=np.random.SeedSequence([seed, *stream, 1]).generate_state(1)[0], dtype=dtype)
    rng = np.random.default_rng([seed, *stream, 2])
    dam_cfg = replace(train_config.dam, image_size=R)
    augment = dam_cfg.mode == "train" and dam_cfg.dropout_prob > 0

    base = dam_mod.normalize(part.images_1d(ap_ids)).astype(dtype)
    labels = np.array([class_of[(r.building_id, r.rp_id)] for r in part.records])
    devices = np.array([r.device_id for r in part.records])
    n = len(part)
    copies = train_config.augmented_copies_per_record
    bs = train_config.batch_size

    xy = [(part.rps[k].x, part.rps[k].y) for k in rp_keys]
    tensors = {k: nm.Tensor(v, requires_grad=True, name=k) for k, v in weights.items()}
    opt_state = OptimizerState()
    history: list[EpochLog] = []
    for epoch in range(train_config.epochs):
        order = np.concatenate([rng.permutation(n) for _ in range(copies)])
        total, count, batches = 0.0, 0, 0
        for s in range(0, len(order), bs):
            idx = order[s:s + bs]
            imgs = dam_mod.replicate(base[idx], R)
            if augment:
                imgs = dam_mod.dropout_and_infill(imgs, dam_cfg, rng, n_valid=len(ap_ids))
            with nm.Tape() as tape:
                loss = nm.cross_entropy(forward(imgs, tensors, cfg), labels[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {batches}")
            grads = tape.gradient(loss, tensors.values())
            optimizer_step(weights, {k: grads[t] for k, t in tensors.items()}, opt_state, train_config.optimizer)
            total += value * len(idx)
            count += len(idx)
            batches += 1
        seen = sorted(set(devices[order].tolist()))
        history.append(EpochLog(epoch, total / count, seen, batches))
        log.debug("epoch %d loss %.4f", epoch, total / count)
        if on_epoch is not None:
            on_epoch(history[-1], VitModel(cfg, weights, ap_ids, rp_keys, xy))
    return VitModel(cfg, weights, ap_ids, rp_keys, xy), history


def train(dataset: FingerprintDataset, vit_config: VitConfig, train_config: TrainConfig) -> TrainResult:
    """Pool every device's records and fit one model per building (or one overall)."""
    if len(dataset) == 0:
        raise DataError("training set is empty")
    models, history = [], {}
    for key, part in _scopes(dataset, train_config.scope):
        stream = (0,) if key == "joint" else (1, int(key))
        model, hist = train_model(part, vit_config, train_config, stream)
        models.append(model)
        history[key] = hist
    return TrainResult(models, history)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Prediction:
    building_id: int
    rp_id: int
    device_id: str
    pred_building_id: int
    pred_rp_id: int
    error_m: float


def _summary(errors: np.ndarray, correct: np.ndarray) -> dict:
    if errors.size == 0:
        return {"n": 0, "min_error": None, "mean_error": None, "max_error": None, "accuracy": None}
    return {
        "n": int(errors.size),
        "min_error": float(errors.min()),
        "mean_error": float(errors.mean()),
        "max_error": float(errors.max()),
        "accuracy": float(correct.mean()),
    }


@dataclass
class EvalReport:
    predictions: list[Prediction]
    meta: dict = field(default_factory=dict)

    def _arrays(self, keep=None):
        preds = self.predictions if keep is None else [p for p in self.predictions if keep(p)]
        err = np.array([p.error_m for p in preds], dtype=np.float64)
        ok = np.array([(p.building_id, p.rp_id) == (p.pred_building_id, p.pred_rp_id) for p in preds])
        return err, ok

    @property
    def overall(self) -> dict:
        return _summary(*self._arrays())

    @property
    def cells(self) -> list[dict]:
        keys = sorted({(p.building_id, p.device_id) for p in self.predictions})
        out = []
        for b, d in keys:
            row = {"building_id": b, "device_id": d}
            row.update(_summary(*self._arrays(lambda p, b=b, d=d: p.building_id == b and p.device_id == d)))
            out.append(row)
        return out

    @property
    def per_device(self) -> dict[str, dict]:
        devs = sorted({p.device_id for p in self.predictions})
        return {d: _summary(*self._arrays(lambda p, d=d: p.device_id == d)) for d in devs}

    @property
    def per_building(self) -> dict[int, dict]:
        bs = sorted({p.building_id for p in self.predictions})
        return {b: _summary(*self._arrays(lambda p, b=b: p.building_id == b)) for b in bs}

    @property
    def mean_error(self) -> float:
        return self.overall["mean_error"]

    @property
    def accuracy(self) -> float:
        return self.overall["accuracy"]

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "per_building": {str(b): v for b, v in self.per_building.items()},
            "per_device": self.per_device,
            "cells": self.cells,
            "predictions": [asdict(p) for p in self.predictions],
            "meta": self.meta,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["building_id", "device_id", "n", "min_error", "mean_error", "max_error", "accuracy"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in self.cells:
            w.writerow(row)
        return buf.getvalue()


def _images_for(model: VitModel, part: FingerprintDataset) -> np.ndarray:
    # APs the model never saw in training carry no information; drop them
    known = set(model.ap_ids)
    if any(ap not in known for rec in part.records for ap in rec.readings):
        records = tuple(
            type(rec)(rec.building_id, rec.rp_id, rec.device_id,
                      {ap: v for ap, v in rec.readings.items() if ap in known})
            for rec in part.records
        )
        part = FingerprintDataset(records, part.rps, part.ap_ids, part.samples_per_record)
    img1d = part.images_1d(model.ap_ids)
    return dam_mod.replicate(dam_mod.normalize(img1d), model.config.image_size)


def _model_for(models: Sequence[VitModel], building_id: int) -> VitModel:
    for m in models:
        if building_id in m.buildings:
            return m
    raise DataError(f"no model covers building {building_id}")


def evaluate(models: VitModel | Sequence[VitModel], test_set: FingerprintDataset, rp_coords=None,
             meta: dict | None = None, batch_size: int = 128) -> EvalReport:
    """Localization error of each test record: distance between predicted and true RP."""
    models = [models] if isinstance(models, VitModel) else list(models)
    rp_coords = test_set.rps if rp_coords is None else rp_coords
    t0 = time.perf_counter()
    preds: list[Prediction] = []
    by_model: dict[int, list[int]] = {}
    for i, rec in enumerate(test_set.records):
        m = _model_for(models, rec.building_id)
        by_model.setdefault(id(m), []).append(i)
    lookup = {id(m): m for m in models}
    results: dict[int, tuple[int, int]] = {}
    for mid, idx in by_model.items():
        m = lookup[mid]
        part = test_set.subset(idx)
        cls = np.empty(len(idx), dtype=np.int64)
        for s in range(0, len(idx), batch_size):
            chunk = part.subset(range(s, min(s + batch_size, len(idx))))
            cls[s:s + len(chunk)] = np.argmax(m.logits(_images_for(m, chunk), batch_size), axis=1)
        for i, c in zip(idx, cls):
            results[i] = m.rp_keys[int(c)]
    for i, rec in enumerate(test_set.records):
        pb, prp = results[i]
        preds.append(_prediction(rec, (pb, prp), rp_coords))
    info = {"wall_clock_s": time.perf_counter() - t0, "backend": kernels.backend_name()}
    info.update(meta or {})
    return EvalReport(preds, info)


def _prediction(rec, pred_key, rp_coords) -> Prediction:
    true_key = (rec.building_id, rec.rp_id)
    if true_key not in rp_coords:
        raise DataError(f"unknown RP {true_key}")
    if tuple(pred_key) not in rp_coords:
        raise DataError(f"unknown predicted RP {tuple(pred_key)}")
    t, p = rp_coords[true_key], rp_coords[tuple(pred_key)]
    err = math.hypot(p.x - t.x, p.y - t.y)
    return Prediction(rec.building_id, rec.rp_id, rec.device_id, int(pred_key[0]), int(pred_key[1]), err)


def train_accuracy(models: Sequence[VitModel], dataset: FingerprintDataset) -> float:
    return evaluate(models, dataset).accuracy


# ---------------------------------------------------------------------------
# KNN baseline


def knn_predict(train_x: np.ndarray, train_y: Sequence, test_x: np.ndarray, k: int) -> list:
    """Majority vote of the ``k`` nearest training rows (Euclidean).

    Ties in the vote go to the label with the smallest summed distance, then
    to the label seen first among the neighbours.
    """
    if len(train_x) == 0:
        raise DataError("KNN needs a non-empty training set")
    if k < 1:
        raise ConfigError("k must be at least 1")
    d2 = kernels.pairwise_sqdist(np.asarray(test_x, float), np.asarray(train_x, float))
    k = min(k, len(train_x))
    out = []
    for row in d2:
        nearest = np.argsort(row, kind="stable")[:k]
        votes: dict = {}
        for rank, j in enumerate(nearest):
            lab = train_y[j]
            cnt, dist, first = votes.get(lab, (0, 0.0, rank))
            votes[lab] = (cnt + 1, dist + math.sqrt(row[j]), first)
        out.append(min(votes, key=lambda lab: (-votes[lab][0], votes[lab][1], votes[lab][2])))
    return out


def knn_baseline(train_set: FingerprintDataset, test_set: FingerprintDataset, k: int = 3,
                 scope: str = "building") -> EvalReport:
    """Plain KNN on normalised 1-D fingerprints (all three channels)."""
    if len(train_set) == 0:
        raise DataError("KNN needs a non-empty training set")
    t0 = time.perf_counter()
    results: dict[int, tuple[int, int]] = {}
    for key, part in _scopes(train_set, scope):
        ap_ids = _ap_ids_for(part)
        known = set(ap_ids)
        tx = dam_mod.normalize(part.images_1d(ap_ids)).reshape(len(part), -1)
        ty = [(r.building_id, r.rp_id) for r in part.records]
        idx = [i for i, r in enumerate(test_set.records) if key == "joint" or r.building_id == key]
        if not idx:
            continue
        test_part = test_set.subset(idx)
        records = tuple(
            type(r)(r.building_id, r.rp_id, r.device_id, {a: v for a, v in r.readings.items() if a in known})
            for r in test_part.records
        )
        qx = dam_mod.normalize(
            FingerprintDataset(records, test_part.rps, test_part.ap_ids, test_part.samples_per_record).images_1d(ap_ids)
        ).reshape(len(idx), -1)
        for i, lab in zip(idx, knn_predict(tx, ty, qx, k)):
            results[i] = lab
    preds = []
    for i, rec in enumerate(test_set.records):
        if i not in results:
            raise DataError(f"no KNN training data for building {rec.building_id}")
        preds.append(_prediction(rec, results[i], test_set.rps))
    return EvalReport(preds, {"method": f"knn(k={k})", "wall_clock_s": time.perf_counter() - t0})


# ---------------------------------------------------------------------------
# protocols


def _report_meta(vit_config: VitConfig, train_config: TrainConfig, **extra) -> dict:
    cfg = {"vit": vit_config.to_dict(), "train": train_config.to_dict()}
    meta = {"config_hash": config_hash(cfg), "seed": train_config.seed,
            "precision": train_config.precision, "config": cfg}
    meta.update(extra)
    return meta


def _check_devices(dataset: FingerprintDataset, base: Sequence[str], extended: Sequence[str]) -> None:
    overlap = set(base) & set(extended)
    if overlap:
        raise ConfigError(f"base and extended device sets overlap: {sorted(overlap)}")
    if not base:
        raise ConfigError("no base devices given")
    if not extended:
        raise ConfigError("no extended devices given: nothing to evaluate")
    missing = (set(base) | set(extended)) - set(dataset.devices)
    if missing:
        raise ConfigError(f"devices not in dataset: {sorted(missing)}")


def extended_device_eval(dataset: FingerprintDataset, base_devices: Sequence[str],
                         extended_devices: Sequence[str], vit_config: VitConfig,
                         train_config: TrainConfig, split_ratio: float = 0.8,
                         split_seed: int | None = None, include_knn: int | None = 3) -> dict:
    """Train on base devices only, then evaluate on held-out devices.

    Training uses the training split of the base-device records; the held-out
    base-device split and every extended-device record are evaluated.
    """
    _check_devices(dataset, base_devices, extended_devices)
    split_seed = train_config.seed if split_seed is None else split_seed
    base_train, base_test = split(dataset.where(devices=base_devices), split_ratio, split_seed)
    ext = dataset.where(devices=extended_devices)
    result = train(base_train, vit_config, train_config)
    meta = _report_meta(vit_config, train_config, split_seed=split_seed)
    out = {
        "extended": evaluate(result.models, ext, dataset.rps, meta),
        "base_test": evaluate(result.models, base_test, dataset.rps, meta),
        "train": result,
    }
    if include_knn:
        out["knn_extended"] = knn_baseline(base_train, ext, include_knn)
        out["knn_base_test"] = knn_baseline(base_train, base_test, include_knn)
    return out


def ablate_dam(dataset: FingerprintDataset, vit_config: VitConfig, train_config: TrainConfig,
               base_devices: Sequence[str] | None = None, extended_devices: Sequence[str] | None = None,
               split_ratio: float = 0.8) -> dict:
    """Paired runs with and without the augmentation stages on the same split.

    Returns ``{"with_dam": {...}, "without_dam": {...}}``; each holds a
    ``test`` report and, if extended devices are given, an ``extended`` one.
    """
    devices = list(base_devices) if base_devices else list(dataset.devices)
    if extended_devices:
        _check_devices(dataset, devices, extended_devices)
    train_set, test_set = split(dataset.where(devices=devices), split_ratio, train_config.seed)
    ext = dataset.where(devices=extended_devices) if extended_devices else None
    out = {}
    for label, cfg in (("with_dam", train_config), ("without_dam", train_config.without_dam())):
        result = train(train_set, vit_config, cfg)
        meta = _report_meta(vit_config, cfg, variant=label)
        entry = {"test": evaluate(result.models, test_set, dataset.rps, meta), "train": result}
        if ext is not None:
            entry["extended"] = evaluate(result.models, ext, dataset.rps, meta)
        out[label] = entry
    return out


SWEEP_KEYS = ("image_size", "patch_size", "num_heads", "head_layers")


def grid_points(grid: dict[str, Sequence]) -> list[dict]:
    unknown = set(grid) - set(SWEEP_KEYS) - {"embed_dim", "head_dim"}
    if unknown:
        raise ConfigError(f"unknown sweep axes: {sorted(unknown)}")
    keys = [k for k in SWEEP_KEYS + ("embed_dim", "head_dim") if k in grid]
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def point_config(base: VitConfig, point: dict, head_width: int = 128) -> VitConfig:
    kw = {k: v for k, v in point.items() if k != "head_layers"}
    cfg = replace(base, **kw) if kw else replace(base)
    if "head_layers" in point:
        n = int(point["head_layers"])
        if n < 1:
            raise ConfigError("head_layers must be at least 1")
        cfg = replace(cfg, head_dims=[head_width] * (n - 1) + [cfg.num_classes])
    return cfg


def run_point(dataset: FingerprintDataset, vit_config: VitConfig, train_config: TrainConfig,
              point: dict, split_ratio: float = 0.8) -> dict:
    row = dict(point)
    try:
        cfg = point_config(vit_config, point)
        train_set, test_set = split(dataset, split_ratio, train_config.seed)
        result = train(train_set, cfg, train_config)
        rep = evaluate(result.models, test_set, dataset.rps)
        row.update({k: rep.overall[k] for k in ("mean_error", "min_error", "max_error", "accuracy")})
        row["error"] = ""
    except (VitalError, ValueError) as exc:
        row.update({"mean_error": None, "min_error": None, "max_error": None, "accuracy": None,
                    "error": f"{type(exc).__name__}: {exc}"})
    return row


def _run_point_star(args):
    return run_point(*args)


def sweep(dataset: FingerprintDataset, vit_config: VitConfig, train_config: TrainConfig,
          grid: dict[str, Sequence], jobs: int = 1, split_ratio: float = 0.8) -> list[dict]:
    """One train+evaluate per grid point, rows in canonical grid order."""
    points = grid_points(grid)
    tasks = [(dataset, vit_config, train_config, p, split_ratio) for p in points]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_point_star, tasks))
    return [run_point(*t) for t in tasks]


def sweep_csv(rows: Iterable[dict]) -> str:
    rows = list(rows)
    axes = [k for k in SWEEP_KEYS + ("embed_dim", "head_dim") if rows and k in rows[0]]
    cols = axes + ["mean_error", "min_error", "max_error", "accuracy", "error"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in cols})
    return buf.getvalue()


def write_text(path, text: str) -> None:
    with atomic_open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
