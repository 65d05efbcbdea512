"""``vital`` command line: gen, train, eval, sweep, ablate, predict.

Every command reads an optional JSON run config, validates all of it before
doing any work, writes its outputs atomically and leaves a
``<out>.manifest.json`` provenance record next to the primary output.  Wall
clock timings go to ``<out>.timing.json`` so that every other file is
byte-identical across re-runs.

On failure the last stderr line is ``error=<category> <message>`` and the
exit status is nonzero.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from vital import __version__, kernels
from vital import checkpoint as ckpt
from vital import synthgen, training
from vital.errors import ConfigError, DataError, VitalError
from vital.fingerprints import FingerprintDataset, FingerprintRecord, load_dataset, save_dataset, split
from vital.io_utils import config_hash, sha256_file, write_json
from vital.presets import preset_dicts
from vital.synthgen import GenConfig
from vital.training import TrainConfig
from vital.vit import VitConfig, predict

log = logging.getLogger("vital")

EXIT_CODES = {"bad_config": 3, "missing_file": 4, "format_error": 5, "shape_error": 5,
              "training_divergence": 6}

# keys a run config may carry at top level
RUN_KEYS = {"preset", "seed", "gen", "vit", "train", "dam", "data", "sweep"}
DATA_KEYS = {"split_ratio", "split_seed", "devices", "extended_devices", "eval_part"}


class MissingFileError(VitalError, FileNotFoundError):
    category = "missing_file"


# ---------------------------------------------------------------------------
# run config


def _merge(base: dict, over: dict) -> dict:
    """Recursive dict merge; lists and scalars in ``over`` replace."""
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    gen: GenConfig
    vit: VitConfig
    train: TrainConfig
    data: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.train.seed

    def resolved(self) -> dict:
        return {"gen": self.gen.to_dict(), "vit": self.vit.to_dict(), "train": self.train.to_dict(),
                "data": self.data, "sweep": {"grid": self.grid}}


def _check_keys(section: str, d, allowed) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{section} must be a JSON object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")


def build_run_config(raw: dict, seed: int | None = None, mode: str | None = None) -> RunConfig:
    """Validate a parsed JSON run config and resolve it against its preset."""
    _check_keys("run config", raw, RUN_KEYS)
    base = preset_dicts(raw.get("preset", "default"))
    gen_d = _merge(base["gen"], raw.get("gen", {}))
    vit_d = _merge(base["vit"], raw.get("vit", {}))
    train_d = _merge(base["train"], raw.get("train", {}))
    if "dam" in raw:
        train_d["dam"] = _merge(train_d["dam"], raw["dam"])
    for name, d, cls in (("gen", raw.get("gen", {}), GenConfig), ("vit", raw.get("vit", {}), VitConfig),
                         ("train", raw.get("train", {}), TrainConfig)):
        _check_keys(name, d, cls.__dataclass_fields__)
    _check_keys("train.optimizer", train_d["optimizer"], training.OptimizerConfig.__dataclass_fields__)
    _check_keys("dam", train_d["dam"], training.DamConfig.__dataclass_fields__)

    run_seed = raw.get("seed") if seed is None else seed
    if run_seed is not None:
        if not isinstance(run_seed, int) or isinstance(run_seed, bool) or not 0 <= run_seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {run_seed!r}")
        gen_d["seed"] = run_seed
        train_d["seed"] = run_seed
    # the augmentation image always matches the model image
    train_d["dam"]["image_size"] = vit_d["image_size"]
    if mode is not None:
        train_d["dam"]["mode"] = mode

    data = dict(raw.get("data", {}))
    _check_keys("data", data, DATA_KEYS)
    data.setdefault("split_ratio", None)
    data.setdefault("split_seed", None)
    data.setdefault("devices", None)
    data.setdefault("extended_devices", None)
    data.setdefault("eval_part", "all")
    if data["eval_part"] not in ("all", "test", "train"):
        raise ConfigError("data.eval_part must be 'all', 'test' or 'train'")
    if data["eval_part"] != "all" and data["split_ratio"] is None:
        raise ConfigError("data.eval_part needs data.split_ratio")
    sweep_d = raw.get("sweep", {})
    _check_keys("sweep", sweep_d, {"grid"})
    grid = sweep_d.get("grid", {})
    try:
        rc = RunConfig(GenConfig.from_dict(gen_d), VitConfig.from_dict(vit_d), TrainConfig.from_dict(train_d),
                       data, grid, raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if grid:
        training.grid_points(grid)
    return rc


def _load_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise MissingFileError(f"config file not found: {path}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None


# ---------------------------------------------------------------------------
# helpers


def _need(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise ConfigError(f"{args.command} needs --{n}")


def _input(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise MissingFileError(f"input file not found: {path}")
    return p


def _dataset(args) -> FingerprintDataset:
    return load_dataset(_input(args.data))


def _training_part(ds: FingerprintDataset, rc: RunConfig) -> tuple[FingerprintDataset, FingerprintDataset | None]:
    """Records a model trains on, and the held-out split if one is configured."""
    if rc.data["devices"]:
        ds = ds.where(devices=rc.data["devices"])
    if rc.data["split_ratio"] is None:
        return ds, None
    seed = rc.seed if rc.data["split_seed"] is None else rc.data["split_seed"]
    return split(ds, rc.data["split_ratio"], seed)


def _eval_part(ds: FingerprintDataset, rc: RunConfig) -> FingerprintDataset:
    if rc.data["eval_part"] == "all":
        return ds.where(devices=rc.data["devices"]) if rc.data["devices"] else ds
    train_part, test_part = _training_part(ds, rc)
    return test_part if rc.data["eval_part"] == "test" else train_part


def _report_json(report: training.EvalReport) -> tuple[dict, dict]:
    """Split a report into its deterministic body and its timings."""
    body = report.to_dict()
    meta = dict(body["meta"])
    timing = {"wall_clock_s": meta.pop("wall_clock_s", None)}
    body["meta"] = meta
    return body, timing


class Run:
    """Tracks inputs, outputs and timings for the manifest of one command."""

    def __init__(self, args, rc: RunConfig):
        self.args = args
        self.rc = rc
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.timing: dict = {}
        self.extra: dict = {}
        self.t0 = time.perf_counter()
        for flag in ("config", "data", "model"):
            path = getattr(args, flag, None)
            if path is not None and Path(path).is_file():
                self.inputs[flag] = sha256_file(path)

    def wrote(self, path) -> None:
        self.outputs.append(str(path))

    def finish(self) -> None:
        out = Path(self.args.out)
        resolved = self.rc.resolved()
        manifest = {
            "command": self.args.command,
            "version": __version__,
            "seed": self.rc.seed,
            "config": resolved,
            "config_hash": config_hash(resolved),
            "inputs": {k: {"path": getattr(self.args, k), "sha256": v} for k, v in self.inputs.items()},
            "outputs": self.outputs,
            "backend": kernels.backend_name(),
        }
        manifest.update(self.extra)
        write_json(str(out) + ".manifest.json", manifest)
        self.timing["total_s"] = time.perf_counter() - self.t0
        write_json(str(out) + ".timing.json", self.timing)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args, rc: RunConfig, run: Run) -> None:
    ds = synthgen.generate(rc.gen)
    save_dataset(ds, args.out)
    run.wrote(args.out)
    prof = str(args.out) + ".profiles.json"
    write_json(prof, synthgen.manifest(rc.gen))
    run.wrote(prof)
    run.extra["records"] = len(ds)
    print(f"wrote {len(ds)} records x {ds.samples_per_record} samples to {args.out}")


def cmd_train(args, rc: RunConfig, run: Run) -> None:
    _need(args, "data")
    ds = _dataset(args)
    train_part, _ = _training_part(ds, rc)
    result = training.train(train_part, rc.vit, rc.train)
    ckpt.save_models(result.models, args.out)
    run.wrote(args.out)
    run.extra["history"] = {str(k): [e.loss for e in v] for k, v in result.history.items()}
    run.extra["train_accuracy"] = training.train_accuracy(result.models, train_part)
    print(f"trained {len(result.models)} model(s); train accuracy {run.extra['train_accuracy']:.3f}")


def cmd_eval(args, rc: RunConfig, run: Run) -> None:
    _need(args, "data", "model")
    ds = _dataset(args)
    models = ckpt.load_models(_input(args.model))
    part = _eval_part(ds, rc)
    report = training.evaluate(models, part, ds.rps, {"seed": rc.seed, "precision": "float32"})
    body, timing = _report_json(report)
    write_json(args.out, body)
    csv_path = Path(args.out).with_suffix(".csv")
    training.write_text(csv_path, report.to_csv())
    run.wrote(args.out)
    run.wrote(csv_path)
    run.timing.update(timing)
    o = report.overall
    print(f"n={o['n']} mean_error={o['mean_error']:.3f} m accuracy={o['accuracy']:.3f}")


def cmd_sweep(args, rc: RunConfig, run: Run) -> None:
    _need(args, "data")
    if not rc.grid:
        raise ConfigError("sweep needs a non-empty sweep.grid in the config")
    ds = _dataset(args)
    if rc.data["devices"]:
        ds = ds.where(devices=rc.data["devices"])
    ratio = rc.data["split_ratio"] or 0.8
    rows = training.sweep(ds, rc.vit, rc.train, rc.grid, jobs=args.jobs, split_ratio=ratio)
    training.write_text(args.out, training.sweep_csv(rows))
    run.wrote(args.out)
    run.extra["failed_points"] = [r for r in rows if r.get("error")]
    print(f"{len(rows)} grid point(s), {len(run.extra['failed_points'])} failed")


def cmd_ablate(args, rc: RunConfig, run: Run) -> None:
    _need(args, "data")
    ds = _dataset(args)
    res = training.ablate_dam(ds, rc.vit, rc.train, rc.data["devices"], rc.data["extended_devices"],
                              rc.data["split_ratio"] or 0.8)
    out = {}
    for label, entry in res.items():
        out[label] = {}
        for part in ("test", "extended"):
            if part in entry:
                body, timing = _report_json(entry[part])
                out[label][part] = body
                run.timing[f"{label}.{part}"] = timing
    out["summary"] = {label: {part: out[label][part]["overall"]["mean_error"] for part in out[label]}
                      for label in ("with_dam", "without_dam")}
    write_json(args.out, out)
    run.wrote(args.out)
    print(json.dumps(out["summary"], sort_keys=True))


def _fingerprints_for_predict(path: Path) -> list:
    if path.suffix.lower() == ".json":
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON: {exc}") from None
        items = obj if isinstance(obj, list) else [obj]
        out = []
        for it in items:
            if not isinstance(it, dict) or "readings" not in it:
                raise DataError(f"{path}: each fingerprint needs a 'readings' object")
            readings = {str(ap): np.atleast_1d(np.asarray(v, dtype=np.float64)) for ap, v in it["readings"].items()}
            out.append(FingerprintRecord(int(it.get("building_id", -1)), int(it.get("rp_id", -1)),
                                         str(it.get("device_id", "")), readings))
        return out
    return list(load_dataset(path).records)


def _pick_model(models, rec: FingerprintRecord):
    for m in models:
        if rec.building_id in m.buildings:
            return m
    # unknown building: the model whose APs the scan overlaps most
    overlap = [len(set(m.ap_ids) & set(rec.readings)) for m in models]
    return models[int(np.argmax(overlap))]


def cmd_predict(args, rc: RunConfig, run: Run) -> None:
    _need(args, "data", "model")
    models = ckpt.load_models(_input(args.model))
    recs = _fingerprints_for_predict(_input(args.data))
    rows, times = [], []
    for rec in recs:
        model = _pick_model(models, rec)
        t0 = time.perf_counter()
        (b, rp), logits = predict(rec, model)
        times.append(time.perf_counter() - t0)
        x, y = model.rp_xy[model.rp_keys.index((b, rp))] if model.rp_xy else (None, None)
        rows.append({"building_id": b, "rp_id": rp, "x_m": x, "y_m": y, "device_id": rec.device_id,
                     "true_rp_id": rec.rp_id if rec.rp_id >= 0 else None})
    write_json(args.out, {"predictions": rows})
    run.wrote(args.out)
    run.timing["predict_s"] = times
    for r in rows:
        print(f"building={r['building_id']} rp={r['rp_id']} x={r['x_m']} y={r['y_m']}")


COMMANDS = {
    "gen": (cmd_gen, "generate a synthetic fingerprint CSV"),
    "train": (cmd_train, "train per-building models on a dataset"),
    "eval": (cmd_eval, "evaluate a checkpoint on a dataset"),
    "sweep": (cmd_sweep, "train and evaluate over a hyperparameter grid"),
    "ablate": (cmd_ablate, "paired runs with and without augmentation"),
    "predict": (cmd_predict, "predict the reference point of fingerprints"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vital", description="ViT indoor localisation from RSSI fingerprints")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--out", required=True, help="primary output path")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("-v", "--verbose", action="store_true")
        if name != "gen":
            p.add_argument("--data", help="fingerprint CSV (predict also accepts JSON)")
        if name in ("eval", "predict"):
            p.add_argument("--model", help="checkpoint file")
        if name in ("train", "sweep", "ablate"):
            p.add_argument("--mode", choices=("train", "eval"), help="augmentation mode used while training")
        if name == "sweep":
            p.add_argument("--jobs", type=int, default=1, help="worker processes")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    for opt in ("data", "model", "mode"):
        if not hasattr(args, opt):
            setattr(args, opt, None)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "jobs", 1) < 1:
            raise ConfigError("--jobs must be at least 1")
        raw = _load_json(args.config) if args.config else {}
        rc = build_run_config(raw, seed=args.seed, mode=args.mode)
        run = Run(args, rc)
        COMMANDS[args.command][0](args, rc, run)
        run.finish()
    except VitalError as exc:
        return _fail(exc.category, exc)
    except FileNotFoundError as exc:
        return _fail("missing_file", exc)
    except (OSError, UnicodeDecodeError) as exc:
        return _fail("format_error", exc)
    return 0


def _fail(category: str, exc: Exception) -> int:
    msg = " ".join(str(exc).split())
    print(f"error={category} {msg}", file=sys.stderr)
    return EXIT_CODES.get(category, 1)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
