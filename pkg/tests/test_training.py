import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_gen_config, toy_dataset
from vital import synthgen as sg
from vital import training as tr
from vital.dam import DamConfig
from vital.errors import ConfigError, DataError, TrainingDivergedError
from vital.fingerprints import FingerprintDataset, FingerprintRecord, ReferencePoint, split
from vital.optim import OptimizerConfig
from vital.training import EvalReport, Prediction, TrainConfig
from vital.vit import VitConfig, VitModel


def small_vit(**kw):
    base = dict(image_size=16, patch_size=4, embed_dim=16, num_heads=2, head_dim=8, encoder_mlp_dims=[32, 16])
    base.update(kw)
    return VitConfig(**base)


def small_train(**kw):
    base = dict(epochs=3, batch_size=16, dam=DamConfig(image_size=16), seed=0)
    base.update(kw)
    return TrainConfig(**base)


# --- training -------------------------------------------------------------


def test_single_rp_loss_vanishes():
    ds = toy_dataset(n_rps=1, devices=("d0", "d1", "d2"))
    result = tr.train(ds, small_vit(), small_train(epochs=3))
    assert result.losses()[-1] < 1e-3


def test_training_is_deterministic():
    ds = toy_dataset(n_rps=4)
    a = tr.train(ds, small_vit(), small_train())
    b = tr.train(ds, small_vit(), small_train())
    assert a.losses() == b.losses()
    for k in a.models[0].weights:
        assert a.models[0].weights[k].tobytes() == b.models[0].weights[k].tobytes()


def test_first_epoch_loss_near_log_c_and_devices_pooled(tiny_synth):
    result = tr.train(tiny_synth, small_vit(), small_train(epochs=2, optimizer=OptimizerConfig(lr=1e-4)))
    for key, hist in result.history.items():
        c = len(tiny_synth.rp_ids(key))
        assert 0.5 * math.log(c) <= hist[0].loss <= 2 * math.log(c)
        assert all(np.isfinite(e.loss) for e in hist)
        for e in hist:
            assert e.devices_seen == list(tiny_synth.devices)


def test_one_model_per_building_or_joint(tiny_synth):
    per = tr.train(tiny_synth, small_vit(), small_train(epochs=1))
    assert [m.buildings for m in per.models] == [[0], [1]]
    assert per.models[0].config.num_classes == len(tiny_synth.rp_ids(0))
    joint = tr.train(tiny_synth, small_vit(image_size=24), small_train(epochs=1, scope="joint"))
    assert len(joint.models) == 1 and joint.models[0].config.num_classes == len(tiny_synth.rps)


@pytest.mark.slow
def test_two_building_train_accuracy_regression():
    """Scaled config on a 2-building set with 1 dB shadowing reaches >90% train accuracy."""
    ds = sg.generate(tiny_gen_config(seed=0, shadow=1.0))
    vit_cfg = VitConfig(image_size=64, patch_size=8)
    result = tr.train(ds, vit_cfg, TrainConfig(epochs=50, dam=DamConfig(image_size=64)))
    assert tr.train_accuracy(result.models, ds) > 0.9


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    ds = toy_dataset(n_rps=3)
    cfg = small_train(epochs=5, optimizer=OptimizerConfig(kind="sgd", lr=1e30))
    with pytest.raises(TrainingDivergedError):
        tr.train(ds, small_vit(), cfg)


def test_empty_dataset_rejected():
    ds = toy_dataset().subset([])
    with pytest.raises(DataError):
        tr.train(ds, small_vit(), small_train())


def test_too_many_aps_for_image():
    ds = toy_dataset(n_rps=20)
    with pytest.raises(ConfigError):
        tr.train(ds, small_vit(image_size=8, patch_size=4), small_train(dam=DamConfig(image_size=8)))


def test_mode_eval_disables_augmentation():
    ds = toy_dataset(n_rps=3)
    off = small_train(dam=DamConfig(image_size=16, mode="eval"))
    zero = small_train(dam=DamConfig(image_size=16, dropout_prob=0.0))
    assert tr.train(ds, small_vit(), off).losses() == tr.train(ds, small_vit(), zero).losses()


# --- evaluation -----------------------------------------------------------


def _coords(*xy):
    return {(0, i): ReferencePoint(i, 0, float(x), float(y)) for i, (x, y) in enumerate(xy)}


def test_three_four_five():
    rec = FingerprintRecord(0, 0, "d", {})
    p = tr._prediction(rec, (0, 1), _coords((0, 0), (3, 4)))
    assert p.error_m == 5.0


def test_unknown_rp_rejected():
    rec = FingerprintRecord(0, 7, "d", {})
    with pytest.raises(DataError):
        tr._prediction(rec, (0, 1), _coords((0, 0), (3, 4)))


class _Oracle(VitModel):
    """Model stand-in that returns the true class for each record."""

    def __init__(self, ds):
        keys = sorted(ds.rps)
        super().__init__(small_vit(num_classes=len(keys)), {}, list(ds.ap_ids), keys,
                         [(ds.rps[k].x, ds.rps[k].y) for k in keys])
        self.answers = None

    def logits(self, images2d, batch_size=256):
        out = np.zeros((len(images2d), len(self.rp_keys)))
        out[np.arange(len(images2d)), self.answers[: len(images2d)]] = 1.0
        self.answers = self.answers[len(images2d):]
        return out


def test_perfect_classifier_has_zero_error():
    ds = toy_dataset(n_rps=4)
    model = _Oracle(ds)
    model.answers = np.array([model.rp_keys.index((r.building_id, r.rp_id)) for r in ds.records])
    rep = tr.evaluate(model, ds)
    o = rep.overall
    assert o["min_error"] == o["mean_error"] == o["max_error"] == 0.0 and o["accuracy"] == 1.0


def test_report_aggregates_match_flat_recomputation():
    rng = np.random.default_rng(0)
    preds = [Prediction(int(b), 0, d, 0, 0, float(e))
             for b, d, e in zip(rng.integers(0, 2, 40), rng.choice(["x", "y", "z"], 40), rng.exponential(2, 40))]
    rep = EvalReport(preds)
    errs = [p.error_m for p in preds]
    assert rep.overall["mean_error"] == pytest.approx(sum(errs) / len(errs), rel=1e-12)
    for cell in rep.cells:
        sub = [p.error_m for p in preds if p.building_id == cell["building_id"] and p.device_id == cell["device_id"]]
        assert cell["n"] == len(sub)
        assert cell["min_error"] == min(sub) and cell["max_error"] == max(sub)
        assert cell["mean_error"] == pytest.approx(sum(sub) / len(sub), rel=1e-12)
    assert rep.to_csv().count("\n") == len(rep.cells) + 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 100), st.booleans()), min_size=1, max_size=30))
def test_report_invariants(items):
    preds = [Prediction(0, 0, "d", 0, 0 if ok else 1, e) for e, ok in items]
    o = EvalReport(preds).overall
    assert o["min_error"] <= o["mean_error"] + 1e-9 and o["mean_error"] <= o["max_error"] + 1e-9
    assert 0.0 <= o["accuracy"] <= 1.0


# --- KNN ------------------------------------------------------------------


def test_knn_identical_record_k1():
    x = np.array([[0.0, 1.0], [5.0, 5.0], [9.0, 0.0]])
    assert tr.knn_predict(x, ["a", "b", "c"], x[1:2], 1) == ["b"]


def test_knn_single_rp_training_set():
    x = np.random.default_rng(1).random((4, 3))
    assert tr.knn_predict(x, ["only"] * 4, np.random.default_rng(2).random((5, 3)), 3) == ["only"] * 5


def test_knn_hand_enumerated():
    # points on a line; query at 0
    train_x = np.array([[1.0], [-2.0], [3.0], [-3.5], [10.0]])
    labels = ["A", "B", "A", "B", "C"]
    # neighbours of 0: 1 (A), -2 (B), 3 (A) -> A by majority
    assert tr.knn_predict(train_x, labels, np.array([[0.0]]), 3) == ["A"]
    # neighbours of -2.6: -2 (B, .6), -3.5 (B, .9), 1 (A) -> B
    assert tr.knn_predict(train_x, labels, np.array([[-2.6]]), 3) == ["B"]
    # k=2 at 0: A (1.0) vs B (2.0) tie on votes, A has smaller summed distance
    assert tr.knn_predict(train_x, labels, np.array([[0.0]]), 2) == ["A"]
    # k=2 at -0.6: A (1.6) vs B (1.4) -> B
    assert tr.knn_predict(train_x, labels, np.array([[-0.6]]), 2) == ["B"]
    # at 9: C (1), A (6), A (8) -> A wins 2 votes to 1
    assert tr.knn_predict(train_x, labels, np.array([[9.0]]), 3) == ["A"]


def test_knn_contracts():
    with pytest.raises(DataError):
        tr.knn_predict(np.zeros((0, 2)), [], np.zeros((1, 2)), 1)
    with pytest.raises(ConfigError):
        tr.knn_predict(np.zeros((1, 2)), ["a"], np.zeros((1, 2)), 0)


def test_knn_baseline_report(tiny_synth):
    train_set, test_set = split(tiny_synth, 0.8, 0)
    rep = tr.knn_baseline(train_set, test_set, k=1)
    assert len(rep.predictions) == len(test_set)
    assert 0 <= rep.accuracy <= 1


# --- protocols ------------------------------------------------------------


def test_extended_device_contracts(tiny_synth):
    with pytest.raises(ConfigError):
        tr.extended_device_eval(tiny_synth, ["base0"], [], small_vit(), small_train())
    with pytest.raises(ConfigError):
        tr.extended_device_eval(tiny_synth, ["base0", "ext0"], ["ext0"], small_vit(), small_train())


def test_extended_evaluates_only_held_out_devices(tiny_synth):
    out = tr.extended_device_eval(tiny_synth, ["base0", "base1", "base2"], ["ext0"], small_vit(),
                                  small_train(epochs=1))
    assert {p.device_id for p in out["extended"].predictions} == {"ext0"}
    assert {p.device_id for p in out["base_test"].predictions} <= {"base0", "base1", "base2"}
    assert set(out["knn_extended"].per_device) == {"ext0"}


def test_identical_devices_generalise_equally():
    ident = [sg.DeviceProfile(f"d{i}") for i in range(4)]
    cfg = replace(tiny_gen_config(seed=3, shadow=1.0), base_profiles=ident[:3], extended_profiles=ident[3:])
    ds = sg.generate(cfg)
    out = tr.extended_device_eval(ds, ["d0", "d1", "d2"], ["d3"], small_vit(),
                                  small_train(epochs=30, optimizer=OptimizerConfig(lr=3e-3)), include_knn=None)
    ext, base = out["extended"], out["base_test"]
    n1, n2 = len(ext.predictions), len(base.predictions)
    pooled = (ext.accuracy * n1 + base.accuracy * n2) / (n1 + n2)
    se = math.sqrt(pooled * (1 - pooled) * (1 / n1 + 1 / n2))
    assert abs(ext.accuracy - base.accuracy) <= 3 * se


def test_ablation_degenerate_collapse(tiny_synth):
    cfg = small_train(epochs=2, augmented_copies_per_record=1,
                      dam=DamConfig(image_size=16, dropout_prob=0.0, infill_sigma=0.0))
    res = tr.ablate_dam(tiny_synth, small_vit(), cfg)
    a, b = res["with_dam"], res["without_dam"]
    assert a["train"].losses() == b["train"].losses()
    assert [p.pred_rp_id for p in a["test"].predictions] == [p.pred_rp_id for p in b["test"].predictions]


def test_ablation_reports_share_split(tiny_synth):
    res = tr.ablate_dam(tiny_synth, small_vit(), small_train(epochs=1), ["base0", "base1", "base2"], ["ext0"])
    keys = lambda rep: [(p.building_id, p.rp_id, p.device_id) for p in rep.predictions]  # noqa: E731
    assert keys(res["with_dam"]["test"]) == keys(res["without_dam"]["test"])
    assert "extended" in res["without_dam"]


# --- sweep ----------------------------------------------------------------


def test_sweep_single_point_equals_direct_run(tiny_synth):
    rows = tr.sweep(tiny_synth, small_vit(), small_train(epochs=1), {"patch_size": [4]})
    train_set, test_set = split(tiny_synth, 0.8, 0)
    direct = tr.evaluate(tr.train(train_set, small_vit(), small_train(epochs=1)).models, test_set)
    assert len(rows) == 1 and rows[0]["mean_error"] == direct.mean_error


def test_sweep_rows_and_bad_points(tiny_synth):
    grid = {"patch_size": [4, 32], "num_heads": [1, 2]}
    rows = tr.sweep(tiny_synth, small_vit(), small_train(epochs=1), grid)
    assert len(rows) == 4
    assert [(r["patch_size"], r["num_heads"]) for r in rows] == [(4, 1), (4, 2), (32, 1), (32, 2)]
    assert all(r["error"] for r in rows if r["patch_size"] == 32)
    assert all(not r["error"] and r["mean_error"] is not None for r in rows if r["patch_size"] == 4)
    csv_text = tr.sweep_csv(rows)
    assert csv_text.splitlines()[0] == "patch_size,num_heads,mean_error,min_error,max_error,accuracy,error"
    assert len(csv_text.splitlines()) == 5


def test_sweep_parallel_matches_serial(tiny_synth):
    grid = {"num_heads": [1, 2], "head_layers": [1, 2]}
    serial = tr.sweep(tiny_synth, small_vit(), small_train(epochs=1), grid, jobs=1)
    parallel = tr.sweep(tiny_synth, small_vit(), small_train(epochs=1), grid, jobs=2)
    assert serial == parallel


def test_sweep_rejects_unknown_axis(tiny_synth):
    with pytest.raises(ConfigError):
        tr.sweep(tiny_synth, small_vit(), small_train(), {"depth": [1]})


def test_train_config_round_trip():
    cfg = small_train(optimizer=OptimizerConfig(lr=0.01))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 2, "warmup": 3})
    off = cfg.without_dam()
    assert off.dam.dropout_prob == 0 and off.dam.infill_sigma == 0 and off.augmented_copies_per_record == 1
