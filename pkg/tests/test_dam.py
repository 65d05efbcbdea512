import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vital import dam
from vital.dam import DamConfig
from vital.errors import ConfigError, DataError, ShapeError


def test_normalize_boundaries():
    np.testing.assert_array_equal(dam.normalize(np.array([-100.0, 0.0, -50.0])), [0.0, 1.0, 0.5])


def test_normalize_rejects_out_of_range():
    with pytest.raises(DataError):
        dam.normalize(np.array([1.0]))
    with pytest.raises(DataError):
        dam.normalize(np.array([-100.5]))


def test_replicate_two_pixels():
    out = dam.replicate(np.array([[1.0], [2.0]]), 2)
    np.testing.assert_array_equal(out[..., 0], [[1, 2], [1, 2]])


def test_replicate_padding():
    out = dam.replicate(np.array([[0.7, 0.2, 0.1]]), 3)
    assert out.shape == (3, 3, 3)
    np.testing.assert_array_equal(out[:, 0], np.tile([0.7, 0.2, 0.1], (3, 1)))
    assert np.all(out[:, 1:] == 0)


def test_replicate_too_many_aps():
    with pytest.raises(ShapeError):
        dam.replicate(np.zeros((5, 3)), 4)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.just(3)), elements=st.floats(0, 1)), st.integers(6, 10))
def test_replicated_rows_identical(img, r):
    out = dam.replicate(img, r)
    assert np.all(out == out[0:1])


def test_p_zero_is_identity():
    img = dam.replicate(np.random.default_rng(0).random((4, 3)), 6)
    out = dam.dropout_and_infill(img, DamConfig(image_size=6, dropout_prob=0.0), np.random.default_rng(1))
    np.testing.assert_array_equal(out, img)


def test_sigma_zero_fills_mean():
    img = dam.replicate(np.ones((6, 3)), 6)
    cfg = DamConfig(image_size=6, dropout_prob=0.5, infill_mean=0.25, infill_sigma=0.0)
    out = dam.dropout_and_infill(img, cfg, np.random.default_rng(2))
    changed = out != 1.0
    assert changed.any()
    assert np.all(out[changed] == 0.25)
    # a dropped pixel loses all its channels together
    assert np.all(changed.all(axis=-1) == changed.any(axis=-1))


def test_infill_clamped_to_unit_interval():
    img = dam.replicate(np.full((8, 3), 0.5), 8)
    cfg = DamConfig(image_size=8, dropout_prob=0.9, infill_mean=0.5, infill_sigma=5.0)
    out = dam.dropout_and_infill(img, cfg, np.random.default_rng(3))
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert np.any(out == 0.0) and np.any(out == 1.0)


def test_padding_columns_never_dropped():
    img = dam.replicate(np.full((3, 3), 0.5), 8)
    cfg = DamConfig(image_size=8, dropout_prob=0.9, infill_mean=0.9, infill_sigma=0.0)
    out = dam.dropout_and_infill(img, cfg, np.random.default_rng(4), n_valid=3)
    assert np.all(out[:, 3:] == 0.0)


def test_column_granularity_shares_mask():
    img = dam.replicate(np.full((10, 3), 0.5), 10)
    cfg = DamConfig(image_size=10, dropout_prob=0.5, infill_sigma=0.0, infill_mean=0.0,
                    dropout_granularity="column")
    out = dam.dropout_and_infill(img, cfg, np.random.default_rng(5))
    dropped = out[1:, :, 0] == 0.0
    assert np.all(dropped == dropped[0:1])


def test_dropout_rate_within_three_standard_errors():
    p = 0.1
    r = 64
    img = dam.replicate(np.full((r, 3), 0.5), r)
    cfg = DamConfig(image_size=r, dropout_prob=p, infill_mean=0.0, infill_sigma=0.0)
    rng = np.random.default_rng(6)
    drops = trials = 0
    while trials < 100_000:
        out = dam.dropout_and_infill(img, cfg, rng)
        drops += int(np.count_nonzero(out[1:, :, 0] == 0.0))
        trials += (r - 1) * r
    se = np.sqrt(p * (1 - p) / trials)
    assert abs(drops / trials - p) < 3 * se


def test_eval_mode_is_deterministic():
    x = np.random.default_rng(7).uniform(-100, 0, (5, 3))
    cfg = DamConfig(image_size=8, mode="eval")
    assert dam.apply(x, cfg).tobytes() == dam.apply(x, cfg).tobytes()


def test_train_mode_seeded():
    x = np.random.default_rng(8).uniform(-100, 0, (5, 3))
    cfg = DamConfig(image_size=8, dropout_prob=0.3)
    a = dam.apply(x, cfg, np.random.default_rng(9))
    b = dam.apply(x, cfg, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a[0], dam.apply(x, DamConfig(image_size=8, mode="eval"))[0])


def test_train_p_zero_equals_eval():
    x = np.random.default_rng(10).uniform(-100, 0, (5, 3))
    a = dam.apply(x, DamConfig(image_size=8, dropout_prob=0.0, infill_sigma=0.7))
    b = dam.apply(x, DamConfig(image_size=8, mode="eval"))
    np.testing.assert_array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.floats(0, 0.9), st.integers(0, 2**31))
def test_row_zero_preserved_and_range(a, p, seed):
    x = np.random.default_rng(seed).uniform(-100, 0, (a, 3))
    out = dam.apply(x, DamConfig(image_size=8, dropout_prob=p), np.random.default_rng(seed))
    np.testing.assert_array_equal(out[0, :a], dam.normalize(x))
    assert out.min() >= 0.0 and out.max() <= 1.0


@pytest.mark.parametrize("kw", [{"dropout_prob": 1.0}, {"dropout_prob": -0.1}, {"infill_sigma": -1},
                                {"mode": "test"}, {"image_size": 0}, {"dropout_granularity": "row"}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        DamConfig(**kw)
