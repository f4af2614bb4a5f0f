"""Tests for the 1D CNN surrogate: gradients, training, early stopping, persistence."""
import numpy as np
import pytest

from oracles import gradient_check, randomize

from floodsurrogate.errors import ModelFormatError, ValidationError
from floodsurrogate.features import Dataset
from floodsurrogate.surrogate import (
    EarlyStopping, TrainConfig, _col2im, _im2col, evaluate_loss, init_model, load_model, save_model,
    split_indices, train,
)

SMALL = dict(conv_channels=(4, 6), dense_units=(5, 7, 6))


def toy_batch(n=6, f=5, c=3, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, f)), rng.random((n, c))


def test_im2col_matches_direct_convolution():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(2, 7, 3))
    W = rng.normal(size=(4, 3, 3))
    cols = _im2col(a, 3)
    out = cols @ W.reshape(4, -1).T
    ap = np.pad(a, ((0, 0), (1, 1), (0, 0)))
    ref = np.zeros((2, 7, 4))
    for b in range(2):
        for l in range(7):
            for o in range(4):
                ref[b, l, o] = sum(W[o, ci, j] * ap[b, l + j, ci] for ci in range(3) for j in range(3))
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(2, 6, 3))
    d = rng.normal(size=(2, 6, 9))
    assert np.sum(_im2col(a, 3) * d) == pytest.approx(np.sum(a * _col2im(d, 3, 3)), rel=1e-12)


def test_default_architecture_shapes():
    m = init_model(28, 100)
    assert m.params["conv0.W"].shape == (28, 1, 3)
    assert m.params["conv1.W"].shape == (128, 28, 3)
    assert m.params["fc0.W"].shape == (28 * 128, 32)
    assert m.params["out.W"].shape == (512, 100)
    assert m.forward(np.zeros((4, 28))).shape == (4, 100)


@pytest.mark.parametrize("dropout", [0.0, 0.2])
def test_gradients_small_widths_every_parameter(dropout):
    m = init_model(5, 3, seed=2, dropout_p=dropout, **SMALL)
    randomize(m, seed=2)
    X, Y = toy_batch()
    n_failed, worst, n = gradient_check(m, X, Y)
    assert n == m.n_params
    assert n_failed == 0, worst


def test_gradients_default_widths_sampled():
    m = init_model(5, 3, seed=3)
    randomize(m, seed=3)
    X, Y = toy_batch(seed=3)
    n_failed, worst, _ = gradient_check(m, X, Y, max_per_tensor=8)
    assert n_failed == 0, worst


def test_inference_is_deterministic_and_ignores_dropout():
    m = init_model(5, 3, dropout_p=0.5)
    X, _ = toy_batch()
    np.testing.assert_array_equal(m.forward(X), m.forward(X))


def test_predict_clamps_negative_depths():
    m = init_model(5, 3, seed=0)
    m.params["out.b"][...] = -10.0
    assert (m.predict(np.zeros((2, 5))) == 0.0).all()


def test_wrong_input_width_rejected():
    with pytest.raises(ValidationError, match="width"):
        init_model(5, 3).forward(np.zeros((2, 4)))


def test_early_stopping_example():
    es = EarlyStopping(patience=5, min_delta=0.001)
    seq = [1.0, 0.9995, 0.9994, 0.9993, 0.9992, 0.9991]
    stops = [es.update(e, v, state=e) for e, v in enumerate(seq, start=1)]
    assert stops == [False] * 5 + [True]
    assert es.stopped_epoch == 6
    # restored weights are those of the lowest val loss seen
    assert es.best_epoch == 6 and es.best_state == 6 and es.best_loss == 0.9991


def test_early_stopping_resets_on_real_improvement():
    es = EarlyStopping(patience=2, min_delta=0.1)
    assert not es.update(1, 1.0)
    assert not es.update(2, 0.95)
    assert not es.update(3, 0.5)
    assert not es.update(4, 0.45)
    assert es.update(5, 0.44)


def test_split_is_disjoint_and_complete():
    tr, va = split_indices(50, 0.1, np.random.default_rng(0))
    assert len(va) == 5
    assert sorted(np.concatenate([tr, va]).tolist()) == list(range(50))


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValidationError):
        TrainConfig(dropout_p=1.0)


def _linear_dataset(n=120, f=5, c=4, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, f))
    W = rng.normal(size=(f, c))
    Y = np.maximum(X @ W * 0.3 + 1.0, 0.0)
    return Dataset(X, Y, np.arange(c * 2).reshape(c, 2))


def test_training_reduces_loss_and_restores_best():
    ds = _linear_dataset()
    cfg = TrainConfig(max_epochs=40, seed=5, learning_rate=0.003)
    model, history = train(init_model(5, 4, seed=5, **SMALL), ds, cfg)
    assert history[-1].epoch == len(history)
    assert min(h.val_loss for h in history) < history[0].val_loss
    # reproduce the validation split and confirm the restored weights
    rng = np.random.default_rng(cfg.seed)
    rng.integers(2**63)
    _, va = split_indices(ds.n_samples, cfg.val_fraction, rng)
    restored = evaluate_loss(model, ds.normalized_X()[va], ds.Y[va])
    assert restored == pytest.approx(min(h.val_loss for h in history), rel=1e-12)


def test_training_is_seed_deterministic():
    ds1, ds2 = _linear_dataset(), _linear_dataset()
    cfg = TrainConfig(max_epochs=5, seed=9)
    m1, h1 = train(init_model(5, 4, seed=9, **SMALL), ds1, cfg)
    m2, h2 = train(init_model(5, 4, seed=9, **SMALL), ds2, cfg)
    assert h1 == h2
    for k in m1.params:
        np.testing.assert_array_equal(m1.params[k], m2.params[k])


def test_save_load_bit_exact(tmp_path):
    ds = _linear_dataset()
    model, _ = train(init_model(5, 4, seed=1, **SMALL), ds, TrainConfig(max_epochs=3))
    save_model(model, tmp_path / "m.bin")
    back = load_model(tmp_path / "m.bin")
    X = np.random.default_rng(2).normal(size=(7, 5))
    np.testing.assert_array_equal(back.predict(X), model.predict(X))
    assert back.arch == model.arch


def test_truncated_model_file_rejected(tmp_path):
    save_model(init_model(5, 3, **SMALL), tmp_path / "m.bin")
    raw = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-50])
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "t.bin")
    (tmp_path / "x.bin").write_bytes(b"junk" * 20)
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "x.bin")
