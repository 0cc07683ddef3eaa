import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from elasticopf.neuralnet import (AdamState, CorruptFile, EmptyTrainSet, LengthMismatch,
                                  ShapeMismatch, TrainConfig, TrainingData, VersionMismatch,
                                  adam_step, evaluate_loss, forward, inference_view,
                                  init_elastic_dnn, load_checkpoint, loss_and_grads,
                                  param_count, param_count_separate, save_checkpoint,
                                  train_incremental)
from elasticopf.dataset import InvalidSlotMap

from oracles import gradient_errors, randomize_biases

SLOTS = ((3, 5, 8), (4, 6, 10))


def small_net(seed=0, hidden=(6, 5)):
    dnn = init_elastic_dnn(SLOTS, hidden, seed=seed)
    return randomize_biases(dnn, np.random.default_rng(seed + 100))


def batch(rng, k, n=4):
    return rng.uniform(0, 1, (n, SLOTS[0][k])), rng.uniform(0, 1, (n, SLOTS[1][k]))


# --------------------------------------------------------------------------
# structure


def test_init_shapes_and_seed():
    a = init_elastic_dnn(SLOTS, (6, 5), seed=4)
    b = init_elastic_dnn(SLOTS, (6, 5), seed=4)
    assert [blk.shape for blk in a.input_blocks] == [(6, 3), (6, 2), (6, 3)]
    assert [W.shape for W, _ in a.output_blocks] == [(4, 5), (2, 5), (4, 5)]
    for x, y in zip(a.params().values(), b.params().values()):
        assert np.array_equal(x, y)
    assert np.array_equal(a.va_mask, [0, 0, 1, 1, 0, 1, 0, 0, 1, 1])


def test_invalid_slot_maps():
    with pytest.raises(InvalidSlotMap):
        init_elastic_dnn(((3, 3), (4, 6)), (5,))
    with pytest.raises(InvalidSlotMap):
        init_elastic_dnn(((3, 5), (4,)), (5,))
    with pytest.raises(InvalidSlotMap):
        init_elastic_dnn(((3,), (4,)), ())


def test_forward_range_and_length():
    dnn = small_net()
    for k in range(3):
        y = forward(dnn, k, np.ones(SLOTS[0][k]))
        assert y.shape == (SLOTS[1][k],) and np.all((y > 0) & (y < 1))
    with pytest.raises(LengthMismatch):
        forward(dnn, 1, np.ones(3))


def test_inference_view_matches_forward(rng):
    dnn = small_net()
    for k in range(3):
        u = rng.uniform(size=SLOTS[0][k])
        np.testing.assert_allclose(inference_view(dnn, k)(u), forward(dnn, k, u), atol=1e-14)
    with pytest.raises(LengthMismatch):
        inference_view(dnn, 2)(np.ones(5))


def test_batch_forward_equals_rows(rng):
    dnn = small_net()
    U = rng.uniform(size=(5, 8))
    Y = forward(dnn, 2, U)
    for i in range(5):
        np.testing.assert_allclose(Y[i], forward(dnn, 2, U[i]), atol=1e-14)


def test_param_counts():
    dnn = init_elastic_dnn(SLOTS, (6, 5))
    # 6*8 + 6 + 5*6 + 5 + 10*5 + 10
    assert param_count(dnn) == 149
    sep = param_count_separate(SLOTS, (6, 5))
    assert sep == sum(i * 6 + 6 + 36 - 1 + o * 5 + o for i, o in zip(*SLOTS))
    single = init_elastic_dnn(((8,), (10,)), (6, 5))
    assert param_count(single) == param_count_separate(((8,), (10,)), (6, 5))


# --------------------------------------------------------------------------
# gradients


@pytest.mark.parametrize("k", [0, 1, 2])
@pytest.mark.parametrize("gamma", [1.0, 2.5])
def test_gradients_match_differences(k, gamma, rng):
    dnn = small_net(seed=k)
    U, X = batch(rng, k)
    errors = gradient_errors(dnn, k, U, X, gamma)
    assert max(errors.values()) < 1e-5, errors


def test_gradients_only_for_active_blocks(rng):
    dnn = small_net()
    _, g = loss_and_grads(dnn, 0, *batch(rng, 0))
    assert set(g) == set(dnn.params(0))
    assert "in.1" not in g and "out.2.W" not in g


def test_loss_value_by_hand():
    dnn = init_elastic_dnn(((1,), (2,)), (1,), seed=0)
    for a in dnn.params().values():
        a[...] = 0.0
    # all weights zero: prediction 0.5 everywhere; gamma weights the angle row
    loss, _ = loss_and_grads(dnn, 0, np.array([[1.0]]), np.array([[0.0, 1.0]]), gamma=3.0)
    assert loss == pytest.approx(0.25 + 3 * 0.25)


def test_loss_shape_checked():
    with pytest.raises(LengthMismatch):
        loss_and_grads(small_net(), 1, np.ones((2, 5)), np.ones((2, 4)))


# --------------------------------------------------------------------------
# Adam and isolation


def test_adam_first_step_is_lr():
    dnn = init_elastic_dnn(((1,), (2,)), (1,), seed=0)
    before = dnn.b1.copy()
    state = AdamState.for_dnn(dnn)
    adam_step(dnn, {"b1": np.array([0.37])}, state, lr=0.01)
    # bias-corrected first step is lr * g / |g| (up to eps)
    assert dnn.b1[0] - before[0] == pytest.approx(-0.01, rel=1e-6)
    assert state.steps["b1"] == 1 and state.steps["in.0"] == 0


def test_adam_scalar_trace():
    dnn = init_elastic_dnn(((1,), (2,)), (1,), seed=0)
    state = AdamState.for_dnn(dnn)
    p, m, v = 0.0, 0.0, 0.0
    dnn.b1[0] = 0.0
    for t, g in enumerate([1.0, -2.0, 0.5], start=1):
        adam_step(dnn, {"b1": np.array([g])}, state, lr=0.1)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        p -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert dnn.b1[0] == pytest.approx(p, abs=1e-12)


def test_adam_rejects_bad_gradients():
    dnn = small_net()
    with pytest.raises(ShapeMismatch):
        adam_step(dnn, {"b1": np.zeros(3)}, AdamState.for_dnn(dnn), 0.1)
    with pytest.raises(ShapeMismatch):
        adam_step(dnn, {"nope": np.zeros(3)}, AdamState.for_dnn(dnn), 0.1)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1), st.integers(0, 10_000))
def test_training_smaller_network_leaves_larger_blocks(k, seed):
    dnn = small_net(seed=seed % 7)
    before = dnn.copy()
    rng = np.random.default_rng(seed)
    U, X = batch(rng, k, n=6)
    train_incremental(dnn, TrainingData({k: (U, X)}),
                      TrainConfig(epochs=2, batch_size=2, alpha=0.05, seed=seed))
    for j in range(k + 1, 3):
        assert np.array_equal(dnn.input_blocks[j], before.input_blocks[j])
        assert np.array_equal(dnn.output_blocks[j][0], before.output_blocks[j][0])
        assert np.array_equal(dnn.output_blocks[j][1], before.output_blocks[j][1])
    assert not np.array_equal(dnn.b1, before.b1)


# --------------------------------------------------------------------------
# training


def realizable_data(seed=0, n=200):
    """Targets produced by a fixed teacher network of the same shape."""
    teacher = init_elastic_dnn(SLOTS, (8, 8), seed=seed + 50)
    rng = np.random.default_rng(seed)
    train, test = {}, {}
    for k in range(3):
        U = rng.uniform(size=(n, SLOTS[0][k]))
        X = forward(teacher, k, U)
        train[k] = (U[:int(0.8 * n)], X[:int(0.8 * n)])
        test[k] = (U[int(0.8 * n):], X[int(0.8 * n):])
    return TrainingData(train, test)


def test_training_reduces_loss():
    data = realizable_data()
    dnn = init_elastic_dnn(SLOTS, (16, 16), seed=1)
    start = [evaluate_loss(dnn, k, *data.test[k], 1.0) for k in range(3)]
    dnn, hist = train_incremental(dnn, data, TrainConfig(epochs=40, batch_size=16, alpha=3e-3,
                                                         lr_halving_period=20))
    end = [evaluate_loss(dnn, k, *data.test[k], 1.0) for k in range(3)]
    assert all(e < 0.2 * s for s, e in zip(start, end))
    assert [e["lr"] for e in hist.epochs[18:22]] == [3e-3, 3e-3, 1.5e-3, 1.5e-3]
    lines = hist.to_csv().splitlines()
    assert lines[0] == "epoch,lr,train_loss_0,train_loss_1,train_loss_2," \
                       "test_loss_0,test_loss_1,test_loss_2"
    assert len(lines) == 41


def test_training_deterministic():
    data = realizable_data(n=50)
    cfg = TrainConfig(epochs=3, batch_size=8)
    a = train_incremental(init_elastic_dnn(SLOTS, (8,), seed=2), data, cfg)[0]
    b = train_incremental(init_elastic_dnn(SLOTS, (8,), seed=2), data, cfg)[0]
    for x, y in zip(a.params().values(), b.params().values()):
        assert np.array_equal(x, y)


def test_resume_matches_uninterrupted(tmp_path):
    data = realizable_data(n=50)
    cfg = TrainConfig(epochs=4, batch_size=8, lr_halving_period=2)
    full = train_incremental(init_elastic_dnn(SLOTS, (8,), seed=3), data, cfg)[0]

    half = TrainConfig(epochs=2, batch_size=8, lr_halving_period=2)
    dnn, hist = train_incremental(init_elastic_dnn(SLOTS, (8,), seed=3), data, half)
    save_checkpoint(dnn, tmp_path / "m.ckpt", adam=hist.adam)
    ck = load_checkpoint(tmp_path / "m.ckpt")
    resumed, hist2 = train_incremental(ck.dnn, data, half, adam=ck.adam, start_epoch=2)
    assert [e["epoch"] for e in hist2.epochs] == [2, 3]
    for x, y in zip(full.params().values(), resumed.params().values()):
        np.testing.assert_allclose(x, y, atol=1e-12)


def test_empty_train_set():
    with pytest.raises(EmptyTrainSet):
        train_incremental(small_net(), TrainingData({0: (np.zeros((0, 3)), np.zeros((0, 4)))}),
                          TrainConfig(epochs=1))
    with pytest.raises(EmptyTrainSet):
        train_incremental(small_net(), TrainingData({}), TrainConfig(epochs=1))


def test_train_config_validated():
    with pytest.raises(ValueError):
        TrainConfig(alpha=0)
    with pytest.raises(ValueError):
        TrainConfig(schedule="random")


# --------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path, rng):
    dnn = small_net()
    size = save_checkpoint(dnn, tmp_path / "a.ckpt", extra={"note": "x"})
    assert size == (tmp_path / "a.ckpt").stat().st_size
    ck = load_checkpoint(tmp_path / "a.ckpt")
    assert ck.extra == {"note": "x"} and ck.adam is None and ck.scaler is None
    for x, y in zip(dnn.params().values(), ck.dnn.params().values()):
        assert np.array_equal(x, y)
    u = rng.uniform(size=8)
    assert np.array_equal(forward(dnn, 2, u), forward(ck.dnn, 2, u))
    assert np.array_equal(ck.dnn.va_mask, dnn.va_mask)


def test_checkpoint_bytes_stable(tmp_path):
    save_checkpoint(small_net(), tmp_path / "a.ckpt")
    save_checkpoint(load_checkpoint(tmp_path / "a.ckpt").dnn, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_corruption(tmp_path):
    p = tmp_path / "a.ckpt"
    save_checkpoint(small_net(), p)
    data = p.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(data[:-10])
    with pytest.raises(CorruptFile):
        load_checkpoint(tmp_path / "trunc.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello world, not a model")
    with pytest.raises(CorruptFile):
        load_checkpoint(tmp_path / "junk.ckpt")
    flipped = bytearray(data)
    flipped[-1] ^= 0xFF
    (tmp_path / "flip.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(CorruptFile):
        load_checkpoint(tmp_path / "flip.ckpt")


def test_checkpoint_version(tmp_path):
    p = tmp_path / "a.ckpt"
    save_checkpoint(small_net(), p)
    data = bytearray(p.read_bytes())
    data[8] = 99
    p.write_bytes(bytes(data))
    with pytest.raises(VersionMismatch):
        load_checkpoint(p)
