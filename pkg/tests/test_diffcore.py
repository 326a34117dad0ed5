import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvaeh import diffcore as dc
from cvaeh.diffcore import Tensor, checkpoint


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


# -- forward examples ---------------------------------------------------------

def test_relu_forward():
    assert dc.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_softmax_symmetric():
    np.testing.assert_allclose(dc.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 3))
    np.testing.assert_array_equal((Tensor(np.eye(3)) @ Tensor(a)).data, a)


@pytest.mark.parametrize("op,a,b", [
    (dc.add, (2, 3), (4, 3)),
    (dc.mul, (2, 3), (2, 2)),
    (dc.matmul, (2, 3), (4, 5)),
])
def test_shape_mismatch_names_op_and_shapes(op, a, b):
    with pytest.raises(dc.ShapeError) as err:
        op(Tensor(np.zeros(a)), Tensor(np.zeros(b)))
    msg = str(err.value)
    assert op.__name__ in msg and str(a) in msg and str(b) in msg


# -- backward examples --------------------------------------------------------

def test_backward_square_sum():
    x = leaf([1.0, 2.0])
    dc.tsum(x * x).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_relu_sum():
    x = leaf([-1.0, 3.0])
    dc.tsum(dc.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_backward_requires_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(dc.ShapeError):
        (x * 2.0).backward()


def test_diamond_accumulates_both_paths():
    x = leaf([1.5])
    y = dc.exp(x)
    loss = dc.tsum(y * y + 3.0 * y)
    loss.backward()
    expected = 2 * math.exp(3.0) + 3 * math.exp(1.5)
    np.testing.assert_allclose(x.grad, [expected])


def test_each_node_visited_once():
    calls = []
    x = leaf([2.0])
    y = x * 3.0
    orig = y._grad_fn
    y._grad_fn = lambda g: (calls.append(1), orig(g))[1]
    dc.tsum(y + y + y).backward()
    assert len(calls) == 1
    np.testing.assert_allclose(x.grad, [9.0])


def test_leaf_grads_accumulate_across_backward_calls():
    x = leaf([1.0])
    dc.tsum(x * 2.0).backward()
    dc.tsum(x * 2.0).backward()
    np.testing.assert_allclose(x.grad, [4.0])


# -- finite-difference oracle over every op -----------------------------------

def _away_from_kinks(rng, shape):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 0.05, 0.3 * np.sign(x) + 0.1, x)


OPS = {
    "add": lambda r: ([r.normal(size=(3, 4)), r.normal(size=(4,))], lambda a, b: a + b),
    "sub": lambda r: ([r.normal(size=(2, 3)), r.normal(size=(2, 1))], lambda a, b: a - b),
    "mul": lambda r: ([r.normal(size=(3, 4)), r.normal(size=(3, 4))], lambda a, b: a * b),
    "div": lambda r: ([r.normal(size=(3,)), r.uniform(0.5, 2.0, size=(3,))], lambda a, b: a / b),
    "matmul": lambda r: ([r.normal(size=(3, 4)), r.normal(size=(4, 2))], lambda a, b: a @ b),
    "bmm": lambda r: ([r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 5))], lambda a, b: a @ b),
    "relu": lambda r: ([_away_from_kinks(r, (5,))], dc.relu),
    "tanh": lambda r: ([r.normal(size=(5,))], dc.tanh),
    "sigmoid": lambda r: ([3 * r.normal(size=(5,))], dc.sigmoid),
    "exp": lambda r: ([r.normal(size=(4,))], dc.exp),
    "log": lambda r: ([r.uniform(0.2, 3.0, size=(4,))], dc.log),
    "softmax": lambda r: ([r.normal(size=(2, 5))], lambda a: dc.softmax(a, axis=-1)),
    "log_softmax": lambda r: ([r.normal(size=(2, 5))], lambda a: dc.log_softmax(a, axis=1)),
    "logsumexp": lambda r: ([r.normal(size=(3, 4))], lambda a: dc.logsumexp(a, axis=0)),
    "sum": lambda r: ([r.normal(size=(3, 4))], lambda a: dc.tsum(a, axis=1)),
    "mean": lambda r: ([r.normal(size=(3, 4))], lambda a: dc.mean(a, axis=0, keepdims=True)),
    "concat": lambda r: ([r.normal(size=(2, 3)), r.normal(size=(2, 2))],
                         lambda a, b: dc.concat([a, b], axis=1)),
    "slice": lambda r: ([r.normal(size=(4, 5))], lambda a: a[1:3, ::2]),
    "fancy_index": lambda r: ([r.normal(size=(4, 3))], lambda a: a[np.array([0, 2, 2, 3])]),
    "take_rows": lambda r: ([r.normal(size=(3, 4))], lambda a: dc.take_rows(a, np.array([2, 0, 2, 1]))),
    "reshape": lambda r: ([r.normal(size=(2, 6))], lambda a: a.reshape(3, 4)),
    "transpose": lambda r: ([r.normal(size=(2, 3, 4))], lambda a: a.transpose(2, 0, 1)),
    "power": lambda r: ([r.uniform(0.5, 2.0, size=(4,))], lambda a: a ** 1.7),
    "sqrt": lambda r: ([r.uniform(0.5, 2.0, size=(4,))], dc.sqrt),
    "clip": lambda r: ([np.array([-3.0, -0.5, 0.2, 2.5])], lambda a: dc.clip(a, -1.0, 1.0)),
    "conv2d": lambda r: ([r.normal(size=(2, 5, 6, 3)), r.normal(size=(3, 3, 3, 4)), r.normal(size=(4,))],
                         lambda x, w, b: dc.conv2d(x, w, b, padding=1)),
    "conv2d_valid": lambda r: ([r.normal(size=(1, 5, 5, 2)), r.normal(size=(3, 3, 2, 2))],
                               lambda x, w: dc.conv2d(x, w, padding=0)),
    "maxpool2d": lambda r: ([r.permutation(48).reshape(1, 4, 4, 3) * 0.1], dc.maxpool2d),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_matches_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(4):
        arrays, fn = OPS[name](rng)
        inputs = [leaf(a) for a in arrays]
        probe = Tensor(rng.normal(size=fn(*inputs).shape))
        err = dc.check_gradients(lambda: dc.tsum(fn(*inputs) * probe), inputs)
        assert err < 1e-4, f"{name}: relative error {err:.2e}"


def _mlp_loss(mlp, x, target):
    return dc.mean(dc.square(mlp(x) - target))


def test_three_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(3)
    mlp = dc.MLP([4, 8, 8, 3], rng)
    x = Tensor(rng.normal(size=(5, 4)))
    target = Tensor(rng.normal(size=(5, 3)))
    err = dc.check_gradients(lambda: _mlp_loss(mlp, x, target), mlp.parameters(), step=1e-5)
    assert err < 1e-4


def test_lstm_and_batchnorm_gradients():
    rng = np.random.default_rng(4)
    lstm = dc.LSTM(2, 3, rng)
    bn = dc.BatchNorm(3)
    seq = Tensor(rng.normal(size=(4, 5, 2)))
    probe = Tensor(rng.normal(size=(4, 3)))
    err = dc.check_gradients(lambda: dc.tsum(bn(lstm(seq)) * probe), lstm.parameters() + bn.parameters())
    assert err < 1e-4


def test_coordconv_gradients():
    rng = np.random.default_rng(5)
    conv = dc.CoordConv2d(2, 3, rng)
    x = leaf(rng.normal(size=(2, 4, 4, 2)))
    probe = Tensor(rng.normal(size=(2, 4, 4, 3)))
    err = dc.check_gradients(lambda: dc.tsum(conv(x) * probe), [x] + conv.parameters())
    assert err < 1e-4


def test_coord_channels_range():
    c = dc.coord_channels(4, 6)
    assert c.shape == (4, 6, 2)
    assert c[0, 0].tolist() == [-1.0, -1.0] and c[-1, -1].tolist() == [1.0, 1.0]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_broadcast_add_grad_has_input_shape(rows, cols, seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng.normal(size=(rows, cols)))
    b = leaf(rng.normal(size=(cols,)))
    dc.tsum(a + b).backward()
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    np.testing.assert_allclose(b.grad, np.full(cols, rows))


# -- optimizer ----------------------------------------------------------------

def test_adam_first_step_magnitude():
    w = leaf([1.0])
    w.grad = np.array([1.0])
    state = dc.AdamState(lr=0.1)
    dc.adam_step([w], state)
    np.testing.assert_allclose(w.data, [0.9], atol=1e-6)
    assert w.grad is None


def test_adam_zero_grad_leaves_param():
    w = leaf([1.0])
    w.grad = np.array([0.0])
    state = dc.AdamState(lr=0.1)
    dc.adam_step([w], state)
    assert w.data.tolist() == [1.0] and state.step == 1


def test_adam_missing_grad_fails():
    with pytest.raises(dc.MissingGradError):
        dc.adam_step([leaf([1.0])], dc.AdamState(lr=0.1))


def test_adam_rejects_nonpositive_lr():
    with pytest.raises(ValueError):
        dc.AdamState(lr=0.0)


def test_adam_quadratic_bowl_converges():
    w = leaf([3.0])
    state = dc.AdamState(lr=0.1)
    for _ in range(500):
        dc.tsum(w * w).backward()
        dc.adam_step([w], state)
    assert abs(w.data[0]) < 0.01


def test_plateau_halves_after_patience():
    state = dc.AdamState(lr=5e-3)
    sched = dc.PlateauSchedule(factor=0.5, patience=2000)
    dc.plateau_update(sched, state, 1.0)
    for _ in range(2000):
        dc.plateau_update(sched, state, 1.0)
    assert state.lr == pytest.approx(2.5e-3)
    for _ in range(2000):
        dc.plateau_update(sched, state, 1.0)
    assert state.lr == pytest.approx(1.25e-3)
    assert state.lr == pytest.approx(5e-3 * 0.5 ** sched.num_decays)


def test_plateau_constant_when_improving():
    state = dc.AdamState(lr=5e-3)
    sched = dc.PlateauSchedule(patience=10)
    for i in range(100):
        dc.plateau_update(sched, state, 10.0 - 0.01 * i)
    assert state.lr == 5e-3


def test_plateau_improvement_threshold():
    state = dc.AdamState(lr=1.0)
    sched = dc.PlateauSchedule(patience=3)
    dc.plateau_update(sched, state, 1.0)
    for _ in range(3):
        dc.plateau_update(sched, state, 1.0 - 5e-5)  # below the 1e-4 improvement margin
    assert state.lr == 0.5


def test_plateau_nan_fails():
    with pytest.raises(ValueError):
        dc.plateau_update(dc.PlateauSchedule(), dc.AdamState(lr=1.0), float("nan"))


def test_seeded_training_is_bit_reproducible():
    def run():
        rng = np.random.default_rng(11)
        mlp = dc.MLP([2, 6, 1], rng)
        state = dc.AdamState(lr=1e-2)
        x = Tensor(rng.normal(size=(16, 2)))
        y = Tensor(rng.normal(size=(16, 1)))
        losses = []
        for _ in range(20):
            loss = _mlp_loss(mlp, x, y)
            loss.backward()
            dc.adam_step(mlp.parameters(), state)
            losses.append(loss.item())
        return losses

    assert run() == run()


# -- checkpoint ---------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    records = {"a.weight": rng.normal(size=(3, 4)), "scalar": np.array(2.5), "b": rng.normal(size=(7,))}
    path = tmp_path / "ck.bin"
    checkpoint.save(path, records)
    back = checkpoint.load(path)
    assert list(back) == list(records)
    for k in records:
        np.testing.assert_array_equal(back[k], records[k])
    blob = path.read_bytes()
    assert blob[:8] == b"CVAEHCKP" and blob[8] == 1


def test_checkpoint_rejects_garbage():
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(b"NOTACKPT" + b"\x01" * 10)
    good = checkpoint.encode({"x": np.ones(3)})
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(good[:-4])


def test_module_state_dict_round_trip():
    rng = np.random.default_rng(1)
    bn = dc.BatchNorm(3)
    bn(Tensor(rng.normal(size=(5, 3))))
    state = bn.state_dict()
    other = dc.BatchNorm(3)
    other.load_state_dict(state)
    np.testing.assert_array_equal(other.running_mean, bn.running_mean)
