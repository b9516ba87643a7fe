import copy
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wmbench import nn

from conftest import tiny_model
from gradcheck import LinearProbe, all_kinds_model, check


def naive_forward(model, x):
    """Loop-level reference for dense/conv2d/relu/maxpool/flatten stacks."""
    x = np.asarray(x, dtype=np.float64)
    params = iter(model.params)
    for layer in model.layers:
        if layer.kind == "dense":
            w, b = next(params), next(params)
            out = np.zeros((x.shape[0], w.shape[1]))
            for n in range(x.shape[0]):
                for j in range(w.shape[1]):
                    out[n, j] = b[j] + sum(x[n, i] * w[i, j] for i in range(w.shape[0]))
            x = out
        elif layer.kind == "conv2d":
            w, b = next(params), next(params)
            N, H, W, C = x.shape
            pad = np.zeros((N, H + 2, W + 2, C))
            pad[:, 1:-1, 1:-1] = x
            out = np.zeros((N, H, W, w.shape[3]))
            for n in range(N):
                for i in range(H):
                    for j in range(W):
                        for o in range(w.shape[3]):
                            out[n, i, j, o] = b[o] + np.sum(pad[n, i:i + 3, j:j + 3, :] * w[:, :, :, o])
            x = out
        elif layer.kind == "relu":
            x = np.maximum(x, 0)
        elif layer.kind == "maxpool2x2":
            N, H, W, C = x.shape
            out = np.zeros((N, H // 2, W // 2, C))
            for i in range(H // 2):
                for j in range(W // 2):
                    out[:, i, j] = x[:, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max(axis=(1, 2))
            x = out
        elif layer.kind == "flatten":
            x = x.reshape(x.shape[0], -1)
    return x


# -- shapes and forward -------------------------------------------------------

def test_param_shapes_follow_kind():
    assert nn.dense(4, 3).param_shapes() == [(4, 3), (3,)]
    assert nn.conv2d(2, 5).param_shapes() == [(3, 3, 2, 5), (5,)]
    assert nn.RELU.param_shapes() == []


def test_incompatible_layers_rejected():
    with pytest.raises(nn.ShapeError):
        nn.Model([nn.dense(5, 3)], (4,))
    with pytest.raises(nn.ShapeError):
        nn.Model([nn.MAXPOOL], (3, 3, 1))
    with pytest.raises(ValueError):
        nn.LayerSpec("softmax")


def test_forward_shape_error():
    m = tiny_model()
    with pytest.raises(nn.ShapeError):
        nn.forward(m, np.zeros((2, 5, 4, 1)))


def test_zero_weight_dense_gives_zero_logits(rng):
    m = nn.Model([nn.dense(7, 4), nn.RELU, nn.dense(4, 3)], (7,))
    assert np.all(nn.forward(m, rng.normal(size=(5, 7))) == 0)


def test_identity_dense_is_identity(rng):
    m = nn.Model([nn.dense(6, 6)], (6,), [np.eye(6, dtype=np.float32), np.zeros(6, np.float32)])
    x = rng.normal(size=(4, 6)).astype(np.float32)
    assert np.array_equal(nn.forward(m, x), x)


def test_forward_matches_naive_reference(rng):
    layers = [nn.conv2d(1, 3), nn.RELU, nn.MAXPOOL, nn.FLATTEN, nn.dense(3 * 3 * 3, 4), nn.RELU, nn.dense(4, 5)]
    m = nn.Model.init(layers, (6, 6, 1), seed=3)
    x = rng.uniform(0, 1, size=(3, 6, 6, 1)).astype(np.float32)
    assert np.allclose(nn.forward(m, x), naive_forward(m, x), atol=1e-6, rtol=0)


def test_two_layer_dense_matches_naive(rng):
    m = nn.Model.init([nn.dense(5, 8), nn.RELU, nn.dense(8, 3)], (5,), seed=11)
    x = rng.normal(size=(4, 5)).astype(np.float32)
    assert np.allclose(nn.forward(m, x), naive_forward(m, x), atol=1e-6, rtol=0)


def test_forward_is_deterministic_and_pure(rng):
    m = tiny_model(dtype=np.float32)
    before = [p.copy() for p in m.params]
    x = rng.uniform(size=(3, 4, 4, 1))
    assert np.array_equal(nn.forward(m, x), nn.forward(m, x))
    assert all(np.array_equal(a, b) for a, b in zip(before, m.params))


def test_maxpool_tie_routes_gradient_once():
    m = nn.Model([nn.MAXPOOL, nn.FLATTEN], (2, 2, 1))
    x = np.ones((1, 2, 2, 1))
    g = nn.grad(m, x, LinearProbe(np.ones((1, 1))))
    assert g.input.sum() == 1.0


def test_nonfinite_activation_reports_layer():
    m = tiny_model(dtype=np.float32)
    m.params[2][0, 0] = np.inf
    with pytest.raises(nn.NumericError) as exc:
        nn.forward_cached(m, np.ones((1, 4, 4, 1)))
    assert exc.value.layer_index == 4


# -- losses ------------------------------------------------------------------

def test_cross_entropy_values():
    assert nn.cross_entropy(np.zeros((3, 10)), [0, 4, 9]) == pytest.approx(math.log(10), abs=1e-12)
    assert nn.cross_entropy(np.array([[1.0, 2.0, 3.0]]), [2]) == pytest.approx(0.40760596444, abs=1e-9)
    assert nn.cross_entropy(np.array([[0.0, 1e4]]), [1]) == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_spec_matches_function(rng):
    z = rng.normal(size=(6, 4))
    y = rng.integers(0, 4, 6)
    assert nn.CrossEntropy(y)(z)[0] == pytest.approx(nn.cross_entropy(z, y), rel=1e-12)


def test_l1_logits_values(rng):
    b = rng.normal(size=(4, 5))
    assert nn.l1_logits(b, b) == 0.0
    assert nn.l1_logits(b + 0.5, b) == pytest.approx(0.5, abs=1e-12)
    a = rng.normal(size=(7, 3))
    naive = sum(abs(a[i, j] - b[i % 4, j]) for i in range(7) for j in range(3)) / 21
    assert nn.l1_logits(a, b[np.arange(7) % 4, :3]) == pytest.approx(naive, abs=1e-7)
    with pytest.raises(nn.ShapeError):
        nn.l1_logits(a, b)


def test_l1_spec_matches_function(rng):
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    assert nn.L1Logits(b)(a)[0] == pytest.approx(nn.l1_logits(a, b), rel=1e-12)
    assert nn.L1Logits(b, per_sample="sum")(a)[0] == pytest.approx(3 * nn.l1_logits(a, b), rel=1e-12)


# -- gradients ---------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(seed, rng):
    m = all_kinds_model(seed)
    x = rng.uniform(0, 1, size=(2, 4, 4, 1))
    worst, checked, _ = check(m, x, nn.CrossEntropy(rng.integers(0, 3, 2)))
    assert checked > 100
    assert worst < 1e-4


def test_constant_loss_gives_zero_gradients(rng):
    m = tiny_model()
    g = nn.grad(m, rng.uniform(size=(2, 4, 4, 1)), LinearProbe(np.zeros((2, 3))))
    assert all(np.all(p == 0) for p in g.params)
    assert np.all(g.input == 0)


def test_confident_correct_prediction_has_tiny_gradient():
    m = nn.Model([nn.dense(2, 2)], (2,), [np.array([[100.0, -100.0], [0.0, 0.0]]), np.zeros(2)], dtype=np.float64)
    g = nn.grad(m, np.array([[1.0, 0.0]]), nn.CrossEntropy([0]))
    assert math.sqrt(sum(float((p ** 2).sum()) for p in g.params)) < 1e-6


def test_nonfinite_loss_raises():
    m = nn.Model([nn.dense(1, 2)], (1,), [np.array([[1e308, -1e308]]), np.zeros(2)], dtype=np.float64)
    with pytest.raises(nn.NumericError):
        nn.grad(m, np.array([[10.0]]), nn.CrossEntropy([0]))


# -- optimisation ------------------------------------------------------------

def test_sgd_lr_zero_is_noop(rng):
    m = tiny_model()
    before = [p.copy() for p in m.params]
    g = nn.grad(m, rng.uniform(size=(2, 4, 4, 1)), nn.CrossEntropy([0, 1]))
    nn.sgd_step(m, g, 0.0)
    assert all(np.array_equal(a, b) for a, b in zip(before, m.params))


def test_sgd_step_descends_quadratic():
    m = nn.Model([nn.dense(1, 1)], (1,), [np.array([[3.0]]), np.array([0.0])], dtype=np.float64)
    x = np.array([[1.0]])
    loss = lambda out: (float((out ** 2).sum()), 2 * out)  # noqa: E731
    before = loss(nn.forward(m, x))[0]
    nn.sgd_step(m, nn.grad(m, x, loss), 0.1)
    assert loss(nn.forward(m, x))[0] < before


def test_sequential_steps_match_reference_loop(rng):
    m = tiny_model()
    ref = m.copy()
    x = rng.uniform(size=(3, 4, 4, 1))
    y = np.array([0, 2, 1])
    for _ in range(2):
        nn.sgd_step(m, nn.grad(m, x, nn.CrossEntropy(y)), 0.1)
    for _ in range(2):
        g = nn.grad(ref, x, nn.CrossEntropy(y)).params
        ref.params = [p - 0.1 * gp for p, gp in zip(ref.params, g)]
    assert all(np.allclose(a, b, atol=1e-12) for a, b in zip(m.params, ref.params))
    # one step with the summed first-point gradients is not the same thing
    once = tiny_model()
    g = nn.grad(once, x, nn.CrossEntropy(y)).params
    nn.sgd_step(once, [2 * gp for gp in g], 0.1)
    assert not all(np.allclose(a, b, atol=1e-9) for a, b in zip(m.params, once.params))


def test_adam_zero_gradient_is_noop():
    m = tiny_model()
    before = [p.copy() for p in m.params]
    nn.Adam(1e-3).step(m, [np.zeros_like(p) for p in m.params])
    assert all(np.array_equal(a, b) for a, b in zip(before, m.params))


def test_train_is_deterministic_and_learns(task):
    small = task.train.subset(np.arange(600))
    layers = nn.desk_architecture()
    a = nn.Model.init(layers, (16, 16, 1), seed=5)
    b = nn.Model.init(layers, (16, 16, 1), seed=5)
    cfg = nn.TrainConfig(0.05, 32, 3, seed=9)
    ra = nn.train(a, small, cfg)
    nn.train(b, small, cfg)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    assert ra.losses[-1] < ra.losses[0]
    assert len(ra.losses) == len(ra.accuracies) == 3


def test_train_zero_epochs_is_noop(task):
    m = nn.Model.init(nn.desk_architecture(), (16, 16, 1), seed=1)
    before = [p.copy() for p in m.params]
    nn.train(m, task.train, nn.TrainConfig(epochs=0))
    assert all(np.array_equal(a, b) for a, b in zip(before, m.params))


def test_train_config_validation():
    with pytest.raises(ValueError):
        nn.TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        nn.TrainConfig(batch_size=0)


def test_accuracy_of_empty_set_is_undefined():
    with pytest.raises(nn.UndefinedMetricError):
        nn.accuracy(tiny_model(), np.zeros((0, 4, 4, 1)), [])


def test_copies_never_alias():
    m = tiny_model()
    for c in (m.copy(), copy.deepcopy(m)):
        c.params[0][...] += 1
        assert not np.array_equal(c.params[0], m.params[0])


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_round_trip_bitwise(tmp_path):
    m = nn.Model.init(nn.desk_architecture(), (16, 16, 1), seed=4)
    nn.save(m, tmp_path / "m.wmdl")
    back = nn.load(tmp_path / "m.wmdl")
    assert back.layers == m.layers and back.input_shape == m.input_shape
    assert all(np.array_equal(a, b) and a.dtype == b.dtype for a, b in zip(m.params, back.params))
    assert nn.dumps(back) == nn.dumps(m)


def test_checkpoint_extra_and_flags_round_trip():
    m = tiny_model(dtype=np.float32)
    back, flags, extra = nn.loads(nn.dumps(m, flags=nn.FLAG_GENERATOR, extra=(4, 4, 1)))
    assert flags == nn.FLAG_GENERATOR and tuple(extra) == (4, 4, 1)


@pytest.mark.parametrize("mutate", ["magic", "truncate", "trailing", "version"])
def test_corrupt_checkpoints_rejected(mutate):
    blob = bytearray(nn.dumps(tiny_model(dtype=np.float32)))
    if mutate == "magic":
        blob[:4] = b"XXXX"
    elif mutate == "truncate":
        blob = blob[:-3]
    elif mutate == "trailing":
        blob += b"\0"
    else:
        blob[4] = 99
    with pytest.raises(ValueError):
        nn.loads(bytes(blob))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_relu_net_is_positively_homogeneous(seed, k):
    # bias-free relu/dense/maxpool nets satisfy f(k x) = k f(x)
    m = tiny_model(seed)
    for i in (1, 3, 5):
        m.params[i][...] = 0
    x = np.random.Generator(np.random.Philox(seed)).uniform(size=(2, 4, 4, 1))
    assert np.allclose(nn.forward(m, k * x), k * nn.forward(m, x), rtol=1e-10, atol=1e-12)
