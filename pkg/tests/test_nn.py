import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import central_difference, random_net
from lidsub import data, nn
from lidsub.attacks import MarginLoss
from lidsub.errors import InsufficientDataError, ShapeError


def single(w, b, act):
    return nn.Network((np.array(w, float),), (np.array(b, float),), (act,))


def test_identity_layer_forward():
    net = single(np.eye(2), [0, 0], "identity")
    trace = nn.forward(net, [1.0, 2.0])
    assert len(trace.per_layer) == 1
    np.testing.assert_array_equal(trace.per_layer[0], [1.0, 2.0])
    np.testing.assert_array_equal(trace.logits, [1.0, 2.0])


def test_relu_layer_forward():
    # relu([1, 2] + [-3, 0]) = [0, 2]
    w, b = np.eye(2), np.array([-3.0, 0.0])
    net = nn.Network((w, np.eye(2)), (b, np.zeros(2)), ("relu", "identity"))
    np.testing.assert_array_equal(nn.forward(net, [1.0, 2.0]).per_layer[0], [0.0, 2.0])


def test_two_layers_match_hand_matrix_products():
    w1, b1 = np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([0.5, -10.0])
    w2, b2 = np.array([[1.0, -1.0], [2.0, 0.5]]), np.array([0.0, 1.0])
    net = nn.Network((w1, w2), (b1, b2), ("relu", "identity"))
    trace = nn.forward(net, [1.0, 1.0])
    # hidden: relu([3.5, -3]) = [3.5, 0]; logits: [3.5 - 0, 7 + 0 + 1]
    np.testing.assert_array_equal(trace.per_layer[0], [3.5, 0.0])
    np.testing.assert_array_equal(trace.logits, [3.5, 8.0])


def test_batch_forward_matches_rows():
    rng = np.random.default_rng(3)
    net = random_net(rng, [4, 5, 3])
    x = rng.normal(size=(6, 4))
    batch = nn.logits(net, x)
    for i in range(6):
        np.testing.assert_allclose(batch[i], nn.logits(net, x[i]), rtol=0, atol=1e-12)


def test_forward_shape_error():
    net = single(np.eye(2), [0, 0], "identity")
    with pytest.raises(ShapeError):
        nn.forward(net, [1.0, 2.0, 3.0])


def test_network_invariants():
    with pytest.raises(ShapeError):
        nn.Network((np.ones((3, 2)), np.ones((2, 4))), (np.zeros(3), np.zeros(2)), ("relu", "identity"))
    with pytest.raises(ValueError):
        nn.Network((np.eye(2),), (np.zeros(2),), ("relu",))


def test_identity_gradient_of_first_logit():
    net = single(np.eye(2), [0, 0], "identity")
    np.testing.assert_array_equal(nn.input_gradient(net, [5.0, 7.0], nn.LogitComponent(0)), [1.0, 0.0])


def test_relu_kink_contributes_zero():
    # hidden pre-activation is exactly 0 at x = [1, 1]
    net = nn.Network((np.array([[1.0, -1.0]]), np.array([[2.0]])), (np.zeros(1), np.zeros(1)), ("relu", "identity"))
    np.testing.assert_array_equal(nn.input_gradient(net, [1.0, 1.0], nn.LogitComponent(0)), [0.0, 0.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng)
    x = rng.normal(size=net.input_dim)
    label = int(rng.integers(net.num_classes))
    loss = nn.CrossEntropy(label)
    g = nn.input_gradient(net, x, loss)
    fd = central_difference(lambda v: loss(nn.logits(net, v))[0], x)
    assert np.max(np.abs(g - fd)) < 1e-4


def test_margin_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    net = random_net(rng, [5, 8, 4])
    x = rng.normal(size=5)
    loss = MarginLoss(1, kappa=100.0)
    g = nn.input_gradient(net, x, loss)
    fd = central_difference(lambda v: loss(nn.logits(net, v))[0], x)
    assert np.max(np.abs(g - fd)) < 1e-4


def test_forward_is_pure():
    rng = np.random.default_rng(0)
    net = random_net(rng, [3, 4, 2])
    x = rng.normal(size=3)
    a, b = nn.forward(net, x), nn.forward(net, x)
    for u, v in zip(a.per_layer, b.per_layer):
        np.testing.assert_array_equal(u, v)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_logit_shift(seed, c):
    rng = np.random.default_rng(seed)
    net = random_net(rng)
    x = rng.normal(size=net.input_dim)
    shifted = net.with_params(net.weights, net.biases[:-1] + (net.biases[-1] + c,))
    z, zs = nn.logits(net, x), nn.logits(shifted, x)
    np.testing.assert_allclose(zs - z, c, atol=1e-9)
    gaps = np.sort(z)[-1] - np.sort(z)[-2]
    if gaps > 1e-9:
        assert np.argmax(z) == np.argmax(zs)


def test_train_separable_blobs():
    d = data.synthetic_blobs(200, 2, 2, 0.05, seed=4)
    net = nn.train(nn.init_network((2, 16, 2), 0), d, nn.TrainConfig(0.1, 200, 32, 0))
    assert nn.accuracy(net, d) >= 0.99


def test_zero_epochs_is_noop():
    d = data.synthetic_blobs(20, 2, 2, 0.05, seed=4)
    net = nn.init_network((2, 4, 2), 0)
    out = nn.train(net, d, nn.TrainConfig(epochs=0))
    for a, b in zip(net.weights, out.weights):
        np.testing.assert_array_equal(a, b)


def test_train_is_deterministic():
    d = data.synthetic_blobs(50, 2, 3, 0.1, seed=4)
    hp = nn.TrainConfig(0.1, 5, 8, seed=9)
    a = nn.train(nn.init_network((3, 6, 2), 1), d, hp)
    b = nn.train(nn.init_network((3, 6, 2), 1), d, hp)
    for u, v in zip(a.weights + a.biases, b.weights + b.biases):
        assert u.tobytes() == v.tobytes()


def test_train_rejects_bad_data():
    net = nn.init_network((2, 2), 0)
    with pytest.raises(InsufficientDataError):
        nn.train(net, data.LabeledDataset(np.empty((0, 2)), np.empty(0)))
    with pytest.raises(ValueError):
        nn.train(net, data.LabeledDataset(np.zeros((1, 2)), [5]))


def test_accuracy_counts():
    net = single(np.eye(2), [0, 0], "identity")
    x = np.array([[1.0, 0.0], [0.0, 1.0], [0.2, 0.1], [0.3, 0.9]])
    assert nn.accuracy(net, data.LabeledDataset(x, [0, 1, 0, 1])) == 1.0
    assert nn.accuracy(net, data.LabeledDataset(x, [1, 0, 1, 0])) == 0.0
    assert nn.accuracy(net, data.LabeledDataset(x, [0, 1, 0, 0])) == 0.75
    with pytest.raises(InsufficientDataError):
        nn.accuracy(net, data.LabeledDataset(np.empty((0, 2)), []))


def test_argmax_ties_go_to_lowest_index():
    net = single(np.eye(2), [0, 0], "identity")
    assert nn.predict(net, [0.5, 0.5]) == 0


def test_weight_file_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    net = random_net(rng, [4, 3, 2])
    path = tmp_path / "m.lidnn"
    nn.save_network(net, path)
    raw = path.read_bytes()
    assert raw[:6] == b"LIDNN1"
    assert int.from_bytes(raw[6:10], "little") == 2
    # layer 0: in 4, out 3, relu (code 1)
    assert [int.from_bytes(raw[10 + 4 * i:14 + 4 * i], "little") for i in range(3)] == [4, 3, 1]
    back = nn.load_network(path)
    for a, b in zip(net.weights + net.biases, back.weights + back.biases):
        np.testing.assert_array_equal(a, b)
    assert back.activations == net.activations


def test_weight_file_rejects_garbage(tmp_path):
    path = tmp_path / "bad.lidnn"
    path.write_bytes(b"NOPE00" + b"\0" * 8)
    with pytest.raises(ValueError):
        nn.load_network(path)
    nn.save_network(nn.init_network((3, 2), 0), path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ValueError):
        nn.load_network(path)
