import numpy as np
import pytest

from bisample import encoder as enc
from bisample.errors import (
    DegenerateVector,
    InvalidArgument,
    NonFinite,
    ShapeError,
    TapeMismatch,
)
from bisample.numkit import finite_diff_check


def identity_net(dim):
    return enc.EncoderParams([enc.Layer(np.eye(dim), np.zeros(dim), "identity")])


def test_identity_layer_normalizes():
    fb, _ = enc.forward(identity_net(2), np.array([[3.0, 4.0]]))
    assert np.allclose(fb.features, [[0.6, 0.8]], atol=1e-12)


def test_zero_weight_network_with_bias():
    params = enc.EncoderParams([enc.Layer(np.zeros((2, 3)), np.array([1.0, 0.0]), "identity")])
    fb, _ = enc.forward(params, np.random.default_rng(0).normal(size=(5, 3)))
    assert np.allclose(fb.features, np.tile([1.0, 0.0], (5, 1)), atol=1e-12)


def test_output_rows_unit_norm():
    rng = np.random.default_rng(1)
    params = enc.init_encoder(6, (8, 8), 4, rng)
    fb, _ = enc.forward(params, rng.normal(size=(17, 6)))
    assert np.abs(np.linalg.norm(fb.features, axis=1) - 1.0).max() <= 1e-9


def test_forward_shape_and_degenerate_errors():
    params = identity_net(3)
    with pytest.raises(ShapeError):
        enc.forward(params, np.zeros((2, 4)))
    with pytest.raises(DegenerateVector):
        enc.forward(params, np.zeros((1, 3)))


def test_backward_zero_upstream():
    rng = np.random.default_rng(2)
    params = enc.init_encoder(5, (6,), 4, rng)
    fb, tape = enc.forward(params, rng.normal(size=(3, 5)))
    grads, dinp = enc.backward(tape, np.zeros_like(fb.features))
    assert all(np.all(gw == 0) and np.all(gb == 0) for gw, gb in grads)
    assert np.all(dinp == 0)


def test_backward_kills_radial_component():
    # upstream aligned with the feature direction yields zero input gradient
    params = identity_net(3)
    x = np.array([[1.0, 2.0, 2.0]])
    fb, tape = enc.forward(params, x)
    _, dinp = enc.backward(tape, fb.features.copy())
    assert np.abs(dinp).max() <= 1e-12


@pytest.mark.parametrize("hidden", [(), (7,), (7, 5)])
@pytest.mark.parametrize("activation_seed", [0, 1])
def test_gradcheck_params_and_inputs(hidden, activation_seed):
    rng = np.random.default_rng(10 + activation_seed)
    params = enc.init_encoder(4, hidden, 3, rng)
    inputs = rng.normal(size=(5, 4))
    upstream = rng.normal(size=(5, 3))
    _, tape = enc.forward(params, inputs)
    grads, dinp = enc.backward(tape, upstream)

    def loss_of_inputs(x):
        fb, _ = enc.forward(params, x)
        return float(np.sum(fb.features * upstream))

    rep = finite_diff_check(loss_of_inputs, inputs, dinp, h=1e-5, tol=1e-4)
    assert rep.passed, f"input gradient check failed: {rep}"

    for k in range(len(params.layers)):
        def loss_of_w(w, k=k):
            trial = params.copy()
            trial.layers[k].weight = w
            fb, _ = enc.forward(trial, inputs)
            return float(np.sum(fb.features * upstream))

        rep = finite_diff_check(loss_of_w, params.layers[k].weight, grads[k][0], h=1e-5, tol=1e-4)
        assert rep.passed, f"weight gradient check failed at layer {k}: {rep}"

        def loss_of_b(b, k=k):
            trial = params.copy()
            trial.layers[k].bias = b
            fb, _ = enc.forward(trial, inputs)
            return float(np.sum(fb.features * upstream))

        rep = finite_diff_check(loss_of_b, params.layers[k].bias, grads[k][1], h=1e-5, tol=1e-4)
        assert rep.passed, f"bias gradient check failed at layer {k}: {rep}"


def test_stale_tape_rejected():
    rng = np.random.default_rng(3)
    params = enc.init_encoder(4, (5,), 3, rng)
    fb, tape = enc.forward(params, rng.normal(size=(2, 4)))
    grads, _ = enc.backward(tape, np.ones_like(fb.features))
    enc.sgd_step(params, grads, lr=0.1)
    with pytest.raises(TapeMismatch):
        enc.backward(tape, np.ones_like(fb.features))


def test_sgd_plain_step():
    params = identity_net(2)
    g = [(np.full((2, 2), 2.0), np.array([1.0, -1.0]))]
    enc.sgd_step(params, g, lr=0.1)
    assert np.allclose(params.layers[0].weight, np.eye(2) - 0.2, atol=1e-15)
    assert np.allclose(params.layers[0].bias, [-0.1, 0.1], atol=1e-15)


def test_sgd_zero_grad_noop():
    params = identity_net(2)
    g = [(np.zeros((2, 2)), np.zeros(2))]
    state = enc.MomentumState(params)
    enc.sgd_step(params, g, lr=0.5, momentum=0.9, state=state)
    enc.sgd_step(params, g, lr=0.5, momentum=0.9, state=state)
    assert np.array_equal(params.layers[0].weight, np.eye(2))


def test_sgd_momentum_matches_hand_recursion():
    params = identity_net(2)
    state = enc.MomentumState(params)
    g1 = np.array([[1.0, 0.0], [0.0, 2.0]])
    g2 = np.array([[0.5, 0.5], [0.5, 0.5]])
    lr, mu = 0.1, 0.9
    enc.sgd_step(params, [(g1, np.zeros(2))], lr, mu, state)
    enc.sgd_step(params, [(g2, np.zeros(2))], lr, mu, state)
    # v1 = g1; v2 = mu*g1 + g2; w = I - lr*(v1 + v2)
    expected = np.eye(2) - lr * (g1 + mu * g1 + g2)
    assert np.allclose(params.layers[0].weight, expected, atol=1e-15)


def test_sgd_errors():
    params = identity_net(2)
    with pytest.raises(NonFinite):
        enc.sgd_step(params, [(np.full((2, 2), np.nan), np.zeros(2))], lr=0.1)
    with pytest.raises(InvalidArgument):
        enc.sgd_step(params, [(np.zeros((2, 2)), np.zeros(2))], lr=0.1, momentum=0.5)


def test_hundred_steps_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        params = enc.init_encoder(6, (8,), 4, rng)
        state = enc.MomentumState(params)
        data_rng = np.random.default_rng(7)
        data = data_rng.normal(size=(100, 5, 6))
        upstream = data_rng.normal(size=(100, 5, 4))
        for i in range(100):
            _, tape = enc.forward(params, data[i])
            grads, _ = enc.backward(tape, upstream[i])
            enc.sgd_step(params, grads, lr=0.05, momentum=0.9, state=state)
        return params

    a, b = run(), run()
    for la, lb in zip(a.layers, b.layers):
        assert np.array_equal(la.weight, lb.weight)
        assert np.array_equal(la.bias, lb.bias)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    params = enc.init_encoder(6, (8, 8), 4, rng)
    p1 = tmp_path / "a.lblm"
    p2 = tmp_path / "b.lblm"
    enc.save_encoder(params, p1)
    loaded = enc.load_encoder(p1)
    enc.save_encoder(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert [l.activation for l in loaded.layers] == ["relu", "relu", "identity"]
    # f32 rounding applies once: quantize(params) equals the loaded values exactly
    q = enc.quantize(params)
    for lq, ll in zip(q.layers, loaded.layers):
        assert np.array_equal(lq.weight, ll.weight)


def test_checkpoint_magic_check(tmp_path):
    path = tmp_path / "bad.lblm"
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(InvalidArgument):
        enc.load_encoder(path)
