import math

import numpy as np
import pytest

from proxprune.errors import DivergenceError, ShapeMismatchError
from proxprune.model_engine import (
    Dataset,
    Gradients,
    LayerSpec,
    Model,
    OptimState,
    adam_step,
    backward,
    conv2d_gemm,
    evaluate,
    forward,
    gradient_check,
    im2col,
    col2im,
    infer_shapes,
    loss_and_grad,
    parse_architecture,
    train_model,
)
from proxprune.tensor_core import WeightCollection

CNN = ["conv2d:2:3:3:3:1:1", "relu", "conv2d:3:4:2:2:2:0", "relu", "flatten", "dense:36:3",
       "softmax-xent-loss"]


def conv_loop(x, w4, b, stride, pad):
    """Direct convolution by explicit loops (the oracle)."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w4.shape
    xp = np.pad(x, [(0, 0), (0, 0), (pad, pad), (pad, pad)])
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for s in range(n):
        for f in range(o):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[s, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[s, f, i, j] = np.sum(patch * w4[f]) + b[f]
    return out


def _cnn_batch(seed=0, n=6):
    rng = np.random.default_rng(seed)
    return Dataset(rng.normal(size=(n, 2, 6, 6)), rng.integers(0, 3, n), n_classes=3)


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 0, 2), (2, 1, 3), (3, 2, 2)])
def test_conv_gemm_matches_loop(stride, pad, k):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(2, 3, 7, 6))
    w4 = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    y, _ = conv2d_gemm(x, w4.reshape(4, -1), b, stride, pad, k, k)
    np.testing.assert_allclose(y, conv_loop(x, w4, b, stride, pad), atol=1e-10, rtol=0)


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 5, 5))
    cols = im2col(x, 3, 3, 2, 1)
    v = rng.normal(size=cols.shape)
    lhs = np.sum(cols * v)
    rhs = np.sum(x * col2im(v, x.shape, 3, 3, 2, 1))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_conv_matrix_layout_rows_are_filters():
    m = Model(CNN, (2, 6, 6))
    assert m.weights["conv0"].shape == (3, 2 * 3 * 3)
    assert m.weights["conv1"].shape == (4, 3 * 2 * 2)
    assert m.weights["dense0"].shape == (3, 36)
    assert m.weights.ids() == ["conv0", "conv1", "dense0"]


def test_layer_spec_roundtrip():
    specs = parse_architecture(",".join(CNN) + "")
    assert [str(s) for s in specs] == CNN
    assert LayerSpec.parse("dense:4:2:nobias").bias is False
    with pytest.raises(ValueError):
        LayerSpec.parse("pool:2")


def test_shapes_must_compose():
    with pytest.raises(ShapeMismatchError):
        infer_shapes(parse_architecture("dense:4:3,dense:2:1,mse-loss"), (4,))
    with pytest.raises(ShapeMismatchError):
        infer_shapes(parse_architecture("dense:4:3"), (4,))
    with pytest.raises(ShapeMismatchError):
        Model(["dense:4:3", "softmax-xent-loss"], (5,))


def test_uniform_logits_give_log_k():
    m = Model(["dense:3:5", "softmax-xent-loss"], (3,))
    m.weights["dense0"] = np.zeros((5, 3))
    batch = Dataset(np.random.default_rng(0).normal(size=(4, 3)), np.array([0, 1, 2, 4]))
    loss, logits = forward(m, batch)
    assert loss == pytest.approx(math.log(5), abs=1e-15)


def test_hand_computed_cross_entropy():
    m = Model(["dense:2:2", "softmax-xent-loss"], (2,))
    m.weights["dense0"] = np.eye(2)
    batch = Dataset(np.array([[1.0, 0.0], [0.0, 2.0]]), np.array([0, 0]))
    # logits [1, 0] label 0 -> log(1 + e^-1); logits [0, 2] label 0 -> log(1 + e^2)
    expected = 0.5 * (math.log(1 + math.exp(-1)) + math.log(1 + math.exp(2)))
    loss, logits = forward(m, batch)
    np.testing.assert_array_equal(logits, [[1.0, 0.0], [0.0, 2.0]])
    assert loss == pytest.approx(expected, rel=1e-14)


def test_duplicate_batch_invariance():
    m = Model(CNN, (2, 6, 6), seed=3)
    b = _cnn_batch()
    dup = Dataset(np.concatenate([b.inputs, b.inputs]), np.concatenate([b.labels, b.labels]))
    assert forward(m, dup)[0] == pytest.approx(forward(m, b)[0], rel=1e-13)
    g1, g2 = backward(m, b), backward(m, dup)
    for k in m.weights:
        np.testing.assert_allclose(g2.weights[k], g1.weights[k], rtol=1e-11, atol=1e-15)


def test_zero_weight_gradient_closed_form():
    m = Model(["dense:2:2", "softmax-xent-loss"], (2,))
    m.weights["dense0"] = np.zeros((2, 2))
    batch = Dataset(np.eye(2), np.array([0, 1]))
    g = backward(m, batch)
    # softmax is uniform: mean of (p - onehot) x^T over the two samples
    np.testing.assert_allclose(g.weights["dense0"], [[-0.25, 0.25], [0.25, -0.25]], atol=1e-15)
    np.testing.assert_allclose(g.biases["dense0"], [0.0, 0.0], atol=1e-15)


def test_mse_loss_and_gradient():
    m = Model(["dense:2:1:nobias", "mse-loss"], (2,))
    m.weights["dense0"] = np.array([[1.0, 2.0]])
    batch = Dataset(np.array([[1.0, 1.0], [2.0, 0.0]]), np.array([[0.0], [1.0]]))
    # residuals 3 and 1: loss = 0.5 * (9 + 1) / 2
    loss, _, g = loss_and_grad(m, batch)
    assert loss == 2.5
    np.testing.assert_allclose(g.weights["dense0"], [[(3 * 1 + 1 * 2) / 2, (3 * 1 + 1 * 0) / 2]])
    assert g.biases == {}


def test_non_finite_loss_is_divergence():
    m = Model(["dense:2:2", "softmax-xent-loss"], (2,))
    m.weights["dense0"] = np.array([[np.inf, 0.0], [0.0, 0.0]])
    with pytest.raises(DivergenceError):
        forward(m, Dataset(np.array([[-1.0, 0.0]]), np.array([0])))


def test_batch_shape_errors():
    m = Model(["dense:3:2", "softmax-xent-loss"], (3,))
    with pytest.raises(ShapeMismatchError):
        forward(m, Dataset(np.zeros((2, 4)), np.array([0, 1])))
    with pytest.raises(ValueError):
        forward(m, Dataset(np.zeros((0, 3)), np.zeros(0, dtype=int)))


@pytest.mark.parametrize("arch,shape", [
    (CNN, (2, 6, 6)),
    (["dense:5:7", "relu", "dense:7:3", "softmax-xent-loss"], (5,)),
    (["dense:5:4", "relu", "dense:4:2", "mse-loss"], (5,)),
])
def test_finite_difference_agreement(arch, shape):
    m = Model(arch, shape, seed=5)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(8,) + shape)
    y = rng.normal(size=(8, 2)) if arch[-1] == "mse-loss" else rng.integers(0, 3, 8)
    for lid in m.biases:
        m.biases[lid] += rng.normal(scale=0.1, size=m.biases[lid].shape)
    rep = gradient_check(m, Dataset(x, y), probes_per_layer=30)
    assert rep.passed, rep


def test_gradient_check_catches_broken_gradient():
    m = Model(CNN, (2, 6, 6), seed=1)

    def broken(model, batch):
        g = backward(model, batch)
        w = g.weights.copy()
        w["conv1"] = w["conv1"] * 1.01
        return Gradients(w, g.biases)

    rep = gradient_check(m, _cnn_batch(), grad_fn=broken)
    assert not rep.passed
    assert rep.per_layer["W:conv1"] > 1e-3


def test_gradient_check_rejects_empty_batch():
    m = Model(CNN, (2, 6, 6))
    with pytest.raises(ValueError):
        gradient_check(m, Dataset(np.zeros((0, 2, 6, 6)), np.zeros(0, dtype=int)))


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    st = OptimState(lr=0.1)
    adam_step(st, p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    np.testing.assert_array_equal(st.m["w"], 0.0)


def test_adam_constant_gradient_step_tends_to_lr():
    p = {"w": np.zeros(3)}
    st = OptimState(lr=1e-3)
    g = np.array([0.5, -2.0, 1e-3])
    prev = p["w"].copy()
    for _ in range(200):
        adam_step(st, p, {"w": g})
        step = p["w"] - prev
        prev = p["w"].copy()
    np.testing.assert_allclose(step, -1e-3 * np.sign(g), rtol=1e-4)


def test_adam_matches_handwritten_first_steps():
    p = {"w": np.array([1.0])}
    st = OptimState(lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8)
    adam_step(st, p, {"w": np.array([2.0])})
    adam_step(st, p, {"w": np.array([-1.0])})
    m1, v1 = 0.2, 0.004
    m2, v2 = 0.9 * m1 - 0.1, 0.999 * v1 + 0.001
    w = 1.0 - 0.01 * (m1 / 0.1) / (np.sqrt(v1 / 0.001) + 1e-8)
    w -= 0.01 * (m2 / (1 - 0.81)) / (np.sqrt(v2 / (1 - 0.999 ** 2)) + 1e-8)
    assert p["w"][0] == pytest.approx(w, rel=1e-14)


def test_training_is_deterministic():
    rng = np.random.default_rng(0)
    data = Dataset(rng.normal(size=(64, 5)), rng.integers(0, 3, 64), n_classes=3)
    runs = []
    for _ in range(2):
        m = Model(["dense:5:8", "relu", "dense:8:3", "softmax-xent-loss"], (5,), seed=4)
        train_model(m, data, 3, 1e-2, 16, seed=9)
        runs.append(m)
    for k in runs[0].parameters():
        assert runs[0].parameters()[k].tobytes() == runs[1].parameters()[k].tobytes()


def test_training_reaches_separable_fixture():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(200, 4))
    y = (x @ np.array([1.0, -2.0, 0.5, 0.0]) > 0).astype(np.int64)
    data = Dataset(x, y, n_classes=2)
    m = Model(["dense:4:2", "softmax-xent-loss"], (4,), seed=0)
    train_model(m, data, 40, 5e-2, 20, seed=0)
    assert evaluate(m, data)["accuracy"] >= 0.99


def test_copy_is_deep():
    m = Model(CNN, (2, 6, 6))
    c = m.copy()
    c.weights["conv0"][0, 0] += 1.0
    assert c.weights["conv0"][0, 0] != m.weights["conv0"][0, 0]


def test_mismatched_weights_rejected():
    with pytest.raises(ShapeMismatchError):
        Model(["dense:3:2", "softmax-xent-loss"], (3,),
              weights=WeightCollection([("dense0", np.zeros((3, 2)))]), biases={})
