import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bfalab import tensor
from bfalab.models import LayerSpec


def dense_net(sizes, rng, dropout=0.0):
    specs, params = [], []
    for n, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        specs.append(LayerSpec("dense", a, b))
        params.append((rng.normal(0, 0.7, (a, b)), rng.normal(0, 0.1, b)))
        if n < len(sizes) - 2:
            specs.append(LayerSpec("relu"))
            params.append(None)
            if dropout:
                specs.append(LayerSpec("dropout", rate=dropout))
                params.append(None)
    return specs, params


def conv_net(rng, c=2, hw=6, f=3, k=3, hidden=5, classes=3):
    flat = f * (hw - k + 1) ** 2
    specs = [LayerSpec("conv2d", c, f, kernel=k), LayerSpec("relu"), LayerSpec("flatten"),
             LayerSpec("dense", flat, hidden), LayerSpec("relu"), LayerSpec("dropout", rate=0.3),
             LayerSpec("dense", hidden, classes)]
    params = [(rng.normal(0, 0.5, (f, c, k, k)), rng.normal(0, 0.1, f)), None, None,
              (rng.normal(0, 0.3, (flat, hidden)), rng.normal(0, 0.1, hidden)), None, None,
              (rng.normal(0, 0.5, (hidden, classes)), rng.normal(0, 0.1, classes))]
    return specs, params


def loss_at(specs, params, x, y, mask_seed):
    rng = np.random.default_rng(mask_seed) if mask_seed is not None else None
    logits, _ = tensor.forward(specs, params, x, train=mask_seed is not None, rng=rng, keep=False)
    return tensor.cross_entropy(logits, y)


def max_fd_error(specs, params, x, y, rng, per_layer=5, h=1e-5, mask_seed=None):
    fwd_rng = np.random.default_rng(mask_seed) if mask_seed is not None else None
    _, state = tensor.forward(specs, params, x, train=mask_seed is not None, rng=fwd_rng)
    tensor.backward(state, y, specs)
    worst = 0.0
    for i, p in enumerate(params):
        if p is None:
            continue
        for which, analytic in ((0, state.weight_grads[i]), (1, state.bias_grads[i])):
            arr = p[which]
            assert analytic.shape == arr.shape
            for j in rng.choice(arr.size, size=min(per_layer, arr.size), replace=False):
                old = arr.flat[j]
                arr.flat[j] = old + h
                up = loss_at(specs, params, x, y, mask_seed)
                arr.flat[j] = old - h
                down = loss_at(specs, params, x, y, mask_seed)
                arr.flat[j] = old
                fd = (up - down) / (2 * h)
                worst = max(worst, abs(analytic.flat[j] - fd) / max(1.0, abs(fd)))
    return worst


def test_identity_dense():
    specs = [LayerSpec("dense", 2, 2)]
    logits, _ = tensor.forward(specs, [(np.eye(2), np.zeros(2))], np.array([[3.0, -1.0]]))
    np.testing.assert_array_equal(logits, [[3.0, -1.0]])


def test_scalar_dense():
    logits, _ = tensor.forward([LayerSpec("dense", 1, 1)], [(np.array([[2.0]]), np.zeros(1))], np.array([[1.5]]))
    assert logits[0, 0] == 3.0


def test_conv_box_sum():
    w = np.ones((1, 1, 3, 3))
    out = tensor.conv2d_forward(np.ones((1, 1, 5, 5)), w, np.zeros(1))
    np.testing.assert_array_equal(out, np.full((1, 1, 3, 3), 9.0))


def test_conv_matches_direct_loop(rng):
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 2))
    b = rng.normal(size=4)
    out = tensor.conv2d_forward(x, w, b)
    ref = np.zeros((2, 4, 5, 5))
    for n in range(2):
        for f in range(4):
            for i in range(5):
                for j in range(5):
                    ref[n, f, i, j] = np.sum(x[n, :, i:i + 3, j:j + 2] * w[f]) + b[f]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_shape_mismatch_rejected(rng):
    specs, params = dense_net((4, 3), rng)
    with pytest.raises(tensor.ShapeError):
        tensor.forward(specs, params, np.zeros((2, 5)))
    specs, params = conv_net(rng)
    with pytest.raises(tensor.ShapeError):
        tensor.forward(specs, params, np.zeros((2, 1, 6, 6)))


def test_cross_entropy_uniform_logits():
    assert tensor.cross_entropy(np.zeros((5, 10)), np.arange(5)) == pytest.approx(np.log(10), abs=1e-12)


def test_cross_entropy_saturated():
    logits = np.eye(4) * 1e6
    assert tensor.cross_entropy(logits, np.arange(4)) == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_high_precision_oracle():
    rng = np.random.default_rng(7)
    logits = rng.normal(0, 3, (4, 3))
    labels = np.array([0, 2, 1, 2])
    mpmath.mp.dps = 50
    total = mpmath.mpf(0)
    for row, y in zip(logits, labels):
        z = [mpmath.mpf(float(v)) for v in row]
        total += -(z[y] - mpmath.log(sum(mpmath.exp(v) for v in z)))
    expected = float(total / len(labels))
    assert tensor.cross_entropy(logits, labels) == pytest.approx(expected, rel=1e-13)


@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(2, 8))
def test_softmax_grad_rows_sum_to_zero(seed, n, c):
    rng = np.random.default_rng(seed)
    logits = rng.normal(0, 5, (n, c))
    g = tensor.cross_entropy_grad(logits, rng.integers(0, c, n))
    np.testing.assert_allclose(g.sum(axis=1), 0.0, atol=1e-15)


def test_labels_out_of_range():
    with pytest.raises(ValueError):
        tensor.cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["dense", "dense-dropout", "conv"]))
def test_gradients_match_finite_differences(seed, kind):
    rng = np.random.default_rng(seed)
    if kind == "conv":
        specs, params = conv_net(rng)
        x = rng.random((3, 2, 6, 6))
        y = rng.integers(0, 3, 3)
    else:
        specs, params = dense_net((6, 5, 4, 3), rng, dropout=0.25 if kind == "dense-dropout" else 0.0)
        x = rng.normal(size=(4, 6))
        y = rng.integers(0, 3, 4)
    mask_seed = seed if kind != "dense" else None
    assert max_fd_error(specs, params, x, y, rng, mask_seed=mask_seed) < 1e-6


def test_twenty_weights_per_layer_two_layer_net(rng):
    specs, params = dense_net((8, 6, 4), rng)
    x = rng.normal(size=(5, 8))
    y = rng.integers(0, 4, 5)
    assert max_fd_error(specs, params, x, y, rng, per_layer=20) < 1e-6


def test_zero_input_kills_first_layer_gradient(rng):
    specs, params = dense_net((5, 4, 3), rng)
    params[0] = (params[0][0], np.zeros(4))
    _, state = tensor.forward(specs, params, np.zeros((3, 5)))
    tensor.backward(state, np.array([0, 1, 2]), specs)
    assert np.all(state.weight_grads[0] == 0.0)


def test_downstream_weight_enters_upstream_gradient(rng):
    # dL/dw_ij = a_i * rho_j with rho_j = (sum_k w_jk rho_k) relu'(o_j)
    specs, params = dense_net((4, 3, 2), rng)
    x = rng.normal(size=(1, 4))
    y = np.array([1])

    def grads(p):
        _, s = tensor.forward(specs, p, x)
        return tensor.backward(s, y, specs)

    s0 = grads(params)
    a = s0.inputs[0]
    o = s0.outputs[0]
    rho_out = s0.deltas[2]
    rho_hidden = (rho_out @ params[2][0].T) * (o > 0)
    np.testing.assert_allclose(s0.deltas[0], rho_hidden, rtol=1e-12)
    np.testing.assert_allclose(s0.weight_grads[0], a.T @ rho_hidden, rtol=1e-12)

    j = int(np.argmax(o[0] > 0))  # an active hidden unit
    w2 = params[2][0].copy()
    w2[j, 0] += 0.5
    perturbed = [params[0], None, (w2, params[2][1])]
    s1 = grads(perturbed)
    assert not np.allclose(s1.weight_grads[0][:, j], s0.weight_grads[0][:, j])
    assert max_fd_error(specs, perturbed, x, y, rng, per_layer=12) < 1e-6


def test_backward_before_forward():
    with pytest.raises(tensor.ProtocolError):
        tensor.backward(None, np.array([0]), [LayerSpec("dense", 1, 1)])
    _, state = tensor.forward([LayerSpec("dense", 1, 2)], [(np.ones((1, 2)), np.zeros(2))], np.ones((1, 1)),
                              keep=False)
    with pytest.raises(tensor.ProtocolError):
        tensor.backward(state, np.array([0]), [LayerSpec("dense", 1, 2)])


def test_forward_deterministic(rng):
    specs, params = conv_net(rng)
    x = rng.random((4, 2, 6, 6))
    a, _ = tensor.forward(specs, params, x)
    b, _ = tensor.forward(specs, params, x.copy())
    assert a.tobytes() == b.tobytes()


def test_dropout_modes():
    spec = [LayerSpec("dropout", rate=0.4)]
    x = np.ones((200, 50))
    out, _ = tensor.forward(spec, [None], x, train=False)
    np.testing.assert_array_equal(out, x)
    out, _ = tensor.forward(spec, [None], x, train=True, rng=np.random.default_rng(0))
    kept = out != 0
    assert np.allclose(out[kept], 1 / 0.6)
    assert abs(1 - kept.mean() - 0.4) < 0.02
    zero = [LayerSpec("dropout", rate=0.0)]
    a, _ = tensor.forward(zero, [None], x, train=True, rng=np.random.default_rng(0))
    b, _ = tensor.forward(zero, [None], x, train=False)
    np.testing.assert_array_equal(a, b)


def test_gradient_shapes(rng):
    specs, params = conv_net(rng)
    _, state = tensor.forward(specs, params, rng.random((2, 2, 6, 6)))
    tensor.backward(state, np.array([0, 1]), specs)
    for i, p in enumerate(params):
        if p is not None:
            assert state.weight_grads[i].shape == p[0].shape
            assert state.deltas[i].shape == state.outputs[i].shape
