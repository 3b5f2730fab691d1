import numpy as np
import pytest

from nmfsed import nn

F64 = np.float64


def scalar_conv(x, w, b):
    """Reference same-padded convolution, plain loops."""
    n, c, h, ww = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    xpad = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    y = np.zeros((n, o, h, ww))
    for ni in range(n):
        for oi in range(o):
            for i in range(h):
                for j in range(ww):
                    acc = 0.0
                    for ci in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += w[oi, ci, di, dj] * xpad[ni, ci, i + di, j + dj]
                    y[ni, oi, i, j] = acc + b[oi]
    return y


def check_layer_grads(layer, x, seed=0, tol=1e-6, loss=nn.mse):
    """Gradcheck params and the input of a single layer under an MSE loss."""
    rng = np.random.default_rng(seed)
    target = rng.standard_normal(layer.forward(x).shape)
    loss_grad = {nn.mse: nn.mse_grad, nn.bce: nn.bce_grad}[loss]

    layer.zero_grads()
    y = layer.forward(x)
    dx = layer.backward(loss_grad(y, target))

    def f():
        return loss(layer.forward(x), target)

    slots = list(layer.params()) + [("x", x, dx)]
    err = nn.grad_check(f, slots, samples_per_param=8, seed=seed)
    assert err < tol, f"{type(layer).__name__}: max rel grad error {err:.3g}"


# ----------------------------------------------------------------------- conv

def test_conv_matches_scalar_loop():
    rng = np.random.default_rng(0)
    for k in (1, 3):
        x = rng.standard_normal((2, 3, 5, 4))
        conv = nn.Conv2d(3, 4, ksize=k, rng=rng, dtype=F64)
        got = conv.forward(x)
        want = scalar_conv(x, conv.W, conv.b)
        assert np.allclose(got, want, atol=1e-12)


def test_conv_identity_kernel():
    x = np.random.default_rng(1).standard_normal((1, 1, 6, 6))
    conv = nn.Conv2d(1, 1, ksize=3, rng=0, dtype=F64)
    conv.W[...] = 0.0
    conv.W[0, 0, 1, 1] = 1.0
    conv.b[...] = 0.0
    assert np.allclose(conv.forward(x), x)


def test_conv_gradcheck():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 2, 5, 4))
    check_layer_grads(nn.Conv2d(2, 3, ksize=3, rng=5, dtype=F64), x, tol=1e-5)


def test_conv_rejects_even_kernel_and_bad_channels():
    with pytest.raises(ValueError, match="odd"):
        nn.Conv2d(1, 1, ksize=2)
    conv = nn.Conv2d(2, 1, ksize=3, dtype=F64)
    with pytest.raises(ValueError, match="channels"):
        conv.forward(np.zeros((1, 3, 4, 4)))


# ---------------------------------------------------------------- dense/relu

def test_dense_matches_matmul_and_grads():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 6))
    layer = nn.Dense(6, 3, rng=7, dtype=F64)
    assert np.allclose(layer.forward(x), x @ layer.W + layer.b)
    check_layer_grads(layer, x, tol=1e-6)


def test_relu_values_and_grads():
    x = np.array([[-2.0, -0.5, 0.0, 0.5, 2.0]])
    layer = nn.Relu()
    assert layer.forward(x).tolist() == [[0.0, 0.0, 0.0, 0.5, 2.0]]
    rng = np.random.default_rng(4)
    z = rng.standard_normal((3, 7))
    z = np.where(np.abs(z) < 0.05, 0.5, z)  # keep the FD probe off the kink
    check_layer_grads(nn.Relu(), z, tol=1e-6)


def test_sigmoid_values_and_grads():
    layer = nn.Sigmoid()
    y = layer.forward(np.array([0.0, 100.0, -100.0]))
    assert y[0] == 0.5 and y[1] > 0.999999 and y[2] < 1e-6
    rng = np.random.default_rng(5)
    check_layer_grads(nn.Sigmoid(), rng.standard_normal((2, 9)), tol=1e-6)


# --------------------------------------------------------------- context gate

def test_context_gate_zero_weights_halves_input():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 4, 3, 3))
    gate = nn.ContextGate(4, rng=0, dtype=F64)
    gate.W[...] = 0.0
    assert np.allclose(gate.forward(x), 0.5 * x)
    gate.b[...] = 50.0  # gate saturates open
    assert np.allclose(gate.forward(x), x, atol=1e-12)


def test_context_gate_matches_scalar_loop():
    rng = np.random.default_rng(40)
    x = rng.standard_normal((2, 3, 4, 2))
    gate = nn.ContextGate(3, rng=rng, dtype=F64)
    got = gate.forward(x)
    n, c, h, w = x.shape
    for ni in range(n):
        for i in range(h):
            for j in range(w):
                for co in range(c):
                    z = gate.b[co]
                    for ci in range(c):
                        z += gate.W[co, ci] * x[ni, ci, i, j]
                    want = x[ni, co, i, j] / (1.0 + np.exp(-z))
                    assert abs(got[ni, co, i, j] - want) < 1e-12


def test_context_gate_gradcheck():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 3, 4, 3))
    check_layer_grads(nn.ContextGate(3, rng=9, dtype=F64), x, tol=1e-5)


# -------------------------------------------------------------------- pooling

def test_maxpool_forward_loop_oracle():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 3, 6, 8))
    pool = nn.MaxPool2d(2, 4)
    got = pool.forward(x)
    for n in range(2):
        for c in range(3):
            for i in range(3):
                for j in range(2):
                    assert got[n, c, i, j] == x[n, c, 2 * i:2 * i + 2,
                                                4 * j:4 * j + 4].max()


def test_maxpool_backward_routes_to_argmax():
    x = np.zeros((1, 1, 2, 2))
    x[0, 0, 1, 0] = 5.0
    pool = nn.MaxPool2d(2, 2)
    pool.forward(x)
    dx = pool.backward(np.array([[[[2.5]]]]))
    want = np.zeros_like(x)
    want[0, 0, 1, 0] = 2.5
    assert np.array_equal(dx, want)


def test_maxpool_tie_goes_to_first_entry():
    x = np.ones((1, 1, 2, 2))
    pool = nn.MaxPool2d(2, 2)
    pool.forward(x)
    dx = pool.backward(np.ones((1, 1, 1, 1)))
    assert dx[0, 0, 0, 0] == 1.0 and dx.sum() == 1.0


def test_maxpool_gradcheck():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 2, 4, 4))  # distinct values, FD-safe
    check_layer_grads(nn.MaxPool2d(2, 2), x, tol=1e-6)


def test_maxpool_rejects_indivisible():
    with pytest.raises(ValueError, match="divisible"):
        nn.MaxPool2d(2, 2).forward(np.zeros((1, 1, 5, 4)))


def test_avgpool_and_global_avgpool():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((2, 3, 4, 6))
    got = nn.AvgPool2d(2, 3).forward(x)
    assert np.allclose(got[1, 2, 0, 1], x[1, 2, 0:2, 3:6].mean())
    check_layer_grads(nn.AvgPool2d(2, 3), x, tol=1e-6)
    g = nn.GlobalAvgPool().forward(x)
    assert np.allclose(g, x.mean(axis=(2, 3)))
    check_layer_grads(nn.GlobalAvgPool(), x, tol=1e-6)


# -------------------------------------------------------------------- dropout

def test_dropout_eval_is_identity():
    x = np.random.default_rng(11).standard_normal((5, 5))
    layer = nn.Dropout(0.4)
    assert layer.forward(x, training=False) is x


def test_dropout_keeps_expectation_and_rate():
    p = 0.35
    layer = nn.Dropout(p)
    x = np.ones((200, 100))
    rng = np.random.default_rng(12)
    y = layer.forward(x, training=True, rng=rng)
    zeros = np.mean(y == 0.0)
    assert abs(zeros - p) < 0.02
    assert abs(y.mean() - 1.0) < 0.02
    nz = y[y != 0.0]
    assert np.allclose(nz, 1.0 / (1.0 - p))


def test_dropout_deterministic_and_backward_uses_same_mask():
    x = np.ones((64, 64))
    layer = nn.Dropout(0.5)
    y1 = layer.forward(x, training=True, rng=np.random.default_rng(3))
    dy = np.ones_like(x)
    dx = layer.backward(dy)
    assert np.array_equal((dx == 0), (y1 == 0))
    y2 = nn.Dropout(0.5).forward(x, training=True, rng=np.random.default_rng(3))
    assert np.array_equal(y1, y2)
    with pytest.raises(ValueError, match="rng"):
        nn.Dropout(0.5).forward(x, training=True)


# ------------------------------------------------------------------ batchnorm

def test_batchnorm_normalizes_batch():
    rng = np.random.default_rng(13)
    x = rng.standard_normal((8, 3, 5, 5)) * 4.0 + 2.0
    bn = nn.BatchNorm(3, dtype=F64)
    y = bn.forward(x, training=True)
    assert np.allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    assert np.allclose(y.var(axis=(0, 2, 3)), 1.0, atol=1e-3)


def test_batchnorm_gradcheck_training_mode():
    rng = np.random.default_rng(14)
    x = rng.standard_normal((4, 2, 3, 3))
    bn = nn.BatchNorm(2, dtype=F64)
    target = rng.standard_normal(x.shape)

    bn.zero_grads()
    y = bn.forward(x, training=True)
    dx = bn.backward(nn.mse_grad(y, target))

    def f():
        return nn.mse(bn.forward(x, training=True), target)

    err = nn.grad_check(f, list(bn.params()) + [("x", x, dx)],
                        samples_per_param=8, seed=0)
    assert err < 1e-5


# --------------------------------------------------------------------- losses

def test_bce_hand_values():
    pred = np.array([0.5, 0.9, 0.1])
    target = np.array([1.0, 1.0, 0.0])
    want = -(np.log(0.5) + np.log(0.9) + np.log(0.9)) / 3.0
    assert abs(nn.bce(pred, target) - want) < 1e-12
    assert abs(nn.bce(np.array([0.5]), np.array([1.0])) - np.log(2.0)) < 1e-12
    assert nn.bce(np.array([1e-30]), np.array([0.0])) < 1e-6  # clamp keeps it finite
    assert np.isfinite(nn.bce(np.array([0.0, 1.0]), np.array([1.0, 0.0])))
    assert nn.bce(np.array([1.0, 0.0]), np.array([1.0, 0.0])) <= 1e-6


def test_bce_matches_scalar_loop():
    rng = np.random.default_rng(41)
    pred = rng.uniform(0.01, 0.99, size=(3, 5))
    target = rng.random((3, 5))
    acc = 0.0
    for i in range(3):
        for j in range(5):
            p, t = pred[i, j], target[i, j]
            acc += -(t * np.log(p) + (1 - t) * np.log(1 - p))
    assert abs(nn.bce(pred, target) - acc / 15.0) < 1e-12


def test_bce_grad_matches_fd():
    rng = np.random.default_rng(15)
    pred = rng.uniform(0.2, 0.8, size=(4, 3))
    target = (rng.random((4, 3)) < 0.5).astype(float)
    g = nn.bce_grad(pred, target)

    def f():
        return nn.bce(pred, target)

    err = nn.grad_check(f, [("p", pred, g)], samples_per_param=12, seed=1)
    assert err < 1e-7


def test_mse_hand_values_and_grad():
    pred = np.array([1.0, 2.0, 3.0])
    target = np.array([1.0, 0.0, 0.0])
    assert abs(nn.mse(pred, target) - (0.0 + 4.0 + 9.0) / 3.0) < 1e-12
    g = nn.mse_grad(pred, target)
    assert np.allclose(g, 2.0 * (pred - target) / 3.0)


# ----------------------------------------------------------------------- adam

def test_adam_minimizes_quadratic():
    x = np.array([10.0])
    g = np.zeros(1)
    opt = nn.Adam([("x", x, g)], lr=0.1)
    for _ in range(600):
        g[...] = 2.0 * (x - 3.0)
        opt.step()
    assert abs(x[0] - 3.0) < 1e-3


def test_adam_matches_hand_reference():
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.01
    x = np.array([2.0])
    g = np.zeros(1)
    opt = nn.Adam([("x", x, g)], lr=lr, beta1=b1, beta2=b2, eps=eps)
    xr, m, v = 2.0, 0.0, 0.0
    for t in range(1, 6):
        grad = np.sin(xr) + 0.3 * xr  # arbitrary smooth gradient
        g[...] = grad
        opt.step()
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        xr -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        assert abs(x[0] - xr) < 1e-12


def test_adam_lr_override_per_step():
    x = np.array([1.0])
    g = np.ones(1)
    opt = nn.Adam([("x", x, g)], lr=0.5)
    opt.step(lr=0.0)
    assert x[0] == 1.0  # zero lr leaves the parameter alone


def test_adam_zero_grad_no_motion():
    x = np.array([1.0, -2.0])
    g = np.zeros(2)
    opt = nn.Adam([("x", x, g)], lr=0.3)
    opt.step()
    assert opt.t == 1
    assert np.array_equal(x, [1.0, -2.0])


def test_adam_first_step_is_signed_lr():
    for g0 in (0.7, -3.0, 1e-4):
        x = np.array([0.0])
        g = np.array([g0])
        opt = nn.Adam([("x", x, g)], lr=0.05)
        opt.step()
        # bias-corrected first step collapses to lr * g/(|g| + eps),
        # i.e. lr * sign(g) up to the eps correction
        assert abs(x[0] - (-0.05 * g0 / (abs(g0) + 1e-8))) < 1e-15
    assert abs(x[0] + 0.05 * np.sign(g0)) < 1e-8 * 0.05 / abs(g0) + 1e-12


# -------------------------------------------------------------------- network

def make_small_net(rng):
    return nn.Network([
        nn.Conv2d(1, 4, ksize=3, rng=rng, dtype=F64),
        nn.ContextGate(4, rng=rng, dtype=F64),
        nn.MaxPool2d(1, 2),
        nn.Conv2d(4, 2, ksize=1, rng=rng, dtype=F64),
        nn.Sigmoid(),
    ])


def test_empty_network_is_identity():
    net = nn.Network([])
    x = np.random.default_rng(42).standard_normal((3, 4))
    assert net.forward(x) is x
    dy = np.ones((3, 4))
    assert net.backward(dy) is dy


def test_network_composite_gradcheck():
    rng = np.random.default_rng(16)
    net = make_small_net(rng)
    x = rng.standard_normal((2, 1, 6, 4))
    target = (rng.random(net.forward(x).shape) < 0.5).astype(float)

    net.zero_grads()
    y = net.forward(x)
    net.backward(nn.bce_grad(y, target))

    def f():
        return nn.bce(net.forward(x), target)

    err = nn.grad_check(f, net.params(), samples_per_param=5, seed=2)
    assert err < 1e-4


def test_network_zero_grads_and_param_names():
    net = make_small_net(np.random.default_rng(17))
    names = [name for name, _, _ in net.params()]
    assert names[0] == "00_conv2d.W" and "01_contextgate.W" in names
    assert len(names) == len(set(names))
    x = np.random.default_rng(18).standard_normal((1, 1, 6, 4))
    net.backward(nn.mse_grad(net.forward(x), np.zeros((1, 2, 6, 2))))
    assert any(np.abs(g).sum() > 0 for _, _, g in net.params())
    net.zero_grads()
    assert all(np.abs(g).sum() == 0 for _, _, g in net.params())


def test_dropout_in_network_needs_training_flag():
    net = nn.Network([nn.Dropout(0.5)])
    x = np.ones((4, 4))
    assert np.array_equal(net.forward(x, training=False), x)
    y1 = net.forward(x, training=True, seed=5)
    y2 = net.forward(x, training=True, seed=5)
    assert np.array_equal(y1, y2)
    assert (y1 == 0).any()


# ----------------------------------------------------------------- checkpoint

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(19)
    net = make_small_net(rng)
    path = tmp_path / "net.npz"
    nn.save_params(path, net, meta={"epoch": 3, "kind": "sm"})
    other = make_small_net(np.random.default_rng(99))
    before = [arr.copy() for _, arr, _ in other.params()]
    meta = nn.load_params(path, other)
    assert meta == {"epoch": 3, "kind": "sm"}
    for (_, a, _), (_, b, _) in zip(net.params(), other.params()):
        assert np.array_equal(a, b)
    assert any(not np.array_equal(x, arr)
               for x, (_, arr, _) in zip(before, other.params()))


def test_checkpoint_rejects_mismatched_architecture(tmp_path):
    net = make_small_net(np.random.default_rng(20))
    path = tmp_path / "net.npz"
    nn.save_params(path, net)
    other = nn.Network([nn.Dense(3, 2, rng=0, dtype=F64)])
    with pytest.raises(ValueError, match="do not match"):
        nn.load_params(path, other)
    wrong_shape = nn.Network([
        nn.Conv2d(1, 4, ksize=3, rng=0, dtype=F64),
        nn.ContextGate(4, rng=0, dtype=F64),
        nn.MaxPool2d(1, 2),
        nn.Conv2d(4, 3, ksize=1, rng=0, dtype=F64),  # head differs
        nn.Sigmoid(),
    ])
    with pytest.raises(ValueError):
        nn.load_params(path, wrong_shape)
