import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from revdomain import nn
from revdomain.nn import Parameter, SgdConfig, Tensor, grad_check, sgd_step


def naive_conv(x, k, stride, pad):
    """Direct convolution with explicit loops over every index."""
    h, w, c = x.shape
    kh, kw, _, f = k.shape
    xp = np.zeros((h + 2 * pad, w + 2 * pad, c))
    xp[pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((ho, wo, f))
    for i in range(ho):
        for j in range(wo):
            for o in range(f):
                s = 0.0
                for a in range(kh):
                    for b in range(kw):
                        for ch in range(c):
                            s += xp[i * stride + a, j * stride + b, ch] * k[a, b, ch, o]
                out[i, j, o] = s
    return out


def test_conv_scalar():
    x = Tensor(np.full((1, 1, 1, 1), 2.0))
    k = Parameter(np.full((1, 1, 1, 1), 3.0))
    assert nn.conv2d(x, k).data.ravel().tolist() == [6.0]


def test_conv_zero_kernel():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(2, 6, 7, 3)))
    k = Parameter(np.zeros((3, 3, 3, 4)))
    assert np.all(nn.conv2d(x, k, pad=1).data == 0.0)


def test_conv_matches_naive_5x5():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 5, 1))
    k = rng.normal(size=(3, 3, 1, 1))
    got = nn.conv2d(Tensor(x[None]), Parameter(k)).data[0]
    assert np.max(np.abs(got - naive_conv(x, k, 1, 0))) < 1e-12


@pytest.mark.parametrize("seed", range(6))
def test_conv_matches_naive_random(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(3, 17, size=2)
    c, f = rng.integers(1, 4, size=2)
    kh = int(rng.choice([1, 3, 5]))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 3))
    x = rng.normal(size=(h, w, c))
    k = rng.normal(size=(kh, kh, c, f))
    if h + 2 * pad < kh or w + 2 * pad < kh:
        pytest.skip("kernel larger than padded input")
    got = nn.conv2d(Tensor(x[None]), Parameter(k), stride=stride, pad=pad).data[0]
    want = naive_conv(x, k, stride, pad)
    assert got.shape == want.shape
    assert np.max(np.abs(got - want)) < 1e-12


def test_conv_shape_mismatch_names_shapes():
    x = Tensor(np.zeros((1, 4, 4, 2)))
    k = Parameter(np.zeros((3, 3, 3, 1)))
    with pytest.raises(nn.ShapeError, match=r"\(1, 4, 4, 2\).*\(3, 3, 3, 1\)"):
        nn.conv2d(x, k)


def _random_block(rng, c, scale=0.3):
    return (
        Parameter(rng.normal(scale=scale, size=(3, 3, c, c)), "w1"),
        Parameter(rng.normal(scale=scale, size=(c,)), "b1"),
        Parameter(rng.normal(scale=scale, size=(3, 3, c, c)), "w2"),
        Parameter(rng.normal(scale=scale, size=(c,)), "b2"),
    )


def test_residual_zero_weights_is_identity():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 6, 6, 4)))
    block = tuple(Parameter(np.zeros(s)) for s in [(3, 3, 4, 4), (4,), (3, 3, 4, 4), (4,)])
    y = nn.residual_block(x, block)
    assert np.array_equal(y.data, x.data)


def test_residual_channel_mismatch():
    x = Tensor(np.zeros((1, 4, 4, 3)))
    block = _random_block(np.random.default_rng(0), 4)
    with pytest.raises(nn.ShapeError):
        nn.residual_block(x, block)


def test_residual_stack_preserves_shape():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(1, 64, 64, 64)))
    block = tuple(Parameter(np.zeros(s)) for s in [(3, 3, 64, 64), (64,), (3, 3, 64, 64), (64,)])
    y = x
    for _ in range(10):
        y = nn.residual_block(y, block)
    assert y.shape == (1, 64, 64, 64)


@pytest.mark.parametrize("seed", range(10))
def test_residual_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(1, 5, 5, 2)))
    block = _random_block(rng, 2)
    err = grad_check(lambda: nn.residual_block(x, block).sum(), block, eps=1e-5)
    assert err < 1e-6


def test_relu_and_softmax_examples():
    assert nn.relu(Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    assert nn.softmax_2class(Tensor([0.0, 0.0])).data.tolist() == [0.5, 0.5]


def test_max_pool_routes_gradient():
    x = Parameter(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1))
    y = nn.max_pool_2x2(x)
    assert y.data.ravel().tolist() == [4.0]
    y.sum().backward()
    assert x.grad.reshape(2, 2).tolist() == [[0.0, 0.0], [0.0, 1.0]]


def test_max_pool_odd_rejected():
    with pytest.raises(nn.ShapeError):
        nn.max_pool_2x2(Tensor(np.zeros((1, 3, 4, 1))))


def test_fully_connected_mismatch():
    with pytest.raises(nn.ShapeError):
        nn.fully_connected(Tensor(np.zeros((2, 3))), Parameter(np.zeros((4, 1))))


def test_grad_check_linear_model():
    rng = np.random.default_rng(0)
    x = rng.normal(size=7)
    w = Parameter(rng.normal(size=7), "w")
    assert grad_check(lambda: nn.dot(w, x), [w]) < 1e-10


@pytest.mark.filterwarnings("ignore:invalid value encountered in log")
def test_grad_check_rejects_bad_eps_and_nonfinite():
    w = Parameter(np.ones(2), "w")
    with pytest.raises(ValueError):
        grad_check(lambda: w.sum(), [w], eps=1e-2)
    with pytest.raises(FloatingPointError):
        grad_check(lambda: nn.log(nn.neg(w)).sum(), [w])


COEF = np.linspace(-1.3, 2.1, 12)

# one differentiable function per elementary op; each must pass at eps=1e-5
OPS = {
    "leaky_relu": lambda p, rng: nn.leaky_relu(p[0]).sum(),
    "relu": lambda p, rng: (nn.relu(p[0]) * p[0]).sum(),
    "sigmoid": lambda p, rng: nn.sigmoid(p[0]).sum(),
    "smooth_clamp": lambda p, rng: (nn.smooth_clamp(p[0], 8.0) * p[0]).sum(),
    "abs": lambda p, rng: nn.tabs(p[0]).sum(),
    "log": lambda p, rng: nn.log(nn.sigmoid(p[0])).sum(),
    "mean": lambda p, rng: nn.mean(p[0] * p[0]),
    "mul_broadcast": lambda p, rng: (p[0] * p[1]).sum(),
    "softmax": lambda p, rng: (nn.softmax_2class(nn.reshape(p[0], (-1, 2))) * COEF.reshape(-1, 2)).sum(),
    "log_softmax": lambda p, rng: (nn.log_softmax_2class(nn.reshape(p[0], (-1, 2))) * COEF.reshape(-1, 2)).sum(),
    "max_pool": lambda p, rng: (nn.max_pool_2x2(nn.reshape(p[0], (1, 2, 6, 1))) * 1.7).sum(),
    "fully_connected": lambda p, rng: nn.sigmoid(nn.fully_connected(nn.reshape(p[0], (3, 4)), p[2])).sum(),
    "clamp_min": lambda p, rng: (nn.clamp_min(p[0], 0.05) * COEF).sum(),
    "take": lambda p, rng: (nn.take(p[0], np.array([0, 3, 3, 5])) * COEF[:4]).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", range(10))
def test_elementary_op_gradients(name, seed):
    rng = np.random.default_rng(seed)
    params = [
        Parameter(rng.normal(size=12), "a"),
        Parameter(rng.normal(size=(1, 12)), "b"),
        Parameter(rng.normal(size=(4, 2)), "w"),
    ]
    used = params if name in ("mul_broadcast", "fully_connected") else params[:1]
    err = grad_check(lambda: OPS[name](params, rng), used, eps=1e-5)
    assert err < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_conv_and_segment_mean_gradients(seed):
    rng = np.random.default_rng(seed)
    x = Parameter(rng.normal(size=(2, 6, 5, 2)), "x")
    k = Parameter(rng.normal(size=(3, 3, 2, 3)), "k")
    b = Parameter(rng.normal(size=(3,)), "b")
    labels = rng.integers(0, 4, size=2 * 6 * 5)
    labels[:4] = np.arange(4)
    pool = nn.pooling_matrix(labels, 4)
    coef = rng.normal(size=(4, 3))

    def f():
        y = nn.conv2d(x, k, b, stride=int(1 + seed % 2), pad=1)
        if seed % 2:
            return nn.sigmoid(y).sum()
        return nn.dot(nn.segment_mean(nn.leaky_relu(y), pool), coef)

    assert grad_check(f, [x, k, b], eps=1e-5) < 1e-4


@pytest.mark.parametrize("ksize,pad,stride", [(7, 3, 1), (1, 0, 1), (3, 0, 1), (3, 3, 1), (5, 1, 3)])
def test_conv_gradients_kernel_sizes(ksize, pad, stride):
    rng = np.random.default_rng(ksize * 10 + pad)
    x = Parameter(rng.normal(size=(2, 9, 8, 2)), "x")
    k = Parameter(rng.normal(size=(ksize, ksize, 2, 3)), "k")
    coef = None

    def f():
        nonlocal coef
        y = nn.conv2d(x, k, pad=pad, stride=stride)
        if coef is None:
            coef = rng.normal(size=y.shape)
        return nn.dot(y, coef)

    assert grad_check(f, [x, k], eps=1e-5) < 1e-6


def test_sgd_plain_step():
    p = Parameter(np.array([1.0, -2.0, 0.5]), "p")
    g = np.array([0.3, 0.1, -0.2])
    p.grad = g.copy()
    sgd_step([p], SgdConfig(learning_rate=1.0, momentum=0.0, weight_decay=0.0))
    assert np.abs(p.data - (np.array([1.0, -2.0, 0.5]) - g)).max() <= 1e-15


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.floats(1e-4, 2.0))
@settings(max_examples=50, deadline=None)
def test_sgd_reproduces_gradient_descent(values, lr):
    v = np.array(values)
    g = np.cos(v)
    p = Parameter(v.copy(), "p")
    p.grad = g.copy()
    sgd_step([p], SgdConfig(learning_rate=lr, momentum=0.0, weight_decay=0.0))
    assert np.abs(p.data - (v - lr * g)).max() <= 1e-15 * max(1.0, np.abs(v).max())


def test_sgd_zero_gradient_unchanged():
    p = Parameter(np.array([1.0, 2.0]), "p")
    sgd_step([p], SgdConfig(learning_rate=0.1, momentum=0.0, weight_decay=0.0))
    assert p.data.tolist() == [1.0, 2.0]


def test_sgd_momentum_and_decay():
    p = Parameter(np.array([1.0]), "p")
    cfg = SgdConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.5)
    p.grad = np.array([1.0])
    sgd_step([p], cfg)
    v1 = -0.1 * (1.0 + 0.5 * 1.0)
    assert p.data[0] == pytest.approx(1.0 + v1)
    sgd_step([p], cfg)
    v2 = 0.9 * v1 - 0.1 * (1.0 + 0.5 * (1.0 + v1))
    assert p.data[0] == pytest.approx(1.0 + v1 + v2)


def test_lr_schedule_decays_by_twenty_percent_every_twenty_epochs():
    cfg = SgdConfig()
    assert cfg.learning_rate == 1e-5 and cfg.momentum == 0.9 and cfg.weight_decay == 0.0007
    assert cfg.lr_at(19) == cfg.learning_rate
    assert cfg.lr_at(20) == pytest.approx(0.8 * cfg.learning_rate, rel=1e-15)
    assert cfg.lr_at(40) == pytest.approx(0.64 * cfg.learning_rate, rel=1e-15)


def test_sgd_nonfinite_aborts_with_name():
    a = Parameter(np.array([1.0]), "alpha")
    b = Parameter(np.array([1.0]), "bravo")
    a.grad = np.array([1.0])
    b.grad = np.array([np.nan])
    with pytest.raises(nn.NonFiniteGradientError, match="bravo"):
        sgd_step([a, b], SgdConfig(learning_rate=1.0))
    assert a.data[0] == 1.0


@pytest.mark.parametrize("kwargs", [dict(learning_rate=0.0), dict(momentum=1.0), dict(weight_decay=-1.0)])
def test_sgd_config_validation(kwargs):
    with pytest.raises(ValueError):
        SgdConfig(**kwargs)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    params = {
        "conv.w": rng.normal(size=(3, 3, 1, 4)),
        "scalar": np.array(np.pi),
        "odd": np.array([np.nextafter(1.0, 2.0), -0.0, 1e-308]),
    }
    path = tmp_path / "m.ckpt"
    nn.save_params(path, params)
    raw = path.read_bytes()
    assert raw.startswith(b"NNCKPT1\n")
    back = nn.load_params(path)
    assert list(back) == list(params)
    for k in params:
        assert back[k].shape == params[k].shape
        assert back[k].tobytes() == params[k].tobytes()
    nn.save_params(tmp_path / "again.ckpt", back)
    assert (tmp_path / "again.ckpt").read_bytes() == raw


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "one.ckpt"
    nn.save_params(path, {"ab": np.array([[1.5, 2.0]])})
    raw = path.read_bytes()
    expect = b"NNCKPT1\n" + (2).to_bytes(4, "little") + b"ab" + (2).to_bytes(4, "little")
    expect += (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + np.array([1.5, 2.0], "<f8").tobytes()
    assert raw == expect


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(b"garbage")
    with pytest.raises(nn.CheckpointError):
        nn.load_params(path)
