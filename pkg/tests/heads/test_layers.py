from densa_common import *

from densa.heads import Heads, Linear, Mlp, ParameterStore, sigmoid, softmax


def test_parameter_store():
    store = ParameterStore({'a': [1., 2.]})
    with pytest.raises(ValueError):
        store['b'] = [np.inf]
    copy = store.copy()
    copy['a'][0] = 5.
    assert store['a'][0] == 1.
    assert not store.equals(copy)
    assert store.equals(store.copy())
    assert store.norms()['a'] == pytest.approx(np.sqrt(5.))
    np.testing.assert_array_equal(store.zeros_like()['a'], [0., 0.])


def test_linear_forward():
    store = ParameterStore()
    layer = Linear(store, 'fc', 3, 2)
    store['fc.weight'] = np.arange(6.).reshape(3, 2)
    store['fc.bias'] = [1., -1.]
    y, _ = layer.forward(np.ones((4, 3)))
    np.testing.assert_allclose(y, np.tile([7., 8.], (4, 1)))
    with pytest.raises(ValueError):
        layer.forward(np.ones((4, 2)))
    with pytest.raises(ValueError):
        Linear(store, 'fc', 2, 2)


def test_mlp_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    store = ParameterStore()
    mlp = Mlp(store, 'mlp', 4, 5, 2)
    mlp.init(rng)
    x = rng.normal(size=(3, 4))
    grad_y = rng.normal(size=(3, 2))
    y, cache = mlp.forward(x)
    grads = store.zeros_like()
    grad_x = mlp.backward(cache, grad_y, grads)

    def objective():
        return float(np.sum(mlp.forward(x)[0] * grad_y))

    step = 1e-6
    for name in store.names():
        value = store[name]
        flat_idx = np.unravel_index(int(rng.integers(value.size)), value.shape)
        plus, minus = value.copy(), value.copy()
        plus[flat_idx] += step
        minus[flat_idx] -= step
        store[name] = plus
        f_plus = objective()
        store[name] = minus
        f_minus = objective()
        store[name] = value
        assert grads[name][flat_idx] == pytest.approx((f_plus - f_minus) / (2 * step), rel=1e-5, abs=1e-8)

    x_plus, x_minus = x.copy(), x.copy()
    x_plus[1, 2] += step
    x_minus[1, 2] -= step
    numeric = (np.sum(mlp.forward(x_plus)[0] * grad_y) - np.sum(mlp.forward(x_minus)[0] * grad_y)) / (2 * step)
    assert grad_x[1, 2] == pytest.approx(numeric, rel=1e-5, abs=1e-8)


def test_sigmoid_stable():
    values = sigmoid(np.array([-1000., -1., 0., 1., 1000.]))
    assert np.all(np.isfinite(values))
    np.testing.assert_allclose(values, [0., 1 / (1 + np.e), 0.5, 1 / (1 + np.exp(-1)), 1.])


def test_softmax():
    probs = softmax(np.array([[1000., 1000.], [0., np.log(3.)]]))
    np.testing.assert_allclose(probs, [[0.5, 0.5], [0.25, 0.75]])


def test_heads_init(small_caps):
    heads = Heads.init(small_caps, seed=1)
    assert not np.any(heads.cls.weight)
    assert not np.any(heads.store['iou_head.fc2.weight'])
    assert np.any(heads.store['adapter.fc1.weight'])
    random_heads = Heads.init(small_caps, seed=1, zero_outputs=False)
    assert np.any(random_heads.cls.weight)
    assert Heads.init(small_caps, seed=1).equals(heads)
    assert heads.copy().equals(heads)


def test_heads_from_tensors(small_caps):
    heads = Heads.init(small_caps, seed=2)
    restored = Heads.from_tensors(small_caps, heads.tensors())
    assert restored.equals(heads)
    tensors = heads.tensors()
    tensors.pop('cls.bias')
    with pytest.raises(ValueError):
        Heads.from_tensors(small_caps, tensors)
