from densa_common import *

from densa.training import check_gradients, numeric_gradient, prepare_example, relative_error, total_loss

SMALL_BOXES = np.array([[2., 2., 6., 8.], [9., 8., 14., 15.]])


@pytest.fixture
def example(small_caps):
    backend = OracleBackend(seed=1, caps=small_caps)
    cfg = TrainConfig(pos_points_per_image=4, neg_points_per_image=4, point_pool_factor=1)
    return prepare_example(block_image(16, SMALL_BOXES), SMALL_BOXES, backend, cfg, seed=0)


def loss_and_grads(examples):
    def evaluate(heads):
        result = total_loss(examples, heads)
        return result.loss, result.grads
    return evaluate


def test_relative_error():
    assert relative_error([1., 2.], [1., 2.]) == 0.
    assert relative_error([0.], [0.]) == 0.
    assert relative_error([1.], [-1.]) == pytest.approx(1.)


def test_numeric_gradient_of_quadratic():
    param = np.array([1., -2., 3.])
    grad = numeric_gradient(lambda: float(np.sum(param ** 2)), param)
    np.testing.assert_allclose(grad, 2. * param, rtol=1e-6)
    np.testing.assert_array_equal(param, [1., -2., 3.])
    partial = numeric_gradient(lambda: float(np.sum(param ** 2)), param, max_entries=2)
    assert np.count_nonzero(np.isnan(partial)) == 1


def test_total_loss_gradients(example, small_caps):
    heads = Heads.init(small_caps, seed=3, zero_outputs=False)
    before = heads.copy()
    errors = check_gradients(loss_and_grads([example]), heads, step=1e-6, max_entries=24)
    assert set(errors) == set(heads.store.names())
    for name, error in errors.items():
        assert error < 1e-4, name
    assert heads.equals(before)


def test_batch_gradients_average(example, small_caps):
    heads = Heads.init(small_caps, seed=4, zero_outputs=False)
    single = total_loss([example], heads)
    double = total_loss([example, example], heads)
    assert double.loss == pytest.approx(single.loss)
    for name in heads.store.names():
        np.testing.assert_allclose(double.grads[name], single.grads[name], atol=1e-12)


def test_ablated_tokens_receive_no_gradient(small_caps):
    backend = OracleBackend(seed=1, caps=small_caps)
    cfg = TrainConfig(pos_points_per_image=4, neg_points_per_image=4, point_pool_factor=1,
                      token_ablation=('mask', 'iou'))
    example = prepare_example(block_image(16, SMALL_BOXES), SMALL_BOXES, backend, cfg, seed=0)
    heads = Heads.init(small_caps, seed=3, zero_outputs=False)
    grads = total_loss([example], heads).grads
    assert not grads['iou_head.fc1.weight'].any()
    assert grads['iou_head.fc2.bias'].any()


def test_loss_leaves_backbone_outputs_untouched(example, small_caps):
    heads = Heads.init(small_caps, seed=3, zero_outputs=False)
    weights, targets = example.weights.copy(), example.targets.copy()
    total_loss([example], heads)
    np.testing.assert_array_equal(example.weights, weights)
    np.testing.assert_array_equal(example.targets, targets)
