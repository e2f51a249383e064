import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actmark.data import SyntheticSpec, gen_synthetic
from actmark.errors import InputError, NumericError, ShapeError
from actmark.nn import (MLP, Gradients, TrainConfig, accuracy, backward, epoch_order, forward,
                        init_mlp, sgd_step, softmax_cross_entropy, train)
from actmark.verify import central_difference, rel_error


def reference_forward(weights, biases, x):
    """Second, loop-based forward pass used as an oracle."""
    a = [list(map(float, row)) for row in x]
    for li, (w, b) in enumerate(zip(weights, biases)):
        out = []
        for row in a:
            z = [sum(row[i] * float(w[i, j]) for i in range(w.shape[0])) + float(b[j])
                 for j in range(w.shape[1])]
            out.append(z if li == len(weights) - 1 else [max(v, 0.0) for v in z])
        a = out
    return np.array(a)


def test_zero_model_gives_zero_outputs():
    model = MLP([np.zeros((5, 3), np.float32), np.zeros((3, 2), np.float32)],
                [np.zeros(3, np.float32), np.zeros(2, np.float32)])
    snap = forward(model, np.random.default_rng(0).uniform(size=(4, 5)))
    assert not snap.hidden[0].any()
    assert not snap.logits.any()


def test_one_dimensional_layer_by_hand():
    model = MLP([np.array([[2.0]]), np.array([[1.0]])], [np.array([-1.0]), np.array([0.0])])
    assert forward(model, np.array([[3.0]])).hidden[0][0, 0] == 5.0


def test_forward_matches_reference_implementation():
    model = init_mlp([6, 5, 4, 3], seed=42)
    model.biases = [np.random.default_rng(1).normal(0, .1, b.shape).astype(np.float32)
                    for b in model.biases]
    x = np.random.default_rng(2).uniform(size=(7, 6))
    np.testing.assert_allclose(forward(model, x).logits,
                               reference_forward(model.weights, model.biases, x), rtol=1e-10)


def test_forward_rejects_wrong_width():
    with pytest.raises(ShapeError):
        forward(init_mlp([4, 3, 2], 0), np.zeros((2, 5)))


def test_mlp_rejects_unchained_layers():
    with pytest.raises(ShapeError):
        MLP([np.zeros((4, 3)), np.zeros((2, 2))], [np.zeros(3), np.zeros(2)])


def test_uniform_logits_loss_is_log_c():
    loss, _ = softmax_cross_entropy(np.zeros((3, 10)), [0, 4, 9])
    assert loss == pytest.approx(np.log(10), abs=1e-12)


def test_saturated_prediction_has_vanishing_loss():
    z = np.zeros((1, 10))
    z[0, 3] = 1e4
    loss, grad = softmax_cross_entropy(z, [3])
    assert loss < 1e-12
    assert np.abs(grad).max() < 1e-12


def test_label_out_of_range():
    with pytest.raises(InputError):
        softmax_cross_entropy(np.zeros((1, 3)), [3])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(2, 10), st.integers(0, 2**31))
def test_cross_entropy_gradient_matches_finite_differences(n, c, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(0, 3, (n, c))
    y = rng.integers(0, c, n)
    _, g = softmax_cross_entropy(z, y)
    fd = central_difference(lambda: softmax_cross_entropy(z, y)[0], z)
    assert rel_error(g, fd) < 1e-4


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31))
def test_backprop_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    dims = [int(d) for d in rng.integers(2, 7, 4)]
    model = init_mlp(dims, seed, dtype=np.float64)
    model.biases = [rng.normal(0, .3, b.shape) for b in model.biases]
    x = rng.uniform(size=(int(rng.integers(1, 5)), dims[0]))
    y = rng.integers(0, dims[-1], len(x))
    extra = rng.normal(size=(len(x), dims[1]))

    def total():
        snap = forward(model, x)
        return softmax_cross_entropy(snap.logits, y)[0] + float((extra * snap.hidden[0]).sum())

    snap = forward(model, x)
    grads = backward(model, snap, softmax_cross_entropy(snap.logits, y)[1], {0: extra})
    for g, p in zip(grads.weights + grads.biases, model.weights + model.biases):
        assert rel_error(g, central_difference(total, p)) < 1e-4


def test_backward_rejects_bad_extra_shape():
    model = init_mlp([3, 4, 2], 0)
    snap = forward(model, np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        backward(model, snap, np.zeros((2, 2)), {0: np.zeros((2, 5))})


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_backward_reports_nonfinite_layer():
    model = init_mlp([3, 4, 2], 0)
    snap = forward(model, np.ones((2, 3)))
    with pytest.raises(NumericError) as info:
        backward(model, snap, np.full((2, 2), np.inf))
    assert info.value.layer == 1


def _zero_grads(model):
    return Gradients([np.zeros_like(w, dtype=np.float64) for w in model.weights],
                     [np.zeros_like(b, dtype=np.float64) for b in model.biases])


def test_zero_gradient_or_zero_rate_leaves_model_unchanged():
    model = init_mlp([3, 4, 2], 0)
    before = model.copy()
    sgd_step(model, _zero_grads(model), 0.5)
    assert model.equals(before)
    grads = _zero_grads(model)
    grads.weights[0][:] = 1.0
    sgd_step(model, grads, 0.0)
    assert model.equals(before)


def test_single_parameter_step_by_hand():
    model = MLP([np.array([[1.0]])], [np.array([0.0])])
    sgd_step(model, Gradients([np.array([[-2.0]])], [np.array([0.0])]), 0.1)
    assert model.weights[0][0, 0] == pytest.approx(1.2)


def test_masked_weights_stay_zero():
    model = init_mlp([3, 4, 2], 0)
    masks = [np.ones_like(w) for w in model.weights]
    masks[0][0, :] = 0
    grads = _zero_grads(model)
    grads.weights[0][:] = 1.0
    sgd_step(model, grads, 0.1, masks)
    assert not model.weights[0][0].any()


def test_zero_epochs_returns_unchanged_copy(blobs):
    model = init_mlp([blobs[0].dim, 8, 4], 0)
    out, hist = train(model, blobs[0], TrainConfig(epochs=0))
    assert out.equals(model) and out is not model and hist == []


def test_empty_dataset_rejected(blobs):
    empty = blobs[0].subset(np.array([], dtype=int))
    with pytest.raises(InputError):
        train(init_mlp([blobs[0].dim, 4, 4], 0), empty, TrainConfig(epochs=1))


def test_two_blob_training_reaches_logistic_regression_level():
    spec = SyntheticSpec(n_classes=2, dim=10, n_per_class=100, sigma=0.1, seed=3)
    data = gen_synthetic(spec)
    # oracle: plain logistic regression by gradient descent on the same data
    x, y = data.inputs.astype(float), data.labels
    w, b = np.zeros(10), 0.0
    for _ in range(500):
        p = 1 / (1 + np.exp(-(x @ w + b)))
        w -= 0.5 * x.T @ (p - y) / len(y)
        b -= 0.5 * (p - y).mean()
    assert ((x @ w + b > 0) == y).mean() >= 0.95
    model, _ = train(init_mlp([10, 16, 16, 2], 0), data, TrainConfig(0.05, 16, 20, 1))
    assert accuracy(model, data.inputs, data.labels) >= 0.95


def test_training_is_deterministic_and_resumable(blobs):
    model = init_mlp([blobs[0].dim, 8, 4], 5)
    cfg = TrainConfig(0.05, 16, 4, 9)
    whole, _ = train(model, blobs[0], cfg)
    again, _ = train(model, blobs[0], cfg)
    half, _ = train(model, blobs[0], cfg.replace(epochs=2))
    resumed, _ = train(half, blobs[0], cfg.replace(epochs=2), first_epoch=2)
    assert whole.equals(again) and whole.equals(resumed)


def test_epoch_order_is_a_permutation():
    order = epoch_order(3, 1, 50)
    assert sorted(order) == list(range(50))
    assert not np.array_equal(order, epoch_order(3, 2, 50))


def test_train_config_validation():
    with pytest.raises(InputError):
        TrainConfig(learning_rate=0)
    with pytest.raises(InputError):
        TrainConfig(batch_size=0)
    assert TrainConfig(0.1, epochs=3, lr_decay_factor=0.5).final_lr == pytest.approx(0.025)


def test_hidden_index_bounds():
    model = init_mlp([3, 4, 5, 2], 0)
    assert model.hidden_index(-1) == 1 and model.hidden_index(0) == 0
    with pytest.raises(InputError):
        model.hidden_index(2)
