import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from actmark.data import SyntheticSpec, gen_synthetic
from actmark.errors import EmbeddingFailedError, InputError, ShapeError
from actmark.nn import TrainConfig, init_mlp, train
from actmark.whitebox import (WatermarkLoss, compare_bits, embed, extract,
                              extract_from_activations, loss1_and_grads, loss2_and_grad,
                              make_secret, project_bits, select_key_samples)
from actmark.verify import central_difference, rel_error


def test_all_carriers_is_a_permutation():
    sec = make_secret(3, 6, 6, 8, 4)
    assert sorted(sec.carriers.tolist()) == list(range(6))


def test_secret_is_deterministic():
    a, b = make_secret(9, 10, 2, 16, 8), make_secret(9, 10, 2, 16, 8)
    assert np.array_equal(a.carriers, b.carriers) and np.array_equal(a.bits, b.bits)
    assert np.array_equal(a.projection, b.projection)


def test_too_many_carriers():
    with pytest.raises(InputError):
        make_secret(0, 3, 4, 8, 4)


def test_loss1_hand_example():
    loss, _, _ = loss1_and_grads([[0.5]], [0], [[0.0], [2.0]], 1.0)
    assert loss == pytest.approx(-2.0)


def test_loss1_zero_when_all_centers_coincide():
    f = np.tile([[1.0, 2.0, 3.0]], (4, 1))
    loss, _, _ = loss1_and_grads(f, [0, 1, 2, 0], np.tile(f[:1], (3, 1)), 1.0)
    assert loss == 0.0


def test_loss1_shape_mismatch():
    with pytest.raises(ShapeError):
        loss1_and_grads(np.zeros((2, 3)), [0, 1], np.zeros((2, 4)), 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([0.0, 0.3, 1.0]), st.sampled_from(["mean", "sum"]))
def test_loss1_gradients_match_finite_differences(seed, push, reduction):
    rng = np.random.default_rng(seed)
    f, mu = rng.normal(size=(5, 4)), rng.normal(size=(3, 4))
    y = rng.integers(0, 3, 5)
    _, df, dmu = loss1_and_grads(f, y, mu, 0.7, push, reduction)
    obj = lambda: loss1_and_grads(f, y, mu, 0.7, push, reduction)[0]
    assert rel_error(df, central_difference(obj, f)) < 1e-4
    assert rel_error(dmu, central_difference(obj, mu)) < 1e-4


def test_sum_reduction_is_n_times_mean():
    rng = np.random.default_rng(0)
    f, mu, y = rng.normal(size=(6, 3)), rng.normal(size=(2, 3)), rng.integers(0, 2, 6)
    mean = loss1_and_grads(f, y, mu, 1.0, 0.5, "mean")[0]
    total = loss1_and_grads(f, y, mu, 1.0, 0.5, "sum")[0]
    assert total == pytest.approx(6 * mean)


def test_zero_projection_ties_to_one():
    scores, bits = project_bits(np.ones((2, 3)), np.zeros((3, 4)))
    assert np.all(scores == 0.5) and np.all(bits == 1)


def test_scalar_projection():
    scores, bits = project_bits([[3.0]], [[1.0]])
    assert scores[0, 0] == pytest.approx(0.95257, abs=1e-5) and bits[0, 0] == 1


def test_projection_matches_brute_force(rng):
    mu, a = rng.normal(size=(3, 7)), rng.normal(size=(7, 5))
    _, bits = project_bits(mu, a)
    for i in range(3):
        for j in range(5):
            g = 1 / (1 + np.exp(-sum(mu[i, k] * a[k, j] for k in range(7))))
            assert bits[i, j] == (1 if g >= 0.5 else 0)


def test_loss2_at_zero_is_log_two():
    loss, _ = loss2_and_grad([[0.0]], [[0.0]], [[1]], 1.0)
    assert loss == pytest.approx(0.693147, abs=1e-6)


def test_loss2_vanishes_when_scores_match():
    loss, _ = loss2_and_grad([[50.0]], [[1.0]], [[1]], 1.0)
    assert loss < 1e-20


def test_loss2_is_finite_and_informative_far_from_the_bit():
    loss, grad = loss2_and_grad([[-500.0]], [[1.0]], [[1]], 1.0)
    assert loss == pytest.approx(500.0)
    assert grad[0, 0] == pytest.approx(-1.0)


def test_loss2_equals_direct_cross_entropy(rng):
    mu, a, b = rng.normal(size=(2, 4)), rng.normal(size=(4, 3)), rng.integers(0, 2, (2, 3))
    g = expit(mu @ a)
    direct = -(b * np.log(g) + (1 - b) * np.log(1 - g)).sum()
    assert loss2_and_grad(mu, a, b, 1.0)[0] == pytest.approx(direct)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_loss2_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    mu, a, b = rng.normal(size=(2, 5)), rng.normal(size=(5, 3)), rng.integers(0, 2, (2, 3))
    _, d = loss2_and_grad(mu, a, b, 0.4)
    assert rel_error(d, central_difference(lambda: loss2_and_grad(mu, a, b, 0.4)[0], mu)) < 1e-4


def test_identical_bits_give_zero_ber():
    r = compare_bits([[1, 0, 1]], [[1, 0, 1]])
    assert r.ber == 0 and r.mismatch_count == 0


def test_key_samples_need_carrier_examples():
    with pytest.raises(InputError):
        select_key_samples(np.array([0, 0, 1]), [2], 0)


def test_hook_gradient_matches_its_own_losses(rng):
    sec = make_secret(1, 3, 2, 4, 3, lambda1=0.3, lambda2=0.2)
    centers = rng.normal(size=(3, 4)).astype(np.float32)
    hook = WatermarkLoss(sec, centers, push=0.2)
    f, y = rng.normal(size=(5, 4)), rng.integers(0, 3, 5)
    _, d_f = hook(f, y)
    fd = central_difference(
        lambda: loss1_and_grads(f, y, hook.centers.astype(float), 0.3, 0.2, "sum")[0], f)
    assert rel_error(d_f, fd) < 1e-4


def test_zero_strength_embed_equals_plain_training(blobs):
    train_set, _ = blobs
    model = init_mlp([train_set.dim, 16, 16, 4], 3)
    sec = make_secret(5, 4, 1, 16, 4, lambda1=0.0, lambda2=0.0)
    cfg = TrainConfig(0.05, 16, 3, 2)
    marked, _, _ = embed(model, train_set, sec, cfg, warmup_epochs=1, check=False)
    plain, _ = train(model, train_set, cfg)
    assert marked.equals(plain)


def test_embed_on_blobs_recovers_bits_and_keeps_accuracy():
    spec = SyntheticSpec(n_classes=4, dim=32, n_per_class=100, sigma=0.08, seed=7)
    train_set, test_set = gen_synthetic(spec), gen_synthetic(spec, "test")
    model = init_mlp([32, 128, 128, 4], 0)
    sec = make_secret(21, 4, 1, 128, 8)
    cfg = TrainConfig(0.05, 16, 20, 4)
    marked, centers, _ = embed(model, train_set, sec, cfg)
    plain, _ = train(model, train_set, cfg)
    assert extract(marked, train_set, sec).ber == 0
    acc = lambda m: (m.predict(test_set.inputs) == test_set.labels).mean()
    assert acc(marked) >= acc(plain) - 0.01
    assert centers.shape == (4, 128)


def test_embed_failure_carries_ber(blobs):
    train_set, _ = blobs
    model = init_mlp([train_set.dim, 8, 4], 0)
    sec = make_secret(2, 4, 4, 8, 16, lambda1=0.0, lambda2=0.0)
    with pytest.raises(EmbeddingFailedError) as info:
        embed(model, train_set, sec, TrainConfig(0.05, 16, 1, 0), warmup_epochs=0)
    assert 0 < info.value.ber <= 1


def test_extract_from_activations_agrees_with_extract(blobs):
    train_set, _ = blobs
    model = init_mlp([train_set.dim, 8, 4], 0)
    sec = make_secret(2, 4, 2, 8, 6)
    direct = extract(model, train_set, sec)
    idx = np.concatenate(select_key_samples(train_set.labels, sec.carriers, sec.seed))
    acts = model.activations(train_set.inputs[idx], -1)
    assert extract_from_activations(acts, train_set.labels[idx], sec) == direct
