"""Engine-level contracts: forward math, MAC accounting, weighted training,
FC-only updates, and the finite-difference gradient oracle."""
import numpy as np
import pytest

from conftest import tiny_spec
from enboost.data import synth_dataset
from enboost.errors import ShapeError, TrainingDivergedError
from enboost.nn import (NetworkSpec, TensorShape, WeakLearner, avgpool, conv,
                        count_macs, count_params, fc, flatten_params, forward,
                        gradient_check, params_checksum, softmax_layer, train,
                        train_fc_only, unflatten_params)


def fc_net(inputs, units, classes=None):
    return NetworkSpec(input_shape=TensorShape(1, 1, inputs),
                       layers=(fc(units), softmax_layer()),
                       class_count=classes or units)


# ---------------------------------------------------------------------------
# forward


def test_zero_fc_weights_give_uniform_output():
    spec = tiny_spec(classes=4, filters=(3, 4))
    learner = WeakLearner.initialize(spec, seed=0, learner_id="t")
    fc_idx = next(i for i, l in enumerate(spec.layers) if l.kind == "fc")
    w, b = learner.params[fc_idx]
    learner.params[fc_idx] = (np.zeros_like(w), np.zeros_like(b))
    probs = forward(learner, np.random.default_rng(1).standard_normal((2, 8, 8)))
    assert np.allclose(probs, 0.25, atol=1e-12)


def test_probabilities_sum_to_one():
    spec = tiny_spec()
    learner = WeakLearner.initialize(spec, seed=1, learner_id="t")
    x = np.random.default_rng(2).standard_normal((5, 2, 8, 8)) * 10.0
    probs = forward(learner, x)
    assert probs.shape == (5, 3)
    assert np.all(probs >= 0)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_hand_computed_softmax():
    spec = fc_net(2, 2)
    learner = WeakLearner.initialize(spec, seed=0, learner_id="t")
    learner.params[0] = (np.array([[1.0, 2.0], [3.0, 4.0]]),
                         np.array([0.5, -0.5]))
    probs = forward(learner, np.array([1.0, -1.0]).reshape(1, 1, 2))
    # logits (-0.5, -1.5) -> sigmoid(1) for class 0
    expect = 1.0 / (1.0 + np.exp(-1.0))
    assert probs.shape == (2,)
    assert abs(probs[0] - expect) < 1e-12
    assert abs(probs[1] - (1.0 - expect)) < 1e-12


def test_forward_rejects_wrong_shape():
    learner = WeakLearner.initialize(tiny_spec(), seed=0, learner_id="t")
    with pytest.raises(ShapeError):
        forward(learner, np.zeros((3, 8, 8)))


# ---------------------------------------------------------------------------
# MAC accounting


def test_count_macs_unit_conv():
    spec = NetworkSpec(input_shape=TensorShape(1, 1, 1),
                       layers=(conv(1, kernel=1), softmax_layer()),
                       class_count=1)
    assert count_macs(spec) == 1


def test_count_macs_conv_example():
    # 3 in-channels, 16 filters, 3x3 kernel, 32x32 output: 3*16*9*1024
    spec = NetworkSpec(input_shape=TensorShape(3, 32, 32),
                       layers=(conv(16, kernel=3, padding=1), avgpool(32),
                               fc(10), softmax_layer()),
                       class_count=10)
    assert count_macs(spec) == 442368 + 16 * 10


def test_count_macs_fc_example():
    assert count_macs(fc_net(64, 10)) == 640


def test_count_macs_independent_of_parameters():
    spec = tiny_spec()
    a = WeakLearner.initialize(spec, seed=0, learner_id="a")
    b = WeakLearner.initialize(spec, seed=9, learner_id="b")
    assert a.macs == b.macs == count_macs(spec)


def test_count_params_matches_flattened_length():
    spec = tiny_spec()
    learner = WeakLearner.initialize(spec, seed=0, learner_id="t")
    assert count_params(spec) == flatten_params(learner.params).size
    rebuilt = unflatten_params(spec, flatten_params(learner.params))
    assert params_checksum(rebuilt) == learner.checksum()


# ---------------------------------------------------------------------------
# training


def small_dataset(**kw):
    args = dict(seed=5, classes=3, samples_per_class=12, shape=(2, 8, 8),
                noise=1.0)
    args.update(kw)
    return synth_dataset(**args)


def test_weight_one_identity():
    ds = small_dataset()
    spec = tiny_spec()
    base = WeakLearner.initialize(spec, seed=0, learner_id="t")
    n = ds.split_size("train")
    a, hist_a = train(base, ds, np.ones(n), epochs=2, learning_rate=0.05, seed=7)
    b, hist_b = train(base, ds, np.ones(n), epochs=2, learning_rate=0.05, seed=7)
    assert hist_a == hist_b
    assert a.checksum() == b.checksum()


def test_doubled_weights_normalize_to_identity():
    from enboost.boost import normalize
    ds = small_dataset()
    base = WeakLearner.initialize(tiny_spec(), seed=0, learner_id="t")
    n = ds.split_size("train")
    a, _ = train(base, ds, np.ones(n), epochs=2, learning_rate=0.05, seed=7)
    b, _ = train(base, ds, normalize(2.0 * np.ones(n)), epochs=2,
                 learning_rate=0.05, seed=7)
    assert a.checksum() == b.checksum()


def test_separable_two_class_set_reaches_95_percent():
    ds = small_dataset(seed=11, classes=2, samples_per_class=30, noise=0.3)
    learner = WeakLearner.initialize(tiny_spec(classes=2), seed=0, learner_id="t")
    learner, _ = train(learner, ds, np.ones(ds.split_size("train")),
                       epochs=50, learning_rate=0.05, seed=0)
    assert learner.eval_accuracy >= 0.95


def test_training_diverges_on_non_finite_loss():
    ds = small_dataset()
    ds.x[0] = np.inf  # poison one train sample
    learner = WeakLearner.initialize(tiny_spec(), seed=0, learner_id="t")
    with pytest.raises(TrainingDivergedError) as err:
        train(learner, ds, np.ones(ds.split_size("train")), epochs=1,
              learning_rate=0.05, seed=0, batch_size=len(ds.y))
    assert err.value.epoch == 0


def test_train_rejects_bad_weights():
    ds = small_dataset()
    learner = WeakLearner.initialize(tiny_spec(), seed=0, learner_id="t")
    with pytest.raises(ShapeError):
        train(learner, ds, np.ones(3), epochs=1, learning_rate=0.05, seed=0)
    bad = np.ones(ds.split_size("train"))
    bad[0] = -1.0
    with pytest.raises(ShapeError):
        train(learner, ds, bad, epochs=1, learning_rate=0.05, seed=0)


# ---------------------------------------------------------------------------
# train_fc_only


def test_fc_only_zero_learning_rate_is_identity():
    learner = WeakLearner.initialize(tiny_spec(), seed=2, learner_id="t")
    x = np.random.default_rng(0).standard_normal((1, 2, 8, 8))
    updated, probs = train_fc_only(learner, x, [1], [1.0], learning_rate=0.0)
    assert updated.checksum() == learner.checksum()
    assert np.array_equal(probs, forward(learner, x))


def test_fc_only_preserves_conv_parameters():
    spec = tiny_spec()
    learner = WeakLearner.initialize(spec, seed=2, learner_id="t")
    conv_idx = [i for i, l in enumerate(spec.layers) if l.kind == "conv"]
    before = params_checksum([learner.params[i] for i in conv_idx])
    x = np.random.default_rng(0).standard_normal((3, 2, 8, 8))
    updated, probs = train_fc_only(learner, x, [0, 1, 2], [1.0, 0.5, 2.0],
                                   learning_rate=0.1)
    after = params_checksum([updated.params[i] for i in conv_idx])
    assert before == after
    assert updated.checksum() != learner.checksum()
    # returned outputs come from the pre-update parameters
    assert np.array_equal(probs, forward(learner, x))


def test_fc_only_matches_finite_difference_gradient():
    spec = fc_net(2, 2)
    learner = WeakLearner.initialize(spec, seed=4, learner_id="t")
    x = np.array([0.7, -0.3]).reshape(1, 1, 2)
    label, weight, lr = 1, 1.3, 0.25

    def loss_at(flat):
        probe = learner.copy()
        probe.params = unflatten_params(spec, flat)
        p = forward(probe, x)
        return weight * -np.log(p[label])

    flat = flatten_params(learner.params)
    step = 1e-6
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        hi, lo = flat.copy(), flat.copy()
        hi[i] += step
        lo[i] -= step
        numeric[i] = (loss_at(hi) - loss_at(lo)) / (2 * step)
    updated, _ = train_fc_only(learner, x, [label], [weight], learning_rate=lr)
    delta = flatten_params(updated.params) - flat
    assert np.allclose(delta, -lr * numeric, atol=1e-6)


def test_fc_only_zero_net_bias_gradient():
    # zero input and zero weights: dW = 0 and db = weight * (probs - onehot)
    spec = fc_net(3, 3)
    learner = WeakLearner.initialize(spec, seed=0, learner_id="t")
    learner.params[0] = (np.zeros((3, 3)), np.zeros(3))
    x = np.zeros((1, 1, 3))
    updated, probs = train_fc_only(learner, x, [0], [1.0], learning_rate=1.0)
    assert np.allclose(probs, 1.0 / 3.0, atol=1e-12)
    w, b = updated.params[0]
    onehot = np.array([1.0, 0.0, 0.0])
    assert np.allclose(w, 0.0, atol=1e-8)
    assert np.allclose(b, -(probs[0] - onehot), atol=1e-8)


def test_fc_only_rejects_empty_batch():
    learner = WeakLearner.initialize(fc_net(2, 2), seed=0, learner_id="t")
    with pytest.raises(ShapeError):
        train_fc_only(learner, np.zeros((0, 1, 1, 2)), [], [], 0.1)


# ---------------------------------------------------------------------------
# gradient oracle


def test_gradient_check_two_layer_toy_net():
    spec = NetworkSpec(input_shape=TensorShape(1, 4, 4),
                       layers=(conv(2, kernel=3, padding=1), avgpool(2),
                               fc(3), softmax_layer()),
                       class_count=3)
    assert gradient_check(spec, seed=0, step=1e-5) < 1e-4


def test_gradient_check_three_seeds():
    spec = NetworkSpec(input_shape=TensorShape(2, 6, 6),
                       layers=(conv(3, kernel=3, padding=1), avgpool(2),
                               conv(4, kernel=3), fc(3), softmax_layer()),
                       class_count=3)
    for seed in (1, 2, 3):
        assert gradient_check(spec, seed=seed, step=1e-5) < 1e-4
