import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qedg.nets import NetworkSpec, TrainConfig, build_network, one_hot, sample_pseudo_labels, train_target
from qedg.io.datasets import Dataset


def test_build_is_deterministic_and_seed_sensitive():
    spec = NetworkSpec("substitute", 2, 3, (8, 8), seed=11)
    a, b = build_network(spec), build_network(spec)
    for (na, ta), (nb, tb) in zip(a.params, b.params):
        assert na == nb and ta.data.tobytes() == tb.data.tobytes()
    c = build_network(NetworkSpec("substitute", 2, 3, (8, 8), seed=12))
    assert a.params["W0"].data.tobytes() != c.params["W0"].data.tobytes()
    assert a.params.names() == ["W0", "b0", "W1", "b1", "W2", "b2"]


def test_spec_validation():
    with pytest.raises(ValueError):
        NetworkSpec("critic", 2, 2)
    with pytest.raises(ValueError):
        NetworkSpec("target", 2, 1)
    with pytest.raises(ValueError):
        NetworkSpec("generator", 2, 2, latent_dim=0)
    with pytest.raises(ValueError):
        NetworkSpec("generator", 2, 2, latent_dim=4, output_activation="box")
    spec = NetworkSpec("generator", 2, 2, (4,), latent_dim=3, output_activation="box", output_low=(-1, -2), output_high=(1, 2))
    assert NetworkSpec.from_dict(spec.to_dict()) == spec


def test_generator_box_output_stays_inside_bounds():
    spec = NetworkSpec("generator", 2, 2, (16,), latent_dim=4, output_activation="box", output_low=(-1, -2), output_high=(1, 5), seed=1)
    g = build_network(spec)
    z = np.random.default_rng(0).normal(size=(200, 4)) * 50
    x = g.generate(z, one_hot(np.arange(200) % 2, 2)).data
    assert (x >= [-1, -2]).all() and (x <= [1, 5]).all()
    with pytest.raises(TypeError):
        g.forward(x)


def test_predict_ties_to_lowest_class():
    spec = NetworkSpec("target", 2, 3, (4,), seed=0)
    net = build_network(spec)
    for _, t in net.params:
        t.data[:] = 0
    np.testing.assert_array_equal(net.predict(np.ones((5, 2))), np.zeros(5))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 300), st.integers(2, 12), st.integers(0, 2**32 - 1))
def test_pseudo_labels_balanced(n, k, seed):
    y = sample_pseudo_labels(n, k, np.random.default_rng(seed))
    counts = np.bincount(y, minlength=k)
    assert len(y) == n and counts.max() - counts.min() <= 1
    assert counts.min() == n // k


def test_train_target_two_moons(moons_target):
    assert moons_target.test_accuracy >= 0.95


def test_train_target_rejects_single_class():
    x = np.zeros((10, 2), dtype=np.float32)
    ds = Dataset("flat", x, np.zeros(10, dtype=np.int64), x, np.zeros(10, dtype=np.int64), 2, x[0], x[0] + 1)
    with pytest.raises(ValueError, match="single class"):
        train_target(ds, NetworkSpec("target", 2, 2), 1, TrainConfig())
