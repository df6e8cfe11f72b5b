import numpy as np
import pytest
from pydantic import ValidationError

from deapmap.errors import ShapeMismatchError
from deapmap.network import ArchSpec, DeapNet, forward, gradient_check, mse_loss
from deapmap.training import overfit_batch

TINY = ArchSpec(n_channels=4, window=32, grid=8, temporal_channels=2, latent=6, decoder_channels=4)
SMALL = ArchSpec(n_channels=4, window=32, grid=8, temporal_channels=4, latent=32, decoder_channels=16)


def test_default_architecture_size():
    model = DeapNet()
    assert model.spec.temporal_lengths == (30, 13)
    assert model.n_parameters == 837_577


def test_arch_spec_validation():
    with pytest.raises(ValidationError):
        ArchSpec(grid=12)
    with pytest.raises(ValidationError):
        ArchSpec(window=16)
    with pytest.raises(ValidationError):
        ArchSpec(latent=1024)


def test_zeroed_output_layer_predicts_half(rng):
    model = DeapNet(TINY, seed=1)
    model.zero_output_layer()
    out = forward(model, rng.normal(size=(4, 32)))
    assert out.shape == (8, 8)
    assert np.allclose(out, 0.5)


def test_output_is_bounded(rng):
    model = DeapNet(SMALL, seed=2)
    out = model.forward(rng.normal(scale=5.0, size=(3, 4, 32)))
    assert out.shape == (3, 8, 8)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_forward_rejects_bad_inputs(rng):
    model = DeapNet(TINY)
    with pytest.raises(ShapeMismatchError):
        forward(model, rng.normal(size=(4, 31)))
    with pytest.raises(ShapeMismatchError):
        model.forward(rng.normal(size=(2, 5, 32)))
    window = rng.normal(size=(4, 32))
    window[1, 3] = np.inf
    with pytest.raises(ValueError):
        forward(model, window)


def test_forward_is_deterministic(rng):
    x = rng.normal(size=(4, 32))
    a = forward(DeapNet(TINY, seed=3), x)
    b = forward(DeapNet(TINY, seed=3), x)
    assert np.array_equal(a, b)


def test_same_seed_same_weights():
    a = DeapNet(SMALL, seed=9).state_dict()
    b = DeapNet(SMALL, seed=9).state_dict()
    c = DeapNet(SMALL, seed=10).state_dict()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[name], b[name]) for name in a)
    assert any(not np.array_equal(a[name], c[name]) for name in a)


def test_state_dict_round_trip(rng):
    source = DeapNet(TINY, seed=4)
    target = DeapNet(TINY, seed=5)
    target.load_state_dict(source.state_dict())
    x = rng.normal(size=(2, 4, 32))
    assert np.array_equal(source.forward(x), target.forward(x))
    state = source.state_dict()
    state.pop(next(iter(state)))
    with pytest.raises(KeyError):
        target.load_state_dict(state)


def test_mse_loss_gradient():
    pred = np.array([[0.5, 0.25]])
    target = np.array([[0.0, 0.25]])
    loss, grad = mse_loss(pred, target)
    assert loss == pytest.approx(0.125)
    assert np.allclose(grad, [[0.5, 0.0]])


def test_backprop_matches_finite_differences(rng):
    model = DeapNet(TINY, seed=6)
    x = rng.normal(size=(3, 4, 32))
    y = rng.uniform(0.1, 0.9, size=(3, 8, 8))
    assert gradient_check(model, x, y, n_samples=200) < 1e-4


def test_overfits_a_single_batch(rng):
    model = DeapNet(SMALL, seed=0)
    x = rng.normal(size=(2, 4, 32))
    ramp = np.linspace(0.1, 0.9, 8)
    y = np.stack([np.tile(ramp, (8, 1)), np.tile(ramp[:, None], (1, 8))])
    losses = overfit_batch(model, x, y, steps=300, learning_rate=5e-3)
    assert losses[-1] < 0.1 * losses[0]
