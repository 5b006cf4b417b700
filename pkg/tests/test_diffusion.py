import itertools
import math

import numpy as np
import pytest
import torch

from cwdm.data import DataError, MODALITIES
from cwdm.diffusion import encode_subject, reverse_step, training_loss, training_step_inputs
from cwdm.schedule import make_schedule, posterior_params
from cwdm.wavelet import dwt3d


@pytest.fixture(scope="module")
def sched():
    return make_schedule("linear", 1000, 1e-4, 0.02)


@pytest.fixture
def subject(rng):
    return {m: rng.random((8, 8, 8)).astype(np.float32) for m in MODALITIES}


def test_last_step_returns_prediction(sched, rng):
    x_t, x0 = rng.standard_normal((8, 2, 2, 2)), rng.standard_normal((8, 2, 2, 2))
    for noise in (None, rng.standard_normal((8, 2, 2, 2)) * 100):
        assert np.array_equal(reverse_step(x_t, x0, 1, sched, noise), x0)


def test_zero_noise_gives_posterior_mean(sched, rng):
    x_t, x0 = rng.standard_normal(16), rng.standard_normal(16)
    p = posterior_params(sched, 400)
    np.testing.assert_array_equal(reverse_step(x_t, x0, 400, sched, np.zeros(16)), p.coef_x0 * x0 + p.coef_xt * x_t)


def test_noise_scaled_by_posterior_std(sched):
    out = reverse_step(np.zeros(4), np.zeros(4), 400, sched, np.ones(4))
    np.testing.assert_allclose(out, math.sqrt(sched.beta_tilde[400]), rtol=1e-15)


def test_scalar_mean_at_t2(sched):
    # by hand: beta_t = 1e-4 + (t-1)/999 * (0.02 - 1e-4)
    b1 = 1e-4
    b2 = 1e-4 + (0.02 - 1e-4) / 999
    ab1 = 1 - b1
    ab2 = ab1 * (1 - b2)
    hand = math.sqrt(ab1) * b2 / (1 - ab2) * 0.5 + math.sqrt(1 - b2) * (1 - ab1) / (1 - ab2) * 1.0
    mu = reverse_step(np.array([1.0]), np.array([0.5]), 2, sched, np.zeros(1))
    assert abs(mu[0] - hand) < 1e-12


def test_reverse_step_errors(sched):
    with pytest.raises(ValueError, match="shape"):
        reverse_step(np.zeros(3), np.zeros(4), 5, sched)
    with pytest.raises(ValueError, match="outside"):
        reverse_step(np.zeros(3), np.zeros(3), 1001, sched)


def test_loss_simple_values():
    a = torch.rand(8, 2, 2, 2)
    assert training_loss(a, a).item() == 0.0
    assert training_loss(torch.zeros(8, 2, 2, 2), torch.ones(8, 2, 2, 2)).item() == 1.0
    assert training_loss(np.zeros(5), np.full(5, -1.0)) == 1.0


def test_loss_matches_loop_oracle(rng):
    a, b = rng.standard_normal((8, 2, 2, 2)), rng.standard_normal((8, 2, 2, 2))
    acc = 0.0
    for idx in itertools.product(*map(range, a.shape)):
        acc += (a[idx] - b[idx]) ** 2
    oracle = acc / a.size
    assert training_loss(a, b) == pytest.approx(oracle, abs=1e-6)
    got = training_loss(torch.from_numpy(a).float(), torch.from_numpy(b).float()).item()
    assert got == pytest.approx(oracle, abs=1e-6)


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        training_loss(np.zeros((8, 2, 2, 2)), np.zeros((8, 2, 2, 1)))


def test_step_inputs_shape_and_noiseless_target(sched, subject):
    X, x0 = training_step_inputs(subject, "FLAIR", 250, np.zeros((8, 4, 4, 4)), sched)
    assert X.shape == (32, 4, 4, 4)
    assert X.dtype == torch.float32
    np.testing.assert_allclose(X[:8].numpy(), math.sqrt(sched.alpha_bar[250]) * x0.numpy(), rtol=1e-6)
    np.testing.assert_allclose(x0.numpy(), dwt3d(subject["FLAIR"]), atol=1e-6)


def test_condition_channels_independent_of_t(sched, subject, rng):
    noise = rng.standard_normal((8, 4, 4, 4))
    X1, _ = training_step_inputs(subject, "T2", 1, noise, sched)
    X2, _ = training_step_inputs(subject, "T2", 999, noise, sched)
    assert torch.equal(X1[8:], X2[8:])
    assert not torch.equal(X1[:8], X2[:8])


def test_condition_order_is_alphabetical_without_target(subject):
    _, cond = encode_subject(subject, "T1ce")
    for k, m in enumerate(("FLAIR", "T1", "T2")):
        np.testing.assert_allclose(cond[8 * k : 8 * k + 8].numpy(), dwt3d(subject[m]), atol=1e-6)


def test_missing_modality_is_data_error(sched, subject):
    del subject["T1"]
    with pytest.raises(DataError, match="T1"):
        training_step_inputs(subject, "FLAIR", 5, np.zeros((8, 4, 4, 4)), sched)


@pytest.mark.parametrize("T", [1, 7, 1000])
def test_perfect_oracle_chain_lands_on_x0(T, rng):
    sched = make_schedule("linear", T, 1e-4, 0.02)
    x0 = rng.standard_normal((8, 2, 2, 2))
    x = rng.standard_normal(x0.shape)
    for t in range(T, 0, -1):
        x = reverse_step(x, x0, t, sched, rng.standard_normal(x0.shape))
    assert np.array_equal(x, x0)
