import numpy as np
import pytest

from dyslim.autodiff import Graph
from dyslim.errors import ConfigError, ContractError
from dyslim.models import MlpStepperSpec, Surrogate, zero_params
from dyslim.objectives import (DiscountSchedule, DyslimConfig, KernelSpec, discrete_w2_assignment, dyslim_total,
                               loss_multistep, loss_one_step, loss_pushforward, mmd2_biased, mmd2_unbiased,
                               reg_conditional, reg_unconditional, rq_kernel)

from conftest import assert_grad_close, brute_mmd2, central_difference


def _identity_model(state_dim=2):
    spec = MlpStepperSpec(state_dim=state_dim, hidden=(3,), dt=0.0)
    graph = Graph()
    return Surrogate(spec, zero_params(spec)).attach(graph), graph


def _constant_windows(n=4, length=4, dim=2, seed=0):
    states = np.random.default_rng(seed).normal(size=(n, 1, dim))
    return np.repeat(states, length, axis=1)


def test_mmd_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n, m, d = rng.integers(2, 17), rng.integers(2, 17), rng.integers(1, 9)
        bandwidths = tuple(rng.uniform(0.1, 2.0, size=rng.integers(1, 5)))
        kernel = KernelSpec(bandwidths)
        u = rng.normal(size=(n, d))
        v = rng.normal(size=(m, d)) + 0.3
        assert abs(mmd2_unbiased(u, v, kernel) - brute_mmd2(u, v, bandwidths, "unbiased")) <= 1e-12
        biased = brute_mmd2(u, v, bandwidths, "biased")
        assert abs(mmd2_biased(u, v, kernel) - max(biased, 0.0)) <= 1e-12


def test_unbiased_estimator_is_unbiased():
    rng = np.random.default_rng(1)
    atoms = rng.normal(size=(5, 2))
    p = np.array([0.1, 0.2, 0.3, 0.25, 0.15])
    q = np.array([0.3, 0.3, 0.1, 0.1, 0.2])
    kernel = KernelSpec((0.5, 1.0))
    gram = rq_kernel(atoms, atoms, kernel)
    population = p @ gram @ p + q @ gram @ q - 2.0 * p @ gram @ q

    n = 20
    draws = []
    for _ in range(2000):
        u = atoms[rng.choice(5, size=n, p=p)]
        v = atoms[rng.choice(5, size=n, p=q)]
        draws.append(mmd2_unbiased(u, v, kernel))
    draws = np.asarray(draws)
    stderr = draws.std(ddof=1) / np.sqrt(draws.size)
    assert abs(draws.mean() - population) <= 3.0 * stderr


def test_biased_mmd_properties():
    rng = np.random.default_rng(2)
    kernel = KernelSpec()
    u = rng.normal(size=(6, 3))
    assert mmd2_biased(u, u, kernel) == 0.0
    assert mmd2_biased(u, u[::-1], kernel) == pytest.approx(0.0, abs=1e-14)
    assert mmd2_biased(u, u + 1.0, kernel) > 0.0


def test_kernel_diagonal_is_number_of_bandwidths():
    kernel = KernelSpec((0.2, 0.5, 0.9))
    x = np.random.default_rng(3).normal(size=(4, 2))
    np.testing.assert_allclose(np.diag(rq_kernel(x, x, kernel)), 3.0)


def test_kernel_spec_validation():
    with pytest.raises(ConfigError):
        KernelSpec(())
    with pytest.raises(ConfigError):
        KernelSpec((0.5, -1.0))


def test_discount_weights():
    schedule = DiscountSchedule(0.1, 1e-7)
    assert schedule.weight(1) == 1.0
    assert schedule.weight(3) == pytest.approx(0.01)
    assert schedule.weight(20) == 1e-7


def test_perfect_stepper_losses_are_zero():
    model, _ = _identity_model()
    windows = _constant_windows()
    assert loss_one_step(model, windows[:, :2]).value == 0.0
    assert loss_multistep(model, windows, 3, DiscountSchedule()).value == 0.0
    assert loss_pushforward(model, windows, 3, DiscountSchedule()).value == 0.0
    kernel = KernelSpec()
    assert reg_unconditional(model, windows[:, 0], 2, kernel).value == 0.0
    assert reg_conditional(model, windows, 2, kernel).value == 0.0
    total, comps = dyslim_total(model, windows, DyslimConfig(lambda1=1.0, lambda2=10.0), 3)
    assert total.value == 0.0 and comps["total"] == 0.0


def test_perfect_stepper_unbiased_is_negative_diagonal_deficit():
    model, _ = _identity_model()
    windows = _constant_windows(n=2)
    kernel = KernelSpec((0.5, 1.3))
    value = float(reg_conditional(model, windows, 1, kernel, estimator="unbiased").value)
    u = windows[:, 0]
    k12 = float(rq_kernel(u[:1], u[1:], kernel)[0, 0])
    assert value == pytest.approx(k12 - 2.0, rel=1e-12)
    assert value <= 0.0


def test_one_step_hand_value():
    spec = MlpStepperSpec(state_dim=1, hidden=(1,), dt=1.0)
    params = zero_params(spec)
    params["dense1.b"] = np.array([0.5])
    model = Surrogate(spec, params).attach(Graph())
    pairs = np.array([[[0.0], [1.0]], [[1.0], [1.0]]])
    # predictions 0.5 and 1.5, misfits 0.25 and 0.25
    assert float(loss_one_step(model, pairs).value) == pytest.approx(0.25)


def test_window_too_short_is_rejected():
    model, _ = _identity_model()
    with pytest.raises(ContractError):
        loss_multistep(model, _constant_windows(length=2), 3, DiscountSchedule())
    with pytest.raises(ContractError):
        reg_conditional(model, _constant_windows(length=2), 0, KernelSpec())


def _total_and_grad(spec, flat, windows, config, ell):
    model = Surrogate(spec)
    model.params.assign_flat(flat)
    graph = Graph()
    total, _ = dyslim_total(model.attach(graph), windows, config, ell)
    return float(total.value), model.params.flatten_like(graph.backward(total))


@pytest.mark.parametrize("base", ["one_step", "curriculum", "pushforward"])
@pytest.mark.parametrize("reg_mode", ["curriculum", "pushforward"])
@pytest.mark.parametrize("ell", [1, 2, 3])
def test_dyslim_total_gradient(base, reg_mode, ell):
    spec = MlpStepperSpec(state_dim=2, hidden=(4,), dt=0.3)
    flat = Surrogate(spec, seed=11).params.flatten()
    windows = np.random.default_rng(ell).normal(size=(5, 4, 2))
    config = DyslimConfig(base=base, lambda1=0.7, lambda2=1.3, kernel=KernelSpec((0.5, 1.3)),
                          discount=DiscountSchedule(0.5, 1e-3), reg_mode=reg_mode)
    _, grad = _total_and_grad(spec, flat, windows, config, ell)
    numeric = central_difference(lambda p: _total_and_grad(spec, p, windows, config, ell)[0], flat)
    assert_grad_close(grad, numeric)


def test_unbiased_regularizer_gradient():
    spec = MlpStepperSpec(state_dim=2, hidden=(4,), dt=0.3)
    flat = Surrogate(spec, seed=2).params.flatten()
    windows = np.random.default_rng(9).normal(size=(6, 3, 2))
    config = DyslimConfig(base="pushforward", lambda1=1.0, lambda2=2.0, estimator="unbiased",
                          pushforward_with_one_step=True)
    _, grad = _total_and_grad(spec, flat, windows, config, 2)
    numeric = central_difference(lambda p: _total_and_grad(spec, p, windows, config, 2)[0], flat)
    assert_grad_close(grad, numeric)


def test_zero_lambdas_skip_regularizers():
    model, _ = _identity_model()
    windows = np.random.default_rng(0).normal(size=(3, 2, 2))
    _, comps = dyslim_total(model, windows, DyslimConfig(), 1)
    assert comps["reg_u"] == 0.0 and comps["reg_c"] == 0.0
    assert comps["total"] == comps["base"]


def test_matched_misfit_bounds_assignment_cost():
    rng = np.random.default_rng(4)
    for _ in range(500):
        n = int(rng.integers(1, 9))
        x = rng.normal(size=(n, 2))
        y = rng.normal(size=(n, 2))
        matched = float(np.mean(np.sum((x - y) ** 2, axis=1)))
        assert matched >= discrete_w2_assignment(x, y) - 1e-12
    # equality when the pairing is already optimal
    x = np.array([[0.0], [1.0], [2.0]])
    y = x + 0.25
    assert np.mean(np.sum((x - y) ** 2, axis=1)) == pytest.approx(discrete_w2_assignment(x, y), abs=1e-15)


def test_assignment_enumerates_permutations():
    x = np.array([[0.0], [10.0]])
    y = np.array([[10.0], [0.0]])
    assert discrete_w2_assignment(x, y) == 0.0
    with pytest.raises(ContractError):
        discrete_w2_assignment(np.zeros((9, 1)), np.zeros((9, 1)))
