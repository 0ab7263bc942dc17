import numpy as np
import pytest

from dyslim import autodiff as ad
from dyslim.autodiff import Graph
from dyslim.errors import ContractError, NonFiniteError, ShapeError
from dyslim.models import (SG_DETACH_BEFORE_LAST, SG_NONE, ConvStepperSpec, MlpStepperSpec, Surrogate,
                           init_params, param_layout, parameter_count, rollout, rollout_array, spec_from_dict,
                           spec_to_dict, step, zero_params)


def test_mlp_layout_and_count():
    spec = MlpStepperSpec(state_dim=3, hidden=(32, 32))
    names = [name for name, *_ in param_layout(spec)]
    assert names == ["dense0.w", "dense0.b", "dense1.w", "dense1.b", "dense2.w", "dense2.b"]
    assert parameter_count(spec) == 3 * 32 + 32 + 32 * 32 + 32 + 32 * 3 + 3


def test_default_conv_parameter_count():
    # encoder 288, decoder 241, 4 blocks x 7 layers x 11,568
    assert parameter_count(ConvStepperSpec()) == 324_433


def test_conv_dilations():
    assert ConvStepperSpec().dilations() == [1, 2, 4, 8, 4, 2, 1]
    assert ConvStepperSpec(mirror_dilations=False).dilations() == [1, 2, 4, 8]


def test_init_is_seeded_glorot():
    spec = MlpStepperSpec(hidden=(16,))
    a = init_params(spec, 5)
    b = init_params(spec, 5)
    np.testing.assert_array_equal(a.flatten(), b.flatten())
    assert not np.array_equal(a.flatten(), init_params(spec, 6).flatten())
    limit = np.sqrt(6.0 / (3 + 16))
    assert np.all(np.abs(a["dense0.w"]) <= limit)
    np.testing.assert_array_equal(a["dense0.b"], 0.0)


def test_zero_mlp_is_identity():
    spec = MlpStepperSpec(hidden=(4,))
    model = Surrogate(spec, zero_params(spec))
    u = np.array([[1.0, -2.0, 0.5], [0.0, 3.0, 1.0]])
    np.testing.assert_array_equal(model.predict(u), u)
    np.testing.assert_array_equal(step(model, u[0]), u[0])


def test_mlp_residual_form():
    spec = MlpStepperSpec(hidden=(4,), dt=0.5)
    params = zero_params(spec)
    params["dense1.b"] = np.array([1.0, 2.0, 3.0])
    out = Surrogate(spec, params).predict(np.zeros(3))
    np.testing.assert_allclose(out, [0.5, 1.0, 1.5])


def test_zero_conv_is_identity():
    spec = ConvStepperSpec(state_dim=16, channels=3, kernel_width=3, n_blocks=1, layers_per_block=2)
    model = Surrogate(spec, zero_params(spec))
    u = np.random.default_rng(0).normal(size=(2, 16))
    np.testing.assert_array_equal(model.predict(u), u)


def test_conv_surrogate_is_translation_equivariant():
    spec = ConvStepperSpec(state_dim=32, channels=4, kernel_width=3, n_blocks=2, layers_per_block=2)
    model = Surrogate(spec, seed=1)
    u = np.random.default_rng(2).normal(size=(1, 32))
    np.testing.assert_allclose(model.predict(np.roll(u, 7, axis=1)), np.roll(model.predict(u), 7, axis=1),
                               atol=1e-12)


def test_predict_rejects_wrong_dimension():
    with pytest.raises(ShapeError):
        Surrogate(MlpStepperSpec()).predict(np.zeros(4))


def test_param_store_must_match_spec():
    with pytest.raises(ContractError):
        Surrogate(MlpStepperSpec(hidden=(4,)), zero_params(MlpStepperSpec(hidden=(5, 5))))


def test_spec_dict_round_trip():
    for spec in (MlpStepperSpec(hidden=(8, 4)), ConvStepperSpec(state_dim=64, channels=8)):
        assert spec_from_dict(spec_to_dict(spec)) == spec


def test_rollout_matches_repeated_predict():
    model = Surrogate(MlpStepperSpec(hidden=(8,)), seed=3)
    u0 = np.array([[1.0, 0.0, -1.0], [0.5, 0.5, 0.5]])
    graph = Graph()
    states = rollout(model.attach(graph), graph.constant(u0), 3)
    expected = rollout_array(model, u0, 3)
    for k in range(3):
        np.testing.assert_allclose(states[k].value, expected[:, k], rtol=1e-14)


def test_detach_before_last_only_differentiates_final_step():
    spec = MlpStepperSpec(state_dim=1, hidden=(2,), dt=1.0)
    model = Surrogate(spec, seed=0)
    u0 = np.array([[0.3]])

    def last_state_grad(pattern):
        graph = Graph()
        bound = model.attach(graph)
        states = rollout(bound, graph.constant(u0), 3, pattern)
        return graph.backward(ad.sum_(states[-1]))

    detached = last_state_grad(SG_DETACH_BEFORE_LAST)
    # one application from the detached second state
    graph = Graph()
    bound = model.attach(graph)
    s2 = graph.constant(rollout_array(model, u0, 2)[:, -1])
    single = graph.backward(ad.sum_(bound(s2)))
    for name in single:
        np.testing.assert_allclose(detached[name], single[name], rtol=1e-12, atol=1e-15)
    full = last_state_grad(SG_NONE)
    assert any(not np.allclose(full[n], detached[n]) for n in full)


def test_rollout_array_reports_failure_step():
    class Doubling:
        def predict(self, u):
            return u * 1e200

    with pytest.raises(NonFiniteError) as info:
        rollout_array(Doubling(), np.ones((1, 3)), 5)
    assert info.value.step == 2
