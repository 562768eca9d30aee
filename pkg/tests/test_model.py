import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradient_oracle import max_relative_error, random_problem
from merinda.dynamics import catalog_system, integrate, simulate
from merinda.library import CoefficientMatrix, build_library
from merinda.model import (
    PARAM_NAMES,
    Adam,
    GruModel,
    Scaling,
    WindowBatch,
    flow_identity_residual,
    gru_cell_forward,
    gru_sequence_forward,
    head_forward,
    network_backward,
    network_forward,
    ode_loss,
    sigmoid,
    solve_backward,
    solve_forward,
)


def zero_model(hidden=3, inputs=2, n_coef=4, n_shifts=1):
    rng = np.random.default_rng(0)
    model = GruModel.initialize(hidden, inputs, n_coef, n_shifts, rng)
    for p in model.params().values():
        p[...] = 0.0
    return model


def test_sigmoid_is_stable():
    x = np.array([-1000.0, -1.0, 0.0, 1.0, 1000.0])
    s = sigmoid(x)
    assert np.all(np.isfinite(s))
    assert s[2] == 0.5 and s[0] == 0.0 and s[-1] == 1.0


def test_zero_cell():
    model = zero_model()
    c, cache = gru_cell_forward(model, np.zeros(3), np.array([0.3, -2.0]))
    np.testing.assert_array_equal(cache["r"], 0.5)
    np.testing.assert_array_equal(cache["z"], 0.5)
    np.testing.assert_array_equal(cache["cc"], 0.0)
    np.testing.assert_array_equal(c, 0.0)


def test_update_gate_limits():
    rng = np.random.default_rng(1)
    model = GruModel.initialize(3, 2, 4, 0, rng)
    a_prev = rng.uniform(-1, 1, 3)
    x = rng.uniform(-1, 1, 2)
    model.b_z[:] = 50.0
    c, cache = gru_cell_forward(model, a_prev, x)
    np.testing.assert_allclose(c, cache["cc"], atol=1e-12)
    model.b_z[:] = -50.0
    c, _ = gru_cell_forward(model, a_prev, x)
    np.testing.assert_allclose(c, a_prev, atol=1e-12)


def test_sequence_examples():
    rng = np.random.default_rng(2)
    model = GruModel.initialize(4, 3, 5, 0, rng)
    window = rng.normal(size=(1, 3))
    single, _ = gru_cell_forward(model, np.zeros(4), window[0])
    seq, caches = gru_sequence_forward(model, window)
    np.testing.assert_array_equal(seq, single)
    assert len(caches) == 1
    hidden, _ = gru_sequence_forward(zero_model(4, 3, 5, 0), rng.normal(size=(7, 3)))
    np.testing.assert_array_equal(hidden, 0.0)


def test_flow_identity_and_gate_bounds_long_run():
    rng = np.random.default_rng(3)
    model = GruModel.initialize(8, 3, 6, 1, rng)
    window = rng.normal(scale=3.0, size=(1000, 3))
    _, caches = gru_sequence_forward(model, window)
    for cache in caches:
        assert np.max(flow_identity_residual(cache)) <= 1e-12
        assert np.all((cache["r"] > 0) & (cache["r"] < 1))
        assert np.all((cache["z"] > 0) & (cache["z"] < 1))
        assert np.all(np.abs(cache["cc"]) <= 1)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), scale=st.floats(0.01, 50.0))
def test_gates_bounded_for_any_finite_input(seed, scale):
    rng = np.random.default_rng(seed)
    model = GruModel.initialize(5, 2, 3, 0, rng)
    _, cache = gru_cell_forward(model, rng.uniform(-1, 1, 5), rng.normal(scale=scale, size=2))
    assert np.all((cache["z"] > 0) & (cache["z"] < 1))
    assert np.all((cache["r"] > 0) & (cache["r"] < 1))
    assert np.max(flow_identity_residual(cache)) <= 1e-12


def test_head_examples():
    model = zero_model(hidden=3, n_coef=6, n_shifts=2)
    coef, shift = head_forward(model, np.zeros(3))
    np.testing.assert_array_equal(coef, 0.0)
    np.testing.assert_array_equal(shift, 0.0)

    rng = np.random.default_rng(4)
    model = GruModel.initialize(3, 2, 6, 2, rng)
    hidden = rng.normal(size=3)
    coef, shift = head_forward(model, hidden)
    full = model.W_head @ hidden + model.b_head
    np.testing.assert_allclose(np.concatenate([coef, shift]), full)
    mask = np.array([True, False, True, False, False, True])
    coef, shift = head_forward(model, hidden, mask)
    assert np.count_nonzero(coef) == 3
    np.testing.assert_allclose(shift, full[6:])


def test_solve_matches_dynamics_integrator():
    spec = catalog_system("f8")
    traj = simulate(spec, steps=30)
    theta = spec.true_coefficients.values[None]
    pred, _ = solve_forward(spec.library, theta, traj.states[:1], traj.inputs[None], traj.h)
    np.testing.assert_allclose(pred[0], traj.states, rtol=1e-12, atol=1e-13)
    assert np.array_equal(pred[0, 0], traj.states[0])


def test_ode_loss_examples():
    spec = catalog_system("lotka")
    traj = simulate(spec, steps=40)
    window = traj.window(10, 20)
    assert ode_loss(spec.true_coefficients, [], window) < 1e-8
    zero = CoefficientMatrix.zeros(spec.library, 2)
    expected = np.mean((window.states - window.states[0]) ** 2)
    assert ode_loss(zero, [], window) == pytest.approx(expected, rel=1e-14)
    blowup = CoefficientMatrix(build_library(1, 2), np.array([[0.0, 0.0, 50.0]]))
    decay = integrate(lambda x, u, t: -x, [1.0], h=0.1, n_samples=60)
    assert ode_loss(blowup, [], decay) == 1e12


def test_solve_backward_matches_finite_differences():
    rng = np.random.default_rng(5)
    lib = build_library(3, 2)
    theta = rng.uniform(-0.3, 0.3, (2, 2, lib.size))
    y0 = rng.uniform(0.5, 1.0, (2, 2))
    inputs = rng.uniform(-0.5, 0.5, (2, 6, 1))
    weights = rng.normal(size=(2, 6, 2))

    def objective(th, u):
        pred, _ = solve_forward(lib, th, y0, u, 0.1, 2)
        return float(np.sum(weights * pred))

    _, cache = solve_forward(lib, theta, y0, inputs, 0.1, 2)
    g_theta, g_u = solve_backward(lib, cache, weights)
    eps = 1e-6
    for arr, grad in ((theta, g_theta), (inputs, g_u)):
        for idx in [tuple(rng.integers(0, s) for s in arr.shape) for _ in range(12)]:
            if arr is inputs and idx[1] == arr.shape[1] - 1:
                continue  # the last input sample is never used
            old = arr[idx]
            arr[idx] = old + eps
            up = objective(theta, inputs)
            arr[idx] = old - eps
            down = objective(theta, inputs)
            arr[idx] = old
            assert grad[idx] == pytest.approx((up - down) / (2 * eps), rel=1e-6, abs=1e-8)


@pytest.mark.parametrize("seed", range(3))
def test_network_gradient_with_inputs_substeps_and_penalty(seed):
    errors = max_relative_error(seed, m=1, substeps=2, consistency=0.3)
    assert max(errors.values()) < 1e-4, errors


def test_masked_outputs_get_no_gradient():
    model, batch, lib, scaling, mask, _ = random_problem(7)
    _, _, cache = network_forward(model, batch, lib, scaling, 0.1, mask)
    grads = network_backward(model, lib, scaling, cache)
    nc = model.n_coefficients
    np.testing.assert_array_equal(grads["W_head"][:nc][~mask], 0.0)
    np.testing.assert_array_equal(grads["b_head"][:nc][~mask], 0.0)


def test_zero_loss_batch_has_zero_head_gradient():
    spec = catalog_system("lotka")
    lib = spec.library
    traj = simulate(spec, steps=60)
    idx = np.arange(0, 40, 8)[:, None] + np.arange(12)
    batch = WindowBatch(traj.states[idx], traj.inputs[idx], traj.states[idx] / 10.0)
    model = GruModel.initialize(4, 2, 2 * lib.size, 0, np.random.default_rng(0))
    model.W_head[:] = 0.0
    model.b_head[:] = spec.true_coefficients.values.ravel()
    scaling = Scaling.identity(2, lib.size, 0)
    loss, _, cache = network_forward(model, batch, lib, scaling, traj.h)
    grads = network_backward(model, lib, scaling, cache)
    assert loss < 1e-20
    assert np.max(np.abs(grads["b_head"])) < 1e-8


def test_initial_prediction_is_the_data():
    model, batch, lib, scaling, mask, _ = random_problem(8)
    _, _, cache = network_forward(model, batch, lib, scaling, 0.1, mask)
    # residual at t=0 is exactly zero, so its gradient entry is too
    np.testing.assert_array_equal(cache.grad_states[:, 0], 0.0)


def test_diverged_windows_get_clipped_loss_and_no_gradient():
    model, batch, lib, scaling, _, _ = random_problem(9, k=40)
    model.b_head[:] = 0.0
    model.W_head[:] = 0.0
    model.b_head[lib.index((2, 0))] = 80.0  # x0' = 80 x0^2 blows up
    loss, window_loss, cache = network_forward(model, batch, lib, scaling, 0.5)
    assert np.all(window_loss == 1e12) and loss == 1e12
    grads = network_backward(model, lib, scaling, cache)
    for g in grads.values():
        np.testing.assert_array_equal(g, 0.0)


def test_adam_first_step_and_clipping():
    params = {"w": np.array([1.0, -2.0])}
    opt = Adam(params, lr=0.1, clip_norm=None)
    opt.step(params, {"w": np.array([3.0, -0.5])})
    # bias-corrected first step moves each coordinate by lr * sign(g)
    np.testing.assert_allclose(params["w"], [0.9, -1.9], atol=1e-7)

    params = {"w": np.zeros(2)}
    opt = Adam(params, lr=0.1, clip_norm=1.0)
    opt.step(params, {"w": np.array([300.0, 400.0])})
    np.testing.assert_allclose(opt.m["w"], [0.06, 0.08])
    opt.reset(["w"])
    assert opt.t["w"] == 0 and not opt.m["w"].any()


def test_model_shapes_and_copy():
    model = GruModel.initialize(4, 3, 10, 2, np.random.default_rng(0))
    assert tuple(model.params()) == PARAM_NAMES
    twin = model.copy()
    twin.W_r[0, 0] += 1.0
    assert model.W_r[0, 0] != twin.W_r[0, 0]
    with pytest.raises(ValueError):
        GruModel(4, 3, 10, 2, **{**model.params(), "b_head": np.zeros(3)})
