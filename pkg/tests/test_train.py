import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from merinda.dynamics import Trajectory, catalog_system, simulate
from merinda.errors import TrainingFailed, TrajectoryTooShort
from merinda.train import (
    TrainConfig,
    _head_outputs,
    _learning_rate,
    _prepare,
    _prune,
    load_checkpoint,
    loss_history_csv,
    recover,
    save_checkpoint,
    top_k_mask,
    train,
    whitening_map,
)

QUICK = dict(epochs=4, batch_size=32, learning_rate=0.03, window_length=10)


@pytest.fixture(scope="module")
def lotka():
    spec = catalog_system("lotka")
    return spec, simulate(spec, steps=120)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(window_length=1)
    with pytest.raises(ValueError):
        TrainConfig(epochs=10, prune_epoch=11)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(aggregate="mode")
    assert TrainConfig(epochs=10).effective_prune_epoch == 5
    assert TrainConfig().replace(seed=3).seed == 3


def test_defaults_follow_design():
    cfg = TrainConfig()
    assert (cfg.window_length, cfg.batch_size, cfg.epochs, cfg.learning_rate) == (20, 16, 500, 1e-3)
    assert cfg.grad_clip == 10.0


def test_cosine_schedule_endpoints():
    cfg = TrainConfig(learning_rate=0.1, lr_floor=0.01)
    assert _learning_rate(cfg, 0, 100) == pytest.approx(0.1)
    assert _learning_rate(cfg, 99, 100) == pytest.approx(0.001)
    rates = [_learning_rate(cfg, s, 100) for s in range(100)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    assert _learning_rate(cfg.replace(lr_schedule="constant"), 50, 100) == 0.1


def test_top_k_mask_ties_prefer_lower_index():
    mask = top_k_mask(np.array([1.0, 3.0, 3.0, 0.5, 3.0]), 2)
    np.testing.assert_array_equal(mask, [False, True, True, False, False])
    assert top_k_mask(np.ones(3), 10).all()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.integers(1, 12))
def test_top_k_mask_keeps_largest(seed, k):
    values = np.random.default_rng(seed).random(12)
    mask = top_k_mask(values, k)
    assert mask.sum() == k
    assert values[mask].min() >= values[~mask].max(initial=-np.inf)


def test_whitening_map_orthonormalizes_features(lotka):
    spec, traj = lotka
    prep = _prepare(traj, spec.library, TrainConfig(whitening_jitter=0.0))
    coef_map = prep.scaling.coef_map
    for i in range(2):
        t = coef_map[i] / prep.deriv_rms[i]
        np.testing.assert_allclose(t @ prep.gram @ t.T, np.eye(spec.library.size), atol=1e-7)
    active = np.zeros((2, spec.library.size), dtype=bool)
    active[0, [1, 4]] = True
    partial = whitening_map(prep.gram, prep.deriv_rms, active, 0.0)
    assert np.count_nonzero(partial[1]) == 0
    assert set(np.flatnonzero(partial[0].any(axis=0))) == {1, 4}


def test_prune_keeps_surviving_coefficients(lotka):
    spec, traj = lotka
    cfg = TrainConfig(**QUICK)
    result = train(traj, spec.library, cfg)
    prep = _prepare(traj, spec.library, cfg)
    model = result.model.copy()
    before, _ = _head_outputs(model, prep, cfg.window_length)
    theta_before = prep.scaling.to_physical(before)
    mask = _prune(model, prep, cfg.window_length, 4)
    after, _ = _head_outputs(model, prep, cfg.window_length, mask)
    theta_after = prep.scaling.to_physical(after)
    keep = mask.reshape(2, -1)
    assert keep.sum() == 4
    np.testing.assert_allclose(theta_after[:, keep], theta_before[:, keep], rtol=1e-7, atol=1e-9)
    np.testing.assert_array_equal(theta_after[:, ~keep], 0.0)


def test_training_is_deterministic(lotka):
    spec, traj = lotka
    cfg = TrainConfig(**QUICK, seed=5)
    a = train(traj, spec.library, cfg)
    b = train(traj, spec.library, cfg)
    assert a.loss_history == b.loss_history
    np.testing.assert_array_equal(a.coefficients.values, b.coefficients.values)


def test_training_reduces_loss(lotka):
    spec, traj = lotka
    result = train(traj, spec.library, TrainConfig(**QUICK), spec.true_coefficients)
    assert np.all(np.isfinite(result.loss_history))
    assert result.loss_history[-1] <= result.loss_history[0]
    assert result.epochs_completed == QUICK["epochs"]
    assert result.coefficient_mse is not None


def test_pruned_result_has_exact_sparsity(lotka):
    spec, traj = lotka
    result = train(traj, spec.library, TrainConfig(**QUICK, target_sparsity=4, prune_epoch=2))
    assert result.mask.sum() == 4
    assert result.coefficients.sparsity <= 4
    np.testing.assert_array_equal(result.coefficients.values.ravel()[~result.mask], 0.0)


def test_full_sparsity_equals_unmasked(lotka):
    spec, traj = lotka
    p = spec.library.size
    plain = train(traj, spec.library, TrainConfig(**QUICK))
    full = train(traj, spec.library, TrainConfig(**QUICK, target_sparsity=2 * p))
    assert full.mask is None
    np.testing.assert_array_equal(plain.coefficients.values, full.coefficients.values)


def test_every_window_diverging_fails():
    times = np.arange(30) * 0.1
    huge = Trajectory(times, np.column_stack([np.full(30, 5e12), np.linspace(1, 2, 30)]))
    with pytest.raises(TrainingFailed):
        train(huge, catalog_system("lotka").library, TrainConfig(**QUICK))


def test_window_longer_than_data(lotka):
    spec, traj = lotka
    with pytest.raises(TrajectoryTooShort):
        train(traj.window(0, 5), spec.library, TrainConfig(window_length=10))


def test_checkpoint_round_trip(lotka, tmp_path):
    spec, traj = lotka
    result = train(traj, spec.library, TrainConfig(**QUICK, target_sparsity=4, prune_epoch=2))
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, result.model, result.mask, result.config, result.scaling)
    model, mask, config, scaling = load_checkpoint(path)
    for name, value in result.model.params().items():
        np.testing.assert_array_equal(model.params()[name], value)
    np.testing.assert_array_equal(mask, result.mask)
    assert config == result.config
    np.testing.assert_array_equal(scaling.coef_map, result.scaling.coef_map)


def test_loss_history_csv():
    text = loss_history_csv([1.5, 0.25])
    assert text == "epoch,loss\n0,1.5\n1,0.25\n"


def test_recover_epsilon_sets_pass_flag():
    loose = recover("lotka", overrides=dict(QUICK, steps=120, epsilon=1e15))
    assert loose.passed is True
    tight = recover("lotka", overrides=dict(QUICK, steps=120, epsilon=0.0))
    assert tight.passed is False
    assert recover("lotka", overrides=dict(QUICK, steps=120)).passed is None


def test_recover_defaults_sparsity_to_truth():
    result = recover("lotka", overrides=dict(QUICK, steps=120, prune_epoch=2))
    assert result.config.target_sparsity == 4


def test_recover_one_sample_csv(tmp_path):
    path = tmp_path / "one.csv"
    path.write_text("t,x0,x1\n0,1,2\n")
    with pytest.raises(TrajectoryTooShort):
        recover(data_source=str(path), overrides=QUICK)


def test_recover_from_csv(tmp_path, lotka):
    _, traj = lotka
    path = tmp_path / "lotka.csv"
    path.write_text(traj.to_csv())
    result = recover(data_source=str(path), overrides=QUICK)
    assert result.coefficient_mse is None
    assert result.coefficients.values.shape == (2, 6)
