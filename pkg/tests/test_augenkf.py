import numpy as np
import pytest

from fracfilter import augenkf as A
from fracfilter.observation import (FULL, MIXED_ARCTAN, ObservationRecord, generate_data, jacobian_diagonal,
                                    make_operator, observe)

from test_united import DIM, toy_forward, toy_problem


def _lin(x, theta, t=0.0):
    return float(theta[0]) * np.asarray(x, dtype=float)


def test_forecast_identical_members_zero_noise():
    ens = A.AugmentedEnsemble(np.tile([1.0, 2.0, 0.5], (4, 1)), 1, [0.0], [8.0])
    out = A.forecast(ens, _lin, 0.0, [0.0], np.random.default_rng(0))
    assert np.all(out.members == out.members[0])
    assert np.allclose(out.states[0], [0.5, 1.0])


def test_forecast_keeps_parameters_in_box():
    ens = A.AugmentedEnsemble(np.tile([1.0, 8.0], (500, 1)), 1, [0.1], [8.0])
    out = A.forecast(ens, _lin, 0.0, [1.0], np.random.default_rng(1))
    assert out.params.min() >= 0.1 and out.params.max() <= 8.0
    assert np.any(out.params == 8.0)


def test_forecast_mean_commutes_for_linear_model():
    r = np.random.default_rng(2)
    members = np.hstack([r.standard_normal((20, 3)), np.full((20, 1), 0.7)])
    ens = A.AugmentedEnsemble(members, 1, [0.0], [8.0])
    out = A.forecast(ens, _lin, 0.0, [0.0], r)
    assert np.allclose(out.states.mean(0), 0.7 * ens.states.mean(0), atol=1e-14)


def test_huge_observation_noise_leaves_members():
    r = np.random.default_rng(3)
    members = np.hstack([r.standard_normal((30, 5)), r.uniform(1, 2, (30, 2))])
    ens = A.AugmentedEnsemble(members, 2, [0.0, 0.0], [8.0, 8.0])
    op = make_operator(FULL, 5, obs_noise_std=1e6)
    out = A.kalman_update(ens, ObservationRecord(1, np.zeros(5)), op, r)
    # perturbed observations move members by about spread / obs std
    assert np.sqrt(np.mean((out.members - members) ** 2)) < 1e-6
    op = make_operator(FULL, 5, obs_noise_std=1e8)
    out = A.kalman_update(ens, ObservationRecord(1, np.zeros(5)), op, r)
    assert np.max(np.abs(out.members - members)) < 1e-6


def _dense_update(members, n_params, y, op, noise):
    """Textbook stochastic EnKF with an explicit gain matrix."""
    E = members
    mean = E.mean(0)
    P = np.cov(E.T, ddof=1)
    H = np.zeros((op.n_obs, E.shape[1]))
    H[np.arange(op.n_obs), op.index_set] = jacobian_diagonal(mean[:-n_params], op)
    Rm = op.obs_noise_std ** 2 * np.eye(op.n_obs)
    K = P @ H.T @ np.linalg.inv(H @ P @ H.T + Rm)
    innov = y + noise - observe(E[:, :-n_params], op)
    return E + innov @ K.T


@pytest.mark.parametrize("n_members", [6, 60])
def test_update_matches_dense_gain(n_members):
    r = np.random.default_rng(4)
    dim = 12
    op = make_operator(MIXED_ARCTAN, dim, np.arange(6), 0.75, 0.2, r)
    members = np.hstack([r.standard_normal((n_members, dim)), r.uniform(2, 3, (n_members, 1))])
    ens = A.AugmentedEnsemble(members, 1, [0.0], [8.0])
    y = r.standard_normal(op.n_obs)
    out = A.kalman_update(ens, ObservationRecord(1, y), op, np.random.default_rng(9), ridge=0.0)
    noise = 0.2 * np.random.default_rng(9).standard_normal((n_members, op.n_obs))
    want = _dense_update(members, 1, y, op, noise)
    want[:, -1] = np.clip(want[:, -1], 0.0, 8.0)
    assert np.allclose(out.members, want, rtol=0, atol=1e-9)


def kalman_oracle_gap(N=10 ** 4, seed=0):
    """Ensemble-mean error against the exact joint Gaussian update, in standard errors."""
    r = np.random.default_rng(seed)
    m0, p0, q, obs_std, y = 1.0, 0.5, 0.3, 0.4, 1.8
    theta = 4.0 + np.sqrt(q) * r.standard_normal(N)
    x = m0 + (theta - 4.0) + np.sqrt(p0 - q) * r.standard_normal(N)  # var(x) = p0, cov(x, theta) = q
    ens = A.AugmentedEnsemble(np.column_stack([x, theta]), 1, [-100.0], [100.0])
    op = make_operator(FULL, 1, obs_noise_std=obs_std)
    out = A.kalman_update(ens, ObservationRecord(1, np.array([y])), op, r)
    gain = np.array([p0, q]) / (p0 + obs_std ** 2)
    exact = np.array([m0, 4.0]) + gain * (y - m0)
    post_var = np.array([p0 - p0 * gain[0], q - q * gain[1]])
    se = np.sqrt(post_var / N)
    return np.abs(out.members.mean(0) - exact) / se


def test_one_dimensional_kalman_oracle():
    assert np.all(kalman_oracle_gap() < 3)


def test_update_clips_parameters():
    r = np.random.default_rng(5)
    members = np.hstack([r.standard_normal((40, 3)), np.linspace(0.2, 7.9, 40)[:, None]])
    members[:, 0] += 5 * (members[:, -1] - 4)  # strongly correlated with the observed dof
    ens = A.AugmentedEnsemble(members, 1, [0.0], [8.0])
    op = make_operator(FULL, 3, obs_noise_std=0.01)
    out = A.kalman_update(ens, ObservationRecord(1, np.array([60.0, 0.0, 0.0])), op, r)
    assert out.params.min() >= 0.0 and out.params.max() <= 8.0
    assert np.any(out.params == 8.0)


def test_run_schema_bounds_and_trend():
    traj, _, _ = toy_problem(15)
    op = make_operator(FULL, DIM, obs_noise_std=0.0)
    recs = generate_data(traj, op, np.random.default_rng(0))
    cfg = A.AugEnKFConfig(N_e=50, model_noise_std=0.01, seed=1)
    init = 0.5 + 0.2 * np.random.default_rng(2).standard_normal((50, DIM))
    out = A.run_aug_enkf(toy_forward, op, recs, init, [2.0], [(0.1, 8.0)], cfg, reference=traj)
    assert [o["step"] for o in out] == list(range(16))
    assert set(out[1]) == {"step", "state_mean", "theta_mean", "params", "rmse"}
    for o in out:
        assert o["params"].min() >= 0.1 and o["params"].max() <= 8.0
    r = [o["rmse"] for o in out[1:]]
    assert np.mean(r[-5:]) < np.mean(r[:5])
    again = A.run_aug_enkf(toy_forward, op, recs, init, [2.0], [(0.1, 8.0)], cfg, reference=traj)
    assert all(np.array_equal(a["state_mean"], b["state_mean"]) for a, b in zip(out, again))
    with pytest.raises(ValueError):
        A.run_aug_enkf(toy_forward, op, recs, init[:10], [2.0], [(0.1, 8.0)], cfg)
