"""Augmented-state stochastic ensemble Kalman filter (baseline)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .direct_filter import ParameterNoise
from .observation import ObservationOperator, ObservationRecord, jacobian_diagonal, observe
from .rng import substream
from .united import rmse

__all__ = ["AugmentedEnsemble", "forecast", "kalman_update", "AugEnKFConfig", "run_aug_enkf"]


@dataclass(frozen=True, eq=False)
class AugmentedEnsemble:
    """Members are rows ``state || parameters``; ``n_params`` trailing columns."""

    members: np.ndarray
    n_params: int
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "members", np.atleast_2d(np.asarray(self.members, dtype=float)))
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))

    @property
    def states(self) -> np.ndarray:
        return self.members[:, : -self.n_params]

    @property
    def params(self) -> np.ndarray:
        return self.members[:, -self.n_params:]

    def clipped(self) -> "AugmentedEnsemble":
        m = self.members.copy()
        m[:, -self.n_params:] = np.clip(m[:, -self.n_params:], self.lo, self.hi)
        return AugmentedEnsemble(m, self.n_params, self.lo, self.hi)


def forecast(ens: AugmentedEnsemble, forward: Callable, model_noise_std: float, param_gamma,
             rng, t: float = 0.0) -> AugmentedEnsemble:
    """Perturb and clip each member's parameters, then advance its state with them."""
    params = ens.params + rng.standard_normal(ens.params.shape) * np.asarray(param_gamma, float)
    params = np.clip(params, ens.lo, ens.hi)
    states = np.empty_like(ens.states)
    for m in range(len(states)):
        states[m] = forward(ens.states[m], params[m], t)
    if model_noise_std > 0:
        states += model_noise_std * rng.standard_normal(states.shape)
    return AugmentedEnsemble(np.hstack([states, params]), ens.n_params, ens.lo, ens.hi)


def kalman_update(ens: AugmentedEnsemble, y: ObservationRecord, op: ObservationOperator, rng,
                  ridge: float = 1e-10, obs_var: Optional[float] = None) -> AugmentedEnsemble:
    """Perturbed-observation update with the Jacobian frozen at the ensemble mean."""
    E = ens.members
    N = E.shape[0]
    var = op.obs_noise_std ** 2 if obs_var is None else obs_var
    mean = E.mean(axis=0)
    A = (E - mean) / np.sqrt(N - 1)
    jd = jacobian_diagonal(mean[: -ens.n_params], op)
    HA = A[:, op.index_set] * jd  # (N, n_obs) = (H A^T)^T
    perturbed = y.values + np.sqrt(var) * rng.standard_normal((N, op.n_obs))
    innov = perturbed - observe(ens.states, op)  # (N, n_obs)
    reg = var + ridge
    if op.n_obs > N:
        # K d = A^T (HA HA^T + reg I_N)^{-1} HA d
        S = HA @ HA.T + reg * np.eye(N)
        coef = sla.solve(S, HA @ innov.T, assume_a="pos")  # (N, N)
    else:
        S = HA.T @ HA + reg * np.eye(op.n_obs)
        coef = HA @ sla.solve(S, innov.T, assume_a="pos")
    new = E + (A.T @ coef).T
    return AugmentedEnsemble(new, ens.n_params, ens.lo, ens.hi).clipped()


@dataclass(frozen=True)
class AugEnKFConfig:
    N_e: int = 100
    model_noise_std: float = 0.0
    param_noise: Optional[ParameterNoise] = None
    ridge: float = 1e-10
    seed: int = 0


def run_aug_enkf(forward: Callable, operator: ObservationOperator,
                 records: Sequence[ObservationRecord], initial_states: np.ndarray, theta_guess,
                 bounds, cfg: AugEnKFConfig, times=None, reference=None, callback=None):
    """Returns a list of dicts ``step, state_mean, theta_mean, params, rmse``."""
    guess = np.asarray(theta_guess, dtype=float)
    lo, hi = np.asarray(bounds, dtype=float).T
    noise = cfg.param_noise or ParameterNoise.relative(guess)
    rng0 = substream(cfg.seed, "augenkf", "init")
    states = np.asarray(initial_states, dtype=float)
    if len(states) != cfg.N_e:
        raise ValueError("initial ensemble size must equal N_e")
    params = np.clip(guess + rng0.standard_normal((cfg.N_e, len(guess))) * noise.at(0), lo, hi)
    ens = AugmentedEnsemble(np.hstack([states, params]), len(guess), lo, hi)
    out = [{"step": 0, "state_mean": ens.states.mean(0), "theta_mean": ens.params.mean(0),
            "params": ens.params.copy()}]
    for i, y in enumerate(records):
        n = i + 1
        t = times[i] if times is not None else 0.0
        rng = substream(cfg.seed, "augenkf", n)
        ens = forecast(ens, forward, cfg.model_noise_std, noise.at(i), rng, t)
        ens = kalman_update(ens, y, operator, rng, cfg.ridge)
        rec = {"step": n, "state_mean": ens.states.mean(0), "theta_mean": ens.params.mean(0),
               "params": ens.params.copy()}
        if reference is not None:
            rec["rmse"] = rmse(rec["state_mean"], reference[i])
        out.append(rec)
        if callback is not None:
            callback(rec)
    return out
