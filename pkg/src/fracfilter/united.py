"""Nested state/parameter estimation: score-filter state passes interleaved
with Direct Filter parameter passes inside every assimilation step."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .direct_filter import DirectFilter, ParameterNoise, ParticleSet
from .ensf import DiffusionSchedule, EnsembleScoreFilter, analysis_mean
from .observation import ObservationOperator, ObservationRecord
from .rng import substream

__all__ = [
    "UnitedFilterConfig",
    "FilterState",
    "StepError",
    "rmse",
    "assimilation_step",
    "run",
]


class StepError(RuntimeError):
    """A failure inside one assimilation step, tagged with where it happened."""

    def __init__(self, step: int, iteration: Optional[int], stage: str, cause: Exception):
        self.step, self.iteration, self.stage, self.cause = step, iteration, stage, cause
        where = f"step {step}" + (f", iteration {iteration}" if iteration is not None else "")
        super().__init__(f"{stage} failed at {where}: {cause}")


@dataclass(frozen=True)
class UnitedFilterConfig:
    R: int = 3
    J: int = 200
    M: int = 30
    n_steps: int = 200
    model_noise_std: float = 0.0
    param_noise: Optional[ParameterNoise] = None
    variance_floor: float = 1e-3
    literal_comparator: bool = False
    batch_size: Optional[int] = None
    implicit_likelihood: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.R < 1:
            raise ValueError("R must be at least 1")
        if self.J < 2 or self.M < 1:
            raise ValueError("ensemble and particle counts must be positive")


@dataclass(eq=False)
class FilterState:
    step: int
    ensemble: np.ndarray
    state_mean: np.ndarray
    particles: ParticleSet
    theta_mean: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def rmse(estimate: np.ndarray, reference: np.ndarray) -> float:
    e = np.asarray(estimate, dtype=float)
    r = np.asarray(reference, dtype=float)
    if e.shape != r.shape:
        raise ValueError(f"shape mismatch {e.shape} vs {r.shape}")
    return float(np.sqrt(np.mean((e - r) ** 2)))


def assimilation_step(fs: FilterState, y: ObservationRecord, forward: Callable,
                      operator: ObservationOperator, cfg: UnitedFilterConfig,
                      t: float = 0.0, keep_iterates: bool = False) -> FilterState:
    """Advance the filter state by one observation."""
    n = fs.step + 1
    sched = DiffusionSchedule(cfg.n_steps)
    ensf = EnsembleScoreFilter(forward, operator, sched, cfg.J, cfg.model_noise_std,
                               cfg.batch_size, cfg.implicit_likelihood)
    noise = cfg.param_noise or ParameterNoise.relative(fs.theta_mean)
    direct = DirectFilter(forward, noise, cfg.model_noise_std, cfg.variance_floor,
                          cfg.literal_comparator)
    theta = fs.theta_mean.copy()
    ps = fs.particles
    iterates = []
    for r in range(cfg.R):
        try:
            post, _ = ensf.cycle(fs.ensemble, theta, y, substream(cfg.seed, "ensf", n, r), t)
        except Exception as exc:
            raise StepError(n, r, "state estimation", exc) from exc
        x_r = analysis_mean(post)
        try:
            ps, theta, _ = direct.update(ps, x_r, fs.state_mean, n - 1,
                                         substream(cfg.seed, "direct", n, r), t)
        except Exception as exc:
            raise StepError(n, r, "parameter estimation", exc) from exc
        if keep_iterates:
            iterates.append((x_r, theta.copy()))
    try:
        post, _ = ensf.cycle(fs.ensemble, theta, y, substream(cfg.seed, "ensf", n, cfg.R), t)
    except Exception as exc:
        raise StepError(n, cfg.R, "state estimation", exc) from exc
    diag = {"collapses": direct.collapse_count}
    if keep_iterates:
        diag["iterates"] = iterates
    return FilterState(n, post, analysis_mean(post), ps, theta, diag)


def run(forward: Callable, operator: ObservationOperator, records: Sequence[ObservationRecord],
        initial_ensemble: np.ndarray, theta_guess, bounds, cfg: UnitedFilterConfig,
        times: Optional[Sequence[float]] = None, reference: Optional[np.ndarray] = None,
        callback: Optional[Callable] = None, keep_ensembles: bool = False):
    """Filter every record in order.

    Returns the list of filter states, starting with the initial one. When a
    reference trajectory is given, each state's diagnostics carry its RMSE.
    Only the last state keeps its ensemble unless ``keep_ensembles`` is set.
    """
    ens = np.asarray(initial_ensemble, dtype=float)
    guess = np.asarray(theta_guess, dtype=float)
    lo, hi = np.asarray(bounds, dtype=float).T
    noise = cfg.param_noise or ParameterNoise.relative(guess)
    cfg = replace(cfg, param_noise=noise)
    fs = FilterState(0, ens, analysis_mean(ens), ParticleSet.at(guess, cfg.M, lo, hi), guess.copy())
    history = [fs]
    for i, y in enumerate(records):
        t = times[i] if times is not None else 0.0
        fs = assimilation_step(fs, y, forward, operator, cfg, t)
        if not keep_ensembles:
            history[-1].ensemble = None
        if reference is not None:
            fs.diagnostics["rmse"] = rmse(fs.state_mean, reference[i])
        history.append(fs)
        if callback is not None:
            callback(fs)
    return history
