"""Training-free ensemble score filter.

The posterior is sampled by integrating a reverse-time SDE whose score is
built directly from the predicted ensemble (a Gaussian-mixture score under
the linear schedule ``alpha_t = 1 - t``, ``beta_t = t``) plus a damped
likelihood gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .observation import ObservationOperator, ObservationRecord, log_likelihood_grad

__all__ = [
    "DiffusionSchedule",
    "ScoreContext",
    "NonFiniteSampleError",
    "sde_coefficients",
    "predict",
    "prior_score",
    "posterior_score",
    "integrate_reverse_sde",
    "reverse_sample",
    "analysis_mean",
    "EnsembleScoreFilter",
]


def _linear_damping(t):
    return 1.0 - t


class NonFiniteSampleError(FloatingPointError):
    """A reverse-SDE trajectory left the finite range."""


@dataclass(frozen=True)
class DiffusionSchedule:
    n_steps: int = 200
    t_min: Optional[float] = None  # defaults to 1 / n_steps
    beta_floor: float = 1e-4
    damping: Callable = _linear_damping

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be positive")
        if self.t_min is None:
            object.__setattr__(self, "t_min", 1.0 / self.n_steps)
        if not 0.0 < self.t_min < 0.5:
            raise ValueError("t_min must lie in (0, 1/2)")

    @staticmethod
    def alpha(t):
        return 1.0 - t

    def beta(self, t):
        return max(t, self.beta_floor)

    def grid(self) -> np.ndarray:
        """Pseudo-times from ``1 - t_min`` down to ``t_min``."""
        return np.linspace(1.0 - self.t_min, self.t_min, self.n_steps + 1)


def sde_coefficients(t: float, sched: DiffusionSchedule):
    """Drift factor ``b(t)`` and squared diffusion ``sigma^2(t)``."""
    if not 0.0 <= t <= 1.0 - sched.t_min + 1e-12:
        raise ValueError(f"pseudo-time {t} outside [0, {1.0 - sched.t_min}]")
    return -1.0 / (1.0 - t), 2.0 * t / (1.0 - t)


@dataclass(eq=False)
class ScoreContext:
    """Predicted ensemble plus the observation it is conditioned on.

    ``batch_size`` below the ensemble size switches on mini-batching, with
    fresh indices drawn every reverse step from ``batch_rng``.
    """

    prediction_samples: np.ndarray
    observation: Optional[ObservationRecord] = None
    operator: Optional[ObservationOperator] = None
    damping: Callable = _linear_damping
    batch_indices: Optional[np.ndarray] = None
    batch_size: Optional[int] = None
    batch_rng: Optional[np.random.Generator] = None
    _sq_norms: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.prediction_samples = np.atleast_2d(np.asarray(self.prediction_samples, dtype=float))
        self._sq_norms = np.einsum("ij,ij->i", self.prediction_samples, self.prediction_samples)
        if self.batch_indices is not None:
            bi = np.asarray(self.batch_indices, dtype=np.int64)
            if len(np.unique(bi)) != len(bi) or bi.min() < 0 or bi.max() >= len(self.prediction_samples):
                raise ValueError("batch indices must be distinct members of the ensemble")
            self.batch_indices = bi

    def redraw_batch(self) -> None:
        J = len(self.prediction_samples)
        if self.batch_size is not None and self.batch_size < J:
            self.batch_indices = np.sort(self.batch_rng.choice(J, self.batch_size, replace=False))


def predict(samples: np.ndarray, forward: Callable, theta, model_noise_std: float, rng,
            t: float = 0.0) -> np.ndarray:
    """Advance every sample through ``forward`` and add model noise."""
    out = np.asarray(forward(np.atleast_2d(samples), theta, t), dtype=float)
    if model_noise_std > 0:
        out = out + model_noise_std * rng.standard_normal(out.shape)
    return out


def _mixture_weights(Z, X, sq, t, sched):
    a = sched.alpha(t)
    b2 = sched.beta(t) ** 2
    logits = (a * (Z @ X.T) - 0.5 * a * a * sq[None, :]) / b2
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w


def prior_score(z: np.ndarray, t: float, ctx: ScoreContext, sched: DiffusionSchedule,
                return_weights: bool = False):
    """Ensemble prior score at ``z`` (one state or a batch of rows)."""
    Z = np.atleast_2d(np.asarray(z, dtype=float))
    if ctx.batch_indices is None:
        X, sq = ctx.prediction_samples, ctx._sq_norms
    else:
        X, sq = ctx.prediction_samples[ctx.batch_indices], ctx._sq_norms[ctx.batch_indices]
    w = _mixture_weights(Z, X, sq, t, sched)
    a = sched.alpha(t)
    s = -(Z - a * (w @ X)) / sched.beta(t) ** 2
    if np.ndim(z) == 1:
        s, w = s[0], w[0]
    return (s, w) if return_weights else s


def posterior_score(z: np.ndarray, t: float, ctx: ScoreContext, sched: DiffusionSchedule):
    s = prior_score(z, t, ctx, sched)
    h = ctx.damping(t)
    if h != 0.0 and ctx.observation is not None:
        s = s + h * log_likelihood_grad(z, ctx.observation, ctx.operator)
    return s


def integrate_reverse_sde(score: Callable, n_samples: int, dim: int, sched: DiffusionSchedule,
                          rng, stiffness: Optional[Callable] = None,
                          before_step: Optional[Callable] = None) -> np.ndarray:
    """Euler-Maruyama from ``1 - t_min`` down to ``t_min`` starting at N(0, I).

    ``stiffness(Z, t)`` optionally returns a non-negative per-component rate
    ``c`` of a score term ``-c (z - z_c)`` that is treated linearly implicitly,
    which rescales the increment by ``1 / (1 + sigma^2 * c * dt)``. Without it
    the scheme is plain Euler-Maruyama.
    """
    ts = sched.grid()
    Z = rng.standard_normal((n_samples, dim))
    for t, t_next in zip(ts[:-1], ts[1:]):
        dt = t - t_next
        if before_step is not None:
            before_step()
        b, s2 = sde_coefficients(t, sched)
        drift = b * Z - s2 * score(Z, t)
        inc = -drift * dt + math.sqrt(s2 * dt) * rng.standard_normal(Z.shape)
        if stiffness is not None:
            c = stiffness(Z, t)
            if c is not None:
                inc = inc / (1.0 + s2 * dt * c)
        Z = Z + inc
        if not np.all(np.isfinite(Z)):
            raise NonFiniteSampleError(f"reverse SDE diverged at pseudo-time {t_next:.4g}")
    return Z


def reverse_sample(ctx: ScoreContext, J: int, sched: DiffusionSchedule, rng,
                   implicit_likelihood: bool = True) -> np.ndarray:
    """Posterior ensemble of size ``J`` for the given score context.

    Same update as :func:`integrate_reverse_sde` driven by
    :func:`posterior_score`, fused in place to avoid temporaries.
    """
    X_all, sq_all = ctx.prediction_samples, ctx._sq_norms
    dim = X_all.shape[1]
    op, y = ctx.operator, ctx.observation
    has_obs = y is not None
    if has_obs:
        var = op.obs_noise_std ** 2
        idx = op.index_set
        full = op.n_obs == dim and op.kind == "full"
        at_pos = op.arctan_positions
    ts = sched.grid()
    Z = rng.standard_normal((J, dim))
    inc = np.empty_like(Z)
    noise = np.empty_like(Z)
    for t, t_next in zip(ts[:-1], ts[1:]):
        dt = t - t_next
        if ctx.batch_size is not None:
            ctx.redraw_batch()
        if ctx.batch_indices is None:
            X, sq = X_all, sq_all
        else:
            X, sq = X_all[ctx.batch_indices], sq_all[ctx.batch_indices]
        b, s2 = sde_coefficients(t, sched)
        a, b2 = sched.alpha(t), sched.beta(t) ** 2
        W = _mixture_weights(Z, X, sq, t, sched)
        np.matmul(W, X, out=inc)
        inc *= s2 * dt * a / b2
        inc += (-b * dt - s2 * dt / b2) * Z
        rng.standard_normal(out=noise)
        noise *= math.sqrt(s2 * dt)
        inc += noise
        h = ctx.damping(t)
        if has_obs and h != 0.0:
            Zo = Z if full else Z[:, idx]
            if len(at_pos):
                g = Zo.copy()
                g[:, at_pos] = np.arctan(g[:, at_pos])
                jd = np.ones_like(g)
                jd[:, at_pos] = 1.0 / (1.0 + Zo[:, at_pos] ** 2)
                r = (g - y.values) * jd
            else:
                jd = None
                r = Zo - y.values
            r *= s2 * dt * h / var
            if full:
                inc -= r
            else:
                inc[:, idx] -= r
            if implicit_likelihood:
                k = s2 * dt * h / var
                denom = 1.0 + k * (jd * jd if jd is not None else 1.0)
                if full:
                    inc /= denom
                else:
                    inc[:, idx] /= denom
        Z += inc
        if not np.all(np.isfinite(Z)):
            raise NonFiniteSampleError(f"reverse SDE diverged at pseudo-time {t_next:.4g}")
    return Z


def analysis_mean(ensemble: np.ndarray) -> np.ndarray:
    """Sample mean with compensated summation, independent of member order."""
    E = np.asarray(ensemble, dtype=float)
    n = E.shape[0]
    srt = np.sort(E, axis=0)
    return np.array([math.fsum(col) for col in srt.T]) / n


class EnsembleScoreFilter:
    """One predict/analyse cycle of the score filter for a fixed parameter."""

    def __init__(self, forward: Callable, operator: ObservationOperator, sched: DiffusionSchedule,
                 n_samples: int, model_noise_std: float, batch_size: Optional[int] = None,
                 implicit_likelihood: bool = True):
        if n_samples < 2:
            raise ValueError("the ensemble needs at least two members")
        self.forward, self.operator, self.sched = forward, operator, sched
        self.n_samples, self.model_noise_std = n_samples, model_noise_std
        self.batch_size, self.implicit_likelihood = batch_size, implicit_likelihood

    def cycle(self, posterior_prev: np.ndarray, theta, y: ObservationRecord, rng, t: float = 0.0):
        """Return ``(posterior, prediction)`` ensembles for the next filter time."""
        pred = predict(posterior_prev, self.forward, theta, self.model_noise_std, rng, t)
        ctx = ScoreContext(pred, y, self.operator, self.sched.damping,
                           batch_size=self.batch_size, batch_rng=rng)
        ctx.redraw_batch()
        post = reverse_sample(ctx, self.n_samples, self.sched, rng, self.implicit_likelihood)
        return post, pred
