"""Particle estimator for model parameters driven by state estimates."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .solver import SolverError

__all__ = [
    "ParticleSet",
    "ParameterNoise",
    "reflect",
    "perturb",
    "log_weights",
    "weight",
    "resample",
    "estimate",
    "DirectFilter",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ParticleSet:
    particles: np.ndarray  # (M, k)
    lo: np.ndarray
    hi: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.particles, dtype=float))
        lo = np.broadcast_to(np.asarray(self.lo, dtype=float), P.shape[1:]).copy()
        hi = np.broadcast_to(np.asarray(self.hi, dtype=float), P.shape[1:]).copy()
        if np.any(lo >= hi):
            raise ValueError("each lower bound must be below its upper bound")
        if np.any(P < lo - 1e-12) or np.any(P > hi + 1e-12):
            raise ValueError("particles outside their bounds")
        w = np.full(len(P), 1.0 / len(P)) if self.weights is None else np.asarray(self.weights, float)
        object.__setattr__(self, "particles", P)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "weights", w)

    @classmethod
    def at(cls, guess, M: int, lo, hi) -> "ParticleSet":
        return cls(np.tile(np.asarray(guess, dtype=float), (M, 1)), lo, hi)

    @property
    def M(self) -> int:
        return self.particles.shape[0]


@dataclass(frozen=True)
class ParameterNoise:
    """Per-component exploration std ``gamma * decay**step``, never below ``floor``."""

    gamma: tuple
    decay: float = 0.98
    floor: tuple = ()

    def __post_init__(self):
        if any(not g > 0 for g in self.gamma):
            raise ValueError("parameter noise must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")

    @classmethod
    def relative(cls, guess, fraction=0.05, decay=0.98, floor_fraction=0.001) -> "ParameterNoise":
        g = np.abs(np.asarray(guess, dtype=float))
        return cls(tuple(fraction * g), decay, tuple(floor_fraction * g))

    def at(self, step: int) -> np.ndarray:
        g = np.asarray(self.gamma) * self.decay ** step
        if self.floor:
            g = np.maximum(g, np.asarray(self.floor))
        return g


def reflect(x: np.ndarray, lo, hi) -> np.ndarray:
    """Fold values back into ``[lo, hi]`` by mirror reflection at the bounds."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    width = hi - lo
    y = np.mod(x - lo, 2.0 * width)
    return lo + np.where(y > width, 2.0 * width - y, y)


def perturb(ps: ParticleSet, gamma, rng) -> ParticleSet:
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), ps.particles.shape[1:])
    moved = ps.particles + rng.standard_normal(ps.particles.shape) * gamma
    return ParticleSet(reflect(moved, ps.lo, ps.hi), ps.lo, ps.hi)


def log_weights(particles: np.ndarray, state_estimate: np.ndarray, prev_state: np.ndarray,
                forward: Callable, variance: float, t: float = 0.0,
                model_noise_std: float = 0.0, rng=None) -> np.ndarray:
    """Unnormalised Gaussian log-likelihood of every particle.

    Each distinct particle costs one forward step from ``prev_state``. With
    ``model_noise_std > 0`` and an ``rng`` every particle's prediction carries
    its own model-noise draw. Particles whose forward step fails get ``-inf``.
    """
    P = np.atleast_2d(particles)
    uniq, inverse = np.unique(P, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).ravel()
    preds = []
    for theta in uniq:
        try:
            preds.append(np.asarray(forward(prev_state, theta, t), dtype=float))
        except SolverError:
            preds.append(None)
    noisy = model_noise_std > 0 and rng is not None
    out = np.empty(len(P))
    for m in range(len(P)):
        pred = preds[inverse[m]]
        if pred is None:
            out[m] = -np.inf
            continue
        d = pred - state_estimate
        if noisy:
            d = d + model_noise_std * rng.standard_normal(d.shape)
        out[m] = -0.5 * float(d @ d) / variance
    return out


def weight(particles, state_estimate, prev_state, forward, variance: float, t: float = 0.0,
           model_noise_std: float = 0.0, rng=None):
    """Normalised weights and a flag set when every weight vanished."""
    lw = log_weights(particles, state_estimate, prev_state, forward, variance, t,
                     model_noise_std, rng)
    if not np.any(np.isfinite(lw)):
        log.warning("all particle weights vanished; falling back to uniform weights")
        return np.full(len(lw), 1.0 / len(lw)), True
    w = np.exp(lw - np.max(lw[np.isfinite(lw)]))
    w[~np.isfinite(w)] = 0.0
    return w / w.sum(), False


def resample(ps: ParticleSet, weights, rng) -> ParticleSet:
    """Multinomial resampling; output weights are uniform."""
    w = np.asarray(weights, dtype=float)
    idx = rng.choice(ps.M, size=ps.M, replace=True, p=w / w.sum())
    return ParticleSet(ps.particles[np.sort(idx)], ps.lo, ps.hi)


def estimate(ps: ParticleSet) -> np.ndarray:
    return ps.particles.mean(axis=0)


class DirectFilter:
    """Perturb, weight against a state estimate, resample.

    ``variance`` in the likelihood is ``max(model_noise_std, variance_floor)**2``;
    ``literal`` adds model noise to each particle's prediction.
    """

    def __init__(self, forward: Callable, noise: ParameterNoise, model_noise_std: float,
                 variance_floor: float = 1e-3, literal: bool = False):
        self.forward, self.noise = forward, noise
        self.model_noise_std = model_noise_std
        self.variance = max(model_noise_std, variance_floor) ** 2
        self.literal = literal
        self.collapse_count = 0

    def update(self, ps: ParticleSet, state_estimate, prev_state, step: int, rng, t: float = 0.0):
        """Return ``(new particle set, parameter mean, weights)``."""
        moved = perturb(ps, self.noise.at(step), rng)
        w, collapsed = weight(
            moved.particles, state_estimate, prev_state, self.forward, self.variance, t,
            self.model_noise_std if self.literal else 0.0, rng if self.literal else None,
        )
        self.collapse_count += int(collapsed)
        new = resample(moved, w, rng)
        return new, estimate(new), w
