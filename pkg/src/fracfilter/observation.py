"""Partial, optionally nonlinear, noisy observations of the discrete state."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "FULL",
    "RANDOM_MASK",
    "MIXED_ARCTAN",
    "ObservationOperator",
    "ObservationRecord",
    "make_operator",
    "observe",
    "jacobian_diagonal",
    "log_likelihood_grad",
    "linearized_jacobian",
    "generate_data",
    "write_observations_csv",
    "read_observations_csv",
]

FULL = "full"
RANDOM_MASK = "random_mask"
MIXED_ARCTAN = "mixed_arctan"
KINDS = (FULL, RANDOM_MASK, MIXED_ARCTAN)


@dataclass(frozen=True, eq=False)
class ObservationOperator:
    """Fixed sensor layout: ``index_set`` is observed, ``arctan_set`` of it through ``atan``."""

    kind: str
    dim: int
    index_set: np.ndarray
    arctan_set: np.ndarray
    obs_noise_std: float
    fraction: float = 1.0

    def __post_init__(self):
        idx = np.asarray(self.index_set, dtype=np.int64)
        at = np.asarray(self.arctan_set, dtype=np.int64)
        if np.any(np.diff(idx) <= 0):
            raise ValueError("index_set must be strictly increasing")
        if not np.all(np.isin(at, idx)):
            raise ValueError("arctan_set must be a subset of index_set")
        if self.obs_noise_std < 0:
            raise ValueError("observation noise must be non-negative")
        object.__setattr__(self, "index_set", idx)
        object.__setattr__(self, "arctan_set", np.sort(at))
        # positions (within index_set) of the arctan entries
        object.__setattr__(self, "arctan_positions", np.searchsorted(idx, self.arctan_set))

    @property
    def n_obs(self) -> int:
        return len(self.index_set)


@dataclass(frozen=True, eq=False)
class ObservationRecord:
    step_index: int
    values: np.ndarray


def make_operator(kind: str, dim: int, velocity_dofs: Sequence[int] = (), fraction: float = 1.0,
                  obs_noise_std: float = 1e-3, rng=None) -> ObservationOperator:
    """Draw a sensor layout once; ``rng`` is required unless ``kind`` is full."""
    if kind not in KINDS:
        raise ValueError(f"unknown observation kind {kind!r}")
    if kind == FULL:
        return ObservationOperator(FULL, dim, np.arange(dim), np.zeros(0, dtype=np.int64),
                                   obs_noise_std, 1.0)
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    if rng is None:
        raise ValueError("a random generator is needed to draw the sensor set")
    n = int(round(fraction * dim))
    idx = np.sort(rng.choice(dim, size=n, replace=False))
    if kind == RANDOM_MASK:
        return ObservationOperator(RANDOM_MASK, dim, idx, np.zeros(0, dtype=np.int64),
                                   obs_noise_std, fraction)
    at = idx[np.isin(idx, np.asarray(velocity_dofs, dtype=np.int64))]
    return ObservationOperator(MIXED_ARCTAN, dim, idx, at, obs_noise_std, fraction)


def observe(x: np.ndarray, op: ObservationOperator) -> np.ndarray:
    """``g(x)``; ``x`` may carry leading batch axes."""
    y = np.take(np.asarray(x, dtype=float), op.index_set, axis=-1)
    if len(op.arctan_set):
        y[..., op.arctan_positions] = np.arctan(y[..., op.arctan_positions])
    return y


def jacobian_diagonal(z: np.ndarray, op: ObservationOperator) -> np.ndarray:
    """Derivative of each observed component with respect to its own dof."""
    z = np.asarray(z, dtype=float)
    shape = z.shape[:-1] + (op.n_obs,)
    jd = np.ones(shape)
    if len(op.arctan_set):
        za = np.take(z, op.arctan_set, axis=-1)
        jd[..., op.arctan_positions] = 1.0 / (1.0 + za * za)
    return jd


def log_likelihood_grad(z: np.ndarray, y, op: ObservationOperator,
                        noise_var: float | None = None) -> np.ndarray:
    """``-J^T Y^{-1} (g(z) - y)`` as a full-length vector (batched over rows)."""
    vals = y.values if isinstance(y, ObservationRecord) else np.asarray(y, dtype=float)
    var = op.obs_noise_std ** 2 if noise_var is None else noise_var
    if not var > 0:
        raise ValueError("the likelihood needs a positive observation variance")
    z = np.asarray(z, dtype=float)
    r = (observe(z, op) - vals) * jacobian_diagonal(z, op) / var
    out = np.zeros_like(z)
    out[..., op.index_set] = -r
    return out


def linearized_jacobian(z: np.ndarray, op: ObservationOperator) -> sp.csr_matrix:
    """Sparse ``n_obs x dim`` Jacobian of ``g`` at ``z``."""
    jd = jacobian_diagonal(z, op)
    return sp.csr_matrix((jd, (np.arange(op.n_obs), op.index_set)), shape=(op.n_obs, op.dim))


def generate_data(trajectory, op: ObservationOperator, rng) -> list:
    """One noisy record per snapshot, steps numbered from 1."""
    out = []
    for i, x in enumerate(trajectory, start=1):
        clean = observe(x, op)
        out.append(ObservationRecord(i, clean + op.obs_noise_std * rng.standard_normal(op.n_obs)))
    return out


def write_observations_csv(path, records, op: ObservationOperator) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "dof", "value"])
        for rec in records:
            for dof, v in zip(op.index_set, rec.values):
                w.writerow([rec.step_index, int(dof), repr(float(v))])


def read_observations_csv(path) -> list:
    rows = {}
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            rows.setdefault(int(r["step"]), []).append((int(r["dof"]), float(r["value"])))
    out = []
    for s in sorted(rows):
        vals = sorted(rows[s])
        out.append(ObservationRecord(s, np.array([v for _, v in vals])))
    return out
