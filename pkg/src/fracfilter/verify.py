"""Fast built-in oracle checks behind ``fracfilter verify``."""
from __future__ import annotations

import time
from typing import Callable

import numpy as np
from scipy import stats

from . import solver as S
from .direct_filter import ParticleSet, resample
from .ensf import DiffusionSchedule, ScoreContext, integrate_reverse_sde, posterior_score, prior_score
from .mesh import FractureSpec, build_dof_map, build_mesh
from .observation import ObservationRecord, log_likelihood_grad, make_operator

__all__ = ["CHECKS", "manufactured_errors", "run_checks"]


def manufactured_errors(ns=(10, 20, 40), cell_kind: str = "triangle", T: float = 0.5):
    """L2 pressure errors for a smooth exact solution, ``dt = h / 2``.

    Exact solution ``p = exp(-t) (x^2 + sin(pi y))`` on ``(0,2) x (0,1)`` with
    unit coefficients; it is continuous across ``x = 1`` with matching fluxes.
    """
    pi = np.pi

    def exact(x, y, t):
        return np.exp(-t) * (x ** 2 + np.sin(pi * y))

    alpha = 1.0
    src = S.SourceData(
        cell=lambda x, y, t: -exact(x, y, t) - np.exp(-t) * (2.0 - pi ** 2 * np.sin(pi * y)),
        fracture=lambda y, t: -exact(1.0, y, t) + alpha * pi ** 2 * np.exp(-t) * np.sin(pi * y),
    )
    bc = S.BoundaryData({s: exact for s in ("left", "right", "bottom", "top")}, frozenset(),
                        (exact, exact))
    theta = S.ModelParameters(S.CONTINUOUS_PRESSURE, 1.0, 1.0, alpha)
    errs = []
    for n in ns:
        mesh = build_mesh(2 * n, n, (2.0, 1.0), FractureSpec(1.0, 0.001), cell_kind)
        dofs = build_dof_map(mesh)
        disc = S.Discretization(mesh, dofs, bc)
        dt = 0.5 / n
        steps = int(round(T / dt))
        model = S.ForwardModel(disc, dt, lambda _: theta, source=src)
        x = np.zeros(dofs.total_dim)
        c = mesh.cell_centroids()
        x[dofs.pressure_dofs] = exact(c[:, 0], c[:, 1], 0.0)
        ys = mesh.fracture_nodes_y()
        x[dofs.fracture_pressure_dofs] = exact(1.0, 0.5 * (ys[1:] + ys[:-1]), 0.0)
        for i in range(1, steps + 1):
            x = model(x, [1.0], i * dt)
        q, w = disc._qpts, disc._qw
        diff = x[dofs.pressure_dofs][:, None] - exact(q[..., 0], q[..., 1], steps * dt)
        errs.append(float(np.sqrt(np.sum(w * diff ** 2))))
    return errs


def _check_convergence():
    e = manufactured_errors()
    ratios = [e[i] / e[i + 1] for i in range(len(e) - 1)]
    return min(ratios) >= 1.7, f"error ratios {', '.join(f'{r:.3f}' for r in ratios)}"


def _check_scores():
    rng = np.random.default_rng(1)
    sched = DiffusionSchedule(200)
    worst = 0.0
    for _ in range(200):
        x, z = rng.standard_normal(4), rng.standard_normal(4)
        t = rng.uniform(sched.t_min, 1 - sched.t_min)
        s = prior_score(z, t, ScoreContext(x[None, :]), sched)
        worst = max(worst, np.max(np.abs(s - (-(z - (1 - t) * x) / t ** 2))))
    op = make_operator("mixed_arctan", 6, [0, 1, 2], 1.0, 0.5, rng)
    y = ObservationRecord(1, rng.standard_normal(6))
    ctx = ScoreContext(rng.standard_normal((5, 6)), y, op)
    z = rng.standard_normal(6)
    d = posterior_score(z, 0.3, ctx, sched) - prior_score(z, 0.3, ctx, sched)
    worst = max(worst, np.max(np.abs(d - 0.7 * log_likelihood_grad(z, y, op))))
    return worst < 1e-12, f"max deviation {worst:.2e}"


def _check_generative():
    sched = DiffusionSchedule(200)
    Z = integrate_reverse_sde(lambda z, t: -z / ((1 - t) ** 2 + t ** 2), 10000, 1, sched,
                              np.random.default_rng(3))
    m, v = float(Z.mean()), float(Z.var())
    return abs(m) < 0.05 and abs(v - 1) < 0.1, f"mean {m:.4f}, variance {v:.4f}"


def _check_resampling():
    rng = np.random.default_rng(5)
    w = rng.dirichlet(np.ones(8))
    ps = ParticleSet(np.arange(8.0)[:, None], [-1.0], [10.0])
    counts = np.zeros(8)
    for _ in range(10000):
        counts += np.bincount(resample(ps, w, rng).particles[:, 0].astype(int), minlength=8)
    p = stats.chisquare(counts, counts.sum() * w).pvalue
    return p > 0.01, f"chi-square p-value {p:.3f}"


def _check_solver():
    mesh = build_mesh(20, 10, (2.0, 1.0), FractureSpec(1.0, 0.001))
    dofs = build_dof_map(mesh)
    bc = S.BoundaryData({"left": 0.0, "right": 1.0}, frozenset({"bottom", "top"}), (1.0, 0.0))
    op = S.assemble_operator(mesh, dofs, S.ModelParameters(S.CONTINUOUS_PRESSURE, 1, 1, 2), 0.02, bc)
    A = op.disc.flux_matrix(op.theta)
    sym = abs(A - A.T).max()
    x = np.random.default_rng(0).standard_normal(op.dim)
    r = op.matrix @ x
    res = np.linalg.norm(op.matrix @ op.solve(r) - r) / np.linalg.norm(r)
    return sym < 1e-12 and res < 1e-10, f"asymmetry {sym:.1e}, residual {res:.1e}"


CHECKS: dict = {
    "solver symmetry and residual": _check_solver,
    "manufactured convergence": _check_convergence,
    "score formulas": _check_scores,
    "reverse-SDE standard normal": _check_generative,
    "resampling chi-square": _check_resampling,
}


def run_checks(emit: Callable[[str], None] = print) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        passed, info = fn()
        ok &= passed
        emit(f"{'PASS' if passed else 'FAIL'}  {name}: {info} ({time.perf_counter() - t0:.1f}s)")
    return ok
