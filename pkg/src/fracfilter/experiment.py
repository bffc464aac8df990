"""Experiment harness: problem construction, reference data, filter runs, CSV output."""
from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import solver as S
from .augenkf import AugEnKFConfig, run_aug_enkf
from .config import TestCaseConfig, load_config
from .direct_filter import ParameterNoise
from .mesh import DofMap, FractureSpec, Mesh, build_dof_map, build_mesh
from .observation import generate_data, make_operator
from .rng import substream
from .united import UnitedFilterConfig, run as run_united

__all__ = [
    "Problem",
    "ExperimentError",
    "build_problem",
    "reference_trajectory",
    "make_observations",
    "run_scenario",
    "run_experiment",
    "fracture_jump_signs",
]

log = logging.getLogger(__name__)


class ExperimentError(RuntimeError):
    """Structured failure report: module, scenario, filter and cause."""

    def __init__(self, module: str, scenario: str, filter_name: str, cause: Exception):
        self.module, self.scenario, self.filter_name, self.cause = module, scenario, filter_name, cause
        super().__init__(f"[{module}] scenario={scenario} filter={filter_name}: {cause}")


@dataclass(eq=False)
class Problem:
    cfg: TestCaseConfig
    mesh: Mesh
    dofs: DofMap
    disc: S.Discretization
    bc: S.BoundaryData
    param_map: Callable
    darcy_true: Optional[S.DarcyField] = None
    darcy_model: Optional[S.DarcyField] = None
    darcy_disc: Optional[S.Discretization] = None

    @property
    def true_params(self) -> np.ndarray:
        return np.asarray(self.cfg["model"]["true_params"], dtype=float)

    def forward_model(self, dt: float, darcy: Optional[S.DarcyField] = None) -> S.ForwardModel:
        return S.ForwardModel(self.disc, dt, self.param_map, darcy=darcy)

    def initial_state(self) -> np.ndarray:
        return np.zeros(self.dofs.total_dim)


def _boundary(cfg: TestCaseConfig):
    """Tagger and boundary data for the configured case."""
    b = cfg["boundary"]
    kind = b["kind"]
    if kind == "testcase1":
        L = b["strip_length"]

        def tagger(side, x, y):
            if side in ("left", "right") and y < L:
                return f"{side}_strip"
            return "wall"

        bc = S.BoundaryData({"left_strip": b["left"], "right_strip": b["right"]}, frozenset({"wall"}),
                            (b["fracture_bottom"], b["fracture_top"]))
        return tagger, bc, None
    if kind == "testcase2":
        def tagger(side, x, y):
            return side if side in ("left", "right") else "wall"

        bc = S.BoundaryData({"left": b["left"], "right": b["right"]}, frozenset({"wall"}),
                            (b["fracture_bottom"], b["fracture_top"]))
        return tagger, bc, None
    if kind == "testcase3":
        def tagger(side, x, y):
            return side if side in ("bottom", "top") else "wall"

        bc = S.BoundaryData({"bottom": b["bottom"], "top": b["top"]}, frozenset({"wall"}),
                            (b["fracture_bottom"], b["fracture_top"]))
        d = cfg["darcy"]
        xf = cfg["geometry"]["fracture"]["x"]
        p0, slope = d["bottom_pressure"], d["bottom_slope"]

        def bottom_pressure(x, y, t):
            return p0 * (1.0 + slope * np.abs(np.asarray(x) - xf))

        darcy_bc = S.BoundaryData({"bottom": bottom_pressure, "top": d["top_pressure"]},
                                  frozenset({"wall"}), (p0, d["top_pressure"]))
        return tagger, bc, darcy_bc
    raise ValueError(f"boundary.kind: unknown kind {kind!r}")


def _param_map(cfg: TestCaseConfig) -> Callable:
    m = cfg["model"]
    variant = m["variant"]
    porosity = tuple(m["porosity"])
    zones = tuple(sorted(m["fracture_zones"].items()))
    xi = m["xi"]
    recip = m["parameterization"] == "reciprocal"

    def to_params(theta) -> S.ModelParameters:
        th = np.asarray(theta, dtype=float)
        if recip:
            th = 1.0 / th
        return S.ModelParameters(variant, float(th[0]), float(th[1]), float(th[2]), xi, porosity, zones)

    return to_params


def build_problem(cfg: TestCaseConfig) -> Problem:
    g = cfg["geometry"]
    fr = g["fracture"]
    fracture = FractureSpec(fr["x"], fr["width"], tuple(tuple(s) for s in fr["segments"]))
    tagger, bc, darcy_bc = _boundary(cfg)
    mesh = build_mesh(cfg.nx, cfg.ny, tuple(g["domain"]), fracture, g["cell_kind"], tagger)
    dofs = build_dof_map(mesh)
    disc = S.Discretization(mesh, dofs, bc)
    prob = Problem(cfg, mesh, dofs, disc, bc, _param_map(cfg))
    if darcy_bc is not None:
        prob.darcy_disc = S.Discretization(mesh, dofs, darcy_bc)
        prob.darcy_true = S.solve_darcy(mesh, dofs, cfg["darcy"]["conductivities"], darcy_bc,
                                        disc=prob.darcy_disc)
        free = dofs.flux_dofs[~prob.darcy_disc.constrained[dofs.flux_dofs]]
        prob.darcy_model = S.perturb_darcy(prob.darcy_true, cfg["darcy"]["perturbation"],
                                           substream(cfg["seed"], "darcy"), free)
    return prob


def reference_trajectory(prob: Problem):
    """Fine-step solve at the true parameters sampled at filter times."""
    t = prob.cfg["time"]
    model = prob.forward_model(prob.cfg.dt_ref, prob.darcy_true)
    return S.reference_solve(model, prob.true_params, prob.initial_state(), t["T"], t["n_fine"],
                             t["n_filter"])


def make_observations(prob: Problem, cfg: TestCaseConfig, trajectory, label: str):
    o = cfg["observation"]
    op = make_operator(o["kind"], prob.dofs.total_dim, prob.dofs.flux_dofs, o["fraction"],
                       o["obs_noise_std"], substream(cfg["seed"], "sensors", label))
    records = generate_data(trajectory, op, substream(cfg["seed"], "observations", label))
    return op, records


def _initial_ensemble(prob: Problem, cfg: TestCaseConfig, n: int, label: str, name: str):
    std = cfg["filters"]["initial_ensemble_std"]
    rng = substream(cfg["seed"], "initial", label, name)
    return prob.initial_state() + std * rng.standard_normal((n, prob.dofs.total_dim))


def _param_noise(cfg: TestCaseConfig) -> ParameterNoise:
    f = cfg["filters"]
    return ParameterNoise.relative(cfg["model"]["initial_guess"], f["gamma_fraction"],
                                   f["gamma_decay"], f["gamma_floor_fraction"])


def run_scenario(prob: Problem, label: str, which: str, trajectory=None, times=None,
                 progress: Optional[Callable] = None) -> dict:
    """Run the selected filters on one scenario; returns results in memory."""
    cfg = prob.cfg.scenario(label)
    if trajectory is None:
        times, trajectory = reference_trajectory(prob)
    op, records = make_observations(prob, cfg, trajectory, label)
    f = cfg["filters"]
    guess = cfg["model"]["initial_guess"]
    model = prob.forward_model(cfg.dt_filter, prob.darcy_model)
    out = {"label": label, "operator": op, "records": records, "times": times,
           "reference": trajectory, "cfg": cfg}
    if which in ("united", "both"):
        ucfg = UnitedFilterConfig(
            R=f["R"], J=f["J"], M=f["M"], n_steps=f["n_steps"],
            model_noise_std=cfg.model_noise_std, param_noise=_param_noise(cfg),
            variance_floor=f["variance_floor"], literal_comparator=f["literal_comparator"],
            batch_size=f["batch_size"], implicit_likelihood=f["implicit_likelihood"],
            seed=int(substream(cfg["seed"], "united", label).integers(2**31)),
        )
        try:
            hist = run_united(model, op, records, _initial_ensemble(prob, cfg, f["J"], label, "united"),
                              guess, f["bounds"], ucfg, times, trajectory,
                              callback=progress)
        except Exception as exc:
            raise ExperimentError("united_filter", label, "united", exc) from exc
        out["united"] = {
            "rmse": [h.diagnostics.get("rmse", math.nan) for h in hist[1:]],
            "theta": [h.theta_mean for h in hist],
            "particles": [h.particles.particles for h in hist],
            "final_state": hist[-1].state_mean,
            "states": [h.state_mean for h in hist],
        }
    if which in ("augenkf", "both"):
        acfg = AugEnKFConfig(N_e=f["N_e"], model_noise_std=cfg.model_noise_std,
                             param_noise=_param_noise(cfg), ridge=f["ridge"],
                             seed=int(substream(cfg["seed"], "augenkf", label).integers(2**31)))
        try:
            hist = run_aug_enkf(model, op, records, _initial_ensemble(prob, cfg, f["N_e"], label, "augenkf"),
                                guess, f["aug_bounds"], acfg, times, trajectory, callback=progress)
        except Exception as exc:
            raise ExperimentError("aug_enkf", label, "augenkf", exc) from exc
        out["augenkf"] = {
            "rmse": [h["rmse"] for h in hist[1:]],
            "theta": [h["theta_mean"] for h in hist],
            "particles": [h["params"] for h in hist],
            "final_state": hist[-1]["state_mean"],
            "states": [h["state_mean"] for h in hist],
        }
    return out


def _r(v) -> str:
    return repr(float(v))


def _slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", label)


def fracture_jump_signs(state: np.ndarray, prob: Problem) -> list:
    """Sign of the fracture-pressure jump (above minus below) at each interior segment boundary."""
    ys = prob.mesh.fracture_nodes_y()
    p = state[prob.dofs.fracture_pressure_dofs]
    out = []
    for y0, _, _ in prob.cfg["geometry"]["fracture"]["segments"][1:]:
        k = int(np.argmin(np.abs(ys - y0)))
        out.append(int(np.sign(p[k] - p[k - 1])))
    return out


def run_experiment(cfg: TestCaseConfig, which: str = "united", out_dir=None,
                   scenarios: Optional[list] = None, plots: bool = True,
                   progress: Optional[Callable] = None) -> dict:
    """Run every scenario, write artifacts to ``out_dir`` (if given), return results."""
    if which not in ("united", "augenkf", "both"):
        raise ValueError("which must be united, augenkf or both")
    if scenarios:
        chosen = [cfg.scenario(lab)["scenarios"][0] for lab in scenarios]
        cfg = TestCaseConfig({**cfg.data, "scenarios": chosen})  # resolved config replays this subset
    prob = build_problem(cfg)
    times, trajectory = reference_trajectory(prob)
    labels = cfg.labels
    results = {lab: run_scenario(prob, lab, which, trajectory, times, progress) for lab in labels}
    if out_dir is not None:
        write_artifacts(Path(out_dir), prob, results, which)
        if plots:
            from .plotting import render_plots
            render_plots(out_dir)
    return {"problem": prob, "times": times, "reference": trajectory, "results": results}


def _filters(which: str) -> list:
    return ["united", "augenkf"] if which == "both" else [which]


def write_artifacts(out: Path, prob: Problem, results: dict, which: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg = prob.cfg
    (out / "resolved_config.json").write_text(cfg.to_json() + "\n")
    names = cfg["model"]["param_names"]
    truth = cfg["model"]["true_params"]
    n_filter = cfg["time"]["n_filter"]
    dt = cfg.dt_filter

    with open(out / "observations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "dof", "value", "scenario"])
        for lab, res in results.items():
            op = res["operator"]
            for rec in res["records"]:
                for dof, v in zip(op.index_set, rec.values):
                    w.writerow([rec.step_index, int(dof), _r(v), lab])

    with open(out / "rmse.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "time", "rmse", "filter"])
        for lab, res in results.items():
            for f in _filters(which):
                for i, e in enumerate(res[f]["rmse"], start=1):
                    w.writerow([i, _r(i * dt), _r(e), f"{f}/{lab}"])

    with open(out / "params.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "component", "mean", "p05", "p50", "p95", "truth", "filter"])
        for lab, res in results.items():
            for f in _filters(which):
                for step, (th, P) in enumerate(zip(res[f]["theta"], res[f]["particles"])):
                    q = np.percentile(P, [5, 50, 95], axis=0)
                    for c, name in enumerate(names):
                        w.writerow([step, name, _r(th[c]), _r(q[0, c]), _r(q[1, c]), _r(q[2, c]),
                                    _r(truth[c]), f"{f}/{lab}"])

    with open(out / "particles.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "particle", *names, "filter"])
        for lab, res in results.items():
            for f in _filters(which):
                for step, P in enumerate(res[f]["particles"]):
                    for m, row in enumerate(P):
                        w.writerow([step, m, *(_r(v) for v in row), f"{f}/{lab}"])

    if which == "both":
        with open(out / "comparison.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "scenario", "rmse_united", "rmse_augenkf",
                        *(f"{n}_united" for n in names), *(f"{n}_augenkf" for n in names)])
            for lab, res in results.items():
                for i in range(1, n_filter + 1):
                    w.writerow([i, lab, _r(res["united"]["rmse"][i - 1]), _r(res["augenkf"]["rmse"][i - 1]),
                                *(_r(v) for v in res["united"]["theta"][i]),
                                *(_r(v) for v in res["augenkf"]["theta"][i])])

    steps = sorted(set(cfg["field_steps"]) | {n_filter})
    ref = results[next(iter(results))]["reference"]
    mesh, dofs = prob.mesh, prob.dofs
    cent = mesh.cell_centroids()
    ys = mesh.fracture_nodes_y()
    ymid = 0.5 * (ys[1:] + ys[:-1])
    for n in steps:
        series = [("reference", ref[n - 1])]
        for lab, res in results.items():
            for f in _filters(which):
                series.append((f"{f}/{lab}", res[f]["states"][n]))
        with open(out / f"fields_step_{n}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "pressure", "u_x", "u_y", "series"])
            for name, state in series:
                p = state[dofs.pressure_dofs]
                vel = S.cell_velocities(state, prob.disc)
                for k in range(mesh.n_cells):
                    w.writerow([_r(cent[k, 0]), _r(cent[k, 1]), _r(p[k]), _r(vel[k, 0]), _r(vel[k, 1]), name])
        with open(out / f"fracture_step_{n}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["y", "pressure", "series"])
            for name, state in series:
                pf = state[dofs.fracture_pressure_dofs]
                for yv, pv in zip(ymid, pf):
                    w.writerow([_r(yv), _r(pv), name])


def replay(directory, which: str = "united", out_dir=None, plots: bool = False) -> dict:
    """Re-run an experiment from its ``resolved_config.json``."""
    cfg = load_config(Path(directory) / "resolved_config.json")
    return run_experiment(cfg, which, out_dir, plots=plots)
