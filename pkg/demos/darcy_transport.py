"""Darcy velocity and concentration front of Test Case 3 at the reference parameters.

Writes fields_step_*.csv and SVG plots into OUT_DIR without running any filter.
Usage: python demos/darcy_transport.py OUT_DIR
"""
import csv
import sys
from pathlib import Path

import numpy as np

from fracfilter import build_problem, load_config
from fracfilter import solver as S
from fracfilter.experiment import reference_trajectory
from fracfilter.plotting import plot_field


def main(out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = load_config(preset_name="testcase3-small")
    prob = build_problem(cfg)
    darcy = prob.darcy_true
    print("divergence-free:", S.is_divergence_free(darcy, prob.darcy_disc))
    vel = S.cell_velocities(darcy.state, prob.darcy_disc)
    print(f"mean matrix velocity {vel.mean(axis=0)}, mean fracture flux {np.mean(darcy.fracture_flux):.3e}")
    times, traj = reference_trajectory(prob)
    cent = prob.mesh.cell_centroids()
    for n in (10, 25, 50):
        state = traj[n - 1]
        u = S.cell_velocities(state, prob.disc)
        path = out / f"fields_step_{n}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "pressure", "u_x", "u_y", "series"])
            for k, c in enumerate(state[prob.dofs.pressure_dofs]):
                w.writerow([cent[k, 0], cent[k, 1], c, u[k, 0], u[k, 1], "reference"])
        for kind in ("heat", "contour"):
            plot_field(path, "reference", out / f"{kind}_step{n}.svg", kind)
    print("wrote", sorted(p.name for p in out.glob("*.svg")))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "darcy_out")
