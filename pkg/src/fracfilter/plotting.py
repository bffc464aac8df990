"""SVG figures from the CSV artifacts of a run."""
from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("svg")
import matplotlib.pyplot as plt  # noqa: E402
import matplotlib.tri as mtri  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["MissingArtifactError", "render_plots", "plot_rmse", "plot_params", "plot_field",
           "plot_fracture_profile", "contour_levels"]

_SVG_META = {"Date": None}
matplotlib.rcParams["svg.hashsalt"] = "fracfilter"


class MissingArtifactError(FileNotFoundError):
    pass


def _read(path: Path) -> list:
    if not path.exists():
        raise MissingArtifactError(f"missing artifact {path}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def contour_levels(values, n: int = 10) -> np.ndarray:
    """``n`` evenly spaced levels between the field's min and max."""
    v = np.asarray(values, dtype=float)
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, n)


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def plot_rmse(rmse_csv: Path, out: Path) -> Path:
    rows = _read(rmse_csv)
    series = defaultdict(list)
    for r in rows:
        series[r["filter"]].append((int(r["step"]), float(r["rmse"])))
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in sorted(series):
        s = sorted(series[name])
        ax.plot([a for a, _ in s], [b for _, b in s], label=name)
    ax.set_xlabel("filter step")
    ax.set_ylabel("state RMSE")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    return _save(fig, out)


def plot_params(params_csv: Path, out: Path) -> Path:
    rows = _read(params_csv)
    comps = list(dict.fromkeys(r["component"] for r in rows))
    fig, axes = plt.subplots(1, len(comps), figsize=(4 * len(comps), 3.5), squeeze=False)
    for ax, comp in zip(axes[0], comps):
        sub = [r for r in rows if r["component"] == comp]
        by_filter = defaultdict(list)
        for r in sub:
            by_filter[r["filter"]].append(r)
        for name in sorted(by_filter):
            rs = sorted(by_filter[name], key=lambda r: int(r["step"]))
            steps = [int(r["step"]) for r in rs]
            line, = ax.plot(steps, [float(r["mean"]) for r in rs], label=name)
            ax.fill_between(steps, [float(r["p05"]) for r in rs], [float(r["p95"]) for r in rs],
                            color=line.get_color(), alpha=0.2, linewidth=0)
        ax.axhline(float(sub[0]["truth"]), color="k", linestyle="--", linewidth=1, label="truth")
        ax.set_title(comp)
        ax.set_xlabel("filter step")
    axes[0][0].legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, out)


def plot_field(fields_csv: Path, series: str, out: Path, kind: str = "heat") -> Path:
    rows = [r for r in _read(fields_csv) if r["series"] == series]
    if not rows:
        raise MissingArtifactError(f"no series {series!r} in {fields_csv}")
    x = np.array([float(r["x"]) for r in rows])
    y = np.array([float(r["y"]) for r in rows])
    p = np.array([float(r["pressure"]) for r in rows])
    tri = mtri.Triangulation(x, y)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    if kind == "heat":
        m = ax.tripcolor(tri, p, shading="gouraud", cmap="viridis")
        fig.colorbar(m, ax=ax)
    elif kind == "contour":
        cs = ax.tricontour(tri, p, levels=contour_levels(p), cmap="viridis")
        ax.clabel(cs, fontsize=6)
    elif kind == "velocity":
        ux = np.array([float(r["u_x"]) for r in rows])
        uy = np.array([float(r["u_y"]) for r in rows])
        ax.quiver(x, y, ux, uy, np.hypot(ux, uy), cmap="viridis")
    else:
        raise ValueError(f"unknown plot kind {kind!r}")
    ax.set_aspect("equal")
    ax.set_title(f"{series} ({kind})")
    return _save(fig, out)


def plot_fracture_profile(fracture_csv: Path, out: Path) -> Path:
    rows = _read(fracture_csv)
    by = defaultdict(list)
    for r in rows:
        by[r["series"]].append((float(r["y"]), float(r["pressure"])))
    fig, ax = plt.subplots(figsize=(5, 4))
    for name in sorted(by, key=lambda s: (s != "reference", s)):
        s = sorted(by[name])
        style = {"color": "k", "linewidth": 2} if name == "reference" else {"linewidth": 1}
        ax.plot([a for a, _ in s], [b for _, b in s], label=name, **style)
    ax.set_xlabel("y along fracture")
    ax.set_ylabel("fracture pressure")
    ax.legend(fontsize=7)
    return _save(fig, out)


def _slug(s: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in s)


def render_plots(directory) -> list:
    """Write every figure type for the artifacts in ``directory`` into ``plots/``."""
    d = Path(directory)
    plots = d / "plots"
    made = [plot_rmse(d / "rmse.csv", plots / "rmse.svg"),
            plot_params(d / "params.csv", plots / "params.svg")]
    for fields in sorted(d.glob("fields_step_*.csv")):
        step = fields.stem.rsplit("_", 1)[-1]
        names = list(dict.fromkeys(r["series"] for r in _read(fields)))
        for name in names:
            for kind in ("heat", "contour", "velocity"):
                made.append(plot_field(fields, name, plots / f"{kind}_step{step}_{_slug(name)}.svg", kind))
        frac = d / f"fracture_step_{step}.csv"
        if frac.exists():
            made.append(plot_fracture_profile(frac, plots / f"fracture_step{step}.svg"))
    return made
