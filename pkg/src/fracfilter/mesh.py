"""Conforming meshes of a rectangle cut by one vertical fracture line.

Cells never straddle the fracture: the fracture abscissa must coincide with a
vertical grid line. Triangular meshes split every grid rectangle along one
diagonal whose orientation alternates in a checkerboard pattern.

The degree-of-freedom layout for lowest-order mixed elements is::

    [subdomain normal velocities | cell pressures | fracture node fluxes | fracture pressures]

Edges on the fracture carry two velocity unknowns, one per side, because the
normal flux is discontinuous across the interface.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "FractureSpec",
    "Mesh",
    "DofMap",
    "MeshError",
    "build_mesh",
    "build_dof_map",
    "write_mesh_csv",
]

_TOL = 1e-12


class MeshError(ValueError):
    """Raised for geometry that cannot be meshed conformingly."""


@dataclass(frozen=True)
class FractureSpec:
    """Vertical fracture ``x = x_position`` of aperture ``width``.

    ``segments`` is an ordered list of ``(y_start, y_end, tag)`` tiling the
    full height; tags let coefficients vary along the fracture.
    """

    x_position: float
    width: float
    segments: tuple = ((0.0, 1.0, "all"),)

    def validate(self, domain: tuple[float, float]) -> None:
        W, H = domain
        if not self.width > 0:
            raise MeshError("fracture width must be positive")
        if not 0.0 < self.x_position < W:
            raise MeshError("fracture must lie strictly inside the domain")
        ys = [s[0] for s in self.segments] + [self.segments[-1][1]]
        if abs(ys[0]) > _TOL or abs(ys[-1] - H) > _TOL:
            raise MeshError("fracture segments must cover [0, height]")
        for a, b in zip(self.segments[:-1], self.segments[1:]):
            if abs(a[1] - b[0]) > _TOL:
                raise MeshError("fracture segments must tile without gaps or overlaps")
        for s in self.segments:
            if not s[1] > s[0]:
                raise MeshError("empty fracture segment")

    def tag_at(self, y: float) -> str:
        for y0, y1, tag in self.segments:
            if y0 - _TOL <= y <= y1 + _TOL:
                return tag
        raise MeshError(f"y={y} outside fracture")


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable mesh description.

    Attributes
    ----------
    vertices : (nv, 2) float array
    cells : (nc, 3|4) int array, counterclockwise vertex indices
    cell_subdomain : (nc,) int array with values 1 or 2
    edges : (ne, 2) int array of vertex pairs
    edge_boundary_tag : list of str, ``""`` for interior edges
    edge_cells : (ne, 2) int array, second entry -1 on the boundary
    interface_edges : (nf,) int array ordered bottom to top
    interface_segment_tags : list of str per interface edge
    """

    vertices: np.ndarray
    cells: np.ndarray
    cell_subdomain: np.ndarray
    edges: np.ndarray
    edge_boundary_tag: list
    edge_cells: np.ndarray
    interface_edges: np.ndarray
    interface_segment_tags: list
    domain: tuple
    fracture: FractureSpec
    nx: int
    ny: int
    cell_kind: str

    @property
    def h(self) -> float:
        return max(self.domain[0] / self.nx, self.domain[1] / self.ny)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def cell_centroids(self) -> np.ndarray:
        return self.vertices[self.cells].mean(axis=1)

    def cell_areas(self) -> np.ndarray:
        v = self.vertices[self.cells]
        x, y = v[..., 0], v[..., 1]
        # shoelace
        return 0.5 * np.sum(x * np.roll(y, -1, axis=1) - np.roll(x, -1, axis=1) * y, axis=1)

    def edge_lengths(self) -> np.ndarray:
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    def edge_midpoints(self) -> np.ndarray:
        return 0.5 * (self.vertices[self.edges[:, 0]] + self.vertices[self.edges[:, 1]])

    def fracture_nodes_y(self) -> np.ndarray:
        """Ordinates of the fracture nodes, bottom to top."""
        e = self.edges[self.interface_edges]
        ys = self.vertices[e, 1]
        return np.concatenate([[ys[0].min()], ys.max(axis=1)])


def _default_tagger(side: str, x: float, y: float) -> str:
    return side


def build_mesh(
    nx: int,
    ny: int,
    domain: Sequence[float],
    fracture: FractureSpec,
    cell_kind: str = "triangle",
    tagger: Optional[Callable[[str, float, float], str]] = None,
) -> Mesh:
    """Build a uniform mesh of ``[0, W] x [0, H]`` conforming to the fracture.

    ``tagger(side, xm, ym)`` maps a boundary edge (side is one of ``left``,
    ``right``, ``bottom``, ``top``; ``xm, ym`` its midpoint) to a boundary tag.
    The default tag is the side name.
    """
    W, H = float(domain[0]), float(domain[1])
    fracture.validate((W, H))
    if cell_kind not in ("triangle", "rectangle"):
        raise MeshError(f"unknown cell kind {cell_kind!r}")
    if nx < 2 or ny < 1:
        raise MeshError("need at least two columns and one row")
    hx, hy = W / nx, H / ny
    col = fracture.x_position / hx
    icol = int(round(col))
    if abs(col - icol) > 1e-9 or not 0 < icol < nx:
        raise MeshError(
            f"fracture at x={fracture.x_position} does not fall on a mesh line (hx={hx})"
        )
    for y0, y1, _ in fracture.segments:
        for yy in (y0, y1):
            if abs(yy / hy - round(yy / hy)) > 1e-9:
                raise MeshError(f"fracture segment boundary y={yy} is not a mesh line")
    tagger = tagger or _default_tagger

    xs = np.linspace(0.0, W, nx + 1)
    ys = np.linspace(0.0, H, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return i + j * (nx + 1)

    cells = []
    for j in range(ny):
        for i in range(nx):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            if cell_kind == "rectangle":
                cells.append((a, b, c, d))
            elif (i + j) % 2 == 0:
                cells.append((a, b, c))
                cells.append((a, c, d))
            else:
                cells.append((a, b, d))
                cells.append((b, c, d))
    cells = np.array(cells, dtype=np.int64)
    centroids = vertices[cells].mean(axis=1)
    cell_subdomain = np.where(centroids[:, 0] < fracture.x_position, 1, 2)

    nvc = cells.shape[1]
    edge_index = {}
    edges, edge_cells = [], []
    for k, cell in enumerate(cells):
        for m in range(nvc):
            key = tuple(sorted((int(cell[m]), int(cell[(m + 1) % nvc]))))
            e = edge_index.get(key)
            if e is None:
                edge_index[key] = len(edges)
                edges.append(key)
                edge_cells.append([k, -1])
            else:
                edge_cells[e][1] = k
    edges = np.array(edges, dtype=np.int64)
    edge_cells = np.array(edge_cells, dtype=np.int64)

    mids = 0.5 * (vertices[edges[:, 0]] + vertices[edges[:, 1]])
    tags = []
    for e, (xm, ym) in enumerate(mids):
        if edge_cells[e, 1] >= 0:
            tags.append("")
            continue
        if abs(xm) < 1e-9:
            side = "left"
        elif abs(xm - W) < 1e-9:
            side = "right"
        elif abs(ym) < 1e-9:
            side = "bottom"
        else:
            side = "top"
        tags.append(tagger(side, float(xm), float(ym)))

    p0 = vertices[edges[:, 0]]
    p1 = vertices[edges[:, 1]]
    on_line = (np.abs(p0[:, 0] - fracture.x_position) < 1e-9) & (
        np.abs(p1[:, 0] - fracture.x_position) < 1e-9
    )
    iface = np.flatnonzero(on_line)
    iface = iface[np.argsort(mids[iface, 1])]
    seg_tags = [fracture.tag_at(float(mids[e, 1])) for e in iface]

    return Mesh(
        vertices=vertices,
        cells=cells,
        cell_subdomain=cell_subdomain,
        edges=edges,
        edge_boundary_tag=tags,
        edge_cells=edge_cells,
        interface_edges=iface,
        interface_segment_tags=seg_tags,
        domain=(W, H),
        fracture=fracture,
        nx=nx,
        ny=ny,
        cell_kind=cell_kind,
    )


@dataclass(frozen=True, eq=False)
class DofMap:
    """Index layout of the state vector.

    Velocity unknowns are normal velocity components on edges. Each velocity
    dof has an orientation ``velocity_normal`` (unit vector); on the fracture
    the two side unknowns point out of their own subdomain.
    """

    velocity_edge: np.ndarray  # (nu,) mesh edge of each velocity dof
    velocity_side: np.ndarray  # (nu,) 0 off the fracture, else subdomain 1|2
    velocity_normal: np.ndarray  # (nu, 2)
    velocity_cells: np.ndarray  # (nu, 2) cells using the dof, -1 padded
    pressure_offset: int
    n_cells: int
    fracture_flux_offset: int
    n_fracture_nodes: int
    fracture_pressure_offset: int
    n_fracture_edges: int
    edge_dofs: dict = field(default_factory=dict)  # (edge, side) -> dof

    @property
    def n_velocity(self) -> int:
        return len(self.velocity_edge)

    @property
    def total_dim(self) -> int:
        return self.fracture_pressure_offset + self.n_fracture_edges

    @property
    def velocity_dofs(self) -> np.ndarray:
        return np.arange(self.n_velocity)

    @property
    def pressure_dofs(self) -> np.ndarray:
        return np.arange(self.pressure_offset, self.pressure_offset + self.n_cells)

    @property
    def fracture_velocity_dofs(self) -> np.ndarray:
        o = self.fracture_flux_offset
        return np.arange(o, o + self.n_fracture_nodes)

    @property
    def fracture_pressure_dofs(self) -> np.ndarray:
        o = self.fracture_pressure_offset
        return np.arange(o, o + self.n_fracture_edges)

    @property
    def flux_dofs(self) -> np.ndarray:
        """All velocity-like unknowns (subdomain and fracture)."""
        return np.concatenate([self.velocity_dofs, self.fracture_velocity_dofs])

    def describe(self, index: int) -> tuple:
        """Inverse map: ``(kind, entity)`` for a global index."""
        if not 0 <= index < self.total_dim:
            raise IndexError(index)
        if index < self.pressure_offset:
            return ("velocity", (int(self.velocity_edge[index]), int(self.velocity_side[index])))
        if index < self.fracture_flux_offset:
            return ("pressure", index - self.pressure_offset)
        if index < self.fracture_pressure_offset:
            return ("fracture_velocity", index - self.fracture_flux_offset)
        return ("fracture_pressure", index - self.fracture_pressure_offset)

    def index(self, kind: str, entity) -> int:
        if kind == "velocity":
            return self.edge_dofs[tuple(entity)]
        if kind == "pressure":
            assert 0 <= entity < self.n_cells
            return self.pressure_offset + entity
        if kind == "fracture_velocity":
            assert 0 <= entity < self.n_fracture_nodes
            return self.fracture_flux_offset + entity
        if kind == "fracture_pressure":
            assert 0 <= entity < self.n_fracture_edges
            return self.fracture_pressure_offset + entity
        raise KeyError(kind)


def build_dof_map(mesh: Mesh) -> DofMap:
    """Lay out the unknowns of the lowest-order mixed discretisation."""
    verts = mesh.vertices
    cent = mesh.cell_centroids()
    iface = set(int(e) for e in mesh.interface_edges)
    v_edge, v_side, v_normal, v_cells = [], [], [], []
    edge_dofs = {}
    for e, (a, b) in enumerate(mesh.edges):
        t = verts[b] - verts[a]
        n = np.array([t[1], -t[0]]) / np.hypot(*t)
        mid = 0.5 * (verts[a] + verts[b])
        c0, c1 = mesh.edge_cells[e]
        if e in iface:
            for c in (c0, c1):
                side = int(mesh.cell_subdomain[c])
                nn = n if np.dot(n, mid - cent[c]) > 0 else -n
                edge_dofs[(e, side)] = len(v_edge)
                v_edge.append(e)
                v_side.append(side)
                v_normal.append(nn)
                v_cells.append((c, -1))
        else:
            if c1 < 0 and np.dot(n, mid - cent[c0]) < 0:
                n = -n  # boundary normals point outward
            edge_dofs[(e, 0)] = len(v_edge)
            v_edge.append(e)
            v_side.append(0)
            v_normal.append(n)
            v_cells.append((c0, c1))
    nu = len(v_edge)
    nc = mesh.n_cells
    nfe = len(mesh.interface_edges)
    nfn = nfe + 1 if nfe else 0
    return DofMap(
        velocity_edge=np.array(v_edge, dtype=np.int64),
        velocity_side=np.array(v_side, dtype=np.int64),
        velocity_normal=np.array(v_normal),
        velocity_cells=np.array(v_cells, dtype=np.int64),
        pressure_offset=nu,
        n_cells=nc,
        fracture_flux_offset=nu + nc,
        n_fracture_nodes=nfn,
        fracture_pressure_offset=nu + nc + nfn,
        n_fracture_edges=nfe,
        edge_dofs=edge_dofs,
    )


def write_mesh_csv(mesh: Mesh, directory) -> None:
    """Dump vertices, cells and edges as CSV files for debugging."""
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "vertices.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["vertex", "x", "y"])
        for i, (x, y) in enumerate(mesh.vertices):
            w.writerow([i, repr(float(x)), repr(float(y))])
    with open(d / "cells.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["cell", "subdomain", "vertices"])
        for i, c in enumerate(mesh.cells):
            w.writerow([i, int(mesh.cell_subdomain[i]), " ".join(map(str, c))])
    iface = {int(e): t for e, t in zip(mesh.interface_edges, mesh.interface_segment_tags)}
    with open(d / "edges.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["edge", "v0", "v1", "boundary_tag", "fracture_segment"])
        for i, (a, b) in enumerate(mesh.edges):
            w.writerow([i, int(a), int(b), mesh.edge_boundary_tag[i], iface.get(i, "")])
