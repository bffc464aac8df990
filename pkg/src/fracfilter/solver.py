"""Mixed finite-element forward solver for reduced fracture models.

Lowest-order Raviart-Thomas velocities and piecewise-constant pressures in
each subdomain, coupled to a one-dimensional mixed discretisation on the
fracture. One backward-Euler step solves

    [ A(theta)    B   ] [u^n]   [            G            ]
    [ dt*B^T   C_phi  ] [p^n] = [ C_phi p^{n-1} - dt L_q  ]

where ``B = -b(.,.)`` and ``C_phi = -c_phi(.,.)``. Three variants share the
assembly:

``continuous_pressure``
    pressure continuous across the fracture, fracture transmissivity
    ``alpha = k_f * delta``.
``general_interface``
    Robin-type coupling ``kappa (p_i - p_f) = xi u_i.n_i - (1-xi) u_j.n_j``
    with ``kappa = 2 K_nu / delta`` and ``K_gamma = K_tau * delta``.
``advection_diffusion``
    continuous concentration, diffusive flux as the mixed unknown and a
    first-order upwind advective flux driven by a given Darcy field.
"""
from __future__ import annotations

import csv
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import DofMap, Mesh

__all__ = [
    "CONTINUOUS_PRESSURE",
    "GENERAL_INTERFACE",
    "ADVECTION_DIFFUSION",
    "ModelParameters",
    "BoundaryData",
    "SourceData",
    "DarcyField",
    "SystemOperator",
    "SolverError",
    "Discretization",
    "assemble_operator",
    "assemble_rhs",
    "step",
    "solve_steady",
    "solve_darcy",
    "perturb_darcy",
    "darcy_divergence",
    "is_divergence_free",
    "fracture_coefficients",
    "advective_flux_assembly",
    "ForwardModel",
    "reference_solve",
    "cell_velocities",
    "write_field_csv",
]

CONTINUOUS_PRESSURE = "continuous_pressure"
GENERAL_INTERFACE = "general_interface"
ADVECTION_DIFFUSION = "advection_diffusion"
VARIANTS = (CONTINUOUS_PRESSURE, GENERAL_INTERFACE, ADVECTION_DIFFUSION)

BoundaryValue = Union[float, Callable[[float, float, float], float]]


class SolverError(RuntimeError):
    """Assembly or factorisation failure (e.g. a non-physical parameter)."""


@dataclass(frozen=True)
class ModelParameters:
    """Physical coefficients of one forward model.

    ``fracture_param`` is the transmissivity ``alpha = k_f * delta`` for the
    continuous-pressure and advection-diffusion variants, and the raw
    fracture permeability ``k_f`` for the general-interface variant, whose
    zones are listed in ``fracture_zones`` (segment tag -> ``"tangential"``
    when the large permeability ``k_f`` acts along the fracture, ``"normal"``
    when it acts across it).
    """

    variant: str
    k1: float
    k2: float
    fracture_param: float
    xi: float = 1.0
    porosity: tuple = (1.0, 1.0, 1.0)
    fracture_zones: tuple = ()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        for name in ("k1", "k2", "fracture_param"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise SolverError(f"non-physical parameter {name}={v}")
        if any(not (p > 0) for p in self.porosity):
            raise SolverError(f"non-physical porosity {self.porosity}")
        if self.variant == GENERAL_INTERFACE and not self.xi > 0.5:
            raise ValueError("xi must exceed 1/2")

    def zone(self, tag: str):
        return dict(self.fracture_zones).get(tag, "tangential")


def fracture_coefficients(theta: ModelParameters, tag: str, width: float):
    """``(K_gamma, kappa)`` of one fracture segment for the general-interface variant.

    A zone given as a ``(K_gamma, kappa)`` pair is used verbatim; otherwise
    ``"tangential"`` puts ``k_f`` along the fracture and ``1/k_f`` across it,
    ``"normal"`` the reverse.
    """
    zone = theta.zone(tag)
    if not isinstance(zone, str):
        K_gamma, kappa = (float(v) for v in zone)
        return K_gamma, kappa
    kf = theta.fracture_param
    if zone == "tangential":
        k_tau, k_nu = kf, 1.0 / kf
    elif zone == "normal":
        k_tau, k_nu = 1.0 / kf, kf
    else:
        raise ValueError(f"unknown fracture zone {zone!r}")
    return k_tau * width, 2.0 * k_nu / width


@dataclass(frozen=True)
class BoundaryData:
    """Boundary conditions keyed by mesh boundary tag.

    ``dirichlet`` maps a tag to a pressure (or concentration) value, either a
    constant or ``f(x, y, t)``. Tags in ``no_flow`` get a zero normal flux.
    ``fracture_endpoints`` gives ``(bottom, top)`` Dirichlet values at the
    fracture tips; ``None`` closes that tip.
    """

    dirichlet: dict = field(default_factory=dict)
    no_flow: frozenset = frozenset()
    fracture_endpoints: tuple = (0.0, 0.0)

    def check(self, mesh: Mesh) -> None:
        for e, tag in enumerate(mesh.edge_boundary_tag):
            if not tag:
                continue
            n = (tag in self.dirichlet) + (tag in self.no_flow)
            if n != 1:
                raise ValueError(
                    f"boundary edge {e} with tag {tag!r} has {n} conditions (need exactly one)"
                )


@dataclass(frozen=True)
class SourceData:
    """Volumetric sources ``cell(x, y, t)`` and fracture source ``fracture(y, t)``."""

    cell: Optional[Callable] = None
    fracture: Optional[Callable] = None


@dataclass(frozen=True, eq=False)
class DarcyField:
    """Steady Darcy solution; ``state`` uses the regular dof layout."""

    state: np.ndarray
    dofs: DofMap

    @property
    def velocity(self) -> np.ndarray:
        return self.state[: self.dofs.n_velocity]

    @property
    def fracture_flux(self) -> np.ndarray:
        return self.state[self.dofs.fracture_velocity_dofs]

    @property
    def pressure(self) -> np.ndarray:
        return self.state[self.dofs.pressure_dofs]

    @property
    def fracture_pressure(self) -> np.ndarray:
        return self.state[self.dofs.fracture_pressure_dofs]


def _bvalue(v: BoundaryValue, x, y, t):
    if callable(v):
        return np.asarray(v(x, y, t), dtype=float)
    return np.full(np.shape(x), float(v))


# Gauss points on [0, 1]
_G2 = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])


class Discretization:
    """Parameter-independent pieces of the discrete system.

    Built once per (mesh, boundary data); every parameter-dependent matrix is
    a linear combination of the unit matrices stored here, so assembling an
    operator for a new parameter vector costs a few sparse additions.
    """

    def __init__(self, mesh: Mesh, dofs: DofMap, bc: BoundaryData):
        bc.check(mesh)
        self.mesh, self.dofs, self.bc = mesh, dofs, bc
        l = dofs.total_dim
        self.dim = l
        verts = mesh.vertices
        cent = mesh.cell_centroids()
        area = mesh.cell_areas()
        elen = mesh.edge_lengths()
        mids = mesh.edge_midpoints()
        self.cell_area, self.edge_len = area, elen
        nu = dofs.n_velocity

        edge_of = {tuple(e): i for i, e in enumerate(mesh.edges.tolist())}
        # constrained velocity dofs: no-flow boundary edges (+ closed fracture tips)
        constrained = np.zeros(l, dtype=bool)
        for d in range(nu):
            tag = mesh.edge_boundary_tag[dofs.velocity_edge[d]]
            if tag and tag in bc.no_flow:
                constrained[d] = True
        fo = dofs.fracture_flux_offset
        if dofs.n_fracture_nodes:
            if bc.fracture_endpoints[0] is None:
                constrained[fo] = True
            if bc.fracture_endpoints[1] is None:
                constrained[fo + dofs.n_fracture_nodes - 1] = True
        self.constrained = constrained
        self._free = sp.diags((~constrained).astype(float))
        self._fixed = sp.diags(constrained.astype(float))

        # local-to-global velocity dofs and orientation signs per cell
        nvc = mesh.cells.shape[1]
        cell_dofs = np.zeros((mesh.n_cells, nvc), dtype=np.int64)
        cell_sign = np.zeros((mesh.n_cells, nvc))
        local_mass = np.zeros((mesh.n_cells, nvc, nvc))
        for k, cell in enumerate(mesh.cells):
            P = verts[cell]
            sub = int(mesh.cell_subdomain[k])
            if nvc == 3:
                # local edge m is opposite vertex m
                local_edges = [(cell[(m + 1) % 3], cell[(m + 2) % 3]) for m in range(3)]
            else:
                local_edges = [(cell[m], cell[(m + 1) % 4]) for m in range(4)]
            for m, (a, b) in enumerate(local_edges):
                e = edge_of[tuple(sorted((int(a), int(b))))]
                side = sub if dofs.edge_dofs.get((e, 0)) is None else 0
                d = dofs.edge_dofs[(e, side)]
                cell_dofs[k, m] = d
                cell_sign[k, m] = 1.0 if np.dot(dofs.velocity_normal[d], mids[e] - cent[k]) > 0 else -1.0
            if nvc == 3:
                L = np.array([elen[edge_of[tuple(sorted((int(a), int(b))))]] for a, b in local_edges])
                qp = 0.5 * (P + np.roll(P, -1, axis=0))  # edge midpoints: exact for quadratics
                diff = qp[:, None, :] - P[None, :, :]  # (q, m, 2)
                integ = np.einsum("qad,qbd->ab", diff, diff) * area[k] / 3.0
                local_mass[k] = np.outer(L, L) / (4.0 * area[k] ** 2) * integ
            else:
                hx = P[1, 0] - P[0, 0]
                hy = P[3, 1] - P[0, 1]
                m = np.zeros((4, 4))
                # local order: bottom, right, top, left
                m[1, 1] = m[3, 3] = hx * hy / 3.0
                m[1, 3] = m[3, 1] = -hx * hy / 6.0
                m[0, 0] = m[2, 2] = hx * hy / 3.0
                m[0, 2] = m[2, 0] = -hx * hy / 6.0
                local_mass[k] = m
        self.cell_dofs, self.cell_sign = cell_dofs, cell_sign

        # unit mass matrices per subdomain (coefficient 1/k applied later)
        self.A_sub = {}
        for sub in (1, 2):
            ks = np.flatnonzero(mesh.cell_subdomain == sub)
            vals = (local_mass[ks] * cell_sign[ks][:, :, None] * cell_sign[ks][:, None, :]).ravel()
            rows = np.repeat(cell_dofs[ks], nvc, axis=1).ravel()
            cols = np.tile(cell_dofs[ks], (1, nvc)).ravel()
            self.A_sub[sub] = self._restrict(sp.coo_matrix((vals, (rows, cols)), shape=(l, l)))

        # B = -b : cell divergence and interface couplings
        rows, cols, vals = [], [], []
        po = dofs.pressure_offset
        for k in range(mesh.n_cells):
            for m in range(nvc):
                d = cell_dofs[k, m]
                e = dofs.velocity_edge[d]
                rows.append(d)
                cols.append(po + k)
                vals.append(-cell_sign[k, m] * elen[e])
        fpo = dofs.fracture_pressure_offset
        nfe = dofs.n_fracture_edges
        self.fracture_edge_len = elen[mesh.interface_edges] if nfe else np.zeros(0)
        self.interface_side_dofs = np.zeros((nfe, 2), dtype=np.int64)
        for j, e in enumerate(mesh.interface_edges):
            for s in (1, 2):
                d = dofs.edge_dofs[(int(e), s)]
                self.interface_side_dofs[j, s - 1] = d
                rows.append(d)
                cols.append(fpo + j)
                vals.append(elen[e])
            rows += [fo + j, fo + j + 1]
            cols += [fpo + j, fpo + j]
            vals += [1.0, -1.0]
        Bc = sp.coo_matrix((vals, (rows, cols)), shape=(l, l)).tocsr()
        self.B = self._restrict(Bc)
        self.BT = self._restrict(Bc.T.tocsr())
        self.BT_full = Bc.T.tocsr()

        # fracture P1 mass per segment tag, interface coupling blocks per tag
        self.segment_tags = sorted(set(mesh.interface_segment_tags))
        self.A_frac, self.A_int_diag, self.A_int_off = {}, {}, {}
        tags = np.array(mesh.interface_segment_tags)
        for tag in self.segment_tags:
            js = np.flatnonzero(tags == tag)
            r, c, v = [], [], []
            for j in js:
                L = self.fracture_edge_len[j]
                a, b = fo + j, fo + j + 1
                r += [a, a, b, b]
                c += [a, b, a, b]
                v += [L / 3.0, L / 6.0, L / 6.0, L / 3.0]
            self.A_frac[tag] = self._restrict(sp.coo_matrix((v, (r, c)), shape=(l, l)))
            sd = self.interface_side_dofs[js]
            L = self.fracture_edge_len[js]
            self.A_int_diag[tag] = self._restrict(
                sp.coo_matrix(
                    (np.concatenate([L, L]), (np.concatenate([sd[:, 0], sd[:, 1]]),) * 2),
                    shape=(l, l),
                )
            )
            self.A_int_off[tag] = self._restrict(
                sp.coo_matrix(
                    (np.concatenate([L, L]),
                     (np.concatenate([sd[:, 0], sd[:, 1]]), np.concatenate([sd[:, 1], sd[:, 0]]))),
                    shape=(l, l),
                )
            )

        # storage (mass) weights, unit porosity
        self.mass_weights = np.zeros(l)
        self.mass_weights[po: po + mesh.n_cells] = area
        self.mass_weights[fpo: fpo + nfe] = self.fracture_edge_len
        self._region_masks = {
            1: np.zeros(l, dtype=bool), 2: np.zeros(l, dtype=bool), "f": np.zeros(l, dtype=bool)
        }
        self._region_masks[1][po + np.flatnonzero(mesh.cell_subdomain == 1)] = True
        self._region_masks[2][po + np.flatnonzero(mesh.cell_subdomain == 2)] = True
        self._region_masks["f"][fpo: fpo + nfe] = True

        # Dirichlet edges: dof, midpoint, length and Gauss points for the load
        self.dirichlet_dofs = []
        for d in range(nu):
            e = dofs.velocity_edge[d]
            tag = mesh.edge_boundary_tag[e]
            if tag and tag in bc.dirichlet:
                self.dirichlet_dofs.append((d, e, tag))

        # quadrature for cell sources
        if nvc == 3:
            self._qpts = 0.5 * (verts[mesh.cells] + np.roll(verts[mesh.cells], -1, axis=1))
            self._qw = np.repeat(area[:, None] / 3.0, 3, axis=1)
        else:
            P = verts[mesh.cells]
            x0, y0 = P[:, 0, 0], P[:, 0, 1]
            hx, hy = P[:, 1, 0] - x0, P[:, 3, 1] - y0
            pts = []
            for gx in _G2:
                for gy in _G2:
                    pts.append(np.column_stack([x0 + gx * hx, y0 + gy * hy]))
            self._qpts = np.stack(pts, axis=1)
            self._qw = np.repeat(area[:, None] / 4.0, 4, axis=1)

    def _restrict(self, M) -> sp.csr_matrix:
        M = sp.csr_matrix(M)
        return (self._free @ M @ self._free).tocsr()

    def storage(self, porosity) -> np.ndarray:
        w = self.mass_weights.copy()
        w[self._region_masks[1]] *= porosity[0]
        w[self._region_masks[2]] *= porosity[1]
        w[self._region_masks["f"]] *= porosity[2]
        return w

    def flux_matrix(self, theta: ModelParameters) -> sp.csr_matrix:
        """The block ``A_h(theta)`` (l x l, zero outside the flux rows)."""
        theta.validate()
        A = self.A_sub[1] / theta.k1 + self.A_sub[2] / theta.k2
        delta = self.mesh.fracture.width
        for tag in self.segment_tags:
            if theta.variant == GENERAL_INTERFACE:
                K_gamma, kappa = fracture_coefficients(theta, tag, delta)
                A = A + self.A_frac[tag] / K_gamma
                A = A + (theta.xi * self.A_int_diag[tag] - (1.0 - theta.xi) * self.A_int_off[tag]) / kappa
            else:
                A = A + self.A_frac[tag] / theta.fracture_param
        return A.tocsr()

    def load_sources(self, source: Optional[SourceData], t: float) -> np.ndarray:
        """Vector ``L_q`` on the pressure rows."""
        L = np.zeros(self.dim)
        if source is None:
            return L
        d = self.dofs
        if source.cell is not None:
            q = np.asarray(source.cell(self._qpts[..., 0], self._qpts[..., 1], t), dtype=float)
            L[d.pressure_offset: d.pressure_offset + d.n_cells] = np.sum(q * self._qw, axis=1)
        if source.fracture is not None and d.n_fracture_edges:
            ys = self.mesh.fracture_nodes_y()
            y0, y1 = ys[:-1], ys[1:]
            acc = np.zeros(len(y0))
            for g in _G2:
                acc += 0.5 * np.asarray(source.fracture(y0 + g * (y1 - y0), t), dtype=float)
            L[d.fracture_pressure_dofs] = acc * (y1 - y0)
        return L

    def boundary_load(self, t: float, bc: Optional[BoundaryData] = None) -> np.ndarray:
        """Flux-row load ``G`` from Dirichlet data."""
        bc = bc or self.bc
        G = np.zeros(self.dim)
        verts = self.mesh.vertices
        for d, e, tag in self.dirichlet_dofs:
            a, b = self.mesh.edges[e]
            pa, pb = verts[a], verts[b]
            v = bc.dirichlet[tag]
            pts = pa[None, :] + _G2[:, None] * (pb - pa)[None, :]
            gbar = float(np.mean(_bvalue(v, pts[:, 0], pts[:, 1], t)))
            G[d] = -gbar * self.edge_len[e]
        if self.dofs.n_fracture_nodes:
            fo = self.dofs.fracture_flux_offset
            gb, gt = bc.fracture_endpoints
            x = self.mesh.fracture.x_position
            ys = self.mesh.fracture_nodes_y()
            if gb is not None:
                G[fo] = float(_bvalue(gb, x, ys[0], t))
            if gt is not None:
                G[fo + self.dofs.n_fracture_nodes - 1] = -float(_bvalue(gt, x, ys[-1], t))
        return G


@dataclass(frozen=True, eq=False)
class SystemOperator:
    """Assembled and factorised one-step operator ``Lambda_h(theta)``."""

    matrix: sp.csc_matrix
    lu: object
    dt: float
    theta: ModelParameters
    disc: Discretization
    storage: np.ndarray
    advection_inflow: Optional[np.ndarray] = None  # per-dof inflow load (pressure rows)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        x = self.lu.solve(np.asarray(rhs, dtype=float))
        if not np.all(np.isfinite(x)):
            raise SolverError("non-finite solution (singular operator?)")
        return x


def _factorize(M: sp.csc_matrix):
    try:
        lu = spla.splu(M)
    except RuntimeError as exc:  # "Factor is exactly singular"
        raise SolverError(f"factorisation failed: {exc}") from exc
    d = np.abs(lu.U.diagonal())
    if not np.all(np.isfinite(d)) or d.min() <= 1e-14 * d.max():
        raise SolverError("singular factorisation")
    return lu


def assemble_operator(
    mesh: Mesh,
    dofs: DofMap,
    theta: ModelParameters,
    dt: float,
    bc: BoundaryData,
    darcy: Optional[DarcyField] = None,
    disc: Optional[Discretization] = None,
) -> SystemOperator:
    """Assemble and factorise the backward-Euler system for ``theta``."""
    if (theta.variant == ADVECTION_DIFFUSION) != (darcy is not None):
        raise ValueError("a Darcy field is required exactly for the advection-diffusion variant")
    disc = disc or Discretization(mesh, dofs, bc)
    A = disc.flux_matrix(theta)
    storage = disc.storage(theta.porosity)
    C = sp.diags(-storage)
    inflow = None
    if darcy is not None:
        adv, inflow = advective_flux_assembly(darcy, mesh, dofs, disc=disc)
        C = C - dt * adv
    M = A + disc.B + dt * disc.BT + C + disc._fixed
    M = sp.csc_matrix(M)
    return SystemOperator(M, _factorize(M), float(dt), theta, disc, storage, inflow)


def assemble_rhs(
    prev: np.ndarray,
    op: SystemOperator,
    source: Optional[SourceData] = None,
    bc: Optional[BoundaryData] = None,
    t: float = 0.0,
) -> np.ndarray:
    """Right-hand side ``F(X_{n-1}, G_h)`` for the step ending at time ``t``.

    ``prev`` may be a single state or a stack of states (one per row).
    """
    prev = np.asarray(prev, dtype=float)
    if prev.shape[-1] != op.dim:
        raise ValueError(f"state length {prev.shape[-1]} does not match operator dimension {op.dim}")
    disc = op.disc
    base = disc.boundary_load(t, bc) - op.dt * disc.load_sources(source, t)
    if op.advection_inflow is not None:
        base = base + op.dt * op.advection_inflow
    return base - op.storage * prev


def step(prev, op: SystemOperator, source=None, bc=None, t: float = 0.0) -> np.ndarray:
    """Advance one implicit-Euler step: ``X_n = Phi(X_{n-1}, theta)``.

    Accepts a single state or a stack of states (rows).
    """
    rhs = assemble_rhs(prev, op, source, bc, t)
    if rhs.ndim == 1:
        return op.solve(rhs)
    return op.solve(rhs.T).T


def solve_steady(
    disc: Discretization,
    theta: ModelParameters,
    source: Optional[SourceData] = None,
    t: float = 0.0,
) -> np.ndarray:
    """Steady mixed problem: storage dropped, same boundary data."""
    A = disc.flux_matrix(theta)
    M = sp.csc_matrix(A + disc.B + disc.BT + disc._fixed)
    rhs = disc.boundary_load(t) - disc.load_sources(source, t)
    lu = _factorize(M)
    x = lu.solve(rhs)
    x[disc.constrained] = 0.0
    return x


def solve_darcy(
    mesh: Mesh,
    dofs: DofMap,
    conductivities,
    bc: BoundaryData,
    disc: Optional[Discretization] = None,
) -> DarcyField:
    """Steady Darcy flow for conductivities ``(K1, K2, K_f_tau * delta)``."""
    K1, K2, Kf = conductivities
    theta = ModelParameters(CONTINUOUS_PRESSURE, K1, K2, Kf)
    disc = disc or Discretization(mesh, dofs, bc)
    return DarcyField(solve_steady(disc, theta), dofs)


def perturb_darcy(darcy: DarcyField, amplitude: float, rng, indices=None) -> DarcyField:
    """Add ``amplitude * N(0, 1)`` noise to the flux unknowns in ``indices`` (default: all)."""
    s = darcy.state.copy()
    idx = darcy.dofs.flux_dofs if indices is None else np.asarray(indices)
    s[idx] += amplitude * rng.standard_normal(len(idx))
    return DarcyField(s, darcy.dofs)


def _connections(dofs: DofMap, disc: Discretization):
    """Directed flux connections ``(dof, from_index, to_index)``.

    Indices are global pressure-block indices; ``to = -1`` marks the outer
    boundary. The flux of ``dof`` is positive from ``from`` to ``to``.
    """
    mesh = disc.mesh
    po, fpo = dofs.pressure_offset, dofs.fracture_pressure_offset
    owner = {}
    for k in range(mesh.n_cells):
        for m in range(disc.cell_dofs.shape[1]):
            d = int(disc.cell_dofs[k, m])
            owner.setdefault(d, {})[k] = disc.cell_sign[k, m]
    iface_pos = {int(e): j for j, e in enumerate(mesh.interface_edges)}
    conn = []
    for d in range(dofs.n_velocity):
        cells = owner[d]
        out = [k for k, s in cells.items() if s > 0]
        inn = [k for k, s in cells.items() if s < 0]
        e = int(dofs.velocity_edge[d])
        if dofs.velocity_side[d]:
            conn.append((d, po + out[0], fpo + iface_pos[e]))
        elif len(cells) == 1:
            k = next(iter(cells))
            if cells[k] > 0:
                conn.append((d, po + k, -1))
            else:
                conn.append((d, -1, po + k))
        else:
            conn.append((d, po + out[0], po + inn[0]))
    fo = dofs.fracture_flux_offset
    n = dofs.n_fracture_edges
    for k in range(dofs.n_fracture_nodes):
        below = fpo + k - 1 if k > 0 else -1
        above = fpo + k if k < n else -1
        conn.append((fo + k, below, above))
    return conn


def advective_flux_assembly(darcy: DarcyField, mesh: Mesh, dofs: DofMap, disc=None, bc=None):
    """First-order upwind advection operator on the pressure block.

    Returns ``(ADV, inflow)``: ``ADV @ c`` is the net advective outflow of
    every cell and fracture element, and ``inflow`` holds the boundary inflow
    terms ``F * c_D`` (``F < 0``) which enter the balance as known data.
    """
    if disc is None:
        disc = Discretization(mesh, dofs, bc if bc is not None else BoundaryData())
    bc = bc or disc.bc
    l = dofs.total_dim
    s = darcy.state
    elen = disc.edge_len
    rows, cols, vals = [], [], []
    inflow = np.zeros(l)
    mids = mesh.edge_midpoints()
    ys = mesh.fracture_nodes_y() if dofs.n_fracture_nodes else None
    for d, a, b in _connections(dofs, disc):
        if d < dofs.n_velocity:
            F = s[d] * elen[dofs.velocity_edge[d]]
        else:
            F = s[d]
        if F == 0.0:
            continue
        if a < 0 or b < 0:
            inside, sgn = (b, -1.0) if a < 0 else (a, 1.0)
            Fout = sgn * F  # outward flux from the inside element
            if Fout > 0:
                rows.append(inside)
                cols.append(inside)
                vals.append(Fout)
            else:
                if d < dofs.n_velocity:
                    e = dofs.velocity_edge[d]
                    tag = mesh.edge_boundary_tag[e]
                    v = bc.dirichlet.get(tag, 0.0)
                    cD = float(_bvalue(v, mids[e, 0], mids[e, 1], 0.0))
                else:
                    end = 0 if d == dofs.fracture_flux_offset else 1
                    v = bc.fracture_endpoints[end]
                    cD = 0.0 if v is None else float(
                        _bvalue(v, mesh.fracture.x_position, ys[0 if end == 0 else -1], 0.0)
                    )
                inflow[inside] += Fout * cD
            continue
        Fp, Fm = max(F, 0.0), min(F, 0.0)
        rows += [a, a, b, b]
        cols += [a, b, b, a]
        vals += [Fp, Fm, -Fm, -Fp]
    adv = sp.coo_matrix((vals, (rows, cols)), shape=(l, l)).tocsr()
    return adv, inflow


def darcy_divergence(darcy: DarcyField, disc: Discretization) -> np.ndarray:
    """Discrete mass imbalance of a flux field per cell and fracture element."""
    b = -(disc.BT_full @ darcy.state)
    d = darcy.dofs
    return np.concatenate([b[d.pressure_dofs], b[d.fracture_pressure_dofs]])


def is_divergence_free(darcy: DarcyField, disc: Discretization, tol: float = 1e-10) -> bool:
    """Validator for the zero-source Darcy invariant (relative to the flux scale)."""
    scale = max(float(np.max(np.abs(darcy.state[darcy.dofs.flux_dofs]))), 1e-300)
    return float(np.max(np.abs(darcy_divergence(darcy, disc)))) <= tol * max(scale, 1.0)


class ForwardModel:
    """The forward operator ``Phi(X, theta)`` with cached factorisations.

    ``param_map`` turns a filter parameter vector into
    :class:`ModelParameters`. Factorisations are kept in an LRU cache keyed on
    the exact parameter vector, so repeated particles reuse them.
    """

    def __init__(self, disc: Discretization, dt: float, param_map: Callable,
                 source: Optional[SourceData] = None, darcy: Optional[DarcyField] = None,
                 t0: float = 0.0, cache_size: int = 64):
        self.disc, self.dt, self.param_map = disc, float(dt), param_map
        self.source, self.darcy = source, darcy
        self._cache = OrderedDict()
        self.cache_size = cache_size
        self.n_factorizations = 0

    @property
    def dim(self) -> int:
        return self.disc.dim

    def operator(self, theta) -> SystemOperator:
        key = tuple(float(v) for v in np.atleast_1d(theta))
        op = self._cache.get(key)
        if op is not None:
            self._cache.move_to_end(key)
            return op
        params = self.param_map(np.asarray(key))
        op = assemble_operator(self.disc.mesh, self.disc.dofs, params, self.dt, self.disc.bc,
                               darcy=self.darcy, disc=self.disc)
        self.n_factorizations += 1
        self._cache[key] = op
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return op

    def __call__(self, x, theta, t: float = 0.0):
        return step(x, self.operator(theta), self.source, None, t)


def reference_solve(model: ForwardModel, theta, x0, T: float, n_fine: int, n_filter: int,
                    t0: float = 0.0):
    """Fine-step trajectory sampled at ``t0 + i (T - t0) / n_filter``.

    ``model.dt`` must equal ``(T - t0) / n_fine``. Returns ``(times, states)``
    with ``states`` of shape ``(n_filter, l)``.
    """
    if n_fine % n_filter:
        raise ValueError("the number of fine steps must be a multiple of the filter steps")
    if not np.isclose(model.dt, (T - t0) / n_fine):
        raise ValueError("model time step does not match T / n_fine")
    stride = n_fine // n_filter
    x = np.asarray(x0, dtype=float)
    out, times = [], []
    for n in range(1, n_fine + 1):
        t = t0 + n * model.dt
        x = model(x, theta, t)
        if n % stride == 0:
            out.append(x.copy())
            times.append(t0 + (n // stride) * (T - t0) / n_filter)
    return np.array(times), np.array(out)


def cell_velocities(state: np.ndarray, disc: Discretization) -> np.ndarray:
    """Velocity vector at every cell centroid reconstructed from RT0 dofs."""
    mesh = disc.mesh
    verts = mesh.vertices
    cent = mesh.cell_centroids()
    u = state[disc.cell_dofs] * disc.cell_sign  # outward coefficients
    nvc = mesh.cells.shape[1]
    out = np.zeros((mesh.n_cells, 2))
    if nvc == 3:
        P = verts[mesh.cells]
        L = np.stack([
            np.hypot(*(P[:, (m + 2) % 3] - P[:, (m + 1) % 3]).T) for m in range(3)
        ], axis=1)
        area = disc.cell_area
        for m in range(3):
            out += (u[:, m] * L[:, m] / (2 * area))[:, None] * (cent - P[:, m])
    else:
        # bottom, right, top, left outward coefficients at the centre
        out[:, 0] = 0.5 * (u[:, 1] - u[:, 3])
        out[:, 1] = 0.5 * (u[:, 2] - u[:, 0])
    return out


def write_field_csv(path, state: np.ndarray, disc: Discretization, reference=None) -> None:
    """Cell-centre snapshot: x, y, pressure, velocity components."""
    cent = disc.mesh.cell_centroids()
    p = state[disc.dofs.pressure_dofs]
    vel = cell_velocities(state, disc)
    cols = ["x", "y", "pressure", "u_x", "u_y"]
    data = [cent[:, 0], cent[:, 1], p, vel[:, 0], vel[:, 1]]
    if reference is not None:
        cols += ["pressure_ref", "u_x_ref", "u_y_ref"]
        vr = cell_velocities(reference, disc)
        data += [reference[disc.dofs.pressure_dofs], vr[:, 0], vr[:, 1]]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for row in zip(*data):
            w.writerow([repr(float(v)) for v in row])
