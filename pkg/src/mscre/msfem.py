"""Multiscale basis construction and global MsFEM solves.

Three basis variants are supported on each coarse element:

* ``conforming``: local solves of the homogeneous operator with the nodal
  (bi)linear trace as Dirichlet data, giving a conforming coarse space.
* ``oversampling``: local solves on an enlarged sampling box with nodal
  (bi)linear data at the box corners, restricted to the element; the global
  space is nonconforming.
* ``composed``: coarse Lagrange shape functions of degree k evaluated at the
  element's harmonic coordinates (pointwise composition). With k = 1 and an
  inherited coordinate map this realizes coarse-mesh refinement without new
  fine-scale solves.

The global problem is solved either in Galerkin form (test = trial, broken
bilinear form when nonconforming) or Petrov-Galerkin form (tests are the
coarse hat functions). Hanging coarse vertices are constrained to the average
of their edge endpoints, which keeps the conforming variants in H^1.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dfield
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import fem
from .geometry import CoarseMesh, Element, FineMesh, OversamplingPatch, nested_fine_mesh
from .fem import DiffusionField, DirichletSolver, Grid

log = logging.getLogger(__name__)

GALERKIN = "galerkin"
PETROV_GALERKIN = "petrov-galerkin"


def element_grid(element: Element, h_target: float) -> Grid:
    fm = nested_fine_mesh(element, h_target)
    return Grid(dim=fm.dim, box=fm.box, m=fm.m)


def boundary_node_ids(grid: Grid) -> np.ndarray:
    if grid.dim == 1:
        return np.array([0, grid.m[0]])
    lat = grid.structured_ids()
    ids = np.concatenate([lat[0, :], lat[-1, :], lat[1:-1, 0], lat[1:-1, -1]])
    return np.unique(ids)


def corner_shape_values(box: tuple[float, ...], pts: np.ndarray) -> np.ndarray:
    """Nodal Q1 shapes of a box at points: (n_corners, n_pts), CCW corner order."""
    pts = np.atleast_2d(pts)
    if len(box) == 2:
        x0, x1 = box
        t = (pts[:, 0] - x0) / (x1 - x0)
        return np.stack([1 - t, t])
    x0, y0, x1, y1 = box
    tx = (pts[:, 0] - x0) / (x1 - x0)
    ty = (pts[:, 1] - y0) / (y1 - y0)
    return np.stack([(1 - tx) * (1 - ty), tx * (1 - ty), tx * ty, (1 - tx) * ty])


@dataclass
class ElementBasis:
    """Fine-grid representation of the multiscale shape functions on one element."""

    elem: int
    variant: str
    grid: Grid
    K_fine: sp.csr_matrix
    coeffs: np.ndarray            # (n_corners, n_fine) values of phi_i
    q1: np.ndarray                # (n_corners, n_fine) geometric Q1 shapes
    k_loc: np.ndarray             # coarse stiffness phi_i^T K phi_j
    w: np.ndarray                 # (dim, n_fine) harmonic coordinates on the element
    patch: OversamplingPatch | None = None
    solver: DirichletSolver | None = None

    @property
    def n_corners(self) -> int:
        return self.coeffs.shape[0]

    def pu_defect(self) -> float:
        return float(np.max(np.abs(self.coeffs.sum(axis=0) - 1.0)))


def _local_setup(grid: Grid, field: DiffusionField):
    K = fem.assemble_stiffness(grid, field)
    bnd = boundary_node_ids(grid)
    return K, bnd, DirichletSolver(K, bnd)


def harmonic_coordinates(grid: Grid, solver: DirichletSolver, bnd: np.ndarray) -> np.ndarray:
    """Solutions of the homogeneous operator with trace x_j, one per axis."""
    w = np.empty((grid.dim, grid.n_nodes))
    for ax in range(grid.dim):
        w[ax] = solver.solve(grid.nodes[bnd, ax])
    return w


def basis_conforming(element: Element, grid: Grid, field: DiffusionField) -> ElementBasis:
    """Local solves with the nodal (bi)linear Dirichlet trace."""
    K, bnd, solver = _local_setup(grid, field)
    q1 = corner_shape_values(element.box, grid.nodes)
    nc = q1.shape[0]
    coeffs = np.empty_like(q1)
    for i in range(nc):
        coeffs[i] = solver.solve(q1[i, bnd])
    w = harmonic_coordinates(grid, solver, bnd)
    k_loc = coeffs @ (K @ coeffs.T)
    return ElementBasis(element.index, "conforming", grid, K, coeffs, q1, k_loc, w,
                        solver=solver)


def basis_oversampling(element: Element, patch: OversamplingPatch,
                       field: DiffusionField, elem_grid: Grid | None = None) -> ElementBasis:
    """Oversampled local solves restricted to the element.

    The sampling-box problems carry nodal (bi)linear data attached to the box
    corners; restriction keeps one shape function per element corner, summing
    to one by the maximum principle argument for the boundary data.
    """
    pgrid = Grid(dim=2 if len(patch.box) == 4 else 1, box=patch.box, m=patch.m)
    Kp, bnd_p, solver_p = _local_setup(pgrid, field)
    psi_data = corner_shape_values(patch.box, pgrid.nodes[bnd_p])
    sub = _subblock_ids(pgrid, patch)
    if elem_grid is None:
        elem_grid = Grid(dim=pgrid.dim, box=_elem_box(patch, pgrid), m=_elem_m(patch))
    K, bnd, solver = _local_setup(elem_grid, field)
    nc = psi_data.shape[0]
    coeffs = np.empty((nc, elem_grid.n_nodes))
    for i in range(nc):
        psi = solver_p.solve(psi_data[i])
        coeffs[i] = psi[sub]
    wp = harmonic_coordinates(pgrid, solver_p, bnd_p)
    w = wp[:, sub]
    q1 = corner_shape_values(elem_grid.box, elem_grid.nodes)
    k_loc = coeffs @ (K @ coeffs.T)
    return ElementBasis(element.index, "oversampling", elem_grid, K, coeffs, q1, k_loc, w,
                        patch=patch, solver=solver)


def _elem_m(patch: OversamplingPatch) -> tuple[int, ...]:
    if len(patch.box) == 2:
        return (patch.m[0] - patch.n_ext[0] - patch.n_ext[1],)
    return (patch.m[0] - patch.n_ext[0] - patch.n_ext[1],
            patch.m[1] - patch.n_ext[2] - patch.n_ext[3])


def _elem_box(patch: OversamplingPatch, pgrid: Grid) -> tuple[float, ...]:
    h = pgrid.h
    if len(patch.box) == 2:
        return (patch.box[0] + patch.n_ext[0] * h[0], patch.box[1] - patch.n_ext[1] * h[0])
    return (patch.box[0] + patch.n_ext[0] * h[0], patch.box[1] + patch.n_ext[2] * h[1],
            patch.box[2] - patch.n_ext[1] * h[0], patch.box[3] - patch.n_ext[3] * h[1])


def _subblock_ids(pgrid: Grid, patch: OversamplingPatch) -> np.ndarray:
    if pgrid.dim == 1:
        mx = patch.m[0] - patch.n_ext[0] - patch.n_ext[1]
        return np.arange(patch.n_ext[0], patch.n_ext[0] + mx + 1)
    lat = pgrid.structured_ids()
    nW, nE, nS, nN = patch.n_ext
    mx = patch.m[0] - nW - nE
    my = patch.m[1] - nS - nN
    return lat[nS:nS + my + 1, nW:nW + mx + 1].ravel()


def lagrange_shapes_at(box: tuple[float, ...], degree: int, pts: np.ndarray) -> np.ndarray:
    """Tensor Lagrange Q_degree shapes of a box at points: (n_modes, n_pts)."""
    pts = np.atleast_2d(pts)
    if len(box) == 2:
        t = (pts[:, 0] - box[0]) / (box[1] - box[0])
        v, _ = fem.lagrange_1d(degree, t)
        return v.T
    tx = (pts[:, 0] - box[0]) / (box[2] - box[0])
    ty = (pts[:, 1] - box[1]) / (box[3] - box[1])
    vx, _ = fem.lagrange_1d(degree, tx)
    vy, _ = fem.lagrange_1d(degree, ty)
    out = np.empty(((degree + 1) ** 2, len(pts)))
    k = 0
    for by in range(degree + 1):
        for bx in range(degree + 1):
            out[k] = vx[:, bx] * vy[:, by]
            k += 1
    return out


def basis_composed(element: Element, grid: Grid, field: DiffusionField,
                   w: np.ndarray, degree: int,
                   K_fine: sp.csr_matrix | None = None,
                   shape_box: tuple[float, ...] | None = None) -> ElementBasis:
    """Coarse Q_degree shapes composed with harmonic coordinates, pointwise.

    ``shape_box`` defaults to the element box; passing an ancestor's box with
    its coordinate map realizes coarse refinement without new local solves.
    """
    if degree not in (1, 2, 3, 4):
        raise ValueError("degree must be in 1..4")
    if K_fine is None:
        K_fine = fem.assemble_stiffness(grid, field)
    box = shape_box if shape_box is not None else element.box
    coeffs = lagrange_shapes_at(box, degree, w.T)
    q1 = corner_shape_values(element.box, grid.nodes)
    if degree == 1 and grid.dim == 2:
        # reorder lexicographic Lagrange corners to CCW
        coeffs = coeffs[[0, 1, 3, 2]]
    k_loc = coeffs @ (K_fine @ coeffs.T)
    return ElementBasis(element.index, f"composed-{degree}", grid, K_fine, coeffs, q1,
                        k_loc, w)


# ----------------------------------------------------------------------------
# Coarse constraints
# ----------------------------------------------------------------------------

@dataclass
class CoarseSpace:
    """Bookkeeping for coarse vertex dofs with hanging and Dirichlet constraints."""

    mesh: CoarseMesh
    dirichlet_verts: dict[int, float]              # vertex -> prescribed value
    expansion: dict[int, dict[int, float]]         # constrained vertex -> {carrier: weight}
    free_verts: list[int]
    free_index: dict[int, int]
    folds: dict[int, list[tuple[int, float]]]      # carrier vertex -> [(constrained, weight)]

    @property
    def n_free(self) -> int:
        return len(self.free_verts)

    def carriers(self) -> list[int]:
        """Unconstrained vertices (free + Dirichlet): the nodal test generators."""
        out = sorted(set(self.free_verts) | set(self.dirichlet_verts))
        return out

    def vertex_values(self, z: np.ndarray) -> np.ndarray:
        vals = np.zeros(self.mesh.n_vertices)
        for v, k in self.free_index.items():
            vals[v] = z[k]
        for v, d in self.dirichlet_verts.items():
            vals[v] = d
        for v, expn in self.expansion.items():
            vals[v] = sum(w * vals[c] for c, w in expn.items())
        return vals

    def corner_expansion(self, v: int) -> tuple[dict[int, float], float]:
        """Vertex value as (free-dof weights, constant from Dirichlet data)."""
        if v in self.expansion:
            weights: dict[int, float] = {}
            const = 0.0
            for c, w in self.expansion[v].items():
                if c in self.free_index:
                    weights[c] = weights.get(c, 0.0) + w
                else:
                    const += w * self.dirichlet_verts[c]
            return weights, const
        if v in self.dirichlet_verts:
            return {}, self.dirichlet_verts[v]
        return {v: 1.0}, 0.0

    def test_fold(self, carrier: int) -> list[tuple[int, float]]:
        """(vertex, weight) pairs of the folded nodal test function of a carrier."""
        return [(carrier, 1.0)] + self.folds.get(carrier, [])


def build_coarse_space(mesh: CoarseMesh, dirichlet_data: Callable[[np.ndarray], np.ndarray] | float,
                       bc_of_facet: Callable[[int], str] | None = None) -> CoarseSpace:
    """Classify coarse vertices and resolve hanging chains.

    ``bc_of_facet`` maps boundary facet ids to 'dirichlet'/'neumann'
    (default: every boundary facet is Dirichlet). Dirichlet vertex values are
    the nodal interpolation of the data; vertices on crack lips are evaluated
    with a tiny inward nudge so two-lip data is unambiguous.
    """
    dverts: set[int] = set()
    for f in mesh.facets:
        if not f.is_boundary:
            continue
        kind = bc_of_facet(f.index) if bc_of_facet is not None else "dirichlet"
        if kind == "dirichlet":
            dverts.update(f.verts)
    # transitive expansion of hanging vertices onto unconstrained carriers
    expansion: dict[int, dict[int, float]] = {}

    def expand(v: int, seen=()) -> dict[int, float]:
        if v not in mesh.hanging:
            return {v: 1.0}
        if v in expansion:
            return expansion[v]
        if v in seen:
            raise RuntimeError("cyclic hanging constraints")
        (a, b), (wa, wb) = mesh.hanging[v]
        out: dict[int, float] = {}
        for c, w in ((a, wa), (b, wb)):
            for cc, ww in expand(c, seen + (v,)).items():
                out[cc] = out.get(cc, 0.0) + w * ww
        expansion[v] = out
        return out

    for v in mesh.hanging:
        expand(v)
    dverts -= set(mesh.hanging)  # constrained vertices follow their masters
    vals = _dirichlet_values(mesh, sorted(dverts), dirichlet_data)
    free = [v for v in range(mesh.n_vertices) if v not in dverts and v not in mesh.hanging]
    folds: dict[int, list[tuple[int, float]]] = {}
    for v, expn in expansion.items():
        for c, w in expn.items():
            folds.setdefault(c, []).append((v, w))
    return CoarseSpace(mesh=mesh, dirichlet_verts=vals, expansion=expansion,
                       free_verts=free, free_index={v: k for k, v in enumerate(free)},
                       folds=folds)


def _dirichlet_values(mesh: CoarseMesh, verts: list[int], data) -> dict[int, float]:
    if not verts:
        return {}
    pts = mesh.vertices[verts].copy()
    if mesh.crack is not None and mesh.dim == 2:
        c = mesh.crack
        eps = 1e-12 * (mesh.domain[3] - mesh.domain[1])
        for k, v in enumerate(verts):
            key = mesh.vertex_keys[v]
            if len(key) == 3 and key[2] != 0:
                pts[k, 1] += eps * key[2]
    if np.isscalar(data):
        out = np.full(len(verts), float(data))
    else:
        out = np.asarray(data(pts), dtype=float)
    return {v: float(out[k]) for k, v in enumerate(verts)}


# ----------------------------------------------------------------------------
# Global solve
# ----------------------------------------------------------------------------

@dataclass
class GlobalSolution:
    mesh: CoarseMesh
    bases: dict[int, ElementBasis]
    space: CoarseSpace
    field: DiffusionField
    formulation: str
    f: Callable | float
    neumann: dict[int, Callable | float]       # facet id -> g
    u_vertex: np.ndarray
    u_fine: list[np.ndarray]
    energy: float                               # J1 of the discrete solution
    ortho_residual: float
    conforming: bool

    def coarse_dof_count(self) -> int:
        return self.space.n_free

    def energy_norm_sq(self) -> float:
        """Broken energy norm of the reconstruction."""
        return sum(float(self.u_fine[e] @ (self.bases[e].K_fine @ self.u_fine[e]))
                   for e in range(self.mesh.n_elements))


def element_load_vectors(mesh: CoarseMesh, bases: dict[int, ElementBasis],
                         f, neumann: dict[int, Callable | float]) -> list[np.ndarray]:
    """Fine-grid load vector per element (volume f plus Neumann facet terms)."""
    out = []
    for e in range(mesh.n_elements):
        g = bases[e].grid
        b = fem.assemble_load(g, f)
        for fid in mesh.elem_facets[e]:
            fac = mesh.facets[fid]
            if fid in neumann:
                side = fem.side_of_facet(g, fac.axis, fac.pos)
                b = b + fem.assemble_neumann_load(g, side, neumann[fid], trange=fac.span)
        out.append(b)
    return out


def solve_global(mesh: CoarseMesh, bases: dict[int, ElementBasis], field: DiffusionField,
                 f, space: CoarseSpace, formulation: str = GALERKIN,
                 neumann: dict[int, Callable | float] | None = None) -> GlobalSolution:
    """Assemble and solve the coarse problem, then reconstruct fine fields."""
    neumann = neumann or {}
    n = space.n_free
    loads = element_load_vectors(mesh, bases, f, neumann)
    rows, cols, vals = [], [], []
    rhs = np.zeros(n)
    petrov = formulation == PETROV_GALERKIN
    for el in mesh.elements:
        B = bases[el.index]
        trial = B.coeffs
        test = B.q1 if petrov else B.coeffs
        k_loc = test @ (B.K_fine @ trial.T) if petrov else B.k_loc
        f_loc = test @ loads[el.index]
        expns = [space.corner_expansion(v) for v in el.verts]
        for i in range(len(el.verts)):
            wi, _ = expns[i]
            for p, wp in wi.items():
                rhs[space.free_index[p]] += wp * f_loc[i]
                for j in range(len(el.verts)):
                    wj, cj = expns[j]
                    if cj:
                        rhs[space.free_index[p]] -= wp * k_loc[i, j] * cj
                    for q, wq in wj.items():
                        rows.append(space.free_index[p])
                        cols.append(space.free_index[q])
                        vals.append(wp * k_loc[i, j] * wq)
    Kc = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsc()
    z = fem.solve_linear(Kc, rhs) if n else np.zeros(0)
    u_vertex = space.vertex_values(z)
    u_fine = [bases[el.index].coeffs.T @ u_vertex[list(el.verts)] for el in mesh.elements]
    # J1 = 1/2 B(u,u) - F(u)
    half_b = 0.5 * sum(float(u_fine[e] @ (bases[e].K_fine @ u_fine[e]))
                       for e in range(mesh.n_elements))
    f_of_u = sum(float(u_fine[e] @ loads[e]) for e in range(mesh.n_elements))
    energy = half_b - f_of_u
    ortho = _orthogonality_residual(mesh, bases, space, loads, u_fine, petrov)
    conforming = all(bases[e].variant.startswith(("conforming", "composed"))
                     and (bases[e].patch is None) for e in bases) and not petrov
    return GlobalSolution(mesh=mesh, bases=bases, space=space, field=field,
                          formulation=formulation, f=f, neumann=neumann,
                          u_vertex=u_vertex, u_fine=u_fine, energy=energy,
                          ortho_residual=ortho, conforming=conforming)


def _orthogonality_residual(mesh, bases, space, loads, u_fine, petrov) -> float:
    """max_i |sum_K (A grad u_H, grad phi*_i)_K - F(phi*_i)| over free test dofs."""
    res: dict[int, float] = {v: 0.0 for v in space.free_verts}
    adj = vertex_adjacency(mesh)
    for carrier in space.free_verts:
        r = 0.0
        for v, wgt in space.test_fold(carrier):
            for (e, slot) in adj.get(v, ()):
                B = bases[e]
                phi = (B.q1 if petrov else B.coeffs)[slot]
                r += wgt * (float(phi @ (B.K_fine @ u_fine[e])) - float(phi @ loads[e]))
        res[carrier] = abs(r)
    return max(res.values()) if res else 0.0


def vertex_adjacency(mesh: CoarseMesh) -> dict[int, list[tuple[int, int]]]:
    adj: dict[int, list[tuple[int, int]]] = {}
    for el in mesh.elements:
        for slot, v in enumerate(el.verts):
            adj.setdefault(v, []).append((el.index, slot))
    return adj


# ----------------------------------------------------------------------------
# Conformization
# ----------------------------------------------------------------------------

@dataclass
class Conformized:
    u_fine: list[np.ndarray]
    nonconformity: float          # ||| u_hat - u_H |||_H


def conformize(sol: GlobalSolution) -> Conformized:
    """Kinematically admissible post-processing by nodal trace averaging.

    Fine trace values on every interior facet are replaced by the mean of the
    two adjacent element traces (evaluated at each side's own trace nodes);
    values at coarse vertices are averaged over all adjacent elements; fine
    nodes on Dirichlet facets take the facet-interpolated boundary data.
    Conforming inputs pass through unchanged.
    """
    mesh, bases, space = sol.mesh, sol.bases, sol.space
    if sol.conforming:
        return Conformized([u.copy() for u in sol.u_fine], 0.0)
    u_hat = [u.copy() for u in sol.u_fine]
    # facet-interior averaging
    for fac in mesh.facets:
        if fac.is_boundary:
            continue
        e0, e1 = fac.elem_lo, fac.elem_hi
        for e_self, e_other in ((e0, e1), (e1, e0)):
            gs, go = bases[e_self].grid, bases[e_other].grid
            side_s = fem.side_of_facet(gs, fac.axis, fac.pos)
            side_o = fem.side_of_facet(go, fac.axis, fac.pos)
            ids, tq = _trace_nodes_in_span(gs, side_s, fac.span)
            own = sol.u_fine[e_self][ids]
            other = fem.trace_values(go, sol.u_fine[e_other], side_o, tq)
            u_hat[e_self][ids] = 0.5 * (own + other)
    _average_corners(sol, u_hat)
    _apply_dirichlet_traces(sol, u_hat)
    nc2 = sum(float((u_hat[e] - sol.u_fine[e]) @ (bases[e].K_fine @ (u_hat[e] - sol.u_fine[e])))
              for e in range(mesh.n_elements))
    return Conformized(u_hat, float(np.sqrt(max(nc2, 0.0))))


def _trace_nodes_in_span(grid: Grid, side: str, span: tuple[float, float]):
    if grid.dim == 1:
        nid = 0 if side == "W" else grid.m[0]
        return np.array([nid]), np.array([grid.box[0] if side == "W" else grid.box[1]])
    ids, tpts, _ = fem._side_lattice(grid, side)
    tol = 1e-10 * max(grid.h)
    keep = (tpts >= span[0] - tol) & (tpts <= span[1] + tol)
    return ids[keep], tpts[keep]


def _average_corners(sol: GlobalSolution, u_hat: list[np.ndarray]) -> None:
    mesh = sol.mesh
    adj = vertex_adjacency(mesh)
    for v, elems in adj.items():
        vals = []
        spots = []
        for (e, slot) in elems:
            g = sol.bases[e].grid
            corner_ids = _grid_corner_ids(g)
            nid = corner_ids[slot]
            spots.append((e, nid))
            vals.append(sol.u_fine[e][nid])
        mean = float(np.mean(vals))
        for e, nid in spots:
            u_hat[e][nid] = mean


def _grid_corner_ids(grid: Grid) -> list[int]:
    if grid.dim == 1:
        return [0, grid.m[0]]
    lat = grid.structured_ids()
    return [int(lat[0, 0]), int(lat[0, -1]), int(lat[-1, -1]), int(lat[-1, 0])]


def _apply_dirichlet_traces(sol: GlobalSolution, u_hat: list[np.ndarray]) -> None:
    mesh, space = sol.mesh, sol.space
    for fac in mesh.facets:
        if not fac.is_boundary:
            continue
        if fac.index in sol.neumann:
            continue
        e = fac.elem_lo if fac.elem_lo is not None else fac.elem_hi
        g = sol.bases[e].grid
        side = fem.side_of_facet(g, fac.axis, fac.pos)
        ids, tq = _trace_nodes_in_span(g, side, fac.span)
        va, vb = (fac.verts[0], fac.verts[-1])
        ua = sol.u_vertex[va]
        ub = sol.u_vertex[vb]
        if mesh.dim == 1:
            u_hat[e][ids] = ua
            continue
        pa = mesh.vertices[va][1 - fac.axis]
        pb = mesh.vertices[vb][1 - fac.axis]
        lam = (tq - pa) / (pb - pa) if pb != pa else np.zeros_like(tq)
        u_hat[e][ids] = ua + lam * (ub - ua)


def broken_energy_norm(sol_or_fields, bases: dict[int, ElementBasis] | None = None) -> float:
    """sqrt of the elementwise energy sum; accepts a solution or field list."""
    if isinstance(sol_or_fields, GlobalSolution):
        return float(np.sqrt(max(sol_or_fields.energy_norm_sq(), 0.0)))
    total = sum(float(u @ (bases[e].K_fine @ u)) for e, u in enumerate(sol_or_fields))
    return float(np.sqrt(max(total, 0.0)))


def nonconforming_split(sol: GlobalSolution, hat: Conformized) -> tuple[list[np.ndarray], float]:
    """The KA field for the CRE bound plus the nonconformity norm."""
    return hat.u_fine, hat.nonconformity
