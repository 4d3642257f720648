"""Scalar Lagrange FE kernel on uniform structured grids.

Everything the solver integrates lives on uniform tensor-product grids: the
per-element fine meshes, oversampling patches and the global reference grids
of the benchmark oracle. Fields are Q1 (bilinear) nodal vectors; higher-degree
polynomial spaces enter as explicit subspace matrices evaluated on the Q1
lattice, except for :func:`assemble_stiffness` which also supports native
tensor Lagrange elements of degree up to 4.

Quadrature is tensor Gauss with ``degree + 2`` points per axis per cell and
the diffusion coefficient evaluated pointwise, and the same rule is shared by
assembly, norms and the error estimator so that all quadratic forms are
mutually consistent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import Crack, FineMesh

__all__ = [
    "DiffusionField", "Grid", "assemble_stiffness", "assemble_load",
    "assemble_neumann_load", "DirichletSolver", "solve_linear", "solve_spd",
    "solve_mean_zero_subspace", "energy_norm", "flux_misfit_sq", "SparseSystem",
]


def gauss_rule(npts: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre points/weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(npts)
    return 0.5 * (x + 1.0), 0.5 * w


def lagrange_1d(p: int, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Values and derivatives of the p+1 equispaced Lagrange basis on [0,1].

    Returns arrays of shape (len(t), p+1).
    """
    nodes = np.linspace(0.0, 1.0, p + 1)
    t = np.asarray(t, dtype=float)
    vals = np.ones((t.size, p + 1))
    ders = np.zeros((t.size, p + 1))
    for a in range(p + 1):
        for b in range(p + 1):
            if b == a:
                continue
            denom = nodes[a] - nodes[b]
            new = (t - nodes[b]) / denom
            ders[:, a] = ders[:, a] * new + vals[:, a] / denom
            vals[:, a] *= new
    return vals, ders


class DiffusionField:
    """Evaluable symmetric diffusion tensor with ellipticity bounds.

    ``fn`` maps an (N, d) point array either to scalars (isotropic) or to
    (N, d, d) symmetric tensors.
    """

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], alpha: float,
                 beta: float, label: str = "", isotropic: bool = True):
        if not (0 < alpha <= beta):
            raise ValueError("need 0 < alpha <= beta")
        self.fn = fn
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.label = label
        self.isotropic = isotropic

    @classmethod
    def constant(cls, value: float, label: str = "constant") -> "DiffusionField":
        return cls(lambda p: np.full(len(p), float(value)), value, value, label)

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return self.fn(pts)

    def check_bounds(self, pts: np.ndarray, slack: float = 1e-9) -> bool:
        a = self(pts)
        if self.isotropic:
            lo, hi = float(np.min(a)), float(np.max(a))
        else:
            ev = np.linalg.eigvalsh(a)
            lo, hi = float(np.min(ev)), float(np.max(ev))
        return lo >= self.alpha - slack and hi <= self.beta + slack


@dataclass
class Grid:
    """Uniform m^d tensor grid; nodes lexicographic (x fastest).

    A horizontal crack slit duplicates the nodes strictly inside the slit:
    original ids serve the upper lip, appended duplicates the lower lip.
    """

    dim: int
    box: tuple[float, ...]
    m: tuple[int, ...]
    crack: Crack | None = None

    def __post_init__(self) -> None:
        if self.dim == 1:
            (x0, x1), (mx,) = self.box, self.m
            self.h = ((x1 - x0) / mx,)
            self.nodes = np.linspace(x0, x1, mx + 1)[:, None]
            self.cells = np.stack([np.arange(mx), np.arange(1, mx + 1)], axis=1)
            self._dups: dict[int, int] = {}
            return
        x0, y0, x1, y1 = self.box
        mx, my = self.m
        self.h = ((x1 - x0) / mx, (y1 - y0) / my)
        xs = np.linspace(x0, x1, mx + 1)
        ys = np.linspace(y0, y1, my + 1)
        X, Y = np.meshgrid(xs, ys, indexing="xy")
        nodes = np.stack([X.ravel(), Y.ravel()], axis=1)
        ii, jj = np.meshgrid(np.arange(mx), np.arange(my), indexing="xy")
        ll = (jj * (mx + 1) + ii).ravel()
        cells = np.stack([ll, ll + 1, ll + mx + 1, ll + mx + 2], axis=1)
        self._dups = {}
        if self.crack is not None:
            j = round((self.crack.y - y0) / self.h[1])
            i_tip = round((self.crack.x_tip - x0) / self.h[0])
            i_end = round((self.crack.x_end - x0) / self.h[0])
            if not (0 < j < my):
                raise ValueError("crack row must be interior to the grid")
            dup_ids = [j * (mx + 1) + i for i in range(i_tip + 1, i_end + 1)]
            new_ids = np.arange(len(nodes), len(nodes) + len(dup_ids))
            nodes = np.vstack([nodes, nodes[dup_ids]])
            self._dups = dict(zip(dup_ids, new_ids))
            # cells in row j-1 (below the slit) reference the duplicates
            below = np.where(jj.ravel() == j - 1)[0]
            for c in below:
                for k in (2, 3):  # upper two local nodes of those cells sit on the slit
                    cells[c, k] = self._dups.get(cells[c, k], cells[c, k])
        self.nodes = nodes
        self.cells = cells

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def cell_measure(self) -> float:
        out = 1.0
        for hh in self.h:
            out *= hh
        return out

    def node_id(self, i: int, j: int = 0, lip: int = +1) -> int:
        nid = j * (self.m[0] + 1) + i if self.dim == 2 else i
        if lip < 0 and nid in self._dups:
            return self._dups[nid]
        return nid

    def structured_ids(self) -> np.ndarray:
        """Lattice of primary node ids, shape (my+1, mx+1) or (mx+1,)."""
        if self.dim == 1:
            return np.arange(self.m[0] + 1)
        return np.arange((self.m[0] + 1) * (self.m[1] + 1)).reshape(self.m[1] + 1, self.m[0] + 1)

    def cell_origins(self) -> np.ndarray:
        """Lower-left corner of each cell, shape (C, dim)."""
        return self.nodes[self.cells[:, 0]]

    def quad_points(self, nq: int) -> tuple[np.ndarray, np.ndarray]:
        """All quadrature points as (C * nq^d, dim) plus matching weights."""
        t, w = gauss_rule(nq)
        org = self.cell_origins()
        if self.dim == 1:
            pts = org[:, None, :] + (t * self.h[0])[None, :, None]
            wts = np.broadcast_to(w * self.h[0], (self.n_cells, nq))
            return pts.reshape(-1, 1), wts.reshape(-1)
        TX, TY = np.meshgrid(t, t, indexing="xy")
        loc = np.stack([TX.ravel() * self.h[0], TY.ravel() * self.h[1]], axis=1)
        pts = org[:, None, :] + loc[None, :, :]
        ww = np.outer(w, w).ravel() * self.cell_measure
        wts = np.broadcast_to(ww, (self.n_cells, nq * nq))
        return pts.reshape(-1, self.dim), wts.reshape(-1)

    # -- Q1 evaluation ------------------------------------------------------

    def locate(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Cell index and reference coords of points (clipped to the box)."""
        pts = np.atleast_2d(pts)
        out_ref = np.empty_like(pts)
        idx = np.zeros(len(pts), dtype=np.int64)
        for ax in range(self.dim):
            lo = self.box[ax] if self.dim == 2 else self.box[0]
            t = (pts[:, ax] - lo) / self.h[ax]
            c = np.clip(np.floor(t).astype(np.int64), 0, self.m[ax] - 1)
            out_ref[:, ax] = np.clip(t - c, 0.0, 1.0)
            idx = idx + c * (1 if ax == 0 else self.m[0])
        return idx, out_ref

    def eval(self, u: np.ndarray, pts: np.ndarray, grad: bool = False) -> np.ndarray:
        """Q1 interpolation of nodal vector ``u`` at points (values or gradients)."""
        idx, ref = self.locate(pts)
        corners = u[self.cells[idx]]
        if self.dim == 1:
            t = ref[:, 0]
            if not grad:
                return corners[:, 0] * (1 - t) + corners[:, 1] * t
            return ((corners[:, 1] - corners[:, 0]) / self.h[0])[:, None]
        tx, ty = ref[:, 0], ref[:, 1]
        sh = np.stack([(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty], axis=1)
        if not grad:
            return np.einsum("pc,pc->p", corners, sh)
        gx = np.stack([-(1 - ty), (1 - ty), -ty, ty], axis=1) / self.h[0]
        gy = np.stack([-(1 - tx), -tx, (1 - tx), tx], axis=1) / self.h[1]
        return np.stack([np.einsum("pc,pc->p", corners, gx),
                         np.einsum("pc,pc->p", corners, gy)], axis=1)


def grid_from_fine(fm: FineMesh) -> Grid:
    return Grid(dim=fm.dim, box=fm.box, m=fm.m)


# ----------------------------------------------------------------------------
# Assembly
# ----------------------------------------------------------------------------

def _ref_basis(dim: int, degree: int, nq: int):
    """Per-qpt reference values/gradients for tensor Lagrange Q_degree."""
    t, w = gauss_rule(nq)
    v1, d1 = lagrange_1d(degree, t)
    if dim == 1:
        return v1, d1[:, :, None], w
    nloc = (degree + 1) ** 2
    vals = np.empty((nq * nq, nloc))
    grads = np.empty((nq * nq, nloc, 2))
    q = 0
    for jy in range(nq):
        for jx in range(nq):
            k = 0
            for by in range(degree + 1):
                for bx in range(degree + 1):
                    vals[q, k] = v1[jx, bx] * v1[jy, by]
                    grads[q, k, 0] = d1[jx, bx] * v1[jy, by]
                    grads[q, k, 1] = v1[jx, bx] * d1[jy, by]
                    k += 1
            q += 1
    ww = np.outer(w, w).reshape(-1) if dim == 2 else w
    return vals, grads, ww


def _qp_lattice(grid: Grid, degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Global dof lattice and per-cell connectivity for Q_degree on a grid."""
    if grid._dups:
        raise NotImplementedError("degree > 1 assembly on cracked grids")
    if grid.dim == 1:
        mx = grid.m[0]
        ndof = degree * mx + 1
        conn = np.stack([degree * np.arange(mx) + k for k in range(degree + 1)], axis=1)
        x0, x1 = grid.box
        dofs = np.linspace(x0, x1, ndof)[:, None]
        return dofs, conn
    mx, my = grid.m
    nx, ny = degree * mx + 1, degree * my + 1
    xs = np.linspace(grid.box[0], grid.box[2], nx)
    ys = np.linspace(grid.box[1], grid.box[3], ny)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    dofs = np.stack([X.ravel(), Y.ravel()], axis=1)
    ii, jj = np.meshgrid(np.arange(mx), np.arange(my), indexing="xy")
    base = (jj.ravel() * degree) * nx + ii.ravel() * degree
    offs = [by * nx + bx for by in range(degree + 1) for bx in range(degree + 1)]
    conn = base[:, None] + np.asarray(offs)[None, :]
    return dofs, conn


def _coef_at(field: DiffusionField, pts: np.ndarray, dim: int) -> np.ndarray:
    a = field(pts)
    if field.isotropic:
        return a
    return a  # (N, d, d)


def assemble_stiffness(grid: Grid, field: DiffusionField, degree: int = 1,
                       quad: int | None = None, chunk: int = 200_000) -> sp.csr_matrix:
    """Stiffness matrix of ``int A grad(u) . grad(v)`` on the grid.

    ``degree`` in 1..4 selects tensor Lagrange elements; degree 1 matches the
    grid's own Q1 nodes. Coefficient evaluated pointwise at (degree+2)^d Gauss
    points per cell (overridable via ``quad``).
    """
    if degree not in (1, 2, 3, 4):
        raise ValueError("degree must be in 1..4")
    nq = quad if quad is not None else degree + 2
    vals, grads, w = _ref_basis(grid.dim, degree, nq)
    if degree == 1:
        conn = grid.cells
        ndof = grid.n_nodes
    else:
        dofs, conn = _qp_lattice(grid, degree)
        ndof = len(dofs)
    scale = np.array([1.0 / grid.h[ax] for ax in range(grid.dim)])
    gphys = grads * scale[None, None, :]
    t, _ = gauss_rule(nq)
    if grid.dim == 1:
        loc = (t * grid.h[0])[:, None]
    else:
        TX, TY = np.meshgrid(t, t, indexing="xy")
        loc = np.stack([TX.ravel() * grid.h[0], TY.ravel() * grid.h[1]], axis=1)
    wvol = w * grid.cell_measure
    org = grid.cell_origins()
    nloc = conn.shape[1]
    mats = []
    for c0 in range(0, grid.n_cells, chunk):
        c1 = min(c0 + chunk, grid.n_cells)
        pts = (org[c0:c1, None, :] + loc[None, :, :]).reshape(-1, grid.dim)
        a = _coef_at(field, pts, grid.dim)
        if field.isotropic:
            a = a.reshape(c1 - c0, -1)
            ke = np.einsum("cq,q,qad,qbd->cab", a, wvol, gphys, gphys, optimize=True)
        else:
            a = a.reshape(c1 - c0, -1, grid.dim, grid.dim)
            ke = np.einsum("cqde,q,qad,qbe->cab", a, wvol, gphys, gphys, optimize=True)
        rows = np.repeat(conn[c0:c1], nloc, axis=1).ravel()
        cols = np.tile(conn[c0:c1], (1, nloc)).ravel()
        mats.append(sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(ndof, ndof)).tocsr())
    K = mats[0]
    for M in mats[1:]:
        K = K + M
    return K


def assemble_load(grid: Grid, f: Callable[[np.ndarray], np.ndarray] | float,
                  degree: int = 1, quad: int | None = None) -> np.ndarray:
    """Load vector ``int f v`` (volume term only)."""
    nq = quad if quad is not None else degree + 2
    vals, _, w = _ref_basis(grid.dim, degree, nq)
    if degree == 1:
        conn, ndof = grid.cells, grid.n_nodes
    else:
        dofs, conn = _qp_lattice(grid, degree)
        ndof = len(dofs)
    t, _ = gauss_rule(nq)
    if grid.dim == 1:
        loc = (t * grid.h[0])[:, None]
    else:
        TX, TY = np.meshgrid(t, t, indexing="xy")
        loc = np.stack([TX.ravel() * grid.h[0], TY.ravel() * grid.h[1]], axis=1)
    org = grid.cell_origins()
    pts = (org[:, None, :] + loc[None, :, :]).reshape(-1, grid.dim)
    fv = np.full(len(pts), float(f)) if np.isscalar(f) else np.asarray(f(pts), dtype=float)
    fv = fv.reshape(grid.n_cells, -1)
    fe = np.einsum("cq,q,qa->ca", fv, w * grid.cell_measure, vals)
    out = np.zeros(ndof)
    np.add.at(out, conn.ravel(), fe.ravel())
    return out


def assemble_neumann_load(grid: Grid, side: str, g, nq: int = 4,
                          trange: tuple[float, float] | None = None) -> np.ndarray:
    """Boundary load ``int_gamma g v`` on one grid side ('W','E','S','N')."""
    out = np.zeros(grid.n_nodes)
    ids, tpts, seglen = _side_lattice(grid, side)
    t, w = gauss_rule(nq)
    for k in range(len(ids) - 1):
        a, b = tpts[k], tpts[k + 1]
        if trange is not None and (b <= trange[0] + 1e-14 or a >= trange[1] - 1e-14):
            continue
        xq = a + (b - a) * t
        pq = _side_points(grid, side, xq)
        gv = np.full(len(xq), float(g)) if np.isscalar(g) else np.asarray(g(pq), dtype=float)
        out[ids[k]] += np.sum(w * (b - a) * gv * (1 - t))
        out[ids[k + 1]] += np.sum(w * (b - a) * gv * t)
    return out


def _side_lattice(grid: Grid, side: str):
    lat = grid.structured_ids()
    if grid.dim == 1:
        raise ValueError("no side lattice in 1D")
    if side == "W":
        ids = lat[:, 0]
        tpts = np.linspace(grid.box[1], grid.box[3], grid.m[1] + 1)
    elif side == "E":
        ids = lat[:, -1]
        tpts = np.linspace(grid.box[1], grid.box[3], grid.m[1] + 1)
    elif side == "S":
        ids = lat[0, :]
        tpts = np.linspace(grid.box[0], grid.box[2], grid.m[0] + 1)
    elif side == "N":
        ids = lat[-1, :]
        tpts = np.linspace(grid.box[0], grid.box[2], grid.m[0] + 1)
    else:
        raise ValueError(side)
    return ids, tpts, tpts[1] - tpts[0]


def _side_points(grid: Grid, side: str, tq: np.ndarray) -> np.ndarray:
    if side in ("W", "E"):
        x = grid.box[0] if side == "W" else grid.box[2]
        return np.stack([np.full_like(tq, x), tq], axis=1)
    y = grid.box[1] if side == "S" else grid.box[3]
    return np.stack([tq, np.full_like(tq, y)], axis=1)


# ----------------------------------------------------------------------------
# Solvers
# ----------------------------------------------------------------------------

@dataclass
class SparseSystem:
    """Symmetric system with optional Dirichlet and mean-zero constraints."""

    matrix: sp.spmatrix
    rhs: np.ndarray
    fixed_ids: np.ndarray | None = None
    fixed_vals: np.ndarray | None = None
    mean_weights: np.ndarray | None = None   # one row |w . u = 0| fixing a constant kernel


def solve_spd(system: SparseSystem, rtol: float = 1e-10) -> np.ndarray:
    """Direct solve with constraint elimination; residual checked on free rows."""
    K = system.matrix.tocsr()
    b = np.asarray(system.rhs, dtype=float)
    n = K.shape[0]
    if system.fixed_ids is not None and len(system.fixed_ids):
        free = np.setdiff1d(np.arange(n), system.fixed_ids, assume_unique=False)
        x = np.zeros(n)
        x[system.fixed_ids] = system.fixed_vals
        rhs = b[free] - K[free][:, system.fixed_ids] @ system.fixed_vals
        Kff = K[free][:, free]
        mw = system.mean_weights[free] if system.mean_weights is not None else None
        x[free] = _solve_core(Kff, rhs, mw)
        res = np.linalg.norm(Kff @ x[free] - rhs) if len(free) else 0.0
        scale = max(np.linalg.norm(rhs), 1.0)
    else:
        x = _solve_core(K, b, system.mean_weights)
        if system.mean_weights is None:
            res = np.linalg.norm(K @ x - b)
        else:
            r = K @ x - b
            w = system.mean_weights
            res = np.linalg.norm(r - w * float(w @ r) / float(w @ w))  # modulo multiplier
        scale = max(np.linalg.norm(b), 1.0)
    if res > max(rtol, 1e-10) * scale * 10:
        raise RuntimeError(f"linear solve residual {res:.3e} exceeds tolerance")
    return x


def _solve_core(K: sp.spmatrix, b: np.ndarray, mean_w: np.ndarray | None) -> np.ndarray:
    if mean_w is not None:
        Kl = sp.bmat([[K, mean_w[:, None]], [mean_w[None, :], None]], format="csc")
        sol = spla.splu(Kl).solve(np.concatenate([b, [0.0]]))
        return sol[:-1]
    return spla.splu(K.tocsc()).solve(b)


def solve_linear(K: sp.spmatrix, b: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """splu solve with residual verification (works for nonsymmetric too)."""
    x = spla.splu(K.tocsc()).solve(b)
    res = np.linalg.norm(K @ x - b)
    if res > rtol * max(np.linalg.norm(b), 1.0) * 10:
        raise RuntimeError(f"linear solve residual {res:.3e}")
    return x


def solve_large_spd(K: sp.spmatrix, b: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Multigrid-preconditioned CG for big SPD systems, splu fallback below 3e5 dofs."""
    n = K.shape[0]
    if n <= 300_000:
        return solve_linear(K.tocsc(), b, rtol)
    import pyamg

    ml = pyamg.smoothed_aggregation_solver(K.tocsr(), max_coarse=500)
    x = ml.solve(b, tol=rtol * 1e-2, accel="cg", maxiter=400)
    res = np.linalg.norm(K @ x - b)
    if res > rtol * max(np.linalg.norm(b), 1.0):
        x, info = spla.cg(K, b, x0=x, rtol=rtol * 1e-1, atol=0.0, maxiter=20_000,
                          M=sp.diags(1.0 / K.diagonal()))
        res = np.linalg.norm(K @ x - b)
        if res > 10 * rtol * max(np.linalg.norm(b), 1.0):
            raise RuntimeError(f"iterative solve stalled, residual {res:.3e}")
    return x


class DirichletSolver:
    """Reusable factorization of the interior block of a stiffness matrix.

    Serves the many local solves that share one operator but differ in
    Dirichlet data (multiscale basis functions, harmonic coordinates).
    """

    def __init__(self, K: sp.spmatrix, boundary_ids: np.ndarray):
        n = K.shape[0]
        self.n = n
        self.bnd = np.asarray(boundary_ids, dtype=np.int64)
        self.free = np.setdiff1d(np.arange(n), self.bnd)
        K = K.tocsr()
        self.Kfb = K[self.free][:, self.bnd].tocsr()
        self.lu = spla.splu(K[self.free][:, self.free].tocsc())

    def solve(self, boundary_vals: np.ndarray, load: np.ndarray | None = None) -> np.ndarray:
        x = np.zeros(self.n)
        x[self.bnd] = boundary_vals
        rhs = -(self.Kfb @ boundary_vals)
        if load is not None:
            rhs = rhs + load[self.free]
        if len(self.free):
            x[self.free] = self.lu.solve(rhs)
        return x


def solve_mean_zero_subspace(S: np.ndarray, rhs: np.ndarray, mean_vec: np.ndarray,
                             rcond: float = 1e-12) -> np.ndarray:
    """Solve S c = rhs in a subspace whose kernel contains constants.

    The mean constraint ``mean_vec . c = 0`` pins the kernel; remaining
    near-null directions (nearly dependent subspace generators) are removed by
    eigenvalue truncation, which keeps the solve deterministic and stable.
    """
    S = np.asarray(S, dtype=float)
    lam, V = np.linalg.eigh(0.5 * (S + S.T))
    tol = rcond * max(lam[-1], 1e-300)
    keep = lam > tol
    Vk = V[:, keep]
    c = Vk @ ((Vk.T @ rhs) / lam[keep])
    denom = float(mean_vec @ mean_vec)
    if denom > 0:
        c = c - (mean_vec @ c) / denom * mean_vec
    return c


# ----------------------------------------------------------------------------
# Norms and CRE integrands
# ----------------------------------------------------------------------------

def energy_norm_sq(grid: Grid, field: DiffusionField, u: np.ndarray,
                   K: sp.spmatrix | None = None) -> float:
    """``int A grad(u) . grad(u)`` via the assembled quadratic form."""
    if K is None:
        K = assemble_stiffness(grid, field)
    return float(u @ (K @ u))


def energy_norm(grid: Grid, field: DiffusionField, u: np.ndarray,
                K: sp.spmatrix | None = None) -> float:
    return float(np.sqrt(max(energy_norm_sq(grid, field, u, K), 0.0)))


def flux_misfit_sq(grid: Grid, field: DiffusionField, u: np.ndarray,
                   flux_at: Callable[[np.ndarray], np.ndarray], nq: int = 3) -> float:
    """CRE integrand ``int (A^-1)(q - A grad u).(q - A grad u)``.

    ``flux_at`` returns the statically admissible flux at given points:
    shape (N,) in 1D or (N, 2) in 2D.
    """
    pts, w = grid.quad_points(nq)
    gu = grid.eval(u, pts, grad=True)
    q = np.asarray(flux_at(pts), dtype=float)
    if grid.dim == 1 and q.ndim == 1:
        q = q[:, None]
    a = field(pts)
    if field.isotropic:
        diff = q - a[:, None] * gu
        return float(np.sum(w * np.sum(diff * diff, axis=1) / a))
    Agu = np.einsum("nij,nj->ni", a, gu)
    diff = q - Agu
    ainv = np.linalg.inv(a)
    return float(np.sum(w * np.einsum("ni,nij,nj->n", diff, ainv, diff)))


def l2_norm_sq(grid: Grid, vals_at: Callable[[np.ndarray], np.ndarray] | np.ndarray,
               nq: int = 3) -> float:
    pts, w = grid.quad_points(nq)
    v = grid.eval(vals_at, pts) if isinstance(vals_at, np.ndarray) else np.asarray(vals_at(pts))
    return float(np.sum(w * v * v))


# ----------------------------------------------------------------------------
# Boundary trace helpers (used by the flux recovery)
# ----------------------------------------------------------------------------

def side_of_facet(grid: Grid, axis: int, pos: float) -> str:
    """Which grid side a coarse facet lies on ('W','E','S','N'; 'W'/'E' in 1D)."""
    tol = 1e-10 * max(grid.h)
    if grid.dim == 1:
        if abs(pos - grid.box[0]) < tol:
            return "W"
        if abs(pos - grid.box[1]) < tol:
            return "E"
        raise ValueError("facet not on grid boundary")
    if axis == 0:
        if abs(pos - grid.box[0]) < tol:
            return "W"
        if abs(pos - grid.box[2]) < tol:
            return "E"
    else:
        if abs(pos - grid.box[1]) < tol:
            return "S"
        if abs(pos - grid.box[3]) < tol:
            return "N"
    raise ValueError("facet not on grid boundary")


def trace_values(grid: Grid, u: np.ndarray, side: str, tq: np.ndarray,
                 lip: int = +1) -> np.ndarray:
    """Trace of a nodal field along one grid side at tangent coords ``tq``."""
    if grid.dim == 1:
        nid = 0 if side == "W" else grid.m[0]
        return np.full(len(np.atleast_1d(tq)), u[nid])
    ids, tpts, _ = _side_lattice(grid, side)
    vals = u[ids]
    return np.interp(tq, tpts, vals)


def trace_normal_flux(grid: Grid, field: DiffusionField, u: np.ndarray, side: str,
                      tq: np.ndarray) -> np.ndarray:
    """Outward normal flux ``A grad(u) . n`` along one grid side at coords ``tq``.

    One-sided Q1 gradients from the boundary cell layer; coefficient evaluated
    on the boundary itself.
    """
    tq = np.atleast_1d(np.asarray(tq, dtype=float))
    if grid.dim == 1:
        if side == "W":
            du = (u[1] - u[0]) / grid.h[0]
            x = grid.box[0]
            sgn = -1.0
        else:
            du = (u[-1] - u[-2]) / grid.h[0]
            x = grid.box[1]
            sgn = +1.0
        a = field(np.array([[x]]))
        return np.full(len(tq), sgn * float(a[0]) * du)
    lat = grid.structured_ids()
    if side in ("W", "E"):
        col0, col1 = (0, 1) if side == "W" else (-1, -2)
        b_ids, in_ids = lat[:, col0], lat[:, col1]
        tpts = np.linspace(grid.box[1], grid.box[3], grid.m[1] + 1)
        x = grid.box[0] if side == "W" else grid.box[2]
        pq = np.stack([np.full_like(tq, x), tq], axis=1)
    else:
        row0, row1 = (0, 1) if side == "S" else (-1, -2)
        b_ids, in_ids = lat[row0, :], lat[row1, :]
        # the slit duplicates the 'N' row nodes seen from below
        b_ids = np.array([grid._dups.get(int(i), int(i)) for i in b_ids]) if (side == "N" and grid._dups) else b_ids
        tpts = np.linspace(grid.box[0], grid.box[2], grid.m[0] + 1)
        y = grid.box[1] if side == "S" else grid.box[3]
        pq = np.stack([tq, np.full_like(tq, y)], axis=1)
    hngrid = grid.h[0] if side in ("W", "E") else grid.h[1]
    # (u_boundary - u_interior)/h is the one-sided outward normal derivative
    dn = (u[b_ids] - u[in_ids]) / hngrid
    dn_q = np.interp(tq, tpts, dn)
    a = field(pq)
    if not field.isotropic:
        nvec = {"W": (-1, 0), "E": (1, 0), "S": (0, -1), "N": (0, 1)}[side]
        # normal flux for tensor coefficients also needs the tangential gradient
        ut = np.gradient(u[b_ids], tpts)
        ut_q = np.interp(tq, tpts, ut)
        gn = dn_q * np.asarray(nvec, dtype=float)[None, :]
        tvec = np.array([-nvec[1], nvec[0]], dtype=float)
        g = gn + ut_q[:, None] * tvec[None, :]
        return np.einsum("nij,nj,i->n", a, g, np.asarray(nvec, dtype=float))
    return a * dn_q
