"""The four benchmark problems, the brute-force reference oracle, and error reporting.

Notes on the problem data:

* The 2D periodic coefficient is the separable product
  ``(2 + P cos(2 pi (x-1/2)/eps)) (2 + P cos(2 pi (y-1/2)/eps)) / 4``, whose
  homogenized tensor is exactly ``0.5 sqrt(4 - P^2) I`` (harmonic mean in one
  factor times the arithmetic mean of the other, per axis).
* The crack benchmark runs on the unit square slit along ``y = 1/2`` from the
  domain center to the right boundary; the two lips carry independent degrees
  of freedom and the Dirichlet data is the canonical harmonic slit solution
  ``sqrt(r) sin(theta/2)`` in crack-tip polar coordinates.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field as dfield
from typing import Callable

import numpy as np

from . import fem, msfem
from .fem import DiffusionField, Grid
from .geometry import CoarseMesh, Crack, build_uniform

log = logging.getLogger(__name__)


@dataclass
class ProblemCase:
    name: str
    dim: int
    domain: tuple[float, ...]
    field: DiffusionField
    f: Callable | float
    dirichlet: Callable | float
    eps: float
    micro_scale: float            # finest oscillation wavelength (drives ladders)
    crack: Crack | None = None
    homogenized: float | None = None   # scalar A0 when known (isotropic cases)
    oracle_n: int = 500
    initial_n: int = 5
    initial_h: Callable[[float], float] | None = None   # element size -> h target

    def build_mesh(self, n: int | None = None) -> CoarseMesh:
        return build_uniform(self.domain, n if n is not None else self.initial_n,
                             crack=self.crack)


def case_1d_nonperiodic() -> ProblemCase:
    eps = 0.025

    def Ae(p):
        x = p[:, 0]
        return 5.0 + 50.0 * np.sin(np.pi * x * x / eps) ** 2

    return ProblemCase(
        name="1d_nonperiodic", dim=1, domain=(0.0, 1.0),
        field=DiffusionField(Ae, 5.0, 55.0, "5+50sin^2(pi x^2/eps)"),
        f=lambda p: p[:, 0] ** 2, dirichlet=0.0,
        eps=eps, micro_scale=eps, oracle_n=16000, initial_n=5)


def case_2d_periodic(eps: float = 0.04) -> ProblemCase:
    P = 1.8

    def Ae(p):
        cx = 2.0 + P * np.cos(2 * np.pi * (p[:, 0] - 0.5) / eps)
        cy = 2.0 + P * np.cos(2 * np.pi * (p[:, 1] - 0.5) / eps)
        return 0.25 * cx * cy

    a0 = 0.5 * math.sqrt(4.0 - P * P)
    n_oracle = max(500, int(np.ceil(20.0 / eps / 100.0) * 100))
    return ProblemCase(
        name="2d_periodic", dim=2, domain=(0.0, 0.0, 1.0, 1.0),
        field=DiffusionField(Ae, (2 - P) ** 2 / 4, (2 + P) ** 2 / 4,
                             "separable periodic product"),
        f=-1.0, dirichlet=0.0, eps=eps, micro_scale=eps,
        homogenized=a0, oracle_n=n_oracle, initial_n=5)


def case_2d_fiber() -> ProblemCase:
    P, w, eps = 1.8, 20.0, 0.2
    eps0 = 0.01   # shortest oscillation wavelength, at the fiber radius

    def Ae(p):
        r = np.sqrt((p[:, 0] - 0.5) ** 2 + (p[:, 1] - 0.5) ** 2)
        return 2.0 + P * np.cos(2 * np.pi * np.tanh(w * (r - 0.3)) / eps)

    def ud(p):
        return (p[:, 0] - 0.5) ** 2 + (p[:, 1] - 0.5) ** 2

    return ProblemCase(
        name="2d_fiber", dim=2, domain=(0.0, 0.0, 1.0, 1.0),
        field=DiffusionField(Ae, 2.0 - P, 2.0 + P, "fiber composite rings"),
        f=-1.0, dirichlet=ud, eps=eps, micro_scale=eps0,
        oracle_n=500, initial_n=5)


def case_2d_crack() -> ProblemCase:
    eps = 0.04
    kappa = 64.0 / (9.0 * math.sqrt(17.0))

    def Ae(p):
        sx = np.sin(2 * np.pi * (p[:, 0] - 0.5) / eps) + 9.0 / 8.0
        cy = np.cos(2 * np.pi * (p[:, 1] - 0.5) / eps) + 9.0 / 8.0
        return kappa * sx * cy

    alpha = kappa * (1.0 / 8.0) ** 2
    beta = kappa * (17.0 / 8.0) ** 2

    def ud(p):
        # harmonic slit solution sqrt(r) sin(theta/2), tip at the center,
        # branch cut along the slit (theta measured from the +x crack axis)
        dx = p[:, 0] - 0.5
        dy = p[:, 1] - 0.5
        r = np.sqrt(dx * dx + dy * dy)
        th = np.arctan2(dy, dx) % (2 * np.pi)
        return np.sqrt(r) * np.sin(0.5 * th)

    return ProblemCase(
        name="2d_crack", dim=2, domain=(0.0, 0.0, 1.0, 1.0),
        field=DiffusionField(Ae, alpha, beta, "periodic product, crack"),
        f=0.0, dirichlet=ud, eps=eps, micro_scale=eps,
        crack=Crack(0.5, 0.5, 1.0), homogenized=1.0,
        oracle_n=500, initial_n=8)


CASES: dict[str, Callable[[], ProblemCase]] = {
    "1d_nonperiodic": case_1d_nonperiodic,
    "2d_periodic": case_2d_periodic,
    "2d_fiber": case_2d_fiber,
    "2d_crack": case_2d_crack,
}


# ----------------------------------------------------------------------------
# Fine-scale oracle
# ----------------------------------------------------------------------------

@dataclass
class OracleSolution:
    case: ProblemCase
    grid: Grid
    u: np.ndarray
    energy_norm: float

    def flux_at(self, pts: np.ndarray) -> np.ndarray:
        g = self.grid.eval(self.u, pts, grad=True)
        a = self.case.field(pts)
        return a[:, None] * g if self.case.field.isotropic else np.einsum("nij,nj->ni", a, g)


def oracle_boundary_ids(grid: Grid) -> np.ndarray:
    ids = list(msfem.boundary_node_ids(grid))
    if grid._dups:
        ids.extend(grid._dups.keys())
        ids.extend(grid._dups.values())
    return np.unique(np.asarray(ids, dtype=np.int64))


def fine_oracle(case: ProblemCase, n: int | None = None) -> OracleSolution:
    """Reference solve on a global n^d grid resolving the microstructure."""
    n = n if n is not None else case.oracle_n
    if case.dim == 1:
        grid = Grid(1, case.domain, (n,))
    else:
        grid = Grid(2, case.domain, (n, n), crack=case.crack)
    K = fem.assemble_stiffness(grid, case.field)
    b = fem.assemble_load(grid, case.f)
    bnd = oracle_boundary_ids(grid)
    vals = _dirichlet_at(case, grid, bnd)
    Kc = K.tocsr()
    free = np.setdiff1d(np.arange(grid.n_nodes), bnd)
    rhs = b[free] - Kc[free][:, bnd] @ vals
    u = np.zeros(grid.n_nodes)
    u[bnd] = vals
    u[free] = fem.solve_large_spd(Kc[free][:, free], rhs)
    en = math.sqrt(max(float(u @ (K @ u)), 0.0))
    log.info("oracle %s n=%d dofs=%d |||u|||=%.6g", case.name, n, grid.n_nodes, en)
    return OracleSolution(case=case, grid=grid, u=u, energy_norm=en)


def _dirichlet_at(case: ProblemCase, grid: Grid, ids: np.ndarray) -> np.ndarray:
    if np.isscalar(case.dirichlet):
        return np.full(len(ids), float(case.dirichlet))
    pts = grid.nodes[ids].copy()
    if grid.crack is not None:
        nudge = 1e-12
        dup_new = set(grid._dups.values())
        dup_old = set(grid._dups.keys())
        for k, i in enumerate(ids):
            if int(i) in dup_new:
                pts[k, 1] -= nudge
            elif int(i) in dup_old:
                pts[k, 1] += nudge
    return np.asarray(case.dirichlet(pts), dtype=float)


# ----------------------------------------------------------------------------
# Cross-grid evaluation and error metrics
# ----------------------------------------------------------------------------

def locate_points(mesh: CoarseMesh, pts: np.ndarray) -> np.ndarray:
    """Element index containing each point (vectorized quadtree descent)."""
    pts = np.atleast_2d(pts)
    n = mesh.n_roots
    if mesh.dim == 1:
        x0, x1 = mesh.domain
        t = (pts[:, 0] - x0) / (x1 - x0) * n
    else:
        x0, y0, x1, y1 = mesh.domain
        t = (pts[:, 0] - x0) / (x1 - x0) * n
        s = (pts[:, 1] - y0) / (y1 - y0) * n
    leaf_of: dict[tuple, int] = {}
    for e, (root, path) in enumerate(mesh.leaf_keys()):
        leaf_of[root + path] = e
    out = np.full(len(pts), -1, dtype=np.int64)
    if mesh.dim == 1:
        keys = [(k,) for k in np.clip(np.floor(t).astype(int), 0, n - 1)]
        fx = t - np.floor(t)
        _descend(leaf_of, keys, [fx], out, 1)
    else:
        ci = np.clip(np.floor(t).astype(int), 0, n - 1)
        cj = np.clip(np.floor(s).astype(int), 0, n - 1)
        keys = list(zip(ci, cj))
        _descend(leaf_of, keys, [t - np.floor(t), s - np.floor(s)], out, 2)
    return out


def _descend(leaf_of, keys, fracs, out, dim) -> None:
    # group points by key; descend un-resolved groups one level at a time
    pending = {}
    for i, k in enumerate(keys):
        pending.setdefault(k, []).append(i)
    while pending:
        nxt = {}
        for key, idxs in pending.items():
            if key in leaf_of:
                out[list(idxs)] = leaf_of[key]
                continue
            for i in idxs:
                child = 0
                newf = []
                for ax in range(dim):
                    f = fracs[ax][i] * 2.0
                    bit = 1 if f >= 1.0 else 0
                    child |= bit << ax
                    fracs[ax][i] = f - bit
                nxt.setdefault(key + (child,), []).append(i)
        pending = nxt


def eval_on_points(mesh: CoarseMesh, grids: dict[int, Grid], fields: list[np.ndarray],
                   pts: np.ndarray, grad: bool = False,
                   eidx: np.ndarray | None = None) -> np.ndarray:
    if eidx is None:
        eidx = locate_points(mesh, pts)
    dim = mesh.dim
    out = np.zeros((len(pts), dim)) if grad else np.zeros(len(pts))
    for e in range(mesh.n_elements):
        msk = eidx == e
        if not np.any(msk):
            continue
        out[msk] = grids[e].eval(fields[e], pts[msk], grad=grad)
    return out


@dataclass
class ErrorReport:
    true_error: float
    reference_norm: float
    solution_norm: float

    @property
    def relative(self) -> float:
        return self.true_error / self.reference_norm


def true_error(oracle: OracleSolution, mesh: CoarseMesh, grids: dict[int, Grid],
               u_fields: list[np.ndarray], nq: int = 3) -> ErrorReport:
    """Energy-norm distance to the oracle, integrated on the oracle grid."""
    og = oracle.grid
    pts, w = og.quad_points(nq)
    gref = og.eval(oracle.u, pts, grad=True)
    a = oracle.case.field(pts)
    eidx = locate_points(mesh, pts)
    gH = eval_on_points(mesh, grids, u_fields, pts, grad=True, eidx=eidx)
    if og.dim == 1:
        diff2 = (gref - gH)[:, 0] ** 2
        nrm2 = gref[:, 0] ** 2
        sol2 = gH[:, 0] ** 2
    else:
        diff2 = np.sum((gref - gH) ** 2, axis=1)
        nrm2 = np.sum(gref ** 2, axis=1)
        sol2 = np.sum(gH ** 2, axis=1)
    if not oracle.case.field.isotropic:
        raise NotImplementedError("tensor-coefficient error integration")
    err = math.sqrt(max(float(np.sum(w * a * diff2)), 0.0))
    nrm = math.sqrt(max(float(np.sum(w * a * nrm2)), 0.0))
    soln = math.sqrt(max(float(np.sum(w * a * sol2)), 0.0))
    return ErrorReport(true_error=err, reference_norm=nrm, solution_norm=soln)


def effectivity(delta: float, report: ErrorReport) -> float:
    if report.true_error == 0.0:
        return float("nan")
    return delta / report.true_error


def flux_energy_distance(oracle: OracleSolution, mesh: CoarseMesh,
                         flux_at: Callable[[int, np.ndarray], np.ndarray],
                         nq: int = 3) -> float:
    """||| q_ref - q_hat |||_F integrated on the oracle grid (Prager-Synge checks)."""
    og = oracle.grid
    pts, w = og.quad_points(nq)
    qref = oracle.flux_at(pts)
    a = oracle.case.field(pts)
    eidx = locate_points(mesh, pts)
    qh = np.zeros_like(qref)
    for e in range(mesh.n_elements):
        msk = eidx == e
        if np.any(msk):
            qh[msk] = np.atleast_2d(flux_at(e, pts[msk]).T).T
    diff = qref - qh
    if og.dim == 1:
        val = np.sum(w * diff[:, 0] ** 2 / a)
    else:
        val = np.sum(w * np.sum(diff * diff, axis=1) / a)
    return math.sqrt(max(float(val), 0.0))
