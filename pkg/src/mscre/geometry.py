"""Coarse quadtree meshes over rectangles and intervals.

The coarse partition is a forest of 1-irregular quadtrees (bintrees in 1D)
rooted in a uniform n x n grid. All topology is computed in exact integer
coordinates: each root cell spans ``UNIT = 2**LCAP`` integer units per axis,
so dyadic subdivision never accumulates floating-point drift and vertex
deduplication is exact.

Interfaces between elements are stored as *facets*: the minimal interface
pieces with exactly two adjacent elements (or one, on the boundary). On a
hanging edge the coarse element contributes one geometric edge that is split
into two facets, one per small neighbor, and the shared midpoint vertex is
recorded as a hanging vertex constrained to the average of the edge
endpoints.

A straight horizontal slit (crack) is represented by vertex surgery: mesh
vertices strictly inside the slit are duplicated so the two lips carry
independent degrees of freedom, and the interface pieces along the slit
become boundary facets of their respective sides.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LCAP = 40
UNIT = 1 << LCAP

INTERIOR = "interior"
BOUNDARY = "boundary"
SLIT = "slit"


@dataclass(frozen=True)
class Crack:
    """Horizontal slit ``{(x, y_slit) : x_tip <= x <= x_end}`` with tip at x_tip.

    The slit must lie on coarse mesh lines and reach the outer boundary at
    ``x_end`` (a single interior tip).
    """

    y: float
    x_tip: float
    x_end: float


@dataclass(frozen=True)
class Element:
    index: int
    verts: tuple[int, ...]          # CCW corner vertex ids (2 in 1D, 4 in 2D)
    level: int
    order_key: tuple[int, ...]      # (root index, *child path); total order for the sign rule
    ibox: tuple[int, ...]           # integer bounds (ix0, ix1) or (ix0, iy0, ix1, iy1)
    box: tuple[float, ...]          # float bounds, same layout as ibox

    @property
    def size(self) -> tuple[float, ...]:
        if len(self.box) == 2:
            return (self.box[1] - self.box[0],)
        return (self.box[2] - self.box[0], self.box[3] - self.box[1])

    @property
    def diameter(self) -> float:
        return math.hypot(*self.size)

    @property
    def measure(self) -> float:
        out = 1.0
        for s in self.size:
            out *= s
        return out

    @property
    def center(self) -> tuple[float, ...]:
        if len(self.box) == 2:
            return (0.5 * (self.box[0] + self.box[1]),)
        return (0.5 * (self.box[0] + self.box[2]), 0.5 * (self.box[1] + self.box[3]))


@dataclass(frozen=True)
class Facet:
    """Interface piece between two elements, or a piece of the boundary.

    ``axis`` is the normal direction (0 for vertical facets, 1 for horizontal
    ones; 0 in 1D where a facet is a single point). ``elem_lo``/``elem_hi``
    are the adjacent element ids on the low/high side along the normal axis.
    """

    index: int
    axis: int
    verts: tuple[int, ...]          # endpoint vertex ids, low to high tangent coord; (v,) in 1D
    elem_lo: int | None
    elem_hi: int | None
    kind: str                       # INTERIOR | BOUNDARY | SLIT
    ipos: int                       # integer coordinate along the normal axis
    ispan: tuple[int, int]          # integer tangent interval; (ipos, ipos) in 1D
    pos: float
    span: tuple[float, float]

    @property
    def measure(self) -> float:
        return self.span[1] - self.span[0]

    @property
    def is_boundary(self) -> bool:
        return self.kind != INTERIOR

    def elems(self) -> tuple[int, ...]:
        return tuple(e for e in (self.elem_lo, self.elem_hi) if e is not None)

    def side_of(self, elem: int) -> int:
        """+1 if the outward normal of ``elem`` on this facet is +axis, else -1."""
        if elem == self.elem_lo:
            return +1
        if elem == self.elem_hi:
            return -1
        raise ValueError(f"element {elem} not adjacent to facet {self.index}")


@dataclass
class CoarseMesh:
    dim: int
    domain: tuple[float, ...]       # (x0, x1) or (x0, y0, x1, y1)
    n_roots: int
    crack: Crack | None
    vertices: np.ndarray            # (nv, dim) float coordinates
    vertex_keys: list[tuple[int, ...]]   # integer key per vertex, (ix[, iy, lip])
    elements: list[Element]
    facets: list[Facet]
    # constrained vertex -> ((master_a, master_b), (w_a, w_b))
    hanging: dict[int, tuple[tuple[int, int], tuple[float, float]]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.elem_facets: list[list[int]] = [[] for _ in self.elements]
        for f in self.facets:
            for e in f.elems():
                self.elem_facets[e].append(f.index)
        for lst in self.elem_facets:
            lst.sort()

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def domain_measure(self) -> float:
        if self.dim == 1:
            return self.domain[1] - self.domain[0]
        return (self.domain[2] - self.domain[0]) * (self.domain[3] - self.domain[1])

    def boundary_facets(self) -> list[Facet]:
        return [f for f in self.facets if f.is_boundary]

    def leaf_keys(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        """(root, path) pair per element, aligned with element indices."""
        out = []
        for el in self.elements:
            root = el.order_key[: self.dim] if self.dim == 2 else el.order_key[:1]
            out.append((root, el.order_key[len(root):]))
        return out


def _root_of(order_key: tuple[int, ...], dim: int) -> tuple[int, ...]:
    return order_key[:dim]


def _leaf_ibox(root: tuple[int, ...], path: tuple[int, ...], dim: int) -> tuple[int, ...]:
    if dim == 1:
        ix0 = root[0] * UNIT
        size = UNIT
        for c in path:
            size >>= 1
            ix0 += c * size
        return (ix0, ix0 + size)
    ix0, iy0 = root[0] * UNIT, root[1] * UNIT
    size = UNIT
    for c in path:
        size >>= 1
        ix0 += (c & 1) * size
        iy0 += (c >> 1) * size
    return (ix0, iy0, ix0 + size, iy0 + size)


def _to_float(domain: tuple[float, ...], n: int, dim: int, icoord: int, axis: int) -> float:
    if dim == 1:
        lo, hi = domain
    else:
        lo, hi = (domain[0], domain[2]) if axis == 0 else (domain[1], domain[3])
    return lo + (hi - lo) * (icoord / (n * UNIT))


def build_uniform(domain: tuple[float, ...], n_per_axis: int, crack: Crack | None = None) -> CoarseMesh:
    """Regular n x n coarse mesh (n intervals in 1D) over an axis-aligned box."""
    if n_per_axis < 1:
        raise ValueError("n_per_axis must be >= 1")
    dim = 1 if len(domain) == 2 else 2
    if dim == 1:
        if not domain[1] > domain[0]:
            raise ValueError("degenerate interval")
        leaves = [((i,), ()) for i in range(n_per_axis)]
    else:
        if not (domain[2] > domain[0] and domain[3] > domain[1]):
            raise ValueError("degenerate box")
        leaves = [((i, j), ()) for j in range(n_per_axis) for i in range(n_per_axis)]
    return _build_from_leaves(dim, domain, n_per_axis, crack, leaves)


def refine_elements(mesh: CoarseMesh, marked: set[int] | list[int]) -> CoarseMesh:
    """Split the marked elements; cascade to keep the mesh 1-irregular (2D)."""
    marked = sorted(set(marked))
    for e in marked:
        if not 0 <= e < mesh.n_elements:
            raise ValueError(f"marked element {e} not in mesh")
    leaves = set(mesh.leaf_keys())
    queue = [mesh.leaf_keys()[e] for e in marked]
    while queue:
        leaf = queue.pop()
        if leaf not in leaves:
            continue  # already split by a cascade
        if mesh.dim == 2:
            # 1-irregularity: coarser edge-neighbors must be split first.
            for nb in _coarser_neighbors(leaves, leaf, mesh.dim, mesh.n_roots):
                _split_leaf(leaves, nb)
                queue.extend(_coarser_neighbors(leaves, nb, mesh.dim, mesh.n_roots))
        _split_leaf(leaves, leaf)
    ordered = sorted(leaves, key=lambda lf: lf[0] + lf[1])
    return _build_from_leaves(mesh.dim, mesh.domain, mesh.n_roots, mesh.crack, ordered)


def _split_leaf(leaves: set, leaf) -> None:
    root, path = leaf
    leaves.remove(leaf)
    n_children = 2 if len(root) == 1 else 4
    for c in range(n_children):
        leaves.add((root, path + (c,)))


def _coarser_neighbors(leaves: set, leaf, dim: int, n: int) -> list:
    """Edge-neighbor leaves strictly coarser than ``leaf`` (2D only)."""
    root, path = leaf
    box = _leaf_ibox(root, path, dim)
    level = len(path)
    out = []
    for other in leaves:
        oroot, opath = other
        if len(opath) >= level:
            continue
        obox = _leaf_ibox(oroot, opath, dim)
        if _share_edge(box, obox):
            out.append(other)
    return out


def _share_edge(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    touch_x = ax1 == bx0 or bx1 == ax0
    touch_y = ay1 == by0 or by1 == ay0
    overlap_x = min(ax1, bx1) - max(ax0, bx0)
    overlap_y = min(ay1, by1) - max(ay0, by0)
    return (touch_x and overlap_y > 0) or (touch_y and overlap_x > 0)


def _build_from_leaves(dim, domain, n, crack, leaves) -> CoarseMesh:
    leaves = sorted(leaves, key=lambda lf: lf[0] + lf[1])
    if dim == 1:
        return _build_1d(domain, n, leaves)
    return _build_2d(domain, n, crack, leaves)


def _build_1d(domain, n, leaves) -> CoarseMesh:
    iboxes = [_leaf_ibox(root, path, 1) for root, path in leaves]
    order = sorted(range(len(leaves)), key=lambda i: iboxes[i][0])
    vkeys: dict[tuple[int, ...], int] = {}
    verts: list[float] = []

    def vert(ix: int) -> int:
        key = (ix,)
        if key not in vkeys:
            vkeys[key] = len(verts)
            verts.append(_to_float(domain, n, 1, ix, 0))
        return vkeys[key]

    elements: list[Element] = []
    for new_idx, i in enumerate(order):
        root, path = leaves[i]
        ix0, ix1 = iboxes[i]
        elements.append(Element(
            index=new_idx, verts=(vert(ix0), vert(ix1)), level=len(path),
            order_key=root + path, ibox=(ix0, ix1),
            box=(_to_float(domain, n, 1, ix0, 0), _to_float(domain, n, 1, ix1, 0)),
        ))
    facets: list[Facet] = []
    for k in range(len(elements) + 1):
        if k == 0:
            lo, hi, kind = None, 0, BOUNDARY
            ipos = elements[0].ibox[0]
        elif k == len(elements):
            lo, hi, kind = len(elements) - 1, None, BOUNDARY
            ipos = elements[-1].ibox[1]
        else:
            lo, hi, kind = k - 1, k, INTERIOR
            ipos = elements[k].ibox[0]
            assert elements[k - 1].ibox[1] == ipos
        pos = _to_float(domain, n, 1, ipos, 0)
        facets.append(Facet(index=len(facets), axis=0, verts=(vkeys[(ipos,)],),
                            elem_lo=lo, elem_hi=hi, kind=kind, ipos=ipos,
                            ispan=(ipos, ipos), pos=pos, span=(pos, pos)))
    return CoarseMesh(dim=1, domain=domain, n_roots=n, crack=None,
                      vertices=np.asarray(verts)[:, None], vertex_keys=list(vkeys),
                      elements=elements, facets=facets)


def _build_2d(domain, n, crack, leaves) -> CoarseMesh:
    iboxes = [_leaf_ibox(root, path, 2) for root, path in leaves]
    islit = None
    if crack is not None:
        scale = n * UNIT
        w, h = domain[2] - domain[0], domain[3] - domain[1]
        iy = round((crack.y - domain[1]) / h * scale)
        ix0 = round((crack.x_tip - domain[0]) / w * scale)
        ix1 = round((crack.x_end - domain[0]) / w * scale)
        if ix1 != scale:
            raise ValueError("crack must reach the domain boundary at x_end")
        islit = (iy, ix0, ix1)

    def on_slit_strict(ix: int, iy: int) -> bool:
        return islit is not None and iy == islit[0] and islit[1] < ix <= islit[2]

    vkeys: dict[tuple[int, ...], int] = {}
    verts: list[tuple[float, float]] = []

    def vert(ix: int, iy: int, lip: int) -> int:
        key = (ix, iy, lip if on_slit_strict(ix, iy) else 0)
        if key not in vkeys:
            vkeys[key] = len(verts)
            verts.append((_to_float(domain, n, 2, ix, 0), _to_float(domain, n, 2, iy, 1)))
        return vkeys[key]

    elements: list[Element] = []
    for idx, (root, path) in enumerate(leaves):
        ix0, iy0, ix1, iy1 = iboxes[idx]
        cy = (iy0 + iy1) // 2
        lip = +1 if islit is not None and cy > islit[0] else -1
        corners = (vert(ix0, iy0, lip), vert(ix1, iy0, lip), vert(ix1, iy1, lip), vert(ix0, iy1, lip))
        elements.append(Element(
            index=idx, verts=corners, level=len(path), order_key=root + path,
            ibox=(ix0, iy0, ix1, iy1),
            box=(_to_float(domain, n, 2, ix0, 0), _to_float(domain, n, 2, iy0, 1),
                 _to_float(domain, n, 2, ix1, 0), _to_float(domain, n, 2, iy1, 1)),
        ))

    # Register element sides: (axis, normal pos) -> list of (t0, t1, elem, is_lo_side)
    sides: dict[tuple[int, int], list[tuple[int, int, int, bool]]] = {}
    for el in elements:
        ix0, iy0, ix1, iy1 = el.ibox
        sides.setdefault((0, ix0), []).append((iy0, iy1, el.index, False))
        sides.setdefault((0, ix1), []).append((iy0, iy1, el.index, True))
        sides.setdefault((1, iy0), []).append((ix0, ix1, el.index, False))
        sides.setdefault((1, iy1), []).append((ix0, ix1, el.index, True))

    imax = n * UNIT
    facets: list[Facet] = []
    hanging: dict[int, tuple[tuple[int, int], tuple[float, float]]] = {}

    def fverts(axis: int, ipos: int, t0: int, t1: int, elem_for_lip: int) -> tuple[int, int]:
        cy = (elements[elem_for_lip].ibox[1] + elements[elem_for_lip].ibox[3]) // 2
        lip = +1 if islit is not None and cy > islit[0] else -1
        if axis == 0:
            return (vert(ipos, t0, lip), vert(ipos, t1, lip))
        return (vert(t0, ipos, lip), vert(t1, ipos, lip))

    def add_facet(axis, ipos, t0, t1, elem_lo, elem_hi, kind):
        pos = _to_float(domain, n, 2, ipos, axis)
        span = (_to_float(domain, n, 2, t0, 1 - axis), _to_float(domain, n, 2, t1, 1 - axis))
        ref = elem_lo if elem_lo is not None else elem_hi
        facets.append(Facet(index=len(facets), axis=axis,
                            verts=fverts(axis, ipos, t0, t1, ref),
                            elem_lo=elem_lo, elem_hi=elem_hi, kind=kind,
                            ipos=ipos, ispan=(t0, t1), pos=pos, span=span))

    for (axis, ipos) in sorted(sides):
        entries = sorted(sides[(axis, ipos)])
        slit_here = islit is not None and axis == 1 and ipos == islit[0]

        def in_slit(t0, t1):
            return slit_here and t0 >= islit[1] and t1 <= islit[2]

        # Partition the line into atoms at every segment endpoint (plus the
        # slit tip); each atom has at most one covering element per side.
        breaks = sorted({t for t0, t1, _, _ in entries for t in (t0, t1)}
                        | ({islit[1], islit[2]} if slit_here else set()))
        lo_cover: dict[tuple[int, int], int] = {}
        hi_cover: dict[tuple[int, int], int] = {}
        for t0, t1, e, is_lo in entries:
            cover = lo_cover if is_lo else hi_cover
            i0, i1 = breaks.index(t0), breaks.index(t1)
            for k in range(i0, i1):
                atom = (breaks[k], breaks[k + 1])
                if atom in cover:
                    raise AssertionError("overlapping element sides")
                cover[atom] = e
        for k in range(len(breaks) - 1):
            atom = (breaks[k], breaks[k + 1])
            e_lo, e_hi = lo_cover.get(atom), hi_cover.get(atom)
            if e_lo is None and e_hi is None:
                continue
            if e_lo is not None and e_hi is not None:
                if in_slit(*atom):
                    add_facet(axis, ipos, *atom, e_lo, None, SLIT)
                    add_facet(axis, ipos, *atom, None, e_hi, SLIT)
                else:
                    add_facet(axis, ipos, *atom, e_lo, e_hi, INTERIOR)
            elif _is_domain_boundary(axis, ipos, imax):
                add_facet(axis, ipos, *atom, e_lo, e_hi, BOUNDARY)
            elif in_slit(*atom):
                add_facet(axis, ipos, *atom, e_lo, e_hi, SLIT)
            else:
                raise AssertionError("unmatched interior side segment")
        # Hanging vertices: a coarse element side covered by two interior atoms.
        for t0, t1, e, is_lo in entries:
            if in_slit(t0, t1) or _is_domain_boundary(axis, ipos, imax):
                continue
            tm = (t0 + t1) // 2
            if tm in breaks and breaks.index(t1) - breaks.index(t0) == 2:
                other = hi_cover if is_lo else lo_cover
                if (t0, tm) in other and (tm, t1) in other:
                    _add_hanging(hanging, vert, axis, ipos, t0, tm, t1, elements[e], islit)

    mesh = CoarseMesh(dim=2, domain=domain, n_roots=n, crack=crack,
                      vertices=np.asarray(verts, dtype=float), vertex_keys=list(vkeys),
                      elements=elements, facets=facets, hanging=hanging)
    _check_tiling(mesh)
    return mesh


def _is_domain_boundary(axis: int, ipos: int, imax: int) -> bool:
    return ipos == 0 or ipos == imax


def _boundary_tangent(ipos: int, imax: int) -> bool:
    return ipos in (0, imax)


def _add_hanging(hanging, vert, axis, ipos, t0, tm, t1, coarse_el, islit) -> None:
    cy = (coarse_el.ibox[1] + coarse_el.ibox[3]) // 2
    lip = +1 if islit is not None and cy > islit[0] else -1
    if axis == 0:
        v, a, b = vert(ipos, tm, lip), vert(ipos, t0, lip), vert(ipos, t1, lip)
    else:
        v, a, b = vert(tm, ipos, lip), vert(t0, ipos, lip), vert(t1, ipos, lip)
    hanging[v] = ((a, b), (0.5, 0.5))


def _check_tiling(mesh: CoarseMesh) -> None:
    total = sum(el.measure for el in mesh.elements)
    ref = mesh.domain_measure()
    if abs(total - ref) > 1e-12 * ref:
        raise AssertionError(f"element measures sum to {total}, domain is {ref}")


# ----------------------------------------------------------------------------
# Nested fine meshes and oversampling patches
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class FineMesh:
    """Uniform m^d subdivision of a coarse element (or patch box)."""

    parent: int                  # coarse element id (or -1 for detached boxes)
    dim: int
    box: tuple[float, ...]
    m: tuple[int, ...]           # cells per axis

    @property
    def h(self) -> tuple[float, ...]:
        if self.dim == 1:
            return ((self.box[1] - self.box[0]) / self.m[0],)
        return ((self.box[2] - self.box[0]) / self.m[0],
                (self.box[3] - self.box[1]) / self.m[1])

    @property
    def n_nodes(self) -> int:
        out = 1
        for mm in self.m:
            out *= mm + 1
        return out


def nested_fine_mesh(element: Element, h_target: float) -> FineMesh:
    """Uniform submesh with m = ceil(H_K / h_target) cells per axis."""
    sizes = element.size
    if h_target > max(sizes) * (1 + 1e-12):
        raise ValueError("h_target must be <= H_K")
    m = tuple(max(1, math.ceil(s / h_target - 1e-12)) for s in sizes)
    return FineMesh(parent=element.index, dim=len(sizes), box=element.box, m=m)


@dataclass(frozen=True)
class OversamplingPatch:
    """Axis-aligned sampling box around an element, aligned with its fine grid.

    ``n_ext`` counts extension cells per side (W, E, S, N in 2D); the patch box
    is the element box extended by ``n_ext * h`` and clipped to the domain (and
    away from the crack slit, flagged by ``clipped``).
    """

    element: int
    box: tuple[float, ...]
    n_ext: tuple[int, ...]
    m: tuple[int, ...]
    layer_thickness: float
    clipped: bool

    @property
    def fine(self) -> FineMesh:
        return FineMesh(parent=self.element, dim=1 if len(self.box) == 2 else 2,
                        box=self.box, m=self.m)


def oversampling_patch(mesh: CoarseMesh, element: Element, fine: FineMesh,
                       layer_thickness: float) -> OversamplingPatch:
    """Build S_K: the element extended by ``layer_thickness`` on every side.

    The extension is rounded up to whole fine cells so the patch grid contains
    the element grid as a sub-block, then clipped to the domain. A slit
    overlapping the extension clips it on that side as well.
    """
    if layer_thickness < 0:
        raise ValueError("layer thickness must be >= 0")
    h = fine.h
    dim = mesh.dim
    if dim == 1:
        want = 0 if layer_thickness == 0 else math.ceil(layer_thickness / h[0] - 1e-12)
        x0, x1 = element.box
        lo_avail = int(round((x0 - mesh.domain[0]) / h[0]))
        hi_avail = int(round((mesh.domain[1] - x1) / h[0]))
        nW, nE = min(want, lo_avail), min(want, hi_avail)
        box = (x0 - nW * h[0], x1 + nE * h[0])
        clipped = nW < want or nE < want
        return OversamplingPatch(element.index, box, (nW, nE),
                                 (fine.m[0] + nW + nE,), layer_thickness, clipped)
    x0, y0, x1, y1 = element.box
    wants = [0 if layer_thickness == 0 else math.ceil(layer_thickness / hh - 1e-12)
             for hh in (h[0], h[0], h[1], h[1])]
    avail = [int(round((x0 - mesh.domain[0]) / h[0])),
             int(round((mesh.domain[2] - x1) / h[0])),
             int(round((y0 - mesh.domain[1]) / h[1])),
             int(round((mesh.domain[3] - y1) / h[1]))]
    if mesh.crack is not None:
        c = mesh.crack
        overlaps_x = x1 > c.x_tip - 1e-12 and x0 < c.x_end + 1e-12
        if overlaps_x:
            if y0 >= c.y - 1e-12:   # element above the slit: do not extend below it
                avail[2] = min(avail[2], int(round((y0 - c.y) / h[1])))
            if y1 <= c.y + 1e-12:   # element below the slit
                avail[3] = min(avail[3], int(round((c.y - y1) / h[1])))
    n_ext = tuple(min(w, a) for w, a in zip(wants, avail))
    box = (x0 - n_ext[0] * h[0], y0 - n_ext[2] * h[1],
           x1 + n_ext[1] * h[0], y1 + n_ext[3] * h[1])
    clipped = any(e < w for e, w in zip(n_ext, wants))
    m = (fine.m[0] + n_ext[0] + n_ext[1], fine.m[1] + n_ext[2] + n_ext[3])
    return OversamplingPatch(element.index, box, n_ext, m, layer_thickness, clipped)


# ----------------------------------------------------------------------------
# Plain-text dump
# ----------------------------------------------------------------------------

def dump_mesh(mesh: CoarseMesh) -> str:
    """Plain-text mesh dump: vertex lines `id x [y]`, element lines `id v... level`."""
    lines = [f"# mscre mesh dim={mesh.dim} vertices={mesh.n_vertices} elements={mesh.n_elements}",
             "# vertex: id x" + (" y" if mesh.dim == 2 else ""),
             "# element: id v0 v1" + (" v2 v3" if mesh.dim == 2 else "") + " level"]
    for i, xy in enumerate(mesh.vertices):
        coords = " ".join(f"{c:.12g}" for c in xy)
        lines.append(f"v {i} {coords}")
    for el in mesh.elements:
        vs = " ".join(str(v) for v in el.verts)
        lines.append(f"e {el.index} {vs} {el.level}")
    return "\n".join(lines) + "\n"
