"""Quadrilateral meshes for punctured-strip specimens.

Generates structured strip meshes with an optional circular hole (cut as a
square region replaced by a projected O-grid ring) and an optional notch
realized as a topological slit: faces along the notch line are duplicated so
the two sides share no vertices.  Refinement is isotropic 1->4 with a
1-irregularity guarantee (at most one hanging vertex per edge).

Length unit is mm throughout.  ``target_h`` bounds the axis-aligned extent
of the level-0 background cells; O-grid ring cells keep per-direction sizes
of order ``target_h`` but their bounding boxes may exceed it by a factor of
about sqrt(2) where the ring runs diagonally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .elements import gauss_rule, shape_eval

BOUNDARY_TAGS = ("bottom", "right", "top", "left", "hole", "notch_upper", "notch_lower")

_GEOM_TOL = 1e-9


class MeshError(ValueError):
    """Raised for infeasible mesh specifications or degenerate geometry."""


@dataclass(frozen=True)
class MeshSpec:
    """Geometry and resolution of a rectangular specimen.

    The hole is optional (``hole_center is None`` disables it); the notch is
    optional (``notch_height is None`` or ``notch_length == 0`` disables it)
    and always starts on the left boundary.
    """

    width: float
    height: float
    target_h: float
    hole_center: tuple[float, float] | None = None
    hole_diameter: float = 0.0
    notch_height: float | None = None
    notch_length: float = 0.0
    prerefine_regions: tuple = ()
    # O-grid template knobs: half-width of the cut square as a multiple of the
    # hole radius, and the number of radial layers (None = sized from target_h).
    hole_square_factor: float = 1.5
    ring_layers: int | None = None

    def validate(self):
        if self.width <= 0 or self.height <= 0 or self.target_h <= 0:
            raise MeshError("width, height and target_h must be positive")
        if self.hole_center is not None:
            cx, cy = self.hole_center
            r = 0.5 * self.hole_diameter
            if r <= 0:
                raise MeshError("hole_diameter must be positive when a hole is given")
            margin = min(cx, self.width - cx, cy, self.height - cy)
            if margin <= r:
                raise MeshError(
                    f"hole of radius {r} at ({cx}, {cy}) touches the domain boundary"
                )
        if self.notch_height is not None and self.notch_length > 0:
            if not 0 < self.notch_height < self.height:
                raise MeshError("notch_height must lie strictly inside the domain")
            if self.notch_length >= self.width:
                raise MeshError("notch must not cut through the whole strip")
            if self.hole_center is not None:
                cx, cy = self.hole_center
                r = 0.5 * self.hole_diameter
                if abs(self.notch_height - cy) <= r and self.notch_length >= cx - math.sqrt(
                    max(r * r - (self.notch_height - cy) ** 2, 0.0)
                ):
                    raise MeshError("notch intersects the hole")


@dataclass
class RefinementMarks:
    """Per-cell refinement flags."""

    flags: np.ndarray

    def __post_init__(self):
        self.flags = np.asarray(self.flags, dtype=bool)


class Mesh:
    """Immutable 1-irregular quadrilateral mesh.

    Attributes
    ----------
    vertices : (n, 2) float array
    cells : (m, 4) int array, counterclockwise vertex indices
    cell_level : (m,) int array
    face_cell, face_ledge, face_tag : parallel arrays describing tagged
        boundary faces; local edge ``k`` of a cell joins its local vertices
        ``k`` and ``(k+1) % 4``.
    hanging : dict mapping a hanging vertex id to the (va, vb) vertex pair of
        the coarse edge it sits on.
    parent_cell, child_slot : refinement tree relative to the mesh this one
        was refined from (-1 entries for unrefined/root cells).
    """

    def __init__(self, vertices, cells, cell_level, face_cell, face_ledge,
                 face_tag, hanging=None, hole=None, parent_cell=None,
                 child_slot=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.cells = np.ascontiguousarray(cells, dtype=np.int64)
        self.cell_level = np.ascontiguousarray(cell_level, dtype=np.int64)
        self.face_cell = np.asarray(face_cell, dtype=np.int64)
        self.face_ledge = np.asarray(face_ledge, dtype=np.int64)
        self.face_tag = list(face_tag)
        self.hanging = dict(hanging) if hanging else {}
        self.hole = hole  # (cx, cy, r) or None
        n = len(self.cells)
        self.parent_cell = (np.full(n, -1, dtype=np.int64) if parent_cell is None
                            else np.asarray(parent_cell, dtype=np.int64))
        self.child_slot = (np.full(n, -1, dtype=np.int64) if child_slot is None
                           else np.asarray(child_slot, dtype=np.int64))
        for a in (self.vertices, self.cells, self.cell_level):
            a.flags.writeable = False
        self._edge_map = None

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_cells(self):
        return len(self.cells)

    def edge_map(self):
        """Dict (min_vid, max_vid) -> list of (cell, local_edge)."""
        if self._edge_map is None:
            em = {}
            cells = self.cells
            for c in range(len(cells)):
                for k in range(4):
                    a, b = cells[c, k], cells[c, (k + 1) % 4]
                    key = (a, b) if a < b else (b, a)
                    em.setdefault(key, []).append((c, k))
            self._edge_map = em
        return self._edge_map

    def face_vertices(self, face_index):
        c = self.face_cell[face_index]
        k = self.face_ledge[face_index]
        return self.cells[c, k], self.cells[c, (k + 1) % 4]

    def faces_with_tag(self, tag):
        return [i for i, t in enumerate(self.face_tag) if t == tag]

    def tags_by_edge(self):
        """Dict (cell, ledge) -> tag for all tagged faces."""
        return {
            (c, k): t
            for c, k, t in zip(self.face_cell, self.face_ledge, self.face_tag)
        }

    def cell_diameters(self):
        """Axis-aligned bounding-box extent (max over x/y) per cell."""
        pts = self.vertices[self.cells]  # (m, 4, 2)
        ext = pts.max(axis=1) - pts.min(axis=1)
        return ext.max(axis=1)


def _cell_jacobian_dets(vertices, cells, rule=None):
    """det of the bilinear geometric map at quadrature points, (m, nq)."""
    if rule is None:
        rule = gauss_rule(3)
    _, dN = shape_eval(1, rule.points)          # (nq, 4, 2)
    pts = vertices[cells]                       # (m, 4, 2)
    J = np.einsum("mnd,qns->mqds", pts, dN)     # (m, nq, 2, 2)
    return J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]


def check_positive_jacobians(mesh, where="mesh"):
    dets = _cell_jacobian_dets(mesh.vertices, mesh.cells)
    if not np.all(dets > 0):
        bad = int(np.argwhere(dets.min(axis=1) <= 0)[0, 0])
        raise MeshError(
            f"degenerate cell {bad} in {where}: non-positive Jacobian "
            f"(min det {dets[bad].min():.3e})"
        )


# ---------------------------------------------------------------------------
# Structured generation
# ---------------------------------------------------------------------------

def _axis_partition(length, breaks, target):
    """Grid coordinates on [0, length] with required break lines.

    Each sub-interval between consecutive breaks is split uniformly into the
    smallest count keeping the spacing <= target.
    """
    pts = sorted({0.0, float(length), *(float(b) for b in breaks if 0 < b < length)})
    coords = [0.0]
    for a, b in zip(pts[:-1], pts[1:]):
        n = max(1, math.ceil((b - a) / target - _GEOM_TOL))
        coords.extend(a + (b - a) * (i + 1) / n for i in range(n))
    return np.array(coords)


def _compact_vertices(vertices, cells):
    used = np.unique(cells)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return vertices[used], remap[cells]


def _build_ring(center, radius, outer_vertices, outer_ids, n_layers, first_new_id):
    """O-grid ring between a circle and an enclosing polygon.

    ``outer_vertices``/``outer_ids`` walk the polygon counterclockwise.  The
    innermost vertex layer is the radial projection of the outer walk onto
    the circle; intermediate layers blend linearly.  New vertices are
    numbered from ``first_new_id``.  Returns the new vertex coordinates, the
    ring cells (global ids), and the per-cell flag marking circle-side cells
    (their local edge 0 lies on the hole).
    """
    center = np.asarray(center, dtype=float)
    outer = np.asarray(outer_vertices, dtype=float)
    npts = len(outer)
    d = outer - center
    inner = center + radius * d / np.linalg.norm(d, axis=1)[:, None]

    # layer 0 = circle, layer n_layers = outer polygon (existing ids)
    new_coords = []
    layer_ids = np.empty((n_layers + 1, npts), dtype=np.int64)
    next_id = first_new_id
    for lay in range(n_layers):
        t = lay / n_layers
        coords = inner * (1.0 - t) + outer * t
        layer_ids[lay] = next_id + np.arange(npts)
        next_id += npts
        new_coords.append(coords)
    layer_ids[n_layers] = outer_ids
    cells = []
    on_circle = []
    for lay in range(n_layers):
        a = layer_ids[lay]      # inner (circle side for lay == 0)
        b = layer_ids[lay + 1]  # outer
        for i in range(npts):
            j = (i + 1) % npts
            # counterclockwise: outer pair first, then inner pair reversed
            cells.append((b[i], b[j], a[j], a[i]))
            on_circle.append(lay == 0)
    return np.vstack(new_coords), np.array(cells, dtype=np.int64), np.array(on_circle)


def _square_perimeter_walk(xs, ys, ix0, ix1, iy0, iy1):
    """Counterclockwise walk of grid indices around a square of grid lines."""
    walk = []
    for i in range(ix0, ix1):
        walk.append((i, iy0))
    for j in range(iy0, iy1):
        walk.append((ix1, j))
    for i in range(ix1, ix0, -1):
        walk.append((i, iy1))
    for j in range(iy1, iy0, -1):
        walk.append((ix0, j))
    return walk


def generate_mesh(spec: MeshSpec) -> Mesh:
    """Generate the strip mesh described by ``spec``.

    The background grid is a tensor-product partition whose lines hit the
    notch line, the notch tip and the O-grid square exactly.  Cells inside
    the square around the hole are replaced by a projected ring whose inner
    vertices lie on the exact circle.  Prerefinement regions are applied
    last, via :func:`refine`.
    """
    spec.validate()
    W, H, h = spec.width, spec.height, spec.target_h

    has_hole = spec.hole_center is not None
    has_notch = spec.notch_height is not None and spec.notch_length > 0

    xbreaks, ybreaks = [], []
    if has_notch:
        xbreaks.append(spec.notch_length)
        ybreaks.append(spec.notch_height)
    s = None
    if has_hole:
        cx, cy = spec.hole_center
        r = 0.5 * spec.hole_diameter
        margin = min(cx, W - cx, cy, H - cy)
        s = min(spec.hole_square_factor * r, 0.98 * margin)
        if s < 1.1 * r:
            raise MeshError(
                "hole too close to the boundary to embed the O-grid template"
            )
        xbreaks += [cx - s, cx + s]
        ybreaks += [cy - s, cy + s]
        if has_notch and abs(spec.notch_height - cy) < s and spec.notch_length > cx - s:
            raise MeshError("notch runs into the O-grid region around the hole")

    xs = _axis_partition(W, xbreaks, h)
    ys = _axis_partition(H, ybreaks, h)
    nx, ny = len(xs) - 1, len(ys) - 1

    X, Y = np.meshgrid(xs, ys, indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return i * (ny + 1) + j

    I, J = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    I, J = I.ravel(), J.ravel()
    cells = np.column_stack(
        [vid(I, J), vid(I + 1, J), vid(I + 1, J + 1), vid(I, J + 1)]
    )

    hole = None
    if has_hole:
        hole = (cx, cy, r)
        ix0 = int(np.argmin(np.abs(xs - (cx - s))))
        ix1 = int(np.argmin(np.abs(xs - (cx + s))))
        iy0 = int(np.argmin(np.abs(ys - (cy - s))))
        iy1 = int(np.argmin(np.abs(ys - (cy + s))))
        inside = (I >= ix0) & (I < ix1) & (J >= iy0) & (J < iy1)
        cells = cells[~inside]

        walk = _square_perimeter_walk(xs, ys, ix0, ix1, iy0, iy1)
        outer_ids = np.array([vid(i, j) for i, j in walk])
        outer_xy = vertices[outer_ids]
        if spec.ring_layers is not None:
            n_lay = max(1, int(spec.ring_layers))
        else:
            n_lay = max(2, math.ceil((s * math.sqrt(2.0) - r) / h))
        ring_xy, ring_cells, ring_on_circle = _build_ring(
            (cx, cy), r, outer_xy, outer_ids, n_lay, first_new_id=len(vertices)
        )
        vertices = np.vstack([vertices, ring_xy])
        cells = np.vstack([cells, ring_cells])

    vertices, cells = _compact_vertices(vertices, cells)

    # geometric boundary tagging
    em = {}
    for c in range(len(cells)):
        for k in range(4):
            a, b = cells[c, k], cells[c, (k + 1) % 4]
            key = (a, b) if a < b else (b, a)
            em.setdefault(key, []).append((c, k))
    face_cell, face_ledge, face_tag = [], [], []
    tol = 1e-8 * max(W, H)
    for (a, b), owners in em.items():
        if len(owners) != 1:
            continue
        (c, k) = owners[0]
        pa, pb = vertices[a], vertices[b]
        if abs(pa[1]) < tol and abs(pb[1]) < tol:
            tag = "bottom"
        elif abs(pa[1] - H) < tol and abs(pb[1] - H) < tol:
            tag = "top"
        elif abs(pa[0]) < tol and abs(pb[0]) < tol:
            tag = "left"
        elif abs(pa[0] - W) < tol and abs(pb[0] - W) < tol:
            tag = "right"
        elif hole is not None and (
            abs(np.hypot(*(pa - np.array([cx, cy]))) - r) < 1e-6 * r
            and abs(np.hypot(*(pb - np.array([cx, cy]))) - r) < 1e-6 * r
        ):
            tag = "hole"
        else:
            raise MeshError(f"untaggable boundary edge between {pa} and {pb}")
        face_cell.append(c)
        face_ledge.append(k)
        face_tag.append(tag)

    mesh = Mesh(vertices, cells, np.zeros(len(cells), dtype=np.int64),
                face_cell, face_ledge, face_tag, hole=hole)

    if has_notch:
        mesh = _cut_notch_seam(mesh, spec.notch_height, spec.notch_length)

    check_positive_jacobians(mesh, "generated mesh")

    for box, levels in spec.prerefine_regions:
        for _ in range(int(levels)):
            marks = RefinementMarks(_cells_intersecting_box(mesh, box))
            mesh, _ = refine(mesh, marks)
    return mesh


def _cells_intersecting_box(mesh, box):
    x0, y0, x1, y1 = box
    pts = mesh.vertices[mesh.cells]
    cmin = pts.min(axis=1)
    cmax = pts.max(axis=1)
    return (cmax[:, 0] >= x0) & (cmin[:, 0] <= x1) & \
           (cmax[:, 1] >= y0) & (cmin[:, 1] <= y1)


def _cut_notch_seam(mesh, notch_height, notch_length):
    """Duplicate faces on the notch line into a topological slit.

    Vertices on the notch line strictly left of the tip are doubled; cells
    with centroid above the line are rewired to the copies.  The two sides
    become tagged boundary faces (notch_upper / notch_lower).
    """
    verts = np.array(mesh.vertices)
    cells = np.array(mesh.cells)
    tol = 1e-8 * max(notch_length, 1.0)

    on_line = np.abs(verts[:, 1] - notch_height) < tol
    seam_vids = np.nonzero(on_line & (verts[:, 0] < notch_length - tol))[0]
    if len(seam_vids) == 0:
        return mesh

    # seam edges: both endpoints on the line, midpoint left of the tip
    seam_edges = []
    for (a, b), owners in mesh.edge_map().items():
        if on_line[a] and on_line[b] and 0.5 * (verts[a, 0] + verts[b, 0]) < notch_length - tol:
            if len(owners) != 2:
                raise MeshError("notch line does not lie on interior mesh faces")
            seam_edges.append(((a, b), owners))

    centroid_y = verts[cells].mean(axis=1)[:, 1]
    above = centroid_y > notch_height

    copy_of = {}
    new_coords = []
    for v in seam_vids:
        copy_of[v] = len(verts) + len(new_coords)
        new_coords.append(verts[v])
    verts = np.vstack([verts, np.array(new_coords)])

    for c in np.nonzero(above)[0]:
        for k in range(4):
            v = cells[c, k]
            if v in copy_of:
                cells[c, k] = copy_of[v]

    face_cell = list(mesh.face_cell)
    face_ledge = list(mesh.face_ledge)
    face_tag = list(mesh.face_tag)
    for (_ab, owners) in seam_edges:
        for (c, k) in owners:
            face_cell.append(c)
            face_ledge.append(k)
            face_tag.append("notch_upper" if above[c] else "notch_lower")

    return Mesh(verts, cells, mesh.cell_level, face_cell, face_ledge, face_tag,
                hanging=mesh.hanging, hole=mesh.hole)


# ---------------------------------------------------------------------------
# Refinement
# ---------------------------------------------------------------------------

# child slot k covers the quadrant of the parent reference square that
# contains parent vertex k; (origin, scale): xi_parent = origin + scale*(xi+1)
CHILD_REF_ORIGIN = np.array([(-1.0, -1.0), (0.0, -1.0), (0.0, 0.0), (-1.0, 0.0)])


def refine(mesh: Mesh, marks: RefinementMarks):
    """Isotropically refine the marked cells (1 -> 4 children).

    Additional cells are refined as needed to keep the mesh 1-irregular.
    Returns ``(new_mesh, changed)`` where ``changed`` is False for an empty
    effective mark set (the input mesh is returned unchanged then).

    Each new cell records its parent index and child slot, so fields can be
    transferred by embedding interpolation (children tile the parent exactly
    in reference coordinates).
    """
    flags = np.array(marks.flags, dtype=bool)
    if flags.shape != (mesh.n_cells,):
        raise MeshError(
            f"marks have {flags.size} flags for {mesh.n_cells} cells"
        )
    if not flags.any():
        return mesh, False

    cells = mesh.cells
    level = mesh.cell_level
    em = mesh.edge_map()
    hanging_by_edge = {}
    for hv, (a, b) in mesh.hanging.items():
        key = (a, b) if a < b else (b, a)
        hanging_by_edge[key] = hv

    # closure: refining the fine side of a hanging edge forces the coarse owner
    changed = True
    while changed:
        changed = False
        for c in np.nonzero(flags)[0]:
            for k in range(4):
                a, b = cells[c, k], cells[c, (k + 1) % 4]
                for hvert, other in ((a, b), (b, a)):
                    parent_edge = mesh.hanging.get(hvert)
                    if parent_edge is None or other not in parent_edge:
                        continue
                    key = tuple(sorted(parent_edge))
                    owners = em.get(key, [])
                    for (cc, _kk) in owners:
                        if not flags[cc]:
                            flags[cc] = True
                            changed = True

    verts = [mesh.vertices]
    next_vid = mesh.n_vertices
    hole = mesh.hole
    tag_of = mesh.tags_by_edge()

    # midpoint vertex per refined edge (reusing hanging vertices)
    mid_of_edge = {}

    def edge_midpoint(c, k):
        nonlocal next_vid
        a, b = cells[c, k], cells[c, (k + 1) % 4]
        key = (a, b) if a < b else (b, a)
        if key in mid_of_edge:
            return mid_of_edge[key]
        if key in hanging_by_edge:
            mid_of_edge[key] = hanging_by_edge[key]
            return mid_of_edge[key]
        p = 0.5 * (mesh.vertices[a] + mesh.vertices[b])
        if hole is not None and tag_of.get((c, k)) == "hole":
            cx, cy, r = hole
            d = p - (cx, cy)
            p = np.array([cx, cy]) + r * d / np.hypot(*d)
        mid_of_edge[key] = next_vid
        verts.append(p[None, :])
        next_vid += 1
        return mid_of_edge[key]

    new_cells = []
    new_level = []
    new_parent = []
    new_slot = []
    child_ids = {}   # old cell -> list of 4 new cell ids
    copy_ids = {}    # old unmarked cell -> new cell id

    for c in range(mesh.n_cells):
        if not flags[c]:
            copy_ids[c] = len(new_cells)
            new_cells.append(cells[c])
            new_level.append(level[c])
            new_parent.append(c)
            new_slot.append(-1)
            continue
        m = [edge_midpoint(c, k) for k in range(4)]
        center = next_vid
        verts.append(mesh.vertices[cells[c]].mean(axis=0)[None, :])
        next_vid += 1
        v = cells[c]
        quads = [
            (v[0], m[0], center, m[3]),
            (m[0], v[1], m[1], center),
            (center, m[1], v[2], m[2]),
            (m[3], center, m[2], v[3]),
        ]
        ids = []
        for slot, quad in enumerate(quads):
            ids.append(len(new_cells))
            new_cells.append(np.array(quad))
            new_level.append(level[c] + 1)
            new_parent.append(c)
            new_slot.append(slot)
        child_ids[c] = ids

    new_cells = np.array(new_cells, dtype=np.int64)
    vertices = np.vstack(verts)

    # hanging vertices: retained old ones plus new midpoints on edges of
    # unrefined cells
    new_hanging = {}
    for hv, (a, b) in mesh.hanging.items():
        key = (a, b) if a < b else (b, a)
        if key not in mid_of_edge:
            new_hanging[hv] = (a, b)
    for c in range(mesh.n_cells):
        if flags[c]:
            continue
        for k in range(4):
            a, b = cells[c, k], cells[c, (k + 1) % 4]
            key = (a, b) if a < b else (b, a)
            if key in mid_of_edge and key not in hanging_by_edge:
                new_hanging[mid_of_edge[key]] = (a, b)

    face_cell, face_ledge, face_tag = [], [], []
    for c, k, tag in zip(mesh.face_cell, mesh.face_ledge, mesh.face_tag):
        if not flags[c]:
            face_cell.append(copy_ids[c])
            face_ledge.append(k)
            face_tag.append(tag)
        else:
            for child in (k, (k + 1) % 4):
                face_cell.append(child_ids[c][child])
                face_ledge.append(k)
                face_tag.append(tag)

    out = Mesh(vertices, new_cells, np.array(new_level), face_cell, face_ledge,
               face_tag, hanging=new_hanging, hole=hole,
               parent_cell=np.array(new_parent), child_slot=np.array(new_slot))
    if hole is not None:
        check_positive_jacobians(out, "refined mesh")
    return out, True


def embedding_map(new_mesh: Mesh):
    """Reference-coordinate embedding of new cells into their source cells.

    Returns ``(old_cell, origin, scale)`` arrays such that a reference point
    ``xi`` in new cell ``c`` corresponds to ``origin[c] + scale[c]*(xi + 1)``
    in old cell ``old_cell[c]`` (identity map encoded for unrefined cells).
    """
    slot = new_mesh.child_slot
    origin = np.where(slot[:, None] >= 0,
                      CHILD_REF_ORIGIN[np.clip(slot, 0, 3)],
                      np.array([-1.0, -1.0]))
    scale = np.where(slot >= 0, 0.5, 1.0)
    return new_mesh.parent_cell, origin, scale


def write_mesh_txt(mesh: Mesh, path):
    """Plain-text mesh dump (vertex list + connectivity) for debugging."""
    with open(path, "w") as f:
        f.write(f"# vertices {mesh.n_vertices}\n")
        for p in mesh.vertices:
            f.write(f"{p[0]:.12g} {p[1]:.12g}\n")
        f.write(f"# cells {mesh.n_cells}\n")
        for quad, lvl in zip(mesh.cells, mesh.cell_level):
            f.write(f"{quad[0]} {quad[1]} {quad[2]} {quad[3]} level={lvl}\n")
        f.write(f"# faces {len(mesh.face_tag)}\n")
        for c, k, t in zip(mesh.face_cell, mesh.face_ledge, mesh.face_tag):
            f.write(f"{c} {k} {t}\n")
