"""DoF distribution and affine constraints for the Q2/Q1/Q1 field triple.

Scalar Q1 nodes coincide with mesh vertices; Q2 nodes add edge midpoints and
cell centers.  Vector fields interleave components node-major.  Constraints
cover hanging nodes (linear interpolation for Q1, quadratic edge
interpolation for Q2) and Dirichlet data; they are closed (no constrained
DoF remains a master) and eliminated by condensation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .elements import nodes_of, shape_eval


class DofError(ValueError):
    """Inconsistent Dirichlet data or constraint construction failure."""


@dataclass(frozen=True)
class FieldSpec:
    name: str
    degree: int
    components: int = 1


# the solver's standard triples
MIXED_FIELDS = (FieldSpec("u", 2, 2), FieldSpec("p", 1, 1), FieldSpec("phi", 1, 1))


def classical_fields(u_degree=2):
    return (FieldSpec("u", u_degree, 2), FieldSpec("phi", 1, 1))


@dataclass
class FieldDofs:
    spec: FieldSpec
    offset: int              # first global dof of this field
    n_nodes: int
    cell_nodes: np.ndarray   # (m, nodes_per_cell) field-node ids
    node_coords: np.ndarray  # (n_nodes, 2)

    @property
    def n_dofs(self):
        return self.n_nodes * self.spec.components

    def cell_dofs(self):
        """Global dof ids per cell, (m, nodes_per_cell * components)."""
        comp = self.spec.components
        nd = self.cell_nodes
        if comp == 1:
            return self.offset + nd
        out = np.empty((nd.shape[0], nd.shape[1] * comp), dtype=np.int64)
        for c in range(comp):
            out[:, c::comp] = self.offset + nd * comp + c
        return out

    def global_dof(self, node, component=0):
        return self.offset + node * self.spec.components + component


class DofMap:
    """Global numbering for a tuple of fields on one mesh."""

    def __init__(self, mesh, fields):
        self.mesh = mesh
        self.fields = {}
        offset = 0
        self._edge_nodes_cache = {}
        for fs in fields:
            fd = self._distribute_field(mesh, fs, offset)
            self.fields[fs.name] = fd
            offset += fd.n_dofs
        self.n_dofs = offset

    def _distribute_field(self, mesh, fs, offset):
        nv = mesh.n_vertices
        if fs.degree == 1:
            cell_nodes = mesh.cells.copy()
            coords = mesh.vertices.copy()
            n_nodes = nv
        elif fs.degree == 2:
            edge_nodes = self._edge_nodes(mesh)
            ne = len(edge_nodes)
            m = mesh.n_cells
            cell_nodes = np.empty((m, 9), dtype=np.int64)
            cell_nodes[:, :4] = mesh.cells
            for c in range(m):
                for k in range(4):
                    a, b = mesh.cells[c, k], mesh.cells[c, (k + 1) % 4]
                    cell_nodes[c, 4 + k] = nv + edge_nodes[(a, b) if a < b else (b, a)]
            cell_nodes[:, 8] = nv + ne + np.arange(m)
            coords = np.empty((nv + ne + m, 2))
            coords[:nv] = mesh.vertices
            for (a, b), i in edge_nodes.items():
                coords[nv + i] = 0.5 * (mesh.vertices[a] + mesh.vertices[b])
            coords[nv + ne:] = mesh.vertices[mesh.cells].mean(axis=1)
            n_nodes = nv + ne + m
        else:
            raise DofError(f"unsupported degree {fs.degree}")
        return FieldDofs(fs, offset, n_nodes, cell_nodes, coords)

    def _edge_nodes(self, mesh):
        if id(mesh) not in self._edge_nodes_cache:
            order = {}
            for c in range(mesh.n_cells):
                for k in range(4):
                    a, b = mesh.cells[c, k], mesh.cells[c, (k + 1) % 4]
                    key = (a, b) if a < b else (b, a)
                    if key not in order:
                        order[key] = len(order)
            self._edge_nodes_cache[id(mesh)] = order
        return self._edge_nodes_cache[id(mesh)]

    def field(self, name) -> FieldDofs:
        return self.fields[name]

    def counts(self):
        return {name: fd.n_dofs for name, fd in self.fields.items()}

    def field_slice(self, name):
        fd = self.fields[name]
        return slice(fd.offset, fd.offset + fd.n_dofs)

    def boundary_nodes(self, tag, name):
        """Field-node ids lying on faces with the given tag."""
        fd = self.fields[name]
        mesh = self.mesh
        nodes = set()
        for c, k, t in zip(mesh.face_cell, mesh.face_ledge, mesh.face_tag):
            if t != tag:
                continue
            nodes.add(int(fd.cell_nodes[c, k]))
            nodes.add(int(fd.cell_nodes[c, (k + 1) % 4]))
            if fd.spec.degree == 2:
                nodes.add(int(fd.cell_nodes[c, 4 + k]))
        return np.array(sorted(nodes), dtype=np.int64)


def distribute_dofs(mesh, fields=MIXED_FIELDS) -> DofMap:
    """Number the DoFs of the given fields on ``mesh``.

    Deterministic in the mesh topology; seam faces carry duplicated vertices
    at mesh level, so their DoFs are automatically distinct on both sides.
    """
    return DofMap(mesh, fields)


# ---------------------------------------------------------------------------
# Constraints
# ---------------------------------------------------------------------------

# component keys accepted in Dirichlet programs
_COMPONENT_KEYS = {"ux": ("u", 0), "uy": ("u", 1), "p": ("p", 0), "phi": ("phi", 0)}


@dataclass
class ConstraintSet:
    """Closed affine constraints ``x_i = sum_j w_ij x_j + g_i``."""

    n_dofs: int
    entries: dict = field(default_factory=dict)  # dof -> (list[(master, w)], g)

    def is_constrained(self, dof):
        return dof in self.entries

    def finalize(self):
        """Close chains and build the prolongation operator."""
        for dof in list(self.entries):
            self.entries[dof] = self._resolve(dof, depth=0)
        constrained = np.fromiter(self.entries.keys(), dtype=np.int64,
                                  count=len(self.entries))
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[constrained] = False
        self.free_dofs = np.nonzero(mask)[0]
        self.free_index = np.full(self.n_dofs, -1, dtype=np.int64)
        self.free_index[self.free_dofs] = np.arange(len(self.free_dofs))

        rows, cols, vals = [], [], []
        g = np.zeros(self.n_dofs)
        rows.extend(self.free_dofs)
        cols.extend(range(len(self.free_dofs)))
        vals.extend([1.0] * len(self.free_dofs))
        for dof, (masters, inhom) in self.entries.items():
            g[dof] = inhom
            for m, w in masters:
                rows.append(dof)
                cols.append(self.free_index[m])
                vals.append(w)
        self.P = sp.csr_matrix(
            (vals, (rows, cols)), shape=(self.n_dofs, len(self.free_dofs))
        )
        self.g = g
        return self

    def _resolve(self, dof, depth):
        if depth > 64:
            raise DofError(f"constraint chain too deep at dof {dof}")
        masters, inhom = self.entries[dof]
        out = {}
        g = inhom
        for m, w in masters:
            if m in self.entries:
                sub, sub_g = self._resolve(m, depth + 1)
                g += w * sub_g
                for mm, ww in sub:
                    out[mm] = out.get(mm, 0.0) + w * ww
            else:
                out[m] = out.get(m, 0.0) + w
        return (list(out.items()), g)

    @property
    def n_free(self):
        return len(self.free_dofs)

    def apply(self, x):
        """Overwrite constrained entries from masters + inhomogeneity."""
        return self.P @ x[self.free_dofs] + self.g

    def condense(self, matrix, rhs):
        Jc = (self.P.T @ matrix @ self.P).tocsr()
        return Jc, self.P.T @ rhs

    def expand(self, x_free):
        """Homogeneous expansion of a free-DoF increment (no inhomogeneity)."""
        return self.P @ x_free


def build_constraints(mesh, dofmap: DofMap, dirichlet=None, t=0.0) -> ConstraintSet:
    """Hanging-node and Dirichlet constraints at evaluation time ``t``.

    ``dirichlet`` maps a boundary tag to component values, e.g.
    ``{"top": {"ux": 0.0, "uy": 0.0}, "bottom": {"uy": lambda x, y, t: -3.3*t}}``.
    Values may be constants or callables of ``(x, y, t)``.  Dirichlet data
    overrides hanging constraints on the same DoF; two different prescribed
    values on one DoF are rejected.
    """
    cs = ConstraintSet(dofmap.n_dofs)
    edge_nodes = dofmap._edge_nodes(mesh)
    nv = mesh.n_vertices

    for name, fd in dofmap.fields.items():
        comp = fd.spec.components
        for hv, (a, b) in mesh.hanging.items():
            if fd.spec.degree == 1:
                for c in range(comp):
                    cs.entries[fd.global_dof(hv, c)] = (
                        [(fd.global_dof(a, c), 0.5), (fd.global_dof(b, c), 0.5)],
                        0.0,
                    )
            else:
                key = (a, b) if a < b else (b, a)
                if key not in edge_nodes:
                    raise DofError(f"missing coarse edge node for hanging vertex {hv}")
                mid = nv + edge_nodes[key]
                for c in range(comp):
                    cs.entries[fd.global_dof(hv, c)] = (
                        [(fd.global_dof(mid, c), 1.0)],
                        0.0,
                    )
                # fine-edge midpoints sit at the quarter points of (a, b)
                for near, far in ((a, b), (b, a)):
                    fkey = (near, hv) if near < hv else (hv, near)
                    if fkey not in edge_nodes:
                        raise DofError(
                            f"missing fine edge node on hanging edge {(near, hv)}"
                        )
                    fine_mid = nv + edge_nodes[fkey]
                    for c in range(comp):
                        cs.entries[fd.global_dof(fine_mid, c)] = (
                            [
                                (fd.global_dof(near, c), 0.375),
                                (fd.global_dof(mid, c), 0.75),
                                (fd.global_dof(far, c), -0.125),
                            ],
                            0.0,
                        )

    if dirichlet:
        assigned = {}
        for tag, values in dirichlet.items():
            for key, value in values.items():
                if key not in _COMPONENT_KEYS:
                    raise DofError(f"unknown Dirichlet component '{key}'")
                fname, c = _COMPONENT_KEYS[key]
                if fname not in dofmap.fields:
                    continue
                fd = dofmap.fields[fname]
                for node in dofmap.boundary_nodes(tag, fname):
                    x, y = fd.node_coords[node]
                    val = value(x, y, t) if callable(value) else float(value)
                    dof = fd.global_dof(node, c)
                    if dof in assigned and abs(assigned[dof] - val) > 1e-12 * (
                        1.0 + abs(val)
                    ):
                        raise DofError(
                            f"conflicting Dirichlet values {assigned[dof]} and "
                            f"{val} for {key} at node {node} ({x:.6g}, {y:.6g})"
                        )
                    assigned[dof] = val
                    cs.entries[dof] = ([], val)

    return cs.finalize()
